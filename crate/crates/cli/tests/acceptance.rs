//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 7-9 train desk-scale models and are skipped unless `--ignored`
//! or `--include-ignored` is given. Their artifacts go to
//! `$UNIPART_DESK_DIR` (default: a directory under the cargo target tmp dir)
//! and finished stages are reused on the next run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unipart_core::config::RunConfig;
use unipart_core::dataset::{read_split, DatasetConfig};
use unipart_core::eval::{chamfer, chamfer_brute, miou, miou_exhaustive, MetricReport};
use unipart_core::flow::{cfm_loss, cfm_target, interpolate, sample};
use unipart_core::latent_seg::{assign_partition, mask_iou, nms_masks, PartMask};
use unipart_core::part_dit::{DualSpaceLatent, PartCondition, PartDit, PartDitConfig};
use unipart_core::pipeline::{evaluate_parts, evaluate_vae, ground_truth_parts, smallest_quartile_chamfer, PartEvalRow};
use unipart_core::procgen::{generate_shape, render_condition, sample_queries, sample_surface, sdf_and_label, Camera, ShapeConfig};
use unipart_core::train::gradient_check;
use unipart_core::vae::{EncoderInput, GeomSegVae, ReconLoss, VaeConfig, VaeDraw, VaeLossConfig, POSITION_PREFIX};
use unipart_core::whole_dit::{WholeDit, WholeDitConfig};
use unipart_geometry::vec3::{self, Vec3};
use unipart_geometry::{compose_part, marching_cubes, normalize_mesh, winding_number_contains, Aabb, NormTarget};
use unipart_tensor::{Checkpoint, Tensor};

type Verdict = (bool, String);

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
}

fn gradients() -> Result<Verdict> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut track = |name: &str, r: unipart_tensor::gradcheck::GradCheckReport| {
        log_line(&format!("  gradcheck {name}: {} entries, max rel error {:.2e}", r.checked, r.max_rel_error));
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    };

    let vae_cfg = VaeConfig {
        latents: 4,
        latent_dim: 8,
        width: 8,
        heads: 2,
        encoder_blocks: 1,
        decoder_blocks: 1,
        seg_layers: 1,
        fourier_freqs: 1,
        input_points: 32,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut vae = GeomSegVae::new(vae_cfg.clone(), &mut rng)?;
    let spec = generate_shape(3, &ShapeConfig { min_parts: 2, max_parts: 2, ..ShapeConfig::default() })?;
    let surface = sample_surface(&spec, 32, &mut rng)?;
    let input = EncoderInput::new(&surface, spec.num_parts(), &vae_cfg)?;
    for recon in [ReconLoss::Bce, ReconLoss::Mse] {
        let loss = VaeLossConfig { prompts: 3, queries: 12, kl_weight: 0.1, recon, ..Default::default() };
        let q = sample_queries(&spec, &surface, loss.queries, 0.5, 0.05, &mut rng);
        let draw = VaeDraw::new(q, &vae_cfg, &loss, &mut rng);
        let r = vae.with_store(|net, store| gradient_check(store, |t| Ok(net.loss(t, &input, &draw, &loss, true)?.0), 1e-5))?;
        track(&format!("vae {recon:?}"), r);
    }
    vae.store.set_trainable("", false);
    vae.store.set_trainable(POSITION_PREFIX, true);
    let r = vae.with_store(|net, store| gradient_check(store, |t| net.position_loss(t, &input), 1e-5))?;
    track("vae position", r);

    let image = render_condition(&spec, &Camera { resolution: 16 });
    let whole_cfg = WholeDitConfig { width: 8, depth: 2, heads: 2, patch: 8, image_size: 16, latents: 4, latent_dim: 8 };
    let mut whole = WholeDit::new(whole_cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
    let (z0, eps) = (randn(&[4, 8], 4), randn(&[4, 8], 5));
    for cond in [Some(&image), None] {
        let r = whole.with_store(|net, store| gradient_check(store, |t| net.loss(t, &z0, &eps, 0.37, cond), 1e-5))?;
        track(if cond.is_some() { "whole" } else { "whole uncond" }, r);
    }

    let base = PartDitConfig { width: 8, depth: 2, heads: 2, patch: 8, image_size: 16, latents: 4, latent_dim: 8, ..Default::default() };
    let toggles = [
        ("part", base.clone()),
        ("part no-ncs", PartDitConfig { use_ncs: false, ..base.clone() }),
        ("part no-local", PartDitConfig { local_attention: false, ..base.clone() }),
        ("part no-space", PartDitConfig { space_embedding: false, ..base.clone() }),
        ("part point-cond", PartDitConfig { point_condition: true, ..base.clone() }),
        ("part no-whole", PartDitConfig { whole_condition: false, ..base.clone() }),
    ];
    let anchors: Vec<Vec3> = (0..4).map(|i| [0.1 * i as f64, -0.2, 0.3]).collect();
    for (name, cfg) in toggles {
        let mut m = PartDit::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(2))?;
        let cond = PartCondition::new(Some(image.clone()), randn(&[4, 8], 3), vec![2, 0], &anchors)?;
        let target = DualSpaceLatent { gcs: randn(&[4, 8], 30), ncs: cfg.use_ncs.then(|| randn(&[4, 8], 31)) };
        let eps = randn(&[cfg.spaces() * 4, 8], 32);
        let whole_n = m.whole_normalized(&cond)?;
        let r = m.with_store(|net, store| {
            gradient_check(store, |t| Ok(net.loss(t, &target, &cond, &whole_n, &eps, 0.61, cond.image.as_ref())?.0), 1e-5)
        })?;
        track(name, r);
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-4 && elapsed < Duration::from_secs(120);
    Ok((pass, format!("{checked} gradient entries, max rel error {worst:.2e} (<= 1e-4), {:.1}s (< 120s)", elapsed.as_secs_f64())))
}

fn flow_exactness() -> Result<Verdict> {
    let z0 = randn(&[256, 32], 11);
    let eps = randn(&[256, 32], 12);
    let v = cfm_target(&z0, &eps)?;
    let mut worst = 0.0f64;
    for steps in [1, 10, 50] {
        let out = sample(eps.clone(), steps, "oracle", |_, _| Ok(v.clone()))?;
        worst = worst.max(out.max_abs_diff(&z0));
    }
    Ok((worst <= 1e-9, format!("steps {{1,10,50}}: max |Z - Z0| {worst:.2e} (<= 1e-9)")))
}

fn endpoints() -> Result<Verdict> {
    let mut ok = true;
    for seed in 0..10 {
        let z0 = randn(&[16, 8], 2 * seed);
        let eps = randn(&[16, 8], 2 * seed + 1);
        ok &= interpolate(&z0, &eps, 0.0)? == z0;
        ok &= interpolate(&z0, &eps, 1.0)? == eps;
        let target = cfm_target(&z0, &eps)?;
        ok &= cfm_loss(&target, &z0, &eps)? == 0.0;
    }
    Ok((ok, "interpolate at t=0 and t=1 and cfm_loss(eps - Z0) exact on 10 draws".into()))
}

fn geometry() -> Result<Verdict> {
    let mut notes = Vec::new();
    let mut pass = true;

    let mut agree_min = 1.0f64;
    for seed in 0..20 {
        let spec = generate_shape(seed, &ShapeConfig::default())?;
        let mesh = marching_cubes(
            |pts: &[Vec3]| pts.iter().map(|&p| 0.5 - spec.sdf(p)).collect(),
            Aabb::signed_unit(),
            48,
            0.5,
        )?
        .mesh;
        let pts = cloud(10_000, 1000 + seed);
        let inside = winding_number_contains(&mesh, &pts);
        let (sdf, _) = sdf_and_label(&spec, &pts);
        let agree = sdf.iter().zip(&inside).filter(|(d, &i)| (**d < 0.0) == i).count() as f64 / pts.len() as f64;
        agree_min = agree_min.min(agree);
    }
    pass &= agree_min >= 0.995;
    notes.push(format!("winding/SDF agreement min {:.4} (>= 0.995)", agree_min));

    let sphere = marching_cubes(
        |pts: &[Vec3]| pts.iter().map(|&p| 0.5 - (vec3::norm(p) - 0.5)).collect(),
        Aabb::signed_unit(),
        64,
        0.5,
    )?
    .mesh;
    let exact = std::f64::consts::PI;
    let rel = (sphere.area() - exact).abs() / exact;
    pass &= rel < 0.02;
    notes.push(format!("sphere area error {:.4} (< 0.02)", rel));

    let mut chamfer_equal = true;
    for seed in 0..20 {
        let (a, b) = (cloud(100, seed), cloud(100, seed + 100));
        for sq in [false, true] {
            chamfer_equal &= chamfer(&a, &b, sq)? == chamfer_brute(&a, &b, sq)?;
        }
    }
    pass &= chamfer_equal;
    notes.push(format!("kd Chamfer == brute {chamfer_equal}"));

    let mut cases = 0;
    let mut hungarian_equal = true;
    for l in 1..=4 {
        let all = labelings(l, 4);
        for gt in &all {
            let gt: Vec<u32> = gt.iter().map(|&x| x as u32).collect();
            for pred in &all {
                cases += 1;
                hungarian_equal &= (miou(pred, &gt)? - miou_exhaustive(pred, &gt)?).abs() < 1e-12;
            }
        }
    }
    pass &= hungarian_equal;
    notes.push(format!("Hungarian == exhaustive on {cases} cases {hungarian_equal}"));
    Ok((pass, notes.join("; ")))
}

fn labelings(l: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..l {
        out = out.into_iter().flat_map(|v| (0..k).map(move |x| [v.clone(), vec![x]].concat())).collect();
    }
    out
}

fn composition() -> Result<Verdict> {
    let cfg = DatasetConfig::default();
    let mut worst = 0.0f64;
    let mut parts = 0;
    for seed in 0..20 {
        let spec = generate_shape(seed, &cfg.shape)?;
        for part in ground_truth_parts(&spec, 32)? {
            let (ncs, _) = normalize_mesh(&part, NormTarget::Unit)?;
            let back = compose_part(&ncs, &part.aabb().context("empty part")?)?;
            for (a, b) in back.vertices.iter().zip(&part.vertices) {
                worst = worst.max(vec3::norm(vec3::sub(*a, *b)));
            }
            parts += 1;
        }
    }
    Ok((worst <= 1e-9, format!("{parts} parts, max vertex error {worst:.2e} (<= 1e-9)")))
}

fn mask(prompt: usize, l: usize, members: &[usize], score: f64) -> PartMask {
    let mut m = vec![false; l];
    members.iter().for_each(|&i| m[i] = true);
    PartMask { prompt, members: m, score }
}

fn segmentation_algebra() -> Result<Verdict> {
    let mut ok = true;
    // A contains B with IoU 0.6; C is disjoint.
    let a = mask(0, 10, &[0, 1, 2, 3, 4], 0.9);
    let b = mask(1, 10, &[0, 1, 2], 0.8);
    let c = mask(2, 10, &[7, 8, 9], 0.7);
    ok &= (mask_iou(&a.members, &b.members) - 0.6).abs() < 1e-15;
    ok &= nms_masks(&[b.clone(), c.clone(), a.clone()], 0.5) == vec![2, 1];
    ok &= nms_masks(&[a, b, c], 0.7) == vec![0, 1, 2];

    let anchors: Vec<Vec3> = (0..6).map(|i| [i as f64, 0.0, 0.0]).collect();
    // Latent 2 is an orphan and goes to the nearer centroid (x = 0.5).
    let (groups, assign) = assign_partition(&[mask(0, 6, &[0, 1], 0.9), mask(5, 6, &[3, 4, 5], 0.8)], &anchors)?;
    ok &= assign == vec![0, 0, 0, 1, 1, 1] && groups[0].indices == vec![0, 1, 2];
    let (_, assign) = assign_partition(&[mask(0, 6, &[0, 1, 2, 3], 0.6), mask(5, 6, &[2, 3, 4, 5], 0.8)], &anchors)?;
    ok &= assign == vec![0, 0, 1, 1, 1, 1];

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut covers = 0;
    for _ in 0..2000 {
        let l = rng.random_range(1..40);
        let n = rng.random_range(1..8);
        let anchors: Vec<Vec3> = (0..l).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let masks: Vec<PartMask> = (0..n)
            .map(|_| PartMask { prompt: rng.random_range(0..l), members: (0..l).map(|_| rng.random_bool(0.3)).collect(), score: rng.random() })
            .collect();
        let kept: Vec<PartMask> = nms_masks(&masks, 0.5).into_iter().map(|i| masks[i].clone()).collect();
        let (groups, assign) = assign_partition(&kept, &anchors)?;
        let mut seen = vec![0usize; l];
        for (g, group) in groups.iter().enumerate() {
            for &j in &group.indices {
                seen[j] += 1;
                ok &= assign[j] == g;
            }
            ok &= !group.indices.is_empty();
        }
        ok &= seen.iter().all(|&c| c == 1);
        covers += 1;
    }
    Ok((ok, format!("hand traces reproduced; {covers} random partitions are disjoint covers of [0, L)")))
}

struct Cli {
    root: PathBuf,
}

impl Cli {
    fn run(&self, args: &[&str]) -> Result<Output> {
        let out = Command::new(env!("CARGO_BIN_EXE_unipart")).args(args).current_dir(&self.root).output()?;
        Ok(out)
    }

    fn ok(&self, args: &[&str]) -> Result<Output> {
        let out = self.run(args)?;
        if !out.status.success() {
            bail!("`unipart {}` failed:\n{}", args.join(" "), String::from_utf8_lossy(&out.stderr));
        }
        Ok(out)
    }
}

/// Runs every stage at the micro scale with paths relative to `root`.
fn micro_pipeline(root: &Path) -> Result<()> {
    let cli = Cli { root: root.into() };
    let cfg = cli.ok(&["config", "--micro"])?;
    fs::write(root.join("micro.toml"), &cfg.stdout)?;
    cli.ok(&["dataset", "--config", "micro.toml", "--out", "data", "--seed-range", "0..64"])?;
    let train = |cmd: &str, out: &str, vae: Option<&str>| -> Result<()> {
        let mut args = vec![cmd, "--config", "micro.toml", "--data", "data", "--out", out];
        if let Some(v) = vae {
            args.extend(["--vae", v]);
        }
        cli.ok(&args).map(|_| ())
    };
    train("train-vae", "vae", None)?;
    train("train-pos", "pos", Some("vae/vae.ckpt"))?;
    train("train-whole", "whole", Some("pos/vae.ckpt"))?;
    train("train-part", "part", Some("pos/vae.ckpt"))?;
    cli.ok(&["export", "--config", "micro.toml", "--data", "data", "--limit", "3", "--out-dir", "refs"])?;
    let image = first_with_extension(&root.join("refs"), "cimg")?;
    let image = format!("refs/{image}");
    cli.ok(&["generate-whole", "--config", "micro.toml", "--whole", "whole/whole.ckpt", "--image", &image, "--out-dir", "gw"])?;
    cli.ok(&[
        "segment-latent", "--config", "micro.toml", "--checkpoint", "pos/vae.ckpt",
        "--input-latent", "gw/whole_latent.ckpt", "--out-dir", "seg",
    ])?;
    cli.ok(&[
        "generate-parts", "--config", "micro.toml", "--vae", "pos/vae.ckpt", "--part", "part/part.ckpt",
        "--image", &image, "--whole-latent", "gw/whole_latent.ckpt", "--seg", "seg/segmentation.json", "--out-dir", "gp",
    ])?;
    for name in sorted_with_extension(&root.join("refs"), "cimg")? {
        let stem = name.trim_end_matches(".cimg");
        cli.ok(&[
            "generate", "--config", "micro.toml", "--vae", "pos/vae.ckpt", "--whole", "whole/whole.ckpt",
            "--part", "part/part.ckpt", "--image", &format!("refs/{name}"), "--out-dir", &format!("gen/{stem}"),
        ])?;
    }
    cli.ok(&["eval", "--config", "micro.toml", "--pred-dir", "gen", "--gt-dir", "refs", "--report", "eval/report.csv"])?;
    cli.ok(&[
        "eval", "--config", "micro.toml", "--data", "data", "--vae", "pos/vae.ckpt", "--whole", "whole/whole.ckpt",
        "--part", "part/part.ckpt", "--limit", "3", "--report", "bench/report.csv",
    ])?;
    cli.ok(&["export", "--input", "gp/object.obj", "--out", "gp_object.ply"])?;
    Ok(())
}

fn sorted_with_extension(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .filter(|n| n.ends_with(&format!(".{ext}")))
        .collect();
    names.sort();
    Ok(names)
}

fn first_with_extension(dir: &Path, ext: &str) -> Result<String> {
    sorted_with_extension(dir, ext)?.into_iter().next().with_context(|| format!("no .{ext} in {}", dir.display()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let path = e?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root)?.to_string_lossy().to_string();
            out.insert(rel, fs::read(&path)?);
        }
    }
    Ok(())
}

/// Manifests compared with their wall-clock times removed.
fn comparable(name: &str, bytes: &[u8]) -> Result<Vec<u8>> {
    if !name.ends_with("manifest.json") {
        return Ok(bytes.to_vec());
    }
    let mut v: serde_json::Value = serde_json::from_slice(bytes)?;
    for e in v["entries"].as_array_mut().context("manifest without entries")? {
        e.as_object_mut().context("bad manifest entry")?.remove("wall_time_secs");
    }
    Ok(serde_json::to_vec(&v)?)
}

fn determinism() -> Result<Verdict> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    let start = Instant::now();
    micro_pipeline(a.path())?;
    micro_pipeline(b.path())?;
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    collect_files(a.path(), a.path(), &mut fa)?;
    collect_files(b.path(), b.path(), &mut fb)?;
    ensure!(fa.keys().eq(fb.keys()), "runs wrote different file sets");
    let mut differ = Vec::new();
    for (name, bytes) in &fa {
        if comparable(name, bytes)? != comparable(name, &fb[name])? {
            differ.push(name.clone());
        }
    }

    let report: MetricReport = serde_json::from_str(&fs::read_to_string(a.path().join("eval/report.json"))?)?;
    let bench: MetricReport = serde_json::from_str(&fs::read_to_string(a.path().join("bench/report.json"))?)?;
    let smoke = report.objects + report.failures.len() == 3 && bench.miou.is_some();

    let cli = Cli { root: a.path().into() };
    let missing = cli.run(&["train-part", "--data", "data", "--vae", "nowhere/vae.ckpt", "--out", "p2"])?;
    let message = String::from_utf8_lossy(&missing.stderr);
    let guided = !missing.status.success() && message.contains("run `unipart train-vae` first");

    let detail = format!(
        "{} artifacts compared across two runs, {} differ{}; smoke eval {}; missing-VAE error {}; {:.1}s",
        fa.len(),
        differ.len(),
        if differ.is_empty() { String::new() } else { format!(" ({})", differ.join(", ")) },
        if smoke { "ok" } else { "incomplete" },
        if guided { "ok" } else { "unhelpful" },
        start.elapsed().as_secs_f64()
    );
    Ok((differ.is_empty() && smoke && guided, detail))
}

/// Desk-scale artifacts shared by criteria 7-9.
struct Desk {
    root: PathBuf,
    cli: Cli,
}

impl Desk {
    fn open() -> Result<Self> {
        let root = std::env::var_os("UNIPART_DESK_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("desk"));
        fs::create_dir_all(&root)?;
        let cli = Cli { root: root.clone() };
        if !root.join("desk.toml").exists() {
            fs::write(root.join("desk.toml"), RunConfig::default().to_toml()?)?;
        }
        Ok(Desk { root, cli })
    }

    /// Runs a stage unless its directory already has a manifest.
    fn stage(&self, dir: &str, args: &[&str]) -> Result<()> {
        if self.root.join(dir).join("manifest.json").exists() {
            return Ok(());
        }
        log_line(&format!("  desk: unipart {}", args.join(" ")));
        self.cli.ok(args).map(|_| ())
    }

    fn base(&self) -> Result<()> {
        self.stage("data", &["dataset", "--config", "desk.toml", "--out", "data", "--seed-range", "0..2500", "--split-fractions", "0.84,0.08,0.08"])?;
        let train = |cmd: &str, out: &str, vae: Option<&str>, config: &str| -> Result<()> {
            let mut args = vec![cmd, "--config", config, "--data", "data", "--out", out];
            if let Some(v) = vae {
                args.extend(["--vae", v]);
            }
            self.stage(out, &args)
        };
        train("train-vae", "vae", None, "desk.toml")?;
        train("train-pos", "pos", Some("vae/vae.ckpt"), "desk.toml")?;
        train("train-whole", "whole", Some("pos/vae.ckpt"), "desk.toml")?;
        train("train-part", "part", Some("pos/vae.ckpt"), "desk.toml")
    }

    fn variant(&self, name: &str, edit: impl FnOnce(&mut PartDitConfig)) -> Result<PathBuf> {
        let config = format!("{name}.toml");
        let mut cfg = RunConfig::default();
        edit(&mut cfg.part);
        fs::write(self.root.join(&config), cfg.to_toml()?)?;
        self.stage(name, &["train-part", "--config", &config, "--data", "data", "--vae", "pos/vae.ckpt", "--out", name])?;
        Ok(self.root.join(name).join("part.ckpt"))
    }

    fn test_records(&self, n: usize) -> Result<Vec<unipart_core::dataset::Record>> {
        let mut r = read_split(&self.root.join("data/test.bin"))?;
        r.truncate(n);
        Ok(r)
    }
}

fn vae_desk() -> Result<Verdict> {
    let desk = Desk::open()?;
    desk.base()?;
    let vae = GeomSegVae::from_checkpoint(Checkpoint::read(desk.root.join("pos/vae.ckpt"))?)?;
    let cfg = RunConfig::default();
    let r = evaluate_vae(&vae, &desk.test_records(200)?, &cfg.vae_loss, &cfg.seg)?;
    let pass = r.occupancy_accuracy >= 0.95 && r.segmentation_accuracy >= 0.90 && r.position_error < 0.05;
    Ok((
        pass,
        format!(
            "{} held-out objects: occupancy {:.4} (>= 0.95), segmentation {:.4} (>= 0.90), anchor error {:.4} (< 0.05)",
            r.objects, r.occupancy_accuracy, r.segmentation_accuracy, r.position_error
        ),
    ))
}

fn end_to_end() -> Result<Verdict> {
    let desk = Desk::open()?;
    desk.base()?;
    desk.stage(
        "bench",
        &[
            "eval", "--config", "desk.toml", "--data", "data", "--vae", "pos/vae.ckpt", "--whole", "whole/whole.ckpt",
            "--part", "part/part.ckpt", "--limit", "50", "--report", "bench/report.csv",
        ],
    )?;
    let report: MetricReport = serde_json::from_str(&fs::read_to_string(desk.root.join("bench/report.json"))?)?;
    // Failed objects score zero.
    let n = (report.rows.len() + report.failures.len()) as f64;
    let f10 = report.rows.iter().map(|r| r.f_at_010).sum::<f64>() / n;
    let miou = report.rows.iter().filter_map(|r| r.miou).sum::<f64>() / n;
    Ok((
        n >= 50.0 && f10 >= 0.8 && miou >= 0.7,
        format!("{n} objects, {} failed: F@0.10 {f10:.4} (>= 0.8), mIoU {miou:.4} (>= 0.7)", report.failures.len()),
    ))
}

fn ablations() -> Result<Verdict> {
    let desk = Desk::open()?;
    desk.base()?;
    let no_ncs = desk.variant("part-no-ncs", |p| p.use_ncs = false)?;
    let no_space = desk.variant("part-no-space", |p| p.space_embedding = false)?;
    let vae = GeomSegVae::from_checkpoint(Checkpoint::read(desk.root.join("pos/vae.ckpt"))?)?;
    let cfg = RunConfig::default();
    let records = desk.test_records(50)?;
    let rows = |path: &Path| -> Result<Vec<PartEvalRow>> {
        let part = PartDit::from_checkpoint(Checkpoint::read(path)?)?;
        Ok(evaluate_parts(&vae, &part, &records, &cfg.sampler, &cfg.decode, &cfg.eval)?)
    };
    let full = rows(&desk.root.join("part/part.ckpt"))?;
    let without_ncs = rows(&no_ncs)?;
    let without_space = rows(&no_space)?;
    let failures = |r: &[PartEvalRow]| r.iter().filter(|x| x.failed).count();
    let small = |r: &[PartEvalRow]| smallest_quartile_chamfer(r).unwrap_or(f64::INFINITY);
    let (cd_full, cd_no_ncs) = (small(&full), small(&without_ncs));
    let (fail_full, fail_no_space) = (failures(&full), failures(&without_space));
    Ok((
        cd_no_ncs - cd_full > 0.0 && fail_no_space > fail_full,
        format!(
            "small-part CD full {cd_full:.4} vs no-NCS {cd_no_ncs:.4}; composition failures full {fail_full} vs no-space {fail_no_space} of {}",
            full.len()
        ),
    ))
}

fn log_line(s: &str) {
    eprintln!("{s}");
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let heavy = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let only: Option<usize> = args.iter().find_map(|a| a.strip_prefix("criterion=").and_then(|n| n.parse().ok()));
    type Criterion = (usize, &'static str, bool, fn() -> Result<Verdict>);
    let criteria: [Criterion; 10] = [
        (1, "gradient integrity", false, gradients),
        (2, "flow exactness", false, flow_exactness),
        (3, "endpoint identities", false, endpoints),
        (4, "geometry kernel oracles", false, geometry),
        (5, "composition round trip", false, composition),
        (6, "latent segmentation algebra", false, segmentation_algebra),
        (7, "desk-scale VAE", true, vae_desk),
        (8, "end-to-end toy benchmark", true, end_to_end),
        (9, "ablation direction", true, ablations),
        (10, "determinism", false, determinism),
    ];
    let mut failed = 0;
    for (n, name, ignored, run) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        if ignored && !heavy {
            println!("criterion {n} ({name}): IGNORED (desk-scale training; run with --ignored)");
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e:#}")),
        };
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {n} ({name}): {} [{secs:.1}s] {detail}", if pass { "PASS" } else { "FAIL" });
        failed += usize::from(!pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
