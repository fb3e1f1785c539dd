//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unipart_core::config::RunConfig;
use unipart_core::dataset::{generate_dataset, read_split, split_checksum, DatasetManifest, Record};
use unipart_core::eval::{pose_search_eval, MetricReport, ObjectRow};
use unipart_core::latent_seg::{segment_latent, SegmentationResult};
use unipart_core::model_io::{load_latent, save_latent};
use unipart_core::part_dit::{train_part as fit_part, PartDit};
use unipart_core::pipeline::{
    evaluate_generation, exploded, ground_truth_mesh, part_examples, whole_example, DecodedPart, GeneratedObject,
    PartStatus,
};
use unipart_core::procgen::ConditionImage;
use unipart_core::vae::GeomSegVae;
use unipart_core::vae_train::{train_position, train_vae as fit_vae};
use unipart_core::whole_dit::{train_whole as fit_whole, WholeDit};
use unipart_geometry::io::{label_color, read_obj, read_ply, write_obj, write_ply, write_point_cloud_ply};
use unipart_geometry::TriMesh;
use unipart_tensor::Checkpoint;

use crate::run::{load_config, require, sha256_file, FileHash, Stage};
use crate::{SampleArgs, TrainArgs};

const POSITION_KEY: &str = "position";

pub fn print_config(micro: bool) -> Result<()> {
    let cfg = if micro { RunConfig::micro() } else { RunConfig::default() };
    print!("{}", cfg.to_toml()?);
    Ok(())
}

fn parse_range(text: &str, what: &str) -> Result<(u64, u64)> {
    let (a, b) = text.split_once("..").with_context(|| format!("{what} must look like `A..B`, got `{text}`"))?;
    Ok((a.trim().parse()?, b.trim().parse()?))
}

fn config_input(stage: &mut Stage, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        stage.input(FileHash { path: p.display().to_string(), sha256: sha256_file(p)? });
    }
    Ok(())
}

pub fn dataset(config: Option<&Path>, out: &Path, seed_range: &str, parts: Option<&str>, fractions: &[f64]) -> Result<()> {
    let mut cfg = load_config(config)?;
    let (start, end) = parse_range(seed_range, "--seed-range")?;
    if let Some(p) = parts {
        let (lo, hi) = parse_range(p, "--parts")?;
        cfg.dataset.shape.min_parts = lo as usize;
        cfg.dataset.shape.max_parts = hi as usize;
    }
    cfg.dataset.shape.validate()?;
    fs::create_dir_all(out)?;
    let mut stage = Stage::begin("dataset", out, &cfg)?;
    config_input(&mut stage, config)?;
    let manifest = generate_dataset(out, start, end, fractions, &cfg.dataset)?;
    stage.output(DatasetManifest::FILE);
    for s in &manifest.splits {
        stage.output(&s.file);
        stage.metric(&format!("{}_records", s.name), s.records as f64);
    }
    stage.finish()
}

/// Reads a split, checking it against the dataset's own checksums.
fn load_split(data: &Path, split: &str) -> Result<(DatasetManifest, Vec<Record>, FileHash)> {
    if !data.join(DatasetManifest::FILE).exists() {
        bail!("no dataset in {}; run `unipart dataset` first", data.display());
    }
    let manifest = DatasetManifest::read(data)?;
    let entry = manifest.split(split).with_context(|| format!("dataset has no `{split}` split"))?;
    let file = data.join(&entry.file);
    let hash = require(&file, "dataset")?;
    let records = read_split(&file)?;
    if split_checksum(&records) != entry.checksum {
        bail!("{} does not match its dataset.json checksum; re-run `unipart dataset`", file.display());
    }
    Ok((manifest, records, hash))
}

fn load_vae(path: &Path, need_position: bool) -> Result<(GeomSegVae, FileHash)> {
    let hash = require(path, "train-vae")?;
    let ck = Checkpoint::read(path)?;
    let trained = ck.metadata.get(POSITION_KEY).is_some_and(|v| v == "trained");
    if need_position && !trained {
        bail!("{} has no trained position decoder; run `unipart train-pos` first", path.display());
    }
    Ok((GeomSegVae::from_checkpoint(ck)?, hash))
}

fn load_whole(path: &Path) -> Result<(WholeDit, FileHash)> {
    let hash = require(path, "train-whole")?;
    Ok((WholeDit::from_checkpoint(Checkpoint::read(path)?)?, hash))
}

fn load_part(path: &Path) -> Result<(PartDit, FileHash)> {
    let hash = require(path, "train-part")?;
    Ok((PartDit::from_checkpoint(Checkpoint::read(path)?)?, hash))
}

fn load_image(path: &Path) -> Result<(ConditionImage, FileHash)> {
    if !path.exists() {
        bail!("{} not found; `unipart export --data ... --split ...` writes condition images", path.display());
    }
    let hash = FileHash { path: path.display().to_string(), sha256: sha256_file(path)? };
    Ok((ConditionImage::read(path)?, hash))
}

fn write_losses(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut head = vec!["step"];
    head.extend_from_slice(header);
    w.write_record(&head)?;
    for (step, row) in rows.enumerate() {
        let mut rec = vec![step.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Config for a training stage: file or defaults, with the dataset section
/// taken from the dataset itself.
fn train_config(args: &TrainArgs, manifest: &DatasetManifest) -> Result<RunConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.dataset = manifest.config;
    Ok(cfg)
}

fn log_step(stage: &str) -> impl FnMut(usize, f64) + '_ {
    move |step, loss| log::info!("{stage} step {step}: loss {loss:.6}")
}

pub fn train_vae(args: &TrainArgs) -> Result<()> {
    let (manifest, records, data_hash) = load_split(&args.data, "train")?;
    let mut cfg = train_config(args, &manifest)?;
    if let Some(s) = args.steps {
        cfg.vae_train.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.vae_train.seed = s;
    }
    cfg.validate()?;
    let mut stage = Stage::begin("train-vae", &args.out, &cfg)?;
    config_input(&mut stage, args.config.as_deref())?;
    stage.input(data_hash);
    let mut vae = GeomSegVae::new(cfg.vae.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.vae_train.seed))?;
    let history = fit_vae(&mut vae, &records, &cfg.vae_loss, &cfg.vae_train, |step, p| {
        log::info!("train-vae step {step}: total {:.5} recon {:.5} seg {:.5} kl {:.5}", p.total, p.recon, p.seg, p.kl)
    })?;
    vae.to_checkpoint()?.write(stage.path("vae.ckpt"))?;
    stage.output("vae.ckpt");
    write_losses(
        &stage.path("loss.csv"),
        &["recon", "focal", "dice", "iou", "seg", "kl", "total"],
        history.iter().map(|p| vec![p.recon, p.focal, p.dice, p.iou, p.seg, p.kl, p.total]),
    )?;
    stage.output("loss.csv");
    if let Some(last) = history.last() {
        stage.metric("final_total", last.total);
        stage.metric("final_recon", last.recon);
    }
    stage.finish()
}

pub fn train_pos(args: &TrainArgs, vae_path: &Path) -> Result<()> {
    let (manifest, records, data_hash) = load_split(&args.data, "train")?;
    let (mut vae, vae_hash) = load_vae(vae_path, false)?;
    let mut cfg = train_config(args, &manifest)?;
    cfg.vae = vae.config.clone();
    if let Some(s) = args.steps {
        cfg.pos_train.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.pos_train.seed = s;
    }
    cfg.validate()?;
    let mut stage = Stage::begin("train-pos", &args.out, &cfg)?;
    config_input(&mut stage, args.config.as_deref())?;
    stage.input(data_hash);
    stage.input(vae_hash);
    let history = train_position(&mut vae, &records, &cfg.pos_train, log_step("train-pos"))?;
    let mut ck = vae.to_checkpoint()?;
    ck.metadata.insert(POSITION_KEY.into(), "trained".into());
    ck.write(stage.path("vae.ckpt"))?;
    stage.output("vae.ckpt");
    write_losses(&stage.path("loss.csv"), &["loss"], history.iter().map(|&l| vec![l]))?;
    stage.output("loss.csv");
    if let Some(&l) = history.last() {
        stage.metric("final_loss", l);
    }
    stage.finish()
}

pub fn train_whole(args: &TrainArgs, vae_path: &Path) -> Result<()> {
    let (manifest, records, data_hash) = load_split(&args.data, "train")?;
    let (vae, vae_hash) = load_vae(vae_path, false)?;
    let mut cfg = train_config(args, &manifest)?;
    cfg.vae = vae.config.clone();
    if let Some(s) = args.steps {
        cfg.whole_train.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.whole_train.seed = s;
    }
    cfg.validate()?;
    let mut stage = Stage::begin("train-whole", &args.out, &cfg)?;
    config_input(&mut stage, args.config.as_deref())?;
    stage.input(data_hash);
    stage.input(vae_hash);
    let examples = records.iter().map(|r| whole_example(&vae, r)).collect::<unipart_core::Result<Vec<_>>>()?;
    let mut model = WholeDit::new(cfg.whole.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.whole_train.seed))?;
    let history = fit_whole(&mut model, &examples, &cfg.whole_train, log_step("train-whole"))?;
    model.to_checkpoint()?.write(stage.path("whole.ckpt"))?;
    stage.output("whole.ckpt");
    write_losses(&stage.path("loss.csv"), &["loss"], history.iter().map(|&l| vec![l]))?;
    stage.output("loss.csv");
    if let Some(&l) = history.last() {
        stage.metric("final_loss", l);
    }
    stage.finish()
}

pub fn train_part(args: &TrainArgs, vae_path: &Path) -> Result<()> {
    let (manifest, records, data_hash) = load_split(&args.data, "train")?;
    let (vae, vae_hash) = load_vae(vae_path, false)?;
    let mut cfg = train_config(args, &manifest)?;
    cfg.vae = vae.config.clone();
    if let Some(s) = args.steps {
        cfg.part_train.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.part_train.seed = s;
    }
    cfg.validate()?;
    let mut stage = Stage::begin("train-part", &args.out, &cfg)?;
    config_input(&mut stage, args.config.as_deref())?;
    stage.input(data_hash);
    stage.input(vae_hash);
    let mut examples = Vec::new();
    for r in &records {
        examples.extend(part_examples(&vae, r, cfg.part.use_ncs)?);
    }
    log::info!("train-part: {} part examples from {} objects", examples.len(), records.len());
    let mut model = PartDit::new(cfg.part.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.part_train.seed))?;
    let history = fit_part(&mut model, &examples, &cfg.part_train, log_step("train-part"))?;
    model.to_checkpoint()?.write(stage.path("part.ckpt"))?;
    stage.output("part.ckpt");
    write_losses(&stage.path("loss.csv"), &["loss"], history.iter().map(|&l| vec![l]))?;
    stage.output("loss.csv");
    if let Some(&l) = history.last() {
        stage.metric("final_loss", l);
    }
    stage.finish()
}

fn sample_config(args: &SampleArgs) -> Result<RunConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.sampler.seed = s;
    }
    if let Some(s) = args.steps {
        cfg.sampler.steps = s;
    }
    if let Some(s) = args.cfg_scale {
        cfg.sampler.cfg_scale = s;
    }
    cfg.sampler.validate()?;
    Ok(cfg)
}

pub fn generate_whole(args: &SampleArgs, whole_path: &Path, image_path: &Path, out: &Path) -> Result<()> {
    let mut cfg = sample_config(args)?;
    let (whole, whole_hash) = load_whole(whole_path)?;
    let (image, image_hash) = load_image(image_path)?;
    cfg.whole = whole.config.clone();
    let mut stage = Stage::begin("generate-whole", out, &cfg)?;
    config_input(&mut stage, args.config.as_deref())?;
    stage.input(whole_hash);
    stage.input(image_hash);
    let z = whole.generate(&image, &cfg.sampler)?;
    save_latent(&stage.path("whole_latent.ckpt"), &z)?;
    stage.output("whole_latent.ckpt");
    stage.finish()
}

fn write_segmentation(stage: &mut Stage, seg: &SegmentationResult) -> Result<()> {
    fs::write(stage.path("segmentation.json"), serde_json::to_string_pretty(seg)? + "\n")?;
    stage.output("segmentation.json");
    let colors: Vec<[u8; 3]> = seg.assignment.iter().map(|&g| label_color(g as u32)).collect();
    write_point_cloud_ply(&stage.path("anchors.ply"), &seg.anchors, &colors)?;
    stage.output("anchors.ply");
    stage.metric("parts", seg.num_parts() as f64);
    Ok(())
}

pub fn segment(
    config: Option<&Path>,
    vae_path: &Path,
    latent_path: &Path,
    k: Option<usize>,
    nms_iou: Option<f64>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(k) = k {
        cfg.seg.prompts = k;
    }
    if let Some(t) = nms_iou {
        cfg.seg.nms_iou = t;
    }
    let (vae, vae_hash) = load_vae(vae_path, true)?;
    let latent_hash = require(latent_path, "generate-whole")?;
    cfg.vae = vae.config.clone();
    let mut stage = Stage::begin("segment-latent", out, &cfg)?;
    config_input(&mut stage, config)?;
    stage.input(vae_hash);
    stage.input(latent_hash);
    let z = load_latent(latent_path)?;
    let seg = segment_latent(&vae, &z, &cfg.seg)?;
    log::info!("segment-latent: {} parts", seg.num_parts());
    write_segmentation(&mut stage, &seg)?;
    stage.finish()
}

fn write_parts(stage: &mut Stage, parts: &[DecodedPart], mesh: &TriMesh, explode: f64) -> Result<()> {
    let mut summary = Vec::new();
    let mut kept = Vec::new();
    for (i, p) in parts.iter().enumerate() {
        let status = serde_json::to_value(p.status)?;
        summary.push(serde_json::json!({ "part": i, "status": status, "faces": p.mesh.num_faces() }));
        if p.status != PartStatus::Skipped {
            let name = format!("part_{i:02}.obj");
            write_obj(&stage.path(&name), &p.mesh)?;
            stage.output(&name);
            kept.push(p.mesh.clone());
        }
    }
    fs::write(stage.path("parts.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    stage.output("parts.json");
    write_obj(&stage.path("object.obj"), mesh)?;
    stage.output("object.obj");
    write_obj(&stage.path("exploded.obj"), &exploded(&kept, explode))?;
    stage.output("exploded.obj");
    stage.metric("parts", parts.len() as f64);
    stage.metric("skipped", parts.iter().filter(|p| p.status == PartStatus::Skipped).count() as f64);
    Ok(())
}

pub fn generate_parts(
    args: &SampleArgs,
    vae_path: &Path,
    part_path: &Path,
    image_path: &Path,
    latent_path: &Path,
    seg_path: &Path,
    out: &Path,
) -> Result<()> {
    let mut cfg = sample_config(args)?;
    let (vae, vae_hash) = load_vae(vae_path, false)?;
    let (part, part_hash) = load_part(part_path)?;
    let (image, image_hash) = load_image(image_path)?;
    let latent_hash = require(latent_path, "generate-whole")?;
    let seg_hash = require(seg_path, "segment-latent")?;
    cfg.vae = vae.config.clone();
    cfg.part = part.config.clone();
    let mut stage = Stage::begin("generate-parts", out, &cfg)?;
    config_input(&mut stage, args.config.as_deref())?;
    for h in [vae_hash, part_hash, image_hash, latent_hash, seg_hash] {
        stage.input(h);
    }
    let z = load_latent(latent_path)?;
    let seg: SegmentationResult = serde_json::from_str(&fs::read_to_string(seg_path)?)?;
    let parts = unipart_core::pipeline::generate_parts(&vae, &part, Some(&image), &z, &seg, &cfg.sampler, cfg.decode.resolution)?;
    let obj = GeneratedObject::from_parts(z, seg, parts);
    write_parts(&mut stage, &obj.parts, &obj.mesh, cfg.decode.explode)?;
    stage.finish()
}

pub fn generate(args: &SampleArgs, vae_path: &Path, whole_path: &Path, part_path: &Path, image_path: &Path, out: &Path) -> Result<()> {
    let mut cfg = sample_config(args)?;
    let (vae, vae_hash) = load_vae(vae_path, true)?;
    let (whole, whole_hash) = load_whole(whole_path)?;
    let (part, part_hash) = load_part(part_path)?;
    let (image, image_hash) = load_image(image_path)?;
    cfg.vae = vae.config.clone();
    cfg.whole = whole.config.clone();
    cfg.part = part.config.clone();
    let mut stage = Stage::begin("generate", out, &cfg)?;
    config_input(&mut stage, args.config.as_deref())?;
    for h in [vae_hash, whole_hash, part_hash, image_hash] {
        stage.input(h);
    }
    let obj = unipart_core::pipeline::generate_object(&vae, &whole, &part, &image, &cfg.generate())?;
    save_latent(&stage.path("whole_latent.ckpt"), &obj.whole)?;
    stage.output("whole_latent.ckpt");
    write_segmentation(&mut stage, &obj.segmentation)?;
    write_parts(&mut stage, &obj.parts, &obj.mesh, cfg.decode.explode)?;
    stage.finish()
}

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Generated meshes: `<name>.obj` or `<name>/object.obj` per object.
    #[arg(long, requires = "gt_dir")]
    pub pred_dir: Option<PathBuf>,
    /// Reference meshes `<name>.obj`.
    #[arg(long)]
    pub gt_dir: Option<PathBuf>,
    /// Benchmark mode: generate every object of a dataset split.
    #[arg(long, conflicts_with_all = ["pred_dir", "gt_dir"], requires_all = ["vae", "whole", "part"])]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub vae: Option<PathBuf>,
    #[arg(long)]
    pub whole: Option<PathBuf>,
    #[arg(long)]
    pub part: Option<PathBuf>,
    /// Evaluate only the first N objects.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Pick the best rotation per metric instead of the Chamfer-optimal one.
    #[arg(long)]
    pub per_metric_best: bool,
    /// CSV report path; the JSON report is written next to it.
    #[arg(long)]
    pub report: PathBuf,
}

fn find_prediction(dir: &Path, stem: &str) -> Option<PathBuf> {
    [dir.join(format!("{stem}.obj")), dir.join(stem).join("object.obj")].into_iter().find(|p| p.exists())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.eval.per_metric_best |= args.per_metric_best;
    let dir = args.report.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = args.report.file_name().context("--report needs a file name")?.to_string_lossy().to_string();
    let json = args.report.with_extension("json").file_name().unwrap().to_string_lossy().to_string();

    if let Some(data) = &args.data {
        let (manifest, mut records, data_hash) = load_split(data, &args.split)?;
        if let Some(n) = args.limit {
            records.truncate(n);
        }
        let (vae, vae_hash) = load_vae(args.vae.as_deref().unwrap(), true)?;
        let (whole, whole_hash) = load_whole(args.whole.as_deref().unwrap())?;
        let (part, part_hash) = load_part(args.part.as_deref().unwrap())?;
        cfg.dataset = manifest.config;
        cfg.vae = vae.config.clone();
        cfg.whole = whole.config.clone();
        cfg.part = part.config.clone();
        cfg.validate()?;
        let mut stage = Stage::begin("eval", dir, &cfg)?;
        config_input(&mut stage, args.config.as_deref())?;
        for h in [data_hash, vae_hash, whole_hash, part_hash] {
            stage.input(h);
        }
        let report = evaluate_generation(&vae, &whole, &part, &records, &cfg.generate(), &cfg.eval)?;
        return finish_report(stage, &report, &args.report, &name, &json);
    }

    let (Some(pred), Some(gt)) = (&args.pred_dir, &args.gt_dir) else {
        bail!("give either --pred-dir and --gt-dir, or --data with --vae, --whole and --part");
    };
    let mut refs: Vec<PathBuf> = fs::read_dir(gt)
        .with_context(|| format!("reading {}", gt.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "obj"))
        .collect();
    refs.sort();
    if let Some(n) = args.limit {
        refs.truncate(n);
    }
    if refs.is_empty() {
        bail!("no reference meshes in {}; `unipart export` writes them", gt.display());
    }
    let mut stage = Stage::begin("eval", dir, &cfg)?;
    config_input(&mut stage, args.config.as_deref())?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in &refs {
        let stem = r.file_stem().unwrap().to_string_lossy().to_string();
        let Some(p) = find_prediction(pred, &stem) else {
            log::warn!("no prediction for {stem}");
            failures.push(stem);
            continue;
        };
        stage.input(FileHash { path: r.display().to_string(), sha256: sha256_file(r)? });
        stage.input(FileHash { path: p.display().to_string(), sha256: sha256_file(&p)? });
        let pm = read_obj(&p)?;
        if pm.is_empty() {
            log::warn!("prediction for {stem} is empty");
            failures.push(stem);
            continue;
        }
        let s = pose_search_eval(&pm, &read_obj(r)?, &cfg.eval)?;
        rows.push(ObjectRow {
            object: stem,
            cd: s.cd,
            f_at_005: s.f_at_005,
            f_at_010: s.f_at_010,
            best_rotation: s.best_rotation,
            miou: None,
        });
    }
    let report = MetricReport::from_rows(rows, failures);
    finish_report(stage, &report, &args.report, &name, &json)
}

fn finish_report(mut stage: Stage, report: &MetricReport, path: &Path, name: &str, json: &str) -> Result<()> {
    report.write(path)?;
    stage.output(name);
    stage.output(json);
    stage.metric("cd", report.cd);
    stage.metric("f_at_005", report.f_at_005);
    stage.metric("f_at_010", report.f_at_010);
    if let Some(m) = report.miou {
        stage.metric("miou", m);
    }
    stage.metric("failures", report.failures.len() as f64);
    log::info!(
        "eval: {} objects, CD {:.4}, F@0.05 {:.4}, F@0.10 {:.4}, {} failures",
        report.objects,
        report.cd,
        report.f_at_005,
        report.f_at_010,
        report.failures.len()
    );
    stage.finish()
}

#[derive(Args, Clone, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, requires = "out_dir")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Mesh format for references: `obj` or `ply`.
    #[arg(long, default_value = "obj")]
    pub format: String,
    /// Mesh to convert; the output format follows the `--out` extension.
    #[arg(long, conflicts_with = "data", requires = "out")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn write_mesh(path: &Path, mesh: &TriMesh) -> Result<()> {
    match path.extension().and_then(|x| x.to_str()) {
        Some("obj") => Ok(write_obj(path, mesh)?),
        Some("ply") => Ok(write_ply(path, mesh)?),
        _ => bail!("{}: mesh files must end in .obj or .ply", path.display()),
    }
}

fn read_mesh(path: &Path) -> Result<TriMesh> {
    match path.extension().and_then(|x| x.to_str()) {
        Some("obj") => Ok(read_obj(path)?),
        Some("ply") => Ok(read_ply(path)?),
        _ => bail!("{}: mesh files must end in .obj or .ply", path.display()),
    }
}

pub fn export(args: &ExportArgs) -> Result<()> {
    if let (Some(input), Some(out)) = (&args.input, &args.out) {
        return write_mesh(out, &read_mesh(input)?);
    }
    let (Some(data), Some(out)) = (&args.data, &args.out_dir) else {
        bail!("give --data and --out-dir, or --input and --out");
    };
    if args.format != "obj" && args.format != "ply" {
        bail!("--format must be obj or ply");
    }
    let mut cfg = load_config(args.config.as_deref())?;
    let (manifest, mut records, data_hash) = load_split(data, &args.split)?;
    cfg.dataset = manifest.config;
    if let Some(n) = args.limit {
        records.truncate(n);
    }
    let mut stage = Stage::begin("export", out, &cfg)?;
    config_input(&mut stage, args.config.as_deref())?;
    stage.input(data_hash);
    for r in &records {
        let mesh = ground_truth_mesh(&r.spec, cfg.decode.gt_resolution)?;
        let name = format!("{}.{}", r.seed, args.format);
        write_mesh(&stage.path(&name), &mesh)?;
        stage.output(&name);
        let img = format!("{}.cimg", r.seed);
        r.image.write(&stage.path(&img))?;
        stage.output(&img);
    }
    stage.metric("objects", records.len() as f64);
    stage.finish()
}
