use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use neurop_diff::checkpoint::{Checkpoint, Phase};
use neurop_diff::config::{ConditionMode, RunConfig};
use neurop_diff::data::{list_images, load_dataset, load_image, load_images, save_png, synthetic_scene, NamedImage};
use neurop_diff::metrics::ImageMetrics;
use neurop_diff::neural_operator::scaled_size;
use neurop_diff::pipeline::{child_rng, evaluate, DiffusionModel, OperatorModel, ScaleReport};
use neurop_diff::training::{self, TrainOptions};
use neurop_diff::{Error, ImageGrid, Result};
use serde::Serialize;

use crate::ConfigArgs;

pub const CACHE_ENV: &str = "NEUROP_DIFF_CACHE";

/// `$NEUROP_DIFF_CACHE`, or `neurop-diff-cache` under the working directory.
fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("neurop-diff-cache"))
}

fn io_err(path: &Path, e: io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Config from `--config` if given, else `fallback` (a checkpoint's
/// config), else the profile preset; then the command-line overrides.
pub fn load_config(args: &ConfigArgs, fallback: Option<&RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&args.config, fallback) {
        (Some(path), _) => RunConfig::load(path, args.profile)?,
        (None, Some(cfg)) if args.profile.is_none_or(|p| p == cfg.profile) => cfg.clone(),
        (None, _) => RunConfig::preset(args.profile.unwrap_or(neurop_diff::config::Profile::Toy)),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(root) = &args.data {
        cfg.data.root = root.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn grids(images: &[NamedImage]) -> Vec<ImageGrid> {
    images.iter().map(|n| n.image.clone()).collect()
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    phase: Phase,
    checkpoint: &'a Path,
    iterations: u64,
    final_loss: Option<f64>,
    condition: Option<ConditionMode>,
    parameter_hash: String,
}

fn print_summary(summary: &TrainSummary<'_>) -> Result<()> {
    println!("{}", serde_json::to_string(summary)?);
    Ok(())
}

pub fn train_operator(args: &ConfigArgs, out: Option<PathBuf>, resume: Option<PathBuf>) -> Result<()> {
    let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
    let cfg = load_config(args, resume.as_ref().map(|c| &c.meta.config))?;
    let data = load_dataset(&cfg.data)?;
    let out = out.unwrap_or_else(|| cache_dir().join("operator.ckpt"));
    let mut stdout = io::stdout().lock();
    let opts = TrainOptions { checkpoint_path: Some(&out), log: Some(&mut stdout), resume: resume.as_ref(), stop_at: None };
    let outcome = training::train_operator(&cfg, &grids(&data.train), &grids(&data.eval), opts)?;
    drop(stdout);
    let model = OperatorModel::from_checkpoint(&outcome.checkpoint)?;
    print_summary(&TrainSummary {
        phase: Phase::Operator,
        checkpoint: &out,
        iterations: outcome.checkpoint.meta.iteration,
        final_loss: outcome.losses.last().copied(),
        condition: None,
        parameter_hash: model.hash(),
    })
}

fn load_operator(path: &Path) -> Result<(Checkpoint, OperatorModel)> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.phase != Phase::Operator {
        return Err(Error::Checkpoint(format!("{} is not an operator checkpoint", path.display())));
    }
    let model = OperatorModel::from_checkpoint(&ck)?;
    Ok((ck, model))
}

pub fn train_diffusion(
    args: &ConfigArgs,
    condition: ConditionMode,
    operator: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    if condition.needs_operator() && operator.is_none() {
        return Err(Error::Checkpoint(format!("--condition {condition} needs --operator <checkpoint>")));
    }
    let operator = operator.map(|p| load_operator(&p)).transpose()?;
    let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
    let fallback = resume.as_ref().or(operator.as_ref().map(|(ck, _)| ck)).map(|c| &c.meta.config);
    let cfg = load_config(args, fallback)?;
    let data = load_dataset(&cfg.data)?;
    let out = out.unwrap_or_else(|| cache_dir().join(format!("diffusion-{condition}.ckpt")));
    let mut stdout = io::stdout().lock();
    let opts = TrainOptions { checkpoint_path: Some(&out), log: Some(&mut stdout), resume: resume.as_ref(), stop_at: None };
    let op = operator.as_ref().map(|(_, m)| m);
    let outcome = training::train_diffusion(&cfg, &grids(&data.train), condition, op, opts)?;
    drop(stdout);
    print_summary(&TrainSummary {
        phase: Phase::Diffusion,
        checkpoint: &out,
        iterations: outcome.checkpoint.meta.iteration,
        final_loss: outcome.losses.last().copied(),
        condition: Some(condition),
        parameter_hash: outcome.checkpoint.meta.denoiser_hash.clone().unwrap_or_default(),
    })
}

fn load_diffusion(path: &Path) -> Result<DiffusionModel> {
    DiffusionModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn check_steps(steps: usize, model: &DiffusionModel) -> Result<usize> {
    let t = model.schedule.steps();
    if steps < 2 || steps > t {
        return Err(Error::InvalidArgument(format!("--steps {steps} outside 2..={t}")));
    }
    Ok(steps)
}

#[derive(Serialize)]
struct SampleSidecar {
    input: PathBuf,
    output: PathBuf,
    s: f64,
    #[serde(rename = "K")]
    k: usize,
    seed: u64,
    stream: u64,
    runtime_s: f64,
    lr_size: [usize; 2],
    sr_size: [usize; 2],
    condition: ConditionMode,
}

fn scale_label(s: f64) -> String {
    format!("x{s}")
}

/// Image `i` (in file-name order) samples from stream `i` of `seed`.
pub fn sample(checkpoint: &Path, input: &Path, s: f64, steps: Option<usize>, seed: u64, out: &Path) -> Result<()> {
    let model = load_diffusion(checkpoint)?;
    let max = model.max_scale();
    if !(s > 1.0 && s <= max) {
        return Err(Error::InvalidArgument(format!("--scale {s} outside (1, {max}]")));
    }
    let k = check_steps(steps.unwrap_or(model.config.sample.steps), &model)?;
    let inputs = if input.is_dir() {
        let list = list_images(input)?;
        if list.is_empty() {
            return Err(Error::Data(format!("no images in {}", input.display())));
        }
        list
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(Error::Data(format!("{} does not exist", input.display())));
    };
    create_dir(out)?;
    for (i, path) in inputs.iter().enumerate() {
        let lr = load_image(path)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("image{i}"));
        let name = format!("{stem}_{}", scale_label(s));
        let png = out.join(format!("{name}.png"));
        let mut rng = child_rng(seed, i as u64);
        let start = Instant::now();
        let sr = model.super_resolve(&lr, s, k, &mut rng)?;
        let runtime_s = start.elapsed().as_secs_f64();
        save_png(&png, &sr)?;
        let sidecar = SampleSidecar {
            input: path.clone(),
            output: png.clone(),
            s,
            k,
            seed,
            stream: i as u64,
            runtime_s,
            lr_size: [lr.height(), lr.width()],
            sr_size: [scaled_size(lr.height(), s), scaled_size(lr.width(), s)],
            condition: model.condition,
        };
        write_json(&out.join(format!("{name}.json")), &sidecar)?;
        println!("{}", serde_json::to_string(&sidecar)?);
    }
    Ok(())
}

fn check_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("--scales is empty".into()));
    }
    match scales.iter().find(|&&s| !(s > 1.0 && s.is_finite())) {
        Some(s) => Err(Error::InvalidArgument(format!("scale {s} must be > 1"))),
        None => Ok(()),
    }
}

fn write_scale_csv(path: &Path, report: &ScaleReport) -> Result<()> {
    let mut text = String::from("image,scale,effective_scale,psnr_db,ssim,bicubic_psnr_db,bicubic_ssim,out_of_distribution\n");
    for (m, b) in report.model.images.iter().zip(&report.bicubic.images) {
        let ImageMetrics { name, psnr_db, ssim } = m;
        text.push_str(&format!(
            "{name},{},{},{psnr_db:.6},{ssim:.6},{:.6},{:.6},{}\n",
            report.scale, report.effective_scale, b.psnr_db, b.ssim, report.out_of_distribution
        ));
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn run_eval(
    model: &DiffusionModel,
    images: &[NamedImage],
    scales: &[f64],
    steps: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<ScaleReport>> {
    let reports = evaluate(model, images, scales, steps, seed)?;
    create_dir(out)?;
    for r in &reports {
        write_scale_csv(&out.join(format!("metrics_{}.csv", scale_label(r.scale))), r)?;
        if r.out_of_distribution {
            log::warn!("scale {} is beyond the training range (1, {}]", r.scale, model.max_scale());
        }
    }
    Ok(reports)
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    checkpoint: &'a Path,
    condition: ConditionMode,
    steps: usize,
    seed: u64,
    hr_size: usize,
    max_scale: f64,
    scales: &'a [ScaleReport],
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    scales: &[f64],
    steps: Option<usize>,
    seed: u64,
    hr_size: Option<usize>,
    out: &Path,
) -> Result<()> {
    check_scales(scales)?;
    let model = load_diffusion(checkpoint)?;
    let k = check_steps(steps.unwrap_or(model.config.sample.steps), &model)?;
    if !data.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", data.display())));
    }
    let hr = hr_size.unwrap_or(model.config.data.hr_size);
    let images = load_images(data, hr)?;
    let reports = run_eval(&model, &images, scales, k, seed, out)?;
    let summary =
        EvalSummary { checkpoint, condition: model.condition, steps: k, seed, hr_size: hr, max_scale: model.max_scale(), scales: &reports };
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    condition: ConditionMode,
    scale: f64,
    psnr_db: f64,
    ssim: f64,
    bicubic_psnr_db: f64,
    bicubic_ssim: f64,
}

pub fn ablate(
    args: &ConfigArgs,
    operator: Option<PathBuf>,
    scales: &[f64],
    steps: Option<usize>,
    on_train: bool,
    out: &Path,
) -> Result<()> {
    check_scales(scales)?;
    let operator = operator.map(|p| load_operator(&p)).transpose()?;
    let cfg = load_config(args, operator.as_ref().map(|(ck, _)| &ck.meta.config))?;
    let data = load_dataset(&cfg.data)?;
    let scored = if on_train { &data.train } else { &data.eval };
    if scored.is_empty() {
        return Err(Error::Data(format!("the {} split is empty", if on_train { "training" } else { "evaluation" })));
    }
    create_dir(out)?;
    let mut stdout = io::stdout().lock();
    let op = match operator {
        Some((_, m)) => m,
        None => {
            let path = out.join("operator.ckpt");
            let opts = TrainOptions { checkpoint_path: Some(&path), log: Some(&mut stdout), ..Default::default() };
            let outcome = training::train_operator(&cfg, &grids(&data.train), &grids(&data.eval), opts)?;
            OperatorModel::from_checkpoint(&outcome.checkpoint)?
        }
    };
    let steps = steps.unwrap_or(cfg.sample.steps);
    let mut rows = Vec::new();
    for mode in ConditionMode::ALL {
        let path = out.join(format!("diffusion-{mode}.ckpt"));
        let opts = TrainOptions { checkpoint_path: Some(&path), log: Some(&mut stdout), ..Default::default() };
        let outcome = training::train_diffusion(&cfg, &grids(&data.train), mode, Some(&op), opts)?;
        let model = DiffusionModel::from_checkpoint(&outcome.checkpoint)?;
        let k = check_steps(steps, &model)?;
        let reports = run_eval(&model, scored, scales, k, cfg.seed, &out.join(mode.as_str()))?;
        for r in reports {
            rows.push(AblationRow {
                condition: mode,
                scale: r.scale,
                psnr_db: r.model.mean_psnr_db,
                ssim: r.model.mean_ssim,
                bicubic_psnr_db: r.bicubic.mean_psnr_db,
                bicubic_ssim: r.bicubic.mean_ssim,
            });
        }
    }
    drop(stdout);
    let mut csv = String::from("condition,scale,psnr_db,ssim,bicubic_psnr_db,bicubic_ssim\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.condition, r.scale, r.psnr_db, r.ssim, r.bicubic_psnr_db, r.bicubic_ssim
        ));
    }
    let path = out.join("ablation.csv");
    fs::write(&path, csv).map_err(|e| io_err(&path, e))?;
    write_json(&out.join("ablation.json"), &rows)?;
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "{}", serde_json::to_string(&rows)?).map_err(|e| io_err(Path::new("stdout"), e))?;
    Ok(())
}

pub fn synth(count: u64, size: usize, seed: u64, out: &Path) -> Result<()> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!("--size {size} below 8")));
    }
    create_dir(out)?;
    for i in 0..count {
        save_png(&out.join(format!("scene_{i:03}.png")), &synthetic_scene(size, seed.wrapping_add(i)))?;
    }
    Ok(())
}
