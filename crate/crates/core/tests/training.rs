use neurop_diff::config::{ConditionMode, Profile, RunConfig};
use neurop_diff::data::{make_pair, synthetic_scene};
use neurop_diff::metrics::psnr;
use neurop_diff::pipeline::OperatorModel;
use neurop_diff::training::{lr_at, operator_psnr, train_diffusion, train_operator, TrainConfig, TrainOptions};
use neurop_diff::ImageGrid;

const TINY: &str = r#"{
  "seed": 3,
  "data": {"hr_size": 16},
  "schedule": {"kind": "linear_beta", "steps": 200, "beta_start": 1e-4, "beta_end": 0.05},
  "operator": {"latent_dim": 8, "num_layers": 1, "ffn_hidden": 8, "encoder_blocks": 1, "encoder_channels": 8, "projection_hidden": 8},
  "denoiser": {"base_channels": 8, "depth": 2, "gamma_embed_dim": 8, "dropout": 0.0},
  "train": {
    "operator": {"max_iters": 40, "warm_iters": 5, "batch_size": 2, "eval_every": 0},
    "diffusion": {"max_iters": 40, "warm_iters": 5, "batch_size": 2, "patch_size": null}
  }
}"#;

fn tiny() -> RunConfig {
    RunConfig::from_json(TINY).unwrap()
}

fn images(n: u64, size: usize) -> Vec<ImageGrid> {
    (0..n).map(|i| synthetic_scene(size, i)).collect()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn l1(a: &ImageGrid, b: &ImageGrid) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.values().len() as f64
}

/// Mean L1 of the operator output on `imgs` at a fixed set of scales.
fn train_l1(model: &OperatorModel, imgs: &[ImageGrid]) -> f64 {
    let mut total = 0.0;
    let mut n = 0.0;
    for img in imgs {
        for s in [2.0, 3.0, 4.0] {
            let pair = make_pair(img, s).unwrap();
            total += l1(&model.net.apply_to_size(&model.store, &pair.lr, (img.height(), img.width())).unwrap(), img);
            n += 1.0;
        }
    }
    total / n
}

#[test]
fn operator_overfit_on_four_images() {
    let cfg = RunConfig::preset(Profile::Toy);
    assert_eq!(cfg.train.operator.max_iters, 2000);
    let imgs = images(4, cfg.data.hr_size);
    let before = train_l1(&OperatorModel::init(&cfg).unwrap(), &imgs);
    let out = train_operator(&cfg, &imgs, &[], TrainOptions::default()).unwrap();
    assert_eq!(out.losses.len(), 2000);
    let model = OperatorModel::from_checkpoint(&out.checkpoint).unwrap();
    let after = train_l1(&model, &imgs);
    assert!(before / after >= 10.0, "L1 {before:.4} -> {after:.4}");

    let ours = operator_psnr(&model, &imgs, 2.0).unwrap();
    let bicubic = imgs.iter().map(|img| psnr(&make_pair(img, 2.0).unwrap().lr.resize_bicubic(48, 48), img).unwrap()).sum::<f64>() / 4.0;
    assert!(ours > bicubic, "operator {ours:.2} dB vs bicubic {bicubic:.2} dB");
}

#[test]
fn diffusion_loss_trends_down() {
    let mut cfg = tiny();
    cfg.train.diffusion.max_iters = 600;
    cfg.train.diffusion.warm_iters = 60;
    let out = train_diffusion(&cfg, &images(4, 16), ConditionMode::Bicubic, None, TrainOptions::default()).unwrap();
    let l = &out.losses;
    assert_eq!(l.len(), 600);
    let (first, last) = (median(&l[..100]), median(&l[l.len() - 100..]));
    assert!(last < first, "median loss {first:.4} -> {last:.4}");
}

#[test]
fn operator_resume_continues_the_run() {
    let cfg = tiny();
    let imgs = images(3, 16);
    let full = train_operator(&cfg, &imgs, &[], TrainOptions::default()).unwrap();
    let half = train_operator(&cfg, &imgs, &[], TrainOptions { stop_at: Some(17), ..Default::default() }).unwrap();
    assert_eq!(half.losses, full.losses[..17]);
    let rest = train_operator(&cfg, &imgs, &[], TrainOptions { resume: Some(&half.checkpoint), ..Default::default() }).unwrap();
    assert_eq!(rest.losses, full.losses[17..]);
    assert_eq!(rest.checkpoint.meta.iteration, 40);
    assert_eq!(rest.checkpoint.meta.operator_hash, full.checkpoint.meta.operator_hash);
}

#[test]
fn diffusion_resume_continues_the_run_and_keeps_the_operator_frozen() {
    let cfg = tiny();
    let imgs = images(3, 16);
    let op = OperatorModel::from_checkpoint(&train_operator(&cfg, &imgs, &[], TrainOptions::default()).unwrap().checkpoint).unwrap();
    let frozen = op.hash();
    let mode = ConditionMode::Neurop;
    let full = train_diffusion(&cfg, &imgs, mode, Some(&op), TrainOptions::default()).unwrap();
    let half = train_diffusion(&cfg, &imgs, mode, Some(&op), TrainOptions { stop_at: Some(23), ..Default::default() }).unwrap();
    let rest =
        train_diffusion(&cfg, &imgs, mode, Some(&op), TrainOptions { resume: Some(&half.checkpoint), ..Default::default() }).unwrap();
    assert_eq!([half.losses, rest.losses].concat(), full.losses);
    assert_eq!(rest.checkpoint.meta.denoiser_hash, full.checkpoint.meta.denoiser_hash);

    assert_eq!(op.hash(), frozen);
    assert_eq!(full.checkpoint.meta.operator_hash.as_deref(), Some(frozen.as_str()));
    assert_eq!(OperatorModel::from_checkpoint(&full.checkpoint).unwrap().hash(), frozen);
}

#[test]
fn identical_runs_give_identical_hashes() {
    let cfg = tiny();
    let imgs = images(2, 16);
    let a = train_diffusion(&cfg, &imgs, ConditionMode::Bicubic, None, TrainOptions::default()).unwrap();
    let b = train_diffusion(&cfg, &imgs, ConditionMode::Bicubic, None, TrainOptions::default()).unwrap();
    assert_eq!(a.checkpoint.meta.denoiser_hash, b.checkpoint.meta.denoiser_hash);
    let mut other = cfg.clone();
    other.seed += 1;
    let c = train_diffusion(&other, &imgs, ConditionMode::Bicubic, None, TrainOptions::default()).unwrap();
    assert_ne!(a.checkpoint.meta.denoiser_hash, c.checkpoint.meta.denoiser_hash);
}

#[test]
fn full_scale_learning_rate_endpoints() {
    for tc in [TrainConfig::paper_operator(), TrainConfig::paper_diffusion()] {
        assert_eq!(lr_at(&tc, 0).unwrap(), 1e-4);
        assert_eq!(lr_at(&tc, tc.warm_iters.saturating_sub(1)).unwrap(), 1e-4);
        assert!((lr_at(&tc, tc.max_iters).unwrap() - 2e-6).abs() < 1e-18);
        let mid = tc.warm_iters + (tc.max_iters - tc.warm_iters) / 2;
        assert!((lr_at(&tc, mid).unwrap() - 5.1e-5).abs() < 1e-12);
        assert!(lr_at(&tc, tc.max_iters + 1).is_err());
    }
}
