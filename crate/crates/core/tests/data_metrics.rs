mod common;

use common::{psnr_oracle, ssim_oracle};
use neurop_diff::data::{make_pair, sample_scale, scale_cap, synthetic_scene};
use neurop_diff::metrics::{psnr, ssim};
use neurop_diff::neural_operator::{NeuralOperator, OperatorConfig};
use neurop_diff::params::ParamStore;
use neurop_diff::ImageGrid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn scale_draws_have_the_uniform_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let mut total = 0.0;
    for _ in 0..n {
        let s = sample_scale(&mut rng, 8.0).unwrap();
        assert!(s > 1.0 && s <= 8.0);
        total += s;
    }
    let mean = total / n as f64;
    assert!((mean - 4.5).abs() / 4.5 < 0.01, "mean {mean}");
}

#[test]
fn drawn_scale_reproduces_the_hr_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = OperatorConfig {
        latent_dim: 4,
        ffn_hidden: 4,
        encoder_blocks: 1,
        encoder_channels: 4,
        projection_hidden: 4,
        ..OperatorConfig::toy()
    };
    let mut store = ParamStore::<f32>::new();
    let net = NeuralOperator::new(&cfg, &mut store, &mut rng).unwrap();
    for (k, hr_size) in [48, 50, 64, 37].into_iter().enumerate() {
        let hr = synthetic_scene(hr_size, k as u64);
        let cap = scale_cap(8.0, hr_size);
        for _ in 0..5 {
            let s = sample_scale(&mut rng, cap).unwrap();
            let pair = make_pair(&hr, s).unwrap();
            let y = net.apply_unchecked(&store, &pair.lr, pair.s).unwrap();
            assert_eq!(y.dims(), hr.dims(), "hr {hr_size}, drawn {s}, realised {}", pair.s);
        }
    }
}

fn random_pair(seed: u64, size: usize) -> (ImageGrid, ImageGrid) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = synthetic_scene(size, seed);
    let noise = ImageGrid::randn(3, size, size, &mut rng);
    let b = a.axpby(1.0, &noise, 0.02 * (1 + seed % 5) as f64).unwrap().clamp(-1.0, 1.0);
    (a, b)
}

#[test]
fn psnr_matches_the_textbook_formula() {
    for seed in 0..10 {
        let (a, b) = random_pair(seed, 24);
        assert!((psnr(&a, &b).unwrap() - psnr_oracle(&a, &b)).abs() < 1e-6);
    }
    let a = synthetic_scene(16, 0);
    assert_eq!(psnr(&a, &a).unwrap(), 100.0);
}

#[test]
fn ssim_matches_a_direct_window_sum() {
    for seed in 0..5 {
        let (a, b) = random_pair(seed, 20);
        let (fast, slow) = (ssim(&a, &b).unwrap(), ssim_oracle(&a, &b));
        assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
    }
}

#[test]
fn ssim_of_a_constant_against_noise_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = ImageGrid::filled(3, 32, 32, 0.1);
    let b = a.axpby(1.0, &ImageGrid::randn(3, 32, 32, &mut rng), 0.5).unwrap().clamp(-1.0, 1.0);
    let v = ssim(&a, &b).unwrap();
    assert!(v.abs() < 0.1, "ssim {v}");
}
