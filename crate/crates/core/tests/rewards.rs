use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use texforce::image::Image;
use texforce::rewards::{by_name, incompressibility, RewardConfig};

fn random_image(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bytes: Vec<u8> = (0..size * size * 3).map(|_| rng.random()).collect();
    Image::from_rgb8(size, size, &bytes).unwrap()
}

#[test]
fn external_scorer_agrees_with_builtin() {
    let cmd = format!("external:{}", env!("CARGO_BIN_EXE_texforce-jpeg-scorer"));
    let spec = by_name(&cmd, &RewardConfig::default()).unwrap();
    for seed in 0..4 {
        let img = random_image(seed, 16);
        let want = incompressibility(&img, 95).unwrap();
        let got = spec.evaluate(&img, "a red circle").unwrap();
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
    let flat = Image::filled(32, 32, [0.5; 3]);
    assert!((spec.evaluate(&flat, "").unwrap() - incompressibility(&flat, 95).unwrap()).abs() <= 1e-6);
}

#[test]
fn external_scorer_failures_are_errors() {
    let cfg = RewardConfig::default();
    let img = random_image(9, 4);
    assert!(by_name("external:/nonexistent/scorer", &cfg).unwrap().evaluate(&img, "x").is_err());
    assert!(by_name("external:false", &cfg).unwrap().evaluate(&img, "x").is_err());
    assert!(by_name("external:echo not-a-number", &cfg).unwrap().evaluate(&img, "x").is_err());
    assert!(by_name("external:", &cfg).is_err());
}
