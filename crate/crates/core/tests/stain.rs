use histoatlas_core::patching::{deconvolve, synthesize, ConcentrationMap, StainMatrix};
use image::RgbImage;
use rand::{Rng, SeedableRng};

fn one_pixel(c: [f64; 3]) -> ConcentrationMap {
    ConcentrationMap {
        width: 1,
        height: 1,
        data: vec![c],
    }
}

#[test]
fn pure_stains_recover_their_concentration() {
    let m = StainMatrix::hematoxylin_eosin();
    for stain in 0..3 {
        for step in 1..=12 {
            let mut c = [0.0; 3];
            c[stain] = step as f64 * 0.1;
            let img = synthesize(&one_pixel(c), &m);
            let back = deconvolve(&img, &m).get(0, 0);
            for ch in 0..3 {
                assert!(
                    (back[ch] - c[ch]).abs() <= 0.02,
                    "stain {stain} c={:.1}: got {back:?}",
                    c[stain]
                );
            }
        }
    }
}

#[test]
fn random_images_reconstruct_within_two_levels() {
    let m = StainMatrix::hematoxylin_eosin();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let img = RgbImage::from_fn(128, 128, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
    let back = synthesize(&deconvolve(&img, &m), &m);
    for (a, b) in img.pixels().zip(back.pixels()) {
        for ch in 0..3 {
            assert!((a[ch] as i32 - b[ch] as i32).abs() <= 2, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn custom_basis_round_trips() {
    let m = StainMatrix::new([[0.7, 0.6, 0.3], [0.1, 0.9, 0.4], [0.5, -0.2, 0.8]]).unwrap();
    let c = [0.4, 0.3, 0.05];
    let back = deconvolve(&synthesize(&one_pixel(c), &m), &m).get(0, 0);
    for ch in 0..3 {
        assert!((back[ch] - c[ch]).abs() <= 0.02);
    }
}
