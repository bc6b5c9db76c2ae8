use histoatlas_core::annotation::{contains, inside_pixel_count, polygon_area, AnnotatedRegion, Point};
use histoatlas_core::patching::{grid_at, plan_grid, PatchSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

/// Random star-shaped polygon (usually non-convex) around `center`.
fn star(rng: &mut impl Rng, center: (f64, f64), radius: f64, k: usize) -> Vec<Point> {
    let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles
        .into_iter()
        .map(|a| {
            let r = radius * rng.random_range(0.3..1.0);
            Point::new(center.0 + r * a.cos(), center.1 + r * a.sin())
        })
        .collect()
}

#[test]
fn scanline_count_matches_pointwise_containment() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for trial in 0..100 {
        let k = rng.random_range(3..14);
        let verts = star(&mut rng, (60.0, 60.0), 50.0, k);
        let Ok(region) = AnnotatedRegion::new(format!("r{trial}"), 0, verts, "s") else {
            continue;
        };
        let (x0, y0) = (rng.random_range(0..40) as i64, rng.random_range(0..40) as i64);
        let (w, h) = (rng.random_range(1..90u32), rng.random_range(1..90u32));
        let mut expected = 0u64;
        for y in y0..y0 + h as i64 {
            for x in x0..x0 + w as i64 {
                if contains(&region, Point::new(x as f64 + 0.5, y as f64 + 0.5)) {
                    expected += 1;
                }
            }
        }
        assert_eq!(inside_pixel_count(&region, x0, y0, w, h), expected, "trial {trial}");
    }
}

proptest! {
    #[test]
    fn area_ignores_orientation_and_start(seed in any::<u64>(), shift in 0usize..16) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let verts = star(&mut rng, (100.0, 100.0), 80.0, 8);
        prop_assume!(AnnotatedRegion::new("a", 0, verts.clone(), "s").is_ok());
        let a = polygon_area(&AnnotatedRegion::new("a", 0, verts.clone(), "s").unwrap());
        let mut rev = verts.clone();
        rev.reverse();
        let mut rot = verts.clone();
        rot.rotate_left(shift % verts.len());
        for vs in [rev, rot] {
            let b = polygon_area(&AnnotatedRegion::new("b", 0, vs, "s").unwrap());
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
        prop_assert!(a > 0.0);
    }

    #[test]
    fn vertices_are_contained(seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let verts = star(&mut rng, (100.0, 100.0), 80.0, 7);
        prop_assume!(AnnotatedRegion::new("a", 0, verts.clone(), "s").is_ok());
        let r = AnnotatedRegion::new("a", 0, verts.clone(), "s").unwrap();
        for v in verts {
            prop_assert!(contains(&r, v));
        }
    }

    #[test]
    fn grid_candidates_lie_inside_the_image(w in 600u32..3000, h in 600u32..3000, seed in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let verts = star(&mut rng, (w as f64 / 2.0, h as f64 / 2.0), (w.min(h) as f64) / 2.0 - 1.0, 9);
        prop_assume!(AnnotatedRegion::new("a", 0, verts.clone(), "s").is_ok());
        let r = AnnotatedRegion::new("a", 0, verts, "s").unwrap();
        let spec = PatchSpec::default();
        let plan = plan_grid(&r, &spec, (w, h)).unwrap();
        prop_assert!(plan.origins.len() <= plan.grid_count);
        for &(x, y) in &plan.origins {
            prop_assert!(x + spec.patch_size <= w && y + spec.patch_size <= h);
        }
    }
}

fn full_box(side: f64) -> AnnotatedRegion {
    AnnotatedRegion::new(
        "box",
        0,
        vec![
            Point::new(0.0, 0.0),
            Point::new(side, 0.0),
            Point::new(side, side),
            Point::new(0.0, side),
        ],
        "s",
    )
    .unwrap()
}

#[test]
fn full_box_counts_follow_the_stride_formula() {
    let spec = PatchSpec::default();
    let region = full_box(5120.0);
    let mut last = 0;
    for o in spec.overlap_schedule() {
        let g = grid_at(&region, &spec, (5120, 5120), o).unwrap();
        let stride = (512.0 * (1.0 - o)).round() as usize;
        let per_axis = (5120 - 512) / stride + 1;
        assert_eq!(g.origins.len(), per_axis * per_axis, "overlap {o}");
        assert!(g.origins.len() >= last);
        last = g.origins.len();
    }
    assert_eq!(grid_at(&region, &spec, (5120, 5120), 0.20).unwrap().origins.len(), 144);
}

#[test]
fn polygon_counts_are_monotone_in_overlap() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let spec = PatchSpec::default();
    for _ in 0..10 {
        let verts = star(&mut rng, (3000.0, 3000.0), 2800.0, 10);
        let Ok(region) = AnnotatedRegion::new("p", 0, verts, "s") else { continue };
        let counts: Vec<usize> = spec
            .overlap_schedule()
            .into_iter()
            .map(|o| grid_at(&region, &spec, (6000, 6000), o).unwrap().grid_count)
            .collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    }
}
