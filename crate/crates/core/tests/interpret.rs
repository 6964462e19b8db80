use attzoom_core::backbones::{Architecture, Model, ModelSpec};
use attzoom_core::interpret::{
    attention_heatmap, encode_ppm, grad_cam, parse_ppm, render_saliency, warp_grid, warp_image,
    write_ppm, SaliencyMap, WarpGrid, WARP_FLOOR,
};
use attzoom_core::{AttZoomConfig, Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn saliency(values: Tensor<f64>) -> SaliencyMap {
    SaliencyMap {
        values,
        layer: "test".into(),
        target_class: None,
    }
}

fn random_map(rng: &mut ChaCha8Rng) -> SaliencyMap {
    let (h, w) = (rng.gen_range(1..=24), rng.gen_range(1..=24));
    let sparse = rng.gen_bool(0.3);
    saliency(Tensor::from_fn([1, 1, h, w], |_| {
        if sparse && rng.gen_bool(0.8) {
            0.0
        } else {
            rng.gen_range(0.0..1.0f64).powi(3)
        }
    }))
}

#[test]
fn warp_grid_is_strictly_monotone_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for i in 0..100 {
        let s = random_map(&mut rng);
        let lambda = if i % 10 == 0 {
            1.0
        } else {
            rng.gen_range(0.0..1.0)
        };
        let grid = warp_grid(&s, lambda).unwrap();
        assert!(grid.is_strictly_monotone(), "map {i}: {grid:?}");
    }
}

#[test]
fn zero_strength_is_exact_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let s = random_map(&mut rng);
        let (h, w) = (s.height(), s.width());
        let img = Tensor::<f64>::rand_uniform([1, 3, h, w], 0.0, 1.0, &mut rng);
        let (out, grid) = warp_image(&img, &s, 0.0).unwrap();
        assert_eq!(grid, WarpGrid::identity(h, w));
        assert_eq!(out, img);
    }
}

#[test]
fn uniform_saliency_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for lambda in [0.25, 0.5, 1.0] {
        let img = Tensor::<f64>::rand_uniform([1, 3, 9, 13], 0.0, 1.0, &mut rng);
        let (out, _) =
            warp_image(&img, &saliency(Tensor::full([1, 1, 9, 13], 0.7)), lambda).unwrap();
        assert_eq!(out, img);
    }
}

#[test]
fn left_concentrated_saliency_claims_most_output_columns() {
    let (h, w) = (8, 20);
    let s = saliency(Tensor::from_fn([1, 1, h, w], |[_, _, _, x]| {
        if x < w / 2 {
            1.0
        } else {
            0.0
        }
    }));
    let grid = warp_grid(&s, 1.0).unwrap();
    let left = grid.xs.iter().filter(|&&x| x < 0.5).count();
    // Cumulative density at the midline: all saliency mass plus half the floor.
    let cdf_mid = (1.0 - WARP_FLOOR) + WARP_FLOOR * 0.5;
    let expected = (0..w)
        .filter(|&j| (j as f64 + 0.5) / w as f64 <= cdf_mid)
        .count();
    assert_eq!(left, expected);
    assert!(2 * left > w);
}

#[test]
fn negative_strength_is_a_config_error() {
    let s = saliency(Tensor::full([1, 1, 2, 2], 1.0));
    assert!(matches!(warp_grid(&s, -1.0), Err(Error::Config { .. })));
}

#[test]
fn ppm_black_white_fixture_bytes() {
    let img = Tensor::from_fn(
        [1, 3, 2, 2],
        |[_, _, y, x]| if (y + x) % 2 == 0 { 0.0 } else { 1.0 },
    );
    let mut want = b"P6\n2 2\n255\n".to_vec();
    want.extend([0, 0, 0, 255, 255, 255, 255, 255, 255, 0, 0, 0]);
    assert_eq!(encode_ppm(&img).unwrap(), want);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bw.ppm");
    write_ppm(&img, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes, want);
    assert_eq!(parse_ppm(&bytes).unwrap(), img);
}

#[test]
fn grad_cam_and_heatmap_cover_the_input_and_normalize() {
    let spec = ModelSpec::new(Architecture::TinyCnn, 4, [3, 16, 16])
        .with_widths(vec![4, 8, 8])
        .with_insertion(0, AttZoomConfig::default())
        .with_seed(3);
    let model = Model::<f64>::build(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let img = Tensor::<f64>::rand_uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng);
    for layer in [None, Some("stage0"), Some("attzoom0"), Some("stage2")] {
        let cam = grad_cam(&model, &img, 1, layer).unwrap();
        assert_eq!((cam.height(), cam.width()), (16, 16));
        let max = cam.values.data().iter().copied().fold(0.0, f64::max);
        assert!(max == 1.0 || max == 0.0);
        assert!(cam.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let total = cam.mass_fraction(0..8, 0..8)
            + cam.mass_fraction(0..8, 8..16)
            + cam.mass_fraction(8..16, 0..8)
            + cam.mass_fraction(8..16, 8..16);
        assert!(max == 0.0 || (total - 1.0).abs() < 1e-12);
    }
    assert!(matches!(
        grad_cam(&model, &img, 1, Some("nope")),
        Err(Error::UnknownLayer { .. })
    ));
    assert!(grad_cam(&model, &img, 4, None).is_err());

    let (_, recs) = model.predict_with_attention(&img).unwrap();
    let heat = attention_heatmap(&recs[0].1, 0).unwrap();
    assert_eq!((heat.height(), heat.width()), (8, 8));
    let rgb = render_saliency(&heat);
    assert_eq!(rgb.shape(), [1, 3, 8, 8]);
}
