mod common;

use ovaxai::tensor::Tensor;
use ovaxai::xai::{
    compare_explanations, fill_image, integrated_gradients, kernel_shap, lime_explain, render_overlay, segment_grid,
    shapley_values, Explanation, ExplanationParams, Fill, FnGame, LimeOptions, LinearModel, OverlayStyle, ScoreModel,
    ShapOptions, XaiError,
};
use proptest::prelude::*;

use common::*;

fn interaction_game(m: usize) -> (impl Fn(&[bool]) -> f64 + Sync, Vec<f64>) {
    let a: Vec<f64> = (0..m).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
    let (b, c) = (0.8, -0.6);
    let mut exact = a.clone();
    exact[0] += b / 2.0;
    exact[1] += b / 2.0;
    for e in &mut exact[2..5] {
        *e += c / 3.0;
    }
    let f = move |z: &[bool]| {
        let lin: f64 = z.iter().zip(&a).map(|(&on, w)| if on { *w } else { 0.0 }).sum();
        lin + if z[0] && z[1] { b } else { 0.0 } + if z[2] && z[3] && z[4] { c } else { 0.0 }
    };
    (f, exact)
}

#[test]
fn sampled_shap_converges() {
    let (f, exact) = interaction_game(20);
    let game = FnGame { players: 20, f };
    let err = |n: usize| {
        let phi = shapley_values(&game, &ShapOptions { n_samples: n, seed: 17 }).unwrap();
        let eff: f64 = phi.iter().sum::<f64>() - exact.iter().sum::<f64>();
        assert!(eff.abs() < 1e-9, "efficiency holds on the sampling path too");
        phi.iter().zip(&exact).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    };
    let (e1, e4, e16) = (err(500), err(2000), err(8000));
    assert!(e4 < e1 && e16 < e4, "{e1} {e4} {e16}");
}

#[test]
fn ig_is_linear_in_the_model() {
    let mut g = LinearModel {
        weights: vec![random_image(6, -1.0, 1.0, 1)],
        bias: vec![0.0],
    };
    let h = LinearModel {
        weights: vec![random_image(6, -1.0, 1.0, 2)],
        bias: vec![0.5],
    };
    let x = random_image(6, 0.0, 1.0, 3);
    let base = x.zeros_like();
    let (a, b) = (2.0, -0.5);
    let ig_g = integrated_gradients(&g, &x, &base, 32, 0).unwrap();
    let ig_h = integrated_gradients(&h, &x, &base, 32, 0).unwrap();
    g.weights[0] = g.weights[0].scale(a).add(&h.weights[0].scale(b)).unwrap();
    let ig_mix = integrated_gradients(&g, &x, &base, 32, 0).unwrap();
    for ((m, p), q) in ig_mix.values.data().iter().zip(ig_g.values.data()).zip(ig_h.values.data()) {
        assert!((m - (a * p + b * q)).abs() < 1e-12);
    }
}

#[test]
fn ig_completeness_on_planted_model() {
    let model = PlantedModel::new(12, 3, vec![(4, 6.0), (0, -2.0)], 1.0);
    let x = random_image(12, 0.0, 1.0, 4);
    let base = x.zeros_like();
    let a = integrated_gradients(&model, &x, &base, 256, 0).unwrap();
    let s = model.scores(&Tensor::stack(&[x, base]).unwrap(), 0).unwrap();
    assert!((a.total() - (s[0] - s[1])).abs() < 1e-3 * (s[0] - s[1]).abs());
}

#[test]
fn lime_on_images_is_seeded() {
    let model = PlantedModel::new(16, 4, vec![(9, 8.0)], 2.0);
    let x = random_image(16, 0.2, 1.0, 5);
    let fill = fill_image(&x, &model.mask, Fill::Black, None).unwrap();
    let opts = LimeOptions { seed: 5, ..LimeOptions::default() };
    let (a, fa) = lime_explain(&model, &x, &model.mask, &fill, 0, &opts).unwrap();
    let (b, fb) = lime_explain(&model, &x, &model.mask, &fill, 0, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(fa, fb);
    assert_eq!(a.top_k.len(), 10);
    assert_eq!(a.top_k[0], 9);
    let json = a.to_json();
    let back: Explanation = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a);
    for key in ["method", "target_class", "segment_scores", "top_k", "parameters", "kernel_width", "seed", "n_samples"] {
        assert!(json.contains(key), "missing {key}");
    }
}

#[test]
fn shap_image_game_is_efficient() {
    let model = PlantedModel::new(8, 2, vec![(1, 4.0), (2, 1.0)], 1.0);
    let x = random_image(8, 0.0, 1.0, 6);
    let fill = fill_image(&x, &model.mask, Fill::Black, None).unwrap();
    let phi = kernel_shap(&model, &x, &model.mask, &fill, 0, &ShapOptions::default()).unwrap();
    let s = model.scores(&Tensor::stack(&[x.clone(), fill.clone()]).unwrap(), 0).unwrap();
    assert!((phi.total() - (s[0] - s[1])).abs() < 1e-9);
    let big = segment_grid(36, 36, 6).unwrap();
    let lin = LinearModel {
        weights: vec![Tensor::zeros(vec![36, 36, 3])],
        bias: vec![0.0],
    };
    let x = Tensor::zeros(vec![36, 36, 3]);
    let err = kernel_shap(&lin, &x, &big, &x, 0, &ShapOptions::default()).unwrap_err();
    assert!(matches!(err, XaiError::Invalid(_)));
}

#[test]
fn overlay_matches_mask_dimensions() {
    let model = PlantedModel::new(8, 2, vec![(3, 4.0)], 1.0);
    let x = random_image(8, 0.0, 1.0, 7);
    let map = integrated_gradients(&model, &x, &x.zeros_like(), 16, 0).unwrap();
    let e = Explanation::new(&map, &model.mask, 2, ExplanationParams::default()).unwrap();
    let img = image::RgbImage::new(8, 8);
    for style in [OverlayStyle::SignedHeatmap, OverlayStyle::BoundaryHighlight] {
        assert_eq!(render_overlay(&img, &e, &model.mask, style).unwrap().image.dimensions(), (8, 8));
    }
    assert!(render_overlay(&image::RgbImage::new(9, 8), &e, &model.mask, OverlayStyle::SignedHeatmap).is_err());
    let other = segment_grid(8, 8, 4).unwrap();
    let mut e2 = e.clone();
    e2.mask = other.info();
    assert!(matches!(compare_explanations(&[e, e2], 2), Err(XaiError::Mismatch(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_shap_matches_permutations(m in 2usize..=6, seed in any::<u64>()) {
        let v = random_game(m, seed);
        let phi = shapley_values(&FnGame { players: m, f: &v }, &ShapOptions::default()).unwrap();
        for (p, q) in phi.iter().zip(permutation_shapley(m, &v)) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn segment_grid_partitions(h in 2usize..40, w in 2usize..40, grid in 2usize..10) {
        prop_assume!(grid <= h.min(w));
        let m = segment_grid(h, w, grid).unwrap();
        prop_assert_eq!(m.ids.len(), h * w);
        prop_assert!(m.ids.iter().all(|&i| i < m.segments));
        prop_assert_eq!(m.sizes().iter().sum::<usize>(), h * w);
        prop_assert!(m.sizes().iter().all(|&s| s > 0));
    }
}

