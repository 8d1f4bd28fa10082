use orthoiqa::cayley::CayleyConvParams;
use orthoiqa::circulant::circular_conv;
use orthoiqa::nn::{Layer, LayerKind, ModelBuilder, ModelGraph};
use orthoiqa::nn::ops::Activation;
use orthoiqa::rng::{normal_vec, seeded};
use orthoiqa::spectral::*;
use orthoiqa::{Error, Tensor};
use rand::Rng as _;

fn identity_kernel(c: usize, scale: f64) -> Tensor {
    let mut k = Tensor::zeros(vec![c, c, 1, 1]);
    for i in 0..c {
        k.data_mut()[i * c + i] = scale;
    }
    k
}

#[test]
fn identity_and_scalar_kernels() {
    for semantics in [Semantics::Circular, Semantics::Materialized] {
        let s = conv_spectrum(&identity_kernel(2, 1.0), 4, semantics).unwrap();
        assert!((s.spectral_norm - 1.0).abs() < 1e-12);
        assert!((s.top_right_singular.norm_l2() - 1.0).abs() < 1e-12);
        let s = conv_spectrum(&identity_kernel(2, 2.0), 4, semantics).unwrap();
        assert!((s.spectral_norm - 2.0).abs() < 1e-12);
    }
}

#[test]
fn circular_and_materialized_agree() {
    let mut rng = seeded(1);
    let k = Tensor::new(vec![2, 2, 3, 3], normal_vec(&mut rng, 36, 1.0)).unwrap();
    let a = conv_spectrum(&k, 6, Semantics::Circular).unwrap();
    let b = conv_spectrum(&k, 6, Semantics::Materialized).unwrap();
    assert!((a.spectral_norm - b.spectral_norm).abs() < 1e-8);
    assert!((a.frobenius_norm - b.frobenius_norm).abs() < 1e-8);
    assert!(a.frobenius_norm >= a.spectral_norm);
    assert_eq!(a.per_frequency.len(), 36);
}

#[test]
fn top_vector_attains_spectral_norm() {
    let mut rng = seeded(2);
    for _ in 0..20 {
        let (o, c, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(2..7));
        let k = Tensor::new(vec![o, c, 3, 3], normal_vec(&mut rng, o * c * 9, 1.0)).unwrap();
        for semantics in [Semantics::Circular, Semantics::Materialized] {
            let s = conv_spectrum(&k, n, semantics).unwrap();
            let y = circular_conv(&k, &s.top_right_singular).unwrap();
            assert!((y.norm_l2() - s.spectral_norm).abs() < 1e-8 * s.spectral_norm, "{semantics:?}");
        }
    }
}

#[test]
fn frobenius_is_grid_scaled_kernel_norm() {
    let mut rng = seeded(3);
    for n in 3..8 {
        let k = Tensor::new(vec![3, 2, 3, 3], normal_vec(&mut rng, 54, 1.0)).unwrap();
        let s = conv_spectrum(&k, n, Semantics::Circular).unwrap();
        assert!((s.frobenius_norm - n as f64 * k.norm_l2()).abs() < 1e-8 * s.frobenius_norm);
    }
}

#[test]
fn materialized_cap() {
    let k = identity_kernel(17, 1.0);
    assert!(matches!(conv_spectrum(&k, 16, Semantics::Materialized), Err(Error::SizeCap { .. })));
}

#[test]
fn diagonal_amplification() {
    let op = MatrixOperator::new(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
    let spec = op.spectrum().unwrap();
    let r = verify_amplification(&op, &spec, 0.1).unwrap();
    assert_eq!(r.status, AmplificationStatus::Amplifying);
    assert!((r.response_norm - 0.3).abs() < 1e-12);
    assert!((r.ratio - 3.0).abs() < 1e-12);
}

#[test]
fn orthogonal_operator_is_not_amplifying() {
    let mut rng = seeded(4);
    let op = CayleyConvParams::random(3, 5, 0.3, &mut rng).operator().unwrap();
    let spec = op.spectrum().unwrap();
    assert!((spec.spectral_norm - 1.0).abs() < 1e-8);
    assert!(spec.per_frequency.iter().flatten().all(|s| (s - 1.0).abs() < 1e-8));
    let r = verify_amplification(&op, &spec, 0.05).unwrap();
    assert_eq!(r.status, AmplificationStatus::NotAmplifying);
    assert!((r.ratio - 1.0).abs() < 1e-8);
}

#[test]
fn constructed_conv_amplifies_by_its_norm() {
    let mut rng = seeded(5);
    let k = Tensor::new(vec![2, 2, 3, 3], normal_vec(&mut rng, 36, 1.0)).unwrap();
    let s0 = conv_spectrum(&k, 6, Semantics::Circular).unwrap();
    let op = CircularConv { kernel: k.scale(1.7 / s0.spectral_norm), size: 6 };
    let spec = op.spectrum().unwrap();
    let r = verify_amplification(&op, &spec, 0.02).unwrap();
    assert_eq!(r.status, AmplificationStatus::Amplifying);
    assert!((r.ratio - 1.7).abs() < 1e-8);
}

#[test]
fn lemma1_scalar_case() {
    let w = MatrixOperator::new(3, 3, vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
    let h = MatrixOperator::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let t = lemma1_trial(&w, &h, 0.3).unwrap();
    assert!(t.passes_w() && t.passes_wh());
    assert!((t.ratio_w - 2.0).abs() < 1e-12);
}

#[test]
fn lemma1_generator_meets_hypotheses() {
    let mut rng = seeded(6);
    for (m, n) in [(8, 8), (12, 8), (32, 16)] {
        for _ in 0..20 {
            let sigma1 = 1.0 + rng.random::<f64>() * 3.0 + 1e-3;
            let sigma = lemma1_spectrum(m, n, sigma1, &mut rng).unwrap();
            let w = matrix_with_spectrum(m, &sigma, &mut rng).unwrap();
            let spec = w.spectrum().unwrap();
            assert!((spec.spectral_norm - sigma1).abs() < 1e-9 * sigma1);
            assert!(spec.spectral_norm > 1.0);
            assert!(spec.frobenius_norm / spec.spectral_norm > m as f64 / n as f64);
        }
    }
}

#[test]
fn lemma1_infeasible_request() {
    let mut rng = seeded(7);
    assert!(matches!(lemma1_spectrum(20, 2, 1.01, &mut rng), Err(Error::Construction(_))));
    assert!(matches!(lemma1_spectrum(4, 8, 2.0, &mut rng), Err(Error::Construction(_))));
    assert!(matches!(lemma1_spectrum(8, 8, 1.0, &mut rng), Err(Error::Construction(_))));
}

#[test]
fn lemma1_square_case_always_holds_for_product_vector() {
    let r = verify_lemma1(200, 8, 8, 11).unwrap();
    assert_eq!(r.pass_wh, 200);
    assert!(r.min_ratio_wh > 1.0);
}

#[test]
fn lemma1_is_deterministic() {
    assert_eq!(verify_lemma1(30, 12, 8, 3).unwrap(), verify_lemma1(30, 12, 8, 3).unwrap());
}

fn shape_only(input: Vec<usize>, convs: &[(usize, usize, usize, usize, usize)]) -> ModelGraph {
    let mut m = ModelGraph::new(input);
    for (i, &(cin, cout, k, s, p)) in convs.iter().enumerate() {
        m.layers.push(Layer::new(
            format!("c{i}"),
            LayerKind::Conv2d { in_channels: cin, out_channels: cout, kernel: k, stride: s, padding: p, dilation: 1 },
        ));
    }
    m
}

#[test]
fn placement_examples() {
    let s = placement_scan(&shape_only(vec![3, 8, 8], &[(3, 3, 3, 1, 1)])).unwrap();
    assert_eq!(s[0].ratio, 1.0);

    let s = placement_scan(&shape_only(vec![3, 498, 498], &[(3, 64, 3, 2, 1)])).unwrap();
    assert_eq!(s[0].s_out, (249, 249));
    let expected = (64.0 * 249.0 * 249.0) / (3.0 * 498.0 * 498.0);
    assert!((s[0].ratio - expected).abs() < 1e-12);
    assert!((s[0].ratio - 5.33).abs() < 0.01);
}

#[test]
fn placement_prefers_deep_wide_stage_over_stem() {
    let stem = placement_scan(&shape_only(vec![3, 498, 664], &[(3, 64, 7, 2, 3)])).unwrap()[0].ratio;
    let deep = placement_scan(&shape_only(vec![1024, 32, 42], &[(1024, 2048, 1, 2, 0)])).unwrap()[0].ratio;
    assert!(deep < stem, "{deep} !< {stem}");
}

#[test]
fn recommendation_is_scale_invariant_and_certify_runs() {
    let m = ModelBuilder::new(vec![3, 16, 16], 1)
        .conv(3, 8, 3, 1, 1)
        .activation(Activation::Relu)
        .conv(8, 16, 3, 2, 1)
        .activation(Activation::Relu)
        .conv(16, 32, 3, 2, 1)
        .activation(Activation::Relu)
        .conv(32, 32, 3, 2, 1)
        .activation(Activation::Relu)
        .layer(LayerKind::GlobalAvgPool)
        .dense(32, 1)
        .build()
        .unwrap();
    let rec = recommend(&placement_scan(&m).unwrap()).unwrap();
    assert_eq!(rec, 6);
    let mut scaled = m.clone();
    for p in scaled.params.values_mut() {
        *p = p.scale(3.5);
    }
    assert_eq!(recommend(&placement_scan(&scaled).unwrap()), Some(rec));
    let certs = certify(&m).unwrap();
    assert_eq!(certs.len(), 4);
    assert!(certs.iter().all(|c| c.frobenius >= c.sigma1 && c.sigma1 > 0.0));
}

#[test]
fn dilation_preserves_taps() {
    let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let d = dilate_kernel(&k, 2).unwrap();
    assert_eq!(d.shape(), &[1, 1, 3, 3]);
    assert_eq!(d.data(), &[1.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 4.0]);
}
