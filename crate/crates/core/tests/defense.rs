use orthoiqa::attacks::AttackConfig;
use orthoiqa::data::generate_dataset;
use orthoiqa::defense::*;
use orthoiqa::eval::{evaluate, performance};
use orthoiqa::metrics::{RScoreConfig, DEFAULT_EPS_GRID};
use orthoiqa::nn::{mse, train, Activation, LayerKind, ModelBuilder, ModelGraph, TrainConfig};
use orthoiqa::toy::{toy_model, TOY_IMAGE_SIZE};
use orthoiqa::{Error, Tensor};

/// Conv whose output-channel filters have the given constant values.
fn conv_with_filters(values: &[f64], cin: usize) -> Tensor {
    let per = cin * 9;
    Tensor::new(vec![values.len(), cin, 3, 3], values.iter().flat_map(|&v| vec![v; per]).collect()).unwrap()
}

fn two_conv_model(a: &[f64], b: &[f64]) -> ModelGraph {
    ModelBuilder::new(vec![1, 6, 6], 0)
        .conv(1, a.len(), 3, 1, 1)
        .activation(Activation::Relu)
        .conv(a.len(), b.len(), 3, 1, 1)
        .activation(Activation::Relu)
        .layer(LayerKind::GlobalAvgPool)
        .dense(b.len(), 1)
        .with_param("l0.weight", conv_with_filters(a, 1))
        .with_param("l2.weight", conv_with_filters(b, a.len()))
        .build()
        .unwrap()
}

fn small_data(n: usize) -> (Vec<Tensor>, Vec<f64>) {
    let ds = generate_dataset(n, TOY_IMAGE_SIZE, 17).unwrap();
    (ds.iter().map(|s| s.image.clone()).collect(), ds.iter().map(|s| s.label).collect())
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr: 3e-3, batch_size: 8, seed: 5, ..TrainConfig::default() }
}

#[test]
fn zero_rate_is_a_no_op() {
    let m = toy_model(1).unwrap();
    let (out, report) = prune_channels(&m, &PruneConfig::all_convs(&m, 0.0, PruneCriterion::L2)).unwrap();
    assert_eq!(out, m);
    assert_eq!(report, PruneReport::default());
}

#[test]
fn quantile_count_picks_smallest_filters() {
    let a: Vec<f64> = (0..10).map(|i| 1.0 + i as f64).collect();
    let b: Vec<f64> = (0..10).map(|i| 0.5 + 2.0 * i as f64).collect();
    let m = two_conv_model(&a, &b);
    let (out, report) = prune_channels(&m, &PruneConfig::all_convs(&m, 0.1, PruneCriterion::L2)).unwrap();
    assert_eq!(report.total_masked, 2);
    assert_eq!(report.criterion_values.len(), 20);
    // Norms are 3·a over 9 taps and √90·b over 90 taps: 3.0, 4.74, 6.0, ...
    let masked: Vec<(usize, Vec<usize>)> = report.masks.iter().map(|m| (m.layer_index, m.channels.clone())).collect();
    assert_eq!(masked, vec![(0, vec![0]), (2, vec![0])]);
    assert!(out.params["l0.weight"].data()[..9].iter().all(|&v| v == 0.0));
    assert!(out.params["l0.weight"].data()[9..].iter().all(|&v| v != 0.0));
    assert!(out.params["l2.weight"].data()[..90].iter().all(|&v| v == 0.0));
    assert_eq!(out.layers[0].masked_channels, vec![0]);
    assert_eq!(out.layers[2].masked_channels, vec![0]);
}

#[test]
fn smaller_norm_filter_is_masked() {
    let m = two_conv_model(&[0.1 / 3.0, 5.0 / 3.0], &[1.0, 1.0, 1.0]);
    let cfg = PruneConfig { criterion: PruneCriterion::L2, rate: 0.5, scope: vec![0] };
    let (_, report) = prune_channels(&m, &cfg).unwrap();
    assert_eq!(report.masks.len(), 1);
    assert_eq!(report.masks[0].channels, vec![0]);
    assert!((report.criterion_values[0].value - 0.1).abs() < 1e-12);
}

#[test]
fn ties_go_to_lower_layer_then_channel() {
    // ℓ1 norms: layer 0 is (18, 9, 9, 18) over 9 taps, layer 2 is (9, 9, 36) over 36 taps.
    let m = two_conv_model(&[2.0, 1.0, 1.0, 2.0], &[0.25, 0.25, 1.0]);
    let cfg = PruneConfig { criterion: PruneCriterion::L1, rate: 0.5, scope: vec![0, 2] };
    let (_, report) = prune_channels(&m, &cfg).unwrap();
    assert_eq!(report.total_masked, 3);
    let got: Vec<(usize, Vec<usize>)> = report.masks.iter().map(|m| (m.layer_index, m.channels.clone())).collect();
    assert_eq!(got, vec![(0, vec![1, 2]), (2, vec![0])]);
}

#[test]
fn masking_a_whole_layer_is_an_error() {
    let m = two_conv_model(&[0.01, 0.02], &[5.0, 6.0, 7.0, 8.0]);
    match prune_channels(&m, &PruneConfig::all_convs(&m, 0.34, PruneCriterion::L1)) {
        Err(Error::Pruning(msg)) => assert!(msg.contains("l0"), "{msg}"),
        other => panic!("expected a pruning error, got {other:?}"),
    }
}

#[test]
fn invalid_prune_configs() {
    let m = toy_model(1).unwrap();
    for cfg in [
        PruneConfig { criterion: PruneCriterion::L2, rate: 1.0, scope: vec![0] },
        PruneConfig { criterion: PruneCriterion::L2, rate: 0.1, scope: vec![] },
        PruneConfig { criterion: PruneCriterion::L2, rate: 0.1, scope: vec![1] },
        PruneConfig { criterion: PruneCriterion::L2, rate: 0.1, scope: vec![99] },
    ] {
        assert!(matches!(prune_channels(&m, &cfg), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn pruning_is_scale_consistent() {
    let m = toy_model(3).unwrap();
    let mut scaled = m.clone();
    for i in scaled.conv_indices() {
        let id = scaled.layers[i].param_ids[0].clone();
        let w = scaled.params[&id].scale(7.25);
        scaled.params.insert(id, w);
    }
    // ℓ1 grows with fan-in, so a global ℓ1 threshold would empty the 27-tap first layer.
    for (criterion, scope) in [(PruneCriterion::L1, vec![2, 4, 6]), (PruneCriterion::L2, m.conv_indices())] {
        let cfg = PruneConfig { criterion, rate: 0.1, scope };
        let (_, a) = prune_channels(&m, &cfg).unwrap();
        let (_, b) = prune_channels(&scaled, &cfg).unwrap();
        assert!(a.total_masked >= 8);
        assert_eq!(a.masks, b.masks);
    }
    assert!(matches!(prune_channels(&m, &PruneConfig::all_convs(&m, 0.1, PruneCriterion::L1)), Err(Error::Pruning(_))));
}

#[test]
fn prune_count_is_floor_of_rate() {
    assert_eq!(prune_count(0.1, 20), 2);
    assert_eq!(prune_count(0.29, 100), 29);
    assert_eq!(prune_count(0.1, 88), 8);
    assert_eq!(prune_count(0.5, 3), 1);
}

#[test]
fn masks_survive_fine_tuning_and_training_is_stable() {
    let (x, y) = small_data(48);
    let mut m = toy_model(2).unwrap();
    train(&mut m, &x, &y, &quick_cfg(8)).unwrap();
    let before = mse(&m, &x, &y).unwrap();
    let (tuned, _) = fine_tune(&m, &x, &y, &fine_tune_config(&quick_cfg(8), 5, 9)).unwrap();
    assert!(mse(&tuned, &x, &y).unwrap() <= 1.05 * before);

    let (pruned, report) = prune_channels(&m, &PruneConfig::all_convs(&m, 0.1, PruneCriterion::L2)).unwrap();
    assert_eq!(report.total_masked, 8);
    let (tuned, _) = fine_tune(&pruned, &x, &y, &fine_tune_config(&quick_cfg(8), 5, 9)).unwrap();
    for mask in &report.masks {
        let layer = &tuned.layers[mask.layer_index];
        let w = &tuned.params[&layer.param_ids[0]];
        let per = w.len() / w.shape()[0];
        for &ch in &mask.channels {
            assert!(w.data()[ch * per..(ch + 1) * per].iter().all(|&v| v == 0.0));
            assert_eq!(tuned.params[&layer.param_ids[1]].data()[ch], 0.0);
        }
    }
}

#[test]
fn fine_tune_lr_is_a_tenth() {
    let c = fine_tune_config(&quick_cfg(30), 5, 1);
    assert_eq!((c.epochs, c.lr, c.seed, c.batch_size), (5, 3e-3 / 10.0, 1, 8));
}

#[test]
fn full_and_partial_replacement() {
    let m = toy_model(0).unwrap();
    let relus = |m: &ModelGraph| m.layers.iter().filter(|l| l.kind == LayerKind::Relu).count();
    assert_eq!(relus(&m), 5);
    let (full, r) = replace_activations(&m, ReplaceMode::Full, Activation::Gelu).unwrap();
    assert_eq!(r.replaced.len(), 5);
    assert_eq!(relus(&full), 0);
    assert_eq!(full.params, m.params);

    let (part, r) = replace_activations(&m, ReplaceMode::Partial, Activation::Silu).unwrap();
    assert_eq!(r.replaced, vec![10]);
    assert_eq!(part.layers[10].kind, LayerKind::Silu);
    assert_eq!(relus(&part), 4);

    let plain = two_conv_model(&[1.0], &[1.0]);
    let (same, r) = replace_activations(&plain, ReplaceMode::Partial, Activation::Elu).unwrap();
    assert_eq!(same, plain);
    assert!(r.replaced.is_empty() && r.warning.is_some());
    assert!(matches!(replace_activations(&m, ReplaceMode::Full, Activation::Relu), Err(Error::Config(_))));
}

#[test]
fn smooth_replacement_passes_gradient_check_near_zero() {
    let (m, r) = replace_activations(&two_conv_model(&[0.5, -0.3], &[0.2, 0.4]), ReplaceMode::Full, Activation::Gelu).unwrap();
    assert_eq!(r.replaced.len(), 2);
    // Inputs of 1e-6 keep every pre-activation near 0.
    let x = Tensor::filled(vec![1, 6, 6], 1e-6);
    let (_, g) = m.prepare().unwrap().input_gradient(&x).unwrap();
    let h = 1e-7;
    for i in [0, 7, 20, 35] {
        let (mut p, mut q) = (x.clone(), x.clone());
        p.data_mut()[i] += h;
        q.data_mut()[i] -= h;
        let fd = (m.forward(&p).unwrap() - m.forward(&q).unwrap()) / (2.0 * h);
        assert!((fd - g.data()[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}: {fd} vs {}", g.data()[i]);
    }
}

#[test]
fn defend_no_op() {
    let (x, y) = small_data(8);
    let m = toy_model(4).unwrap();
    let opts = DefendOptions { skip_block: true, prune_rate: 0.0, ..DefendOptions::new(quick_cfg(1), 1) };
    let (out, prov) = defend(&m, &x, &y, &opts).unwrap();
    assert_eq!(out, m);
    assert!(prov.block_position.is_none() && prov.masks.is_empty() && prov.fine_tune.is_none());
    assert_eq!(prov.input_model_hash, prov.output_model_hash);
}

#[test]
fn defend_is_deterministic_and_replays() {
    let (x, y) = small_data(24);
    let mut m = toy_model(5).unwrap();
    train(&mut m, &x, &y, &quick_cfg(2)).unwrap();
    let opts = DefendOptions { fine_tune_epochs: 1, ..DefendOptions::new(quick_cfg(2), 8) };
    let (a, prov) = defend(&m, &x, &y, &opts).unwrap();
    assert_eq!(prov.block_position, Some(6));
    assert!(matches!(a.layers[6].kind, LayerKind::RobustBlock { .. }));
    assert_eq!(prov.masks.iter().map(|m| m.channels.len()).sum::<usize>(), 8);
    assert_eq!(prov.fine_tune.unwrap().lr, 3e-3 / 10.0);

    let (b, prov_b) = defend(&m, &x, &y, &opts).unwrap();
    assert_eq!(prov, prov_b);
    assert_eq!(model_hash(&a).unwrap(), model_hash(&b).unwrap());

    let json = serde_json::to_string(&prov).unwrap();
    let record: DefenseProvenance = serde_json::from_str(&json).unwrap();
    let replayed = replay_defense(&m, &x, &y, &record).unwrap();
    assert_eq!(model_hash(&replayed).unwrap(), prov.output_model_hash);

    let mut tampered = record;
    tampered.output_model_hash = "0".repeat(64);
    assert!(replay_defense(&m, &x, &y, &tampered).is_err());
}

#[test]
fn defend_reports_failing_stage() {
    let (x, y) = small_data(4);
    let m = toy_model(6).unwrap();
    let opts = DefendOptions { position: Some(1), ..DefendOptions::new(quick_cfg(1), 1) };
    match defend(&m, &x, &y, &opts) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "insert"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn evaluation_covers_the_grid() {
    let (x, y) = small_data(12);
    let mut m = toy_model(7).unwrap();
    assert!(matches!(
        evaluate(&m, &x, &y, &AttackConfig::pgd(0.0, 1), &DEFAULT_EPS_GRID, RScoreConfig::default()),
        Err(Error::Normalization(_))
    ));
    train(&mut m, &x, &y, &quick_cfg(2)).unwrap();
    let e = evaluate(&m, &x, &y, &AttackConfig::pgd(0.0, 2), &DEFAULT_EPS_GRID, RScoreConfig::default()).unwrap();
    assert_eq!(e.runs.len(), 5);
    assert_eq!(e.report.curve.len(), 5);
    for (run, &eps) in e.runs.iter().zip(&DEFAULT_EPS_GRID) {
        assert_eq!(run.config.epsilon, eps);
        assert!(run.outcomes.iter().all(|o| o.linf <= eps + 1e-12));
    }
    let auc = e.report.abs_gain_auc.unwrap();
    let recomputed: f64 = e.report.curve.windows(2).map(|w| (w[1].epsilon - w[0].epsilon) * 255.0 * 0.5 * (w[0].abs_gain + w[1].abs_gain)).sum();
    assert!((auc - recomputed).abs() < 1e-12);
    assert_eq!(e.report.srocc, performance(&m, &x, &y).unwrap().srocc);
    assert!(evaluate(&m, &x, &y, &AttackConfig::pgd(0.0, 1), &[0.02, 0.01], RScoreConfig::default()).is_err());
}
