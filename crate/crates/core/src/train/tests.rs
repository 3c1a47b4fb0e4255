use super::*;
use crate::config::{DataSource, ExperimentConfig};
use crate::eval::{write_synthetic_dataset, SyntheticSpec};
use crate::ingest::{BoundingBox, SplitRatios};
use crate::model::DenoiserConfig;
use crate::schedule::make_linear_schedule;
use crate::storage::Dataset;
use crate::treeplan::build_plan;
use approx::assert_abs_diff_eq;

fn tiny_config(horizons: usize) -> DenoiserConfig {
    DenoiserConfig {
        resolution: (8, 8),
        base_channels: 3,
        depth: 2,
        embed_dim: 6,
        max_level: 50,
        horizons,
        film_init_scale: 0.5,
    }
}

fn random_batch(seed: u64, horizons: usize, t_i: usize, t_j: usize, share: bool) -> TrainBatch {
    let mut rng = rng::stream(seed, "test-batch", &[]);
    let unit = |rng: &mut StreamRng| {
        Grid::from_vec(8, 8, (0..64).map(|_| rng.random::<f64>()).collect()).unwrap()
    };
    let cond = ConditioningContext::new(unit(&mut rng)).unwrap();
    let clean_i = unit(&mut rng);
    let clean_j = if t_i == t_j { clean_i.clone() } else { unit(&mut rng) };
    let eps_i = standard_normal_grid(&mut rng, 8, 8);
    let eps_j = if share { eps_i.clone() } else { standard_normal_grid(&mut rng, 8, 8) };
    assert!(t_i < horizons && t_j < horizons);
    TrainBatch {
        cond,
        t_i,
        t_j,
        clean_i,
        clean_j,
        level: rng.random_range(1..=50),
        eps_i,
        eps_j,
    }
}

fn schedule() -> NoiseSchedule {
    make_linear_schedule(50, 1e-4, 0.02).unwrap()
}

#[test]
fn degenerate_pairs_make_both_paths_identical() {
    let state = DenoiserState::new(tiny_config(4), 1).unwrap();
    let sched = schedule();
    for k in 0..100 {
        let t = (k % 4) as usize;
        let batch = random_batch(k, 4, t, t, true);
        let standard = loss_standard(&batch, &state, &sched).unwrap();
        let shifted = loss_shifted(&batch, &state, &sched, Direction::IToJ).unwrap();
        assert_eq!(standard.to_bits(), shifted.to_bits(), "batch {k}");
        let (l, _) = dpsl_loss_and_grads(&batch, &state, &sched, 1.0).unwrap();
        for term in [l.l1_j, l.l2_ij, l.l2_ji] {
            assert_eq!(term.to_bits(), l.l1_i.to_bits());
        }
        assert_abs_diff_eq!(l.total, 4.0 * l.l1_i, epsilon = 1e-15 * l.total);
    }
}

#[test]
fn shifted_target_matches_hand_arithmetic() {
    let ab = 0.75;
    let clean_i = Grid::from_vec(2, 2, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
    let clean_j = Grid::from_vec(2, 2, vec![1.0, 0.0, 0.5, 0.25]).unwrap();
    let eps = Grid::from_vec(2, 2, vec![0.5, -1.0, 1.5, 0.0]).unwrap();
    // noisy = sqrt(.75)*clean_i + 0.5*eps; target = (noisy - sqrt(.75)*clean_j)/0.5
    let r = 0.75f64.sqrt();
    let expected: Vec<f64> = (0..4)
        .map(|k| {
            let noisy = r * clean_i.as_slice()[k] + 0.5 * eps.as_slice()[k];
            (noisy - r * clean_j.as_slice()[k]) / 0.5
        })
        .collect();
    let noisy = clean_i.zip_with(&eps, |c, e| r * c + 0.5 * e).unwrap();
    let literal = shifted_target(&noisy, &clean_j, ab).unwrap();
    let expanded = shifted_target_from_noise(&eps, &clean_i, &clean_j, ab).unwrap();
    for k in 0..4 {
        assert_abs_diff_eq!(literal.as_slice()[k], expected[k], epsilon = 1e-12);
        assert_abs_diff_eq!(expanded.as_slice()[k], expected[k], epsilon = 1e-12);
    }
    // Zero target map: the regression target is the rescaled noisy state.
    let zero = shifted_target(&noisy, &Grid::zeros(2, 2), ab).unwrap();
    for k in 0..4 {
        assert_abs_diff_eq!(zero.as_slice()[k], noisy.as_slice()[k] / 0.5, epsilon = 1e-15);
    }
}

#[test]
fn zero_network_loss_is_the_noise_energy() {
    let cfg = tiny_config(3);
    let n = DenoiserState::new(cfg.clone(), 0).unwrap().num_params();
    let zero = DenoiserState::from_params(cfg, vec![0.0; n]).unwrap();
    let batch = random_batch(3, 3, 0, 2, false);
    let expected = batch.eps_i.as_slice().iter().map(|e| e * e).sum::<f64>() / 64.0;
    assert_eq!(loss_standard(&batch, &zero, &schedule()).unwrap(), expected);
    let ab = schedule().alpha_bar(batch.level);
    let target = shifted_target_from_noise(&batch.eps_j, &batch.clean_j, &batch.clean_i, ab).unwrap();
    let expected_ji = target.as_slice().iter().map(|e| e * e).sum::<f64>() / 64.0;
    let ji = loss_shifted(&batch, &zero, &schedule(), Direction::JToI).unwrap();
    assert_abs_diff_eq!(ji, expected_ji, epsilon = 1e-15 * expected_ji);
}

#[test]
fn all_terms_are_non_negative_and_sum_to_total() {
    let state = DenoiserState::new(tiny_config(4), 2).unwrap();
    for k in 0..10 {
        let batch = random_batch(100 + k, 4, 1, 3, false);
        let (l, _) = dpsl_loss_and_grads(&batch, &state, &schedule(), 1.0).unwrap();
        assert!(l.l1_i >= 0.0 && l.l1_j >= 0.0 && l.l2_ij >= 0.0 && l.l2_ji >= 0.0);
        assert_eq!(l.total, l.l1_i + l.l1_j + l.l2_ij + l.l2_ji);
    }
}

#[test]
fn dpsl_gradient_matches_finite_differences() {
    let state = DenoiserState::new(tiny_config(4), 9).unwrap();
    let sched = schedule();
    let batch = random_batch(4, 4, 0, 3, false);
    let (_, grads) = dpsl_loss_and_grads(&batch, &state, &sched, 1.0).unwrap();
    let total = |s: &DenoiserState| dpsl_loss_and_grads(&batch, s, &sched, 1.0).unwrap().0.total;
    let mut rng = rng::stream(0, "pick", &[]);
    let film = state.film_param_ranges();
    let mut picks: Vec<usize> = (0..12).map(|_| rng.random_range(0..state.num_params())).collect();
    picks.push(film[0].start + 1);
    picks.push(film[1].start);
    for i in picks {
        let h = 1e-5;
        let mut plus = state.clone();
        plus.params_mut()[i] += h;
        let mut minus = state.clone();
        minus.params_mut()[i] -= h;
        let numeric = (total(&plus) - total(&minus)) / (2.0 * h);
        let denom = numeric.abs().max(grads[i].abs()).max(1e-8);
        assert!((numeric - grads[i]).abs() / denom < 1e-4, "param {i}: {numeric} vs {}", grads[i]);
    }
}

#[test]
fn gradients_reach_the_film_layer_and_shift_path() {
    let state = DenoiserState::new(tiny_config(4), 4).unwrap();
    let batch = random_batch(8, 4, 0, 2, false);
    let (l, grads) = dpsl_loss_and_grads(&batch, &state, &schedule(), 1.0).unwrap();
    assert!(l.total > 0.0);
    let [w, b] = state.film_param_ranges();
    assert!(grads[w.clone()].iter().any(|g| *g != 0.0));
    assert!(grads[b].iter().any(|g| *g != 0.0));
    // The shift embedding occupies the last quarter of the FiLM input; its
    // weights only see gradient through shifted terms.
    let e = tiny_config(4).embed_dim;
    let inputs = 4 * e;
    let outputs = w.len() / inputs;
    let shift_cols: Vec<f64> = (0..outputs)
        .flat_map(|o| (3 * e..4 * e).map(move |c| o * inputs + c))
        .map(|k| grads[w.start + k])
        .collect();
    assert!(shift_cols.iter().any(|g| *g != 0.0));
}

#[test]
fn pairs_follow_the_tree_offsets() {
    let plan = build_plan(27, 4, 1000).unwrap();
    let mut rng = rng::stream(1, "pairs", &[]);
    let mut seen = std::collections::BTreeSet::new();
    let mut equal = 0;
    for _ in 0..4000 {
        let (a, b) = sample_pair(&plan, 0.8, PairSampling::Tree, &mut rng);
        assert!(a < 27 && b < 27);
        if a == b {
            equal += 1;
        } else {
            seen.insert(b - a);
            assert!(plan.branch_transitions().contains(&(a, b)));
        }
    }
    assert!(seen.iter().all(|d| [1, 2, 3, 6, 9, 18].contains(d)), "{seen:?}");
    assert_eq!(seen.len(), 6);
    assert!((600..1000).contains(&equal), "p_tree=0.8 gives ~20% equal pairs, saw {equal}");
    for _ in 0..200 {
        let (a, b) = sample_pair(&plan, 0.0, PairSampling::Tree, &mut rng);
        assert_eq!(a, b);
        let (c, d) = sample_pair(&plan, 1.0, PairSampling::Uniform, &mut rng);
        assert_ne!(c, d);
    }
    let single = build_plan(1, 2, 10).unwrap();
    for _ in 0..50 {
        assert_eq!(sample_pair(&single, 1.0, PairSampling::Tree, &mut rng), (0, 0));
    }
}

#[test]
fn adamw_matches_a_hand_step() {
    let mut opt = AdamW::new(2);
    opt.weight_decay = 0.1;
    let mut p = vec![1.0, -2.0];
    opt.step(&mut p, &[0.5, -0.25], 0.01);
    // First step: bias-corrected m/sqrt(v) = sign(g) (up to eps).
    let e0 = 1.0 - 0.01 * 0.1 * 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
    let e1 = -2.0 + 0.01 * 0.1 * 2.0 + 0.01 * 0.25 / (0.25 + 1e-8);
    assert_abs_diff_eq!(p[0], e0, epsilon = 1e-15);
    assert_abs_diff_eq!(p[1], e1, epsilon = 1e-15);
    assert_eq!(opt.step_count(), 1);
}

#[test]
fn cosine_schedule_spans_the_range() {
    assert_eq!(cosine_lr(0, 100, 1e-4, 1e-6), 1e-4);
    assert_abs_diff_eq!(cosine_lr(100, 100, 1e-4, 1e-6), 1e-6, epsilon = 1e-18);
    assert_abs_diff_eq!(cosine_lr(50, 100, 1e-4, 1e-6), 0.5 * (1e-4 + 1e-6), epsilon = 1e-18);
    assert!(cosine_lr(30, 100, 1e-4, 1e-6) > cosine_lr(31, 100, 1e-4, 1e-6));
}

fn toy_dataset(num_segments: usize, ratios: SplitRatios) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(
        dir.path(),
        &SyntheticSpec {
            num_segments,
            horizons: 4,
            resolution: (16, 16),
            sigma_px: 1.5,
            max_speed_px: 0.5,
            ratios,
            bbox: BoundingBox::CONUS,
            seed: 2,
        },
    )
    .unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    (dir, data)
}

fn toy_experiment() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed: 21,
        ..Default::default()
    };
    c.data.source = DataSource::Synthetic;
    c.data.resolution = [16, 16];
    c.data.horizons = 4;
    c.model.base_channels = 4;
    c.model.depth = 2;
    c.model.embed_dim = 8;
    c.diffusion.d_train = 50;
    c.diffusion.d_test = 4;
    c.tree.depth = 2;
    c.train.batch_size = 2;
    c.train.lr_max = 1e-3;
    c.train.lr_min = 1e-5;
    c.train.epochs = 1;
    c.train.eval_every = 0;
    c.train.checkpoint_every = 0;
    c
}

#[test]
fn one_epoch_writes_a_complete_checkpoint() {
    let (_d, data) = toy_dataset(5, SplitRatios { train: 0.6, val: 0.2, test: 0.2 });
    let out = tempfile::tempdir().unwrap();
    let cfg = toy_experiment();
    let outputs = TrainOutputs {
        checkpoint_dir: Some(out.path().join("ck")),
        metrics_log: Some(out.path().join("metrics.jsonl")),
        validation_log: Some(out.path().join("val.jsonl")),
        resume_from: None,
    };
    let report = train_loop(&data, &cfg, &outputs).unwrap();
    assert_eq!(report.total_steps, 2); // 3 segments, batch 2
    assert_eq!(report.checkpoints.len(), 1);
    let ck = checkpoint::load(&report.checkpoints[0]).unwrap();
    assert_eq!(ck.manifest.training_step, 2);
    assert_eq!(ck.manifest.config_hash, cfg.hash());
    assert_eq!(ck.manifest.normalization_constant, data.manifest.normalization_constant);
    assert_eq!(ck.state, report.state);
    assert!(checkpoint::load(&out.path().join("ck/best")).is_ok());
    let lines = std::fs::read_to_string(out.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["step", "l1_i", "l1_j", "l2_ij", "l2_ji", "total", "lr"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(report.validations.len(), 1);
}

#[test]
fn training_is_seeded_and_resumable() {
    let (_d, data) = toy_dataset(8, SplitRatios { train: 0.75, val: 0.25, test: 0.0 });
    let mut cfg = toy_experiment();
    cfg.train.epochs = 4; // 6 segments, batch 2 -> 12 steps
    cfg.train.checkpoint_every = 5;
    let out = tempfile::tempdir().unwrap();
    let outputs = TrainOutputs {
        checkpoint_dir: Some(out.path().to_path_buf()),
        ..Default::default()
    };
    let a = train_loop(&data, &cfg, &outputs).unwrap();
    let b = train_loop(&data, &cfg, &TrainOutputs::default()).unwrap();
    assert_eq!(a.total_steps, 12);
    assert_eq!(a.records[0], b.records[0]);
    assert_eq!(a.records[10], b.records[10]);
    assert_eq!(a.state.params(), b.state.params());

    let resumed = train_loop(
        &data,
        &cfg,
        &TrainOutputs {
            resume_from: Some(out.path().join("step-0000005")),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.start_step, 5);
    assert_eq!(&resumed.records[..], &a.records[5..]);
    assert_eq!(resumed.state.params(), a.state.params());

    let mut other = cfg.clone();
    other.seed += 1;
    let c = train_loop(&data, &other, &TrainOutputs::default()).unwrap();
    assert_ne!(c.records[0], a.records[0]);
}

#[test]
fn p_tree_zero_trains_only_the_standard_path() {
    let (_d, data) = toy_dataset(6, SplitRatios { train: 1.0, val: 0.0, test: 0.0 });
    let mut cfg = toy_experiment();
    cfg.train.p_tree = 0.0;
    cfg.train.epochs = 2;
    let report = train_loop(&data, &cfg, &TrainOutputs::default()).unwrap();
    for r in &report.records {
        assert_eq!(r.l2_ij.to_bits(), r.l1_i.to_bits());
        assert_eq!(r.l2_ji.to_bits(), r.l1_j.to_bits());
    }
}

#[test]
fn memorizes_a_two_segment_dataset() {
    let (_d, data) = toy_dataset(2, SplitRatios { train: 1.0, val: 0.0, test: 0.0 });
    let mut cfg = toy_experiment();
    cfg.train.epochs = 200;
    cfg.train.lr_max = 2e-3;
    let report = train_loop(&data, &cfg, &TrainOutputs::default()).unwrap();
    assert_eq!(report.records.len(), 200);
    let mean = |r: &[StepRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    let early = mean(&report.records[..20]);
    let late = mean(&report.records[180..]);
    assert!(late < 0.5 * early, "loss {early} -> {late}");
}

#[test]
fn mismatched_dataset_is_rejected() {
    let (_d, data) = toy_dataset(3, SplitRatios { train: 1.0, val: 0.0, test: 0.0 });
    let mut cfg = toy_experiment();
    cfg.data.resolution = [32, 32];
    assert!(matches!(
        train_loop(&data, &cfg, &TrainOutputs::default()),
        Err(Error::Data(_))
    ));
}

#[test]
fn non_finite_losses_abort_with_metadata() {
    let cfg = tiny_config(3);
    let mut state = DenoiserState::new(cfg, 0).unwrap();
    let mut batch = random_batch(1, 3, 0, 1, false);
    batch.eps_i.as_mut_slice()[0] = f64::NAN;
    let before = state.params().to_vec();
    let mut opt = AdamW::new(state.num_params());
    let err = dpsl_step(&[batch], &mut state, &mut opt, &schedule(), 1e-3, 7).unwrap_err();
    match err {
        Error::NonFiniteLoss { step, detail } => {
            assert_eq!(step, 7);
            assert!(detail.contains("pair=(0, 1)"));
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(state.params(), &before[..]);
}
