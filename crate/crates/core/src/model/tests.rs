use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{NUM_CATEGORICAL, NUM_NUMERICAL};
use crate::sketch::Segment;

fn tiny_config(use_features: bool) -> ModelConfig {
    let mut config = ModelConfig::new(
        vec![Segment::new(2, 4), Segment::new(2, 4)],
        8,
        vec![3; NUM_CATEGORICAL],
    );
    config.use_features = use_features;
    config.categorical_dims = vec![2; NUM_CATEGORICAL];
    config.output_init_scale = 1.0;
    config.seed = 7;
    config
}

fn random_batch(config: &ModelConfig, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = Array2::from_shape_simple_fn((n, config.dense_len()), || rng.random::<f64>());
    let categorical = (0..n)
        .map(|_| std::array::from_fn(|i| rng.random_range(0..config.categorical_sizes[i])))
        .collect();
    let widths: Vec<usize> = config
        .segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.width, s.depth))
        .collect();
    let targets = Array2::from_shape_fn((n, config.rows()), |(_, r)| {
        rng.random_range(0..widths[r]) as u16
    });
    Batch {
        dense,
        categorical,
        targets: Some(targets),
    }
}

fn train_loss(net: &Network, batch: &Batch) -> f64 {
    let logits = net.logits(batch, Mode::Train).unwrap();
    net.loss_from_logits(&logits, batch.targets.as_ref().unwrap())
        .0
}

#[test]
fn gradients_match_finite_differences() {
    let config = tiny_config(true);
    let mut net = Network::new(config.clone()).unwrap();
    // Move batch-norm affine parameters off their identity init.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for block in &mut net.weights.blocks {
        block.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
        block.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let batch = random_batch(&config, 4, 11);
    let (_, grads, _) = net.loss_and_gradients(&batch).unwrap();
    let h = 1e-5;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..grad.len() {
            let original = net.weights.tensors()[ti].data[i];
            net.weights.tensors_mut()[ti].data[i] = original + h;
            let up = train_loss(&net, &batch);
            net.weights.tensors_mut()[ti].data[i] = original - h;
            let down = train_loss(&net, &batch);
            net.weights.tensors_mut()[ti].data[i] = original;
            let numeric = (up - down) / (2.0 * h);
            let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{name}: relative error {worst:e}");
    }
}

#[test]
fn initial_loss_is_near_uniform() {
    let mut config = tiny_config(true);
    config.output_init_scale = 0.01;
    config.segments = vec![Segment::new(4, 16)];
    let net = Network::new(config.clone()).unwrap();
    let batch = random_batch(&config, 32, 1);
    let loss = train_loss(&net, &batch);
    let uniform = 16f64.ln();
    assert!(
        (loss - uniform).abs() < 0.01 * uniform,
        "{loss} vs {uniform}"
    );
}

#[test]
fn cross_entropy_hand_cases() {
    let segments = vec![Segment::new(1, 128)];
    let logits = Array2::zeros((1, 128));
    let targets = Array2::from_elem((1, 1), 5u16);
    let (loss, _) = network::softmax_cross_entropy(&segments, &logits, &targets);
    assert!((loss - 128f64.ln()).abs() < 1e-12);
    assert!((loss - 4.852).abs() < 1e-3);

    let segments = vec![Segment::new(1, 2)];
    let logits = Array2::from_shape_vec((1, 2), vec![3.0, 3.0]).unwrap();
    let (loss, grad) = network::softmax_cross_entropy(&segments, &logits, &Array2::zeros((1, 1)));
    assert!((loss - 2f64.ln()).abs() < 1e-12);
    assert!((grad[[0, 0]] + 0.5).abs() < 1e-12 && (grad[[0, 1]] - 0.5).abs() < 1e-12);
}

#[test]
fn zero_weights_give_output_bias() {
    let config = tiny_config(false);
    let mut net = Network::new(config.clone()).unwrap();
    for t in net.weights.tensors_mut() {
        t.data.fill(0.0);
    }
    let bias: Vec<f64> = (0..config.output_len()).map(|i| i as f64 * 0.1).collect();
    net.weights.output.b = Array1::from(bias.clone());
    let batch = random_batch(&config, 3, 2);
    let logits = net.logits(&batch, Mode::Eval).unwrap();
    for row in logits.outer_iter() {
        assert_eq!(row.to_vec(), bias);
    }
}

#[test]
fn residual_block_is_identity_when_silenced() {
    let config = tiny_config(false);
    let mut net = Network::new(config.clone()).unwrap();
    let batch = random_batch(&config, 5, 4);
    let before = {
        let mut n = net.clone();
        n.weights.blocks.clear();
        n.running.clear();
        n.config.blocks = 0;
        n.logits(&batch, Mode::Eval).unwrap()
    };
    for block in &mut net.weights.blocks {
        block.gamma.fill(0.0);
        block.beta.fill(0.0);
    }
    let after = net.logits(&batch, Mode::Train).unwrap();
    assert!((&before - &after).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn eval_forward_is_deterministic_and_row_independent() {
    let config = tiny_config(true);
    let net = Network::new(config.clone()).unwrap();
    let batch = random_batch(&config, 6, 5);
    let a = net.forward(&batch, Mode::Eval).unwrap();
    assert_eq!(a, net.forward(&batch, Mode::Eval).unwrap());
    let single = Batch {
        dense: batch.dense.slice(ndarray::s![2..3, ..]).to_owned(),
        categorical: vec![batch.categorical[2]],
        targets: None,
    };
    let b = net.forward(&single, Mode::Eval).unwrap();
    assert!((&a.row(2) - &b.row(0)).iter().all(|d| d.abs() < 1e-12));
    for row in a.outer_iter() {
        for r in 0..config.rows() {
            let sum: f64 = row.slice(ndarray::s![r * 4..r * 4 + 4]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn flag_changes_output() {
    let config = tiny_config(true);
    let net = Network::new(config.clone()).unwrap();
    let mut batch = random_batch(&config, 2, 6);
    let flag = config.dense_len() - 1;
    batch.dense[[0, flag]] = 0.0;
    batch.dense[[1, flag]] = 1.0;
    let row = batch.dense.row(0).to_owned();
    batch.dense.row_mut(1).assign(&row);
    batch.dense[[1, flag]] = 1.0;
    batch.categorical[1] = batch.categorical[0];
    let out = net.forward(&batch, Mode::Eval).unwrap();
    assert!((&out.row(0) - &out.row(1)).iter().any(|d| d.abs() > 1e-9));
}

#[test]
fn running_stats_converge_to_batch_stats() {
    let config = tiny_config(true);
    let mut net = Network::new(config.clone()).unwrap();
    let batch = random_batch(&config, 2000, 8);
    for _ in 0..150 {
        let (_, _, stats) = net.loss_and_gradients(&batch).unwrap();
        net.update_running_stats(&stats);
    }
    // The running variance is unbiased, so a large batch keeps the n/(n-1) gap small.
    let train = net.forward(&batch, Mode::Train).unwrap();
    let eval = net.forward(&batch, Mode::Eval).unwrap();
    let worst = (&train - &eval).iter().fold(0.0f64, |m, d| m.max(d.abs()));
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn adamw_zero_gradient_only_decays() {
    let config = tiny_config(false);
    let net = Network::new(config).unwrap();
    let mut weights = net.weights.clone();
    let grads = weights.zeros_like();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &weights,
    );
    opt.step(&mut weights, &grads, 1e-3);
    assert_eq!(weights, net.weights);

    let mut opt = AdamW::new(AdamWConfig::default(), &weights);
    opt.step(&mut weights, &grads, 0.5);
    let shrink = 1.0 - 0.5 * 0.01;
    assert!((weights.input.w[[0, 0]] - net.weights.input.w[[0, 0]] * shrink).abs() < 1e-15);
    assert_eq!(weights.input.b, net.weights.input.b);
}

#[test]
fn adamw_first_step_moves_by_lr() {
    let config = tiny_config(false);
    let net = Network::new(config).unwrap();
    let mut weights = net.weights.clone();
    let mut grads = weights.zeros_like();
    grads.output.b.fill(-3.0);
    let mut opt = AdamW::new(AdamWConfig::default(), &weights);
    opt.step(&mut weights, &grads, 1e-3);
    let moved = &weights.output.b - &net.weights.output.b;
    assert!(moved.iter().all(|d| (d - 1e-3).abs() < 1e-9));
}

#[test]
fn output_length_matches_layout() {
    let segments = vec![Segment::new(40, 128); 3];
    let config = ModelConfig::new(segments, 16, vec![1; NUM_CATEGORICAL]);
    assert_eq!(config.output_len(), 15_360);
    assert_eq!(config.dense_len(), 3 * 15_360 + NUM_NUMERICAL + 1);
}

#[test]
fn parameter_count_matches_tensors() {
    let config = tiny_config(true);
    let net = Network::new(config.clone()).unwrap();
    let total: usize = net.weights.tensors().iter().map(|t| t.data.len()).sum();
    assert_eq!(config.parameter_count(), total);
    let mut small = config.clone();
    small.use_features = false;
    let h = small.hidden_for_parameters(config.parameter_count());
    small.hidden = h;
    let above = {
        let mut c = small.clone();
        c.hidden = h + 1;
        c.parameter_count()
    };
    assert!(
        small.parameter_count() <= config.parameter_count() + (above - small.parameter_count())
    );
    assert!(h > config.hidden);
}
