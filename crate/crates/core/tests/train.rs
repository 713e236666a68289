mod common;

use mpresnet::blocks::BlockParams;
use mpresnet::data::{kfold_split, synth_scene, SplitRatio};
use mpresnet::exec::Mode;
use mpresnet::models::{Model, ModelConfig, Variant};
use mpresnet::tensor::{ConvSpec, Graph, Tensor};
use mpresnet::train::*;
use mpresnet::Error;
use proptest::prelude::*;

fn samples(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample::from_tile(&synth_scene(seed + i as u64, size, size, 6, 4.0).unwrap(), 0.99).unwrap())
        .collect()
}

fn trainable(params: &BlockParams<f32>) -> Vec<(String, Vec<f32>)> {
    params
        .iter()
        .filter(|p| p.kind.is_trainable())
        .map(|p| (p.name.clone(), p.value.data().to_vec()))
        .collect()
}

#[test]
fn sgd_step_on_half_square() {
    // d/dw ½w² = w, so one step from 1 with lr 0.1 lands on 0.9.
    let mut g = Graph::<f64>::new();
    let w = g.leaf(Tensor::scalar(1.0), true);
    let sq = g.mul(w, w).unwrap();
    let loss = g.scale(sq, 0.5);
    let grad = g.backward(loss).unwrap().take(w).unwrap();
    let (mut weight, mut v) = (vec![1.0], vec![0.0]);
    sgd_update(&mut weight, grad.data(), &mut v, 0.1, 0.0, 0.0);
    assert_eq!(weight, vec![0.9]);
}

#[test]
fn sgd_momentum_and_decay_match_recurrence() {
    let (lr, mu, wd) = (0.05, 0.9, 1e-2);
    let grads = [[0.3, -1.0], [0.1, 0.4], [-0.7, 0.2]];
    let (mut w, mut v) = (vec![1.0f64, -2.0], vec![0.0; 2]);
    let (mut ow, mut ov) = ([1.0f64, -2.0], [0.0f64; 2]);
    for g in grads {
        sgd_update(&mut w, &g, &mut v, lr, mu, wd);
        for i in 0..2 {
            ov[i] = mu * ov[i] + g[i] + wd * ow[i];
            ow[i] -= lr * ov[i];
        }
    }
    assert_eq!(w, ow.to_vec());
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = samples(2, 64, 3);
    let mut model = Model::<f32>::build(&ModelConfig::tiny_mp_resnet(), 1).unwrap();
    let before = trainable(model.params());
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    fit(&mut model, &data, &data, &cfg, None).unwrap();
    assert_eq!(trainable(model.params()), before);
}

#[test]
fn gradients_cover_every_trainable_tensor() {
    let data = samples(2, 64, 5);
    let mut model = Model::<f32>::build(&ModelConfig::tiny_fcn_baseline(), 2).unwrap();
    let refs: Vec<&Sample> = data.iter().collect();
    let (batch, labels) = stack::<f32>(&refs).unwrap();
    let (loss, grads) = loss_and_grads(&mut model, &batch, &labels).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    for p in model.params().iter().filter(|p| p.kind.is_trainable()) {
        let g = &grads[&p.name];
        assert_eq!(g.shape(), p.value.shape(), "{}", p.name);
    }
    let tensors = model.params().iter().filter(|p| p.kind.is_trainable()).count();
    assert_eq!(grads.len(), tensors);
}

/// Linear map `y = W x + b` as a biased 1×1 convolution with loss `Σ (y − t)²`
/// on a single pixel, which keeps the loss small relative to its gradient.
#[test]
fn linear_model_gradient_matches_central_differences() {
    let mut r = common::rng(11);
    let spec = ConvSpec::new(3, 2, 1, 1, 0).with_bias();
    let x = Tensor::new(&[1, 3, 1, 1], common::random_vec(&mut r, 3)).unwrap();
    let t = Tensor::new(&[1, 2, 1, 1], common::random_vec(&mut r, 2)).unwrap();
    let w0 = common::random_vec(&mut r, 6);
    let b0 = common::random_vec(&mut r, 2);
    let loss_of = |w: &[f64], b: &[f64]| -> f64 {
        (0..2)
            .map(|co| {
                let y: f64 = (0..3).map(|ci| w[co * 3 + ci] * x.data()[ci]).sum::<f64>() + b[co];
                (y - t.data()[co]).powi(2)
            })
            .sum()
    };
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone(), false);
    let tv = g.leaf(t.clone(), false);
    let wv = g.leaf(Tensor::new(&[2, 3, 1, 1], w0.clone()).unwrap(), true);
    let bv = g.leaf(Tensor::new(&[2], b0.clone()).unwrap(), true);
    let y = g.conv2d(xv, wv, Some(bv), &spec).unwrap();
    let d = g.sub(y, tv).unwrap();
    let sq = g.mul(d, d).unwrap();
    let loss = g.sum(sq);
    let mut grads = g.backward(loss).unwrap();
    let (gw, gb) = (grads.take(wv).unwrap(), grads.take(bv).unwrap());

    let mut worst: f64 = 0.0;
    let mut probe = |analytic: f64, f: &dyn Fn(f64) -> f64, w: f64| {
        let eps = 1e-6 * w.abs().max(1.0);
        let numeric = (f(w + eps) - f(w - eps)) / (2.0 * eps);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    };
    for i in 0..6 {
        let f = |v: f64| {
            let mut w = w0.clone();
            w[i] = v;
            loss_of(&w, &b0)
        };
        probe(gw.data()[i], &f, w0[i]);
    }
    for i in 0..2 {
        let f = |v: f64| {
            let mut b = b0.clone();
            b[i] = v;
            loss_of(&w0, &b)
        };
        probe(gb.data()[i], &f, b0[i]);
    }
    assert!(worst < 1e-9, "worst relative error {worst:e}");
}

#[test]
fn grad_check_passes_for_both_architectures() {
    for variant in [Variant::MpResnet, Variant::FcnBaseline] {
        let report = grad_check(&grad_check_config(variant), &GradCheckConfig::default()).unwrap();
        assert!(report.probes >= 200);
        assert!(report.num_params <= 50_000);
        assert!(
            report.worst_relative_error < 1e-4,
            "{variant}: {} at {}[{}]",
            report.worst_relative_error,
            report.worst_param,
            report.worst_index
        );
    }
}

#[test]
fn grad_check_rejects_large_models() {
    let err = grad_check(&ModelConfig::tiny_mp_resnet(), &GradCheckConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

#[test]
fn argmax_constant_and_ties() {
    let mut logits = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
    for p in 0..4 {
        logits.data_mut()[2 * 4 + p] = 1.0;
    }
    assert_eq!(argmax_labels(&logits).unwrap(), vec![2; 4]);

    let mut tie = Tensor::<f64>::full(&[1, 4, 1, 1], -1.0);
    tie.data_mut()[1] = 5.0;
    tie.data_mut()[3] = 5.0;
    assert_eq!(argmax_labels(&tie).unwrap(), vec![1]);
}

proptest! {
    #[test]
    fn argmax_ignores_per_pixel_offsets(values in prop::collection::vec(-4i32..4, 3 * 6), offsets in prop::collection::vec(-100i32..100, 6)) {
        // Integer-valued logits keep the shifted comparisons exact.
        let base = Tensor::new(&[1, 3, 2, 3], values.iter().map(|&v| v as f64).collect()).unwrap();
        let mut shifted = base.clone();
        for c in 0..3 {
            for p in 0..6 {
                shifted.data_mut()[c * 6 + p] += offsets[p] as f64;
            }
        }
        prop_assert_eq!(argmax_labels(&base).unwrap(), argmax_labels(&shifted).unwrap());
    }
}

#[test]
fn reflect_pad_matches_mirror_indexing() {
    let img = Tensor::from_fn(&[2, 5, 7], |i| i as f32);
    let padded = reflect_pad(&img).unwrap();
    assert_eq!(padded.shape(), &[2, 32, 32]);
    let mirror = |i: usize, n: usize| {
        let period = 2 * (n - 1);
        let m = i % period;
        if m < n { m } else { period - m }
    };
    for c in 0..2 {
        for y in 0..32 {
            for x in 0..32 {
                let want = img.data()[(c * 5 + mirror(y, 5)) * 7 + mirror(x, 7)];
                assert_eq!(padded.data()[(c * 32 + y) * 32 + x], want);
            }
        }
    }
    let aligned = Tensor::from_fn(&[1, 32, 64], |i| i as f32);
    assert_eq!(reflect_pad(&aligned).unwrap().data(), aligned.data());
}

#[test]
fn predict_map_crops_padded_prediction() {
    let mut model = Model::<f32>::build(&ModelConfig::tiny_mp_resnet(), 4).unwrap();
    model.set_mode(Mode::Eval);
    let img = Tensor::from_fn(&[4, 40, 50], |i| ((i * 7919) % 1000) as f32 / 1000.0);
    let map = predict_map(&mut model, &img).unwrap();
    assert_eq!((map.height(), map.width()), (40, 50));

    let padded = reflect_pad(&img).unwrap();
    let logits = model.forward_segment(&padded.reshape(&[1, 4, 64, 64]).unwrap()).unwrap();
    let full = argmax_labels(&logits).unwrap();
    let cropped: Vec<u8> = (0..40).flat_map(|y| full[y * 64..y * 64 + 50].to_vec()).collect();
    assert_eq!(map.data(), cropped.as_slice());
    assert_eq!(model.mode(), Mode::Eval);
}

#[test]
fn fit_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = samples(3, 64, 20);
    let mut model = Model::<f32>::build(&ModelConfig::tiny_fcn_baseline(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 2,
        learning_rate: 0.05,
        checkpoint_every: 2,
        ..TrainConfig::default()
    };
    let out = fit(&mut model, &data[..2], &data[2..], &cfg, Some(dir.path())).unwrap();
    assert_eq!(out.log.len(), 4);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(dir.path().join("log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    for key in ["epoch", "train_loss", "val_oa", "val_mean_f1", "val_fwiou", "wall_seconds"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
    for name in ["best.ckpt", "last.ckpt", "epoch_0002.ckpt", "epoch_0004.ckpt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert!(!dir.path().join("epoch_0001.ckpt").exists());

    let best = out.log.iter().map(|r| r.val_fwiou).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_record().val_fwiou, best);
    assert_eq!(out.best_report.fwiou, best);
    assert_eq!(out.log.iter().position(|r| r.val_fwiou == best).unwrap() + 1, out.best_epoch);

    // The retained checkpoint reproduces the best epoch's validation score.
    let mut reloaded = mpresnet::models::load_checkpoint::<f32>(&dir.path().join("best.ckpt")).unwrap();
    let report = mpresnet::metrics::MetricsReport::from_confusion(&evaluate(&mut reloaded, &data[2..]).unwrap()).unwrap();
    assert_eq!(report.fwiou, best);
}

#[test]
fn fit_is_deterministic() {
    let data = samples(4, 64, 30);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        learning_rate: 0.05,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::<f32>::build(&ModelConfig::tiny_mp_resnet(), 9).unwrap();
        let out = fit(&mut model, &data[..3], &data[3..], &cfg, Some(dir.path())).unwrap();
        let ckpt = std::fs::read(dir.path().join("best.ckpt")).unwrap();
        let log: Vec<_> = out
            .log
            .iter()
            .map(|r| (r.epoch, r.train_loss.to_bits(), r.val_oa.to_bits(), r.val_mean_f1.to_bits(), r.val_fwiou.to_bits()))
            .collect();
        (log, ckpt)
    };
    assert_eq!(run(), run());
}

#[test]
fn training_reduces_loss() {
    let data = samples(2, 64, 40);
    let mut model = Model::<f32>::build(&ModelConfig::tiny_mp_resnet(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 2,
        learning_rate: 0.1,
        ..TrainConfig::default()
    };
    let out = fit(&mut model, &data, &data, &cfg, None).unwrap();
    let (first, last) = (out.log[0].train_loss, out.log.last().unwrap().train_loss);
    assert!(last < first / 2.0, "{first} -> {last}");
}

#[test]
fn divergence_is_reported() {
    let data = samples(2, 64, 50);
    let mut model = Model::<f32>::build(&ModelConfig::tiny_fcn_baseline(), 0).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 2,
        learning_rate: 1e30,
        ..TrainConfig::default()
    };
    let err = fit(&mut model, &data, &data, &cfg, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
}

#[test]
fn invalid_training_setups() {
    let data = samples(1, 64, 60);
    let mut model = Model::<f32>::build(&ModelConfig::tiny_fcn_baseline(), 0).unwrap();
    let bad = [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(fit(&mut model, &data, &data, &cfg, None), Err(Error::Config(_))));
    }
    assert!(matches!(fit(&mut model, &[], &data, &TrainConfig::default(), None), Err(Error::Usage(_))));

    let tile = synth_scene(1, 32, 32, 6, 1.0).unwrap();
    let unlabeled = mpresnet::data::PolSarTile::new("x", 4, 32, 32, tile.data().to_vec()).unwrap();
    assert!(Sample::from_tile(&unlabeled, 0.99).is_err());
}

#[test]
fn ablation_table_reports_signed_deltas() {
    let data = samples(6, 64, 70);
    let folds = kfold_split(6, 2, SplitRatio { train: 2, val: 1 }, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let report = run_ablation(
        &data,
        &folds,
        &ModelConfig::tiny_mp_resnet(),
        &ModelConfig::tiny_fcn_baseline(),
        &cfg,
        None,
    )
    .unwrap();
    assert_eq!(report.rows.len(), 2);
    let table = report.to_table();
    assert_eq!(table.lines().filter(|l| l.contains("improvement")).count(), 3);
    let (_, _, fw) = report.mean_delta();
    let mean = report.rows.iter().map(|r| r.mp.fwiou - r.fcn.fwiou).sum::<f64>() / 2.0;
    assert_eq!(fw, mean);
    let last = table.lines().last().unwrap();
    assert!(last.contains(&format!("{:+.2}", 100.0 * mean)), "{last}");

    let swapped = run_ablation(&data, &folds, &ModelConfig::tiny_fcn_baseline(), &ModelConfig::tiny_mp_resnet(), &cfg, None);
    assert!(matches!(swapped, Err(Error::Config(_))));
}
