//! Training harness: SGD with momentum, the epoch loop with validation and
//! best-checkpoint retention, finite-difference gradient checks, map
//! prediction and the fold-by-fold architecture comparison.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockParams, SPATIAL_MULTIPLE};
use crate::data::{fold_seed, preprocess, synth_scene, FoldSpec, LabelMap, PolSarTile};
use crate::error::{Error, Result};
use crate::exec::{GraphExec, Mode};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::models::{forward, save_checkpoint, Model, ModelConfig, Ratio, Variant};
use crate::tensor::kernels::IGNORE_LABEL;
use crate::tensor::{Element, Precision, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Write `epoch_NNNN.ckpt` every this many epochs; 0 keeps only `best.ckpt`.
    pub checkpoint_every: usize,
    pub clip_quantile: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 0,
            clip_quantile: crate::data::DEFAULT_CLIP_QUANTILE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "momentum {} must be in [0, 1) and weight_decay {} non-negative",
                self.momentum, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Model and training keys in one flat document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(doc: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(doc).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// One SGD update, PyTorch convention:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
pub fn sgd_update<T: Element>(w: &mut [T], g: &[T], v: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + g + wd * *w;
        *w -= lr * *v;
    }
}

/// Stochastic gradient descent with momentum and weight decay on every
/// trainable parameter.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    }

    pub fn step(&mut self, params: &mut BlockParams<T>, grads: &HashMap<String, Tensor<T>>) {
        if self.learning_rate == 0.0 {
            return;
        }
        for p in params.iter_mut().filter(|p| p.kind.is_trainable()) {
            let Some(g) = grads.get(&p.name) else { continue };
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); g.numel()]);
            sgd_update(p.value.data_mut(), g.data(), v, self.learning_rate, self.momentum, self.weight_decay);
        }
    }
}

/// Preprocessed image and its labels.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `C × H × W`, values in [0, 1].
    pub image: Tensor<f32>,
    pub label: LabelMap,
}

impl Sample {
    pub fn from_tile(tile: &PolSarTile, clip_quantile: f64) -> Result<Self> {
        let label = tile
            .label
            .clone()
            .ok_or_else(|| Error::Usage(format!("tile {} has no label", tile.id)))?;
        Ok(Self {
            image: preprocess(tile, clip_quantile),
            label,
        })
    }

    fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[0], s[1], s[2]]
    }
}

/// Stack samples into an `N × C × H × W` batch and its flat labels.
pub fn stack<T: Element>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?.dims();
    let mut data = Vec::with_capacity(samples.len() * first.iter().product::<usize>());
    let mut labels = Vec::new();
    for s in samples {
        if s.dims() != first {
            return Err(Error::shape("stack", "sample extents", format!("{first:?}"), format!("{:?}", s.dims())));
        }
        data.extend(s.image.data().iter().map(|&v| T::lit(v as f64)));
        labels.extend_from_slice(s.label.data());
    }
    let [c, h, w] = first;
    Ok((Tensor::new(&[samples.len(), c, h, w], data)?, labels))
}

/// Mean cross-entropy of a train-mode forward pass and the gradient of every
/// trainable parameter. BN running statistics are updated as a side effect.
pub fn loss_and_grads<T: Element>(
    model: &mut Model<T>,
    batch: &Tensor<T>,
    labels: &[u8],
) -> Result<(f64, HashMap<String, Tensor<T>>)> {
    let cfg = model.config().clone();
    let mut e = GraphExec::new(model.params_mut(), Mode::Train, true);
    let x = e.graph.leaf(batch.clone(), false);
    let out = forward(&mut e, &cfg, &x)?;
    let (mut graph, leaves) = e.into_parts();
    let loss = graph.cross_entropy(out.logits, labels, IGNORE_LABEL)?;
    let value = graph.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
    let mut grads = graph.backward(loss)?;
    let named = leaves
        .into_iter()
        .filter_map(|(name, v)| grads.take(v).map(|g| (name, g)))
        .collect();
    Ok((value, named))
}

/// Mean cross-entropy of a train-mode forward pass, without gradients.
/// Running statistics in `params` are left untouched.
pub fn batch_loss<T: Element>(cfg: &ModelConfig, params: &BlockParams<T>, batch: &Tensor<T>, labels: &[u8]) -> Result<f64> {
    let mut scratch = params.clone();
    let mut e = GraphExec::new(&mut scratch, Mode::Train, false);
    let x = e.graph.leaf(batch.clone(), false);
    let out = forward(&mut e, cfg, &x)?;
    let (mut graph, _) = e.into_parts();
    let loss = graph.cross_entropy(out.logits, labels, IGNORE_LABEL)?;
    Ok(graph.value(loss).data()[0].to_f64().unwrap_or(f64::NAN))
}

/// Per-pixel cross-entropy of a train-mode forward pass; ignored pixels are
/// dropped.
fn pixel_losses(cfg: &ModelConfig, params: &BlockParams<f64>, batch: &Tensor<f64>, labels: &[u8]) -> Result<Vec<f64>> {
    let mut scratch = params.clone();
    let mut e = GraphExec::new(&mut scratch, Mode::Train, false);
    let x = e.graph.leaf(batch.clone(), false);
    let out = forward(&mut e, cfg, &x)?;
    let logits = e.graph.value(out.logits);
    let [n, k, h, w] = logits.dims4("pixel_losses")?;
    let hw = h * w;
    let d = logits.data();
    let mut losses = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let label = labels[b * hw + p];
            if label == IGNORE_LABEL {
                continue;
            }
            let at = |c: usize| d[(b * k + c) * hw + p];
            let max = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|c| (at(c) - max).exp()).sum::<f64>().ln();
            losses.push(lse - at(label as usize));
        }
    }
    Ok(losses)
}

/// Per-pixel argmax over channels of `N × K × H × W` logits; ties go to
/// the lower class id.
pub fn argmax_labels<T: Element>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, k, h, w] = logits.dims4("argmax")?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = (d[b * k * hw + p], 0usize);
            for c in 1..k {
                let v = d[(b * k + c) * hw + p];
                if v > best.0 {
                    best = (v, c);
                }
            }
            out.push(best.1 as u8);
        }
    }
    Ok(out)
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Reflection-pad a `C × H × W` image up to the next multiple of 32.
pub fn reflect_pad(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("reflect_pad", "rank", 3, s.len()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (h.next_multiple_of(SPATIAL_MULTIPLE), w.next_multiple_of(SPATIAL_MULTIPLE));
    let src = image.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for y in 0..ph {
            let sy = reflect(y as isize, h);
            for x in 0..pw {
                out.push(src[(ch * h + sy) * w + reflect(x as isize, w)]);
            }
        }
    }
    Tensor::new(&[c, ph, pw], out)
}

/// Label map for one preprocessed `C × H × W` image. Extents that are not
/// multiples of 32 are reflection-padded and the prediction cropped back.
pub fn predict_map<T: Element>(model: &mut Model<T>, image: &Tensor<f32>) -> Result<LabelMap> {
    let s = image.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("predict_map", "rank", 3, s.len()));
    }
    let (h, w) = (s[1], s[2]);
    let padded = reflect_pad(image)?;
    let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
    let batch = padded.cast::<T>().reshape(&[1, s[0], ph, pw])?;
    let previous = model.mode();
    model.set_mode(Mode::Eval);
    let logits = model.forward_segment(&batch);
    model.set_mode(previous);
    let labels = argmax_labels(&logits?)?;
    let cropped = (0..h).flat_map(|y| labels[y * pw..y * pw + w].iter().copied()).collect();
    LabelMap::new(h, w, cropped)
}

/// Confusion matrix of eval-mode predictions over `samples`.
pub fn evaluate<T: Element>(model: &mut Model<T>, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for s in samples {
        let pred = predict_map(model, &s.image)?;
        cm.accumulate(pred.data(), s.label.data(), [1, s.label.height(), s.label.width()], IGNORE_LABEL)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_oa: f64,
    pub val_mean_f1: f64,
    pub val_fwiou: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome<T: Element> {
    pub log: Vec<EpochRecord>,
    /// Epoch (1-based) with the highest validation fwIoU; earliest wins ties.
    pub best_epoch: usize,
    pub best_model: Model<T>,
    pub best_report: MetricsReport,
}

impl<T: Element> FitOutcome<T> {
    pub fn best_record(&self) -> &EpochRecord {
        &self.log[self.best_epoch - 1]
    }
}

/// Train `model` with SGD on `train`, validating after every epoch.
///
/// With `out_dir`, each epoch appends a JSON line to `log.jsonl`, the best
/// model so far is kept in `best.ckpt`, `epoch_NNNN.ckpt` is written at the
/// configured cadence and the final model goes to `last.ckpt`. Fails with
/// [`Error::NonFinite`] as soon as a batch loss is not finite.
pub fn fit<T: Element>(
    model: &mut Model<T>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage("fit needs at least one training and one validation sample".into()));
    }
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("log.jsonl");
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut opt = Sgd::<T>::from_config(cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model<T>, MetricsReport)> = None;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        model.set_mode(Mode::Train);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(fold_seed(cfg.seed, epoch)));
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (batch, labels) = stack::<T>(&samples)?;
            let (loss, grads) = loss_and_grads(model, &batch, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss {loss} at epoch {epoch}, batch {b}")));
            }
            opt.step(model.params_mut(), &grads);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }

        let cm = evaluate(model, val)?;
        let report = MetricsReport::from_confusion(&cm)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_oa: report.oa,
            val_mean_f1: report.mean_f1,
            val_fwiou: report.fwiou,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some((file, path)) = &mut log_file {
            let line = serde_json::to_string(&record).expect("record serialises");
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        let improved = best.as_ref().is_none_or(|b| record.val_fwiou > b.1);
        if improved {
            if let Some(dir) = out_dir {
                save_checkpoint(model, &dir.join("best.ckpt"))?;
            }
            best = Some((epoch, record.val_fwiou, model.clone(), report));
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(model, &dir.join(format!("epoch_{epoch:04}.ckpt")))?;
            }
        }
        log.push(record);
    }
    model.set_mode(Mode::Eval);
    if let Some(dir) = out_dir {
        save_checkpoint(model, &dir.join("last.ckpt"))?;
    }
    let (best_epoch, _, mut best_model, best_report) =
        best.ok_or_else(|| Error::Usage("fit ran for zero epochs".into()))?;
    best_model.set_mode(Mode::Eval);
    Ok(FitOutcome {
        log,
        best_epoch,
        best_model,
        best_report,
    })
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub batch: usize,
    pub size: usize,
    /// Scalars to probe; every trainable tensor gets at least one.
    pub probes: usize,
    pub seed: u64,
    /// Relative step: `ε = epsilon · max(1, |w|)`.
    pub epsilon: f64,
    /// Denominator floor of the relative error.
    pub error_floor: f64,
    pub max_params: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            batch: 2,
            size: 64,
            probes: 240,
            seed: 0,
            epsilon: 1e-6,
            error_floor: 1e-6,
            max_params: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub worst_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub probes: usize,
    pub num_params: usize,
}

/// Small configurations that fit the gradient-check parameter budget.
pub fn grad_check_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        stem_width: 4,
        stage_blocks: [1, 1, 1, 1],
        branch_widths: [8, 16, 32],
        branch_width_multiplier: Ratio::ONE,
        decoder_width: 8,
        ..ModelConfig::mp_resnet()
    }
}

/// Synthetic scenes as the fixed batch. Their spatially coherent labels keep
/// gradients well above finite-difference roundoff, unlike i.i.d. labels.
fn grad_check_batch(config: &ModelConfig, opts: &GradCheckConfig) -> Result<(Tensor<f64>, Vec<u8>)> {
    let c = config.num_input_channels;
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for b in 0..opts.batch {
        let tile = synth_scene(opts.seed.wrapping_add(b as u64), opts.size, opts.size, config.num_classes, 4.0)?;
        let image = preprocess(&tile, crate::data::DEFAULT_CLIP_QUANTILE);
        let plane = opts.size * opts.size;
        let source = image.shape()[0];
        for ch in 0..c {
            let src = (ch % source) * plane;
            data.extend(image.data()[src..src + plane].iter().map(|&v| v as f64));
        }
        labels.extend_from_slice(tile.label.as_ref().expect("synthetic tiles are labelled").data());
    }
    Ok((Tensor::new(&[opts.batch, c, opts.size, opts.size], data)?, labels))
}

/// Compare analytic gradients of the train-mode loss on a fixed random batch
/// with central differences `(f(w+ε) − f(w−ε)) / 2ε` and return the worst
/// relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check(config: &ModelConfig, opts: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::build(config, opts.seed)?;
    let trainable: Vec<(String, usize)> = model
        .params()
        .iter()
        .filter(|p| p.kind.is_trainable())
        .map(|p| (p.name.clone(), p.value.numel()))
        .collect();
    let num_params: usize = trainable.iter().map(|t| t.1).sum();
    if num_params > opts.max_params {
        return Err(Error::Usage(format!(
            "grad_check needs at most {} parameters, model has {num_params}",
            opts.max_params
        )));
    }
    let (batch, labels) = grad_check_batch(config, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xC0FF_EE00);

    let frozen = model.params().clone();
    let (_, grads) = loss_and_grads(&mut model, &batch, &labels)?;

    let mut probes: Vec<(String, usize)> = trainable.iter().map(|(n, len)| (n.clone(), rng.gen_range(0..*len))).collect();
    while probes.len() < opts.probes {
        let (name, len) = &trainable[rng.gen_range(0..trainable.len())];
        probes.push((name.clone(), rng.gen_range(0..*len)));
    }

    let mut worst = (0.0f64, String::new(), 0usize);
    let mut params = frozen;
    for (name, idx) in &probes {
        let analytic = grads
            .get(name)
            .map(|g| g.data()[*idx])
            .ok_or_else(|| Error::Usage(format!("no gradient for {name}")))?;
        let w0 = params.value(name)?.data()[*idx];
        let eps = opts.epsilon * w0.abs().max(1.0);
        let mut eval = |w: f64| -> Result<Vec<f64>> {
            params.get_mut(name).expect("probed parameter exists").value.data_mut()[*idx] = w;
            pixel_losses(config, &params, &batch, &labels)
        };
        let (up, down) = (eval(w0 + eps)?, eval(w0 - eps)?);
        eval(w0)?;
        // Differencing per pixel before averaging keeps the summation
        // roundoff of the mean loss out of the quotient.
        let diff: f64 = up.iter().zip(&down).map(|(u, d)| u - d).sum();
        let numeric = diff / up.len() as f64 / (2.0 * eps);
        if !numeric.is_finite() || !analytic.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}[{idx}]")));
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.error_floor);
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, name.clone(), *idx);
        }
    }
    Ok(GradCheckReport {
        worst_relative_error: worst.0,
        worst_param: worst.1,
        worst_index: worst.2,
        probes: probes.len(),
        num_params,
    })
}

/// Validation metrics of one trained architecture on one fold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldScore {
    pub oa: f64,
    pub mean_f1: f64,
    pub fwiou: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub fold: usize,
    pub fcn: FoldScore,
    pub mp: FoldScore,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean MP-ResNet − FCN difference of (OA, mean F1, fwIoU), as fractions.
    pub fn mean_delta(&self) -> (f64, f64, f64) {
        let n = self.rows.len() as f64;
        let sum = |f: fn(&FoldScore) -> f64| self.rows.iter().map(|r| f(&r.mp) - f(&r.fcn)).sum::<f64>() / n;
        (sum(|s| s.oa), sum(|s| s.mean_f1), sum(|s| s.fwiou))
    }

    /// Per-fold scores in percent with signed MP-ResNet − FCN differences.
    pub fn to_table(&self) -> String {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let signed = |v: f64| format!("{:+.2}", 100.0 * v);
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:<14} {:>8} {:>8} {:>8}", "fold", "method", "OA", "mF1", "fwIoU");
        for r in &self.rows {
            for (name, f) in [("fcn_baseline", &r.fcn), ("mp_resnet", &r.mp)] {
                let _ = writeln!(s, "{:<6} {:<14} {:>8} {:>8} {:>8}", r.fold, name, pct(f.oa), pct(f.mean_f1), pct(f.fwiou));
            }
            let _ = writeln!(
                s,
                "{:<6} {:<14} {:>8} {:>8} {:>8}",
                r.fold,
                "improvement",
                signed(r.mp.oa - r.fcn.oa),
                signed(r.mp.mean_f1 - r.fcn.mean_f1),
                signed(r.mp.fwiou - r.fcn.fwiou)
            );
        }
        let (oa, f1, fw) = self.mean_delta();
        let _ = writeln!(s, "{:<6} {:<14} {:>8} {:>8} {:>8}", "mean", "improvement", signed(oa), signed(f1), signed(fw));
        s
    }
}

/// Train both architectures on every fold with the same budget and seed;
/// scores are the best-epoch validation metrics.
pub fn run_ablation(
    samples: &[Sample],
    folds: &[FoldSpec],
    mp: &ModelConfig,
    fcn: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<AblationReport> {
    if mp.variant != Variant::MpResnet || fcn.variant != Variant::FcnBaseline {
        return Err(Error::Config("ablation needs one mp_resnet and one fcn_baseline config".into()));
    }
    let mut rows = Vec::with_capacity(folds.len());
    for fold in folds {
        let pick = |ids: &[usize]| -> Result<Vec<Sample>> {
            ids.iter()
                .map(|&i| {
                    samples
                        .get(i)
                        .cloned()
                        .ok_or_else(|| Error::Usage(format!("fold {} references missing item {i}", fold.fold)))
                })
                .collect()
        };
        let (train, val) = (pick(&fold.train)?, pick(&fold.val)?);
        let run_cfg = TrainConfig {
            seed: fold.seed,
            ..cfg.clone()
        };
        let score = |model_cfg: &ModelConfig| -> Result<FoldScore> {
            let dir = out_dir.map(|d| d.join(format!("fold{}_{}", fold.fold, model_cfg.variant)));
            let outcome = match run_cfg.precision {
                Precision::F32 => {
                    let mut m = Model::<f32>::build(model_cfg, fold.seed)?;
                    let o = fit(&mut m, &train, &val, &run_cfg, dir.as_deref())?;
                    (o.best_record().clone(), o.best_epoch)
                }
                Precision::F64 => {
                    let mut m = Model::<f64>::build(model_cfg, fold.seed)?;
                    let o = fit(&mut m, &train, &val, &run_cfg, dir.as_deref())?;
                    (o.best_record().clone(), o.best_epoch)
                }
            };
            let (r, best_epoch) = outcome;
            Ok(FoldScore {
                oa: r.val_oa,
                mean_f1: r.val_mean_f1,
                fwiou: r.val_fwiou,
                best_epoch,
            })
        };
        let fcn_score = score(fcn)?;
        let mp_score = score(mp)?;
        rows.push(AblationRow {
            fold: fold.fold,
            fcn: fcn_score,
            mp: mp_score,
        });
    }
    Ok(AblationReport { rows })
}
