use std::path::Path;

use mpresnet::analysis::{calibrate_mac_factor, cost_report, receptive_field, Conventions};
use mpresnet::data::{
    dataset_len, fold_seed, kfold_split, load_pair, load_tile, parse_manifest, preprocess, save_pair, synth_scene,
    write_manifest, FoldSpec, SplitRatio,
};
use mpresnet::metrics::{ConfusionMatrix, MetricsReport};
use mpresnet::models::{load_checkpoint, Model, ModelConfig, Variant};
use mpresnet::tensor::{Element, Precision};
use mpresnet::train::{evaluate, fit, run_ablation, ExperimentConfig, Sample};
use mpresnet::{Error, Result};
use serde_json::json;

use crate::outputs::Outputs;
use crate::palette::{encode_ppm, palette};
use crate::Format;

fn write(out: &mut Outputs, path: &Path, bytes: &[u8]) -> Result<()> {
    out.file(path);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_experiment(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_toml(&read_to_string(p)?),
        None => Ok(ExperimentConfig {
            model: ModelConfig::tiny_mp_resnet(),
            ..ExperimentConfig::default()
        }),
    }
}

fn load_samples(data: &Path, ids: &[usize], clip_quantile: f64) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|&i| Sample::from_tile(&load_pair(data, i)?, clip_quantile))
        .collect()
}

/// `0,3,10-19` → `[0, 3, 10, …, 19]`.
pub fn parse_ids(list: &str) -> Result<Vec<usize>> {
    let bad = |part: &str| Error::Usage(format!("invalid id {part:?} in {list:?}"));
    let mut ids = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad(part))?;
                let b: usize = b.trim().parse().map_err(|_| bad(part))?;
                if b < a {
                    return Err(bad(part));
                }
                ids.extend(a..=b);
            }
            None => ids.push(part.parse().map_err(|_| bad(part))?),
        }
    }
    if ids.is_empty() {
        return Err(Error::Usage("empty id list".into()));
    }
    Ok(ids)
}

fn parse_input(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Usage(format!("invalid input shape {s:?}, expected CxHxW")))?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(Error::Usage(format!("invalid input shape {s:?}, expected CxHxW"))),
    }
}

pub fn synth(out: &mut Outputs, seed: u64, count: usize, size: usize, looks: f64, classes: usize, dir: &Path) -> Result<()> {
    if count == 0 {
        return Err(Error::Usage("count must be at least 1".into()));
    }
    // Validate before touching the filesystem.
    synth_scene(seed, size, size, classes, looks)?;
    out.dir(dir)?;
    for i in 0..count {
        let tile = synth_scene(fold_seed(seed, i), size, size, classes, looks)?;
        out.file(&mpresnet::data::tile_path(dir, i));
        out.file(&mpresnet::data::label_path(dir, i));
        save_pair(dir, i, &tile)?;
    }
    println!("wrote {count} tiles of {size}x{size} to {}", dir.display());
    Ok(())
}

pub fn split(out: &mut Outputs, items: usize, folds: usize, ratio: SplitRatio, seed: u64, path: &Path) -> Result<()> {
    let specs = kfold_split(items, folds, ratio, seed)?;
    write(out, path, write_manifest(&specs, items).as_bytes())?;
    let f = &specs[0];
    println!(
        "wrote {folds} folds of {} train / {} val to {}",
        f.train.len(),
        f.val.len(),
        path.display()
    );
    Ok(())
}

fn fold_for(data: &Path, fold: usize, folds: Option<&Path>, seed: u64) -> Result<FoldSpec> {
    let n = dataset_len(data);
    if n == 0 {
        return Err(Error::Usage(format!("no tiles found in {}", data.display())));
    }
    let specs = match folds {
        Some(p) => parse_manifest(&read_to_string(p)?)?,
        None => kfold_split(n, fold + 1, SplitRatio::default(), seed)?,
    };
    let spec = specs
        .into_iter()
        .find(|f| f.fold == fold)
        .ok_or_else(|| Error::Usage(format!("fold {fold} not in manifest")))?;
    if let Some(&bad) = spec.train.iter().chain(&spec.val).find(|&&i| i >= n) {
        return Err(Error::Usage(format!("fold {fold} references item {bad} but the dataset has {n}")));
    }
    Ok(spec)
}

fn train_typed<T: Element>(cfg: &ExperimentConfig, train: &[Sample], val: &[Sample], dir: &Path) -> Result<()> {
    let mut model = Model::<T>::build(&cfg.model, cfg.train.seed)?;
    let outcome = fit(&mut model, train, val, &cfg.train, Some(dir))?;
    let best = outcome.best_record();
    println!(
        "best epoch {} of {}: oa={:.6} mean_f1={:.6} fwiou={:.6}",
        outcome.best_epoch,
        outcome.log.len(),
        best.val_oa,
        best.val_mean_f1,
        best.val_fwiou
    );
    Ok(())
}

pub fn train(out: &mut Outputs, config: Option<&Path>, fold: usize, data: &Path, folds: Option<&Path>, dir: &Path) -> Result<()> {
    let cfg = load_experiment(config)?;
    if cfg.train.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let spec = fold_for(data, fold, folds, cfg.train.seed)?;
    let train = load_samples(data, &spec.train, cfg.train.clip_quantile)?;
    let val = load_samples(data, &spec.val, cfg.train.clip_quantile)?;
    if out.dir(dir)? {
        for name in ["log.jsonl", "best.ckpt", "last.ckpt", "config.toml"] {
            out.file(&dir.join(name));
        }
        if cfg.train.checkpoint_every > 0 {
            for e in (cfg.train.checkpoint_every..=cfg.train.epochs).step_by(cfg.train.checkpoint_every) {
                out.file(&dir.join(format!("epoch_{e:04}.ckpt")));
            }
        }
    }
    write(out, &dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    match cfg.train.precision {
        Precision::F32 => train_typed::<f32>(&cfg, &train, &val, dir),
        Precision::F64 => train_typed::<f64>(&cfg, &train, &val, dir),
    }
}

pub fn eval(
    out: &mut Outputs,
    checkpoint: &Path,
    data: &Path,
    ids: Option<&str>,
    report: Option<&Path>,
    clip_quantile: f64,
) -> Result<()> {
    let mut model = load_checkpoint::<f32>(checkpoint)?;
    let ids = match ids {
        Some(list) => parse_ids(list)?,
        None => (0..dataset_len(data)).collect(),
    };
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for &i in &ids {
        let sample = Sample::from_tile(&load_pair(data, i)?, clip_quantile)?;
        cm.merge(&evaluate(&mut model, std::slice::from_ref(&sample))?)?;
    }
    let metrics = MetricsReport::from_confusion(&cm)?;
    if let Some(path) = report {
        write(out, path, metrics.to_json().as_bytes())?;
    }
    println!(
        "items={} oa={:.6} mean_f1={:.6} fwiou={:.6}",
        ids.len(),
        metrics.oa,
        metrics.mean_f1,
        metrics.fwiou
    );
    Ok(())
}

pub fn predict(out: &mut Outputs, checkpoint: &Path, tile: &Path, path: &Path, clip_quantile: f64) -> Result<()> {
    let mut model = load_checkpoint::<f32>(checkpoint)?;
    let tile = load_tile(tile)?;
    if tile.channels() != model.config().num_input_channels {
        return Err(Error::shape(
            "predict",
            "input channels",
            model.config().num_input_channels,
            tile.channels(),
        ));
    }
    let image = preprocess(&tile, clip_quantile);
    let map = mpresnet::train::predict_map(&mut model, &image)?;
    write(out, path, &encode_ppm(&map, &palette(model.config().num_classes)))?;
    println!("wrote {}x{} map to {}", map.width(), map.height(), path.display());
    Ok(())
}

pub fn analyze(
    out: &mut Outputs,
    arch: Variant,
    config: Option<&Path>,
    input: &str,
    mac_factor: Option<u8>,
    format: Format,
    report: Option<&Path>,
) -> Result<()> {
    let model = match config {
        Some(p) => ModelConfig::from_toml(&read_to_string(p)?)?,
        None => ModelConfig::for_variant(arch),
    };
    let [c, h, w] = parse_input(input)?;
    if c != model.num_input_channels {
        return Err(Error::shape("analyze", "input channels", model.num_input_channels, c));
    }
    let base = Conventions::default();
    let factor = match mac_factor {
        Some(f) => f,
        None => calibrate_mac_factor(&ModelConfig::fcn_baseline(), &base)?,
    };
    let conventions = base.with_mac_factor(factor);
    conventions.validate()?;
    let cost = cost_report(&model, [1, c, h, w], &conventions)?;
    let rf = receptive_field(&model)?;
    let text = match format {
        Format::Text => format!("{}\n{}", cost.to_text(), rf.to_text()),
        Format::Json => {
            let doc = json!({ "cost": cost, "receptive_field": rf });
            serde_json::to_string_pretty(&doc).expect("report serialises") + "\n"
        }
    };
    match report {
        Some(path) => {
            write(out, path, text.as_bytes())?;
            println!(
                "arch={} params={:.2}M flops={:.2}G mac_factor={}",
                model.variant,
                cost.params_millions(),
                cost.gflops(),
                factor
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn ablate(out: &mut Outputs, data: &Path, folds: &Path, config: Option<&Path>, dir: &Path) -> Result<()> {
    let cfg = load_experiment(config)?;
    let specs = parse_manifest(&read_to_string(folds)?)?;
    let n = dataset_len(data);
    if n == 0 {
        return Err(Error::Usage(format!("no tiles found in {}", data.display())));
    }
    let samples = load_samples(data, &(0..n).collect::<Vec<_>>(), cfg.train.clip_quantile)?;
    let mp = ModelConfig {
        variant: Variant::MpResnet,
        ..cfg.model.clone()
    };
    let fcn = ModelConfig {
        variant: Variant::FcnBaseline,
        ..cfg.model.clone()
    };
    if out.dir(dir)? {
        for f in &specs {
            for v in [Variant::FcnBaseline, Variant::MpResnet] {
                out.dir(&dir.join(format!("fold{}_{v}", f.fold)))?;
            }
        }
        out.file(&dir.join("table.txt"));
        out.file(&dir.join("ablation.json"));
    }
    let report = run_ablation(&samples, &specs, &mp, &fcn, &cfg.train, Some(dir))?;
    let table = report.to_table();
    write(out, &dir.join("table.txt"), table.as_bytes())?;
    let doc = serde_json::to_string_pretty(&report).expect("report serialises");
    write(out, &dir.join("ablation.json"), doc.as_bytes())?;
    print!("{table}");
    Ok(())
}
