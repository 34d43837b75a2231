//! Training loop, evaluation, metrics and checkpoints.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{BinReader, BinWriter};
use crate::config::{Selection, TrainConfig};
use crate::dataio::{ChannelStats, Dataset, SeriesBatch};
use crate::error::{Error, Result};
use crate::model::{Features, TscMamba};
use crate::optim::{batch_gradients, cosine_lr, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Consecutive non-finite losses that abort a run.
pub const MAX_NAN_STREAK: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch loss over the epoch's applied steps.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// `None` in validation mode except at the selected epoch.
    pub test_accuracy: Option<f64>,
    pub lambda: f64,
    pub skipped_steps: usize,
    pub elapsed: Duration,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_acc,val_acc,test_acc,lambda,skipped,seconds";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{:e},{:.9},{:.6},{},{},{:.9},{},{:.3}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_accuracy,
            opt(self.val_accuracy),
            opt(self.test_accuracy),
            self.lambda,
            self.skipped_steps,
            self.elapsed.as_secs_f64()
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochMetrics>,
    pub selection: Selection,
    /// Index into `epochs` of the reported epoch.
    pub best_epoch: usize,
    pub test_accuracy: f64,
    /// Loss of the very first minibatch, before any update.
    pub first_loss: f64,
}

impl RunRecord {
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{}\n", EpochMetrics::CSV_HEADER);
        for e in &self.epochs {
            s.push_str(&e.csv_row());
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

pub fn score(predictions: &[usize], labels: &[usize], classes: usize) -> Evaluation {
    let mut confusion = vec![vec![0; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Evaluation {
        accuracy: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
        confusion,
        predictions: predictions.to_vec(),
    }
}

/// Dropout off, deterministic.
pub fn evaluate(model: &TscMamba, store: &ParamStore, feats: &Features) -> Result<Evaluation> {
    let preds = model.predict(store, feats)?;
    Ok(score(&preds, feats.labels(), model.classes))
}

/// Splits off `fraction` of `n` indices as a seeded validation set.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_da7e));
    let k = ((n as f64 * fraction).round() as usize).clamp(1.min(n), n.saturating_sub(1));
    let (val, train) = order.split_at(k);
    let (mut train, mut val) = (train.to_vec(), val.to_vec());
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trains `store` in place and returns the record with the parameters of
/// the reported epoch. `on_epoch` sees every epoch as it finishes.
pub fn train(
    cfg: &TrainConfig,
    model: &TscMamba,
    store: &mut ParamStore,
    train_feats: &Features,
    test_feats: &Features,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(RunRecord, ParamStore)> {
    cfg.validate()?;
    let (fit, val) = match cfg.selection {
        Selection::Validation => {
            let (t, v) = validation_split(train_feats.len(), cfg.val_fraction, cfg.seed);
            (train_feats.select(&t), Some(train_feats.select(&v)))
        }
        _ => (train_feats.clone(), None),
    };
    if fit.is_empty() {
        return Err(Error::Contract("no training samples".into()));
    }
    let mut adam = AdamState::new(
        store,
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let start = Instant::now();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut first_loss = None;
    let mut nan_streak = 0;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr_init, cfg.lr_min, epoch, cfg.epochs);
        let order_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64);
        let (mut loss_sum, mut applied, mut skipped) = (0.0, 0usize, 0usize);
        for batch in crate::dataio::batch_indices(fit.len(), cfg.batch_size, Some(order_seed)) {
            let items: Vec<(usize, u64)> = batch
                .iter()
                .map(|&i| (i, dropout_seed(cfg.seed, step, i)))
                .collect();
            let (loss, mut grads) = batch_gradients(store, &items, |tape, store, &(i, s)| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                model.loss(tape, store, &fit, i, Some(&mut rng))
            })?;
            first_loss.get_or_insert(loss);
            step += 1;
            if !loss.is_finite() {
                nan_streak += 1;
                skipped += 1;
                if nan_streak >= MAX_NAN_STREAK {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        msg: format!("{nan_streak} consecutive non-finite losses at lr {lr:e}"),
                    });
                }
                continue;
            }
            nan_streak = 0;
            if !grads.all_finite() {
                skipped += 1;
                continue;
            }
            if cfg.clip_norm > 0.0 {
                grads.clip_global_norm(cfg.clip_norm);
            }
            adam.step(store, &grads, lr);
            model.fusion.clamp_lambda(store);
            loss_sum += loss;
            applied += 1;
        }
        let train_accuracy = evaluate(model, store, &fit)?.accuracy;
        let val_accuracy = match &val {
            Some(v) => Some(evaluate(model, store, v)?.accuracy),
            None => None,
        };
        let test_accuracy = match cfg.selection {
            Selection::Validation => None,
            _ => Some(evaluate(model, store, test_feats)?.accuracy),
        };
        let key = match cfg.selection {
            Selection::Test => test_accuracy.unwrap(),
            Selection::Validation => val_accuracy.unwrap(),
            Selection::Last => epoch as f64,
        };
        if best.as_ref().is_none_or(|(b, _, _)| key > *b) {
            best = Some((key, epoch, store.clone()));
        }
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: if applied > 0 { loss_sum / applied as f64 } else { f64::NAN },
            train_accuracy,
            val_accuracy,
            test_accuracy,
            lambda: model.fusion.lambda_value(store),
            skipped_steps: skipped,
            elapsed: start.elapsed(),
        };
        on_epoch(&m);
        epochs.push(m);
    }
    let (_, best_epoch, best_store) = best.expect("at least one epoch");
    let test_accuracy = match epochs[best_epoch].test_accuracy {
        Some(a) => a,
        None => {
            let a = evaluate(model, &best_store, test_feats)?.accuracy;
            epochs[best_epoch].test_accuracy = Some(a);
            a
        }
    };
    Ok((
        RunRecord {
            epochs,
            selection: cfg.selection,
            best_epoch,
            test_accuracy,
            first_loss: first_loss.unwrap_or(f64::NAN),
        },
        best_store,
    ))
}

fn dropout_seed(seed: u64, step: usize, sample: usize) -> u64 {
    seed ^ ((step as u64) << 20 | sample as u64).wrapping_mul(0xd134_2543_de82_ef95)
}

/// Aligned, normalised splits of the configured dataset.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub dataset: Dataset,
    pub train: SeriesBatch,
    pub test: SeriesBatch,
    pub stats: Option<ChannelStats>,
}

pub fn load_data(cfg: &TrainConfig) -> Result<PreparedData> {
    let dataset = Dataset::load(&cfg.data_dir.join(&cfg.dataset), &cfg.dataset)?;
    let (train, test, stats) = dataset.splits(cfg.pad_mode, cfg.normalization)?;
    Ok(PreparedData {
        dataset,
        train,
        test,
        stats,
    })
}

/// Features for `series`, reusing `<dir>/<stem>.{cwtc,rock}` when present
/// and writing them otherwise.
pub fn cached_features(model: &TscMamba, series: &SeriesBatch, dir: Option<&Path>, stem: &str) -> Result<Features> {
    if let Some(dir) = dir {
        if dir.join(format!("{stem}.cwtc")).exists() {
            if let Ok(f) = Features::load(dir, stem, series.clone()) {
                return Ok(f);
            }
        }
    }
    let f = model.features(series)?;
    if let Some(dir) = dir {
        f.save(dir, stem)?;
    }
    Ok(f)
}

/// Cache file stem that changes whenever the frozen features would.
pub fn cache_stem(cfg: &TrainConfig, split: &str) -> String {
    let m = &cfg.model;
    format!(
        "{}_{split}_{}_{}_x{}_l{}_s{}_r{}",
        cfg.dataset, cfg.pad_mode, cfg.normalization, m.width, m.morlet.l1, m.morlet.num_scales, m.rocket_seed
    )
}

/// Everything a finished run leaves behind.
pub struct RunOutput {
    pub record: RunRecord,
    pub model: TscMamba,
    pub store: ParamStore,
    pub class_names: Vec<String>,
    pub stats: Option<ChannelStats>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Loads data, builds the model, trains, then writes `metrics.csv` and
/// `model.ckpt` under `cfg.out_dir`.
pub fn run(cfg: &TrainConfig, on_epoch: impl FnMut(&EpochMetrics)) -> Result<RunOutput> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let (model, mut store) = TscMamba::init(
        cfg.model.clone(),
        data.train.channels(),
        data.train.length(),
        data.dataset.meta.classes,
        cfg.seed,
    )?;
    let cache = cfg.out_dir.join("cache");
    let train_feats = cached_features(&model, &data.train, Some(&cache), &cache_stem(cfg, "train"))?;
    let test_feats = cached_features(&model, &data.test, Some(&cache), &cache_stem(cfg, "test"))?;
    let (record, best) = train(cfg, &model, &mut store, &train_feats, &test_feats, on_epoch)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, record.metrics_csv()).map_err(|e| Error::io(&metrics_path, e))?;
    let checkpoint_path = cfg.out_dir.join("model.ckpt");
    let ckpt = Checkpoint {
        config: cfg.clone(),
        channels: model.channels,
        length: model.length,
        class_names: data.dataset.class_names.clone(),
        stats: data.stats.clone(),
    };
    ckpt.save(&checkpoint_path, &best)?;
    Ok(RunOutput {
        record,
        model,
        store: best,
        class_names: data.dataset.class_names,
        stats: data.stats,
        metrics_path,
        checkpoint_path,
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything besides the parameters needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub channels: usize,
    pub length: usize,
    pub class_names: Vec<String>,
    pub stats: Option<ChannelStats>,
}

impl Checkpoint {
    /// Header, config text, shapes, class names, normalisation statistics,
    /// then `name, rank, dims, values` for every parameter.
    pub fn save(&self, path: &Path, store: &ParamStore) -> Result<()> {
        let mut w = BinWriter::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.str(&self.config.to_text());
        w.u64(self.channels as u64);
        w.u64(self.length as u64);
        w.u32(self.class_names.len() as u32);
        for c in &self.class_names {
            w.str(c);
        }
        match &self.stats {
            Some(s) => {
                w.u32(1);
                w.u32(s.mean.len() as u32);
                w.f64s(&s.mean);
                w.f64s(&s.std);
            }
            None => w.u32(0),
        }
        w.u32(store.len() as u32);
        for (_, p) in store.iter() {
            w.str(&p.name);
            w.u32(p.value.ndim() as u32);
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            w.f64s(p.value.data());
        }
        w.save(path)
    }

    /// Rebuilds the model and fills every parameter by name.
    pub fn load(path: &Path) -> Result<(Checkpoint, TscMamba, ParamStore)> {
        let bad = |e: Error| match e {
            Error::Cache { path, msg } => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        };
        let mut r = BinReader::open(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION).map_err(bad)?;
        let mut config = TrainConfig::default();
        config
            .apply_text(&r.str().map_err(bad)?)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let channels = r.u64().map_err(bad)? as usize;
        let length = r.u64().map_err(bad)? as usize;
        let n_classes = r.u32().map_err(bad)? as usize;
        let class_names = (0..n_classes).map(|_| r.str()).collect::<Result<Vec<_>>>().map_err(bad)?;
        let stats = match r.u32().map_err(bad)? {
            0 => None,
            _ => {
                let d = r.u32().map_err(bad)? as usize;
                Some(ChannelStats {
                    mean: r.f64s(d).map_err(bad)?,
                    std: r.f64s(d).map_err(bad)?,
                })
            }
        };
        let (model, mut store) = TscMamba::init(config.model.clone(), channels, length, n_classes, 0)
            .map_err(|e| Error::Checkpoint(format!("cannot rebuild model: {e}")))?;
        let count = r.u32().map_err(bad)? as usize;
        if count != store.len() {
            return Err(Error::Checkpoint(format!(
                "{count} parameters stored, model has {}",
                store.len()
            )));
        }
        for _ in 0..count {
            let name = r.str().map_err(bad)?;
            let rank = r.u32().map_err(bad)? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>().map_err(bad)?;
            let data = r.f64s(shape.iter().product()).map_err(bad)?;
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if store.value(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {shape:?}, model expects {:?}",
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = Tensor::new(shape, data)?;
        }
        r.finish().map_err(bad)?;
        Ok((
            Checkpoint {
                config,
                channels,
                length,
                class_names,
                stats,
            },
            model,
            store,
        ))
    }
}
