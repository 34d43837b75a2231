use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ts::{read_csv, read_ts, RawSeries, TsFile};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance guard for z-scoring.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    ZeroPadToMax,
    TruncateToMin,
}

impl FromStr for PadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pad" | "zero-pad-to-max" => Ok(PadMode::ZeroPadToMax),
            "truncate" | "truncate-to-min" => Ok(PadMode::TruncateToMin),
            _ => Err(Error::Config(format!("unknown pad mode `{s}` (pad, truncate)"))),
        }
    }
}

impl std::fmt::Display for PadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PadMode::ZeroPadToMax => "pad",
            PadMode::TruncateToMin => "truncate",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Normalization {
    None,
    #[default]
    ZScore,
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Normalization::None),
            "zscore" | "z-score" => Ok(Normalization::ZScore),
            _ => Err(Error::Config(format!("unknown normalization `{s}` (none, zscore)"))),
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Normalization::None => "none",
            Normalization::ZScore => "zscore",
        })
    }
}

/// Per-channel mean and standard deviation over every observed value.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Missing values are skipped; a channel with no values gets (0, 1).
    pub fn fit(records: &[RawSeries]) -> Self {
        let d = records.first().map_or(0, |r| r.channels.len());
        let mut mean = vec![0.0; d];
        let mut std = vec![1.0; d];
        for c in 0..d {
            let vals = || records.iter().flat_map(|r| r.channels[c].iter().copied()).filter(|v| !v.is_nan());
            let n = vals().count();
            if n == 0 {
                continue;
            }
            let m = vals().sum::<f64>() / n as f64;
            let var = vals().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            mean[c] = m;
            std[c] = var.sqrt();
        }
        ChannelStats { mean, std }
    }

    pub fn apply(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel].max(STD_EPS)
    }
}

/// Series of a shared shape: values `[B, D, L]` and one label each.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesBatch {
    pub values: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl SeriesBatch {
    pub fn new(values: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[0] != labels.len() {
            return Err(Error::shape("series batch", s, &[labels.len()]));
        }
        if let Some((index, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Label {
                index,
                label: format!("{l} (class count {class_count})"),
            });
        }
        if !values.all_finite() {
            return Err(Error::Contract("series batch contains non-finite values".into()));
        }
        Ok(SeriesBatch {
            values,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn length(&self) -> usize {
        self.values.shape()[2]
    }

    /// Sample `i` as `[D, L]`.
    pub fn sample(&self, i: usize) -> Tensor {
        let (d, l) = (self.channels(), self.length());
        Tensor::new(vec![d, l], self.values.data()[i * d * l..(i + 1) * d * l].to_vec()).unwrap()
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> SeriesBatch {
        let (d, l) = (self.channels(), self.length());
        let mut data = Vec::with_capacity(indices.len() * d * l);
        for &i in indices {
            data.extend_from_slice(&self.values.data()[i * d * l..(i + 1) * d * l]);
        }
        SeriesBatch {
            values: Tensor::new(vec![indices.len(), d, l], data).unwrap(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }
}

/// Normalises (if `stats` is given), then pads with zeros or truncates every
/// series to `length`. Missing values become 0 after normalisation.
pub fn align(records: &[RawSeries], length: usize, stats: Option<&ChannelStats>, class_count: usize) -> Result<SeriesBatch> {
    let d = records.first().map_or(0, |r| r.channels.len());
    let mut data = vec![0.0; records.len() * d * length];
    for (i, r) in records.iter().enumerate() {
        if r.channels.len() != d {
            return Err(Error::Record {
                index: i,
                msg: format!("{} channels, expected {d}", r.channels.len()),
            });
        }
        for (c, ch) in r.channels.iter().enumerate() {
            let base = (i * d + c) * length;
            for (t, &v) in ch.iter().take(length).enumerate() {
                let v = stats.map_or(v, |s| s.apply(c, v));
                data[base + t] = if v.is_nan() { 0.0 } else { v };
            }
        }
    }
    SeriesBatch::new(
        Tensor::new(vec![records.len(), d, length], data)?,
        records.iter().map(|r| r.label).collect(),
        class_count,
    )
}

/// Aligns `records` and cuts them into batches of `batch_size`, shuffled
/// under `seed` when given. The last partial batch is kept.
pub fn prepare_batches(
    records: &[RawSeries],
    class_count: usize,
    batch_size: usize,
    pad_mode: PadMode,
    stats: Option<&ChannelStats>,
    seed: Option<u64>,
) -> Result<Vec<SeriesBatch>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    let lengths = records.iter().map(RawSeries::len);
    let length = match pad_mode {
        PadMode::ZeroPadToMax => lengths.max(),
        PadMode::TruncateToMin => lengths.min(),
    }
    .unwrap_or(0);
    let all = align(records, length, stats, class_count)?;
    Ok(batch_indices(all.len(), batch_size, seed)
        .iter()
        .map(|idx| all.select(idx))
        .collect())
}

/// Index groups of at most `batch_size`, shuffled under `seed` when given.
pub fn batch_indices(n: usize, batch_size: usize, seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Summary row of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub train_count: usize,
    pub test_count: usize,
    pub channels: usize,
    /// Longest series over both splits.
    pub length: usize,
    pub classes: usize,
    pub variable_length: bool,
}

impl DatasetMeta {
    pub fn table_header() -> &'static str {
        "dataset      D      L   train    test    C"
    }

    pub fn table_row(&self) -> String {
        let len = if self.variable_length {
            "var".to_string()
        } else {
            self.length.to_string()
        };
        format!(
            "{:<10} {:>3} {:>6} {:>7} {:>7} {:>4}",
            self.name, self.channels, len, self.train_count, self.test_count, self.classes
        )
    }
}

/// Both splits of a classification problem.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub class_names: Vec<String>,
    pub train: Vec<RawSeries>,
    pub test: Vec<RawSeries>,
}

impl Dataset {
    /// Loads `<dir>/<name>_TRAIN.ts` and `_TEST.ts`, falling back to `.csv`.
    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let path = |split: &str, ext: &str| -> PathBuf { dir.join(format!("{name}_{split}.{ext}")) };
        let (train, test) = if path("TRAIN", "ts").exists() {
            (read_ts(&path("TRAIN", "ts"))?, read_ts(&path("TEST", "ts"))?)
        } else if path("TRAIN", "csv").exists() {
            let train = read_csv(&path("TRAIN", "csv"), None)?;
            let test = read_csv(&path("TEST", "csv"), Some(&train.class_names))?;
            (train, test)
        } else {
            return Err(Error::io(
                path("TRAIN", "ts"),
                std::io::Error::new(std::io::ErrorKind::NotFound, "no .ts or .csv training split"),
            ));
        };
        Self::from_splits(name, train, test)
    }

    pub fn from_splits(name: &str, train: TsFile, test: TsFile) -> Result<Self> {
        if train.dimensions != test.dimensions {
            return Err(Error::Record {
                index: 0,
                msg: format!("test split has {} channels, train has {}", test.dimensions, train.dimensions),
            });
        }
        if train.class_names != test.class_names {
            return Err(Error::Label {
                index: 0,
                label: format!("class lists differ: {:?} vs {:?}", train.class_names, test.class_names),
            });
        }
        let meta = DatasetMeta {
            name: name.to_string(),
            train_count: train.records.len(),
            test_count: test.records.len(),
            channels: train.dimensions,
            length: train.max_length().max(test.max_length()),
            classes: train.class_names.len(),
            variable_length: train.is_variable_length()
                || test.is_variable_length()
                || train.max_length() != test.max_length(),
        };
        Ok(Dataset {
            meta,
            class_names: train.class_names,
            train: train.records,
            test: test.records,
        })
    }

    /// Length shared by both splits under `pad_mode`.
    pub fn common_length(&self, pad_mode: PadMode) -> usize {
        let lens = self.train.iter().chain(&self.test).map(RawSeries::len);
        match pad_mode {
            PadMode::ZeroPadToMax => lens.max(),
            PadMode::TruncateToMin => lens.min(),
        }
        .unwrap_or(0)
    }

    /// Aligned train and test tensors; normalisation statistics come from
    /// the training split only.
    pub fn splits(&self, pad_mode: PadMode, norm: Normalization) -> Result<(SeriesBatch, SeriesBatch, Option<ChannelStats>)> {
        let stats = match norm {
            Normalization::ZScore => Some(ChannelStats::fit(&self.train)),
            Normalization::None => None,
        };
        let length = self.common_length(pad_mode);
        let c = self.meta.classes;
        let train = align(&self.train, length, stats.as_ref(), c)?;
        let test = align(&self.test, length, stats.as_ref(), c)?;
        Ok((train, test, stats))
    }
}
