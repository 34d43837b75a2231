//! The full classifier: spectral and temporal views, fusion, dual-axis
//! scanning, pooling and the classification head.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, TapeTensor};
use crate::dataio::SeriesBatch;
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, FusionParams, ViewSwitch};
use crate::head::{Activation, HeadParams, PoolMode};
use crate::params::ParamStore;
use crate::scanning::{DualScan, ScanScheme};
use crate::spectral::{read_scalogram_cache, scalograms, write_scalogram_cache, MorletConfig, SpectralParams};
use crate::ssm::SsmConfig;
use crate::temporal::{read_rocket_cache, write_rocket_cache, GlobalMlp, RocketKernelSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Shared feature width X.
    pub width: usize,
    pub morlet: MorletConfig,
    pub patch: usize,
    pub rocket_seed: u64,
    /// Block settings for both scan axes; `d_model` is set per axis.
    pub ssm: SsmConfig,
    pub scheme: ScanScheme,
    /// Feed `U` straight to pooling.
    pub disable_mamba: bool,
    pub fusion_mode: FusionMode,
    pub switch: ViewSwitch,
    pub lambda_init: f64,
    pub pooling: PoolMode,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            morlet: MorletConfig::default(),
            patch: 8,
            rocket_seed: 0,
            ssm: SsmConfig::new(1),
            scheme: ScanScheme::Tango,
            disable_mamba: false,
            fusion_mode: FusionMode::Additive,
            switch: ViewSwitch::Local,
            lambda_init: 1.0,
            pooling: PoolMode::Average,
            activation: Activation::Gelu,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!("model.width must be even and >= 2, got {}", self.width)));
        }
        self.morlet.validate()?;
        if self.patch == 0 || self.morlet.l1 % self.patch != 0 {
            return Err(Error::Config(format!(
                "spectral.l1 = {} is not divisible by spectral.patch = {}",
                self.morlet.l1, self.patch
            )));
        }
        self.ssm.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Frozen per-sample inputs: scalograms, random-kernel features and the
/// aligned series.
#[derive(Clone, Debug)]
pub struct Features {
    /// `[B, D, L1, L1]`
    pub maps: Tensor,
    /// `[B, D, X]`
    pub rocket: Tensor,
    pub series: SeriesBatch,
}

impl Features {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.series.labels
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Features {
        Features {
            maps: take_rows(&self.maps, indices),
            rocket: take_rows(&self.rocket, indices),
            series: self.series.select(indices),
        }
    }

    /// Writes `<stem>.cwtc` and `<stem>.rock` next to each other.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        write_scalogram_cache(&dir.join(format!("{stem}.cwtc")), &self.maps)?;
        write_rocket_cache(&dir.join(format!("{stem}.rock")), &self.rocket)
    }

    /// Reads caches written by [`Features::save`] for the same `series`.
    pub fn load(dir: &Path, stem: &str, series: SeriesBatch) -> Result<Features> {
        let maps = read_scalogram_cache(&dir.join(format!("{stem}.cwtc")))?;
        let rocket = read_rocket_cache(&dir.join(format!("{stem}.rock")))?;
        let n = series.len();
        if maps.shape()[0] != n || rocket.shape()[0] != n || maps.shape()[1] != series.channels() {
            return Err(Error::Contract(format!("cached features in {} do not match the series", dir.display())));
        }
        Ok(Features { maps, rocket, series })
    }

    fn sample(&self, t: &Tensor, i: usize) -> Tensor {
        let shape = &t.shape()[1..];
        let n: usize = shape.iter().product();
        Tensor::new(shape, t.data()[i * n..(i + 1) * n].to_vec()).unwrap()
    }
}

fn take_rows(t: &Tensor, indices: &[usize]) -> Tensor {
    let n: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * n);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data).unwrap()
}

#[derive(Clone, Debug)]
pub struct TscMamba {
    pub cfg: ModelConfig,
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
    pub kernels: RocketKernelSet,
    pub spectral: SpectralParams,
    pub global: Option<GlobalMlp>,
    pub fusion: FusionParams,
    pub scans: Option<DualScan>,
    pub head: HeadParams,
}

impl TscMamba {
    /// Registers all parameters in a fixed order, drawing from `seed`.
    pub fn init(cfg: ModelConfig, channels: usize, length: usize, classes: usize, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if channels == 0 || length == 0 || classes == 0 {
            return Err(Error::Config(format!(
                "need channels, length and classes >= 1, got {channels}, {length}, {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x = cfg.width;
        let kernels = RocketKernelSet::generate(x / 2, length, cfg.rocket_seed)?;
        let spectral = SpectralParams::init(&mut store, "spectral.", cfg.morlet.l1, cfg.patch, x, &mut rng)?;
        let global = cfg
            .switch
            .uses_global()
            .then(|| GlobalMlp::init(&mut store, "temporal.global.", length, x, &mut rng));
        let fusion = FusionParams::init(&mut store, "fusion.", x, cfg.fusion_mode, cfg.switch, cfg.lambda_init)?;
        let scans = if cfg.disable_mamba {
            None
        } else {
            Some(DualScan::init(&mut store, channels, x, &cfg.ssm, cfg.scheme, &mut rng)?)
        };
        let head = HeadParams::init(&mut store, "head.", 3 * x, classes, cfg.pooling, cfg.activation, cfg.dropout, &mut rng)?;
        Ok((
            TscMamba {
                cfg,
                channels,
                length,
                classes,
                kernels,
                spectral,
                global,
                fusion,
                scans,
                head,
            },
            store,
        ))
    }

    /// Frozen inputs for `series`, which must match the model's shape.
    pub fn features(&self, series: &SeriesBatch) -> Result<Features> {
        if series.channels() != self.channels || series.length() != self.length {
            return Err(Error::shape(
                "model features",
                &[series.channels(), series.length()],
                &[self.channels, self.length],
            ));
        }
        Ok(Features {
            maps: scalograms(&series.values, &self.cfg.morlet)?,
            rocket: self.kernels.transform(&series.values)?,
            series: series.clone(),
        })
    }

    /// `U` `[D, 3X]` for sample `i`.
    pub fn fused_views<'t>(&self, tape: &'t Tape, store: &ParamStore, feats: &Features, i: usize) -> Result<TapeTensor<'t>> {
        let w = self.spectral.forward(tape, store, tape.constant(feats.sample(&feats.maps, i)))?;
        let local = self.cfg.switch.uses_local().then(|| tape.constant(feats.sample(&feats.rocket, i)));
        let global = match &self.global {
            Some(g) => Some(g.forward(tape, store, tape.constant(feats.series.sample(i)))?),
            None => None,
        };
        let v = self.fusion.select_view(tape, store, local, global)?;
        self.fusion.views(tape, store, w, v)
    }

    /// Logits `[C]` for sample `i`; dropout only when `dropout_rng` is given.
    pub fn logits<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        feats: &Features,
        i: usize,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<TapeTensor<'t>> {
        let u = self.fused_views(tape, store, feats, i)?;
        let z = match &self.scans {
            Some(s) => s.forward(tape, store, u)?,
            None => u,
        };
        self.head.forward(tape, store, z, dropout_rng)
    }

    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        feats: &Features,
        i: usize,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<TapeTensor<'t>> {
        let logits = self.logits(tape, store, feats, i, dropout_rng)?;
        logits.reshape(&[1, self.classes])?.cross_entropy(&feats.labels()[i..=i])
    }

    /// Evaluation-mode logits `[B, C]`.
    pub fn predict_logits(&self, store: &ParamStore, feats: &Features) -> Result<Tensor> {
        let rows: Vec<Result<Vec<f64>>> = (0..feats.len())
            .into_par_iter()
            .map(|i| {
                let tape = Tape::new();
                Ok(self.logits(&tape, store, feats, i, None)?.to_tensor().into_data())
            })
            .collect();
        let mut data = Vec::with_capacity(feats.len() * self.classes);
        for r in rows {
            data.extend(r?);
        }
        Tensor::new(vec![feats.len(), self.classes], data)
    }

    pub fn predict(&self, store: &ParamStore, feats: &Features) -> Result<Vec<usize>> {
        Ok(self.predict_logits(store, feats)?.argmax_rows())
    }
}
