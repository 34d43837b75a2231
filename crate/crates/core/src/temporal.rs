//! Temporal views: frozen random-kernel features (local) and a shared
//! linear map over the whole series (global).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::autodiff::{Tape, TapeTensor};
use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const KERNEL_LENGTHS: [usize; 3] = [7, 9, 11];

#[derive(Clone, Debug, PartialEq)]
pub struct RocketKernel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub dilation: usize,
    /// Zero padding applied on each side.
    pub padding: usize,
}

impl RocketKernel {
    /// Convolution output positions for a series of length `len`.
    pub fn output_len(&self, len: usize) -> usize {
        let span = (self.weights.len() - 1) * self.dilation;
        (len + 2 * self.padding).saturating_sub(span).max(1)
    }

    /// Dilated convolution plus bias; reads outside the series are zero.
    pub fn convolve(&self, x: &[f64]) -> Vec<f64> {
        let n = self.output_len(x.len());
        (0..n)
            .map(|i| {
                let mut acc = self.bias;
                for (j, &w) in self.weights.iter().enumerate() {
                    let pos = (i + j * self.dilation) as isize - self.padding as isize;
                    if pos >= 0 && (pos as usize) < x.len() {
                        acc += w * x[pos as usize];
                    }
                }
                acc
            })
            .collect()
    }

    /// `[ppv, max]` of the convolution output; PPV counts strictly positive values.
    pub fn features(&self, x: &[f64]) -> [f64; 2] {
        ppv_max(&self.convolve(x))
    }
}

pub fn ppv_max(out: &[f64]) -> [f64; 2] {
    let pos = out.iter().filter(|&&v| v > 0.0).count();
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    [pos as f64 / out.len() as f64, max]
}

/// One shared set of frozen kernels, generated for a given series length.
#[derive(Clone, Debug, PartialEq)]
pub struct RocketKernelSet {
    pub kernels: Vec<RocketKernel>,
    pub series_length: usize,
    pub seed: u64,
}

impl RocketKernelSet {
    /// `count` kernels: length from {7, 9, 11}, mean-centred standard normal
    /// weights, bias in U(-1, 1), dilation `floor(2^u)` with
    /// `u ~ U(0, log2((L-1)/(l-1)))`, padding on with probability 1/2.
    pub fn generate(count: usize, series_length: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("temporal kernel count must be >= 1".into()));
        }
        if series_length == 0 {
            return Err(Error::Parameter("series length must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = (0..count)
            .map(|_| {
                let l = KERNEL_LENGTHS[rng.random_range(0..KERNEL_LENGTHS.len())];
                let mut weights: Vec<f64> = (0..l).map(|_| StandardNormal.sample(&mut rng)).collect();
                let mean = weights.iter().sum::<f64>() / l as f64;
                weights.iter_mut().for_each(|w| *w -= mean);
                let bias = rng.random_range(-1.0..1.0);
                let upper = ((series_length.saturating_sub(1)) as f64 / (l - 1) as f64).log2().max(0.0);
                let u = if upper > 0.0 { rng.random_range(0.0..upper) } else { 0.0 };
                let dilation = (2f64.powf(u).floor() as usize).max(1);
                let padding = if rng.random_bool(0.5) { (l - 1) * dilation / 2 } else { 0 };
                RocketKernel {
                    weights,
                    bias,
                    dilation,
                    padding,
                }
            })
            .collect();
        Ok(RocketKernelSet {
            kernels,
            series_length,
            seed,
        })
    }

    /// Feature width: two per kernel.
    pub fn width(&self) -> usize {
        2 * self.kernels.len()
    }

    /// `V_L` `[B, D, 2n]`, laid out `[ppv_1, max_1, ppv_2, max_2, ...]`.
    pub fn transform(&self, values: &Tensor) -> Result<Tensor> {
        let s = values.shape();
        if s.len() != 3 || s[2] != self.series_length {
            return Err(Error::shape("rocket_transform", s, &[0, 0, self.series_length]));
        }
        let l = s[2];
        let rows: Vec<Vec<f64>> = values
            .data()
            .par_chunks(l)
            .map(|x| self.kernels.iter().flat_map(|k| k.features(x)).collect())
            .collect();
        Tensor::new(vec![s[0], s[1], self.width()], rows.concat())
    }
}

pub const ROCKET_MAGIC: &[u8; 4] = b"ROCK";
pub const ROCKET_VERSION: u32 = 1;

/// Header `ROCK`, version, `B, D, X` as u32, then the features.
pub fn write_rocket_cache(path: &Path, features: &Tensor) -> Result<()> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("rocket cache", s, &[0, 0, 0]));
    }
    let mut w = BinWriter::new(ROCKET_MAGIC, ROCKET_VERSION);
    for &n in s {
        w.u32(n as u32);
    }
    w.f64s(features.data());
    w.save(path)
}

pub fn read_rocket_cache(path: &Path) -> Result<Tensor> {
    let mut r = BinReader::open(path, ROCKET_MAGIC, ROCKET_VERSION)?;
    let (b, d, x) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let data = r.f64s(b * d * x)?;
    r.finish()?;
    Tensor::new(vec![b, d, x], data)
}

/// Linear map `L -> X` shared by all channels.
#[derive(Clone, Debug)]
pub struct GlobalMlp {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl GlobalMlp {
    pub fn init(store: &mut ParamStore, prefix: &str, len: usize, x: usize, rng: &mut impl Rng) -> Self {
        GlobalMlp {
            weight: store.add(format!("{prefix}weight"), init::linear_weight(rng, len, x)),
            bias: store.add(format!("{prefix}bias"), init::linear_bias(rng, len, x)),
        }
    }

    /// `[D, L]` to `V_G` `[D, X]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, series: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        series.linear(tape.param(store, self.weight), Some(tape.param(store, self.bias)))
    }
}
