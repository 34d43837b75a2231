//! Wavelet scalograms of every channel, resized to a square map, then patch
//! embedded and projected to the shared feature width.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{BackwardCtx, Tape, TapeTensor};
use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MorletConfig {
    pub sigma_sq: f64,
    pub freq: f64,
    /// Side of the resized scalogram.
    pub l1: usize,
    pub num_scales: usize,
    /// Explicit scales; `None` means `num_scales` geometric steps from 1 to L/4.
    pub scales: Option<Vec<f64>>,
}

impl Default for MorletConfig {
    fn default() -> Self {
        MorletConfig {
            sigma_sq: 1.0,
            freq: 5.0 / (2.0 * PI),
            l1: 64,
            num_scales: 64,
            scales: None,
        }
    }
}

impl MorletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_sq > 0.0 && self.freq > 0.0) {
            return Err(Error::Config("spectral.sigma_sq and spectral.freq must be > 0".into()));
        }
        if self.l1 < 8 {
            return Err(Error::Config(format!("spectral.l1 must be >= 8, got {}", self.l1)));
        }
        if let Some(s) = &self.scales {
            if s.is_empty() || s[0] <= 0.0 || s.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config("scales must be positive and strictly increasing".into()));
            }
        } else if self.num_scales < 2 {
            return Err(Error::Config("spectral.num_scales must be >= 2".into()));
        }
        Ok(())
    }

    /// Scales used for a series of length `len`.
    pub fn scale_grid(&self, len: usize) -> Vec<f64> {
        if let Some(s) = &self.scales {
            return s.clone();
        }
        // Short series would collapse the range to a point; keep it open.
        let hi = (len as f64 / 4.0).max(2.0);
        let n = self.num_scales;
        (0..n).map(|i| hi.powf(i as f64 / (n - 1) as f64)).collect()
    }
}

/// `pi^(-1/4) (1 - t^2/sigma^2) exp(-t^2 / (2 sigma^2)) cos(2 pi f t)`.
pub fn morlet_wavelet(t: f64, cfg: &MorletConfig) -> f64 {
    let t2 = t * t;
    PI.powf(-0.25) * (1.0 - t2 / cfg.sigma_sq) * (-t2 / (2.0 * cfg.sigma_sq)).exp() * (2.0 * PI * cfg.freq * t).cos()
}

/// Scalogram `[scales, L]`: `(1/sqrt(a)) sum_t x[t] psi((t - b)/a)`, with
/// zeros outside the series.
pub fn cwt_channel(x: &[f64], scales: &[f64], cfg: &MorletConfig) -> Result<Tensor> {
    let l = x.len();
    if l < 2 || scales.is_empty() {
        return Err(Error::Parameter(format!("cwt needs length >= 2 and scales, got {l} and {}", scales.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("cwt input contains non-finite values".into()));
    }
    let mut out = vec![0.0; scales.len() * l];
    // psi((t - b)/a) depends only on the offset t - b in (-L, L).
    let mut table = vec![0.0; 2 * l - 1];
    for (si, &a) in scales.iter().enumerate() {
        let norm = 1.0 / a.sqrt();
        for (i, v) in table.iter_mut().enumerate() {
            *v = norm * morlet_wavelet((i as f64 - (l - 1) as f64) / a, cfg);
        }
        let row = &mut out[si * l..(si + 1) * l];
        for (b, r) in row.iter_mut().enumerate() {
            // offset t - b + (L - 1) for t = 0..L
            let taps = &table[l - 1 - b..2 * l - 1 - b];
            *r = x.iter().zip(taps).map(|(xv, p)| xv * p).sum();
        }
    }
    Tensor::new(vec![scales.len(), l], out)
}

/// Bilinear resize with corner alignment: target index `i` samples source
/// coordinate `i * (src - 1) / (dst - 1)`.
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = src.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear", s, &[out_h, out_w]));
    }
    let (h, w) = (s[0], s[1]);
    let coords = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..dst)
            .map(|i| {
                let pos = if dst == 1 || src == 1 {
                    0.0
                } else {
                    i as f64 * (src - 1) as f64 / (dst - 1) as f64
                };
                let i0 = (pos.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let ys = coords(out_h, h);
    let xs = coords(out_w, w);
    let d = src.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = d[y0 * w + x0] * (1.0 - fx) + d[y0 * w + x1] * fx;
            let bot = d[y1 * w + x0] * (1.0 - fx) + d[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Resized scalograms for every channel of every sample: `[B, D, L1, L1]`.
pub fn scalograms(values: &Tensor, cfg: &MorletConfig) -> Result<Tensor> {
    cfg.validate()?;
    let s = values.shape();
    if s.len() != 3 {
        return Err(Error::shape("scalograms", s, &[0, 0, 0]));
    }
    let (b, d, l) = (s[0], s[1], s[2]);
    let scales = cfg.scale_grid(l);
    let l1 = cfg.l1;
    let maps: Vec<Result<Vec<f64>>> = (0..b * d)
        .into_par_iter()
        .map(|i| {
            let cwt = cwt_channel(&values.data()[i * l..(i + 1) * l], &scales, cfg)?;
            Ok(resize_bilinear(&cwt, l1, l1)?.into_data())
        })
        .collect();
    let mut data = Vec::with_capacity(b * d * l1 * l1);
    for m in maps {
        data.extend(m?);
    }
    Tensor::new(vec![b, d, l1, l1], data)
}

pub const CWT_MAGIC: &[u8; 4] = b"CWTC";
pub const CWT_VERSION: u32 = 1;

/// Header `CWTC`, version, `B, D, L1` as u32, then the maps.
pub fn write_scalogram_cache(path: &Path, maps: &Tensor) -> Result<()> {
    let s = maps.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::shape("scalogram cache", s, &[0, 0, 0, 0]));
    }
    let mut w = BinWriter::new(CWT_MAGIC, CWT_VERSION);
    for &n in &s[..3] {
        w.u32(n as u32);
    }
    w.f64s(maps.data());
    w.save(path)
}

pub fn read_scalogram_cache(path: &Path) -> Result<Tensor> {
    let mut r = BinReader::open(path, CWT_MAGIC, CWT_VERSION)?;
    let (b, d, l1) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let data = r.f64s(b * d * l1 * l1)?;
    r.finish()?;
    Tensor::new(vec![b, d, l1, l1], data)
}

impl<'t> TapeTensor<'t> {
    /// Non-overlapping `p x p` patch convolution with one shared kernel.
    ///
    /// `self` is `[.., H, W]` with `H, W` divisible by `p`; `kernel` is
    /// `[p, p]`, `bias` is `[1]`. Output `[.., (H/p) * (W/p)]`, patches in
    /// row-major order.
    pub fn patch_embed(self, kernel: TapeTensor<'t>, bias: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        let (value, geom) = {
            let x = self.value();
            let k = kernel.value();
            let s = x.shape();
            let ks = k.shape();
            if s.len() < 2 || ks.len() != 2 || ks[0] != ks[1] || ks[0] == 0 || bias.value().numel() != 1 {
                return Err(Error::shape("patch_embed", s, ks));
            }
            let p = ks[0];
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            if h % p != 0 || w % p != 0 {
                return Err(Error::Config(format!("map {h}x{w} not divisible by patch size {p}")));
            }
            let maps = x.numel() / (h * w);
            let (ph, pw) = (h / p, w / p);
            let b = bias.value().data()[0];
            let (xd, kd) = (x.data(), k.data());
            let mut out = vec![0.0; maps * ph * pw];
            for m in 0..maps {
                let base = m * h * w;
                for py in 0..ph {
                    for px in 0..pw {
                        let mut acc = b;
                        for dy in 0..p {
                            let row = base + (py * p + dy) * w + px * p;
                            for dx in 0..p {
                                acc += kd[dy * p + dx] * xd[row + dx];
                            }
                        }
                        out[(m * ph + py) * pw + px] = acc;
                    }
                }
            }
            let mut shape = s[..s.len() - 2].to_vec();
            shape.push(ph * pw);
            (Tensor::new(shape, out)?, (maps, h, w, p))
        };
        Ok(self.push(
            value,
            &[self.node_id(), kernel.node_id(), bias.node_id()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (maps, h, w, p) = geom;
                let (ph, pw) = (h / p, w / p);
                let (x, k, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut gx = vec![0.0; x.len()];
                let mut gk = vec![0.0; p * p];
                let mut gb = 0.0;
                for m in 0..maps {
                    let base = m * h * w;
                    for py in 0..ph {
                        for px in 0..pw {
                            let go = g[(m * ph + py) * pw + px];
                            gb += go;
                            for dy in 0..p {
                                let row = base + (py * p + dy) * w + px * p;
                                for dx in 0..p {
                                    gk[dy * p + dx] += go * x[row + dx];
                                    gx[row + dx] += go * k[dy * p + dx];
                                }
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(ctx.inputs[0].shape(), gx).unwrap()),
                    Some(Tensor::new(vec![p, p], gk).unwrap()),
                    Some(Tensor::new(ctx.inputs[2].shape(), vec![gb]).unwrap()),
                ]
            }),
        ))
    }
}

/// Learnable part of the spectral view.
#[derive(Clone, Debug)]
pub struct SpectralParams {
    pub patch: usize,
    pub patch_kernel: ParamId,
    pub patch_bias: ParamId,
    pub ffn_weight: ParamId,
    pub ffn_bias: ParamId,
}

impl SpectralParams {
    pub fn init(store: &mut ParamStore, prefix: &str, l1: usize, patch: usize, x: usize, rng: &mut impl Rng) -> Result<Self> {
        if patch == 0 || l1 % patch != 0 {
            return Err(Error::Config(format!("spectral.l1 = {l1} is not divisible by spectral.patch = {patch}")));
        }
        let fan = patch * patch;
        let tokens = (l1 / patch) * (l1 / patch);
        Ok(SpectralParams {
            patch,
            patch_kernel: store.add(format!("{prefix}patch_kernel"), init::uniform(rng, &[patch, patch], 1.0 / (fan as f64).sqrt())),
            patch_bias: store.add(format!("{prefix}patch_bias"), init::linear_bias(rng, fan, 1)),
            ffn_weight: store.add(format!("{prefix}ffn_weight"), init::linear_weight(rng, tokens, x)),
            ffn_bias: store.add(format!("{prefix}ffn_bias"), init::linear_bias(rng, tokens, x)),
        })
    }

    /// Maps `[D, L1, L1]` to `W` `[D, X]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, maps: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        maps.patch_embed(tape.param(store, self.patch_kernel), tape.param(store, self.patch_bias))?
            .linear(tape.param(store, self.ffn_weight), Some(tape.param(store, self.ffn_bias)))
    }
}
