//! Forward, flipped and tango scanning with one shared block, the time and
//! channel passes, and the materialized influence matrix of a scan.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, TapeTensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::ssm::{discretize, BoundMamba, MambaBlock, SelectiveScanParams, SsmConfig};
use crate::tensor::Tensor;

/// Bound on `|scan(u) - alpha u|` for the materialized matrix.
pub const ATTENTION_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Hash)]
pub enum ScanScheme {
    /// `v + M(v)`
    Forward,
    /// `rev(v) + M(rev(v))`
    Flipped,
    /// `v + M(v) + rev(v) + M(rev(v))`
    #[default]
    Tango,
}

impl ScanScheme {
    pub const ALL: [ScanScheme; 3] = [ScanScheme::Forward, ScanScheme::Flipped, ScanScheme::Tango];
}

impl FromStr for ScanScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(ScanScheme::Forward),
            "flipped" => Ok(ScanScheme::Flipped),
            "tango" => Ok(ScanScheme::Tango),
            _ => Err(Error::Config(format!("unknown scan scheme `{s}` (forward, flipped, tango)"))),
        }
    }
}

impl std::fmt::Display for ScanScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScanScheme::Forward => "forward",
            ScanScheme::Flipped => "flipped",
            ScanScheme::Tango => "tango",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanAxis {
    /// Tokens are time steps of the fused features.
    Time,
    /// Tokens are channels.
    Channel,
}

/// One block scanned along one axis; every scheme uses the same block.
#[derive(Clone, Debug)]
pub struct TangoModule {
    pub block: MambaBlock,
    pub axis: ScanAxis,
}

impl TangoModule {
    pub fn init(store: &mut ParamStore, prefix: &str, axis: ScanAxis, cfg: SsmConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(TangoModule {
            block: MambaBlock::init(store, prefix, cfg, rng)?,
            axis,
        })
    }

    pub fn d_model(&self) -> usize {
        self.block.cfg.d_model
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> BoundMamba<'t> {
        self.block.bind(tape, store)
    }

    /// Scans tokens `[M, d_model]` under `scheme`.
    pub fn scan<'t>(&self, tape: &'t Tape, store: &ParamStore, v: TapeTensor<'t>, scheme: ScanScheme) -> Result<TapeTensor<'t>> {
        let shape = v.shape();
        if shape.len() != 2 || shape[1] != self.d_model() {
            let what = match self.axis {
                ScanAxis::Time => "time scan expects tokens of width D",
                ScanAxis::Channel => "channel scan expects tokens of width 3X",
            };
            return Err(Error::Config(format!("{what} = {}, got {shape:?}", self.d_model())));
        }
        scan_with(&self.bind(tape, store), v, scheme)
    }
}

/// Token order inverted along the first axis.
pub fn reverse<'t>(v: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
    v.reverse(0)
}

/// `v + a + rev(v) + a_r` with `a = M(v)`, `a_r = M(rev(v))`; the flipped
/// branch is left in reversed order.
pub fn tango_scan<'t>(block: &BoundMamba<'t>, v: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
    scan_with(block, v, ScanScheme::Tango)
}

pub fn scan_with<'t>(block: &BoundMamba<'t>, v: TapeTensor<'t>, scheme: ScanScheme) -> Result<TapeTensor<'t>> {
    let fwd = || -> Result<TapeTensor<'t>> { v.add(block.forward(v)?) };
    let flip = || -> Result<TapeTensor<'t>> {
        let vr = reverse(v)?;
        vr.add(block.forward(vr)?)
    };
    match scheme {
        ScanScheme::Forward => fwd(),
        ScanScheme::Flipped => flip(),
        ScanScheme::Tango => fwd()?.add(flip()?),
    }
}

/// `z = s_t^T + s_c` for `s_t` `[3X, D]` and `s_c` `[D, 3X]`.
pub fn fuse_scans<'t>(s_t: TapeTensor<'t>, s_c: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
    let (a, b) = (s_t.shape(), s_c.shape());
    if a.len() != 2 || b.len() != 2 || a[0] != b[1] || a[1] != b[0] {
        return Err(Error::shape("fuse_scans", &a, &b));
    }
    s_t.transpose()?.add(s_c)
}

/// Time and channel modules applied to one normalized sample `U` `[D, 3X]`.
#[derive(Clone, Debug)]
pub struct DualScan {
    pub time: TangoModule,
    pub channel: TangoModule,
    pub scheme: ScanScheme,
}

impl DualScan {
    /// Time tokens have width `channels`, channel tokens width `3 * width`.
    pub fn init(
        store: &mut ParamStore,
        channels: usize,
        width: usize,
        base: &SsmConfig,
        scheme: ScanScheme,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cfg = |d_model| SsmConfig { d_model, ..base.clone() };
        Ok(DualScan {
            time: TangoModule::init(store, "scan_time.", ScanAxis::Time, cfg(channels), rng)?,
            channel: TangoModule::init(store, "scan_channel.", ScanAxis::Channel, cfg(3 * width), rng)?,
            scheme,
        })
    }

    /// `[D, 3X]` to `z` `[D, 3X]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, u: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        let s_t = self.time.scan(tape, store, u.transpose()?, self.scheme)?;
        let s_c = self.channel.scan(tape, store, u, self.scheme)?;
        fuse_scans(s_t, s_c)
    }
}

/// Influence of every input token on every output of a single-channel scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanReport {
    pub scheme: ScanScheme,
    /// `[M, M]`, row `i` is output token `i`, column `j` input token `j`.
    pub alpha: Tensor,
    /// Row-major `M * M`; structurally reachable pairs.
    pub coverage: Vec<bool>,
    pub max_abs_error: f64,
    /// Output token with the largest mismatch.
    pub worst_index: usize,
}

impl ScanReport {
    pub fn len(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_abs_error < tol
    }

    pub fn covered(&self, i: usize, j: usize) -> bool {
        self.coverage[i * self.len() + j]
    }

    pub fn full_coverage(&self) -> bool {
        self.coverage.iter().all(|&c| c)
    }

    /// Largest `|alpha|` at an uncovered pair; zero when the mask is honest.
    pub fn leak(&self) -> f64 {
        let m = self.len();
        (0..m * m)
            .filter(|&k| !self.coverage[k])
            .map(|k| self.alpha.data()[k].abs())
            .fold(0.0, f64::max)
    }

    pub fn alpha_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.len() {
            let row: Vec<String> = self.alpha.row(i).iter().map(|v| format!("{v:e}")).collect();
            writeln!(s, "{}", row.join(",")).unwrap();
        }
        s
    }

    pub fn coverage_csv(&self) -> String {
        let m = self.len();
        let mut s = String::new();
        for i in 0..m {
            let row: Vec<&str> = (0..m).map(|j| if self.covered(i, j) { "1" } else { "0" }).collect();
            writeln!(s, "{}", row.join(",")).unwrap();
        }
        s
    }

    /// Binary graymap of `|alpha|`, brightest at the largest magnitude.
    pub fn alpha_pgm(&self) -> Vec<u8> {
        let m = self.len();
        let peak = self.alpha.max_abs();
        let mut out = format!("P5\n{m} {m}\n255\n").into_bytes();
        out.extend(self.alpha.data().iter().map(|v| {
            if peak > 0.0 {
                (v.abs() / peak * 255.0).round() as u8
            } else {
                0
            }
        }));
        out
    }

    /// Writes `<stem>_alpha.csv`, `<stem>_coverage.csv` and `<stem>.pgm` in `dir`.
    pub fn write_artifacts(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(format!("{stem}_alpha.csv"), self.alpha_csv().as_bytes())?;
        write(format!("{stem}_coverage.csv"), self.coverage_csv().as_bytes())?;
        write(format!("{stem}.pgm"), &self.alpha_pgm())
    }
}

/// `alpha[i][j] = sum_n C_i (prod_{k=j+1..i} Abar_k) Bbar_j` for `j <= i`,
/// together with the recurrence output, for `u` `[M]`.
fn causal_alpha(u: &[f64], params: &SelectiveScanParams, store: &ParamStore) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = u.len();
    let tape = Tape::new();
    let bound = params.bind(&tape, store);
    let x = tape.constant(Tensor::new(vec![m, 1], u.to_vec())?);
    let s = bound.inputs(x)?;
    let recurrence = x.selective_scan(s.delta, s.a, s.b, s.c)?.to_tensor().into_data();
    let (delta, a, b, c) = (s.delta.to_tensor(), s.a.to_tensor(), s.b.to_tensor(), s.c.to_tensor());
    let n = a.numel();
    let mut a_bar = vec![0.0; m * n];
    let mut b_bar = vec![0.0; m * n];
    for k in 0..m {
        for q in 0..n {
            let (ab, bb) = discretize(a.data()[q], b.get(&[k, q]), delta.data()[k]);
            a_bar[k * n + q] = ab;
            b_bar[k * n + q] = bb;
        }
    }
    let mut alpha = vec![0.0; m * m];
    for j in 0..m {
        // running product over k = j+1..i, one entry per state
        let mut prod = vec![1.0; n];
        for i in j..m {
            if i > j {
                for q in 0..n {
                    prod[q] *= a_bar[i * n + q];
                }
            }
            alpha[i * m + j] = (0..n).map(|q| c.get(&[i, q]) * prod[q] * b_bar[j * n + q]).sum();
        }
    }
    Ok((alpha, recurrence))
}

/// Materializes the scan of a single channel `u` as a matrix. `params` must
/// have `d_inner == 1`. The flipped matrix is built on `rev(u)` and reported
/// in original positions through `i -> M-1-i` on both indices; tango adds the
/// two.
pub fn materialize_attention(
    u: &[f64],
    params: &SelectiveScanParams,
    store: &ParamStore,
    scheme: ScanScheme,
) -> Result<ScanReport> {
    if params.d_inner != 1 {
        return Err(Error::Contract(format!(
            "attention materialization is single-channel, got d_inner = {}",
            params.d_inner
        )));
    }
    let m = u.len();
    if m == 0 {
        return Err(Error::Parameter("attention materialization needs M >= 1".into()));
    }
    let conj = |k: usize| {
        let (i, j) = (k / m, k % m);
        (m - 1 - i) * m + (m - 1 - j)
    };
    let lower: Vec<bool> = (0..m * m).map(|k| k % m <= k / m).collect();
    let flipped = || -> Result<(Vec<f64>, Vec<f64>)> {
        let ur: Vec<f64> = u.iter().rev().copied().collect();
        let (alpha_r, rec_r) = causal_alpha(&ur, params, store)?;
        let alpha = (0..m * m).map(|k| alpha_r[conj(k)]).collect();
        Ok((alpha, rec_r.into_iter().rev().collect()))
    };
    let (alpha, target, coverage) = match scheme {
        ScanScheme::Forward => {
            let (a, r) = causal_alpha(u, params, store)?;
            (a, r, lower)
        }
        ScanScheme::Flipped => {
            let (a, r) = flipped()?;
            (a, r, (0..m * m).map(|k| lower[conj(k)]).collect())
        }
        ScanScheme::Tango => {
            let (af, rf) = causal_alpha(u, params, store)?;
            let (ar, rr) = flipped()?;
            let alpha = af.iter().zip(&ar).map(|(x, y)| x + y).collect();
            let target = rf.iter().zip(&rr).map(|(x, y)| x + y).collect();
            let coverage = (0..m * m).map(|k| lower[k] || lower[conj(k)] || k / m == k % m).collect();
            (alpha, target, coverage)
        }
    };
    let (mut max_abs_error, mut worst_index) = (0.0f64, 0);
    for i in 0..m {
        let z: f64 = (0..m).map(|j| alpha[i * m + j] * u[j]).sum();
        let err = (z - target[i]).abs();
        if err > max_abs_error || err.is_nan() {
            max_abs_error = err;
            worst_index = i;
        }
    }
    Ok(ScanReport {
        scheme,
        alpha: Tensor::new(vec![m, m], alpha)?,
        coverage,
        max_abs_error,
        worst_index,
    })
}
