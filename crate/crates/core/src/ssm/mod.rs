//! Selective state-space layer and the gated block built around it.

mod scan;

pub use scan::{discretize, gated_scan_inputs, gated_recurrence, GateLinear, SMALL_DELTA_A};

use rand::Rng;

use crate::autodiff::{Tape, TapeTensor};
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    /// Rank of the step-size projection; `None` means `ceil(d_model / 16)`.
    pub dt_rank: Option<usize>,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl SsmConfig {
    pub fn new(d_model: usize) -> Self {
        SsmConfig {
            d_model,
            d_state: 16,
            d_conv: 4,
            expand: 2,
            dt_rank: None,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_rank.unwrap_or_else(|| self.d_model.div_ceil(16)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Parameter(format!("{what} must be >= 1")));
        if self.d_model == 0 {
            return bad("d_model");
        }
        if self.d_state == 0 {
            return bad("d_state");
        }
        if self.d_conv == 0 {
            return bad("d_conv");
        }
        if self.expand == 0 {
            return bad("expand");
        }
        if !(self.dt_min > 0.0 && self.dt_max >= self.dt_min) {
            return Err(Error::Parameter(format!(
                "need 0 < dt_min <= dt_max, got {} and {}",
                self.dt_min, self.dt_max
            )));
        }
        Ok(())
    }

    /// Scalar parameters in one [`MambaBlock`].
    pub fn block_param_count(&self) -> usize {
        let (dm, di, n, r, w) = (self.d_model, self.d_inner(), self.d_state, self.dt_rank(), self.d_conv);
        dm * 2 * di + di * w + di + di * (r + 2 * n) + r * di + di + di * n + di + di * dm
    }
}

/// Parameters of the selective scan proper: the input-dependent step,
/// input and output projections, the diagonal state matrix and the skip.
#[derive(Clone, Debug)]
pub struct SelectiveScanParams {
    pub x_proj: ParamId,
    pub dt_proj: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
}

impl SelectiveScanParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_inner: usize,
        cfg: &SsmConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let (n, r) = (cfg.d_state, cfg.dt_rank());
        let x_proj = store.add(format!("{prefix}x_proj"), init::linear_weight(rng, d_inner, r + 2 * n));
        let dt_proj = store.add(
            format!("{prefix}dt_proj"),
            init::uniform(rng, &[r, d_inner], 1.0 / (r as f64).sqrt()),
        );
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let dt_bias: Vec<f64> = (0..d_inner)
            .map(|_| {
                let dt = if hi > lo { rng.random_range(lo..hi) } else { lo }.exp();
                // softplus^-1(dt)
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let dt_bias = store.add(format!("{prefix}dt_bias"), Tensor::from_vec(dt_bias));
        let a_log: Vec<f64> = (0..d_inner)
            .flat_map(|_| (1..=n).map(|i| (i as f64).ln()))
            .collect();
        let a_log = store.add(format!("{prefix}a_log"), Tensor::new(vec![d_inner, n], a_log).unwrap());
        let d_skip = store.add(format!("{prefix}d_skip"), Tensor::ones(&[d_inner]));
        SelectiveScanParams {
            x_proj,
            dt_proj,
            dt_bias,
            a_log,
            d_skip,
            d_inner,
            d_state: n,
            dt_rank: r,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> BoundScan<'t> {
        BoundScan {
            x_proj: tape.param(store, self.x_proj),
            dt_proj: tape.param(store, self.dt_proj),
            dt_bias: tape.param(store, self.dt_bias),
            a_log: tape.param(store, self.a_log),
            d_skip: tape.param(store, self.d_skip),
            dt_rank: self.dt_rank,
            d_state: self.d_state,
        }
    }
}

/// Per-token quantities the scan consumes, produced from the input itself.
pub struct ScanInputs<'t> {
    /// `[M, D]`
    pub delta: TapeTensor<'t>,
    /// `[D, N]`, strictly negative.
    pub a: TapeTensor<'t>,
    /// `[M, N]`
    pub b: TapeTensor<'t>,
    /// `[M, N]`
    pub c: TapeTensor<'t>,
}

#[derive(Clone, Copy)]
pub struct BoundScan<'t> {
    x_proj: TapeTensor<'t>,
    dt_proj: TapeTensor<'t>,
    dt_bias: TapeTensor<'t>,
    a_log: TapeTensor<'t>,
    d_skip: TapeTensor<'t>,
    dt_rank: usize,
    d_state: usize,
}

impl<'t> BoundScan<'t> {
    /// Computes step sizes and the input-dependent `B`, `C` for `u` `[M, D]`.
    pub fn inputs(&self, u: TapeTensor<'t>) -> Result<ScanInputs<'t>> {
        let (r, n) = (self.dt_rank, self.d_state);
        let proj = u.matmul(self.x_proj)?;
        let delta = proj.slice(1, 0, r)?.matmul(self.dt_proj)?.add(self.dt_bias)?.softplus();
        Ok(ScanInputs {
            delta,
            a: self.a_log.exp().neg(),
            b: proj.slice(1, r, r + n)?,
            c: proj.slice(1, r + n, r + 2 * n)?,
        })
    }

    /// Selective scan of `u` `[M, D]` without the skip term.
    pub fn scan(&self, u: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        let s = self.inputs(u)?;
        u.selective_scan(s.delta, s.a, s.b, s.c)
    }

    /// Selective scan plus the per-channel skip `D * u`.
    pub fn forward(&self, u: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        self.scan(u)?.add(u.mul(self.d_skip)?)
    }
}

/// Gated block: input projection, causal depthwise convolution, SiLU,
/// selective scan, multiplicative SiLU gate and output projection.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: SsmConfig,
    pub in_proj: ParamId,
    pub conv_weight: ParamId,
    /// Follows the reference block, as does the `D` skip inside `scan`.
    pub conv_bias: ParamId,
    pub scan: SelectiveScanParams,
    pub out_proj: ParamId,
}

impl MambaBlock {
    /// Registers a block's parameters under `prefix`.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: SsmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (dm, di, w) = (cfg.d_model, cfg.d_inner(), cfg.d_conv);
        let in_proj = store.add(format!("{prefix}in_proj"), init::linear_weight(rng, dm, 2 * di));
        let conv_bound = 1.0 / (w as f64).sqrt();
        let conv_weight = store.add(format!("{prefix}conv_weight"), init::uniform(rng, &[di, w], conv_bound));
        let conv_bias = store.add(format!("{prefix}conv_bias"), init::uniform(rng, &[di], conv_bound));
        let scan = SelectiveScanParams::init(store, prefix, di, &cfg, rng);
        let out_proj = store.add(format!("{prefix}out_proj"), init::linear_weight(rng, di, dm));
        Ok(MambaBlock {
            cfg,
            in_proj,
            conv_weight,
            conv_bias,
            scan,
            out_proj,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> BoundMamba<'t> {
        BoundMamba {
            in_proj: tape.param(store, self.in_proj),
            conv_weight: tape.param(store, self.conv_weight),
            conv_bias: tape.param(store, self.conv_bias),
            scan: self.scan.bind(tape, store),
            out_proj: tape.param(store, self.out_proj),
            d_inner: self.cfg.d_inner(),
            d_model: self.cfg.d_model,
        }
    }
}

/// A block whose parameters have been registered on one tape; calling
/// [`BoundMamba::forward`] repeatedly shares them.
#[derive(Clone, Copy)]
pub struct BoundMamba<'t> {
    in_proj: TapeTensor<'t>,
    conv_weight: TapeTensor<'t>,
    conv_bias: TapeTensor<'t>,
    scan: BoundScan<'t>,
    out_proj: TapeTensor<'t>,
    d_inner: usize,
    d_model: usize,
}

impl<'t> BoundMamba<'t> {
    /// Maps tokens `[M, d_model]` to `[M, d_model]`.
    pub fn forward(&self, x: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.d_model {
            return Err(Error::shape("mamba block input", &shape, &[0, self.d_model]));
        }
        let di = self.d_inner;
        let xz = x.matmul(self.in_proj)?;
        let xb = xz.slice(1, 0, di)?;
        let gate = xz.slice(1, di, 2 * di)?.silu();
        let u = xb
            .transpose()?
            .causal_conv1d(self.conv_weight, Some(self.conv_bias))?
            .transpose()?
            .silu();
        let y = self.scan.forward(u)?;
        y.mul(gate)?.matmul(self.out_proj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, sample_coords, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(d_model: usize) -> SsmConfig {
        SsmConfig {
            d_state: 4,
            d_conv: 3,
            ..SsmConfig::new(d_model)
        }
    }

    #[test]
    fn defaults() {
        let cfg = SsmConfig::new(48);
        assert_eq!(cfg.d_inner(), 96);
        assert_eq!(cfg.dt_rank(), 3);
        assert_eq!(SsmConfig::new(1).dt_rank(), 1);
    }

    #[test]
    fn param_count_formula_matches_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for dm in [1, 5, 17, 40] {
            let mut store = ParamStore::new();
            let cfg = small_cfg(dm);
            MambaBlock::init(&mut store, "b.", cfg.clone(), &mut rng).unwrap();
            assert_eq!(store.scalar_count(), cfg.block_param_count());
        }
    }

    #[test]
    fn init_puts_steps_in_range_and_a_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = SsmConfig::new(8);
        let block = MambaBlock::init(&mut store, "", cfg, &mut rng).unwrap();
        for &b in store.value(block.scan.dt_bias).data() {
            let dt = crate::tensor::softplus(b);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
        let a_log = store.value(block.scan.a_log);
        assert_eq!(&a_log.data()[..3], &[0.0, 2f64.ln(), 3f64.ln()]);
    }

    #[test]
    fn block_output_shape_and_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = MambaBlock::init(&mut store, "", small_cfg(6), &mut rng).unwrap();
        let x = init::uniform(&mut rng, &[9, 6], 1.0);
        let run = |x: Tensor| {
            let tape = Tape::new();
            let b = block.bind(&tape, &store);
            b.forward(tape.constant(x)).unwrap().to_tensor()
        };
        let y = run(x.clone());
        assert_eq!(y.shape(), &[9, 6]);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[5 * 6..] {
            *v += 0.7;
        }
        let y2 = run(x2);
        assert_eq!(&y.data()[..5 * 6], &y2.data()[..5 * 6]);
        assert_ne!(&y.data()[5 * 6..], &y2.data()[5 * 6..]);
    }

    #[test]
    fn rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let block = MambaBlock::init(&mut store, "", small_cfg(4), &mut rng).unwrap();
        let tape = Tape::new();
        let b = block.bind(&tape, &store);
        assert!(b.forward(tape.constant(Tensor::zeros(&[3, 5]))).is_err());
        assert!(MambaBlock::init(&mut store, "x.", SsmConfig { d_state: 0, ..small_cfg(4) }, &mut rng).is_err());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let block = MambaBlock::init(&mut store, "", small_cfg(3), &mut rng).unwrap();
        let x = init::uniform(&mut rng, &[7, 3], 1.0);
        let w = init::uniform(&mut rng, &[7, 3], 1.0);
        let coords = sample_coords(&store, 6, &mut rng, |_| true);
        let report = check_params(&mut store, &coords, DEFAULT_STEP, |tape, store| {
            let b = block.bind(tape, store);
            let y = b.forward(tape.constant(x.clone()))?;
            Ok(y.mul(tape.constant(w.clone()))?.sum())
        })
        .unwrap();
        assert!(report.passes(1e-4), "{:?}", report.worst());
    }
}
