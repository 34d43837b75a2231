//! Mixing the spectral and temporal views and stacking them into `U`.

use std::str::FromStr;

use crate::autodiff::{Tape, TapeTensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAMBDA_RANGE: (f64, f64) = (0.0, 2.0);
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// `lambda V + (2 - lambda) W`
    #[default]
    Additive,
    /// `lambda (2 - lambda) V * W`
    Multiplicative,
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(FusionMode::Additive),
            "multiplicative" => Ok(FusionMode::Multiplicative),
            _ => Err(Error::Config(format!("unknown fusion mode `{s}` (additive, multiplicative)"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Additive => "additive",
            FusionMode::Multiplicative => "multiplicative",
        })
    }
}

/// Which temporal view feeds the fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ViewSwitch {
    /// Random-kernel features.
    #[default]
    Local,
    /// Shared linear map over the series.
    Global,
    /// Experimental: `sigmoid(g) V_L + (1 - sigmoid(g)) V_G` with learnable `g`.
    Gate,
}

impl FromStr for ViewSwitch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(ViewSwitch::Local),
            "global" => Ok(ViewSwitch::Global),
            "gate" => Ok(ViewSwitch::Gate),
            _ => Err(Error::Config(format!("unknown fusion switch `{s}` (local, global, gate)"))),
        }
    }
}

impl std::fmt::Display for ViewSwitch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ViewSwitch::Local => "local",
            ViewSwitch::Global => "global",
            ViewSwitch::Gate => "gate",
        })
    }
}

impl ViewSwitch {
    pub fn uses_local(self) -> bool {
        matches!(self, ViewSwitch::Local | ViewSwitch::Gate)
    }

    pub fn uses_global(self) -> bool {
        matches!(self, ViewSwitch::Global | ViewSwitch::Gate)
    }
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub mode: FusionMode,
    pub switch: ViewSwitch,
    pub lambda: ParamId,
    pub gate: Option<ParamId>,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

impl FusionParams {
    /// `width` is X; the layer norm spans 3X.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        mode: FusionMode,
        switch: ViewSwitch,
        lambda_init: f64,
    ) -> Result<Self> {
        if !(LAMBDA_RANGE.0..=LAMBDA_RANGE.1).contains(&lambda_init) {
            return Err(Error::Config(format!("fusion.lambda_init must lie in [0, 2], got {lambda_init}")));
        }
        Ok(FusionParams {
            mode,
            switch,
            lambda: store.add(format!("{prefix}lambda"), Tensor::from_vec(vec![lambda_init])),
            gate: (switch == ViewSwitch::Gate).then(|| store.add(format!("{prefix}gate"), Tensor::from_vec(vec![0.0]))),
            norm_gain: store.add(format!("{prefix}norm_gain"), Tensor::ones(&[3 * width])),
            norm_bias: store.add(format!("{prefix}norm_bias"), Tensor::zeros(&[3 * width])),
        })
    }

    /// Keeps both mixture weights non-negative after an optimizer step.
    pub fn clamp_lambda(&self, store: &mut ParamStore) {
        let v = &mut store.value_mut(self.lambda).data_mut()[0];
        *v = v.clamp(LAMBDA_RANGE.0, LAMBDA_RANGE.1);
    }

    pub fn lambda_value(&self, store: &ParamStore) -> f64 {
        store.value(self.lambda).data()[0]
    }

    /// Chooses `V` from the available temporal views according to the switch.
    pub fn select_view<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        local: Option<TapeTensor<'t>>,
        global: Option<TapeTensor<'t>>,
    ) -> Result<TapeTensor<'t>> {
        let missing = |what: &str| Error::Contract(format!("fusion switch {} needs the {what} view", self.switch));
        match self.switch {
            ViewSwitch::Local => local.ok_or_else(|| missing("local")),
            ViewSwitch::Global => global.ok_or_else(|| missing("global")),
            ViewSwitch::Gate => {
                let (l, g) = (local.ok_or_else(|| missing("local"))?, global.ok_or_else(|| missing("global"))?);
                let s = tape.param(store, self.gate.expect("gate parameter")).sigmoid();
                l.mul(s)?.add(g.mul(s.affine(-1.0, 1.0))?)
            }
        }
    }

    /// `V_W` from `W` and `V` of identical shape.
    pub fn fuse<'t>(&self, tape: &'t Tape, store: &ParamStore, w: TapeTensor<'t>, v: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        fuse(self.mode, tape.param(store, self.lambda), w, v)
    }

    /// `LayerNorm(W | V_W | V)` over the last axis, `[.., 3X]`.
    pub fn views<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        w: TapeTensor<'t>,
        v: TapeTensor<'t>,
    ) -> Result<TapeTensor<'t>> {
        let vw = self.fuse(tape, store, w, v)?;
        concat_views(w, vw, v)?.layer_norm(tape.param(store, self.norm_gain), tape.param(store, self.norm_bias), LN_EPS)
    }
}

pub fn fuse<'t>(mode: FusionMode, lambda: TapeTensor<'t>, w: TapeTensor<'t>, v: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
    if w.shape() != v.shape() {
        return Err(Error::shape("fuse", &w.shape(), &v.shape()));
    }
    let other = lambda.affine(-1.0, 2.0);
    match mode {
        FusionMode::Additive => v.mul(lambda)?.add(w.mul(other)?),
        FusionMode::Multiplicative => v.mul(w)?.mul(lambda.mul(other)?),
    }
}

/// `W | V_W | V` along the last axis.
pub fn concat_views<'t>(w: TapeTensor<'t>, vw: TapeTensor<'t>, v: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
    if w.shape() != vw.shape() || w.shape() != v.shape() {
        return Err(Error::shape("concat_views", &w.shape(), &v.shape()));
    }
    let axis = w.shape().len() - 1;
    TapeTensor::concat(&[w, vw, v], axis)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<'t>(tape: &'t Tape, v: &[f64]) -> TapeTensor<'t> {
        tape.constant(Tensor::from_vec(v.to_vec()))
    }

    #[test]
    fn fusion_at_special_lambdas() {
        let tape = Tape::new();
        let (w, v) = (t(&tape, &[1.0, -2.0]), t(&tape, &[0.5, 3.0]));
        let lam = |x| t(&tape, &[x]);
        assert_eq!(fuse(FusionMode::Additive, lam(1.0), w, v).unwrap().value().data(), &[1.5, 1.0]);
        assert_eq!(fuse(FusionMode::Additive, lam(0.0), w, v).unwrap().value().data(), &[2.0, -4.0]);
        assert_eq!(fuse(FusionMode::Multiplicative, lam(1.0), w, v).unwrap().value().data(), &[0.5, -6.0]);
        assert_eq!(
            fuse(FusionMode::Additive, lam(1.0), w, v).unwrap().to_tensor(),
            fuse(FusionMode::Additive, lam(1.0), v, w).unwrap().to_tensor()
        );
        assert!(fuse(FusionMode::Additive, lam(1.0), w, t(&tape, &[1.0])).is_err());
    }

    #[test]
    fn concat_layout_and_norm() {
        let tape = Tape::new();
        let u = concat_views(t(&tape, &[1.0, 2.0]), t(&tape, &[3.0, 4.0]), t(&tape, &[5.0, 6.0])).unwrap();
        assert_eq!(u.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(&u.value().data()[..2], &[1.0, 2.0]);

        let mut store = ParamStore::new();
        let fp = FusionParams::init(&mut store, "f.", 2, FusionMode::Additive, ViewSwitch::Local, 1.0).unwrap();
        let w = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap());
        let n = fp.views(&tape, &store, w, v).unwrap().to_tensor();
        let mean = n.data().iter().sum::<f64>() / 6.0;
        let var = n.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-10);
        // eps in the denominator keeps the variance just below 1.
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn lambda_is_clamped_and_gets_gradient() {
        let mut store = ParamStore::new();
        let fp = FusionParams::init(&mut store, "f.", 2, FusionMode::Additive, ViewSwitch::Local, 1.0).unwrap();
        store.value_mut(fp.lambda).data_mut()[0] = 2.7;
        fp.clamp_lambda(&mut store);
        assert_eq!(fp.lambda_value(&store), 2.0);
        store.value_mut(fp.lambda).data_mut()[0] = -0.1;
        fp.clamp_lambda(&mut store);
        assert_eq!(fp.lambda_value(&store), 0.0);
        assert!(FusionParams::init(&mut store, "g.", 2, FusionMode::Additive, ViewSwitch::Local, 3.0).is_err());

        store.value_mut(fp.lambda).data_mut()[0] = 1.0;
        let tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let v = tape.constant(Tensor::new(vec![2, 2], vec![0.3, -0.7, 2.0, 1.0]).unwrap());
        let lam = tape.param(&store, fp.lambda);
        let loss = fuse(FusionMode::Additive, lam, w, v).unwrap().gelu().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(lam).unwrap().item().abs() > 1e-6);
    }

    #[test]
    fn switch_selects_view() {
        let tape = Tape::new();
        let mut store = ParamStore::new();
        let local = tape.constant(Tensor::full(&[1, 2], 1.0));
        let global = tape.constant(Tensor::full(&[1, 2], -1.0));
        for (sw, want) in [(ViewSwitch::Local, 1.0), (ViewSwitch::Global, -1.0), (ViewSwitch::Gate, 0.0)] {
            let fp = FusionParams::init(&mut store, &format!("{sw}."), 2, FusionMode::Additive, sw, 1.0).unwrap();
            let v = fp.select_view(&tape, &store, Some(local), Some(global)).unwrap();
            assert_eq!(v.value().data(), &[want, want]);
        }
        let fp = FusionParams::init(&mut store, "x.", 2, FusionMode::Additive, ViewSwitch::Global, 1.0).unwrap();
        assert!(fp.select_view(&tape, &store, Some(local), None).is_err());
    }
}
