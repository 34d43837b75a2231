//! Channel pooling, the two-layer classifier and the loss.

use rand::Rng;

use crate::autodiff::{BackwardCtx, Tape, TapeTensor, UnaryOp};
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Average,
    Max,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" | "avg" | "mean" => Ok(PoolMode::Average),
            "max" => Ok(PoolMode::Max),
            _ => Err(Error::Config(format!("unknown pooling mode `{s}` (average, max)"))),
        }
    }
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolMode::Average => "average",
            PoolMode::Max => "max",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
    Silu,
}

impl Activation {
    fn op(self) -> UnaryOp {
        match self {
            Activation::Gelu => UnaryOp::Gelu,
            Activation::Relu => UnaryOp::Relu,
            Activation::Silu => UnaryOp::Silu,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            _ => Err(Error::Config(format!("unknown activation `{s}` (gelu, relu, silu)"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        })
    }
}

/// Reduces `z` `[.., D, F]` over the channel axis to `[.., F]`.
pub fn depthwise_pool<'t>(z: TapeTensor<'t>, mode: PoolMode) -> Result<TapeTensor<'t>> {
    let axis = z.shape().len().checked_sub(2).ok_or_else(|| Error::shape("depthwise_pool", &z.shape(), &[0, 0]))?;
    if z.shape()[axis] == 0 {
        return Err(Error::Parameter("depthwise_pool needs at least one channel".into()));
    }
    match mode {
        PoolMode::Average => z.mean_axis(axis),
        PoolMode::Max => z.max_axis(axis),
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub pooling: PoolMode,
    pub activation: Activation,
    pub dropout: f64,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl HeadParams {
    /// `width` is the pooled feature width (3X); the hidden layer is half of it.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        classes: usize,
        pooling: PoolMode,
        activation: Activation,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if width < 2 || width % 2 != 0 {
            return Err(Error::Config(format!("head input width must be even and >= 2, got {width}")));
        }
        if classes == 0 {
            return Err(Error::Config("class count must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        let hidden = width / 2;
        Ok(HeadParams {
            pooling,
            activation,
            dropout,
            w1: store.add(format!("{prefix}w1"), init::linear_weight(rng, width, hidden)),
            b1: store.add(format!("{prefix}b1"), init::linear_bias(rng, width, hidden)),
            w2: store.add(format!("{prefix}w2"), init::linear_weight(rng, hidden, classes)),
            b2: store.add(format!("{prefix}b2"), init::linear_bias(rng, hidden, classes)),
        })
    }

    /// Logits for pooled features `[.., 3X]`. Dropout is applied only when
    /// `dropout_rng` is given.
    pub fn classify<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        pooled: TapeTensor<'t>,
        dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<TapeTensor<'t>> {
        let vector = pooled.shape().len() == 1;
        let pooled = if vector { pooled.reshape(&[1, pooled.shape()[0]])? } else { pooled };
        let hidden = pooled
            .linear(tape.param(store, self.w1), Some(tape.param(store, self.b1)))?
            .unary(self.activation.op());
        let hidden = match dropout_rng {
            Some(rng) if self.dropout > 0.0 => dropout(hidden, self.dropout, rng)?,
            _ => hidden,
        };
        let logits = hidden.linear(tape.param(store, self.w2), Some(tape.param(store, self.b2)))?;
        if vector {
            let c = logits.shape()[1];
            logits.reshape(&[c])
        } else {
            Ok(logits)
        }
    }

    /// Pools `[D, 3X]` features then classifies.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        z: TapeTensor<'t>,
        dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<TapeTensor<'t>> {
        let pooled = depthwise_pool(z, self.pooling)?;
        self.classify(tape, store, pooled, dropout_rng)
    }
}

/// Inverted dropout: zeroes entries with probability `rate`, rescales the rest.
pub fn dropout<'t>(x: TapeTensor<'t>, rate: f64, rng: &mut dyn rand::RngCore) -> Result<TapeTensor<'t>> {
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.value().numel())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = x.tape().constant(Tensor::new(x.shape(), mask)?);
    x.mul(mask)
}

/// Row-wise softmax of a `[.., C]` tensor.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = logits.last_dim();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

impl<'t> TapeTensor<'t> {
    /// Mean over rows of `-log softmax(logits)[label]` for `[N, C]` logits.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<TapeTensor<'t>> {
        let (value, probs) = {
            let x = self.value();
            let shape = x.shape();
            if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
                return Err(Error::shape("cross_entropy", shape, &[labels.len()]));
            }
            let c = shape[1];
            if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
                return Err(Error::Label {
                    index: i,
                    label: format!("{l} (class count {c})"),
                });
            }
            let probs = softmax(&x);
            let mut loss = 0.0;
            for (r, &l) in labels.iter().enumerate() {
                let row = x.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                loss += lse - row[l];
            }
            (Tensor::scalar(loss / labels.len() as f64), probs)
        };
        let labels = labels.to_vec();
        Ok(self.push(
            value,
            &[self.node_id()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let g = ctx.grad.item() / labels.len() as f64;
                let mut d = probs.clone();
                let c = d.last_dim();
                for (r, &l) in labels.iter().enumerate() {
                    d.data_mut()[r * c + l] -= 1.0;
                }
                d.scale_in_place(g);
                vec![Some(d)]
            }),
        ))
    }
}
