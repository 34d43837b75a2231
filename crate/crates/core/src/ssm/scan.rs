//! Discretised selective state-space recurrence.
//!
//! For one channel `d` and state index `n`:
//!
//! ```text
//! a_bar = exp(delta[k,d] * A[d,n])
//! b_bar = (exp(delta*A) - 1) / A * B[k,n]          (zero-order hold)
//! h[k]  = a_bar * h[k-1] + b_bar * u[k,d]
//! z[k,d] = sum_n C[k,n] * h[k,d,n]
//! ```

use crate::autodiff::{BackwardCtx, TapeTensor};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Tensor};

/// Below this |delta*A| the zero-order-hold input gain falls back to `delta`.
pub const SMALL_DELTA_A: f64 = 1e-8;

/// Zero-order-hold discretisation of a scalar diagonal entry.
///
/// Returns `(a_bar, b_bar)` for continuous `a < 0`, input gain `b` and step
/// `delta > 0`.
pub fn discretize(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let (a_bar, gain) = zoh(a, delta);
    (a_bar, gain * b)
}

/// `(exp(delta*a), (exp(delta*a) - 1)/a)`.
#[inline]
fn zoh(a: f64, delta: f64) -> (f64, f64) {
    let x = delta * a;
    let (a_bar, em1) = if x.abs() < 1e-3 {
        // Taylor series; truncation error is below x^5 / 720.
        let em1 = x * (1.0 + x * (0.5 + x * (1.0 / 6.0 + x * (1.0 / 24.0 + x / 120.0))));
        (1.0 + em1, em1)
    } else {
        let e = x.exp();
        (e, e - 1.0)
    };
    let gain = if x.abs() < SMALL_DELTA_A { delta } else { em1 / a };
    (a_bar, gain)
}

/// Partial derivatives of the ZOH gain `(exp(delta*a) - 1)/a`.
#[inline]
fn zoh_gain_partials(a: f64, delta: f64, a_bar: f64) -> (f64, f64) {
    let x = delta * a;
    if x.abs() < SMALL_DELTA_A {
        return (1.0, 0.0);
    }
    // d/da = delta^2 * (x e^x - (e^x - 1)) / x^2, expanded near zero.
    let phi = if x.abs() < 1e-3 {
        0.5 + x / 3.0 + x * x / 8.0
    } else {
        (x * a_bar - (a_bar - 1.0)) / (x * x)
    };
    (a_bar, delta * delta * phi)
}

impl<'t> TapeTensor<'t> {
    /// Runs the recurrence with explicit per-token parameters.
    ///
    /// Shapes: `self` (input `u`) `[M, D]`, `delta` `[M, D]`, `a` `[D, N]`,
    /// `b` `[M, N]`, `c` `[M, N]`. Output `[M, D]`; `h_0 = 0`.
    pub fn selective_scan(
        self,
        delta: TapeTensor<'t>,
        a: TapeTensor<'t>,
        b: TapeTensor<'t>,
        c: TapeTensor<'t>,
    ) -> Result<TapeTensor<'t>> {
        let (value, saved) = {
            let (u, dt, av, bv, cv) = (self.value(), delta.value(), a.value(), b.value(), c.value());
            let (m, d, n) = check_shapes(u.shape(), dt.shape(), av.shape(), bv.shape(), cv.shape())?;
            let fwd = scan_forward(u.data(), dt.data(), av.data(), bv.data(), cv.data(), m, d, n)?;
            (Tensor::new(vec![m, d], fwd.z.clone()).unwrap(), fwd)
        };
        Ok(self.push(
            value,
            &[self.node_id(), delta.node_id(), a.node_id(), b.node_id(), c.node_id()],
            Box::new(move |ctx: &BackwardCtx<'_>| scan_backward(ctx, &saved)),
        ))
    }
}

fn check_shapes(
    u: &[usize],
    dt: &[usize],
    a: &[usize],
    b: &[usize],
    c: &[usize],
) -> Result<(usize, usize, usize)> {
    if u.len() != 2 || a.len() != 2 {
        return Err(Error::shape("selective_scan", u, a));
    }
    let (m, d) = (u[0], u[1]);
    let n = a[1];
    if dt != u {
        return Err(Error::shape("selective_scan delta", u, dt));
    }
    if a[0] != d {
        return Err(Error::shape("selective_scan A", u, a));
    }
    if b != [m, n] {
        return Err(Error::shape("selective_scan B", &[m, n], b));
    }
    if c != [m, n] {
        return Err(Error::shape("selective_scan C", &[m, n], c));
    }
    Ok((m, d, n))
}

struct ScanForward {
    m: usize,
    d: usize,
    n: usize,
    z: Vec<f64>,
    /// States after every token, `[M, D, N]`.
    h: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn scan_forward(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    m: usize,
    d: usize,
    n: usize,
) -> Result<ScanForward> {
    let dn = d * n;
    let mut h = vec![0.0; m * dn];
    let mut z = vec![0.0; m * d];
    for k in 0..m {
        let (prev, cur) = h.split_at_mut(k * dn);
        let prev = if k == 0 { None } else { Some(&prev[(k - 1) * dn..]) };
        let cur = &mut cur[..dn];
        let bk = &b[k * n..(k + 1) * n];
        let ck = &c[k * n..(k + 1) * n];
        for ch in 0..d {
            let dt = delta[k * d + ch];
            let uk = u[k * d + ch];
            let mut acc = 0.0;
            for s in 0..n {
                let i = ch * n + s;
                let (ab, g) = zoh(a[i], dt);
                let hp = prev.map_or(0.0, |p| p[i]);
                let hv = ab * hp + g * bk[s] * uk;
                cur[i] = hv;
                acc += ck[s] * hv;
            }
            if !acc.is_finite() {
                return Err(Error::NonFiniteState { token: k, channel: ch });
            }
            z[k * d + ch] = acc;
        }
    }
    Ok(ScanForward {
        m,
        d,
        n,
        z,
        h,
    })
}

fn scan_backward(ctx: &BackwardCtx<'_>, s: &ScanForward) -> Vec<Option<Tensor>> {
    let (m, d, n) = (s.m, s.d, s.n);
    let dn = d * n;
    let u = ctx.inputs[0].data();
    let delta = ctx.inputs[1].data();
    let a = ctx.inputs[2].data();
    let b = ctx.inputs[3].data();
    let c = ctx.inputs[4].data();
    let gz = ctx.grad.data();

    let mut gu = vec![0.0; m * d];
    let mut gdelta = vec![0.0; m * d];
    let mut ga = vec![0.0; dn];
    let mut gb = vec![0.0; m * n];
    let mut gc = vec![0.0; m * n];
    // Gradient flowing into h[k] from later tokens.
    let mut gh = vec![0.0; dn];

    for k in (0..m).rev() {
        let hk = &s.h[k * dn..(k + 1) * dn];
        let hprev = (k > 0).then(|| &s.h[(k - 1) * dn..k * dn]);
        for ch in 0..d {
            let g_out = gz[k * d + ch];
            let dt = delta[k * d + ch];
            let uk = u[k * d + ch];
            let mut g_u = 0.0;
            let mut g_dt = 0.0;
            for st in 0..n {
                let i = ch * n + st;
                let (ab, gain) = zoh(a[i], dt);
                let ghi = gh[i] + g_out * c[k * n + st];
                gc[k * n + st] += g_out * hk[i];
                let hp = hprev.map_or(0.0, |p| p[i]);
                let g_abar = ghi * hp;
                let bu = b[k * n + st] * uk;
                let g_gain = ghi * bu;
                gb[k * n + st] += ghi * gain * uk;
                g_u += ghi * gain * b[k * n + st];
                let (dgain_ddt, dgain_da) = zoh_gain_partials(a[i], dt, ab);
                g_dt += g_abar * a[i] * ab + g_gain * dgain_ddt;
                ga[i] += g_abar * dt * ab + g_gain * dgain_da;
                gh[i] = ghi * ab;
            }
            gu[k * d + ch] += g_u;
            gdelta[k * d + ch] += g_dt;
        }
    }
    vec![
        Some(Tensor::new(vec![m, d], gu).unwrap()),
        Some(Tensor::new(vec![m, d], gdelta).unwrap()),
        Some(Tensor::new(vec![d, n], ga).unwrap()),
        Some(Tensor::new(vec![m, n], gb).unwrap()),
        Some(Tensor::new(vec![m, n], gc).unwrap()),
    ]
}

/// Scalar gate `g = sigmoid(weight * u + bias)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateLinear {
    pub weight: f64,
    pub bias: f64,
}

impl GateLinear {
    pub fn pre_activation(&self, u: f64) -> f64 {
        self.weight * u + self.bias
    }
}

/// The gated recurrence `h_k = (1 - g_k) h_{k-1} + g_k u_k` with
/// `g_k = sigmoid(Linear(u_k))`, `h_0 = 0`.
///
/// This is what the selective scan reduces to with one state, `A = -1`,
/// `B = C = 1` and `delta = softplus(Linear(u))`; it is computed here
/// directly so the two paths can check each other.
pub fn gated_recurrence(u: &[f64], gate: GateLinear) -> Vec<f64> {
    let mut h = 0.0;
    u.iter()
        .map(|&uk| {
            let g = sigmoid(gate.pre_activation(uk));
            h = (1.0 - g) * h + g * uk;
            h
        })
        .collect()
}

/// Builds the `(u, delta, A, B, C)` inputs that put the selective scan in
/// the gated special case above.
pub fn gated_scan_inputs(u: &[f64], gate: GateLinear) -> [Tensor; 5] {
    let m = u.len();
    let delta: Vec<f64> = u.iter().map(|&x| softplus(gate.pre_activation(x))).collect();
    [
        Tensor::new(vec![m, 1], u.to_vec()).unwrap(),
        Tensor::new(vec![m, 1], delta).unwrap(),
        Tensor::new(vec![1, 1], vec![-1.0]).unwrap(),
        Tensor::ones(&[m, 1]),
        Tensor::ones(&[m, 1]),
    ]
}
