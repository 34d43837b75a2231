use super::{BackwardCtx, TapeTensor};
use crate::error::{Error, Result};
use crate::tensor::{self, gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Silu,
    Softplus,
    Sigmoid,
    Negate,
    Gelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl UnaryOp {
    fn eval(self, x: f64) -> f64 {
        match self {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Silu => tensor::silu(x),
            UnaryOp::Softplus => tensor::softplus(x),
            UnaryOp::Sigmoid => tensor::sigmoid(x),
            UnaryOp::Negate => -x,
            UnaryOp::Gelu => tensor::gelu(x),
            UnaryOp::Relu => x.max(0.0),
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Silu => {
                let s = tensor::sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnaryOp::Softplus => tensor::sigmoid(x),
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Negate => -1.0,
            UnaryOp::Gelu => tensor::gelu_grad(x),
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// How the flat index of a broadcast output maps back onto one operand.
#[derive(Clone)]
enum Bcast {
    Same,
    /// Operand shape is a suffix of the output shape.
    Suffix(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn plan(out: &[usize], inp: &[usize]) -> Bcast {
        if out == inp {
            return Bcast::Same;
        }
        let numel: usize = inp.iter().product();
        if inp.len() <= out.len() && out[out.len() - inp.len()..] == *inp {
            return Bcast::Suffix(numel.max(1));
        }
        // General case: walk the output with a multi-index counter.
        let nd = out.len();
        let pad = nd - inp.len();
        let mut strides = vec![0usize; nd];
        let mut s = 1;
        for ax in (0..inp.len()).rev() {
            if inp[ax] != 1 {
                strides[ax + pad] = s;
            }
            s *= inp[ax];
        }
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd];
        let mut flat = 0usize;
        for _ in 0..total {
            map.push(flat);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                flat += strides[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                flat -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> TapeTensor<'t> {
    pub fn unary(self, op: UnaryOp) -> TapeTensor<'t> {
        let value = self.value().map(|x| op.eval(x));
        self.push(
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let x = ctx.inputs[0].data();
                let y = ctx.output.data();
                let g: Vec<f64> = ctx
                    .grad
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * op.derivative(x[i], y[i]))
                    .collect();
                vec![Some(Tensor::new(ctx.output.shape(), g).unwrap())]
            }),
        )
    }

    pub fn binary(self, op: BinaryOp, rhs: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        let (value, pa, pb) = {
            let a = self.value();
            let b = rhs.value();
            let out_shape = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| Error::shape("broadcast", a.shape(), b.shape()))?;
            let pa = Bcast::plan(&out_shape, a.shape());
            let pb = Bcast::plan(&out_shape, b.shape());
            let n: usize = out_shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let mut zero_div = false;
            let data: Vec<f64> = (0..n)
                .map(|i| {
                    let (x, y) = (ad[pa.at(i)], bd[pb.at(i)]);
                    match op {
                        BinaryOp::Add => x + y,
                        BinaryOp::Sub => x - y,
                        BinaryOp::Mul => x * y,
                        BinaryOp::Div => {
                            zero_div |= y == 0.0;
                            x / y
                        }
                    }
                })
                .collect();
            if zero_div {
                self.tape().record_nan_event();
            }
            (Tensor::new(out_shape, data).unwrap(), pa, pb)
        };
        Ok(self.push(
            value,
            &[self.id, rhs.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
                let (ad, bd) = (a.data(), b.data());
                let mut ga = vec![0.0; a.numel()];
                let mut gb = vec![0.0; b.numel()];
                for (i, &g) in ctx.grad.data().iter().enumerate() {
                    let (ia, ib) = (pa.at(i), pb.at(i));
                    let (da, db) = match op {
                        BinaryOp::Add => (g, g),
                        BinaryOp::Sub => (g, -g),
                        BinaryOp::Mul => (g * bd[ib], g * ad[ia]),
                        BinaryOp::Div => {
                            let y = bd[ib];
                            (g / y, -g * ad[ia] / (y * y))
                        }
                    };
                    ga[ia] += da;
                    gb[ib] += db;
                }
                vec![
                    Some(Tensor::new(a.shape(), ga).unwrap()),
                    Some(Tensor::new(b.shape(), gb).unwrap()),
                ]
            }),
        ))
    }

    pub fn add(self, rhs: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub(self, rhs: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul(self, rhs: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        self.binary(BinaryOp::Mul, rhs)
    }

    pub fn div(self, rhs: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        self.binary(BinaryOp::Div, rhs)
    }

    pub fn exp(self) -> TapeTensor<'t> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(self) -> TapeTensor<'t> {
        self.unary(UnaryOp::Log)
    }

    pub fn silu(self) -> TapeTensor<'t> {
        self.unary(UnaryOp::Silu)
    }

    pub fn softplus(self) -> TapeTensor<'t> {
        self.unary(UnaryOp::Softplus)
    }

    pub fn sigmoid(self) -> TapeTensor<'t> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn neg(self) -> TapeTensor<'t> {
        self.unary(UnaryOp::Negate)
    }

    pub fn gelu(self) -> TapeTensor<'t> {
        self.unary(UnaryOp::Gelu)
    }

    pub fn relu(self) -> TapeTensor<'t> {
        self.unary(UnaryOp::Relu)
    }

    /// `a·x + b` elementwise with constant `a`, `b`.
    pub fn affine(self, a: f64, b: f64) -> TapeTensor<'t> {
        let value = self.value().map(|x| a * x + b);
        self.push(
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.map(|g| a * g))]),
        )
    }

    pub fn scale(self, a: f64) -> TapeTensor<'t> {
        self.affine(a, 0.0)
    }

    /// Matrix product over the last two axes.
    ///
    /// `rhs` is either 2-D (shared by every leading batch index of `self`)
    /// or has the same leading batch dimensions as `self`.
    pub fn matmul(self, rhs: TapeTensor<'t>) -> Result<TapeTensor<'t>> {
        let (value, m, k, n, batch, shared_rhs) = {
            let a = self.value();
            let b = rhs.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 2 || sb.len() < 2 {
                return Err(Error::shape("matmul", sa, sb));
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            let shared_rhs = sb.len() == 2;
            if k != k2 || (!shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
                return Err(Error::shape("matmul", sa, sb));
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let mut out_shape = sa[..sa.len() - 2].to_vec();
            out_shape.extend([m, n]);
            let mut out = vec![0.0; batch * m * n];
            if shared_rhs {
                gemm(batch * m, k, n, a.data(), false, b.data(), false, &mut out, false);
            } else {
                for bi in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &a.data()[bi * m * k..(bi + 1) * m * k],
                        false,
                        &b.data()[bi * k * n..(bi + 1) * k * n],
                        false,
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        false,
                    );
                }
            }
            (Tensor::new(out_shape, out).unwrap(), m, k, n, batch, shared_rhs)
        };
        Ok(self.push(
            value,
            &[self.id, rhs.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
                let g = ctx.grad.data();
                let mut ga = vec![0.0; a.numel()];
                let mut gb = vec![0.0; b.numel()];
                if shared_rhs {
                    let rows = batch * m;
                    gemm(rows, n, k, g, false, b.data(), true, &mut ga, false);
                    gemm(k, rows, n, a.data(), true, g, false, &mut gb, false);
                } else {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
                        let bsl = &b.data()[bi * k * n..(bi + 1) * k * n];
                        gemm(m, n, k, gs, false, bsl, true, &mut ga[bi * m * k..(bi + 1) * m * k], false);
                        gemm(k, m, n, asl, true, gs, false, &mut gb[bi * k * n..(bi + 1) * k * n], false);
                    }
                }
                vec![
                    Some(Tensor::new(a.shape(), ga).unwrap()),
                    Some(Tensor::new(b.shape(), gb).unwrap()),
                ]
            }),
        ))
    }

    /// `self · weight + bias` with `weight: [in, out]`, `bias: [out]`.
    pub fn linear(self, weight: TapeTensor<'t>, bias: Option<TapeTensor<'t>>) -> Result<TapeTensor<'t>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn sum(self) -> TapeTensor<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.push(
            value,
            &[self.id],
            Box::new(|ctx: &BackwardCtx<'_>| {
                vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]
            }),
        )
    }

    pub fn mean(self) -> TapeTensor<'t> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<TapeTensor<'t>> {
        let (value, outer, dim, inner) = {
            let x = self.value();
            if axis >= x.ndim() {
                return Err(Error::shape("sum_axis", x.shape(), &[axis]));
            }
            let (outer, dim, inner) = axis_split(x.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            let d = x.data();
            for o in 0..outer {
                for j in 0..dim {
                    let src = &d[(o * dim + j) * inner..(o * dim + j + 1) * inner];
                    for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            (Tensor::new(shape, out).unwrap(), outer, dim, inner)
        };
        Ok(self.push(
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for j in 0..dim {
                        gx[(o * dim + j) * inner..(o * dim + j + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), gx).unwrap())]
            }),
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<TapeTensor<'t>> {
        let dim = self
            .value()
            .shape()
            .get(axis)
            .copied()
            .ok_or_else(|| Error::shape("mean_axis", &self.shape(), &[axis]))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / dim as f64))
    }

    /// Maximum over `axis`, removing it. Ties route the gradient to the first maximiser.
    pub fn max_axis(self, axis: usize) -> Result<TapeTensor<'t>> {
        let (value, argmax, outer, dim, inner) = {
            let x = self.value();
            if axis >= x.ndim() || x.shape()[axis] == 0 {
                return Err(Error::shape("max_axis", x.shape(), &[axis]));
            }
            let (outer, dim, inner) = axis_split(x.shape(), axis);
            let d = x.data();
            let mut out = vec![f64::NEG_INFINITY; outer * inner];
            let mut argmax = vec![0usize; outer * inner];
            for o in 0..outer {
                for j in 0..dim {
                    for i in 0..inner {
                        let v = d[(o * dim + j) * inner + i];
                        if v > out[o * inner + i] {
                            out[o * inner + i] = v;
                            argmax[o * inner + i] = j;
                        }
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            (Tensor::new(shape, out).unwrap(), argmax, outer, dim, inner)
        };
        Ok(self.push(
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let g = ctx.grad.data();
                let mut gx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = argmax[o * inner + i];
                        gx[(o * dim + j) * inner + i] = g[o * inner + i];
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), gx).unwrap())]
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<TapeTensor<'t>> {
        let value = self.value().clone().reshape(shape)?;
        Ok(self.push(
            value,
            &[self.id],
            Box::new(|ctx: &BackwardCtx<'_>| {
                vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape()).unwrap())]
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<TapeTensor<'t>> {
        let value = {
            let x = self.value();
            if x.ndim() < 2 {
                return Err(Error::shape("transpose", x.shape(), &[]));
            }
            x.transpose_last2()
        };
        Ok(self.push(
            value,
            &[self.id],
            Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.transpose_last2())]),
        ))
    }

    /// Reverses the order of entries along `axis`.
    pub fn reverse(self, axis: usize) -> Result<TapeTensor<'t>> {
        let (value, split) = {
            let x = self.value();
            if axis >= x.ndim() {
                return Err(Error::shape("reverse", x.shape(), &[axis]));
            }
            let split = axis_split(x.shape(), axis);
            (
                Tensor::new(x.shape(), reverse_along(x.data(), split)).unwrap(),
                split,
            )
        };
        Ok(self.push(
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                vec![Some(
                    Tensor::new(ctx.grad.shape(), reverse_along(ctx.grad.data(), split)).unwrap(),
                )]
            }),
        ))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<TapeTensor<'t>> {
        let (value, outer, dim, inner) = {
            let x = self.value();
            if axis >= x.ndim() || start > end || end > x.shape()[axis] {
                return Err(Error::shape("slice", x.shape(), &[axis, start, end]));
            }
            let (outer, dim, inner) = axis_split(x.shape(), axis);
            let w = end - start;
            let mut out = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                out.extend_from_slice(&x.data()[base..base + w * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = w;
            (Tensor::new(shape, out).unwrap(), outer, dim, inner)
        };
        Ok(self.push(
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let w = end - start;
                let g = ctx.grad.data();
                let mut gx = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    gx[base..base + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), gx).unwrap())]
            }),
        ))
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[TapeTensor<'t>], axis: usize) -> Result<TapeTensor<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (value, widths, outer, inner) = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(Error::shape("concat", &base, &[axis]));
            }
            let mut widths = Vec::with_capacity(vals.len());
            for v in &vals {
                let s = v.shape();
                let ok = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(Error::shape("concat", &base, s));
                }
                widths.push(s[axis]);
            }
            let (outer, _, inner) = axis_split(&base, axis);
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for (v, &w) in vals.iter().zip(&widths) {
                    out.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            (Tensor::new(shape, out).unwrap(), widths, outer, inner)
        };
        let ids: Vec<_> = parts.iter().map(|p| p.id).collect();
        Ok(first.push(
            value,
            &ids,
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let total: usize = widths.iter().sum();
                let g = ctx.grad.data();
                let mut outs: Vec<Vec<f64>> = widths
                    .iter()
                    .map(|w| Vec::with_capacity(outer * w * inner))
                    .collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (dst, &w) in outs.iter_mut().zip(&widths) {
                        dst.extend_from_slice(&g[off..off + w * inner]);
                        off += w * inner;
                    }
                }
                outs.into_iter()
                    .zip(&ctx.inputs)
                    .map(|(d, x)| Some(Tensor::new(x.shape(), d).unwrap()))
                    .collect()
            }),
        ))
    }

    /// Selects rows of a `[rows, width]` table, producing `[ids.len(), width]`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<TapeTensor<'t>> {
        let ids = ids.to_vec();
        let value = {
            let t = self.value();
            if t.ndim() != 2 {
                return Err(Error::shape("gather_rows", t.shape(), &[]));
            }
            let rows = t.shape()[0];
            if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
                return Err(Error::shape("gather_rows", t.shape(), &[bad]));
            }
            let w = t.shape()[1];
            let mut out = Vec::with_capacity(ids.len() * w);
            for &i in &ids {
                out.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![ids.len(), w], out).unwrap()
        };
        Ok(self.push(
            value,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let t = ctx.inputs[0];
                let w = t.shape()[1];
                let mut gt = vec![0.0; t.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for (acc, g) in gt[i * w..(i + 1) * w].iter_mut().zip(ctx.grad.row(r)) {
                        *acc += g;
                    }
                }
                vec![Some(Tensor::new(t.shape(), gt).unwrap())]
            }),
        ))
    }
}

fn reverse_along(data: &[f64], (outer, dim, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for o in 0..outer {
        for j in (0..dim).rev() {
            let base = (o * dim + j) * inner;
            out.extend_from_slice(&data[base..base + inner]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn matmul_identity_and_hand_arithmetic() {
        let tape = Tape::new();
        let id = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = tape.constant(Tensor::from_rows(&[vec![1.5, -2.0], vec![3.25, 7.0]]).unwrap());
        assert_eq!(id.matmul(m).unwrap().to_tensor(), m.to_tensor());
        assert_eq!(m.matmul(id).unwrap().to_tensor(), m.to_tensor());

        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        assert_eq!(a.matmul(b).unwrap().to_tensor().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn broadcast_general_map() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 1, 3], (0..6).map(f64::from).collect()).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap());
        let c = a.add(b).unwrap();
        assert_eq!(c.shape(), vec![2, 2, 3]);
        assert_eq!(c.value().get(&[1, 1, 2]), 5.0 + 20.0);
        let g = tape.backward(c.sum()).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[2.0; 6]);
        assert_eq!(g.wrt(b).unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn incompatible_broadcast_is_an_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(a.add(b).is_err());
    }

    #[test]
    fn division_by_zero_is_counted_not_fatal() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let b = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let c = a.div(b).unwrap();
        assert!(c.value().data()[0].is_infinite());
        assert!(c.value().data()[1].is_nan());
        assert_eq!(tape.nan_events(), 1);
    }

    #[test]
    fn slice_concat_reverse_roundtrip() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 5], (0..10).map(f64::from).collect()).unwrap());
        let left = x.slice(1, 0, 2).unwrap();
        let right = x.slice(1, 2, 5).unwrap();
        let joined = TapeTensor::concat(&[left, right], 1).unwrap();
        assert_eq!(joined.to_tensor(), x.to_tensor());
        let r = x.reverse(1).unwrap();
        assert_eq!(r.value().row(0), &[4.0, 3.0, 2.0, 1.0, 0.0]);
        assert_eq!(r.reverse(1).unwrap().to_tensor(), x.to_tensor());
    }

    #[test]
    fn unary_values() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(z.silu().item(), 0.0);
        assert!((z.softplus().item() - 0.693_147_180_559_945_3).abs() < 1e-15);
        assert_eq!(z.sigmoid().item(), 0.5);
        let big = tape.constant(Tensor::scalar(40.0));
        assert!((big.softplus().item() - 40.0).abs() < 1e-12);
    }
}
