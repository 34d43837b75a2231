use super::{BackwardCtx, TapeTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl<'t> TapeTensor<'t> {
    /// Depthwise causal convolution over the last axis.
    ///
    /// `self` is `[.., C, T]`, `kernel` is `[C, width]`, `bias` is `[C]`.
    /// Inputs are left-padded with `width - 1` zeros so the output keeps
    /// length `T`; the last tap multiplies the current position.
    pub fn causal_conv1d(
        self,
        kernel: TapeTensor<'t>,
        bias: Option<TapeTensor<'t>>,
    ) -> Result<TapeTensor<'t>> {
        let (value, rows, channels, len, width) = {
            let x = self.value();
            let k = kernel.value();
            let (sx, sk) = (x.shape(), k.shape());
            if sx.len() < 2 || sk.len() != 2 || sk[0] != sx[sx.len() - 2] {
                return Err(Error::shape("causal_conv1d", sx, sk));
            }
            let (channels, width) = (sk[0], sk[1]);
            if width == 0 {
                return Err(Error::Parameter("causal_conv1d width must be >= 1".into()));
            }
            let len = sx[sx.len() - 1];
            let rows = x.numel() / (channels * len).max(1);
            let bias_vals = match bias {
                Some(b) => {
                    let b = b.value();
                    if b.shape() != [channels] {
                        return Err(Error::shape("causal_conv1d bias", b.shape(), &[channels]));
                    }
                    b.data().to_vec()
                }
                None => vec![0.0; channels],
            };
            let xd = x.data();
            let kd = k.data();
            let mut out = vec![0.0; x.numel()];
            for r in 0..rows {
                for c in 0..channels {
                    let base = (r * channels + c) * len;
                    let taps = &kd[c * width..(c + 1) * width];
                    for t in 0..len {
                        let mut acc = bias_vals[c];
                        for (j, &w) in taps.iter().enumerate() {
                            // input index t - (width - 1) + j
                            if let Some(src) = (t + j).checked_sub(width - 1) {
                                acc += w * xd[base + src];
                            }
                        }
                        out[base + t] = acc;
                    }
                }
            }
            (Tensor::new(sx, out).unwrap(), rows, channels, len, width)
        };
        let has_bias = bias.is_some();
        let mut parents = vec![self.id, kernel.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        Ok(self.push(
            value,
            &parents,
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let (x, k) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad.data();
                let mut gx = vec![0.0; x.len()];
                let mut gk = vec![0.0; k.len()];
                let mut gb = vec![0.0; channels];
                for r in 0..rows {
                    for c in 0..channels {
                        let base = (r * channels + c) * len;
                        for t in 0..len {
                            let gt = g[base + t];
                            gb[c] += gt;
                            for j in 0..width {
                                if let Some(src) = (t + j).checked_sub(width - 1) {
                                    gk[c * width + j] += gt * x[base + src];
                                    gx[base + src] += gt * k[c * width + j];
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![
                    Some(Tensor::new(ctx.inputs[0].shape(), gx).unwrap()),
                    Some(Tensor::new(ctx.inputs[1].shape(), gk).unwrap()),
                ];
                if has_bias {
                    grads.push(Some(Tensor::from_vec(gb)));
                }
                grads
            }),
        ))
    }

    /// Normalises every row of the last axis to zero mean and unit variance,
    /// then applies `gain` and `bias` (both `[last_dim]`).
    pub fn layer_norm(
        self,
        gain: TapeTensor<'t>,
        bias: TapeTensor<'t>,
        eps: f64,
    ) -> Result<TapeTensor<'t>> {
        let (value, normed, inv_std) = {
            let x = self.value();
            let (g, b) = (gain.value(), bias.value());
            let width = x.last_dim();
            if width == 0 || g.shape() != [width] || b.shape() != [width] {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let rows = x.numel() / width;
            let mut normed = vec![0.0; x.numel()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; x.numel()];
            for r in 0..rows {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / width as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..width {
                    let n = (row[j] - mean) * is;
                    normed[r * width + j] = n;
                    out[r * width + j] = n * g.data()[j] + b.data()[j];
                }
            }
            (Tensor::new(x.shape(), out).unwrap(), normed, inv_std)
        };
        Ok(self.push(
            value,
            &[self.id, gain.id, bias.id],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let gain = ctx.inputs[1].data();
                let width = gain.len();
                let g = ctx.grad.data();
                let rows = g.len() / width;
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; width];
                let mut gb = vec![0.0; width];
                let mut dn = vec![0.0; width];
                for r in 0..rows {
                    let (mut mean_dn, mut mean_dn_n) = (0.0, 0.0);
                    for j in 0..width {
                        let gi = g[r * width + j];
                        let n = normed[r * width + j];
                        gg[j] += gi * n;
                        gb[j] += gi;
                        dn[j] = gi * gain[j];
                        mean_dn += dn[j];
                        mean_dn_n += dn[j] * n;
                    }
                    mean_dn /= width as f64;
                    mean_dn_n /= width as f64;
                    for j in 0..width {
                        let n = normed[r * width + j];
                        gx[r * width + j] = inv_std[r] * (dn[j] - mean_dn - n * mean_dn_n);
                    }
                }
                vec![
                    Some(Tensor::new(ctx.inputs[0].shape(), gx).unwrap()),
                    Some(Tensor::from_vec(gg)),
                    Some(Tensor::from_vec(gb)),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn identity_kernel_leaves_input_unchanged() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, -1.0, 5.0, 0.5]).unwrap());
        let k = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        assert_eq!(x.causal_conv1d(k, None).unwrap().to_tensor(), x.to_tensor());
        let shifted = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        assert_eq!(x.causal_conv1d(shifted, None).unwrap().to_tensor(), x.to_tensor());
    }

    #[test]
    fn ones_kernel_sums_pairs() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let y = x.causal_conv1d(k, None).unwrap();
        assert_eq!(y.value().data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn width_larger_than_sequence_is_fully_padded() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![1, 5], vec![1.0, 1.0, 1.0, 1.0, 1.0]).unwrap());
        assert_eq!(x.causal_conv1d(k, None).unwrap().value().data(), &[2.0, 5.0]);
        let empty = tape.constant(Tensor::zeros(&[1, 0]));
        assert!(x.causal_conv1d(empty, None).is_err());
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![3.0; 5]));
        let g = tape.constant(Tensor::ones(&[5]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = x.layer_norm(g, b, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let x = tape.constant(Tensor::from_vec(vec![1.0, -1.0]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = x.layer_norm(g, b, 0.0).unwrap();
        assert_eq!(y.value().data(), &[1.0, -1.0]);
    }
}
