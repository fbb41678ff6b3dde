//! 2D convolution via im2col.
//!
//! Inputs are (batch, c_in, h, w); weights are (c_out, c_in, kh, kw). The
//! forward pass unrolls every receptive field into a row of a patch matrix
//! and reduces the convolution to one matrix product; backward scatters the
//! patch-matrix gradient back with col2im.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{column_sums, Mode};

/// Output spatial size of a convolution: floor((dim + 2·pad - kernel)/stride) + 1.
/// Errors when the kernel (after padding) does not fit at least once.
pub fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Domain("conv stride must be positive".into()));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::Domain("conv kernel dims must be positive".into()));
    }
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    if hp < kh || wp < kw {
        return Err(Error::Domain(format!(
            "conv kernel {kh}x{kw} does not fit padded input {hp}x{wp}"
        )));
    }
    Ok(((hp - kh) / stride + 1, (wp - kw) / stride + 1))
}

/// Unroll (b, c_in, h, w) into a patch matrix of shape
/// (b·oh·ow, c_in·kh·kw); out-of-bounds taps read as zero.
pub(crate) fn im2col(
    x: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, usize, usize)> {
    let (b, c_in, h, w) = x.dims4()?;
    let (oh, ow) = conv_output_hw(h, w, kh, kw, stride, pad)?;
    let cols = c_in * kh * kw;
    let mut out = Tensor::zeros(&[b * oh * ow, cols]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * cols;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let col = (ci * kh + ky) * kw + kx;
                            od[row + col] =
                                xd[((bi * c_in + ci) * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok((out, oh, ow))
}

/// Scatter-add a patch-matrix gradient back to input shape (b, c_in, h, w).
/// Overlapping receptive fields accumulate.
pub(crate) fn col2im(
    cols_grad: &Tensor,
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (oh, ow) = conv_output_hw(h, w, kh, kw, stride, pad)?;
    let cols = c_in * kh * kw;
    assert_eq!(cols_grad.shape(), &[b * oh * ow, cols], "col2im shape mismatch");
    let mut out = Tensor::zeros(&[b, c_in, h, w]);
    let gd = cols_grad.data();
    let od = out.data_mut();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * cols;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let col = (ci * kh + ky) * kw + kx;
                            od[((bi * c_in + ci) * h + iy as usize) * w + ix as usize] +=
                                gd[row + col];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (c_out, c_in, kh, kw)
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
    pub grad_weight: Tensor,
    pub grad_bias: Option<Tensor>,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Tensor,
    input_shape: [usize; 4],
    oh: usize,
    ow: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Result<Conv2d> {
        let (c_out, _, _, _) = weight.dims4()?;
        if let Some(b) = &bias {
            if b.shape() != [c_out] {
                return Err(Error::Shape {
                    op: "conv2d bias",
                    lhs: b.shape().to_vec(),
                    rhs: vec![c_out],
                });
            }
        }
        let gw = Tensor::zeros(weight.shape());
        let grad_bias = bias.as_ref().map(|b| Tensor::zeros(b.shape()));
        Ok(Conv2d { weight, bias, stride, pad, grad_weight: gw, grad_bias, cache: None })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Shared patch-matrix product: cols (b·oh·ow, cin·kh·kw) times the
    /// kernel viewed as (c_out, cin·kh·kw), then reorder to (b, c_out, oh, ow).
    fn apply_kernel(
        &self,
        cols: &Tensor,
        weight: &Tensor,
        b: usize,
        oh: usize,
        ow: usize,
    ) -> Result<Tensor> {
        let c_out = weight.shape()[0];
        let k: usize = weight.shape()[1..].iter().product();
        let w2 = weight.reshaped(&[c_out, k])?;
        let y = cols.matmul_nt(&w2)?; // (b·oh·ow, c_out)
        let mut out = Tensor::zeros(&[b, c_out, oh, ow]);
        let yd = y.data();
        let od = out.data_mut();
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * c_out;
                    for co in 0..c_out {
                        od[((bi * c_out + co) * oh + oy) * ow + ox] = yd[row + co];
                    }
                }
            }
        }
        if let Some(bias) = &self.bias {
            let bd = bias.data();
            let od = out.data_mut();
            for bi in 0..b {
                for co in 0..c_out {
                    let base = (bi * c_out + co) * oh * ow;
                    for s in 0..oh * ow {
                        od[base + s] += bd[co];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, c_in, h, w) = x.dims4()?;
        if c_in != self.weight.shape()[1] {
            return Err(Error::Shape {
                op: "conv2d channels",
                lhs: x.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let (kh, kw) = (self.weight.shape()[2], self.weight.shape()[3]);
        let (cols, oh, ow) = im2col(x, kh, kw, self.stride, self.pad)?;
        let weight = self.weight.clone();
        let out = self.apply_kernel(&cols, &weight, b, oh, ow)?;
        if mode == Mode::Train {
            self.cache = Some(ConvCache { cols, input_shape: [b, c_in, h, w], oh, ow });
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("conv2d backward before train forward".into()))?;
        let [b, c_in, h, w] = cache.input_shape;
        let c_out = self.out_channels();
        let (oh, ow) = (cache.oh, cache.ow);
        if grad.shape() != [b, c_out, oh, ow] {
            return Err(Error::Shape {
                op: "conv2d backward",
                lhs: grad.shape().to_vec(),
                rhs: vec![b, c_out, oh, ow],
            });
        }
        // Reorder grad to the patch-row layout (b·oh·ow, c_out).
        let mut g2 = Tensor::zeros(&[b * oh * ow, c_out]);
        {
            let gd = grad.data();
            let g2d = g2.data_mut();
            for bi in 0..b {
                for co in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            g2d[((bi * oh + oy) * ow + ox) * c_out + co] =
                                gd[((bi * c_out + co) * oh + oy) * ow + ox];
                        }
                    }
                }
            }
        }
        let (kh, kw) = (self.weight.shape()[2], self.weight.shape()[3]);
        let k = c_in * kh * kw;
        // dW (c_out, k) = g2ᵀ · cols
        let gw = g2.matmul_tn(&cache.cols)?;
        self.grad_weight = gw.reshaped(&[c_out, c_in, kh, kw])?;
        if self.grad_bias.is_some() {
            self.grad_bias = Some(column_sums(&g2)?);
        }
        // dcols = g2 · W(c_out, k)
        let w2 = self.weight.reshaped(&[c_out, k])?;
        let dcols = g2.matmul(&w2)?;
        col2im(&dcols, b, c_in, h, w, kh, kw, self.stride, self.pad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formula() {
        assert_eq!(conv_output_hw(28, 28, 5, 5, 1, 0).unwrap(), (24, 24));
        assert_eq!(conv_output_hw(28, 28, 5, 5, 1, 2).unwrap(), (28, 28));
        assert_eq!(conv_output_hw(5, 5, 3, 3, 2, 0).unwrap(), (2, 2));
        assert!(conv_output_hw(2, 2, 3, 3, 1, 0).is_err());
        assert!(conv_output_hw(5, 5, 3, 3, 0, 0).is_err());
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        // 1x1 kernel with weight 1: convolution is the identity map.
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let mut conv = Conv2d::new(w, None, 1, 0).unwrap();
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn known_3x3_sum_kernel() {
        // All-ones 2x2 kernel over a 3x3 input sums each window.
        let w = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let mut conv = Conv2d::new(w, Some(Tensor::from_vec(&[1], vec![10.0]).unwrap()), 1, 0)
            .unwrap();
        let x = Tensor::from_vec(
            &[1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let y = conv.forward(&x, Mode::Eval).unwrap();
        // windows: 1+2+4+5, 2+3+5+6, 4+5+7+8, 5+6+8+9, plus bias 10
        assert_eq!(y.data(), &[22.0, 26.0, 34.0, 38.0]);
    }

    #[test]
    fn padding_reads_zeros() {
        let w = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let mut conv = Conv2d::new(w, None, 1, 1).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![7.0]).unwrap();
        let y = conv.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn im2col_col2im_round_trip_counts_overlaps() {
        // col2im(im2col(x) of ones-pattern) puts each pixel's coverage count
        // at its location; centre pixel of 3x3 with 2x2 kernel is hit 4 times.
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let (cols, oh, ow) = im2col(&x, 2, 2, 1, 0).unwrap();
        assert_eq!((oh, ow), (2, 2));
        let back = col2im(&cols, 1, 1, 3, 3, 2, 2, 1, 0).unwrap();
        assert_eq!(
            back.data(),
            &[1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]
        );
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = crate::rng::Rng::new(77);
        let w = Tensor::from_vec(&[2, 3, 3, 3], (0..54).map(|_| rng.uniform(-0.5, 0.5)).collect())
            .unwrap();
        let b = Tensor::from_vec(&[2], vec![rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)])
            .unwrap();
        let x = Tensor::from_vec(
            &[2, 3, 5, 5],
            (0..150).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let c: Vec<f64> = (0..2 * 2 * 3 * 3).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let loss = |w0: &Tensor, b0: &Tensor, x0: &Tensor| {
            let mut layer = Conv2d::new(w0.clone(), Some(b0.clone()), 2, 1).unwrap();
            let y = layer.forward(x0, Mode::Eval).unwrap();
            y.data().iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut layer = Conv2d::new(w.clone(), Some(b.clone()), 2, 1).unwrap();
        let y = layer.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 2, 3, 3]);
        let gup = Tensor::from_vec(&[2, 2, 3, 3], c.clone()).unwrap();
        let gx = layer.backward(&gup).unwrap();

        let num_w = crate::gradcheck::numeric_gradient(&w, 1e-5, |t| loss(t, &b, &x));
        let num_b = crate::gradcheck::numeric_gradient(&b, 1e-5, |t| loss(&w, t, &x));
        let num_x = crate::gradcheck::numeric_gradient(&x, 1e-5, |t| loss(&w, &b, t));
        assert!(crate::gradcheck::max_rel_err(layer.grad_weight.data(), num_w.data()) < 1e-6);
        let gb = layer.grad_bias.as_ref().unwrap();
        assert!(crate::gradcheck::max_rel_err(gb.data(), num_b.data()) < 1e-6);
        assert!(crate::gradcheck::max_rel_err(gx.data(), num_x.data()) < 1e-6);
    }

    #[test]
    fn backward_without_cache_is_state_error() {
        let w = Tensor::filled(&[1, 1, 1, 1], 1.0);
        let mut conv = Conv2d::new(w, None, 1, 0).unwrap();
        let g = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(matches!(conv.backward(&g), Err(Error::State(_))));
    }
}
