//! Branch-decomposed convolution with stochastic channel masking.
//!
//! The kernel tensor is held as N branches of identical shape. In Train mode
//! each (example, output channel, branch) triple draws one keep/drop mask and
//! that mask scales the branch's entire spatial map for the channel; the bias
//! is shared and unmasked. Eval folds the branches by keep probability into a
//! single kernel, exactly like the linear variant.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::conv::{col2im, conv_output_hw, im2col};
use super::{column_sums, MaskBatch};

#[derive(Debug, Clone)]
pub struct SbConv2d {
    /// N kernels, each (c_out, c_in, kh, kw).
    pub branches: Vec<Tensor>,
    pub keep_probs: Vec<f64>,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
    pub grad_branches: Vec<Tensor>,
    pub grad_bias: Option<Tensor>,
    /// Masks drawn by the most recent train forward, shape (batch, c_out, N).
    pub last_masks: Option<MaskBatch>,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    cols: Tensor,
    input_shape: [usize; 4],
    oh: usize,
    ow: usize,
}

impl SbConv2d {
    pub fn new(
        branches: Vec<Tensor>,
        keep_probs: Vec<f64>,
        bias: Option<Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<SbConv2d> {
        if branches.is_empty() {
            return Err(Error::Constraint("branch list must be non-empty".into()));
        }
        if branches.len() != keep_probs.len() {
            return Err(Error::Constraint(format!(
                "{} branches but {} keep probabilities",
                branches.len(),
                keep_probs.len()
            )));
        }
        let (c_out, _, _, _) = branches[0].dims4()?;
        let shape = branches[0].shape().to_vec();
        for b in &branches[1..] {
            if b.shape() != shape {
                return Err(Error::Shape {
                    op: "sb_conv2d branch",
                    lhs: b.shape().to_vec(),
                    rhs: shape,
                });
            }
        }
        for &p in &keep_probs {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Domain(format!("keep probability {p} outside (0, 1]")));
            }
        }
        if let Some(b) = &bias {
            if b.shape() != [c_out] {
                return Err(Error::Shape {
                    op: "sb_conv2d bias",
                    lhs: b.shape().to_vec(),
                    rhs: vec![c_out],
                });
            }
        }
        let grad_branches = branches.iter().map(|b| Tensor::zeros(b.shape())).collect();
        let grad_bias = bias.as_ref().map(|b| Tensor::zeros(b.shape()));
        Ok(SbConv2d {
            branches,
            keep_probs,
            bias,
            stride,
            pad,
            grad_branches,
            grad_bias,
            last_masks: None,
            cache: None,
        })
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn out_channels(&self) -> usize {
        self.branches[0].shape()[0]
    }

    fn kernel_hw(&self) -> (usize, usize) {
        (self.branches[0].shape()[2], self.branches[0].shape()[3])
    }

    /// One mask per (example, output channel, branch), row-major in that order.
    pub fn sample_masks(&self, rng: &mut Rng, batch: usize) -> MaskBatch {
        let (c_out, n) = (self.out_channels(), self.n_branches());
        let mut values = Tensor::zeros(&[batch, c_out, n]);
        let data = values.data_mut();
        let mut idx = 0;
        for _ in 0..batch {
            for _ in 0..c_out {
                for k in 0..n {
                    data[idx] = if rng.next_f64() < self.keep_probs[k] { 1.0 } else { 0.0 };
                    idx += 1;
                }
            }
        }
        MaskBatch { values }
    }

    pub fn forward_train(&mut self, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let batch = x.dims4()?.0;
        let masks = self.sample_masks(rng, batch);
        self.forward_train_with_masks(x, masks)
    }

    pub fn forward_train_with_masks(&mut self, x: &Tensor, masks: MaskBatch) -> Result<Tensor> {
        let (b, c_in, h, w) = x.dims4()?;
        if c_in != self.branches[0].shape()[1] {
            return Err(Error::Shape {
                op: "sb_conv2d channels",
                lhs: x.shape().to_vec(),
                rhs: self.branches[0].shape().to_vec(),
            });
        }
        let (c_out, n) = (self.out_channels(), self.n_branches());
        if masks.values.shape() != [b, c_out, n] {
            return Err(Error::Shape {
                op: "sb_conv2d masks",
                lhs: masks.values.shape().to_vec(),
                rhs: vec![b, c_out, n],
            });
        }
        if masks.values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("mask values must be exactly 0 or 1".into()));
        }
        let (kh, kw) = self.kernel_hw();
        let (cols, oh, ow) = im2col(x, kh, kw, self.stride, self.pad)?;
        let kdim = c_in * kh * kw;

        // Accumulate masked branch outputs in patch-row layout (b·oh·ow, c_out).
        let mut z2 = Tensor::zeros(&[b * oh * ow, c_out]);
        for (k, wt) in self.branches.iter().enumerate() {
            let w2 = wt.reshaped(&[c_out, kdim])?;
            let yk = cols.matmul_nt(&w2)?;
            let zd = z2.data_mut();
            let yd = yk.data();
            let md = masks.values.data();
            for bi in 0..b {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = ((bi * oh + oy) * ow + ox) * c_out;
                        for co in 0..c_out {
                            zd[row + co] += md[(bi * c_out + co) * n + k] * yd[row + co];
                        }
                    }
                }
            }
        }

        let mut out = Tensor::zeros(&[b, c_out, oh, ow]);
        {
            let od = out.data_mut();
            let zd = z2.data();
            for bi in 0..b {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = ((bi * oh + oy) * ow + ox) * c_out;
                        for co in 0..c_out {
                            od[((bi * c_out + co) * oh + oy) * ow + ox] = zd[row + co];
                        }
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
        self.cache = Some(Cache { cols, input_shape: [b, c_in, h, w], oh, ow });
        self.last_masks = Some(masks);
        Ok(out)
    }

    pub fn collapsed_weight(&self) -> Tensor {
        let mut acc = Tensor::zeros(self.branches[0].shape());
        for (w, &p) in self.branches.iter().zip(&self.keep_probs) {
            let ad = acc.data_mut();
            for (a, &v) in ad.iter_mut().zip(w.data()) {
                *a += p * v;
            }
        }
        acc
    }

    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let folded = self.collapsed_weight();
        let mut plain = super::Conv2d::new(folded, self.bias.clone(), self.stride, self.pad)?;
        plain.forward(x, super::Mode::Eval)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("sb_conv2d backward before train forward".into()))?;
        let masks = self
            .last_masks
            .as_ref()
            .ok_or_else(|| Error::State("sb_conv2d backward without masks".into()))?;
        let [b, c_in, h, w] = cache.input_shape;
        let (c_out, n) = (self.out_channels(), self.n_branches());
        let (oh, ow) = (cache.oh, cache.ow);
        if grad.shape() != [b, c_out, oh, ow] {
            return Err(Error::Shape {
                op: "sb_conv2d backward",
                lhs: grad.shape().to_vec(),
                rhs: vec![b, c_out, oh, ow],
            });
        }
        // Patch-row layout of the upstream gradient.
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
        let (kh, kw) = self.kernel_hw();
        let kdim = c_in * kh * kw;
        let mut dcols = Tensor::zeros(&[b * oh * ow, kdim]);
        for k in 0..n {
            let mut gk = Tensor::zeros(&[b * oh * ow, c_out]);
            {
                let gkd = gk.data_mut();
                let gd = g2.data();
                let md = masks.values.data();
                for bi in 0..b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let row = ((bi * oh + oy) * ow + ox) * c_out;
                            for co in 0..c_out {
                                gkd[row + co] =
                                    md[(bi * c_out + co) * n + k] * gd[row + co];
                            }
                        }
                    }
                }
            }
            let gw = gk.matmul_tn(&cache.cols)?;
            self.grad_branches[k] = gw.reshaped(self.branches[k].shape())?;
            let w2 = self.branches[k].reshaped(&[c_out, kdim])?;
            dcols = dcols.add(&gk.matmul(&w2)?)?;
        }
        if self.grad_bias.is_some() {
            self.grad_bias = Some(column_sums(&g2)?);
        }
        col2im(&dcols, b, c_in, h, w, kh, kw, self.stride, self.pad)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_hw();
        conv_output_hw(h, w, kh, kw, self.stride, self.pad)
    }
}
