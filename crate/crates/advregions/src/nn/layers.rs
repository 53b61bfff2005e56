//! Layer primitives: dense, valid-padding stride-1 convolution, max pooling,
//! ReLU. Each layer consumes and produces batch-major `[B, dim]` tensors;
//! convolutional layers interpret `dim` as `channels * height * width`.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_at, matmul_bt, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Valid padding, stride 1, square kernel.
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        in_h: usize,
        in_w: usize,
    },
    /// Non-overlapping square windows (stride = size).
    MaxPool2d {
        ch: usize,
        in_h: usize,
        in_w: usize,
        size: usize,
    },
    Relu {
        dim: usize,
    },
}

/// Per-layer state captured on the forward pass for the backward pass.
pub enum LayerAux<F: Real> {
    None,
    /// Flat within-sample input index of each pooling winner.
    PoolArgmax(Vec<u32>),
    /// im2col matrix, reused for weight and input gradients.
    Cols(Tensor<F>),
}

impl LayerSpec {
    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d { in_ch, in_h, in_w, .. } => in_ch * in_h * in_w,
            LayerSpec::MaxPool2d { ch, in_h, in_w, .. } => ch * in_h * in_w,
            LayerSpec::Relu { dim } => dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv2d { out_ch, kernel, in_h, in_w, .. } => {
                out_ch * (in_h - kernel + 1) * (in_w - kernel + 1)
            }
            LayerSpec::MaxPool2d { ch, in_h, in_w, size } => ch * (in_h / size) * (in_w / size),
            LayerSpec::Relu { dim } => dim,
        }
    }

    /// Shapes of this layer's parameter tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => {
                vec![vec![out_ch, in_ch * kernel * kernel], vec![out_ch]]
            }
            _ => vec![],
        }
    }

    /// Fan-in used for He initialization; zero for parameterless layers.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Dense { inputs, outputs } => inputs > 0 && outputs > 0,
            LayerSpec::Conv2d { in_ch, out_ch, kernel, in_h, in_w } => {
                in_ch > 0 && out_ch > 0 && kernel > 0 && in_h >= kernel && in_w >= kernel
            }
            LayerSpec::MaxPool2d { ch, in_h, in_w, size } => {
                ch > 0 && size > 0 && in_h >= size && in_w >= size
            }
            LayerSpec::Relu { dim } => dim > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("bad layer spec {self:?}")))
        }
    }

    pub fn forward<F: Real>(
        &self,
        x: &Tensor<F>,
        params: &[Tensor<F>],
        batch: usize,
    ) -> (Tensor<F>, LayerAux<F>) {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let w = &params[0];
                let b = &params[1];
                let mut y = Tensor::zeros(&[batch, outputs]);
                matmul_bt(x.data(), w.data(), y.data_mut(), batch, inputs, outputs);
                for row in y.data_mut().chunks_mut(outputs) {
                    for (v, &bias) in row.iter_mut().zip(b.data()) {
                        *v = v.add(bias);
                    }
                }
                (y, LayerAux::None)
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel, in_h, in_w } => {
                let (oh, ow) = (in_h - kernel + 1, in_w - kernel + 1);
                let positions = oh * ow;
                let kdim = in_ch * kernel * kernel;
                let cols = im2col(x.data(), batch, in_ch, in_h, in_w, kernel);
                let w = &params[0];
                let b = &params[1];
                // y_raw[(b*P+p), o] then reshuffled to [B, O*P]
                let mut y_raw = vec![F::ZERO; batch * positions * out_ch];
                matmul_bt(cols.data(), w.data(), &mut y_raw, batch * positions, kdim, out_ch);
                let mut y = Tensor::zeros(&[batch, out_ch * positions]);
                let out = y.data_mut();
                for bi in 0..batch {
                    for p in 0..positions {
                        let src = (bi * positions + p) * out_ch;
                        for o in 0..out_ch {
                            out[bi * out_ch * positions + o * positions + p] =
                                y_raw[src + o].add(b.data()[o]);
                        }
                    }
                }
                (y, LayerAux::Cols(cols))
            }
            LayerSpec::MaxPool2d { ch, in_h, in_w, size } => {
                let (oh, ow) = (in_h / size, in_w / size);
                let out_dim = ch * oh * ow;
                let mut y = Tensor::zeros(&[batch, out_dim]);
                let mut argmax = vec![0u32; batch * out_dim];
                let xs = x.data();
                let ys = y.data_mut();
                for bi in 0..batch {
                    let x_base = bi * ch * in_h * in_w;
                    let y_base = bi * out_dim;
                    for c in 0..ch {
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let mut best = F::from_f64(f64::NEG_INFINITY);
                                let mut best_idx = 0u32;
                                for di in 0..size {
                                    for dj in 0..size {
                                        let idx =
                                            c * in_h * in_w + (oi * size + di) * in_w + oj * size + dj;
                                        let v = xs[x_base + idx];
                                        if v > best {
                                            best = v;
                                            best_idx = idx as u32;
                                        }
                                    }
                                }
                                let o = c * oh * ow + oi * ow + oj;
                                ys[y_base + o] = best;
                                argmax[y_base + o] = best_idx;
                            }
                        }
                    }
                }
                (y, LayerAux::PoolArgmax(argmax))
            }
            LayerSpec::Relu { dim } => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    *v = v.max(F::ZERO);
                }
                let _ = dim;
                (y, LayerAux::None)
            }
        }
    }

    /// Returns (d_input, param gradients). `x` is this layer's forward input.
    pub fn backward<F: Real>(
        &self,
        dy: &Tensor<F>,
        x: &Tensor<F>,
        params: &[Tensor<F>],
        aux: &LayerAux<F>,
        batch: usize,
    ) -> (Tensor<F>, Vec<Tensor<F>>) {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let w = &params[0];
                let mut dx = Tensor::zeros(&[batch, inputs]);
                matmul(dy.data(), w.data(), dx.data_mut(), batch, outputs, inputs);
                let mut dw = Tensor::zeros(&[outputs, inputs]);
                matmul_at(dy.data(), x.data(), dw.data_mut(), outputs, batch, inputs);
                let mut db = Tensor::<F>::zeros(&[outputs]);
                for row in dy.data().chunks(outputs) {
                    for (g, &v) in db.data_mut().iter_mut().zip(row) {
                        *g = g.add(v);
                    }
                }
                (dx, vec![dw, db])
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel, in_h, in_w } => {
                let (oh, ow) = (in_h - kernel + 1, in_w - kernel + 1);
                let positions = oh * ow;
                let kdim = in_ch * kernel * kernel;
                let cols = match aux {
                    LayerAux::Cols(c) => c,
                    _ => unreachable!("conv backward without cols"),
                };
                // Undo the forward reshuffle: dy_raw[(b*P+p), o] = dy[b, o*P+p]
                let mut dy_raw = vec![F::ZERO; batch * positions * out_ch];
                let dys = dy.data();
                for bi in 0..batch {
                    for o in 0..out_ch {
                        for p in 0..positions {
                            dy_raw[(bi * positions + p) * out_ch + o] =
                                dys[bi * out_ch * positions + o * positions + p];
                        }
                    }
                }
                let mut dw = Tensor::zeros(&[out_ch, kdim]);
                matmul_at(&dy_raw, cols.data(), dw.data_mut(), out_ch, batch * positions, kdim);
                let mut db = Tensor::<F>::zeros(&[out_ch]);
                for row in dy_raw.chunks(out_ch) {
                    for (g, &v) in db.data_mut().iter_mut().zip(row) {
                        *g = g.add(v);
                    }
                }
                let w = &params[0];
                let mut dcols = vec![F::ZERO; batch * positions * kdim];
                matmul(&dy_raw, w.data(), &mut dcols, batch * positions, out_ch, kdim);
                let dx = col2im(&dcols, batch, in_ch, in_h, in_w, kernel);
                (dx, vec![dw, db])
            }
            LayerSpec::MaxPool2d { ch, in_h, in_w, size } => {
                let (oh, ow) = (in_h / size, in_w / size);
                let out_dim = ch * oh * ow;
                let argmax = match aux {
                    LayerAux::PoolArgmax(a) => a,
                    _ => unreachable!("pool backward without argmax"),
                };
                let mut dx = Tensor::zeros(&[batch, ch * in_h * in_w]);
                let dxs: &mut [F] = dx.data_mut();
                for bi in 0..batch {
                    for o in 0..out_dim {
                        let src = argmax[bi * out_dim + o] as usize;
                        let d = dy.data()[bi * out_dim + o];
                        let slot = &mut dxs[bi * ch * in_h * in_w + src];
                        *slot = slot.add(d);
                    }
                }
                (dx, vec![])
            }
            LayerSpec::Relu { .. } => {
                let mut dx = dy.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= F::ZERO {
                        *g = F::ZERO;
                    }
                }
                (dx, vec![])
            }
        }
    }
}

/// Unfold `[B, C, H, W]` into `[B*oh*ow, C*k*k]` rows for valid stride-1
/// convolution.
fn im2col<F: Real>(x: &[F], batch: usize, ch: usize, h: usize, w: usize, k: usize) -> Tensor<F> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let positions = oh * ow;
    let kdim = ch * k * k;
    let mut cols = Tensor::zeros(&[batch * positions, kdim]);
    let out = cols.data_mut();
    for bi in 0..batch {
        let x_base = bi * ch * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let row = (bi * positions + oi * ow + oj) * kdim;
                for c in 0..ch {
                    for di in 0..k {
                        let src = x_base + c * h * w + (oi + di) * w + oj;
                        let dst = row + c * k * k + di * k;
                        out[dst..dst + k].copy_from_slice(&x[src..src + k]);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the column gradient back to input layout.
fn col2im<F: Real>(
    dcols: &[F],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Tensor<F> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let positions = oh * ow;
    let kdim = ch * k * k;
    let mut dx = Tensor::<F>::zeros(&[batch, ch * h * w]);
    let out: &mut [F] = dx.data_mut();
    for bi in 0..batch {
        let x_base = bi * ch * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let row = (bi * positions + oi * ow + oj) * kdim;
                for c in 0..ch {
                    for di in 0..k {
                        let dst = x_base + c * h * w + (oi + di) * w + oj;
                        let src = row + c * k * k + di * k;
                        for dj in 0..k {
                            out[dst + dj] = out[dst + dj].add(dcols[src + dj]);
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_forward_is_affine() {
        let spec = LayerSpec::Dense { inputs: 2, outputs: 2 };
        let w = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]).unwrap();
        let (y, _) = spec.forward(&x, &[w, b], 1);
        assert_eq!(y.data(), &[2.5, 2.5]);
    }

    #[test]
    fn maxpool_picks_window_max_and_routes_gradient() {
        let spec = LayerSpec::MaxPool2d { ch: 1, in_h: 2, in_w: 2, size: 2 };
        let x = Tensor::from_vec(&[1, 4], vec![0.1f64, 0.9, 0.3, 0.2]).unwrap();
        let (y, aux) = spec.forward(&x, &[], 1);
        assert_eq!(y.data(), &[0.9]);
        let dy = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        let (dx, _) = spec.backward(&dy, &x, &[], &aux, 1);
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_matches_hand_computation() {
        // 1 channel 3x3 input, 2x2 kernel of ones, bias 0.1:
        // each output = window sum + 0.1
        let spec = LayerSpec::Conv2d { in_ch: 1, out_ch: 1, kernel: 2, in_h: 3, in_w: 3 };
        let w = Tensor::from_vec(&[1, 4], vec![1.0f64; 4]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.1]).unwrap();
        let x = Tensor::from_vec(&[1, 9], (1..=9).map(|v| v as f64).collect()).unwrap();
        let (y, _) = spec.forward(&x, &[w, b], 1);
        // windows: (1+2+4+5)=12, (2+3+5+6)=16, (4+5+7+8)=24, (5+6+8+9)=28
        assert_eq!(y.data(), &[12.1, 16.1, 24.1, 28.1]);
    }

    #[test]
    fn conv_input_gradient_is_correlation_with_kernel() {
        let spec = LayerSpec::Conv2d { in_ch: 1, out_ch: 1, kernel: 2, in_h: 2, in_w: 2 };
        let w = Tensor::from_vec(&[1, 4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (_, aux) = spec.forward(&x, &[w.clone(), b.clone()], 1);
        let dy = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let (dx, grads) = spec.backward(&dy, &x, &[w, b], &aux, 1);
        assert_eq!(dx.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(grads[0].data(), &[1.0, 1.0, 1.0, 1.0]); // dW = x window
        assert_eq!(grads[1].data(), &[1.0]);
    }
}
