//! Dense f64 tensor ops for the surrogate network: convolutions, ReLU,
//! bilinear 2x upsampling, per-cell embeddings, and an AdamW optimizer.
//!
//! Everything is written against plain `Vec<f64>` buffers with explicit
//! backward passes. All arithmetic is sequential, so a training run is
//! bit-reproducible for a fixed seed.

use rand::Rng;

/// CHW tensor of activations or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let size = self.height * self.width;
        &self.data[c * size..(c + 1) * size]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let size = self.height * self.width;
        &mut self.data[c * size..(c + 1) * size]
    }

    /// Concatenate along the channel axis.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.height, a.width), (b.height, b.width));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::from_data(a.channels + b.channels, a.height, a.width, data)
    }

    /// Split a gradient produced against a concatenation back into parts.
    pub fn split(&self, first_channels: usize) -> (Tensor, Tensor) {
        let size = self.height * self.width;
        let cut = first_channels * size;
        (
            Tensor::from_data(first_channels, self.height, self.width, self.data[..cut].to_vec()),
            Tensor::from_data(
                self.channels - first_channels,
                self.height,
                self.width,
                self.data[cut..].to_vec(),
            ),
        )
    }
}

/// A learnable value buffer with its gradient and AdamW state.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            values,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn reset_optimizer_state(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// AdamW with decoupled weight decay. Holds only the hyper-parameters
/// and the shared step counter; first/second moments live in each
/// [`Param`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    step: u64,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            step: 0,
        }
    }

    /// Advance the shared step counter; call once per optimizer step
    /// before updating the params of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one AdamW update to a param, scaling the stored gradient by
    /// `grad_scale` (used for gradient accumulation over a batch).
    pub fn update(&self, param: &mut Param, grad_scale: f64) {
        debug_assert!(self.step > 0, "begin_step must precede update");
        let bias1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..param.values.len() {
            let g = param.grad[i] * grad_scale;
            param.m[i] = ADAM_BETA1 * param.m[i] + (1.0 - ADAM_BETA1) * g;
            param.v[i] = ADAM_BETA2 * param.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = param.m[i] / bias1;
            let v_hat = param.v[i] / bias2;
            // Decoupled decay: the regularizer never passes through the
            // moment estimates.
            param.values[i] -= self.learning_rate * (m_hat / (v_hat.sqrt() + ADAM_EPS))
                + self.learning_rate * self.weight_decay * param.values[i];
        }
    }
}

/// 2D convolution with square kernel, `same`-style padding (k/2) and
/// stride 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    /// He-uniform initialization driven by the caller's RNG.
    pub fn init<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight: Vec<f64> = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; out_channels]),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        // With padding k/2 the stride-1 output matches the input and the
        // stride-2 output is ceil(input / 2).
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    #[inline]
    fn weight_at(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        let k = self.kernel;
        self.weight.values[((oc * self.in_channels + ic) * k + ky) * k + kx]
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        assert_eq!(input.channels, self.in_channels);
        let (oh, ow) = self.out_size(input.height, input.width);
        let pad = self.kernel / 2;
        let mut out = Tensor::zeros(self.out_channels, oh, ow);
        let (ih, iw) = (input.height, input.width);
        for oc in 0..self.out_channels {
            out.plane_mut(oc).fill(self.bias.values[oc]);
        }
        for oc in 0..self.out_channels {
            for ic in 0..self.in_channels {
                let in_plane = input.plane(ic);
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let w = self.weight_at(oc, ic, ky, kx);
                        if w == 0.0 {
                            continue;
                        }
                        let out_plane = out.plane_mut(oc);
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * iw..(iy as usize + 1) * iw];
                            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            let dx = kx as isize - pad as isize;
                            if self.stride == 1 {
                                let ox_start = (-dx).max(0) as usize;
                                let ox_end = ow.min((iw as isize - dx).max(0) as usize);
                                let shift = (ox_start as isize + dx) as usize;
                                let src = &in_row[shift..shift + ox_end.saturating_sub(ox_start)];
                                for (o, &s) in out_row[ox_start..ox_end].iter_mut().zip(src) {
                                    *o += w * s;
                                }
                            } else {
                                for (ox, o) in out_row.iter_mut().enumerate() {
                                    let ix = (ox * self.stride) as isize + dx;
                                    if ix >= 0 && ix < iw as isize {
                                        *o += w * in_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the gradient with
    /// respect to the input.
    pub fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Tensor {
        let (oh, ow) = self.out_size(input.height, input.width);
        assert_eq!((grad_out.height, grad_out.width), (oh, ow));
        let pad = self.kernel / 2;
        let (ih, iw) = (input.height, input.width);
        let mut grad_in = Tensor::zeros(self.in_channels, ih, iw);
        let k = self.kernel;

        for oc in 0..self.out_channels {
            let go_plane = grad_out.plane(oc);
            self.bias.grad[oc] += go_plane.iter().sum::<f64>();
            for ic in 0..self.in_channels {
                let in_plane = input.plane(ic);
                let gi_plane = grad_in.plane_mut(ic);
                for ky in 0..k {
                    for kx in 0..k {
                        let w = self.weight.values[((oc * self.in_channels + ic) * k + ky) * k + kx];
                        let mut w_grad = 0.0;
                        let dx = kx as isize - pad as isize;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let row_base = iy as usize * iw;
                            let go_row = &go_plane[oy * ow..(oy + 1) * ow];
                            if self.stride == 1 {
                                let ox_start = (-dx).max(0) as usize;
                                let ox_end = ow.min((iw as isize - dx).max(0) as usize);
                                let shift = (ox_start as isize + dx) as usize;
                                let len = ox_end.saturating_sub(ox_start);
                                let in_row = &in_plane[row_base + shift..row_base + shift + len];
                                let gi_row =
                                    &mut gi_plane[row_base + shift..row_base + shift + len];
                                for ((&g, &x), gi) in
                                    go_row[ox_start..ox_end].iter().zip(in_row).zip(gi_row)
                                {
                                    w_grad += g * x;
                                    *gi += w * g;
                                }
                            } else {
                                for (ox, &g) in go_row.iter().enumerate() {
                                    let ix = (ox * self.stride) as isize + dx;
                                    if ix >= 0 && ix < iw as isize {
                                        let idx = row_base + ix as usize;
                                        w_grad += g * in_plane[idx];
                                        gi_plane[idx] += w * g;
                                    }
                                }
                            }
                        }
                        self.weight.grad[((oc * self.in_channels + ic) * k + ky) * k + kx] +=
                            w_grad;
                    }
                }
            }
        }
        grad_in
    }
}

/// ReLU returning the activation; backward masks by positivity of the
/// stored output.
pub fn relu(input: &Tensor) -> Tensor {
    Tensor::from_data(
        input.channels,
        input.height,
        input.width,
        input.data.iter().map(|&x| x.max(0.0)).collect(),
    )
}

pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor::from_data(
        output.channels,
        output.height,
        output.width,
        output
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

/// Source taps for one upsampled output pixel.
#[inline]
fn up2_taps(o: usize, in_size: usize) -> (usize, usize, f64) {
    // Half-pixel-center mapping at scale 2: f = (o + 0.5)/2 - 0.5.
    let f = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (in_size - 1) as f64);
    let i0 = f.floor() as usize;
    let i1 = (i0 + 1).min(in_size - 1);
    (i0, i1, f - i0 as f64)
}

/// Bilinear 2x upsampling.
pub fn upsample2(input: &Tensor) -> Tensor {
    let (ih, iw) = (input.height, input.width);
    let (oh, ow) = (ih * 2, iw * 2);
    let mut out = Tensor::zeros(input.channels, oh, ow);
    for c in 0..input.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for oy in 0..oh {
            let (y0, y1, wy) = up2_taps(oy, ih);
            for ox in 0..ow {
                let (x0, x1, wx) = up2_taps(ox, iw);
                let top = src[y0 * iw + x0] * (1.0 - wx) + src[y0 * iw + x1] * wx;
                let bottom = src[y1 * iw + x0] * (1.0 - wx) + src[y1 * iw + x1] * wx;
                dst[oy * ow + ox] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

/// Transpose of [`upsample2`]: scatter output gradients back onto the
/// source taps.
pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (oh, ow) = (grad_out.height, grad_out.width);
    let (ih, iw) = (oh / 2, ow / 2);
    let mut grad_in = Tensor::zeros(grad_out.channels, ih, iw);
    for c in 0..grad_out.channels {
        let src = grad_out.plane(c);
        let dst = grad_in.plane_mut(c);
        for oy in 0..oh {
            let (y0, y1, wy) = up2_taps(oy, ih);
            for ox in 0..ow {
                let (x0, x1, wx) = up2_taps(ox, iw);
                let g = src[oy * ow + ox];
                dst[y0 * iw + x0] += g * (1.0 - wx) * (1.0 - wy);
                dst[y0 * iw + x1] += g * wx * (1.0 - wy);
                dst[y1 * iw + x0] += g * (1.0 - wx) * wy;
                dst[y1 * iw + x1] += g * wx * wy;
            }
        }
    }
    grad_in
}

/// Two learned vectors selected per cell by a boolean grid — the prompt
/// encoder's embedding of "inside the box" vs "outside".
#[derive(Debug, Clone, PartialEq)]
pub struct CellEmbedding {
    pub dim: usize,
    pub inside: Param,
    pub outside: Param,
}

impl CellEmbedding {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        let mut draw = |_: usize| rng.random_range(-bound..bound);
        Self {
            dim,
            inside: Param::new((0..dim).map(&mut draw).collect()),
            outside: Param::new((0..dim).map(&mut draw).collect()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.inside.len() + self.outside.len()
    }

    pub fn forward(&self, grid: &[bool], height: usize, width: usize) -> Tensor {
        assert_eq!(grid.len(), height * width);
        let mut out = Tensor::zeros(self.dim, height, width);
        for c in 0..self.dim {
            let inside = self.inside.values[c];
            let outside = self.outside.values[c];
            let plane = out.plane_mut(c);
            for (cell, &flag) in plane.iter_mut().zip(grid) {
                *cell = if flag { inside } else { outside };
            }
        }
        out
    }

    pub fn backward(&mut self, grid: &[bool], grad_out: &Tensor) {
        for c in 0..self.dim {
            let plane = grad_out.plane(c);
            let mut g_in = 0.0;
            let mut g_out = 0.0;
            for (&g, &flag) in plane.iter().zip(grid) {
                if flag {
                    g_in += g;
                } else {
                    g_out += g;
                }
            }
            self.inside.grad[c] += g_in;
            self.outside.grad[c] += g_out;
        }
    }
}
