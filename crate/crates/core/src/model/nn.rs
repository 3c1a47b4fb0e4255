//! Minimal CHW tensor kernels with hand-written backward passes.

use std::ops::Range;

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_planes(height: usize, width: usize, planes: &[&[f64]]) -> Self {
        let mut data = Vec::with_capacity(planes.len() * height * width);
        for p in planes {
            debug_assert_eq!(p.len(), height * width);
            data.extend_from_slice(p);
        }
        Tensor {
            channels: planes.len(),
            height,
            width,
            data,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel concatenation `[self, other]`.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: the first `channels` channels and the rest.
    pub fn split_channels(&self, channels: usize) -> (Tensor, Tensor) {
        let cut = channels * self.plane_len();
        let head = Tensor {
            channels,
            height: self.height,
            width: self.width,
            data: self.data[..cut].to_vec(),
        };
        let tail = Tensor {
            channels: self.channels - channels,
            height: self.height,
            width: self.width,
            data: self.data[cut..].to_vec(),
        };
        (head, tail)
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_tensor(x: &Tensor) -> Tensor {
    Tensor {
        data: x.data.iter().map(|&v| silu(v)).collect(),
        ..*x
    }
}

/// `dy * silu'(pre)`.
pub fn silu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        data: pre
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&x, &g)| g * silu_grad(x))
            .collect(),
        ..*pre
    }
}

/// 2x2 average pooling; height and width must be even.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = Tensor::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.plane(c);
        for oy in 0..h {
            for ox in 0..w {
                let i = 2 * oy * x.width + 2 * ox;
                out.data[(c * h + oy) * w + ox] =
                    0.25 * (src[i] + src[i + 1] + src[i + x.width] + src[i + x.width + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.height * 2, dy.width * 2);
    let mut dx = Tensor::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        for y in 0..h {
            for x in 0..w {
                dx.data[(c * h + y) * w + x] =
                    0.25 * dy.data[(c * dy.height + y / 2) * dy.width + x / 2];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = Tensor::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.data[(c * x.height + y / 2) * x.width + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = Tensor::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        for y in 0..dy.height {
            for x in 0..dy.width {
                dx.data[(c * h + y / 2) * w + x / 2] += dy.data[(c * dy.height + y) * dy.width + x];
            }
        }
    }
    dx
}

/// Sequential allocator of parameter ranges in one flat buffer.
#[derive(Debug, Default)]
pub struct ParamAllocator {
    len: usize,
    inits: Vec<(Range<usize>, f64)>,
}

impl ParamAllocator {
    fn take(&mut self, n: usize, init_bound: f64) -> Range<usize> {
        let r = self.len..self.len + n;
        self.len += n;
        self.inits.push((r.clone(), init_bound));
        r
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Uniform `[-b, b]` initialisation with each range's bound.
    pub fn initialise(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut params = vec![0.0; self.len];
        for (range, bound) in &self.inits {
            for v in &mut params[range.clone()] {
                *v = if *bound > 0.0 {
                    rng.random_range(-*bound..=*bound)
                } else {
                    0.0
                };
            }
        }
        params
    }

    pub fn conv(&mut self, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Conv2d {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Conv2d {
            weight: self.take(out_ch * in_ch * kernel * kernel, bound),
            bias: self.take(out_ch, bound),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn linear(&mut self, inputs: usize, outputs: usize, scale: f64) -> Linear {
        let bound = scale / (inputs as f64).sqrt();
        Linear {
            weight: self.take(outputs * inputs, bound),
            bias: self.take(outputs, 0.0),
            inputs,
            outputs,
        }
    }
}

/// Square convolution with `kernel / 2` zero padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (height + 2 * p - self.kernel) / self.stride + 1,
            (width + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    /// Multiply-accumulates for one application to an `height x width` input.
    pub fn macs(&self, height: usize, width: usize) -> u64 {
        let (ho, wo) = self.output_size(height, width);
        (self.out_ch * ho * wo * self.kernel * self.kernel * self.in_ch) as u64
    }

    /// Output positions `o` in `0..n_out` whose input index `o*s + k - p` is valid.
    fn valid(&self, k: usize, n_in: usize, n_out: usize) -> Range<usize> {
        let (s, p) = (self.stride as isize, self.pad() as isize);
        let off = k as isize - p;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = ((n_in as isize - 1 - off).div_euclid(s) + 1).clamp(0, n_out as isize);
        lo as usize..(hi.max(lo)) as usize
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels, self.in_ch);
        let (ho, wo) = self.output_size(x.height, x.width);
        let (k, s, p) = (self.kernel, self.stride, self.pad());
        let w = &params[self.weight.clone()];
        let b = &params[self.bias.clone()];
        let mut out = Tensor::zeros(self.out_ch, ho, wo);
        let xs: Vec<Range<usize>> = (0..k).map(|kx| self.valid(kx, x.width, wo)).collect();
        let ys: Vec<Range<usize>> = (0..k).map(|ky| self.valid(ky, x.height, ho)).collect();
        for co in 0..self.out_ch {
            let plane = &mut out.data[co * ho * wo..(co + 1) * ho * wo];
            plane.fill(b[co]);
            for ci in 0..self.in_ch {
                let src = x.plane(ci);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((co * self.in_ch + ci) * k + ky) * k + kx];
                        let xr = xs[kx].clone();
                        if xr.is_empty() {
                            continue;
                        }
                        for oy in ys[ky].clone() {
                            let iy = oy * s + ky - p;
                            let row = &mut plane[oy * wo..(oy + 1) * wo];
                            let src_row = &src[iy * x.width..(iy + 1) * x.width];
                            let ix0 = xr.start * s + kx - p;
                            if s == 1 {
                                let n = xr.len();
                                for (o, &i) in row[xr.clone()].iter_mut().zip(&src_row[ix0..ix0 + n]) {
                                    *o += wv * i;
                                }
                            } else {
                                for (j, ox) in xr.clone().enumerate() {
                                    row[ox] += wv * src_row[ix0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        params: &[f64],
        x: &Tensor,
        dy: &Tensor,
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<Tensor> {
        let (ho, wo) = (dy.height, dy.width);
        let (k, s, p) = (self.kernel, self.stride, self.pad());
        let w = &params[self.weight.clone()];
        let mut dx = want_input.then(|| Tensor::zeros(x.channels, x.height, x.width));
        let xs: Vec<Range<usize>> = (0..k).map(|kx| self.valid(kx, x.width, wo)).collect();
        let ys: Vec<Range<usize>> = (0..k).map(|ky| self.valid(ky, x.height, ho)).collect();
        let plane_in = x.plane_len();
        for co in 0..self.out_ch {
            let g = dy.plane(co);
            grads[self.bias.start + co] += g.iter().sum::<f64>();
            for ci in 0..self.in_ch {
                let src = x.plane(ci);
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * self.in_ch + ci) * k + ky) * k + kx;
                        let wv = w[widx];
                        let xr = xs[kx].clone();
                        if xr.is_empty() {
                            continue;
                        }
                        let ix0 = xr.start * s + kx - p;
                        let mut acc = 0.0;
                        for oy in ys[ky].clone() {
                            let iy = oy * s + ky - p;
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            let src_row = &src[iy * x.width..(iy + 1) * x.width];
                            if s == 1 {
                                let n = xr.len();
                                let gs = &grow[xr.clone()];
                                for (&gv, &i) in gs.iter().zip(&src_row[ix0..ix0 + n]) {
                                    acc += gv * i;
                                }
                                if let Some(dx) = dx.as_mut() {
                                    let base = ci * plane_in + iy * x.width + ix0;
                                    for (d, &gv) in dx.data[base..base + n].iter_mut().zip(gs) {
                                        *d += wv * gv;
                                    }
                                }
                            } else {
                                for (j, ox) in xr.clone().enumerate() {
                                    let ix = ix0 + j * s;
                                    acc += grow[ox] * src_row[ix];
                                    if let Some(dx) = dx.as_mut() {
                                        dx.data[ci * plane_in + iy * x.width + ix] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                        grads[self.weight.start + widx] += acc;
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub weight: Range<usize>,
    pub bias: Range<usize>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let w = &params[self.weight.clone()];
        let b = &params[self.bias.clone()];
        (0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let w = &params[self.weight.clone()];
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            grads[self.bias.start + o] += g;
            let row = o * self.inputs;
            for i in 0..self.inputs {
                grads[self.weight.start + row + i] += g * x[i];
                dx[i] += g * w[row + i];
            }
        }
        dx
    }
}
