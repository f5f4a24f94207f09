//! Minimal dense layers with hand-written backward passes.
//!
//! Feature maps are flat `C x H x W` buffers (channel-major, row-major
//! within a channel). Parameters live in one flat vector owned by the model;
//! layers only hold index ranges into it, which keeps the optimizer, the
//! checkpoint format and finite-difference checks trivial.

use std::ops::Range;

/// Sequential allocator for slots in a flat parameter vector.
#[derive(Debug, Default)]
pub struct ParamLayout {
    len: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, n: usize) -> Range<usize> {
        let r = self.len..self.len + n;
        self.len += n;
        r
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn conv(&mut self, cin: usize, cout: usize, k: usize) -> Conv2d {
        Conv2d {
            cin,
            cout,
            k,
            weight: self.alloc(cout * cin * k * k),
            bias: self.alloc(cout),
        }
    }

    pub fn linear(&mut self, din: usize, dout: usize) -> Linear {
        Linear {
            din,
            dout,
            weight: self.alloc(dout * din),
            bias: self.alloc(dout),
        }
    }
}

/// Square-kernel 2D convolution, stride 1, zero padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

/// Overlapping index ranges for a kernel tap displaced by `d`.
#[inline]
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

impl Conv2d {
    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn forward(&self, params: &[f64], input: &[f64], h: usize, w: usize) -> Vec<f64> {
        let plane = h * w;
        debug_assert_eq!(input.len(), self.cin * plane);
        let weight = &params[self.weight.clone()];
        let bias = &params[self.bias.clone()];
        let k = self.k;
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; self.cout * plane];
        for (co, o) in out.chunks_exact_mut(plane).enumerate() {
            o.fill(bias[co]);
            for ci in 0..self.cin {
                let inp = &input[ci * plane..(ci + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = tap_range(w, dx);
                        let wv = weight[((co * self.cin + ci) * k + ky) * k + kx];
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let orow = &mut o[y * w + x0..y * w + x1];
                            let ib = iy * w + (x0 as isize + dx) as usize;
                            let irow = &inp[ib..ib + (x1 - x0)];
                            for (a, b) in orow.iter_mut().zip(irow) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_input` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        d_out: &[f64],
        h: usize,
        w: usize,
        grads: &mut [f64],
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let plane = h * w;
        let k = self.k;
        let pad = (k / 2) as isize;
        let weight = &params[self.weight.clone()];
        {
            let d_bias = &mut grads[self.bias.clone()];
            for (co, g) in d_out.chunks_exact(plane).enumerate() {
                d_bias[co] += g.iter().sum::<f64>();
            }
        }
        let mut d_in = need_input.then(|| vec![0.0; self.cin * plane]);
        let wstart = self.weight.start;
        for co in 0..self.cout {
            let g = &d_out[co * plane..(co + 1) * plane];
            for ci in 0..self.cin {
                let inp = &input[ci * plane..(ci + 1) * plane];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = tap_range(h, dy);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = tap_range(w, dx);
                        let widx = ((co * self.cin + ci) * k + ky) * k + kx;
                        let wv = weight[widx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let grow = &g[y * w + x0..y * w + x1];
                            let ib = iy * w + (x0 as isize + dx) as usize;
                            let irow = &inp[ib..ib + (x1 - x0)];
                            acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(d_in) = d_in.as_mut() {
                                let drow = &mut d_in[ci * plane + ib..ci * plane + ib + (x1 - x0)];
                                for (d, a) in drow.iter_mut().zip(grow) {
                                    *d += wv * a;
                                }
                            }
                        }
                        grads[wstart + widx] += acc;
                    }
                }
            }
        }
        d_in
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

impl Linear {
    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let weight = &params[self.weight.clone()];
        let bias = &params[self.bias.clone()];
        (0..self.dout)
            .map(|o| {
                let row = &weight[o * self.din..(o + 1) * self.din];
                bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], d_out: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let weight = &params[self.weight.clone()];
        let mut d_in = vec![0.0; self.din];
        for (o, &g) in d_out.iter().enumerate() {
            grads[self.bias.start + o] += g;
            let row = &weight[o * self.din..(o + 1) * self.din];
            let wg = self.weight.start + o * self.din;
            for i in 0..self.din {
                grads[wg + i] += g * x[i];
                d_in[i] += g * row[i];
            }
        }
        d_in
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu(v)).collect()
}

/// `d_pre = d_post * silu'(pre)`.
pub fn silu_backward(pre: &[f64], d_post: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(d_post)
        .map(|(&x, &g)| g * silu_grad(x))
        .collect()
}

/// 2x2 average pooling; `h` and `w` must be even.
pub fn avg_pool2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let a = src[2 * y * w + 2 * x];
                let b = src[2 * y * w + 2 * x + 1];
                let cc = src[(2 * y + 1) * w + 2 * x];
                let d = src[(2 * y + 1) * w + 2 * x + 1];
                dst[y * ow + x] = 0.25 * (a + b + cc + d);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(d_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut d_in = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                d_in[ch * h * w + y * w + x] = 0.25 * d_out[ch * oh * ow + (y / 2) * ow + x / 2];
            }
        }
    }
    d_in
}

/// Nearest-neighbour 2x upsampling from `h x w`.
pub fn upsample2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[ch * oh * ow + y * ow + x] = input[ch * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// Gradient of [`upsample2`]; `h x w` is the low-resolution size.
pub fn upsample2_backward(d_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut d_in = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                d_in[ch * h * w + (y / 2) * w + x / 2] += d_out[ch * oh * ow + y * ow + x];
            }
        }
    }
    d_in
}

/// Adds `bias[c]` to every element of channel `c`.
pub fn add_channel_bias(x: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, b) in x.chunks_exact_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

pub fn channel_sums(x: &[f64], plane: usize) -> Vec<f64> {
    x.chunks_exact(plane).map(|c| c.iter().sum()).collect()
}

/// Fourth-order central difference of `f` at 0 with step `h`.
pub fn five_point(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}
