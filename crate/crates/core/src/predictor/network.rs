//! A small convolutional encoder-decoder with hand-written backpropagation.
//!
//! Three resolution levels (widths `b`, `2b`, `4b`), two 3x3 convolutions per
//! level, additive skip connections on the way up and a zero-initialized 3x3
//! output head. The condition embedding is projected to each encoder level's
//! width and added per channel after that level's first convolution.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::embedding::{encode_condition, EmbeddingMode, EMBED_DIM};
use super::{check_window, DoseContext, Predictor, PredictorOutput};
use crate::error::{ensure, Result};
use crate::grid::Grid;
use crate::nn::{self, Conv2d, Linear, ParamLayout};
use crate::rng;
use crate::volume::SliceWindow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub emb_dim: usize,
}

impl UNetConfig {
    pub fn new(in_channels: usize, out_channels: usize, base_width: usize, emb_dim: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            base_width,
            emb_dim,
        }
    }

    fn widths(&self) -> [usize; 3] {
        [self.base_width, 2 * self.base_width, 4 * self.base_width]
    }
}

#[derive(Debug, Clone)]
struct Layers {
    emb_a: Linear,
    emb_b: Linear,
    proj: [Linear; 3],
    enc: [(Conv2d, Conv2d); 3],
    /// `(low-res conv, full-res conv)` for decoder levels 1 and 0.
    dec: [(Conv2d, Conv2d); 2],
    head: Conv2d,
}

impl Layers {
    fn build(cfg: &UNetConfig) -> (Self, usize) {
        let [c0, c1, c2] = cfg.widths();
        let e = cfg.emb_dim;
        let mut l = ParamLayout::default();
        let layers = Layers {
            emb_a: l.linear(e, e),
            emb_b: l.linear(e, e),
            proj: [l.linear(e, c0), l.linear(e, c1), l.linear(e, c2)],
            enc: [
                (l.conv(cfg.in_channels, c0, 3), l.conv(c0, c0, 3)),
                (l.conv(c0, c1, 3), l.conv(c1, c1, 3)),
                (l.conv(c1, c2, 3), l.conv(c2, c2, 3)),
            ],
            dec: [
                (l.conv(c2, c1, 3), l.conv(c1, c1, 3)),
                (l.conv(c1, c0, 3), l.conv(c0, c0, 3)),
            ],
            head: l.conv(c0, cfg.out_channels, 3),
        };
        (layers, l.len())
    }
}

/// Intermediate activations from a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    h: usize,
    w: usize,
    input: Vec<f64>,
    enc: Vec<f64>,
    emb_h: Vec<f64>,
    emb_s: Vec<f64>,
    emb: Vec<f64>,
    emb_act: Vec<f64>,
    /// Pre-activation of the first conv at each level (after the embedding add).
    za: [Vec<f64>; 3],
    /// Post-activation of the first conv at each level.
    aa: [Vec<f64>; 3],
    /// Pre-activation of the second conv at each level.
    zb: [Vec<f64>; 3],
    /// Level outputs `s0`, `s1`, and the bottleneck.
    s: [Vec<f64>; 3],
    /// Pooled inputs to levels 1 and 2.
    pooled: [Vec<f64>; 2],
    /// Decoder pre-activations after the skip add, for levels 1 and 0.
    r: [Vec<f64>; 2],
    ar: [Vec<f64>; 2],
    zd: [Vec<f64>; 2],
    u: [Vec<f64>; 2],
    pub output: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TinyUNet {
    config: UNetConfig,
    layers: Layers,
    params: Vec<f64>,
}

impl TinyUNet {
    /// He-style random initialization with a zeroed output head.
    pub fn new(config: UNetConfig, seed: u64) -> Self {
        let mut net = Self::random(config, seed);
        let head = net.layers.head.clone();
        net.params[head.weight].fill(0.0);
        net.params[head.bias].fill(0.0);
        net
    }

    /// Random initialization of every layer, the output head included.
    pub fn random(config: UNetConfig, seed: u64) -> Self {
        let mut net = Self::zeros(config);
        let mut r = rng::stream(seed, 0);
        let mut fill = |params: &mut [f64], std: f64| {
            for p in params {
                let z: f64 = StandardNormal.sample(&mut r);
                *p = z * std;
            }
        };
        let l = net.layers.clone();
        for lin in [&l.emb_a, &l.emb_b, &l.proj[0], &l.proj[1], &l.proj[2]] {
            fill(&mut net.params[lin.weight.clone()], (1.0 / lin.din as f64).sqrt());
        }
        let convs = l
            .enc
            .iter()
            .chain(&l.dec)
            .flat_map(|(a, b)| [a, b])
            .chain(std::iter::once(&l.head));
        for conv in convs {
            fill(&mut net.params[conv.weight.clone()], (2.0 / conv.fan_in() as f64).sqrt());
        }
        net
    }

    pub fn zeros(config: UNetConfig) -> Self {
        let (layers, n) = Layers::build(&config);
        Self {
            config,
            layers,
            params: vec![0.0; n],
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Index range of the output head's weights for output channel `ch`.
    pub fn head_channel_params(&self, ch: usize) -> Vec<usize> {
        let head = &self.layers.head;
        let per = head.cin * head.k * head.k;
        let w = head.weight.start + ch * per;
        (w..w + per).chain(std::iter::once(head.bias.start + ch)).collect()
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        ensure!(
            h.is_multiple_of(4) && w.is_multiple_of(4) && h > 0 && w > 0,
            Argument,
            "network input must be a positive multiple of 4 on each side, got {w}x{h}"
        );
        Ok(())
    }

    /// Condition embedding: two affine maps with SiLU in between.
    pub fn embed(&self, enc: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let h = self.layers.emb_a.forward(p, enc);
        self.layers.emb_b.forward(p, &nn::silu_vec(&h))
    }

    pub fn forward(&self, input: &[f64], h: usize, w: usize, enc: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input, h, w, enc)?.output)
    }

    pub fn forward_trace(&self, input: &[f64], h: usize, w: usize, enc: &[f64]) -> Result<Trace> {
        self.check_spatial(h, w)?;
        ensure!(
            input.len() == self.config.in_channels * h * w,
            Argument,
            "network input has {} values, expected {} channels of {w}x{h}",
            input.len(),
            self.config.in_channels
        );
        ensure!(
            enc.len() == self.config.emb_dim,
            Argument,
            "embedding input has length {}, expected {}",
            enc.len(),
            self.config.emb_dim
        );
        let p = &self.params;
        let l = &self.layers;
        let widths = self.config.widths();
        let sizes = [(h, w), (h / 2, w / 2), (h / 4, w / 4)];

        let emb_h = l.emb_a.forward(p, enc);
        let emb_s = nn::silu_vec(&emb_h);
        let emb = l.emb_b.forward(p, &emb_s);
        let emb_act = nn::silu_vec(&emb);

        let mut za: [Vec<f64>; 3] = Default::default();
        let mut aa: [Vec<f64>; 3] = Default::default();
        let mut zb: [Vec<f64>; 3] = Default::default();
        let mut s: [Vec<f64>; 3] = Default::default();
        let mut pooled: [Vec<f64>; 2] = Default::default();
        for lvl in 0..3 {
            let (hh, ww) = sizes[lvl];
            let x = match lvl {
                0 => input,
                _ => {
                    let (ph, pw) = sizes[lvl - 1];
                    pooled[lvl - 1] = nn::avg_pool2(&s[lvl - 1], widths[lvl - 1], ph, pw);
                    &pooled[lvl - 1]
                }
            };
            let mut z = l.enc[lvl].0.forward(p, x, hh, ww);
            nn::add_channel_bias(&mut z, &l.proj[lvl].forward(p, &emb_act), hh * ww);
            aa[lvl] = nn::silu_vec(&z);
            za[lvl] = z;
            zb[lvl] = l.enc[lvl].1.forward(p, &aa[lvl], hh, ww);
            s[lvl] = nn::silu_vec(&zb[lvl]);
        }

        let mut r: [Vec<f64>; 2] = Default::default();
        let mut ar: [Vec<f64>; 2] = Default::default();
        let mut zd: [Vec<f64>; 2] = Default::default();
        let mut u: [Vec<f64>; 2] = Default::default();
        for d in 0..2 {
            // decoder index d targets encoder level 1 - d
            let lvl = 1 - d;
            let (lh, lw) = sizes[lvl + 1];
            let (hh, ww) = sizes[lvl];
            let below = if d == 0 { &s[2] } else { &u[0] };
            let q = l.dec[d].0.forward(p, below, lh, lw);
            let mut up = nn::upsample2(&q, widths[lvl], lh, lw);
            for (a, b) in up.iter_mut().zip(&s[lvl]) {
                *a += b;
            }
            ar[d] = nn::silu_vec(&up);
            r[d] = up;
            zd[d] = l.dec[d].1.forward(p, &ar[d], hh, ww);
            u[d] = nn::silu_vec(&zd[d]);
        }
        let output = l.head.forward(p, &u[1], h, w);

        Ok(Trace {
            h,
            w,
            input: input.to_vec(),
            enc: enc.to_vec(),
            emb_h,
            emb_s,
            emb,
            emb_act,
            za,
            aa,
            zb,
            s,
            pooled,
            r,
            ar,
            zd,
            u,
            output,
        })
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, trace: &Trace, d_output: &[f64], grads: &mut [f64]) {
        debug_assert_eq!(grads.len(), self.params.len());
        let p = &self.params;
        let l = &self.layers;
        let widths = self.config.widths();
        let (h, w) = (trace.h, trace.w);
        let sizes = [(h, w), (h / 2, w / 2), (h / 4, w / 4)];

        let mut d_u = l
            .head
            .backward(p, &trace.u[1], d_output, h, w, grads, true)
            .expect("input gradient requested");

        let mut d_s: [Vec<f64>; 3] = Default::default();
        for d in (0..2).rev() {
            let lvl = 1 - d;
            let (lh, lw) = sizes[lvl + 1];
            let (hh, ww) = sizes[lvl];
            let d_zd = nn::silu_backward(&trace.zd[d], &d_u);
            let d_ar = l.dec[d]
                .1
                .backward(p, &trace.ar[d], &d_zd, hh, ww, grads, true)
                .expect("input gradient requested");
            let d_r = nn::silu_backward(&trace.r[d], &d_ar);
            let d_q = nn::upsample2_backward(&d_r, widths[lvl], lh, lw);
            d_s[lvl] = d_r;
            let below = if d == 0 { &trace.s[2] } else { &trace.u[0] };
            d_u = l.dec[d]
                .0
                .backward(p, below, &d_q, lh, lw, grads, true)
                .expect("input gradient requested");
        }
        // d_u now holds the gradient w.r.t. the bottleneck output
        d_s[2] = d_u;

        let mut d_emb_act = vec![0.0; self.config.emb_dim];
        for lvl in (0..3).rev() {
            let (hh, ww) = sizes[lvl];
            let d_zb = nn::silu_backward(&trace.zb[lvl], &d_s[lvl]);
            let d_aa = l.enc[lvl]
                .1
                .backward(p, &trace.aa[lvl], &d_zb, hh, ww, grads, true)
                .expect("input gradient requested");
            let d_za = nn::silu_backward(&trace.za[lvl], &d_aa);
            let d_proj = nn::channel_sums(&d_za, hh * ww);
            for (acc, g) in d_emb_act
                .iter_mut()
                .zip(l.proj[lvl].backward(p, &trace.emb_act, &d_proj, grads))
            {
                *acc += g;
            }
            let x = if lvl == 0 { &trace.input } else { &trace.pooled[lvl - 1] };
            let d_x = l.enc[lvl].0.backward(p, x, &d_za, hh, ww, grads, lvl > 0);
            if let Some(d_x) = d_x {
                let (ph, pw) = sizes[lvl - 1];
                let d_prev = nn::avg_pool2_backward(&d_x, widths[lvl - 1], ph, pw);
                for (a, b) in d_s[lvl - 1].iter_mut().zip(d_prev) {
                    *a += b;
                }
            }
        }

        let d_emb = nn::silu_backward(&trace.emb, &d_emb_act);
        let d_emb_s = l.emb_b.backward(p, &trace.emb_s, &d_emb, grads);
        let d_emb_h = nn::silu_backward(&trace.emb_h, &d_emb_s);
        l.emb_a.backward(p, &trace.enc, &d_emb_h, grads);
    }
}

/// How a network is conditioned: window width, dose encoding, dose on/off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditioning {
    pub n_slices: usize,
    #[serde(with = "mode_serde")]
    pub mode: EmbeddingMode,
    pub use_dose: bool,
}

impl Default for Conditioning {
    fn default() -> Self {
        Self {
            n_slices: 31,
            mode: EmbeddingMode::Paper,
            use_dose: true,
        }
    }
}

impl Conditioning {
    pub fn encode(&self, t: f64, dose: &DoseContext, dim: usize) -> Vec<f64> {
        encode_condition(t, self.use_dose.then_some(dose), self.mode, dim)
    }
}

mod mode_serde {
    use super::EmbeddingMode;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &EmbeddingMode, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&m.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<EmbeddingMode, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The diffusion network: `n` window channels plus `x_t` in, `(eps, v)` out.
#[derive(Debug, Clone)]
pub struct EpsilonNet {
    pub net: TinyUNet,
    pub conditioning: Conditioning,
    pub data_scale: f64,
}

impl EpsilonNet {
    pub fn new(conditioning: Conditioning, base_width: usize, data_scale: f64, seed: u64) -> Self {
        let config = UNetConfig::new(conditioning.n_slices + 1, 2, base_width, EMBED_DIM);
        Self {
            net: TinyUNet::new(config, seed),
            conditioning,
            data_scale,
        }
    }

    pub fn input(&self, x_t: &Grid, window: &SliceWindow) -> Result<Vec<f64>> {
        check_window(x_t, window)?;
        ensure!(
            window.n() == self.conditioning.n_slices,
            Argument,
            "window has {} slices, network expects {}",
            window.n(),
            self.conditioning.n_slices
        );
        let mut input = Vec::with_capacity((window.n() + 1) * x_t.len());
        input.extend_from_slice(window.stack());
        input.extend_from_slice(x_t.as_slice());
        Ok(input)
    }

    pub fn encoding(&self, t: usize, dose: &DoseContext) -> Vec<f64> {
        self.conditioning.encode(t as f64, dose, self.net.config().emb_dim)
    }

    pub fn forward_trace(
        &self,
        x_t: &Grid,
        window: &SliceWindow,
        t: usize,
        dose: &DoseContext,
    ) -> Result<(PredictorOutput, Trace)> {
        let input = self.input(x_t, window)?;
        let trace = self.net.forward_trace(
            &input,
            x_t.height(),
            x_t.width(),
            &self.encoding(t, dose),
        )?;
        Ok((split_output(&trace.output, x_t.width(), x_t.height()), trace))
    }

    /// Backpropagates output-space gradients `(d eps, d v)` into `grads`.
    pub fn backward(&self, trace: &Trace, d_eps: &[f64], d_v: &[f64], grads: &mut [f64]) {
        let mut d_out = Vec::with_capacity(d_eps.len() * 2);
        d_out.extend_from_slice(d_eps);
        d_out.extend_from_slice(d_v);
        self.net.backward(trace, &d_out, grads);
    }
}

fn split_output(out: &[f64], width: usize, height: usize) -> PredictorOutput {
    let n = width * height;
    PredictorOutput {
        eps: Grid::from_vec(width, height, out[..n].to_vec()).expect("channel size"),
        v: Grid::from_vec(width, height, out[n..2 * n].to_vec()).expect("channel size"),
    }
}

impl Predictor for EpsilonNet {
    fn window_slices(&self) -> usize {
        self.conditioning.n_slices
    }

    fn data_scale(&self) -> f64 {
        self.data_scale
    }

    fn predict(
        &self,
        x_t: &Grid,
        window: &SliceWindow,
        t: usize,
        dose: &DoseContext,
    ) -> Result<PredictorOutput> {
        Ok(self.forward_trace(x_t, window, t, dose)?.0)
    }
}
