//! Shifting-conditioned U-Net denoiser.
//!
//! The encoder consumes `[noisy, cond_map]`; its bottleneck latent is
//! FiLM-modulated by a single affine map of four concatenated embeddings
//! (condition, noise level, absolute horizon, relative shift) and then
//! decoded, with skip connections, into an ε prediction.
//!
//! Reference layout at `depth = 3`: three encoder residual blocks, one
//! middle block, three decoder blocks (two convolutions each) and a final
//! convolution, i.e. fifteen convolutional layers on the main path.

// Channel/tap loops index several parallel buffers at once.
#![allow(clippy::needless_range_loop)]

pub mod embed;
pub mod nn;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::grid::Grid;
use crate::rng;
use embed::sinusoidal;
use nn::{Conv2d, Linear, ParamAllocator, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// `(height, width)`, each divisible by `2^(depth-1)`.
    pub resolution: (usize, usize),
    pub base_channels: usize,
    /// Number of encoder (and decoder) resolution levels.
    pub depth: usize,
    pub embed_dim: usize,
    /// Largest noise level the network is asked about (D_train).
    pub max_level: usize,
    /// Number of forecast horizons (T + 1).
    pub horizons: usize,
    /// Init scale of the FiLM affine layer relative to the default bound.
    pub film_init_scale: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            resolution: (128, 128),
            base_channels: 64,
            depth: 3,
            embed_dim: 128,
            max_level: 1000,
            horizons: 27,
            film_init_scale: 0.1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        ensure!(self.depth >= 1, "depth must be at least 1");
        ensure!(self.base_channels >= 1, "base_channels must be positive");
        ensure!(
            self.embed_dim >= 2 && self.embed_dim.is_multiple_of(2),
            "embed_dim must be an even number >= 2"
        );
        let unit = 1usize << (self.depth - 1);
        ensure!(
            h > 0 && w > 0 && h % unit == 0 && w % unit == 0,
            "resolution {h}x{w} must be divisible by {unit}"
        );
        ensure!(self.max_level >= 1, "max_level must be positive");
        ensure!(self.horizons >= 1, "need at least one horizon");
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn latent_channels(&self) -> usize {
        self.channels(self.depth - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ResBlock {
    conv_a: Conv2d,
    conv_b: Conv2d,
    skip: Option<Conv2d>,
}

struct ResTape {
    x: Tensor,
    a: Tensor,
    h: Tensor,
}

impl ResBlock {
    fn new(alloc: &mut ParamAllocator, in_ch: usize, out_ch: usize) -> Self {
        ResBlock {
            conv_a: alloc.conv(in_ch, out_ch, 3, 1),
            conv_b: alloc.conv(out_ch, out_ch, 3, 1),
            skip: (in_ch != out_ch).then(|| alloc.conv(in_ch, out_ch, 1, 1)),
        }
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        [&self.conv_a, &self.conv_b].into_iter().chain(self.skip.as_ref())
    }

    fn forward(&self, params: &[f64], x: Tensor) -> (Tensor, ResTape) {
        let a = self.conv_a.forward(params, &x);
        let h = nn::silu_tensor(&a);
        let mut out = self.conv_b.forward(params, &h);
        match &self.skip {
            Some(skip) => out.add_assign(&skip.forward(params, &x)),
            None => out.add_assign(&x),
        }
        (out, ResTape { x, a, h })
    }

    fn backward(
        &self,
        params: &[f64],
        tape: &ResTape,
        dout: &Tensor,
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<Tensor> {
        let dh = self
            .conv_b
            .backward(params, &tape.h, dout, grads, true)
            .expect("input gradient requested");
        let da = nn::silu_backward(&tape.a, &dh);
        let dx_main = self
            .conv_a
            .backward(params, &tape.x, &da, grads, want_input);
        let dx_skip = match &self.skip {
            Some(skip) => skip.backward(params, &tape.x, dout, grads, want_input),
            None => want_input.then(|| dout.clone()),
        };
        match (dx_main, dx_skip) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }
}

/// Layer descriptors; parameters live in one flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Network {
    encoder: Vec<ResBlock>,
    middle: ResBlock,
    /// Indexed by resolution level (0 = full resolution).
    decoder: Vec<ResBlock>,
    head: Conv2d,
    cond_down: Conv2d,
    cond_proj: Conv2d,
    film: Linear,
    num_params: usize,
}

impl Network {
    fn build(config: &DenoiserConfig) -> (Self, ParamAllocator) {
        let mut alloc = ParamAllocator::default();
        let depth = config.depth;
        let encoder = (0..depth)
            .map(|k| {
                let in_ch = if k == 0 { 2 } else { config.channels(k - 1) };
                ResBlock::new(&mut alloc, in_ch, config.channels(k))
            })
            .collect();
        let latent = config.latent_channels();
        let middle = ResBlock::new(&mut alloc, latent, latent);
        let mut decoder: Vec<ResBlock> = (0..depth)
            .rev()
            .map(|k| {
                let prev = if k == depth - 1 { latent } else { config.channels(k + 1) };
                ResBlock::new(&mut alloc, prev + config.channels(k), config.channels(k))
            })
            .collect();
        decoder.reverse();
        let head = alloc.conv(config.channels(0), 1, 3, 1);
        let cond_down = alloc.conv(1, config.channels(0), 3, 2);
        let cond_proj = alloc.conv(config.channels(0), config.embed_dim, 3, 2);
        let film = alloc.linear(4 * config.embed_dim, 2 * latent, config.film_init_scale);
        let num_params = alloc.len();
        (
            Network {
                encoder,
                middle,
                decoder,
                head,
                cond_down,
                cond_proj,
                film,
                num_params,
            },
            alloc,
        )
    }

    fn convs(&self) -> Vec<&Conv2d> {
        let mut out: Vec<&Conv2d> = Vec::new();
        for b in self.encoder.iter().chain([&self.middle]).chain(&self.decoder) {
            out.extend(b.convs());
        }
        out.extend([&self.head, &self.cond_down, &self.cond_proj]);
        out
    }
}

/// Conditioning inputs shared by all horizons of one forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningContext {
    pub cond_map: Grid,
}

impl ConditioningContext {
    pub fn new(cond_map: Grid) -> Result<Self> {
        ensure!(
            cond_map.as_slice().iter().all(|v| (0.0..=1.0).contains(v)),
            "conditioning map values must lie in [0, 1]"
        );
        Ok(ConditioningContext { cond_map })
    }
}

/// The four embedding vectors, each `embed_dim` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub h_cond: Vec<f64>,
    pub h_step: Vec<f64>,
    pub h_time: Vec<f64>,
    pub h_shift: Vec<f64>,
}

impl EmbeddingSet {
    pub fn concat(&self) -> Vec<f64> {
        [&self.h_cond, &self.h_step, &self.h_time, &self.h_shift]
            .into_iter()
            .flatten()
            .copied()
            .collect()
    }
}

/// Where on the diffusion trajectory and the forecast tree a call happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseQuery {
    pub level: usize,
    pub horizon: usize,
    /// `horizon − parent_horizon`; 0 on non-branching transitions.
    pub shift: i64,
}

impl NoiseQuery {
    pub fn new(level: usize, horizon: usize, shift: i64) -> Self {
        NoiseQuery {
            level,
            horizon,
            shift,
        }
    }
}

struct CondTape {
    input: Tensor,
    a1: Tensor,
    h1: Tensor,
    out_shape: (usize, usize, usize),
}

/// Intermediate activations kept for the backward pass.
pub struct Tape {
    encoder: Vec<ResTape>,
    skips: Vec<Tensor>,
    latent: Tensor,
    gamma: Vec<f64>,
    embedding: Vec<f64>,
    middle: ResTape,
    decoder: Vec<Option<ResTape>>,
    head_input: Tensor,
    cond: CondTape,
}

/// Denoiser configuration plus its learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserState {
    config: DenoiserConfig,
    net: Network,
    params: Vec<f64>,
}

impl DenoiserState {
    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (net, alloc) = Network::build(&config);
        let params = alloc.initialise(&mut rng::stream(seed, "init", &[]));
        Ok(DenoiserState {
            config,
            net,
            params,
        })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (net, _) = Network::build(&config);
        if params.len() != net.num_params {
            return Err(Error::Data(format!(
                "parameter count {} does not match config ({})",
                params.len(),
                net.num_params
            )));
        }
        Ok(DenoiserState {
            config,
            net,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params
    }

    /// Parameter index ranges of the FiLM affine layer (weights, bias).
    pub fn film_param_ranges(&self) -> [std::ops::Range<usize>; 2] {
        [self.net.film.weight.clone(), self.net.film.bias.clone()]
    }

    /// Multiply-accumulate count of every convolution and affine layer for
    /// one call, in `(name, macs)` form.
    pub fn layer_macs(&self) -> Vec<(String, u64)> {
        let (h, w) = self.config.resolution;
        let mut out = Vec::new();
        for (k, b) in self.net.encoder.iter().enumerate() {
            let (hk, wk) = (h >> k, w >> k);
            for (i, c) in b.convs().enumerate() {
                out.push((format!("encoder.{k}.{i}"), c.macs(hk, wk)));
            }
        }
        let (hl, wl) = (h >> (self.config.depth - 1), w >> (self.config.depth - 1));
        for (i, c) in self.net.middle.convs().enumerate() {
            out.push((format!("middle.{i}"), c.macs(hl, wl)));
        }
        for (k, b) in self.net.decoder.iter().enumerate() {
            let (hk, wk) = (h >> k, w >> k);
            for (i, c) in b.convs().enumerate() {
                out.push((format!("decoder.{k}.{i}"), c.macs(hk, wk)));
            }
        }
        out.push(("head".into(), self.net.head.macs(h, w)));
        out.push(("cond.0".into(), self.net.cond_down.macs(h, w)));
        let (hc, wc) = self.net.cond_down.output_size(h, w);
        out.push(("cond.1".into(), self.net.cond_proj.macs(hc, wc)));
        let film = &self.net.film;
        out.push(("film".into(), (film.inputs * film.outputs) as u64));
        out
    }

    pub fn conv_count(&self) -> usize {
        self.net.convs().len()
    }

    fn check_inputs(&self, noisy: &Grid, ctx: &ConditioningContext, q: NoiseQuery) -> Result<()> {
        let expected = self.config.resolution;
        for g in [noisy, &ctx.cond_map] {
            if g.shape() != expected {
                return Err(Error::ShapeMismatch {
                    expected,
                    actual: g.shape(),
                });
            }
        }
        ensure!(
            (1..=self.config.max_level).contains(&q.level),
            "noise level {} outside 1..={}",
            q.level,
            self.config.max_level
        );
        let horizons = self.config.horizons as i64;
        ensure!(
            (0..horizons).contains(&(q.horizon as i64)),
            "horizon {} outside 0..{horizons}",
            q.horizon
        );
        ensure!(
            (0..horizons).contains(&(q.horizon as i64 - q.shift)),
            "parent horizon {} - {} outside 0..{horizons}",
            q.horizon,
            q.shift
        );
        Ok(())
    }

    fn condition_embedding(&self, cond: &Grid) -> (Vec<f64>, CondTape) {
        let p = &self.params;
        let (h, w) = cond.shape();
        let input = Tensor::from_planes(h, w, &[cond.as_slice()]);
        let a1 = self.net.cond_down.forward(p, &input);
        let h1 = nn::silu_tensor(&a1);
        let a2 = self.net.cond_proj.forward(p, &h1);
        let n = a2.plane_len() as f64;
        let h_cond = (0..a2.channels)
            .map(|c| a2.plane(c).iter().sum::<f64>() / n)
            .collect();
        let out_shape = (a2.channels, a2.height, a2.width);
        (
            h_cond,
            CondTape {
                input,
                a1,
                h1,
                out_shape,
            },
        )
    }

    /// The four embeddings for one call.
    pub fn embeddings(&self, ctx: &ConditioningContext, q: NoiseQuery) -> EmbeddingSet {
        let dim = self.config.embed_dim;
        EmbeddingSet {
            h_cond: self.condition_embedding(&ctx.cond_map).0,
            h_step: sinusoidal(q.level as f64, dim),
            h_time: sinusoidal(q.horizon as f64, dim),
            h_shift: sinusoidal(q.shift as f64, dim),
        }
    }

    /// Per-channel FiLM scale `γ = 1 + r` and offset `β`.
    pub fn film_params(&self, embeddings: &EmbeddingSet) -> (Vec<f64>, Vec<f64>) {
        film_split(self.net.film.forward(&self.params, &embeddings.concat()))
    }

    /// ε prediction for a noisy map.
    pub fn predict_noise(&self, noisy: &Grid, ctx: &ConditioningContext, q: NoiseQuery) -> Result<Grid> {
        self.check_inputs(noisy, ctx, q)?;
        Ok(self.forward(noisy, ctx, q, false).0)
    }

    /// Forward pass that also records the activations needed by
    /// [`DenoiserState::backward`].
    pub fn forward_with_tape(
        &self,
        noisy: &Grid,
        ctx: &ConditioningContext,
        q: NoiseQuery,
    ) -> Result<(Grid, Tape)> {
        self.check_inputs(noisy, ctx, q)?;
        let (out, tape) = self.forward(noisy, ctx, q, true);
        Ok((out, tape.expect("tape requested")))
    }

    fn forward(
        &self,
        noisy: &Grid,
        ctx: &ConditioningContext,
        q: NoiseQuery,
        record: bool,
    ) -> (Grid, Option<Tape>) {
        let p = &self.params;
        let depth = self.config.depth;
        let (h, w) = self.config.resolution;

        let mut x = Tensor::from_planes(h, w, &[noisy.as_slice(), ctx.cond_map.as_slice()]);
        let mut enc_tapes = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        for (k, block) in self.net.encoder.iter().enumerate() {
            let (out, tape) = block.forward(p, x);
            enc_tapes.push(tape);
            x = if k + 1 < depth { nn::avg_pool2(&out) } else { out.clone() };
            skips.push(out);
        }
        let latent = x;

        let dim = self.config.embed_dim;
        let (h_cond, cond_tape) = self.condition_embedding(&ctx.cond_map);
        let embedding: Vec<f64> = h_cond
            .into_iter()
            .chain(sinusoidal(q.level as f64, dim))
            .chain(sinusoidal(q.horizon as f64, dim))
            .chain(sinusoidal(q.shift as f64, dim))
            .collect();
        let (gamma, beta) = film_split(self.net.film.forward(p, &embedding));
        let mut z = latent.clone();
        let plane = z.plane_len();
        for c in 0..z.channels {
            for v in &mut z.data[c * plane..(c + 1) * plane] {
                *v = gamma[c] * *v + beta[c];
            }
        }

        let (mut y, mid_tape) = self.net.middle.forward(p, z);
        let mut dec_tapes: Vec<Option<ResTape>> = (0..depth).map(|_| None).collect();
        for k in (0..depth).rev() {
            if k + 1 < depth {
                y = nn::upsample2(&y);
            }
            let input = y.concat(&skips[k]);
            let (out, tape) = self.net.decoder[k].forward(p, input);
            if record {
                dec_tapes[k] = Some(tape);
            }
            y = out;
        }
        let eps = self.net.head.forward(p, &y);
        let grid = Grid::from_vec(h, w, eps.data).expect("head emits one channel");
        if !record {
            return (grid, None);
        }
        let tape = Tape {
            encoder: enc_tapes,
            skips,
            latent,
            gamma,
            embedding,
            middle: mid_tape,
            decoder: dec_tapes,
            head_input: y,
            cond: cond_tape,
        };
        (grid, Some(tape))
    }

    /// Accumulates `∂(Σ d_out · ε̂)/∂θ` into `grads` (same layout as params).
    pub fn backward(&self, tape: &Tape, d_out: &Grid, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let p = &self.params;
        let depth = self.config.depth;
        let (h, w) = self.config.resolution;

        let d_eps = Tensor::from_planes(h, w, &[d_out.as_slice()]);
        let mut d = self
            .net
            .head
            .backward(p, &tape.head_input, &d_eps, grads, true)
            .expect("input gradient requested");

        let mut d_skips: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        let mut d_mid_out = None;
        for k in 0..depth {
            let dtape = tape.decoder[k].as_ref().expect("decoder tape");
            let d_in = self.net.decoder[k]
                .backward(p, dtape, &d, grads, true)
                .expect("input gradient requested");
            let prev_ch = d_in.channels - tape.skips[k].channels;
            let (d_prev, d_skip) = d_in.split_channels(prev_ch);
            d_skips[k] = Some(d_skip);
            if k + 1 < depth {
                d = nn::upsample2_backward(&d_prev);
            } else {
                d_mid_out = Some(d_prev);
            }
        }

        let d_z = self
            .net
            .middle
            .backward(p, &tape.middle, &d_mid_out.expect("depth >= 1"), grads, true)
            .expect("input gradient requested");
        let channels = d_z.channels;
        let mut d_film = vec![0.0; 2 * channels];
        let mut d_latent = d_z.clone();
        for c in 0..channels {
            let dz = d_z.plane(c);
            let lat = tape.latent.plane(c);
            d_film[c] = dz.iter().zip(lat).map(|(a, b)| a * b).sum();
            d_film[channels + c] = dz.iter().sum();
            let plane = d_latent.plane_len();
            for v in &mut d_latent.data[c * plane..(c + 1) * plane] {
                *v *= tape.gamma[c];
            }
        }
        let d_embedding = self.net.film.backward(p, &tape.embedding, &d_film, grads);

        let dim = self.config.embed_dim;
        let (oc, oh, ow) = tape.cond.out_shape;
        let mut d_a2 = Tensor::zeros(oc, oh, ow);
        let n = (oh * ow) as f64;
        for c in 0..oc {
            let g = d_embedding[c] / n;
            let plane = oh * ow;
            d_a2.data[c * plane..(c + 1) * plane].fill(g);
        }
        debug_assert_eq!(oc, dim);
        let d_h1 = self
            .net
            .cond_proj
            .backward(p, &tape.cond.h1, &d_a2, grads, true)
            .expect("input gradient requested");
        let d_a1 = nn::silu_backward(&tape.cond.a1, &d_h1);
        self.net
            .cond_down
            .backward(p, &tape.cond.input, &d_a1, grads, false);

        let mut d_out_k = d_skips;
        match d_out_k[depth - 1].as_mut() {
            Some(t) => t.add_assign(&d_latent),
            None => unreachable!(),
        }
        for k in (0..depth).rev() {
            let dk = d_out_k[k].take().expect("gradient present");
            let dx = self.net.encoder[k].backward(p, &tape.encoder[k], &dk, grads, k > 0);
            if let Some(dx) = dx {
                let pooled = nn::avg_pool2_backward(&dx);
                d_out_k[k - 1]
                    .as_mut()
                    .expect("skip gradient present")
                    .add_assign(&pooled);
            }
        }
    }
}

fn film_split(raw: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let c = raw.len() / 2;
    let gamma = raw[..c].iter().map(|r| 1.0 + r).collect();
    let beta = raw[c..].to_vec();
    (gamma, beta)
}
