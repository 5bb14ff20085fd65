//! Dense-connected convolutional autoencoder with hand-written backprop.
//!
//! Encoder: a stack of dense blocks. Inside a block every 3x3 convolution
//! (ReLU) sees the channel concatenation of the block input and all earlier
//! layer outputs; the block ends with a stride-2 convolution (ReLU). A linear
//! layer maps the last feature map to the latent vector.
//!
//! Decoder: a ReLU linear layer back to the last feature map, then per stage
//! nearest-neighbor upsampling and a convolution, finishing with a single
//! sigmoid channel of the input size.
//!
//! Activations are stored channel-major (`[C][H][W]`, square maps).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples per gradient-accumulation chunk. Chunk boundaries do not depend on
/// the thread count, so the reduction order is fixed.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Side length of the (K x K) input.
    pub k: usize,
    pub latent_dim: usize,
    /// Convolutions per dense block.
    pub layers_per_block: usize,
    /// Channels added by each dense convolution.
    pub growth_rate: usize,
    /// Output channels of each block's stride-2 convolution; one entry per
    /// block.
    pub transition_channels: Vec<usize>,
    /// Odd convolution kernel size.
    pub kernel_size: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            k: 150,
            latent_dim: 10,
            layers_per_block: 3,
            growth_rate: 8,
            transition_channels: vec![16, 24, 32],
            kernel_size: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if self.transition_channels.is_empty() {
            return bad("at least one dense block is required".into());
        }
        if self.transition_channels.contains(&0) {
            return bad("transition channel counts must be >= 1".into());
        }
        if self.layers_per_block > 0 && self.growth_rate == 0 {
            return bad("growth_rate must be >= 1".into());
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        Ok(())
    }

    /// Spatial size at the input of each block, plus the final map size.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.k];
        for _ in &self.transition_channels {
            let s = *sizes.last().unwrap();
            sizes.push(s.div_ceil(2));
        }
        sizes
    }

    fn block_in_channels(&self, b: usize) -> usize {
        if b == 0 {
            1
        } else {
            self.transition_channels[b - 1]
        }
    }

    fn block_out_channels(&self, b: usize) -> usize {
        self.block_in_channels(b) + self.layers_per_block * self.growth_rate
    }

    fn decoder_out_channels(&self, b: usize) -> usize {
        if b == 0 {
            1
        } else {
            self.transition_channels[b - 1]
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    cin: usize,
    cout: usize,
    ks: usize,
    stride: usize,
    sin: usize,
    sout: usize,
    w: Slot,
    b: Slot,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    nin: usize,
    nout: usize,
    w: Slot,
    b: Slot,
}

/// Shape of one parameter array, in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayShape {
    pub name: String,
    pub dims: Vec<usize>,
}

impl ArrayShape {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A validated architecture with its parameter layout.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    dense: Vec<Vec<Conv>>,
    transitions: Vec<Conv>,
    enc_fc: Linear,
    dec_fc: Linear,
    /// Decoder convolution of stage b, indexed by b (executed last to first).
    dec_conv: Vec<Conv>,
    shapes: Vec<ArrayShape>,
    n_params: usize,
    sizes: Vec<usize>,
}

struct LayoutBuilder {
    offset: usize,
    shapes: Vec<ArrayShape>,
}

impl LayoutBuilder {
    fn slot(&mut self, name: String, dims: Vec<usize>) -> Slot {
        let len = dims.iter().product();
        let s = Slot { offset: self.offset, len };
        self.offset += len;
        self.shapes.push(ArrayShape { name, dims });
        s
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, ks: usize, stride: usize, sin: usize, sout: usize) -> Conv {
        let w = self.slot(format!("{name}.weight"), vec![cout, cin, ks, ks]);
        let b = self.slot(format!("{name}.bias"), vec![cout]);
        Conv { cin, cout, ks, stride, sin, sout, w, b }
    }

    fn linear(&mut self, name: &str, nin: usize, nout: usize) -> Linear {
        let w = self.slot(format!("{name}.weight"), vec![nout, nin]);
        let b = self.slot(format!("{name}.bias"), vec![nout]);
        Linear { nin, nout, w, b }
    }
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let sizes = config.stage_sizes();
        let ks = config.kernel_size;
        let nb = config.transition_channels.len();
        let mut lb = LayoutBuilder { offset: 0, shapes: Vec::new() };

        let mut dense = Vec::with_capacity(nb);
        let mut transitions = Vec::with_capacity(nb);
        for b in 0..nb {
            let s = sizes[b];
            let cin = config.block_in_channels(b);
            let layers = (0..config.layers_per_block)
                .map(|l| {
                    lb.conv(
                        &format!("encoder.block{b}.dense{l}"),
                        cin + l * config.growth_rate,
                        config.growth_rate,
                        ks,
                        1,
                        s,
                        s,
                    )
                })
                .collect();
            dense.push(layers);
            transitions.push(lb.conv(
                &format!("encoder.block{b}.down"),
                config.block_out_channels(b),
                config.transition_channels[b],
                ks,
                2,
                s,
                sizes[b + 1],
            ));
        }
        let flat = config.transition_channels[nb - 1] * sizes[nb] * sizes[nb];
        let enc_fc = lb.linear("encoder.fc", flat, config.latent_dim);
        let dec_fc = lb.linear("decoder.fc", config.latent_dim, flat);
        let mut dec_conv: Vec<Option<Conv>> = vec![None; nb];
        for b in (0..nb).rev() {
            dec_conv[b] = Some(lb.conv(
                &format!("decoder.stage{b}.conv"),
                config.transition_channels[b],
                config.decoder_out_channels(b),
                ks,
                1,
                sizes[b],
                sizes[b],
            ));
        }
        Ok(Self {
            config,
            dense,
            transitions,
            enc_fc,
            dec_fc,
            dec_conv: dec_conv.into_iter().map(Option::unwrap).collect(),
            n_params: lb.offset,
            shapes: lb.shapes,
            sizes,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Parameter array shapes in declaration order.
    pub fn shapes(&self) -> &[ArrayShape] {
        &self.shapes
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    fn input_len(&self) -> usize {
        self.config.k * self.config.k
    }

    /// He-normal weights (unit-gain for the two linear bottleneck layers and
    /// the output convolution), zero biases.
    pub fn init_params(&self, seed: u64) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; self.n_params];
        let mut fill = |slot: Slot, fan_in: usize, gain: f64, rng: &mut ChaCha8Rng| {
            let std = (gain / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for w in &mut data[slot.offset..slot.offset + slot.len] {
                *w = normal.sample(rng);
            }
        };
        for block in &self.dense {
            for c in block {
                fill(c.w, c.cin * c.ks * c.ks, 2.0, &mut rng);
            }
        }
        for c in &self.transitions {
            fill(c.w, c.cin * c.ks * c.ks, 2.0, &mut rng);
        }
        fill(self.enc_fc.w, self.enc_fc.nin, 1.0, &mut rng);
        fill(self.dec_fc.w, self.dec_fc.nin, 2.0, &mut rng);
        for (b, c) in self.dec_conv.iter().enumerate().rev() {
            let gain = if b == 0 { 1.0 } else { 2.0 };
            fill(c.w, c.cin * c.ks * c.ks, gain, &mut rng);
        }
        NetworkParams { data }
    }

    /// All-zero parameters.
    pub fn zero_params(&self) -> NetworkParams {
        NetworkParams { data: vec![0.0; self.n_params] }
    }

    fn check_params(&self, params: &NetworkParams) -> Result<()> {
        if params.data.len() != self.n_params {
            return Err(Error::Shape(format!(
                "network expects {} parameters, got {}",
                self.n_params,
                params.data.len()
            )));
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(Error::Shape(format!(
                "input must be {k}x{k} ({} values), got {}",
                self.input_len(),
                input.len(),
                k = self.config.k
            )));
        }
        Ok(())
    }

    /// Latent code of one K x K input.
    pub fn encode(&self, params: &NetworkParams, input: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_input(input)?;
        let mut cache = self.new_cache();
        self.forward_encoder(&params.data, input, &mut cache, None);
        Ok(cache.latent)
    }

    /// K x K reconstruction (row-major) of a latent code.
    pub fn decode(&self, params: &NetworkParams, latent: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if latent.len() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent must have {} entries, got {}",
                self.config.latent_dim,
                latent.len()
            )));
        }
        let mut cache = self.new_cache();
        cache.latent.copy_from_slice(latent);
        self.forward_decoder(&params.data, &mut cache);
        Ok(cache.output)
    }

    /// Latent codes for many base feature vectors, each augmented to its
    /// K x K cyclic-shift matrix on the fly.
    pub fn encode_vectors(&self, params: &NetworkParams, vectors: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.check_params(params)?;
        if let Some(v) = vectors.iter().find(|v| v.len() != self.config.k) {
            return Err(Error::Shape(format!("feature vector has length {}, expected {}", v.len(), self.config.k)));
        }
        Ok(vectors
            .par_iter()
            .map_init(
                || (self.new_cache(), vec![0.0; self.input_len()]),
                |(cache, buf), v| {
                    crate::features::augment_into(v, buf);
                    self.forward_encoder(&params.data, buf, cache, None);
                    cache.latent.clone()
                },
            )
            .collect())
    }

    /// Batch loss and exact gradients for explicit K x K inputs.
    pub fn loss_and_gradients(
        &self,
        params: &NetworkParams,
        inputs: &[&[f64]],
        centroids: &[Vec<f64>],
        assignments: &[usize],
        lambda: f64,
    ) -> Result<BatchGradients> {
        for x in inputs {
            self.check_input(x)?;
        }
        self.loss_and_gradients_with(params, inputs.len(), |i, buf| buf.copy_from_slice(inputs[i]), centroids, assignments, lambda)
    }

    /// Batch loss and gradients for base feature vectors, augmented lazily.
    pub fn loss_and_gradients_vectors(
        &self,
        params: &NetworkParams,
        vectors: &[&[f64]],
        centroids: &[Vec<f64>],
        assignments: &[usize],
        lambda: f64,
    ) -> Result<BatchGradients> {
        if let Some(v) = vectors.iter().find(|v| v.len() != self.config.k) {
            return Err(Error::Shape(format!("feature vector has length {}, expected {}", v.len(), self.config.k)));
        }
        self.loss_and_gradients_with(
            params,
            vectors.len(),
            |i, buf| crate::features::augment_into(vectors[i], buf),
            centroids,
            assignments,
            lambda,
        )
    }

    /// Core batch evaluation. `fill(i, buf)` writes sample i's K x K input.
    ///
    /// Loss = mean_i MSE(d(e(x_i)), x_i) + (lambda / 2) mean_i |e(x_i) - m_(k<-i)|^2.
    /// With `lambda == 0` the centroid inputs are not consulted.
    pub fn loss_and_gradients_with<F>(
        &self,
        params: &NetworkParams,
        n: usize,
        fill: F,
        centroids: &[Vec<f64>],
        assignments: &[usize],
        lambda: f64,
    ) -> Result<BatchGradients>
    where
        F: Fn(usize, &mut [f64]) + Sync,
    {
        self.check_params(params)?;
        if n == 0 {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let use_centroids = lambda > 0.0;
        if use_centroids {
            if assignments.len() != n {
                return Err(Error::Shape(format!("{} assignments for {} samples", assignments.len(), n)));
            }
            for (i, &a) in assignments.iter().enumerate() {
                if a >= centroids.len() {
                    return Err(Error::Shape(format!(
                        "sample {i} assigned to centroid {a}, only {} centroids",
                        centroids.len()
                    )));
                }
            }
            if let Some(c) = centroids.iter().find(|c| c.len() != self.config.latent_dim) {
                return Err(Error::Shape(format!("centroid has {} dims, latent_dim is {}", c.len(), self.config.latent_dim)));
            }
        }

        let scale = 1.0 / n as f64;
        let d = self.config.latent_dim;
        let chunk_results: Vec<Result<ChunkAccum>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|ci| {
                let mut acc = ChunkAccum {
                    grads: vec![0.0; self.n_params],
                    rec: 0.0,
                    cen: 0.0,
                    latent_grads: Vec::new(),
                    latents: Vec::new(),
                };
                let mut cache = self.new_cache();
                let mut input = vec![0.0; self.input_len()];
                for i in ci * CHUNK..((ci + 1) * CHUNK).min(n) {
                    fill(i, &mut input);
                    self.forward_encoder(&params.data, &input, &mut cache, None);
                    self.forward_decoder(&params.data, &mut cache);
                    let rec = mse(&cache.output, &input);
                    let centroid = use_centroids.then(|| centroids[assignments[i]].as_slice());
                    let cen = centroid.map_or(0.0, |m| sq_dist(&cache.latent, m));
                    if !rec.is_finite() || !cen.is_finite() {
                        return Err(Error::NonFinite(format!("sample {i} of batch")));
                    }
                    acc.rec += rec;
                    acc.cen += cen;
                    let mut dz = vec![0.0; d];
                    if let Some(m) = centroid {
                        for ((g, z), mk) in dz.iter_mut().zip(&cache.latent).zip(m) {
                            *g = lambda * scale * (z - mk);
                        }
                    }
                    let latent_grad = self.backward(&params.data, &input, &mut cache, scale, &dz, &mut acc.grads);
                    acc.latent_grads.push(latent_grad);
                    acc.latents.push(cache.latent.clone());
                }
                Ok(acc)
            })
            .collect();

        let mut grads = vec![0.0; self.n_params];
        let mut rec = 0.0;
        let mut cen = 0.0;
        let mut latent_grads = Vec::with_capacity(n);
        let mut latents = Vec::with_capacity(n);
        for r in chunk_results {
            let acc = r?;
            for (g, a) in grads.iter_mut().zip(&acc.grads) {
                *g += a;
            }
            rec += acc.rec;
            cen += acc.cen;
            latent_grads.extend(acc.latent_grads);
            latents.extend(acc.latents);
        }
        let reconstruction = rec * scale;
        let centroid = cen * scale;
        let total = reconstruction + 0.5 * lambda * centroid;
        if !total.is_finite() {
            return Err(Error::NonFinite("batch loss".into()));
        }
        Ok(BatchGradients {
            loss: LossBreakdown { reconstruction, centroid, total, lambda },
            params: grads,
            latents: latent_grads,
            latent_values: latents,
        })
    }

    /// Scalar batch loss only (the finite-difference oracle's objective).
    pub fn loss(
        &self,
        params: &NetworkParams,
        inputs: &[&[f64]],
        centroids: &[Vec<f64>],
        assignments: &[usize],
        lambda: f64,
    ) -> Result<LossBreakdown> {
        self.check_params(params)?;
        let n = inputs.len();
        let mut cache = self.new_cache();
        let (mut rec, mut cen) = (0.0, 0.0);
        for (i, x) in inputs.iter().enumerate() {
            self.check_input(x)?;
            self.forward_encoder(&params.data, x, &mut cache, None);
            self.forward_decoder(&params.data, &mut cache);
            rec += mse(&cache.output, x);
            if lambda > 0.0 {
                cen += sq_dist(&cache.latent, &centroids[assignments[i]]);
            }
        }
        let reconstruction = rec / n as f64;
        let centroid = cen / n as f64;
        Ok(LossBreakdown { reconstruction, centroid, total: reconstruction + 0.5 * lambda * centroid, lambda })
    }

    /// Reconstruction and latent code of every input, plus the on/off
    /// pattern of every ReLU unit across the batch.
    fn forward_all(&self, params: &NetworkParams, inputs: &[&[f64]]) -> Result<(Vec<Outputs>, Vec<bool>)> {
        self.check_params(params)?;
        let mut cache = self.new_cache();
        let mut pattern = Vec::new();
        let outs = inputs
            .iter()
            .map(|x| {
                self.check_input(x)?;
                self.forward_encoder(&params.data, x, &mut cache, None);
                self.forward_decoder(&params.data, &mut cache);
                let block0_input = x.len();
                let relu_maps = cache.blocks[0][block0_input..]
                    .iter()
                    .chain(cache.blocks[1..].iter().flatten())
                    .chain(&cache.final_map)
                    .chain(&cache.dec_hidden)
                    .chain(cache.dec_out[1..].iter().flatten());
                pattern.extend(relu_maps.map(|&v| v > 0.0));
                Ok((cache.output.clone(), cache.latent.clone()))
            })
            .collect::<Result<_>>()?;
        Ok((outs, pattern))
    }

    fn new_cache(&self) -> Cache {
        let cfg = &self.config;
        let sizes = &self.sizes;
        let nb = cfg.transition_channels.len();
        Cache {
            blocks: (0..nb).map(|b| vec![0.0; cfg.block_out_channels(b) * sizes[b] * sizes[b]]).collect(),
            final_map: vec![0.0; self.enc_fc.nin],
            latent: vec![0.0; cfg.latent_dim],
            dec_hidden: vec![0.0; self.dec_fc.nout],
            dec_up: (0..nb).map(|b| vec![0.0; cfg.transition_channels[b] * sizes[b] * sizes[b]]).collect(),
            dec_out: (0..nb).map(|b| vec![0.0; cfg.decoder_out_channels(b) * sizes[b] * sizes[b]]).collect(),
            output: vec![0.0; cfg.k * cfg.k],
        }
    }

    /// Encoder forward pass. `ablate = Some((block, layer))` zeroes that dense
    /// layer's output before later layers consume it.
    fn forward_encoder(&self, p: &[f64], input: &[f64], cache: &mut Cache, ablate: Option<(usize, usize)>) {
        let nb = self.transitions.len();
        cache.blocks[0][..input.len()].copy_from_slice(input);
        for b in 0..nb {
            let block_in = self.config.block_in_channels(b);
            let hw = self.sizes[b] * self.sizes[b];
            let buf = &mut cache.blocks[b];
            for (l, conv) in self.dense[b].iter().enumerate() {
                let start = (block_in + l * self.config.growth_rate) * hw;
                let (src, dst) = buf.split_at_mut(start);
                let dst = &mut dst[..conv.cout * hw];
                conv_forward(conv, p, src, dst);
                relu(dst);
                if ablate == Some((b, l)) {
                    dst.fill(0.0);
                }
            }
            let trans = &self.transitions[b];
            if b + 1 < nb {
                let (head, tail) = cache.blocks.split_at_mut(b + 1);
                let dst = &mut tail[0][..trans.cout * trans.sout * trans.sout];
                conv_forward(trans, p, &head[b], dst);
                relu(dst);
            } else {
                conv_forward(trans, p, &cache.blocks[b], &mut cache.final_map);
                relu(&mut cache.final_map);
            }
        }
        linear_forward(&self.enc_fc, p, &cache.final_map, &mut cache.latent);
    }

    fn forward_decoder(&self, p: &[f64], cache: &mut Cache) {
        let nb = self.transitions.len();
        linear_forward(&self.dec_fc, p, &cache.latent, &mut cache.dec_hidden);
        relu(&mut cache.dec_hidden);
        for b in (0..nb).rev() {
            let conv = &self.dec_conv[b];
            {
                let src: &[f64] = if b + 1 == nb { &cache.dec_hidden } else { &cache.dec_out[b + 1] };
                let sin = self.transitions[b].sout;
                upsample_forward(src, conv.cin, sin, conv.sin, &mut cache.dec_up[b]);
            }
            conv_forward(conv, p, &cache.dec_up[b], &mut cache.dec_out[b]);
            if b == 0 {
                for (o, &z) in cache.output.iter_mut().zip(&cache.dec_out[0]) {
                    *o = sigmoid(z);
                }
            } else {
                relu(&mut cache.dec_out[b]);
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// of the batch loss with respect to this sample's latent code.
    /// `extra_dz` is the centroid-term latent gradient (already scaled).
    fn backward(&self, p: &[f64], input: &[f64], cache: &mut Cache, scale: f64, extra_dz: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let nb = self.transitions.len();
        let k2 = (self.config.k * self.config.k) as f64;

        // output sigmoid + MSE
        let mut d_out: Vec<f64> = cache
            .output
            .iter()
            .zip(input)
            .map(|(&y, &x)| 2.0 * (y - x) / k2 * scale * y * (1.0 - y))
            .collect();

        for b in 0..nb {
            let conv = &self.dec_conv[b];
            let mut d_up = vec![0.0; cache.dec_up[b].len()];
            conv_backward(conv, p, &cache.dec_up[b], &d_out, grads, Some(&mut d_up));
            let (src, sin) = if b + 1 == nb {
                (&cache.dec_hidden, self.transitions[b].sout)
            } else {
                (&cache.dec_out[b + 1], self.transitions[b].sout)
            };
            let mut d_src = vec![0.0; src.len()];
            upsample_backward(&d_up, conv.cin, sin, conv.sin, &mut d_src);
            relu_backward(src, &mut d_src);
            d_out = d_src;
        }

        let mut dz = vec![0.0; self.config.latent_dim];
        linear_backward(&self.dec_fc, p, &cache.latent, &d_out, grads, &mut dz);
        for (g, e) in dz.iter_mut().zip(extra_dz) {
            *g += e;
        }

        let mut d_map = vec![0.0; cache.final_map.len()];
        linear_backward(&self.enc_fc, p, &cache.final_map, &dz, grads, &mut d_map);
        relu_backward(&cache.final_map, &mut d_map);

        // d_map: gradient at the pre-activation of block b's transition output
        for b in (0..nb).rev() {
            let buf = &cache.blocks[b];
            let mut d_buf = vec![0.0; buf.len()];
            conv_backward(&self.transitions[b], p, buf, &d_map, grads, Some(&mut d_buf));
            let block_in = self.config.block_in_channels(b);
            let hw = self.sizes[b] * self.sizes[b];
            for (l, conv) in self.dense[b].iter().enumerate().rev() {
                let start = (block_in + l * self.config.growth_rate) * hw;
                let end = start + conv.cout * hw;
                let (d_src, d_dst) = d_buf.split_at_mut(start);
                let d_dst = &mut d_dst[..conv.cout * hw];
                relu_backward(&buf[start..end], d_dst);
                conv_backward(conv, p, &buf[..start], d_dst, grads, Some(d_src));
            }
            if b > 0 {
                let mut d_prev = d_buf[..block_in * hw].to_vec();
                relu_backward(&buf[..block_in * hw], &mut d_prev);
                d_map = d_prev;
            }
        }
        dz
    }
}

struct ChunkAccum {
    grads: Vec<f64>,
    rec: f64,
    cen: f64,
    latent_grads: Vec<Vec<f64>>,
    latents: Vec<Vec<f64>>,
}

struct Cache {
    /// Per block: block input followed by every dense layer output.
    blocks: Vec<Vec<f64>>,
    final_map: Vec<f64>,
    latent: Vec<f64>,
    dec_hidden: Vec<f64>,
    dec_up: Vec<Vec<f64>>,
    dec_out: Vec<Vec<f64>>,
    output: Vec<f64>,
}

/// Flat parameter vector, arrays concatenated in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub data: Vec<f64>,
}

impl NetworkParams {
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Batch-mean reconstruction MSE.
    pub reconstruction: f64,
    /// Batch-mean squared latent-to-centroid distance.
    pub centroid: f64,
    /// `reconstruction + lambda / 2 * centroid`.
    pub total: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: LossBreakdown,
    /// Gradient of `loss.total` with respect to the flat parameters.
    pub params: Vec<f64>,
    /// Gradient of `loss.total` with respect to each sample's latent code.
    pub latents: Vec<Vec<f64>>,
    /// Latent codes computed during the forward pass.
    pub latent_values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Same statistic restricted to entries with magnitude >= 1e-6, where the
    /// floor never applies.
    pub max_relative_error_large: f64,
    pub checked: usize,
    /// Entries whose step had to be shrunk to avoid a ReLU kink.
    pub refined: usize,
}

const MAX_REFINEMENTS: usize = 3;

/// `(L(p + eps e_idx) - L(p - eps e_idx)) / 2 eps`, accumulated per element,
/// and whether both evaluations kept the baseline ReLU pattern.
#[allow(clippy::too_many_arguments)]
fn central_difference(
    net: &Network,
    probe: &mut NetworkParams,
    idx: usize,
    eps: f64,
    inputs: &[&[f64]],
    centroids: &[Vec<f64>],
    assignments: &[usize],
    lambda: f64,
    base_pattern: &[bool],
) -> Result<(f64, bool)> {
    let orig = probe.data[idx];
    probe.data[idx] = orig + eps;
    let (plus, plus_pattern) = net.forward_all(probe, inputs)?;
    probe.data[idx] = orig - eps;
    let (minus, minus_pattern) = net.forward_all(probe, inputs)?;
    probe.data[idx] = orig;

    let mut diff = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let (yp, zp) = &plus[i];
        let (ym, zm) = &minus[i];
        let mut rec = 0.0;
        for ((a, b), t) in yp.iter().zip(ym).zip(x.iter()) {
            rec += (a - b) * (a + b - 2.0 * t);
        }
        diff += rec / x.len() as f64;
        if lambda > 0.0 {
            let m = &centroids[assignments[i]];
            let mut cen = 0.0;
            for ((a, b), c) in zp.iter().zip(zm).zip(m) {
                cen += (a - b) * (a + b - 2.0 * c);
            }
            diff += 0.5 * lambda * cen;
        }
    }
    let stable = plus_pattern == base_pattern && minus_pattern == base_pattern;
    Ok((diff / inputs.len() as f64 / (2.0 * eps), stable))
}

/// Magnitude below which gradient-check entries are compared on an absolute
/// scale: the oracle's round-off is about 1e-14 in absolute terms for losses
/// of order 0.1, so a relative error is meaningless for smaller derivatives.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Compares analytic gradients with central finite differences on a random
/// subset of `n_check` parameters.
///
/// The loss difference `L(p + eps) - L(p - eps)` is accumulated as a sum of
/// per-element differences (`(y+ - y-)(y+ + y- - 2x)` for every output pixel
/// and latent entry) instead of subtracting two rounded totals, which keeps
/// the oracle's round-off well below the gradients being checked. The
/// relative error of one entry is `|a - f| / max(|a|, |f|, GRAD_CHECK_FLOOR)`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    net: &Network,
    params: &NetworkParams,
    inputs: &[&[f64]],
    centroids: &[Vec<f64>],
    assignments: &[usize],
    lambda: f64,
    epsilon: f64,
    n_check: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    use rand::seq::index::sample;

    let analytic = net.loss_and_gradients(params, inputs, centroids, assignments, lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_check = n_check.min(net.n_params());
    let mut indices = sample(&mut rng, net.n_params(), n_check).into_vec();
    indices.sort_unstable();

    let (_, base_pattern) = net.forward_all(params, inputs)?;
    let mut worst: f64 = 0.0;
    let mut worst_large: f64 = 0.0;
    let mut refined = 0;
    let mut probe = params.clone();
    for &idx in &indices {
        // A step that flips a ReLU straddles a kink, where the difference
        // quotient is not a derivative estimate; shrink the step until the
        // activation pattern is stable.
        let mut eps = epsilon;
        let mut numeric = 0.0;
        for attempt in 0..=MAX_REFINEMENTS {
            let (value, stable) = central_difference(net, &mut probe, idx, eps, inputs, centroids, assignments, lambda, &base_pattern)?;
            numeric = value;
            if stable || attempt == MAX_REFINEMENTS {
                break;
            }
            refined += 1;
            eps /= 10.0;
        }
        let a = analytic.params[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(rel);
        if a.abs().max(numeric.abs()) >= 1e-6 {
            worst_large = worst_large.max(rel);
        }
    }
    Ok(GradCheckReport { max_relative_error: worst, max_relative_error_large: worst_large, checked: indices.len(), refined })
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Reconstruction and latent code of one input.
type Outputs = (Vec<f64>, Vec<f64>);

// Clamped so the output stays strictly inside (0, 1) where f64 would round
// to an endpoint (z > ~36.7 or z < ~-708).
fn sigmoid(z: f64) -> f64 {
    let y = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn relu(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries whose (post-ReLU) activation is not positive.
fn relu_backward(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
/// Zero-padded input split into `stride x stride` phase planes of side
/// `qs`: phase (a, b) holds padded pixel (stride*i + a, stride*j + b) at
/// (i, j). Kernel tap (ky, kx) then reads phase (ky % stride, kx % stride)
/// at a fixed offset, so every tap is one contiguous run over a "wide"
/// buffer in which output pixel (y, x) sits at y * qs + x.
struct Phases {
    qs: usize,
    wide: usize,
    data: Vec<f64>,
}

impl Phases {
    fn layout(c: &Conv) -> (usize, usize) {
        let qs = (c.sin + 2 * (c.ks / 2)).div_ceil(c.stride);
        (qs, (c.sout - 1) * qs + c.sout)
    }

    fn new(c: &Conv, input: &[f64]) -> Self {
        let (qs, wide) = Self::layout(c);
        let (st, pad, side) = (c.stride, c.ks / 2, c.sin);
        let mut data = vec![0.0; c.cin * st * st * qs * qs];
        for ci in 0..c.cin {
            for a in 0..st {
                for b in 0..st {
                    let ph = &mut data[Self::offset(c, qs, ci, a, b)..][..qs * qs];
                    for i in 0..qs {
                        let Some(yy) = (st * i + a).checked_sub(pad).filter(|&y| y < side) else { continue };
                        for j in 0..qs {
                            if let Some(xx) = (st * j + b).checked_sub(pad).filter(|&x| x < side) {
                                ph[i * qs + j] = input[(ci * side + yy) * side + xx];
                            }
                        }
                    }
                }
            }
        }
        Self { qs, wide, data }
    }

    fn offset(c: &Conv, qs: usize, ci: usize, a: usize, b: usize) -> usize {
        ((ci * c.stride + a) * c.stride + b) * qs * qs
    }

    /// Start of the run read by tap (ky, kx) of input channel `ci`.
    fn tap(&self, c: &Conv, ci: usize, ky: usize, kx: usize) -> usize {
        let st = c.stride;
        Self::offset(c, self.qs, ci, ky % st, kx % st) + (ky / st) * self.qs + kx / st
    }
}

fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let n = a.len() / 4 * 4;
    for (ca, cb) in a[..n].chunks_exact(4).zip(b[..n].chunks_exact(4)) {
        for i in 0..4 {
            acc[i] += ca[i] * cb[i];
        }
    }
    let tail: f64 = a[n..].iter().zip(&b[n..]).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn conv_forward(c: &Conv, p: &[f64], input: &[f64], out: &mut [f64]) {
    let (ks, sout) = (c.ks, c.sout);
    let w = &p[c.w.offset..c.w.offset + c.w.len];
    let bias = &p[c.b.offset..c.b.offset + c.b.len];
    let ph = Phases::new(c, input);
    let (qs, wide) = (ph.qs, ph.wide);
    let mut acc = vec![0.0; wide];
    for o in 0..c.cout {
        acc.fill(bias[o]);
        for ci in 0..c.cin {
            for ky in 0..ks {
                for kx in 0..ks {
                    let wv = w[((o * c.cin + ci) * ks + ky) * ks + kx];
                    let t = ph.tap(c, ci, ky, kx);
                    axpy(&mut acc, &ph.data[t..t + wide], wv);
                }
            }
        }
        for y in 0..sout {
            out[(o * sout + y) * sout..(o * sout + y + 1) * sout].copy_from_slice(&acc[y * qs..y * qs + sout]);
        }
    }
}

fn conv_backward(c: &Conv, p: &[f64], input: &[f64], d_out: &[f64], grads: &mut [f64], d_in: Option<&mut [f64]>) {
    let (ks, sout, st, pad, side) = (c.ks, c.sout, c.stride, c.ks / 2, c.sin);
    let out_hw = sout * sout;
    let w = &p[c.w.offset..c.w.offset + c.w.len];
    {
        let db = &mut grads[c.b.offset..c.b.offset + c.b.len];
        for o in 0..c.cout {
            db[o] += d_out[o * out_hw..(o + 1) * out_hw].iter().sum::<f64>();
        }
    }
    let ph = Phases::new(c, input);
    let (qs, wide) = (ph.qs, ph.wide);
    let mut d_ph = d_in.as_ref().map(|_| vec![0.0; ph.data.len()]);
    let mut g = vec![0.0; wide];
    for o in 0..c.cout {
        for y in 0..sout {
            g[y * qs..y * qs + sout].copy_from_slice(&d_out[o * out_hw + y * sout..o * out_hw + (y + 1) * sout]);
        }
        for ci in 0..c.cin {
            for ky in 0..ks {
                for kx in 0..ks {
                    let widx = ((o * c.cin + ci) * ks + ky) * ks + kx;
                    let t = ph.tap(c, ci, ky, kx);
                    grads[c.w.offset + widx] += dot(&g, &ph.data[t..t + wide]);
                    if let Some(dp) = d_ph.as_mut() {
                        axpy(&mut dp[t..t + wide], &g, w[widx]);
                    }
                }
            }
        }
    }
    if let (Some(d_in), Some(dp)) = (d_in, d_ph) {
        for ci in 0..c.cin {
            for a in 0..st {
                for b in 0..st {
                    let phase = &dp[Phases::offset(c, qs, ci, a, b)..][..qs * qs];
                    for i in 0..qs {
                        let Some(yy) = (st * i + a).checked_sub(pad).filter(|&y| y < side) else { continue };
                        for j in 0..qs {
                            if let Some(xx) = (st * j + b).checked_sub(pad).filter(|&x| x < side) {
                                d_in[(ci * side + yy) * side + xx] += phase[i * qs + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn linear_forward(l: &Linear, p: &[f64], input: &[f64], out: &mut [f64]) {
    let w = &p[l.w.offset..l.w.offset + l.w.len];
    let b = &p[l.b.offset..l.b.offset + l.b.len];
    for (o, out_v) in out.iter_mut().enumerate() {
        let row = &w[o * l.nin..(o + 1) * l.nin];
        *out_v = b[o] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>();
    }
}

fn linear_backward(l: &Linear, p: &[f64], input: &[f64], d_out: &[f64], grads: &mut [f64], d_in: &mut [f64]) {
    let w = &p[l.w.offset..l.w.offset + l.w.len];
    for (o, &g) in d_out.iter().enumerate() {
        grads[l.b.offset + o] += g;
        if g == 0.0 {
            continue;
        }
        let gw = &mut grads[l.w.offset + o * l.nin..l.w.offset + (o + 1) * l.nin];
        for (gwv, x) in gw.iter_mut().zip(input) {
            *gwv += g * x;
        }
        for (d, wv) in d_in.iter_mut().zip(&w[o * l.nin..(o + 1) * l.nin]) {
            *d += g * wv;
        }
    }
}

/// Nearest-neighbor 2x upsampling from `sin` to `sout` (`sout <= 2 * sin`).
fn upsample_forward(input: &[f64], channels: usize, sin: usize, sout: usize, out: &mut [f64]) {
    for c in 0..channels {
        for y in 0..sout {
            let irow = &input[c * sin * sin + (y / 2) * sin..];
            let orow = &mut out[c * sout * sout + y * sout..c * sout * sout + (y + 1) * sout];
            for (x, o) in orow.iter_mut().enumerate() {
                *o = irow[x / 2];
            }
        }
    }
}

fn upsample_backward(d_out: &[f64], channels: usize, sin: usize, sout: usize, d_in: &mut [f64]) {
    for c in 0..channels {
        for y in 0..sout {
            let base = c * sin * sin + (y / 2) * sin;
            let grow = &d_out[c * sout * sout + y * sout..c * sout * sout + (y + 1) * sout];
            for (x, g) in grow.iter().enumerate() {
                d_in[base + x / 2] += g;
            }
        }
    }
}
