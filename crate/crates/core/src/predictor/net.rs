//! A small 2.5D encoder-decoder: each axial slice is segmented from itself
//! plus `context_slices` neighbours on either side, stacked as channels.
//!
//! Level `l` of the encoder is one 3x3 convolution with `base_filters * 2^l`
//! filters, ELU and channel dropout, followed by 2x2 mean pooling. Each
//! decoder level upsamples (nearest), concatenates the encoder skip, and
//! applies the same conv/ELU/dropout block. A 1x1 convolution and a sigmoid
//! give the foreground probability.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool2, avg_pool2_backward, concat, conv_backward, conv_forward, elu, elu_grad, split, upsample2,
    upsample2_backward, ConvLayout, FeatureMap,
};
use super::{PredictorError, Result};
use crate::seed::SeedPath;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    /// Neighbouring slices on each side; the input has `2 * context + 1` channels.
    pub context_slices: usize,
    pub n_blocks: usize,
    pub base_filters: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            context_slices: 2,
            n_blocks: 2,
            base_filters: 8,
        }
    }
}

impl PredictorConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.context_slices + 1
    }

    /// In-plane sizes must be divisible by this.
    pub fn plane_multiple(&self) -> usize {
        1 << (self.n_blocks - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.n_blocks > 6 || self.base_filters == 0 {
            return Err(PredictorError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct NetLayout {
    pub encoders: Vec<ConvLayout>,
    /// Indexed by level; level `l` reads level `l + 1`.
    pub decoders: Vec<ConvLayout>,
    pub head: ConvLayout,
    pub n_params: usize,
}

impl NetLayout {
    fn new(cfg: &PredictorConfig) -> Self {
        let mut offset = 0;
        let mut conv = |cin: usize, cout: usize, k: usize| {
            let l = ConvLayout {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                weight_offset: offset,
                bias_offset: offset + cout * cin * k * k,
            };
            offset = l.bias_offset + cout;
            l
        };
        let width = |l: usize| cfg.base_filters << l;
        let encoders: Vec<_> = (0..cfg.n_blocks)
            .map(|l| {
                let cin = if l == 0 { cfg.input_channels() } else { width(l - 1) };
                conv(cin, width(l), 3)
            })
            .collect();
        let decoders: Vec<_> = (0..cfg.n_blocks - 1)
            .map(|l| conv(width(l + 1) + width(l), width(l), 3))
            .collect();
        let head = conv(width(0), 1, 1);
        NetLayout {
            encoders,
            decoders,
            head,
            n_params: offset,
        }
    }

    pub fn convs(&self) -> impl Iterator<Item = (&'static str, usize, &ConvLayout)> {
        self.encoders
            .iter()
            .enumerate()
            .map(|(i, l)| ("enc", i, l))
            .chain(self.decoders.iter().enumerate().map(|(i, l)| ("dec", i, l)))
            .chain(std::iter::once(("head", 0, &self.head)))
    }
}

/// Per-channel multipliers: 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn channel_dropout_mask<R: Rng + ?Sized>(channels: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate <= 0.0 {
        return vec![1.0; channels];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..channels)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

struct Block {
    input: FeatureMap,
    pre: FeatureMap,
    mask: Vec<f64>,
}

fn activate(pre: &FeatureMap, mask: &[f64]) -> FeatureMap {
    let mut out = FeatureMap::zeros(pre.channels, pre.height, pre.width);
    for c in 0..pre.channels {
        let m = mask[c];
        let dst = out.plane_mut(c);
        if m == 0.0 {
            continue;
        }
        for (o, &p) in dst.iter_mut().zip(pre.plane(c)) {
            *o = m * elu(p);
        }
    }
    out
}

fn activate_backward(block: &Block, grad_out: &FeatureMap) -> FeatureMap {
    let mut g = FeatureMap::zeros(grad_out.channels, grad_out.height, grad_out.width);
    for c in 0..grad_out.channels {
        let m = block.mask[c];
        if m == 0.0 {
            continue;
        }
        let pre = block.pre.plane(c);
        for ((o, &go), &p) in g.plane_mut(c).iter_mut().zip(grad_out.plane(c)).zip(pre) {
            *o = go * m * elu_grad(p);
        }
    }
    g
}

/// Intermediate values of one slice's forward pass.
pub(crate) struct SliceCache {
    encoders: Vec<Block>,
    decoders: Vec<Option<Block>>,
    head_input: FeatureMap,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceNet {
    config: PredictorConfig,
    layout: NetLayout,
    params: Vec<f64>,
}

impl SliceNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = NetLayout::new(&config);
        let mut params = vec![0.0; layout.n_params];
        let mut rng = SeedPath::root(seed).label("init").rng();
        for (_, _, l) in layout.convs() {
            let bound = (6.0 / (l.fan_in() + l.fan_out()) as f64).sqrt();
            for w in &mut params[l.weight_offset..l.weight_offset + l.weight_len()] {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(SliceNet { config, layout, params })
    }

    pub fn from_params(config: PredictorConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = NetLayout::new(&config);
        if params.len() != layout.n_params {
            return Err(PredictorError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                layout.n_params,
                params.len()
            )));
        }
        Ok(SliceNet { config, layout, params })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.layout.n_params
    }

    pub(crate) fn layout(&self) -> &NetLayout {
        &self.layout
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let m = self.config.plane_multiple();
        if !dims[0].is_multiple_of(m) || !dims[1].is_multiple_of(m) {
            return Err(PredictorError::IncompatibleDims { dims, multiple: m });
        }
        Ok(())
    }

    /// Input stack for slice `z`; out-of-range neighbours replicate the edge slice.
    pub(crate) fn slice_input(&self, image: &Volume, z: usize) -> FeatureMap {
        let [nx, ny, nz] = image.dims();
        let c = self.config.context_slices as isize;
        let plane = nx * ny;
        let mut data = Vec::with_capacity((2 * c as usize + 1) * plane);
        for dz in -c..=c {
            let zz = (z as isize + dz).clamp(0, nz as isize - 1) as usize;
            data.extend(image.data()[zz * plane..(zz + 1) * plane].iter().map(|&v| f64::from(v)));
        }
        FeatureMap {
            channels: 2 * c as usize + 1,
            height: ny,
            width: nx,
            data,
        }
    }

    pub(crate) fn forward_slice(
        &self,
        input: FeatureMap,
        dropout_rate: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> SliceCache {
        let levels = self.config.n_blocks;
        let mut rng = rng;
        let mut mask = |channels: usize| match rng.as_deref_mut() {
            Some(r) if dropout_rate > 0.0 => channel_dropout_mask(channels, dropout_rate, r),
            _ => vec![1.0; channels],
        };

        let mut encoders: Vec<Block> = Vec::with_capacity(levels);
        let mut outputs: Vec<FeatureMap> = Vec::with_capacity(levels);
        let mut x = input;
        for l in 0..levels {
            if l > 0 {
                x = avg_pool2(&outputs[l - 1]);
            }
            let layout = &self.layout.encoders[l];
            let pre = conv_forward(layout, &self.params, &x);
            let m = mask(layout.out_channels);
            outputs.push(activate(&pre, &m));
            encoders.push(Block {
                input: std::mem::replace(&mut x, FeatureMap::zeros(0, 0, 0)),
                pre,
                mask: m,
            });
        }

        let mut decoders: Vec<Option<Block>> = (0..levels.saturating_sub(1)).map(|_| None).collect();
        let mut current = outputs.pop().expect("at least one level");
        for l in (0..levels - 1).rev() {
            let layout = &self.layout.decoders[l];
            let cat = concat(&upsample2(&current), &outputs[l]);
            let pre = conv_forward(layout, &self.params, &cat);
            let m = mask(layout.out_channels);
            current = activate(&pre, &m);
            decoders[l] = Some(Block {
                input: cat,
                pre,
                mask: m,
            });
        }

        let logits = conv_forward(&self.layout.head, &self.params, &current);
        let probs = logits.data.iter().map(|&z| sigmoid(z)).collect();
        SliceCache {
            encoders,
            decoders,
            head_input: current,
            probs,
        }
    }

    /// Accumulates `d loss / d params` given `d loss / d logits`.
    pub(crate) fn backward_slice(&self, cache: &SliceCache, grad_logits: &[f64], grads: &mut [f64]) {
        let levels = self.config.n_blocks;
        let (h, w) = (cache.head_input.height, cache.head_input.width);
        let g_logits = FeatureMap {
            channels: 1,
            height: h,
            width: w,
            data: grad_logits.to_vec(),
        };
        let mut g = conv_backward(
            &self.layout.head,
            &self.params,
            &cache.head_input,
            &g_logits,
            grads,
            true,
        )
        .expect("input grad requested");

        // gradients reaching each encoder output through skips
        let mut enc_grads: Vec<Option<FeatureMap>> = (0..levels).map(|_| None).collect();
        for l in 0..levels - 1 {
            let block = cache.decoders[l].as_ref().expect("decoder cached");
            let layout = &self.layout.decoders[l];
            let g_pre = activate_backward(block, &g);
            let g_cat =
                conv_backward(layout, &self.params, &block.input, &g_pre, grads, true).expect("input grad requested");
            let up_channels = layout.in_channels - self.layout.encoders[l].out_channels;
            let (g_up, g_skip) = split(&g_cat, up_channels);
            enc_grads[l] = Some(g_skip);
            g = upsample2_backward(&g_up);
        }
        add_into(&mut enc_grads[levels - 1], g);

        for l in (0..levels).rev() {
            let g_out = enc_grads[l].take().expect("encoder grad");
            let block = &cache.encoders[l];
            let g_pre = activate_backward(block, &g_out);
            let g_in = conv_backward(
                &self.layout.encoders[l],
                &self.params,
                &block.input,
                &g_pre,
                grads,
                l > 0,
            );
            if l > 0 {
                let g_prev = avg_pool2_backward(&g_in.expect("input grad requested"));
                add_into(&mut enc_grads[l - 1], g_prev);
            }
        }
    }

    /// Foreground probabilities for every slice, restacked along z.
    pub fn predict_volume(&self, image: &Volume, dropout_rate: f32, seed: u64) -> Result<Volume> {
        self.check_dims(image.dims())?;
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(PredictorError::InvalidRate(dropout_rate));
        }
        let rate = f64::from(dropout_rate);
        let [nx, ny, nz] = image.dims();
        let mut out = Vec::with_capacity(nx * ny * nz);
        let root = SeedPath::root(seed);
        for z in 0..nz {
            let input = self.slice_input(image, z);
            let cache = if rate > 0.0 {
                let mut rng = root.index(z as u64).rng();
                self.forward_slice(input, rate, Some(&mut rng))
            } else {
                self.forward_slice(input, 0.0, None)
            };
            out.extend(cache.probs.iter().map(|&p| p as f32));
        }
        Ok(image.with_data(out)?)
    }
}

fn add_into(slot: &mut Option<FeatureMap>, g: FeatureMap) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
