//! The attentive dilated CNN: LSFE (convolutions + FC) -> S2TLR (two
//! stacked self-attention blocks) -> G2A (average of both attention outputs,
//! then an FC stack ending in class logits).
//!
//! All learnable values live in one flat buffer described by [`ParamSpec`]s,
//! which keeps the optimizer, checkpointing and gradient checks uniform.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attention::{mha_backward, mha_forward, AttentionGrads, AttentionParams, MhaCache};
use super::ops::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, dropout_mask, maxpool_backward, maxpool_forward,
    relu_backward_inplace, relu_inplace, ConvGeom, ConvSpec, PoolGeom,
};
use super::{argmax, softmax, Scalar};
use crate::error::{Error, Result};

/// Maximum number of partial gradient buffers reduced per batch.
const MAX_CHUNKS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub input_side: usize,
    pub input_channels: usize,
    pub convs: Vec<ConvSpec>,
    /// Whether a 2x2 / stride-2 max pool follows each convolution.
    pub pool_after: Vec<bool>,
    pub pool_window: usize,
    pub lsfe_fc: Vec<usize>,
    pub dropout: f64,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub g2a_fc: Vec<usize>,
}

impl Default for ModelConfig {
    /// Seven classes; pipelines replace `n_classes` with the dataset's count.
    fn default() -> Self {
        Self::new(7)
    }
}

impl ModelConfig {
    /// Full-size network for 128x128 single-channel images.
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            input_side: 128,
            input_channels: 1,
            convs: vec![
                ConvSpec::new(2, 16, 1),
                ConvSpec::new(2, 32, 1),
                ConvSpec::new(2, 64, 2),
                ConvSpec::new(2, 128, 2),
            ],
            pool_after: vec![true; 4],
            pool_window: 2,
            lsfe_fc: vec![256, 128],
            dropout: 0.5,
            heads: 3,
            d_k: 128 / 3,
            d_v: 128 / 3,
            g2a_fc: vec![512, 128, 64, 32],
        }
    }

    /// Same topology shrunk to 12x12 inputs, cheap enough for finite differences.
    pub fn tiny(n_classes: usize) -> Self {
        Self {
            n_classes,
            input_side: 12,
            input_channels: 1,
            convs: vec![
                ConvSpec::new(2, 2, 1),
                ConvSpec::new(2, 3, 1),
                ConvSpec::new(2, 4, 2),
                ConvSpec::new(2, 4, 2),
            ],
            pool_after: vec![false, false, false, true],
            pool_window: 2,
            lsfe_fc: vec![8, 6],
            dropout: 0.5,
            heads: 3,
            d_k: 2,
            d_v: 2,
            g2a_fc: vec![8, 6, 5, 4],
        }
    }

    pub fn d_model(&self) -> usize {
        *self.lsfe_fc.last().unwrap_or(&0)
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_side * self.input_side
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_classes", self.n_classes),
            ("input_side", self.input_side),
            ("input_channels", self.input_channels),
            ("pool_window", self.pool_window),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.convs.is_empty() || self.lsfe_fc.is_empty() {
            return Err(Error::config("at least one convolution and one LSFE layer required"));
        }
        if self.pool_after.len() != self.convs.len() {
            return Err(Error::config(format!(
                "pool_after has {} entries for {} convolutions",
                self.pool_after.len(),
                self.convs.len()
            )));
        }
        if self.lsfe_fc.contains(&0) || self.g2a_fc.contains(&0) {
            return Err(Error::config("FC widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.feature_geometry().map(|_| ())
    }

    /// Per-stage convolution and pooling geometry plus the flattened length.
    fn feature_geometry(&self) -> Result<(Vec<ConvGeom>, Vec<Option<PoolGeom>>, usize)> {
        let (mut c, mut h, mut w) = (self.input_channels, self.input_side, self.input_side);
        let mut convs = Vec::new();
        let mut pools = Vec::new();
        for (spec, &pool) in self.convs.iter().zip(&self.pool_after) {
            let g = ConvGeom::new(spec, c, h, w)?;
            (c, h, w) = (g.out_c, g.out_h, g.out_w);
            convs.push(g);
            pools.push(if pool {
                let p = PoolGeom::new(c, h, w, self.pool_window, self.pool_window)?;
                (h, w) = (p.out_h, p.out_w);
                Some(p)
            } else {
                None
            });
        }
        Ok((convs, pools, c * h * w))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    #[serde(rename = "LSFE")]
    Lsfe,
    #[serde(rename = "S2TLR")]
    S2tlr,
    #[serde(rename = "G2A")]
    G2a,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::Lsfe => "LSFE",
            Block::S2tlr => "S2TLR",
            Block::G2a => "G2A",
        })
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LSFE" => Ok(Block::Lsfe),
            "S2TLR" => Ok(Block::S2tlr),
            "G2A" => Ok(Block::G2a),
            _ => Err(Error::config(format!("unknown module tag {s:?}; expected LSFE, S2TLR or G2A"))),
        }
    }
}

/// One named learnable tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub block: Block,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub is_bias: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Glorot-uniform bound; zero for biases.
    pub fn init_bound(&self) -> f64 {
        if self.is_bias {
            0.0
        } else {
            (6.0 / (self.fan_in + self.fan_out) as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active; masks derive from this seed and the sample's batch position.
    Train(u64),
    Infer,
}

#[derive(Debug, Clone)]
pub struct BatchOutput<T> {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub grads: Vec<T>,
    pub logits: Vec<Vec<T>>,
}

impl<T: Scalar> BatchOutput<T> {
    pub fn correct(&self, labels: &[usize]) -> usize {
        self.logits.iter().zip(labels).filter(|(z, &y)| argmax(z) == y).count()
    }
}

/// Everything a single forward pass produced, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// `stage_in[i]` is the input of convolution `i`; the last entry is the flattened feature map.
    pub stage_in: Vec<Vec<T>>,
    /// ReLU outputs of each convolution.
    pub conv_out: Vec<Vec<T>>,
    pub pool_arg: Vec<Vec<usize>>,
    /// Inputs to each LSFE dense layer followed by its final activation.
    pub lsfe_act: Vec<Vec<T>>,
    pub dropout_mask: Option<Vec<T>>,
    /// The (1, d_model) token fed to the first attention block.
    pub token: Vec<T>,
    pub st: MhaCache<T>,
    pub tt: MhaCache<T>,
    /// Inputs to each G2A dense layer, starting with the averaged attention output.
    pub g2a_act: Vec<Vec<T>>,
    pub logits: Vec<T>,
}

#[derive(Debug, Clone)]
struct Layout {
    conv: Vec<usize>,
    lsfe: Vec<usize>,
    st: usize,
    tt: usize,
    /// Hidden G2A layers followed by the output layer.
    g2a: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AttDiCnn<T> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<T>,
    conv_geom: Vec<ConvGeom>,
    pool_geom: Vec<Option<PoolGeom>>,
    flat_len: usize,
    layout: Layout,
}

const ATTENTION_PARTS: [&str; 8] = ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"];

fn build_specs(config: &ModelConfig, conv_geom: &[ConvGeom], flat_len: usize) -> (Vec<ParamSpec>, Layout) {
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut push = |name: String, block: Block, shape: Vec<usize>, fan_in: usize, fan_out: usize, is_bias: bool| {
        let offset = specs.last().map_or(0, |s| s.offset + s.len());
        specs.push(ParamSpec {
            name,
            block,
            shape,
            offset,
            fan_in,
            fan_out,
            is_bias,
        });
        specs.len() - 1
    };

    let mut conv = Vec::new();
    for (i, g) in conv_geom.iter().enumerate() {
        let area = g.kh * g.kw;
        conv.push(push(
            format!("lsfe.conv{i}.kernel"),
            Block::Lsfe,
            vec![g.out_c, g.in_c, g.kh, g.kw],
            g.in_c * area,
            g.out_c * area,
            false,
        ));
        push(format!("lsfe.conv{i}.bias"), Block::Lsfe, vec![g.out_c], 0, 0, true);
    }

    let dense = |prefix: &str, block: Block, sizes: &[(usize, usize)], push: &mut dyn FnMut(String, Block, Vec<usize>, usize, usize, bool) -> usize| {
        sizes
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| {
                let idx = push(format!("{prefix}{i}.weight"), block, vec![a, b], a, b, false);
                push(format!("{prefix}{i}.bias"), block, vec![b], 0, 0, true);
                idx
            })
            .collect::<Vec<_>>()
    };

    let widths = |first: usize, rest: &[usize]| -> Vec<(usize, usize)> {
        let mut prev = first;
        rest.iter()
            .map(|&w| {
                let pair = (prev, w);
                prev = w;
                pair
            })
            .collect()
    };

    let lsfe = dense("lsfe.fc", Block::Lsfe, &widths(flat_len, &config.lsfe_fc), &mut push);

    let dm = config.d_model();
    let (hk, hv) = (config.heads * config.d_k, config.heads * config.d_v);
    let attention = |tag: &str, push: &mut dyn FnMut(String, Block, Vec<usize>, usize, usize, bool) -> usize| {
        let shapes = [
            (vec![dm, hk], dm, hk),
            (vec![hk], 0, 0),
            (vec![dm, hk], dm, hk),
            (vec![hk], 0, 0),
            (vec![dm, hv], dm, hv),
            (vec![hv], 0, 0),
            (vec![hv, dm], hv, dm),
            (vec![dm], 0, 0),
        ];
        let mut first = None;
        for (part, (shape, fi, fo)) in ATTENTION_PARTS.iter().zip(shapes) {
            let idx = push(format!("s2tlr.{tag}.{part}"), Block::S2tlr, shape, fi, fo, part.starts_with('b'));
            first.get_or_insert(idx);
        }
        first.unwrap()
    };
    let st = attention("st", &mut push);
    let tt = attention("tt", &mut push);

    let mut head_sizes = widths(dm, &config.g2a_fc);
    head_sizes.push((config.g2a_fc.last().copied().unwrap_or(dm), config.n_classes));
    let mut g2a = dense("g2a.fc", Block::G2a, &head_sizes[..head_sizes.len() - 1], &mut push);
    g2a.extend(dense("g2a.out", Block::G2a, &head_sizes[head_sizes.len() - 1..], &mut push));

    (specs, Layout { conv, lsfe, st, tt, g2a })
}

/// Splits `buf` into consecutive mutable pieces of the given lengths.
fn split_many<'a, T>(mut buf: &'a mut [T], lens: &[usize]) -> Vec<&'a mut [T]> {
    let mut out = Vec::with_capacity(lens.len());
    for &n in lens {
        let (head, tail) = std::mem::take(&mut buf).split_at_mut(n);
        out.push(head);
        buf = tail;
    }
    out
}

impl<T: Scalar> AttDiCnn<T> {
    /// Fresh model with Glorot-uniform weights and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::from_params(config, Vec::new())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in &model.specs {
            let bound = spec.init_bound();
            for v in &mut model.params[spec.range()] {
                *v = if bound > 0.0 { T::of(rng.random_range(-bound..=bound)) } else { T::zero() };
            }
        }
        Ok(model)
    }

    /// Rebuild a model around an existing parameter buffer (empty buffer = zeros).
    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let (conv_geom, pool_geom, flat_len) = config.feature_geometry()?;
        let (specs, layout) = build_specs(&config, &conv_geom, flat_len);
        let total = specs.last().map_or(0, |s| s.offset + s.len());
        let params = if params.is_empty() { vec![T::zero(); total] } else { params };
        if params.len() != total {
            return Err(Error::Shape {
                context: "parameter buffer vs model config",
                left: vec![params.len()],
                right: vec![total],
            });
        }
        Ok(Self {
            config,
            specs,
            params,
            conv_geom,
            pool_geom,
            flat_len,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<T> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn flatten_len(&self) -> usize {
        self.flat_len
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.specs.iter().find(|s| s.name == name).map(|s| &self.params[s.range()])
    }

    /// Every value belonging to a block, in declaration order.
    pub fn block_values(&self, block: Block) -> Vec<T> {
        self.specs
            .iter()
            .filter(|s| s.block == block)
            .flat_map(|s| self.params[s.range()].iter().copied())
            .collect()
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> AttDiCnn<U> {
        AttDiCnn {
            config: self.config.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(|v| U::of(v.f64())).collect(),
            conv_geom: self.conv_geom.clone(),
            pool_geom: self.pool_geom.clone(),
            flat_len: self.flat_len,
            layout: self.layout.clone(),
        }
    }

    fn p(&self, idx: usize) -> &[T] {
        &self.params[self.specs[idx].range()]
    }

    /// Parameters of attention block 0 (spatial) or 1 (temporal).
    pub fn attention_params(&self, block: usize) -> AttentionParams<'_, T> {
        let first = if block == 0 { self.layout.st } else { self.layout.tt };
        AttentionParams {
            w_q: self.p(first),
            b_q: self.p(first + 1),
            w_k: self.p(first + 2),
            b_k: self.p(first + 3),
            w_v: self.p(first + 4),
            b_v: self.p(first + 5),
            w_o: self.p(first + 6),
            b_o: self.p(first + 7),
            heads: self.config.heads,
            d_model: self.config.d_model(),
            d_k: self.config.d_k,
            d_v: self.config.d_v,
        }
    }

    fn check_input(&self, image: &[T]) -> Result<()> {
        if image.len() != self.config.input_len() {
            return Err(Error::Shape {
                context: "image vs model input",
                left: vec![image.len()],
                right: vec![self.config.input_channels, self.config.input_side, self.config.input_side],
            });
        }
        Ok(())
    }

    pub fn forward(&self, image: &[T], mode: Mode) -> Result<Vec<T>> {
        Ok(self.forward_trace(image, mode, 0)?.logits)
    }

    pub fn predict_proba(&self, image: &[T]) -> Result<Vec<T>> {
        Ok(softmax(&self.forward(image, Mode::Infer)?))
    }

    /// Full forward pass; `stream` selects the dropout mask stream under `Mode::Train`.
    pub fn forward_trace(&self, image: &[T], mode: Mode, stream: u64) -> Result<ForwardTrace<T>> {
        self.check_input(image)?;
        let n_conv = self.conv_geom.len();
        let mut stage_in = Vec::with_capacity(n_conv + 1);
        let mut conv_out = Vec::with_capacity(n_conv);
        let mut pool_arg = Vec::with_capacity(n_conv);
        let mut x = image.to_vec();
        for (i, (g, pool)) in self.conv_geom.iter().zip(&self.pool_geom).enumerate() {
            let w = self.layout.conv[i];
            let mut out = vec![T::zero(); g.out_len()];
            conv2d_forward(g, &x, self.p(w), self.p(w + 1), &mut out);
            relu_inplace(&mut out);
            stage_in.push(std::mem::take(&mut x));
            x = match pool {
                Some(pg) => {
                    let mut pooled = vec![T::zero(); pg.out_len()];
                    let mut arg = vec![0; pg.out_len()];
                    maxpool_forward(pg, &out, &mut pooled, &mut arg);
                    pool_arg.push(arg);
                    pooled
                }
                None => {
                    pool_arg.push(Vec::new());
                    out.clone()
                }
            };
            conv_out.push(out);
        }
        stage_in.push(x.clone());

        let mut lsfe_act = vec![x];
        for &w in &self.layout.lsfe {
            let input = lsfe_act.last().unwrap();
            let mut out = vec![T::zero(); self.specs[w + 1].len()];
            dense_forward(input, self.p(w), self.p(w + 1), &mut out);
            relu_inplace(&mut out);
            lsfe_act.push(out);
        }
        let mut token = lsfe_act.last().unwrap().clone();
        let dropout_mask = match mode {
            Mode::Train(seed) if self.config.dropout > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                let mask: Vec<T> = dropout_mask(token.len(), self.config.dropout, &mut rng);
                token.iter_mut().zip(&mask).for_each(|(t, &m)| *t *= m);
                Some(mask)
            }
            _ => None,
        };

        let st = mha_forward(&self.attention_params(0), &token, 1, &token, 1);
        let tt = mha_forward(&self.attention_params(1), &st.out, 1, &st.out, 1);
        let (g2a_act, logits) = self.head(&st.out, &tt.out);
        Ok(ForwardTrace {
            stage_in,
            conv_out,
            pool_arg,
            lsfe_act,
            dropout_mask,
            token,
            st,
            tt,
            g2a_act,
            logits,
        })
    }

    /// Local/global averaging followed by the FC stack.
    fn head(&self, w_l: &[T], w_g: &[T]) -> (Vec<Vec<T>>, Vec<T>) {
        let half = T::of(0.5);
        let avg: Vec<T> = w_l.iter().zip(w_g).map(|(&a, &b)| (a + b) * half).collect();
        let mut acts = vec![avg];
        let last = self.layout.g2a.len() - 1;
        for (k, &w) in self.layout.g2a.iter().enumerate() {
            let mut out = vec![T::zero(); self.specs[w + 1].len()];
            dense_forward(acts.last().unwrap(), self.p(w), self.p(w + 1), &mut out);
            if k == last {
                return (acts, out);
            }
            relu_inplace(&mut out);
            acts.push(out);
        }
        unreachable!("G2A always ends in an output layer")
    }

    /// Logits from explicit local (`w_l`) and global (`w_g`) attention outputs.
    pub fn g2a_logits(&self, w_l: &[T], w_g: &[T]) -> Vec<T> {
        self.head(w_l, w_g).1
    }

    /// Backpropagate `d_logits` through one trace, accumulating into `grads`.
    fn backward(&self, t: &ForwardTrace<T>, d_logits: &[T], grads: &mut [T]) {
        let g2a = &self.layout.g2a;
        let mut d = d_logits.to_vec();
        for (k, &w) in g2a.iter().enumerate().rev() {
            let input = &t.g2a_act[k];
            let mut dx = vec![T::zero(); input.len()];
            let wl = self.specs[w].len();
            let (gw, gb) = grads[self.specs[w].offset..self.specs[w + 1].range().end].split_at_mut(wl);
            dense_backward(input, self.p(w), &d, gw, gb, Some(&mut dx));
            if k > 0 {
                relu_backward_inplace(input, &mut dx);
            }
            d = dx;
        }

        // average: each attention output receives half the gradient
        let half = T::of(0.5);
        d.iter_mut().for_each(|v| *v *= half);
        let mut d_st_out = d.clone();
        let (dq, dkv) = self.attention_backward(1, &t.tt, &d, grads);
        for ((a, q), kv) in d_st_out.iter_mut().zip(&dq).zip(&dkv) {
            *a += *q + *kv;
        }
        let (dq, dkv) = self.attention_backward(0, &t.st, &d_st_out, grads);
        let mut d: Vec<T> = dq.iter().zip(&dkv).map(|(&a, &b)| a + b).collect();
        if let Some(mask) = &t.dropout_mask {
            d.iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
        }

        for (k, &w) in self.layout.lsfe.iter().enumerate().rev() {
            relu_backward_inplace(&t.lsfe_act[k + 1], &mut d);
            let input = &t.lsfe_act[k];
            let mut dx = vec![T::zero(); input.len()];
            let wl = self.specs[w].len();
            let (gw, gb) = grads[self.specs[w].offset..self.specs[w + 1].range().end].split_at_mut(wl);
            dense_backward(input, self.p(w), &d, gw, gb, Some(&mut dx));
            d = dx;
        }

        for i in (0..self.conv_geom.len()).rev() {
            let g = &self.conv_geom[i];
            let mut d_conv = match &self.pool_geom[i] {
                Some(_) => {
                    let mut buf = vec![T::zero(); g.out_len()];
                    maxpool_backward(&d, &t.pool_arg[i], &mut buf);
                    buf
                }
                None => d,
            };
            relu_backward_inplace(&t.conv_out[i], &mut d_conv);
            let w = self.layout.conv[i];
            let wl = self.specs[w].len();
            let (gw, gb) = grads[self.specs[w].offset..self.specs[w + 1].range().end].split_at_mut(wl);
            if i == 0 {
                conv2d_backward(g, &t.stage_in[i], self.p(w), &d_conv, gw, gb, None);
                d = Vec::new();
            } else {
                let mut dx = vec![T::zero(); g.in_len()];
                conv2d_backward(g, &t.stage_in[i], self.p(w), &d_conv, gw, gb, Some(&mut dx));
                d = dx;
            }
        }
    }

    fn attention_backward(&self, block: usize, cache: &MhaCache<T>, d_out: &[T], grads: &mut [T]) -> (Vec<T>, Vec<T>) {
        let first = if block == 0 { self.layout.st } else { self.layout.tt };
        let start = self.specs[first].offset;
        let end = self.specs[first + 7].range().end;
        let lens: Vec<usize> = (first..first + 8).map(|i| self.specs[i].len()).collect();
        let mut parts = split_many(&mut grads[start..end], &lens).into_iter();
        let mut next = || parts.next().unwrap();
        let g = AttentionGrads {
            w_q: next(),
            b_q: next(),
            w_k: next(),
            b_k: next(),
            w_v: next(),
            b_v: next(),
            w_o: next(),
            b_o: next(),
        };
        mha_backward(&self.attention_params(block), cache, d_out, g)
    }

    /// Mean softmax cross-entropy over the batch and its exact gradient.
    ///
    /// Samples are processed in at most 16 fixed chunks whose partial
    /// gradients are summed in chunk order, so results do not depend on the
    /// thread count.
    pub fn loss_and_grad(&self, images: &[&[T]], labels: &[usize], mode: Mode) -> Result<BatchOutput<T>> {
        if images.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if images.len() != labels.len() {
            return Err(Error::Shape {
                context: "batch images vs labels",
                left: vec![images.len()],
                right: vec![labels.len()],
            });
        }
        for (index, &label) in labels.iter().enumerate() {
            if label >= self.config.n_classes {
                return Err(Error::LabelOutOfRange {
                    index,
                    label,
                    n_classes: self.config.n_classes,
                });
            }
        }
        let batch = images.len();
        let chunk = batch.div_ceil(batch.min(MAX_CHUNKS));
        let inv_batch = T::one() / T::of(batch as f64);

        type Partial<T> = (Vec<T>, Vec<(f64, Vec<T>)>);
        let partials: Vec<Result<Partial<T>>> = (0..batch)
            .step_by(chunk)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|start| {
                let mut grads = vec![T::zero(); self.params.len()];
                let mut out = Vec::new();
                for i in start..(start + chunk).min(batch) {
                    let trace = self.forward_trace(images[i], mode, i as u64)?;
                    let probs = softmax(&trace.logits);
                    let loss = -probs[labels[i]].f64().ln();
                    if !loss.is_finite() || trace.logits.iter().any(|z| !z.is_finite()) {
                        return Err(Error::NonFiniteLoss { index: i });
                    }
                    let mut d: Vec<T> = probs.iter().map(|&p| p * inv_batch).collect();
                    d[labels[i]] -= inv_batch;
                    self.backward(&trace, &d, &mut grads);
                    out.push((loss, trace.logits));
                }
                Ok((grads, out))
            })
            .collect();

        let mut grads = vec![T::zero(); self.params.len()];
        let mut loss = 0.0;
        let mut logits = Vec::with_capacity(batch);
        for part in partials {
            let (g, samples) = part?;
            grads.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
            for (l, z) in samples {
                loss += l;
                logits.push(z);
            }
        }
        Ok(BatchOutput {
            loss: loss / batch as f64,
            grads,
            logits,
        })
    }
}
