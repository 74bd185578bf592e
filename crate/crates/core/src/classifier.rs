//! A small convolutional classifier `M = L∘F`.
//!
//! Inputs are shifted by −0.5 so `[0, 1]` pixels are centred on zero. `F` is
//! a stack of 3×3 convolution stages (zero padding 1, ReLU), each
//! downsampling by its stride. `L` is global max pooling over `(h, w)` followed
//! by one fully connected layer producing `N` logits. The last ReLU output is
//! the feature map the detectors operate on.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::tensor::{argmax, dot, FeatureMap, Image};

const CHECKPOINT_MAGIC: &[u8; 4] = b"TCNN";
const CHECKPOINT_VERSION: u8 = 1;

/// One convolution stage. Weights are laid out `[ky][kx][cin][cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvStage {
    pub fn zeros(kernel: usize, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            kernel,
            in_channels,
            out_channels,
            stride,
            weights: vec![0.0; kernel * kernel * in_channels * out_channels],
            bias: vec![0.0; out_channels],
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Input index read by output `o` at kernel offset `k`, `None` in the
    /// zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.pad())
            .filter(|&v| v < len)
    }

    fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    #[inline]
    fn w_index(&self, ky: usize, kx: usize, ci: usize) -> usize {
        ((ky * self.kernel + kx) * self.in_channels + ci) * self.out_channels
    }

    /// Returns the pre-activation output.
    fn forward(&self, input: &[f64], ih: usize, iw: usize) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = (self.out_size(ih), self.out_size(iw));
        let co_n = self.out_channels;
        let mut out = vec![0.0; oh * ow * co_n];
        for y in 0..oh {
            for x in 0..ow {
                let o = &mut out[(y * ow + x) * co_n..(y * ow + x + 1) * co_n];
                o.copy_from_slice(&self.bias);
                for ky in 0..self.kernel {
                    let Some(sy) = self.source(y, ky, ih) else {
                        continue;
                    };
                    for kx in 0..self.kernel {
                        let Some(sx) = self.source(x, kx, iw) else {
                            continue;
                        };
                        let inp = &input[(sy * iw + sx) * self.in_channels..][..self.in_channels];
                        for (ci, &v) in inp.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let w = &self.weights[self.w_index(ky, kx, ci)..][..co_n];
                            for (acc, &wv) in o.iter_mut().zip(w) {
                                *acc += v * wv;
                            }
                        }
                    }
                }
            }
        }
        (out, oh, ow)
    }

    /// Backpropagates `grad_pre` (gradient w.r.t. the pre-activation output).
    /// Accumulates parameter gradients into `grads` when given and returns the
    /// gradient w.r.t. the stage input.
    fn backward(
        &self,
        input: &[f64],
        ih: usize,
        iw: usize,
        grad_pre: &[f64],
        mut grads: Option<&mut StageGrads>,
    ) -> Vec<f64> {
        let (oh, ow) = (self.out_size(ih), self.out_size(iw));
        let co_n = self.out_channels;
        let mut grad_in = vec![0.0; input.len()];
        for y in 0..oh {
            for x in 0..ow {
                let g = &grad_pre[(y * ow + x) * co_n..][..co_n];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                if let Some(gr) = grads.as_deref_mut() {
                    for (b, &gv) in gr.bias.iter_mut().zip(g) {
                        *b += gv;
                    }
                }
                for ky in 0..self.kernel {
                    let Some(sy) = self.source(y, ky, ih) else {
                        continue;
                    };
                    for kx in 0..self.kernel {
                        let Some(sx) = self.source(x, kx, iw) else {
                            continue;
                        };
                        let base = (sy * iw + sx) * self.in_channels;
                        for ci in 0..self.in_channels {
                            let wi = self.w_index(ky, kx, ci);
                            let w = &self.weights[wi..][..co_n];
                            grad_in[base + ci] += dot(w, g);
                            if let Some(gr) = grads.as_deref_mut() {
                                let v = input[base + ci];
                                if v != 0.0 {
                                    for (gw, &gv) in gr.weights[wi..][..co_n].iter_mut().zip(g) {
                                        *gw += v * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone)]
struct StageGrads {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Gradients mirroring the parameter layout of [`ToyCnn`].
#[derive(Debug, Clone)]
struct ModelGrads {
    stages: Vec<StageGrads>,
    fc_weights: Vec<f64>,
    fc_bias: Vec<f64>,
}

impl ModelGrads {
    fn zeros_like(model: &ToyCnn) -> Self {
        Self {
            stages: model
                .stages
                .iter()
                .map(|s| StageGrads {
                    weights: vec![0.0; s.weights.len()],
                    bias: vec![0.0; s.bias.len()],
                })
                .collect(),
            fc_weights: vec![0.0; model.fc_weights.len()],
            fc_bias: vec![0.0; model.fc_bias.len()],
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for s in &self.stages {
            out.push(&s.weights);
            out.push(&s.bias);
        }
        out.push(&self.fc_weights);
        out.push(&self.fc_bias);
        out
    }

    fn add(&mut self, other: &ModelGrads) {
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            add_into(&mut a.weights, &b.weights);
            add_into(&mut a.bias, &b.bias);
        }
        add_into(&mut self.fc_weights, &other.fc_weights);
        add_into(&mut self.fc_bias, &other.fc_bias);
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Desk-scale CNN classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCnn {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub stages: Vec<ConvStage>,
    /// `[d][n]`, `D×N`.
    pub fc_weights: Vec<f64>,
    pub fc_bias: Vec<f64>,
}

/// Intermediate values kept for backpropagation.
struct ForwardCache {
    /// Input to each stage (post-ReLU of the previous one) with its spatial size.
    inputs: Vec<(Vec<f64>, usize, usize)>,
    /// Pre-activation output of each stage.
    pre: Vec<Vec<f64>>,
    fmap: FeatureMap,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

/// The scalar head whose input gradient is requested.
#[derive(Debug, Clone, Copy)]
pub enum Selector<'a> {
    /// A single logit `M(x)[n]`.
    Logit(usize),
    /// `max_{h,w} F(x)[h,w]·k` for a detector kernel `k`.
    Detector(&'a [f64]),
}

impl ToyCnn {
    /// Zero-initialised model. `stage_channels` lists the output channels of each
    /// stride-2 3×3 stage.
    pub fn zeros(
        input_height: usize,
        input_width: usize,
        input_channels: usize,
        stage_channels: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if stage_channels.is_empty() || stage_channels.contains(&0) {
            return Err(Error::Config(
                "need at least one stage, all with channels > 0".into(),
            ));
        }
        if num_classes == 0 || input_height == 0 || input_width == 0 {
            return Err(Error::Config("empty input or zero classes".into()));
        }
        let mut stages = Vec::with_capacity(stage_channels.len());
        let mut cin = input_channels;
        for &cout in stage_channels {
            stages.push(ConvStage::zeros(3, cin, cout, 2));
            cin = cout;
        }
        Ok(Self {
            input_height,
            input_width,
            input_channels,
            stages,
            fc_weights: vec![0.0; cin * num_classes],
            fc_bias: vec![0.0; num_classes],
        })
    }

    /// He-normal initialisation for convolutions, `N(0, 1/D)` for the head.
    pub fn init(
        input_height: usize,
        input_width: usize,
        input_channels: usize,
        stage_channels: &[usize],
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::zeros(
            input_height,
            input_width,
            input_channels,
            stage_channels,
            num_classes,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &mut model.stages {
            let fan_in = (s.kernel * s.kernel * s.in_channels) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            for w in &mut s.weights {
                *w = normal.sample(&mut rng);
            }
        }
        let d = model.depth();
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("finite std");
        for w in &mut model.fc_weights {
            *w = normal.sample(&mut rng);
        }
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.fc_bias.len()
    }

    /// `D`, channels of the last stage.
    pub fn depth(&self) -> usize {
        self.stages
            .last()
            .map_or(self.input_channels, |s| s.out_channels)
    }

    /// Spatial size `(H, W)` of `F(x)`.
    pub fn fmap_size(&self) -> (usize, usize) {
        self.stages
            .iter()
            .fold((self.input_height, self.input_width), |(h, w), s| {
                (s.out_size(h), s.out_size(w))
            })
    }

    fn check_input(&self, x: &Image) -> Result<()> {
        if (x.height(), x.width(), x.channels())
            != (self.input_height, self.input_width, self.input_channels)
        {
            return Err(Error::dim(format!(
                "image {}x{}x{} does not match model input {}x{}x{}",
                x.height(),
                x.width(),
                x.channels(),
                self.input_height,
                self.input_width,
                self.input_channels
            )));
        }
        Ok(())
    }

    fn forward_raw(&self, input: &[f64]) -> ForwardCache {
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut act: Vec<f64> = input.iter().map(|v| v - 0.5).collect();
        let mut inputs = Vec::with_capacity(self.stages.len());
        let mut pre = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let (z, oh, ow) = s.forward(&act, h, w);
            let a: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
            inputs.push((std::mem::replace(&mut act, a), h, w));
            pre.push(z);
            h = oh;
            w = ow;
        }
        let fmap = FeatureMap::new(h, w, self.depth(), act).expect("finite activations");
        let pooled = fmap.max_pool();
        let logits = self.head(&pooled);
        ForwardCache {
            inputs,
            pre,
            fmap,
            pooled,
            logits,
        }
    }

    /// `L` applied to pooled features.
    pub fn head(&self, pooled: &[f64]) -> Vec<f64> {
        let n = self.num_classes();
        let mut logits = self.fc_bias.clone();
        for (d, &p) in pooled.iter().enumerate() {
            for (l, &w) in logits.iter_mut().zip(&self.fc_weights[d * n..(d + 1) * n]) {
                *l += p * w;
            }
        }
        logits
    }

    /// Returns `(F(x), M(x))`.
    pub fn forward(&self, x: &Image) -> Result<(FeatureMap, Vec<f64>)> {
        self.check_input(x)?;
        let cache = self.forward_raw(x.data());
        Ok((cache.fmap, cache.logits))
    }

    /// Backpropagates a gradient on `F(x)` down to the input, optionally
    /// accumulating parameter gradients.
    fn backward_fmap(
        &self,
        cache: &ForwardCache,
        grad_fmap: Vec<f64>,
        mut grads: Option<&mut ModelGrads>,
    ) -> Vec<f64> {
        let mut g = grad_fmap;
        for (i, s) in self.stages.iter().enumerate().rev() {
            for (gv, &z) in g.iter_mut().zip(&cache.pre[i]) {
                if z <= 0.0 {
                    *gv = 0.0;
                }
            }
            let (inp, ih, iw) = &cache.inputs[i];
            let sg = grads.as_deref_mut().map(|m| &mut m.stages[i]);
            g = s.backward(inp, *ih, *iw, &g, sg);
        }
        g
    }

    /// Gradient on `F(x)` from a gradient on the logits, through max pooling.
    fn head_backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f64],
        grads: Option<&mut ModelGrads>,
    ) -> Vec<f64> {
        let n = self.num_classes();
        let d_n = self.depth();
        let mut grad_pooled = vec![0.0; d_n];
        for (d, gp) in grad_pooled.iter_mut().enumerate() {
            *gp = dot(&self.fc_weights[d * n..(d + 1) * n], grad_logits);
        }
        if let Some(m) = grads {
            for (d, &p) in cache.pooled.iter().enumerate() {
                for (gw, &gl) in m.fc_weights[d * n..(d + 1) * n].iter_mut().zip(grad_logits) {
                    *gw += p * gl;
                }
            }
            add_into(&mut m.fc_bias, grad_logits);
        }
        let fmap = &cache.fmap;
        let mut grad_fmap = vec![0.0; fmap.data().len()];
        for (d, &gp) in grad_pooled.iter().enumerate() {
            // first location attaining the max
            let mut best = 0;
            for loc in 1..fmap.locations() {
                if fmap.vector(loc)[d] > fmap.vector(best)[d] {
                    best = loc;
                }
            }
            grad_fmap[best * d_n + d] = gp;
        }
        grad_fmap
    }

    /// `∂(selected scalar)/∂x`, same shape as `x`.
    pub fn input_gradient(&self, x: &Image, selector: Selector<'_>) -> Result<InputGradient> {
        let data = self.input_gradient_raw(x, selector)?;
        Ok(InputGradient {
            height: x.height(),
            width: x.width(),
            channels: x.channels(),
            data,
        })
    }

    pub(crate) fn input_gradient_raw(&self, x: &Image, selector: Selector<'_>) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_selector(selector)?;
        Ok(self.input_gradient_unchecked(x.data(), selector))
    }

    pub(crate) fn check_selector(&self, selector: Selector<'_>) -> Result<()> {
        match selector {
            Selector::Logit(i) if i >= self.num_classes() => Err(Error::Selector(format!(
                "logit index {i} out of range for {} classes",
                self.num_classes()
            ))),
            Selector::Detector(k) if k.len() != self.depth() => Err(Error::Selector(format!(
                "detector kernel length {} != feature depth {}",
                k.len(),
                self.depth()
            ))),
            _ => Ok(()),
        }
    }

    /// Input gradient on raw (possibly out-of-range) pixel values.
    pub(crate) fn input_gradient_unchecked(
        &self,
        input: &[f64],
        selector: Selector<'_>,
    ) -> Vec<f64> {
        let cache = self.forward_raw(input);
        let grad_fmap = match selector {
            Selector::Logit(i) => {
                let mut gl = vec![0.0; self.num_classes()];
                gl[i] = 1.0;
                self.head_backward(&cache, &gl, None)
            }
            Selector::Detector(k) => {
                let fmap = &cache.fmap;
                let scores: Vec<f64> = (0..fmap.locations())
                    .map(|l| dot(fmap.vector(l), k))
                    .collect();
                let best = argmax(&scores);
                let mut g = vec![0.0; fmap.data().len()];
                g[best * fmap.depth()..(best + 1) * fmap.depth()].copy_from_slice(k);
                g
            }
        };
        self.backward_fmap(&cache, grad_fmap, None)
    }

    /// Input gradient at arbitrary (not range-checked) pixel values laid out
    /// like an image of the model's input size.
    pub fn raw_input_gradient(&self, input: &[f64], selector: Selector<'_>) -> Result<Vec<f64>> {
        self.check_raw(input)?;
        self.check_selector(selector)?;
        Ok(self.input_gradient_unchecked(input, selector))
    }

    /// Selected scalar at arbitrary (not range-checked) pixel values.
    pub fn raw_selected_value(&self, input: &[f64], selector: Selector<'_>) -> Result<f64> {
        self.check_raw(input)?;
        self.check_selector(selector)?;
        Ok(self.selected_value_raw(input, selector))
    }

    fn check_raw(&self, input: &[f64]) -> Result<()> {
        let n = self.input_height * self.input_width * self.input_channels;
        if input.len() != n {
            return Err(Error::dim(format!(
                "raw input length {} != {n}",
                input.len()
            )));
        }
        Ok(())
    }

    /// Value of the selected scalar.
    pub fn selected_value(&self, x: &Image, selector: Selector<'_>) -> Result<f64> {
        self.check_input(x)?;
        self.check_selector(selector)?;
        Ok(self.selected_value_raw(x.data(), selector))
    }

    pub(crate) fn selected_value_raw(&self, input: &[f64], selector: Selector<'_>) -> f64 {
        let cache = self.forward_raw(input);
        match selector {
            Selector::Logit(i) => cache.logits[i],
            Selector::Detector(k) => (0..cache.fmap.locations())
                .map(|l| dot(cache.fmap.vector(l), k))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Softmax cross-entropy loss and parameter gradients for one sample.
    fn sample_grads(&self, x: &Image, label: usize) -> (f64, ModelGrads) {
        let cache = self.forward_raw(x.data());
        let probs = softmax(&cache.logits);
        let loss = -probs[label].max(1e-300).ln();
        let mut gl = probs;
        gl[label] -= 1.0;
        let mut grads = ModelGrads::zeros_like(self);
        let gf = self.head_backward(&cache, &gl, Some(&mut grads));
        self.backward_fmap(&cache, gf, Some(&mut grads));
        (loss, grads)
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for s in &mut self.stages {
            out.push(&mut s.weights);
            out.push(&mut s.bias);
        }
        out.push(&mut self.fc_weights);
        out.push(&mut self.fc_bias);
        out
    }

    fn param_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.weights.len() + s.bias.len())
            .sum::<usize>()
            + self.fc_weights.len()
            + self.fc_bias.len()
    }

    /// Serializes to the `TCNN` checkpoint format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.count(self.input_height)?;
        w.count(self.input_width)?;
        w.count(self.input_channels)?;
        w.count(self.stages.len())?;
        for s in &self.stages {
            w.count(s.kernel)?;
            w.count(s.in_channels)?;
            w.count(s.out_channels)?;
            w.count(s.stride)?;
        }
        w.count(self.num_classes())?;
        for s in &self.stages {
            w.f64s(&s.weights);
            w.f64s(&s.bias);
        }
        w.f64s(&self.fc_weights);
        w.f64s(&self.fc_bias);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, "TCNN", CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let input_height = r.count()?;
        let input_width = r.count()?;
        let input_channels = r.count()?;
        let n_stages = r.count()?;
        if n_stages == 0 || n_stages > 64 {
            return Err(r.error(format!("implausible stage count {n_stages}")));
        }
        let mut stages = Vec::with_capacity(n_stages);
        let mut cin = input_channels;
        for _ in 0..n_stages {
            let at = r.offset() as usize;
            let kernel = r.count()?;
            let in_channels = r.count()?;
            let out_channels = r.count()?;
            let stride = r.count()?;
            if in_channels != cin
                || kernel == 0
                || kernel % 2 == 0
                || stride == 0
                || out_channels == 0
            {
                return Err(r.error_at(at, "inconsistent stage header"));
            }
            stages.push(ConvStage::zeros(kernel, in_channels, out_channels, stride));
            cin = out_channels;
        }
        let n = r.count()?;
        let mut model = Self {
            input_height,
            input_width,
            input_channels,
            stages,
            fc_weights: vec![0.0; cin * n],
            fc_bias: vec![0.0; n],
        };
        for s in &mut model.stages {
            s.weights = r.f64s(s.weights.len())?;
            s.bias = r.f64s(s.bias.len())?;
        }
        model.fc_weights = r.f64s(model.fc_weights.len())?;
        model.fc_bias = r.f64s(n)?;
        r.expect_end()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// Gradient with respect to an image, laid out like the image `(h, w, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl InputGradient {
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClassifierOptimizer {
    /// Gradient descent with heavy-ball momentum.
    Momentum { momentum: f64 },
    /// Adam with the usual `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: ClassifierOptimizer,
    pub batch_size: usize,
    pub seed: u64,
    pub stage_channels: Vec<usize>,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            optimizer: ClassifierOptimizer::Adaptive,
            batch_size: 16,
            seed: 0,
            stage_channels: vec![8, 16, 32],
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("classifier epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("classifier learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("classifier batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Trains a classifier with softmax cross-entropy on labelled images.
pub fn train_classifier(
    images: &[Image],
    labels: &[usize],
    config: &ClassifierTrainConfig,
) -> Result<ToyCnn> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::dataset("empty training set"));
    }
    if images.len() != labels.len() {
        return Err(Error::dataset("image and label counts differ"));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let distinct = {
        let mut seen = vec![false; num_classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::dataset("need at least two classes"));
    }
    let first = &images[0];
    if images.iter().any(|im| {
        (im.height(), im.width(), im.channels())
            != (first.height(), first.width(), first.channels())
    }) {
        return Err(Error::dataset("images have differing dimensions"));
    }
    let mut model = ToyCnn::init(
        first.height(),
        first.width(),
        first.channels(),
        &config.stage_channels,
        num_classes,
        config.seed,
    )?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_C1A5);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let per_sample: Vec<ModelGrads> = batch
                .par_iter()
                .map(|&i| model.sample_grads(&images[i], labels[i]).1)
                .collect();
            let mut total = ModelGrads::zeros_like(&model);
            for g in &per_sample {
                total.add(g);
            }
            let scale = 1.0 / batch.len() as f64;
            let flat: Vec<f64> = total
                .slices()
                .concat()
                .into_iter()
                .map(|v| v * scale)
                .collect();
            opt.step(&mut model.param_slices_mut(), &flat);
        }
    }
    Ok(model)
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn accuracy(model: &ToyCnn, images: &[Image], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::dataset("empty set"));
    }
    let correct: Result<Vec<bool>> = images
        .par_iter()
        .zip(labels)
        .map(|(x, &l)| model.forward(x).map(|(_, logits)| argmax(&logits) == l))
        .collect();
    Ok(correct?.iter().filter(|&&c| c).count() as f64 / images.len() as f64)
}

struct Optimizer {
    kind: ClassifierOptimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(kind: ClassifierOptimizer, lr: f64, n: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut [f64]], grad: &[f64]) {
        self.t += 1;
        let mut i = 0;
        for slice in params.iter_mut() {
            for p in slice.iter_mut() {
                let g = grad[i];
                match self.kind {
                    ClassifierOptimizer::Momentum { momentum } => {
                        self.m[i] = momentum * self.m[i] + g;
                        *p -= self.lr * self.m[i];
                    }
                    ClassifierOptimizer::Adaptive => {
                        const B1: f64 = 0.9;
                        const B2: f64 = 0.999;
                        self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
                        self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
                        let mh = self.m[i] / (1.0 - B1.powi(self.t));
                        let vh = self.v[i] / (1.0 - B2.powi(self.t));
                        *p -= self.lr * mh / (vh.sqrt() + 1e-8);
                    }
                }
                i += 1;
            }
        }
    }
}

/// Per-neuron activation ranges over a fitting set. Monitored neurons are the
/// `D` globally max-pooled features followed by the `N` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronRanges {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NeuronRanges {
    /// Elementwise min/max over activation vectors of equal length.
    pub fn fit<'a>(activations: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut it = activations.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::dataset("no activations to fit ranges on"))?;
        let mut ranges = Self {
            min: first.to_vec(),
            max: first.to_vec(),
        };
        for a in it {
            if a.len() != ranges.min.len() {
                return Err(Error::dim("activation vectors differ in length"));
            }
            for (i, &v) in a.iter().enumerate() {
                ranges.min[i] = ranges.min[i].min(v);
                ranges.max[i] = ranges.max[i].max(v);
            }
        }
        Ok(ranges)
    }

    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }
}

/// Monitored neuron vector: pooled features then logits.
pub fn monitored_activations(fmap: &FeatureMap, logits: &[f64]) -> Vec<f64> {
    let mut v = fmap.max_pool();
    v.extend_from_slice(logits);
    v
}

pub fn fit_neuron_ranges(model: &ToyCnn, images: &[Image]) -> Result<NeuronRanges> {
    if images.is_empty() {
        return Err(Error::dataset("empty fitting set"));
    }
    let acts: Result<Vec<Vec<f64>>> = images
        .par_iter()
        .map(|x| model.forward(x).map(|(f, l)| monitored_activations(&f, &l)))
        .collect();
    let acts = acts?;
    NeuronRanges::fit(acts.iter().map(Vec::as_slice))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(
            h,
            w,
            c,
            (0..h * w * c).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_architecture_shapes() {
        let m = ToyCnn::init(32, 32, 3, &[8, 16, 32], 3, 1).unwrap();
        assert_eq!(m.fmap_size(), (4, 4));
        assert_eq!(m.depth(), 32);
        let (f, l) = m.forward(&random_image(32, 32, 3, 2)).unwrap();
        assert_eq!((f.height(), f.width(), f.depth()), (4, 4, 32));
        assert_eq!(l.len(), 3);
    }

    #[test]
    fn zero_model_outputs_fc_bias() {
        let mut m = ToyCnn::zeros(8, 8, 3, &[4, 4], 3).unwrap();
        m.fc_bias = vec![0.5, -1.0, 2.0];
        let x = Image::filled(8, 8, 3, 0.0).unwrap();
        let (_, logits) = m.forward(&x).unwrap();
        assert_eq!(logits, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic_and_checks_dims() {
        let m = ToyCnn::init(8, 8, 3, &[4, 6], 2, 9).unwrap();
        let x = random_image(8, 8, 3, 3);
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
        let bad = random_image(8, 8, 1, 3);
        assert!(matches!(m.forward(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn invalid_selectors_rejected() {
        let m = ToyCnn::init(8, 8, 3, &[4, 6], 2, 9).unwrap();
        let x = random_image(8, 8, 3, 3);
        assert!(matches!(
            m.input_gradient(&x, Selector::Logit(2)),
            Err(Error::Selector(_))
        ));
        assert!(matches!(
            m.input_gradient(&x, Selector::Detector(&[1.0; 5])),
            Err(Error::Selector(_))
        ));
    }

    #[test]
    fn dead_path_has_zero_gradient() {
        let mut m = ToyCnn::init(8, 8, 3, &[4, 6], 2, 9).unwrap();
        for b in &mut m.stages[0].bias {
            *b = -1e6;
        }
        let x = random_image(8, 8, 3, 4);
        let g = m.input_gradient(&x, Selector::Logit(0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ToyCnn::init(8, 8, 3, &[4, 6], 2, 9).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"TCNN");
        assert_eq!(bytes[4], 1);
        assert_eq!(ToyCnn::from_bytes(&bytes).unwrap(), m);
        assert!(matches!(
            ToyCnn::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn single_class_rejected() {
        let x = vec![random_image(8, 8, 3, 1), random_image(8, 8, 3, 2)];
        let err = train_classifier(&x, &[1, 1], &ClassifierTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Dataset(_)));
        assert!(matches!(
            train_classifier(&[], &[], &ClassifierTrainConfig::default()),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let x: Vec<Image> = (0..6).map(|i| random_image(8, 8, 3, i)).collect();
        let y = vec![0, 1, 0, 1, 0, 1];
        let cfg = ClassifierTrainConfig {
            epochs: 2,
            batch_size: 4,
            stage_channels: vec![4, 4],
            ..Default::default()
        };
        let a = train_classifier(&x, &y, &cfg).unwrap();
        let b = train_classifier(&x, &y, &cfg).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn neuron_ranges_examples() {
        let m = ToyCnn::init(8, 8, 3, &[4, 6], 2, 5).unwrap();
        let a = random_image(8, 8, 3, 1);
        let b = random_image(8, 8, 3, 2);
        let act = |x: &Image| {
            let (f, l) = m.forward(x).unwrap();
            monitored_activations(&f, &l)
        };
        let single = fit_neuron_ranges(&m, std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.min, act(&a));
        assert_eq!(single.max, act(&a));

        let both = fit_neuron_ranges(&m, &[a.clone(), b.clone()]).unwrap();
        let (va, vb) = (act(&a), act(&b));
        for i in 0..va.len() {
            assert_eq!(both.min[i], va[i].min(vb[i]));
            assert_eq!(both.max[i], va[i].max(vb[i]));
        }
        assert_eq!(both.len(), 6 + 2);
        assert!(fit_neuron_ranges(&m, &[]).is_err());
    }

    #[test]
    fn max_pool_is_translation_invariant() {
        // A pattern injected below the pooling stage, shifted within bounds.
        let m = ToyCnn::init(8, 8, 3, &[4, 3], 2, 5).unwrap();
        let pattern = [0.3, 1.7, 0.9];
        let mut a = FeatureMap::zeros(4, 4, 3).data().to_vec();
        let mut b = a.clone();
        a[(4 + 1) * 3..(4 + 2) * 3].copy_from_slice(&pattern);
        b[(2 * 4 + 3) * 3..(2 * 4 + 4) * 3].copy_from_slice(&pattern);
        let fa = FeatureMap::new(4, 4, 3, a).unwrap();
        let fb = FeatureMap::new(4, 4, 3, b).unwrap();
        assert_eq!(fa.max_pool(), fb.max_pool());
        assert_eq!(m.head(&fa.max_pool()), m.head(&fb.max_pool()));
    }
}
