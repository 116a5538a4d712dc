//! A small deterministic CPU convnet: valid convolution (im2col + gemm),
//! rectifier, the four pooling operators, fully-connected layers and a
//! softmax cross-entropy loss.
//!
//! Activations flow as `n × h × w × c` stacks; fully-connected outputs are
//! `n × 1 × 1 × units`. Convolution and pooling fan out over frames, and
//! every cross-frame reduction runs inside a single gemm call, so the
//! execution policy never changes a result bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::pooling::{
    compute_score_maps_with, pool_average_with, pool_backward_with, pool_max_with,
    pool_multipartite_with, pool_stochastic_with, PoolForward, PoolSpec, Strategy,
};
use crate::projection::Projection;
use crate::ranking::RankingModel;
use crate::tensor::{gemm, ActivationStack, MatRef};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv {
        kernel: (usize, usize),
        out_channels: usize,
    },
    Relu,
    Pool(PoolSpec),
    Fc {
        out_units: usize,
    },
    SoftmaxLoss,
}

/// Weight initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with a fixed standard deviation.
    Gaussian(f64),
    /// Zero-mean Gaussian with standard deviation `sqrt(2 / fan_in)`.
    He,
}

impl Default for Init {
    fn default() -> Self {
        Init::Gaussian(0.01)
    }
}

/// conv 5×5×20 → relu → pool 2×2 → conv 5×5×50 → relu → pool 2×2 → fc 500 →
/// relu → fc `classes` → softmax.
pub fn preset_small(classes: usize, strategy: Strategy) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv {
            kernel: (5, 5),
            out_channels: 20,
        },
        LayerSpec::Relu,
        LayerSpec::Pool(PoolSpec::square(2, strategy)),
        LayerSpec::Conv {
            kernel: (5, 5),
            out_channels: 50,
        },
        LayerSpec::Relu,
        LayerSpec::Pool(PoolSpec::square(2, strategy)),
        LayerSpec::Fc { out_units: 500 },
        LayerSpec::Relu,
        LayerSpec::Fc { out_units: classes },
        LayerSpec::SoftmaxLoss,
    ]
}

/// Frozen projection and densities used by a multipartite pool layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub projection: Projection,
    pub ranking: RankingModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    /// `(kh·kw·cin) × cout`, row index `(dy·kw + dx)·cin + ci`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `inputs × outputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolLayer {
    pub spec: PoolSpec,
    pub scorer: Option<Scorer>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Relu,
    Pool(PoolLayer),
    Fc(FcLayer),
    SoftmaxLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Training pass; stochastic pooling samples from streams keyed by `seed`.
    Train {
        seed: u64,
    },
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    /// `(h, w, channels)` of one input image.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<Layer>,
    pub exec: Exec,
}

impl Network {
    pub fn new(
        input: (usize, usize, usize),
        classes: usize,
        specs: &[LayerSpec],
        init: Init,
        seed: u64,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::DegenerateLabels(format!(
                "network needs at least 2 classes, got {classes}"
            )));
        }
        match specs.last() {
            Some(LayerSpec::SoftmaxLoss) => {}
            _ => {
                return Err(Error::InvalidConfig(
                    "the last layer must be the softmax loss".into(),
                ))
            }
        }
        if specs[..specs.len() - 1]
            .iter()
            .any(|s| matches!(s, LayerSpec::SoftmaxLoss))
        {
            return Err(Error::InvalidConfig(
                "only one softmax loss layer is allowed".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut h, mut w, mut c) = input;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Conv {
                    kernel: (kh, kw),
                    out_channels,
                } => {
                    if kh == 0 || kw == 0 || out_channels == 0 || kh > h || kw > w {
                        return Err(Error::Dimension(format!(
                            "layer {i}: {kh}x{kw} convolution with {out_channels} outputs on {h}x{w}x{c}"
                        )));
                    }
                    let fan_in = kh * kw * c;
                    let weights = sample_weights(&mut rng, init, fan_in, fan_in * out_channels);
                    let l = ConvLayer {
                        kh,
                        kw,
                        cin: c,
                        cout: out_channels,
                        weights,
                        bias: vec![0.0; out_channels],
                    };
                    h = h - kh + 1;
                    w = w - kw + 1;
                    c = out_channels;
                    Layer::Conv(l)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Pool(p) => {
                    let (oh, ow) = p
                        .output_hw(h, w)
                        .map_err(|e| Error::Dimension(format!("layer {i}: {e}")))?;
                    h = oh;
                    w = ow;
                    Layer::Pool(PoolLayer {
                        spec: p,
                        scorer: None,
                    })
                }
                LayerSpec::Fc { out_units } => {
                    if out_units == 0 {
                        return Err(Error::Dimension(format!(
                            "layer {i}: empty fully-connected layer"
                        )));
                    }
                    let fan_in = h * w * c;
                    let weights = sample_weights(&mut rng, init, fan_in, fan_in * out_units);
                    let l = FcLayer {
                        inputs: fan_in,
                        outputs: out_units,
                        weights,
                        bias: vec![0.0; out_units],
                    };
                    h = 1;
                    w = 1;
                    c = out_units;
                    Layer::Fc(l)
                }
                LayerSpec::SoftmaxLoss => {
                    if h * w * c != classes {
                        return Err(Error::Dimension(format!(
                            "loss sees {} outputs for {classes} classes",
                            h * w * c
                        )));
                    }
                    Layer::SoftmaxLoss
                }
            };
            layers.push(layer);
        }
        Ok(Self {
            input,
            classes,
            layers,
            exec: Exec::default(),
        })
    }

    /// Indices of pool layers using the multipartite strategy.
    pub fn multipartite_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Pool(p) if p.spec.strategy == Strategy::Multipartite => Some(i),
                _ => None,
            })
            .collect()
    }

    pub fn scorer(&self, layer: usize) -> Option<&Scorer> {
        match self.layers.get(layer) {
            Some(Layer::Pool(p)) => p.scorer.as_ref(),
            _ => None,
        }
    }

    pub fn set_scorer(&mut self, layer: usize, scorer: Scorer) -> Result<()> {
        match self.layers.get_mut(layer) {
            Some(Layer::Pool(p)) => {
                p.scorer = Some(scorer);
                Ok(())
            }
            _ => Err(Error::InvalidConfig(format!(
                "layer {layer} is not a pool layer"
            ))),
        }
    }

    /// Trainable buffers in a fixed order: weights then bias, layer by layer.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push(c.weights.as_slice());
                    out.push(c.bias.as_slice());
                }
                Layer::Fc(f) => {
                    out.push(f.weights.as_slice());
                    out.push(f.bias.as_slice());
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv(c) => {
                    out.push(&mut c.weights);
                    out.push(&mut c.bias);
                }
                Layer::Fc(f) => {
                    out.push(&mut f.weights);
                    out.push(&mut f.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Whether parameter buffer `i` (in [`Network::params`] order) is a weight
    /// matrix, i.e. subject to weight decay.
    pub fn is_weight(i: usize) -> bool {
        i % 2 == 0
    }

    /// `½·decay·Σ w²` over weight matrices.
    pub fn weight_decay_loss(&self, decay: f64) -> f64 {
        self.params()
            .iter()
            .enumerate()
            .filter(|(i, _)| Self::is_weight(*i))
            .map(|(_, p)| p.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            * 0.5
            * decay
    }

    /// Runs the whole network. With `labels`, the mean cross-entropy is
    /// returned in [`ForwardPass::loss`].
    pub fn forward(
        &self,
        images: &ActivationStack,
        labels: Option<&[usize]>,
        mode: Mode,
    ) -> Result<ForwardPass> {
        self.forward_until(images, labels, mode, self.layers.len())
    }

    /// Input of layer `layer` for `images`, i.e. the output of everything
    /// before it.
    pub fn activations_before(
        &self,
        images: &ActivationStack,
        layer: usize,
        mode: Mode,
    ) -> Result<ActivationStack> {
        let pass = self.forward_until(images, None, mode, layer)?;
        Ok(pass.output)
    }

    fn forward_until(
        &self,
        images: &ActivationStack,
        labels: Option<&[usize]>,
        mode: Mode,
        stop: usize,
    ) -> Result<ForwardPass> {
        let (h, w, c) = self.input;
        if (images.h(), images.w(), images.d()) != (h, w, c) {
            return Err(Error::Dimension(format!(
                "network expects {h}x{w}x{c} images, got {}x{}x{}",
                images.h(),
                images.w(),
                images.d()
            )));
        }
        if let Some(l) = labels {
            if l.len() != images.n() {
                return Err(Error::Dimension(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.n()
                )));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= self.classes) {
                return Err(Error::DegenerateLabels(format!(
                    "label {bad} outside 0..{}",
                    self.classes
                )));
            }
        }
        let mut inputs = Vec::with_capacity(stop);
        let mut caches = Vec::with_capacity(stop);
        let mut x = images.clone();
        let mut probs = None;
        let mut loss = None;
        for (i, layer) in self.layers.iter().enumerate().take(stop) {
            let (y, cache) = match layer {
                Layer::Conv(conv) => {
                    let (y, cols) = conv_forward(self.exec, conv, &x);
                    (y, Cache::Conv(cols))
                }
                Layer::Relu => {
                    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
                    (
                        ActivationStack::from_raw(x.n(), x.h(), x.w(), x.d(), data),
                        Cache::None,
                    )
                }
                Layer::Pool(p) => {
                    let fwd = self.pool_forward(i, p, &x, mode)?;
                    (fwd.output.clone(), Cache::Pool(fwd))
                }
                Layer::Fc(fc) => (fc_forward(fc, &x), Cache::None),
                Layer::SoftmaxLoss => {
                    let p = softmax(x.data(), self.classes);
                    if let Some(l) = labels {
                        let total: f64 = l
                            .iter()
                            .enumerate()
                            .map(|(r, &y)| -p[r * self.classes + y].max(f64::MIN_POSITIVE).ln())
                            .sum();
                        let mean = total / l.len() as f64;
                        if !mean.is_finite() {
                            return Err(Error::NonFinite(format!("loss is {mean}")));
                        }
                        loss = Some(mean);
                    }
                    probs = Some(p);
                    (x.clone(), Cache::None)
                }
            };
            inputs.push(x);
            caches.push(cache);
            x = y;
        }
        if !x.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("activations".into()));
        }
        Ok(ForwardPass {
            inputs,
            caches,
            output: x,
            probs,
            loss,
        })
    }

    fn pool_forward(
        &self,
        index: usize,
        p: &PoolLayer,
        x: &ActivationStack,
        mode: Mode,
    ) -> Result<PoolForward> {
        let ex = self.exec;
        match p.spec.strategy {
            Strategy::Max => pool_max_with(ex, x, &p.spec),
            Strategy::Average => pool_average_with(ex, x, &p.spec),
            Strategy::Stochastic => match mode {
                Mode::Train { seed } => pool_stochastic_with(
                    ex,
                    x,
                    &p.spec,
                    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    true,
                ),
                Mode::Test => pool_stochastic_with(ex, x, &p.spec, 0, false),
            },
            Strategy::Multipartite => {
                let s = p.scorer.as_ref().ok_or(Error::ScorerMissing(index))?;
                let maps = compute_score_maps_with(ex, x, &s.projection, &s.ranking)?;
                pool_multipartite_with(ex, x, &p.spec, &maps)
            }
        }
    }

    /// Parameter gradients of the mean cross-entropy plus `½·decay·Σw²`.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        labels: &[usize],
        weight_decay: f64,
    ) -> Result<Vec<Vec<f64>>> {
        let probs = pass
            .probs
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("backward needs a full forward pass".into()))?;
        let n = labels.len();
        let mut grad = probs.clone();
        for (r, &y) in labels.iter().enumerate() {
            grad[r * self.classes + y] -= 1.0;
        }
        grad.iter_mut().for_each(|g| *g /= n as f64);
        self.backward_from_output(pass, &grad, weight_decay)
    }

    /// Backpropagates `grad_logits` (gradient w.r.t. the loss layer's input)
    /// and adds `decay·w` to every weight gradient.
    pub fn backward_from_output(
        &self,
        pass: &ForwardPass,
        grad_logits: &[f64],
        weight_decay: f64,
    ) -> Result<Vec<Vec<f64>>> {
        if pass.caches.len() != self.layers.len() {
            return Err(Error::InvalidConfig(
                "backward needs a full forward pass".into(),
            ));
        }
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut g = grad_logits.to_vec();
        let first_param_layer = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Conv(_) | Layer::Fc(_)))
            .unwrap_or(0);
        for i in (0..self.layers.len()).rev() {
            let x = &pass.inputs[i];
            if g.len() != x.data().len()
                && !matches!(
                    self.layers[i],
                    Layer::Pool(_) | Layer::Conv(_) | Layer::Fc(_)
                )
            {
                return Err(Error::Dimension(format!(
                    "gradient size mismatch at layer {i}"
                )));
            }
            match (&self.layers[i], &pass.caches[i]) {
                (Layer::SoftmaxLoss, _) => {}
                (Layer::Relu, _) => {
                    for (gv, &xv) in g.iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                (Layer::Pool(_), Cache::Pool(fwd)) => {
                    g = pool_backward_with(self.exec, fwd, &g)?.into_data();
                }
                (Layer::Fc(fc), _) => {
                    let (dw, db, dx) = fc_backward(fc, x, &g, i > first_param_layer);
                    grads.push(db);
                    grads.push(dw);
                    g = dx;
                }
                (Layer::Conv(conv), Cache::Conv(cols)) => {
                    let (dw, db, dx) =
                        conv_backward(self.exec, conv, x, cols, &g, i > first_param_layer);
                    grads.push(db);
                    grads.push(dw);
                    g = dx;
                }
                _ => return Err(Error::InvalidConfig(format!("missing cache for layer {i}"))),
            }
        }
        grads.reverse();
        if weight_decay != 0.0 {
            for (i, (gr, p)) in grads.iter_mut().zip(self.params()).enumerate() {
                if Self::is_weight(i) {
                    gr.iter_mut()
                        .zip(p)
                        .for_each(|(a, b)| *a += weight_decay * b);
                }
            }
        }
        Ok(grads)
    }
}

fn sample_weights(rng: &mut ChaCha8Rng, init: Init, fan_in: usize, count: usize) -> Vec<f64> {
    let std = match init {
        Init::Gaussian(s) => s,
        Init::He => (2.0 / fan_in as f64).sqrt(),
    };
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..count).map(|_| normal.sample(rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cache {
    None,
    /// im2col matrix of the layer input.
    Conv(Vec<f64>),
    Pool(PoolForward),
}

/// Everything a backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// Input of every executed layer.
    pub inputs: Vec<ActivationStack>,
    pub caches: Vec<Cache>,
    /// Output of the last executed layer (the logits when the loss layer ran).
    pub output: ActivationStack,
    /// Row-major `n × classes` softmax probabilities.
    pub probs: Option<Vec<f64>>,
    pub loss: Option<f64>,
}

impl ForwardPass {
    /// Predicted class of every image (first maximum on ties).
    pub fn predictions(&self, classes: usize) -> Vec<usize> {
        self.probs
            .as_deref()
            .unwrap_or(&[])
            .chunks(classes)
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

fn softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / s));
    }
    out
}

fn im2col(exec: Exec, conv: &ConvLayer, x: &ActivationStack) -> (Vec<f64>, usize, usize) {
    let (n, h, w, cin) = x.dims();
    let oh = h - conv.kh + 1;
    let ow = w - conv.kw + 1;
    let k = conv.kh * conv.kw * cin;
    let mut cols = vec![0.0; n * oh * ow * k];
    let frame = oh * ow * k;
    exec::for_each_chunk_mut(exec, &mut cols, frame, |f, out| {
        let src = x.frame(f);
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut out[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
                for dy in 0..conv.kh {
                    let s = ((oy + dy) * w + ox) * cin;
                    let span = conv.kw * cin;
                    row[dy * span..(dy + 1) * span].copy_from_slice(&src[s..s + span]);
                }
            }
        }
    });
    (cols, oh, ow)
}

fn conv_forward(exec: Exec, conv: &ConvLayer, x: &ActivationStack) -> (ActivationStack, Vec<f64>) {
    let (cols, oh, ow) = im2col(exec, conv, x);
    let rows = x.n() * oh * ow;
    let k = conv.kh * conv.kw * conv.cin;
    let mut out = Vec::with_capacity(rows * conv.cout);
    for _ in 0..rows {
        out.extend_from_slice(&conv.bias);
    }
    gemm(
        rows,
        k,
        conv.cout,
        1.0,
        MatRef::row_major(&cols, k),
        MatRef::row_major(&conv.weights, conv.cout),
        1.0,
        &mut out,
    );
    (
        ActivationStack::from_raw(x.n(), oh, ow, conv.cout, out),
        cols,
    )
}

/// Returns `(dW, db, dX)`; `dX` is empty when `need_input_grad` is false.
fn conv_backward(
    exec: Exec,
    conv: &ConvLayer,
    x: &ActivationStack,
    cols: &[f64],
    grad_out: &[f64],
    need_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, h, w, cin) = x.dims();
    let oh = h - conv.kh + 1;
    let ow = w - conv.kw + 1;
    let rows = n * oh * ow;
    let k = conv.kh * conv.kw * cin;
    let mut dw = vec![0.0; k * conv.cout];
    gemm(
        k,
        rows,
        conv.cout,
        1.0,
        MatRef::transposed(cols, k),
        MatRef::row_major(grad_out, conv.cout),
        0.0,
        &mut dw,
    );
    let mut db = vec![0.0; conv.cout];
    for r in grad_out.chunks(conv.cout) {
        db.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    if !need_input_grad {
        return (dw, db, Vec::new());
    }
    let mut dcols = vec![0.0; rows * k];
    gemm(
        rows,
        conv.cout,
        k,
        1.0,
        MatRef::row_major(grad_out, conv.cout),
        MatRef::transposed(&conv.weights, conv.cout),
        0.0,
        &mut dcols,
    );
    let mut dx = vec![0.0; n * h * w * cin];
    exec::for_each_chunk_mut(exec, &mut dx, h * w * cin, |f, out| {
        let src = &dcols[f * oh * ow * k..(f + 1) * oh * ow * k];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &src[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
                for dy in 0..conv.kh {
                    let s = ((oy + dy) * w + ox) * cin;
                    let span = conv.kw * cin;
                    out[s..s + span]
                        .iter_mut()
                        .zip(&row[dy * span..(dy + 1) * span])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    });
    (dw, db, dx)
}

fn fc_forward(fc: &FcLayer, x: &ActivationStack) -> ActivationStack {
    let n = x.n();
    let mut out = Vec::with_capacity(n * fc.outputs);
    for _ in 0..n {
        out.extend_from_slice(&fc.bias);
    }
    gemm(
        n,
        fc.inputs,
        fc.outputs,
        1.0,
        MatRef::row_major(x.data(), fc.inputs),
        MatRef::row_major(&fc.weights, fc.outputs),
        1.0,
        &mut out,
    );
    ActivationStack::from_raw(n, 1, 1, fc.outputs, out)
}

fn fc_backward(
    fc: &FcLayer,
    x: &ActivationStack,
    grad_out: &[f64],
    need_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.n();
    let mut dw = vec![0.0; fc.inputs * fc.outputs];
    gemm(
        fc.inputs,
        n,
        fc.outputs,
        1.0,
        MatRef::transposed(x.data(), fc.inputs),
        MatRef::row_major(grad_out, fc.outputs),
        0.0,
        &mut dw,
    );
    let mut db = vec![0.0; fc.outputs];
    for r in grad_out.chunks(fc.outputs) {
        db.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    if !need_input_grad {
        return (dw, db, Vec::new());
    }
    let mut dx = vec![0.0; n * fc.inputs];
    gemm(
        n,
        fc.outputs,
        fc.inputs,
        1.0,
        MatRef::row_major(grad_out, fc.outputs),
        MatRef::transposed(&fc.weights, fc.outputs),
        0.0,
        &mut dx,
    );
    (dw, db, dx)
}
