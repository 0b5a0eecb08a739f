//! Minimal dense-network core: an encoder/classifier split, reverse-mode
//! gradients for losses entering at the logits and/or at the embeddings, and
//! an Adam optimizer.
//!
//! The network is `f = classifier ∘ encoder`; the encoder output is the
//! embedding space the rest of the crate aligns and consolidates.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative as a function of the pre-activation.
    #[inline]
    pub fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// One dense layer `y = act(W x + b)`; weight is `out_dim x in_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Shape(format!(
                "bias length {} does not match weight rows {}",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Layer {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Encoder weights and classifier-head weights of the dense network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder_layers: Vec<Layer>,
    pub classifier_layers: Vec<Layer>,
}

impl ModelParams {
    pub fn new(encoder_layers: Vec<Layer>, classifier_layers: Vec<Layer>) -> Result<Self> {
        let model = ModelParams {
            encoder_layers,
            classifier_layers,
        };
        model.check_chain()?;
        Ok(model)
    }

    fn check_chain(&self) -> Result<()> {
        let all = self.encoder_layers.iter().chain(&self.classifier_layers);
        let mut prev: Option<usize> = None;
        for (i, layer) in all.enumerate() {
            if let Some(p) = prev {
                if layer.in_dim() != p {
                    return Err(Error::Shape(format!(
                        "layer {i} expects input width {}, previous layer produces {p}",
                        layer.in_dim()
                    )));
                }
            }
            prev = Some(layer.out_dim());
        }
        Ok(())
    }

    /// Glorot/He-style uniform initialization, seeded by the caller's rng.
    /// `encoder_widths` ends at the embedding dimension; `classifier_hidden`
    /// holds hidden widths of the head, whose final layer maps to `k` logits
    /// with identity activation.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        encoder_widths: &[usize],
        classifier_hidden: &[usize],
        k: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || k == 0 {
            return Err(Error::Invalid("input_dim and k must be >= 1".into()));
        }
        if encoder_widths.iter().chain(classifier_hidden).any(|&w| w == 0) {
            return Err(Error::Invalid("layer widths must be >= 1".into()));
        }
        let mut encoder = Vec::with_capacity(encoder_widths.len());
        let mut prev = input_dim;
        for &w in encoder_widths {
            encoder.push(random_layer(prev, w, activation, rng));
            prev = w;
        }
        let mut classifier = Vec::with_capacity(classifier_hidden.len() + 1);
        for &w in classifier_hidden {
            classifier.push(random_layer(prev, w, activation, rng));
            prev = w;
        }
        classifier.push(random_layer(prev, k, Activation::Identity, rng));
        ModelParams::new(encoder, classifier)
    }

    pub fn input_dim(&self) -> usize {
        self.encoder_layers
            .first()
            .or_else(|| self.classifier_layers.first())
            .map_or(0, Layer::in_dim)
    }

    /// Embedding width `p` (encoder output; equals the input width when the
    /// encoder is empty).
    pub fn embedding_dim(&self) -> usize {
        self.encoder_layers
            .last()
            .map(Layer::out_dim)
            .unwrap_or_else(|| self.input_dim())
    }

    /// Class count `k` (classifier output width).
    pub fn num_classes(&self) -> usize {
        self.classifier_layers
            .last()
            .map(Layer::out_dim)
            .unwrap_or_else(|| self.embedding_dim())
    }
}

fn random_layer<R: Rng + ?Sized>(
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    rng: &mut R,
) -> Layer {
    // He bound for relu, Glorot otherwise.
    let limit = match activation {
        Activation::Relu => (6.0 / in_dim as f64).sqrt(),
        _ => (6.0 / (in_dim + out_dim) as f64).sqrt(),
    };
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid init bound");
    let mut weight = Matrix::zeros(out_dim, in_dim);
    for w in weight.data_mut() {
        *w = dist.sample(rng);
    }
    Layer {
        weight,
        bias: vec![0.0; out_dim],
        activation,
    }
}

/// `x W^T + b` applied row-wise, then the activation; returns (pre, post).
fn layer_forward(layer: &Layer, input: &Matrix) -> Result<(Matrix, Matrix)> {
    if input.cols() != layer.in_dim() {
        return Err(Error::Shape(format!(
            "batch width {} does not match layer input width {}",
            input.cols(),
            layer.in_dim()
        )));
    }
    let n = input.rows();
    let out_dim = layer.out_dim();
    let mut pre = Matrix::zeros(n, out_dim);
    for i in 0..n {
        let x = input.row(i);
        let row = pre.row_mut(i);
        for (o, slot) in row.iter_mut().enumerate() {
            *slot = layer.bias[o] + dot(layer.weight.row(o), x);
        }
    }
    let mut post = pre.clone();
    for v in post.data_mut() {
        *v = layer.activation.apply(*v);
    }
    Ok((pre, post))
}

/// Pre-activations retained by `forward` for reverse mode.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    enc_pre: Vec<Matrix>,
    enc_post: Vec<Matrix>,
    clf_pre: Vec<Matrix>,
    clf_post: Vec<Matrix>,
}

impl ForwardCache {
    pub fn embeddings(&self) -> &Matrix {
        self.enc_post.last().unwrap_or(&self.input)
    }

    pub fn logits(&self) -> &Matrix {
        self.clf_post.last().unwrap_or_else(|| self.embeddings())
    }
}

/// Full pass `batch -> embeddings -> logits`, retaining what backprop needs.
pub fn forward(model: &ModelParams, batch: &Matrix) -> Result<ForwardCache> {
    let mut enc_pre = Vec::with_capacity(model.encoder_layers.len());
    let mut enc_post = Vec::with_capacity(model.encoder_layers.len());
    let mut current = batch;
    for layer in &model.encoder_layers {
        let (pre, post) = layer_forward(layer, current)?;
        enc_pre.push(pre);
        enc_post.push(post);
        current = enc_post.last().unwrap();
    }
    let mut clf_pre = Vec::with_capacity(model.classifier_layers.len());
    let mut clf_post = Vec::with_capacity(model.classifier_layers.len());
    for layer in &model.classifier_layers {
        let (pre, post) = layer_forward(layer, current)?;
        clf_pre.push(pre);
        clf_post.push(post);
        current = clf_post.last().unwrap();
    }
    Ok(ForwardCache {
        input: batch.clone(),
        enc_pre,
        enc_post,
        clf_pre,
        clf_post,
    })
}

/// Classifier-head-only pass, for points that live directly in the embedding
/// space (GMM pseudo-samples).
#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Matrix,
    clf_pre: Vec<Matrix>,
    clf_post: Vec<Matrix>,
}

impl HeadCache {
    pub fn logits(&self) -> &Matrix {
        self.clf_post.last().unwrap_or(&self.input)
    }
}

pub fn classifier_forward(model: &ModelParams, z: &Matrix) -> Result<HeadCache> {
    let expected = model.embedding_dim();
    if z.cols() != expected {
        return Err(Error::Shape(format!(
            "embedding width {} does not match classifier input width {expected}",
            z.cols()
        )));
    }
    let mut clf_pre = Vec::with_capacity(model.classifier_layers.len());
    let mut clf_post = Vec::with_capacity(model.classifier_layers.len());
    let mut current = z;
    for layer in &model.classifier_layers {
        let (pre, post) = layer_forward(layer, current)?;
        clf_pre.push(pre);
        clf_post.push(post);
        current = clf_post.last().unwrap();
    }
    Ok(HeadCache {
        input: z.clone(),
        clf_pre,
        clf_post,
    })
}

/// Classifier head applied to embeddings; logits only.
pub fn classify_from_embedding(model: &ModelParams, z: &Matrix) -> Result<Matrix> {
    Ok(classifier_forward(model, z)?.logits().clone())
}

/// Row-wise numerically stable softmax; every row sums to 1.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean negative log-likelihood and its logit gradient `(softmax - onehot)/n`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    let k = logits.cols();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Invalid("cross entropy over empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range [0, {k})")));
    }
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        let p = grad.at(i, y);
        // p > 0 by construction of softmax; clamp guards exact underflow.
        loss -= p.max(f64::MIN_POSITIVE).ln();
        *grad.at_mut(i, y) -= 1.0;
    }
    for v in grad.data_mut() {
        *v *= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// One layer's gradient (or moment) pair: weight matrix and bias vector.
pub type LayerGrads = (Matrix, Vec<f64>);

/// Parameter-shaped gradient (or moment) buffers.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: Vec<LayerGrads>,
    pub classifier: Vec<LayerGrads>,
}

impl ModelGrads {
    pub fn zeros_like(model: &ModelParams) -> Self {
        let zero = |layers: &[Layer]| {
            layers
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.weight.rows(), l.weight.cols()),
                        vec![0.0; l.bias.len()],
                    )
                })
                .collect()
        };
        ModelGrads {
            encoder: zero(&model.encoder_layers),
            classifier: zero(&model.classifier_layers),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        let add = |a: &mut Vec<(Matrix, Vec<f64>)>, b: &[(Matrix, Vec<f64>)]| {
            for ((w, bias), (ow, obias)) in a.iter_mut().zip(b) {
                for (x, y) in w.data_mut().iter_mut().zip(ow.data()) {
                    *x += y;
                }
                for (x, y) in bias.iter_mut().zip(obias) {
                    *x += y;
                }
            }
        };
        add(&mut self.encoder, &other.encoder);
        add(&mut self.classifier, &other.classifier);
    }

    pub fn max_abs(&self) -> f64 {
        self.encoder
            .iter()
            .chain(&self.classifier)
            .flat_map(|(w, b)| w.data().iter().chain(b))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Backprop through one stack of layers. `grad_out` is dLoss/d(post) of the
/// last layer; returns per-layer grads (reversed back to forward order) and
/// dLoss/d(stack input).
fn backprop_stack(
    layers: &[Layer],
    stack_input: &Matrix,
    pres: &[Matrix],
    posts: &[Matrix],
    grad_out: &Matrix,
) -> Result<(Vec<LayerGrads>, Matrix)> {
    let mut grads: Vec<LayerGrads> = Vec::with_capacity(layers.len());
    let mut upstream = grad_out.clone();
    for (idx, layer) in layers.iter().enumerate().rev() {
        let pre = &pres[idx];
        if upstream.rows() != pre.rows() || upstream.cols() != pre.cols() {
            return Err(Error::Shape(format!(
                "upstream gradient {}x{} does not match cached pre-activation {}x{}",
                upstream.rows(),
                upstream.cols(),
                pre.rows(),
                pre.cols()
            )));
        }
        let input = if idx == 0 { stack_input } else { &posts[idx - 1] };
        let n = pre.rows();
        // d_pre = upstream .* act'(pre)
        let mut d_pre = upstream.clone();
        for (v, &p) in d_pre.data_mut().iter_mut().zip(pre.data()) {
            *v *= layer.activation.grad(p);
        }
        // dW[o][i] = sum_n d_pre[n][o] * input[n][i];  db[o] = sum_n d_pre[n][o]
        let mut dw = Matrix::zeros(layer.out_dim(), layer.in_dim());
        let mut db = vec![0.0; layer.out_dim()];
        for s in 0..n {
            let dp = d_pre.row(s);
            let x = input.row(s);
            for (o, &g) in dp.iter().enumerate() {
                db[o] += g;
                let wrow = dw.row_mut(o);
                for (slot, &xi) in wrow.iter_mut().zip(x) {
                    *slot += g * xi;
                }
            }
        }
        // d_input = d_pre * W
        let mut d_input = Matrix::zeros(n, layer.in_dim());
        for s in 0..n {
            let dp = d_pre.row(s);
            let di = d_input.row_mut(s);
            for (o, &g) in dp.iter().enumerate() {
                let wrow = layer.weight.row(o);
                for (slot, &w) in di.iter_mut().zip(wrow) {
                    *slot += g * w;
                }
            }
        }
        grads.push((dw, db));
        upstream = d_input;
    }
    grads.reverse();
    Ok((grads, upstream))
}

/// Reverse-mode gradients for losses entering at the logits
/// (`dloss_dlogits`) and/or at the embeddings (`dloss_dembeddings`); the two
/// contributions sum at the encoder output.
pub fn backward(
    model: &ModelParams,
    cache: &ForwardCache,
    dloss_dlogits: &Matrix,
    dloss_dembeddings: &Matrix,
) -> Result<ModelGrads> {
    let emb = cache.embeddings();
    if dloss_dembeddings.rows() != emb.rows() || dloss_dembeddings.cols() != emb.cols() {
        return Err(Error::Shape(format!(
            "embedding gradient {}x{} does not match embeddings {}x{}",
            dloss_dembeddings.rows(),
            dloss_dembeddings.cols(),
            emb.rows(),
            emb.cols()
        )));
    }
    let (clf_grads, mut d_emb) = backprop_stack(
        &model.classifier_layers,
        cache.embeddings(),
        &cache.clf_pre,
        &cache.clf_post,
        dloss_dlogits,
    )?;
    for (v, &g) in d_emb.data_mut().iter_mut().zip(dloss_dembeddings.data()) {
        *v += g;
    }
    let (enc_grads, _) = backprop_stack(
        &model.encoder_layers,
        &cache.input,
        &cache.enc_pre,
        &cache.enc_post,
        &d_emb,
    )?;
    Ok(ModelGrads {
        encoder: enc_grads,
        classifier: clf_grads,
    })
}

/// Head-only reverse mode for pseudo-points: classifier grads plus
/// dLoss/d(z), encoder untouched.
pub fn classifier_backward(
    model: &ModelParams,
    cache: &HeadCache,
    dloss_dlogits: &Matrix,
) -> Result<(Vec<LayerGrads>, Matrix)> {
    backprop_stack(
        &model.classifier_layers,
        &cache.input,
        &cache.clf_pre,
        &cache.clf_post,
        dloss_dlogits,
    )
}

/// Adam optimizer state; moment buffers shape-match the model.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: ModelGrads,
    pub second_moment: ModelGrads,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(model: &ModelParams) -> Self {
        AdamState {
            first_moment: ModelGrads::zeros_like(model),
            second_moment: ModelGrads::zeros_like(model),
            step_count: 0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn with_learning_rate(model: &ModelParams, learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            ..AdamState::new(model)
        }
    }
}

/// One bias-corrected adaptive-moment update, in place.
pub fn adam_step(params: &mut ModelParams, grads: &ModelGrads, state: &mut AdamState) -> Result<()> {
    if grads.encoder.len() != params.encoder_layers.len()
        || grads.classifier.len() != params.classifier_layers.len()
    {
        return Err(Error::Shape("gradient layer count mismatch".into()));
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let bias1 = 1.0 - state.beta1.powf(t);
    let bias2 = 1.0 - state.beta2.powf(t);
    let lr = state.learning_rate;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);

    let update = |layers: &mut [Layer],
                      grads: &[(Matrix, Vec<f64>)],
                      m: &mut [(Matrix, Vec<f64>)],
                      v: &mut [(Matrix, Vec<f64>)]|
     -> Result<()> {
        for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in
            layers.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut())
        {
            if gw.rows() != layer.weight.rows() || gw.cols() != layer.weight.cols() {
                return Err(Error::Shape("gradient/parameter shape mismatch".into()));
            }
            let step = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            };
            for ((p, &g), (m, v)) in layer
                .weight
                .data_mut()
                .iter_mut()
                .zip(gw.data())
                .zip(mw.data_mut().iter_mut().zip(vw.data_mut()))
            {
                step(p, g, m, v);
            }
            for ((p, &g), (m, v)) in layer
                .bias
                .iter_mut()
                .zip(gb)
                .zip(mb.iter_mut().zip(vb.iter_mut()))
            {
                step(p, g, m, v);
            }
        }
        Ok(())
    };

    // Split borrows: encoder then classifier.
    let AdamState {
        first_moment,
        second_moment,
        ..
    } = state;
    update(
        &mut params.encoder_layers,
        &grads.encoder,
        &mut first_moment.encoder,
        &mut second_moment.encoder,
    )?;
    update(
        &mut params.classifier_layers,
        &grads.classifier,
        &mut first_moment.classifier,
        &mut second_moment.classifier,
    )?;
    Ok(())
}
