//! Multilayer perceptron encoder with a linear or scaled-cosine head.
//!
//! Parameters are addressed as an ordered list of flat blocks
//! (`layer0.weight, layer0.bias, ..., head.weights[, head.biases]`); the same
//! layout is shared by [`Gradients`] so updates and finite-difference checks can
//! walk both in lockstep.

use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use super::ops::{dot, l2_norm, normalize_in};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Head {
    /// `logit_i = w_i . f + b_i`
    Linear {
        weights: DenseMatrix,
        biases: Vec<f64>,
    },
    /// `logit_i = s * (w_i / |w_i|) . (f / |f|)`; prototypes are stored
    /// unnormalized and normalized on use.
    Cosine { prototypes: DenseMatrix, scale: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Cosine,
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Linear { .. } => HeadKind::Linear,
            Head::Cosine { .. } => HeadKind::Cosine,
        }
    }

    fn weights(&self) -> &DenseMatrix {
        match self {
            Head::Linear { weights, .. } => weights,
            Head::Cosine { prototypes, .. } => prototypes,
        }
    }
}

/// Architecture description used to initialize a [`ModelState`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub head: HeadKind,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    layers: Vec<DenseLayer>,
    dropout_rate: f64,
    head: Head,
}

/// Binary keep-masks for each hidden layer, applied with inverted scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    layers: Vec<Vec<f64>>,
    keep_probability: f64,
}

impl DropoutMask {
    pub fn new(layers: Vec<Vec<f64>>, keep_probability: f64) -> Result<Self> {
        if !(keep_probability > 0.0 && keep_probability <= 1.0) {
            return Err(Error::param(format!(
                "keep probability must lie in (0, 1], got {keep_probability}"
            )));
        }
        if layers.iter().flatten().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::param("dropout mask entries must be 0 or 1"));
        }
        Ok(Self {
            layers,
            keep_probability,
        })
    }

    /// Draws one Bernoulli(keep) entry per hidden unit of `model`.
    pub fn sample(model: &ModelState, rng: &mut impl Rng) -> Self {
        let keep = 1.0 - model.dropout_rate;
        let layers = model
            .layers
            .iter()
            .map(|l| {
                (0..l.bias.len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self {
            layers,
            keep_probability: keep,
        }
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn keep_probability(&self) -> f64 {
        self.keep_probability
    }
}

/// Output of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Intermediate values retained for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    features: Vec<f64>,
    logits: Vec<f64>,
    cosine: Option<CosineTrace>,
}

#[derive(Clone, Debug)]
struct CosineTrace {
    unit_features: Vec<f64>,
    feature_norm: f64,
    unit_prototypes: Vec<Vec<f64>>,
    prototype_norms: Vec<f64>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

/// One row of the classifier weight report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightNorm {
    pub class: usize,
    pub norm: f64,
    pub bias: Option<f64>,
}

/// Initial encoder bias.
pub const INIT_BIAS: f64 = 0.01;

fn check_finite(values: &[f64], layer: usize, stage: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow { layer, stage })
    }
}

impl ModelState {
    pub fn from_parts(layers: Vec<DenseLayer>, dropout_rate: f64, head: Head) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::param(format!(
                "dropout rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::shape(
                    "layer bias",
                    layer.weight.rows(),
                    layer.bias.len(),
                ));
            }
            if i > 0 && layers[i - 1].weight.rows() != layer.weight.cols() {
                return Err(Error::shape(
                    "layer chain",
                    layers[i - 1].weight.rows(),
                    layer.weight.cols(),
                ));
            }
        }
        let feature_dim = layers.last().map(|l| l.weight.rows());
        match &head {
            Head::Linear { weights, biases } => {
                if biases.len() != weights.rows() {
                    return Err(Error::shape("head biases", weights.rows(), biases.len()));
                }
            }
            Head::Cosine { scale, .. } => {
                if !(*scale > 0.0) {
                    return Err(Error::param(format!(
                        "cosine scale must be positive, got {scale}"
                    )));
                }
            }
        }
        if let Some(d) = feature_dim {
            if head.weights().cols() != d {
                return Err(Error::shape("head input", d, head.weights().cols()));
            }
        }
        if head.weights().rows() == 0 {
            return Err(Error::param("head needs at least one class"));
        }
        Ok(Self {
            layers,
            dropout_rate,
            head,
        })
    }

    /// Random initialization: He-uniform encoder weights, small positive biases
    /// (so a fully dropped layer does not zero every later activation),
    /// standard normal prototypes for the cosine head.
    pub fn init(spec: &NetSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.input_dim == 0 || spec.num_classes == 0 || spec.hidden.contains(&0) {
            return Err(Error::param("network dimensions must be positive"));
        }
        let mut layers = Vec::with_capacity(spec.hidden.len());
        let mut fan_in = spec.input_dim;
        for &width in &spec.hidden {
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight =
                DenseMatrix::from_fn(width, fan_in, |_, _| rng.random_range(-bound..bound));
            layers.push(DenseLayer {
                weight,
                bias: vec![INIT_BIAS; width],
            });
            fan_in = width;
        }
        let head = match spec.head {
            HeadKind::Linear => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Head::Linear {
                    weights: DenseMatrix::from_fn(spec.num_classes, fan_in, |_, _| {
                        rng.random_range(-bound..bound)
                    }),
                    biases: vec![0.0; spec.num_classes],
                }
            }
            HeadKind::Cosine => Head::Cosine {
                prototypes: DenseMatrix::from_fn(spec.num_classes, fan_in, |_, _| {
                    StandardNormal.sample(rng)
                }),
                scale: spec.scale,
            },
        };
        Self::from_parts(layers, spec.dropout_rate, head)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Head {
        &mut self.head
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn num_classes(&self) -> usize {
        self.head.weights().rows()
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .first()
            .map(|l| l.weight.cols())
            .unwrap_or_else(|| self.head.weights().cols())
    }

    pub fn feature_dim(&self) -> usize {
        self.head.weights().cols()
    }

    /// Row `class` of the head weight matrix as stored.
    pub fn class_weight(&self, class: usize) -> &[f64] {
        self.head.weights().row(class)
    }

    pub fn forward(&self, x: &[f64], mask: Option<&DropoutMask>) -> Result<Forward> {
        let trace = self.forward_trace(x, mask)?;
        Ok(Forward {
            features: trace.features,
            logits: trace.logits,
        })
    }

    pub fn forward_trace(&self, x: &[f64], mask: Option<&DropoutMask>) -> Result<Trace> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("forward input", self.input_dim(), x.len()));
        }
        if let Some(m) = mask {
            if m.layers.len() != self.layers.len() {
                return Err(Error::shape(
                    "dropout mask layers",
                    self.layers.len(),
                    m.layers.len(),
                ));
            }
            for (ml, l) in m.layers.iter().zip(&self.layers) {
                if ml.len() != l.bias.len() {
                    return Err(Error::shape("dropout mask width", l.bias.len(), ml.len()));
                }
            }
        }

        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.matvec(&h);
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            check_finite(&z, li, "forward")?;
            let mut a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            if let Some(m) = mask {
                let inv_keep = 1.0 / m.keep_probability;
                for (ai, mi) in a.iter_mut().zip(&m.layers[li]) {
                    *ai *= mi * inv_keep;
                }
            }
            inputs.push(std::mem::replace(&mut h, a));
            pre.push(z);
        }
        let features = h;

        let (logits, cosine) = match &self.head {
            Head::Linear { weights, biases } => {
                let mut logits = weights.matvec(&features);
                for (l, b) in logits.iter_mut().zip(biases) {
                    *l += b;
                }
                (logits, None)
            }
            Head::Cosine { prototypes, scale } => {
                let (unit_features, feature_norm) = normalize_in("cosine features", &features)?;
                let mut unit_prototypes = Vec::with_capacity(prototypes.rows());
                let mut prototype_norms = Vec::with_capacity(prototypes.rows());
                for r in 0..prototypes.rows() {
                    let (u, n) = normalize_in("cosine prototype", prototypes.row(r))?;
                    unit_prototypes.push(u);
                    prototype_norms.push(n);
                }
                let logits = unit_prototypes
                    .iter()
                    .map(|w| scale * dot(w, &unit_features))
                    .collect();
                (
                    logits,
                    Some(CosineTrace {
                        unit_features,
                        feature_norm,
                        unit_prototypes,
                        prototype_norms,
                    }),
                )
            }
        };
        check_finite(&logits, self.layers.len(), "head")?;

        Ok(Trace {
            inputs,
            pre,
            features,
            logits,
            cosine,
        })
    }

    /// Accumulates into `grads` the parameter gradient implied by `dlogits`
    /// (the loss derivative with respect to this trace's logits).
    pub fn backward_logits(
        &self,
        trace: &Trace,
        dlogits: &[f64],
        mask: Option<&DropoutMask>,
        grads: &mut Gradients,
    ) -> Result<()> {
        if dlogits.len() != self.num_classes() {
            return Err(Error::shape("dlogits", self.num_classes(), dlogits.len()));
        }
        let n_layers = self.layers.len();
        check_finite(dlogits, n_layers, "head backward")?;

        let dfeatures = match (&self.head, &trace.cosine) {
            (Head::Linear { weights, .. }, _) => {
                grads.blocks[2 * n_layers]
                    .iter_mut()
                    .zip(outer_iter(dlogits, &trace.features))
                    .for_each(|(g, v)| *g += v);
                for (g, d) in grads.blocks[2 * n_layers + 1].iter_mut().zip(dlogits) {
                    *g += d;
                }
                weights.transpose_matvec(dlogits)
            }
            (Head::Cosine { scale, .. }, Some(ct)) => {
                let dim = ct.unit_features.len();
                let mut du = vec![0.0; dim];
                for (c, &d) in dlogits.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let w = &ct.unit_prototypes[c];
                    for (a, wi) in du.iter_mut().zip(w) {
                        *a += scale * d * wi;
                    }
                    // d/dw of s * (w/|w|) . u
                    let proj = dot(w, &ct.unit_features);
                    let inv = scale * d / ct.prototype_norms[c];
                    let g = &mut grads.blocks[2 * n_layers][c * dim..(c + 1) * dim];
                    for ((gi, ui), wi) in g.iter_mut().zip(&ct.unit_features).zip(w) {
                        *gi += inv * (ui - wi * proj);
                    }
                }
                project_out(&du, &ct.unit_features, ct.feature_norm)
            }
            (Head::Cosine { .. }, None) => {
                return Err(Error::Contract("cosine trace missing".into()));
            }
        };

        let mut delta = dfeatures;
        for li in (0..n_layers).rev() {
            if let Some(m) = mask {
                let inv_keep = 1.0 / m.keep_probability;
                for (d, mi) in delta.iter_mut().zip(&m.layers[li]) {
                    *d *= mi * inv_keep;
                }
            }
            for (d, z) in delta.iter_mut().zip(&trace.pre[li]) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
            check_finite(&delta, li, "backward")?;
            let input = &trace.inputs[li];
            let (wblock, rest) = grads.blocks[2 * li..].split_at_mut(1);
            let cols = input.len();
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (g, x) in wblock[0][r * cols..(r + 1) * cols].iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            for (g, d) in rest[0].iter_mut().zip(&delta) {
                *g += d;
            }
            if li > 0 {
                delta = self.layers[li].weight.transpose_matvec(&delta);
            }
        }
        Ok(())
    }

    pub fn param_blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.weight.values());
            out.push(&l.bias);
        }
        match &self.head {
            Head::Linear { weights, biases } => {
                out.push(weights.values());
                out.push(biases);
            }
            Head::Cosine { prototypes, .. } => out.push(prototypes.values()),
        }
        out
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.weight.values_mut());
            out.push(&mut l.bias);
        }
        match &mut self.head {
            Head::Linear { weights, biases } => {
                out.push(weights.values_mut());
                out.push(biases);
            }
            Head::Cosine { prototypes, .. } => out.push(prototypes.values_mut()),
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len()).sum()
    }

    /// Hash over the bit patterns of all parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for block in self.param_blocks() {
            for v in block {
                v.to_bits().hash(&mut h);
            }
        }
        if let Head::Cosine { scale, .. } = &self.head {
            scale.to_bits().hash(&mut h);
        }
        self.dropout_rate.to_bits().hash(&mut h);
        h.finish()
    }

    /// Per-class weight norm (on stored, unnormalized rows) and bias.
    pub fn weight_magnitude_report(&self) -> Vec<WeightNorm> {
        let w = self.head.weights();
        (0..w.rows())
            .map(|c| WeightNorm {
                class: c,
                norm: l2_norm(w.row(c)),
                bias: match &self.head {
                    Head::Linear { biases, .. } => Some(biases[c]),
                    Head::Cosine { .. } => None,
                },
            })
            .collect()
    }
}

fn outer_iter<'a>(a: &'a [f64], b: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    a.iter().flat_map(move |ai| b.iter().map(move |bj| ai * bj))
}

/// Chain rule through `u = v / |v|`: returns `(du - u (u . du)) / |v|`.
pub(crate) fn project_out(du: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    let proj = dot(unit, du);
    du.iter()
        .zip(unit)
        .map(|(d, u)| (d - u * proj) / norm)
        .collect()
}

/// Parameter gradients laid out like [`ModelState::param_blocks`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelState) -> Self {
        Self {
            blocks: model
                .param_blocks()
                .iter()
                .map(|b| vec![0.0; b.len()])
                .collect(),
        }
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.blocks
    }

    /// Flat block holding the head weights (prototypes for a cosine head).
    pub fn head_weights_mut(&mut self, model: &ModelState) -> &mut [f64] {
        &mut self.blocks[2 * model.layers.len()]
    }

    pub fn scale(&mut self, k: f64) {
        self.blocks.iter_mut().flatten().for_each(|g| *g *= k);
    }

    pub fn add(&mut self, other: &Gradients) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::shape(
                "gradient blocks",
                self.blocks.len(),
                other.blocks.len(),
            ));
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            if a.len() != b.len() {
                return Err(Error::shape("gradient block", a.len(), b.len()));
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|g| g.is_finite())
    }
}

/// Plain gradient descent: `p <- p - lr * g` for every parameter.
pub fn sgd_step(model: &mut ModelState, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::param(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let mut blocks = model.param_blocks_mut();
    if blocks.len() != grads.blocks.len() {
        return Err(Error::shape("sgd blocks", blocks.len(), grads.blocks.len()));
    }
    for (p, g) in blocks.iter().zip(&grads.blocks) {
        if p.len() != g.len() {
            return Err(Error::shape("sgd block", p.len(), g.len()));
        }
    }
    for (p, g) in blocks.iter_mut().zip(&grads.blocks) {
        for (pi, gi) in p.iter_mut().zip(g) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}

/// Frozen copy of the model taken when a task ends.
#[derive(Clone, Debug)]
pub struct TeacherSnapshot {
    model: ModelState,
    task: usize,
}

impl TeacherSnapshot {
    pub fn freeze(model: &ModelState, task: usize) -> Self {
        Self {
            model: model.clone(),
            task,
        }
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn task(&self) -> usize {
        self.task
    }
}
