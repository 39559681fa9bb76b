//! Training objective: modified cross-entropy on scaled logits, boundary
//! distillation against the teacher snapshot on replayed samples, and
//! prototype-direction distillation.
//!
//! All three terms and their gradients are produced by one pass in
//! [`backward`]; the value-only functions are thin wrappers over it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{
    dot, log_softmax_temp, normalize_in, project_out, softmax_unchecked, DropoutMask, Gradients,
    Head, HeadKind, ModelState, TeacherSnapshot,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha_kd: f64,
    pub beta_proto: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_kd: 0.5,
            beta_proto: 0.1,
            tau1: 0.1,
            tau2: 2.0,
            scale: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_kd >= 0.0 && self.beta_proto >= 0.0) {
            return Err(Error::param("alpha_kd and beta_proto must be non-negative"));
        }
        if !(self.tau1 > 0.0 && self.tau2 > 0.0 && self.scale > 0.0) {
            return Err(Error::param("tau1, tau2 and scale_s must be positive"));
        }
        Ok(())
    }
}

/// Temperature applied to head logits for the classification loss and the
/// MC posterior. A linear head uses plain softmax.
pub fn prediction_temperature(model: &ModelState, tau1: f64) -> f64 {
    match model.head().kind() {
        HeadKind::Cosine => tau1,
        HeadKind::Linear => 1.0,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub mce: f64,
    pub kd: f64,
    pub proto: f64,
    pub total: f64,
}

/// Multipliers on the three terms; [`LossWeights::from_config`] gives the
/// training objective `mce + alpha * kd + beta * proto`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mce: f64,
    pub kd: f64,
    pub proto: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &LossConfig) -> Self {
        Self {
            mce: 1.0,
            kd: cfg.alpha_kd,
            proto: cfg.beta_proto,
        }
    }

    pub fn only_mce() -> Self {
        Self {
            mce: 1.0,
            kd: 0.0,
            proto: 0.0,
        }
    }

    pub fn only_kd() -> Self {
        Self {
            mce: 0.0,
            kd: 1.0,
            proto: 0.0,
        }
    }

    pub fn only_proto() -> Self {
        Self {
            mce: 0.0,
            kd: 0.0,
            proto: 1.0,
        }
    }
}

/// One labeled input, optionally with the dropout mask used for the student.
#[derive(Clone, Debug)]
pub struct BatchItem<'a> {
    pub x: &'a [f64],
    pub y: usize,
    pub mask: Option<DropoutMask>,
}

impl<'a> BatchItem<'a> {
    pub fn new(x: &'a [f64], y: usize) -> Self {
        Self { x, y, mask: None }
    }
}

/// Which class indices take part in the softmax (`seen`) and which ones the
/// teacher already knows (`old`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScope {
    pub seen: Vec<usize>,
    pub old: Vec<usize>,
}

impl ClassScope {
    pub fn new(mut seen: Vec<usize>, mut old: Vec<usize>) -> Self {
        seen.sort_unstable();
        seen.dedup();
        old.sort_unstable();
        old.dedup();
        Self { seen, old }
    }

    /// Scope where every class of a `num_classes` head is seen.
    pub fn all(num_classes: usize, old: Vec<usize>) -> Self {
        Self::new((0..num_classes).collect(), old)
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        if self.seen.is_empty() {
            return Err(Error::param("no seen classes"));
        }
        if let Some(&c) = self
            .seen
            .iter()
            .chain(&self.old)
            .find(|&&c| c >= num_classes)
        {
            return Err(Error::param(format!(
                "class {c} outside the {num_classes}-class head"
            )));
        }
        if let Some(c) = self.old.iter().find(|c| !self.seen.contains(c)) {
            return Err(Error::param(format!(
                "old class {c} is not among the seen classes"
            )));
        }
        Ok(())
    }

    fn position(&self, class: usize) -> Result<usize> {
        self.seen
            .binary_search(&class)
            .map_err(|_| Error::param(format!("label {class} is not a seen class")))
    }
}

fn gather(logits: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| logits[i]).collect()
}

/// Loss value and gradient of `w.mce * mce + w.kd * kd + w.proto * proto`.
///
/// The mce term averages over `incoming` followed by `buffer`; kd averages
/// over `buffer` only. kd and proto are zero without a teacher, with no old
/// classes, or (kd) with an empty buffer; proto is zero for a linear head.
pub fn backward(
    model: &ModelState,
    teacher: Option<&TeacherSnapshot>,
    incoming: &[BatchItem<'_>],
    buffer: &[BatchItem<'_>],
    scope: &ClassScope,
    cfg: &LossConfig,
    weights: LossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    cfg.validate()?;
    scope.validate(model.num_classes())?;
    let n_mce = incoming.len() + buffer.len();
    if n_mce == 0 {
        return Err(Error::param("empty batch"));
    }
    let teacher = teacher.filter(|_| !scope.old.is_empty());
    let use_kd = teacher.is_some() && !buffer.is_empty();
    let tau_ce = prediction_temperature(model, cfg.tau1);
    let mut is_old = vec![false; model.num_classes()];
    for &c in &scope.old {
        is_old[c] = true;
    }

    let mut grads = Gradients::zeros_like(model);
    let mut mce = 0.0;
    let mut kd = 0.0;

    for (k, item) in incoming.iter().chain(buffer).enumerate() {
        let from_buffer = k >= incoming.len();
        let trace = model.forward_trace(item.x, item.mask.as_ref())?;
        let logits = gather(trace.logits(), &scope.seen);
        let mut dlogits = vec![0.0; model.num_classes()];

        let pos = scope.position(item.y)?;
        let logp = log_softmax_temp(&logits, tau_ce)?;
        mce -= logp[pos];
        let coef = weights.mce / (n_mce as f64 * tau_ce);
        for (j, lp) in logp.iter().enumerate() {
            let target = if j == pos { 1.0 } else { 0.0 };
            dlogits[scope.seen[j]] += coef * (lp.exp() - target);
        }

        if from_buffer && use_kd {
            let t = teacher.expect("checked above");
            let t_logits = gather(&t.model().forward(item.x, None)?.logits, &scope.seen);
            let p = softmax_unchecked(&t_logits, cfg.tau2);
            let logq = log_softmax_temp(&logits, cfg.tau2)?;
            let mut p_old = 0.0;
            for (j, &c) in scope.seen.iter().enumerate() {
                if is_old[c] {
                    kd -= p[j] * logq[j];
                    p_old += p[j];
                }
            }
            let coef = weights.kd / (buffer.len() as f64 * cfg.tau2);
            for (j, &c) in scope.seen.iter().enumerate() {
                let old = if is_old[c] { p[j] } else { 0.0 };
                dlogits[c] += coef * (logq[j].exp() * p_old - old);
            }
        }

        if dlogits.iter().any(|&d| d != 0.0) {
            model.backward_logits(&trace, &dlogits, item.mask.as_ref(), &mut grads)?;
        }
    }
    mce /= n_mce as f64;
    if use_kd {
        kd /= buffer.len() as f64;
    }

    let proto = match (teacher, model.head().kind()) {
        (Some(t), HeadKind::Cosine) => {
            prototype_term(model, t, &scope.old, weights.proto, Some(&mut grads))?
        }
        _ => 0.0,
    };

    if !grads.is_finite() {
        return Err(Error::NumericOverflow {
            layer: model.layers().len(),
            stage: "loss gradient",
        });
    }
    let total = weights.mce * mce + weights.kd * kd + weights.proto * proto;
    Ok((
        LossBreakdown {
            mce,
            kd,
            proto,
            total,
        },
        grads,
    ))
}

fn prototype_term(
    model: &ModelState,
    teacher: &TeacherSnapshot,
    old: &[usize],
    weight: f64,
    grads: Option<&mut Gradients>,
) -> Result<f64> {
    let (
        Head::Cosine { prototypes, .. },
        Head::Cosine {
            prototypes: frozen, ..
        },
    ) = (model.head(), teacher.model().head())
    else {
        return Err(Error::Contract(
            "prototype distillation needs cosine heads on both models".into(),
        ));
    };
    if prototypes.cols() != frozen.cols() {
        return Err(Error::shape(
            "prototype dimension",
            frozen.cols(),
            prototypes.cols(),
        ));
    }
    if let Some(&c) = old
        .iter()
        .find(|&&c| c >= prototypes.rows() || c >= frozen.rows())
    {
        return Err(Error::param(format!("old class {c} has no prototype")));
    }
    let dim = prototypes.cols();
    let mut loss = 0.0;
    let mut grads = grads;
    for &c in old {
        let (w, w_norm) = normalize_in("prototype", prototypes.row(c))?;
        let (w_star, _) = normalize_in("teacher prototype", frozen.row(c))?;
        let diff: Vec<f64> = w.iter().zip(&w_star).map(|(a, b)| a - b).collect();
        let dist = dot(&diff, &diff).sqrt();
        loss += dist;
        if let Some(g) = grads.as_deref_mut() {
            // |d| is not differentiable at zero; use the zero subgradient there.
            if dist > 0.0 && weight != 0.0 {
                let dw_hat: Vec<f64> = diff.iter().map(|d| weight * d / dist).collect();
                let dw = project_out(&dw_hat, &w, w_norm);
                let block = &mut g.head_weights_mut(model)[c * dim..(c + 1) * dim];
                block.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(loss)
}

/// Mean modified cross-entropy over `batch`.
pub fn mce_loss(
    model: &ModelState,
    batch: &[BatchItem<'_>],
    scope: &ClassScope,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    scope.validate(model.num_classes())?;
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let tau = prediction_temperature(model, cfg.tau1);
    let mut sum = 0.0;
    for item in batch {
        let logits = gather(
            &model.forward(item.x, item.mask.as_ref())?.logits,
            &scope.seen,
        );
        sum -= log_softmax_temp(&logits, tau)?[scope.position(item.y)?];
    }
    Ok(sum / batch.len() as f64)
}

/// Mean boundary distillation loss over a replay batch: teacher and student
/// distributions span all seen classes at temperature `tau2`; the cross-entropy
/// sum runs over the teacher's (old) classes only.
pub fn kd_boundary_loss(
    teacher: &TeacherSnapshot,
    model: &ModelState,
    buffer_batch: &[BatchItem<'_>],
    scope: &ClassScope,
    cfg: &LossConfig,
) -> Result<f64> {
    cfg.validate()?;
    scope.validate(model.num_classes())?;
    if scope.old.is_empty() {
        return Err(Error::Contract(
            "boundary distillation needs at least one old class".into(),
        ));
    }
    if buffer_batch.is_empty() {
        return Err(Error::param("empty replay batch"));
    }
    let mut sum = 0.0;
    for item in buffer_batch {
        let t = gather(&teacher.model().forward(item.x, None)?.logits, &scope.seen);
        let s = gather(
            &model.forward(item.x, item.mask.as_ref())?.logits,
            &scope.seen,
        );
        let p = softmax_unchecked(&t, cfg.tau2);
        let logq = log_softmax_temp(&s, cfg.tau2)?;
        for (j, c) in scope.seen.iter().enumerate() {
            if scope.old.contains(c) {
                sum -= p[j] * logq[j];
            }
        }
    }
    Ok(sum / buffer_batch.len() as f64)
}

/// Sum over old classes of the Euclidean distance between current and teacher
/// prototype directions.
pub fn prototype_distill_loss(
    model: &ModelState,
    teacher: &TeacherSnapshot,
    old: &[usize],
) -> Result<f64> {
    prototype_term(model, teacher, old, 1.0, None)
}

/// The full objective with the configured weights.
pub fn total_loss(
    model: &ModelState,
    teacher: Option<&TeacherSnapshot>,
    incoming: &[BatchItem<'_>],
    buffer: &[BatchItem<'_>],
    scope: &ClassScope,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if incoming.is_empty() {
        return Err(Error::param("empty incoming batch"));
    }
    backward(
        model,
        teacher,
        incoming,
        buffer,
        scope,
        cfg,
        LossWeights::from_config(cfg),
    )
    .map(|(b, _)| b)
}
