//! Central finite-difference check of the analytic loss gradients.
//!
//! The numeric side only evaluates the value functions
//! ([`mce_loss`], [`kd_boundary_loss`], [`prototype_distill_loss`]); it never
//! touches [`objectives::backward`], which produces the analytic side.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::{DropoutMask, Gradients, HeadKind, ModelState, NetSpec, TeacherSnapshot};
use crate::objectives::{
    self, kd_boundary_loss, mce_loss, prototype_distill_loss, BatchItem, ClassScope, LossConfig,
    LossWeights,
};
use crate::seed;

const GRADCHECK_TAG: u64 = 0x6772_6164;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Denominator floor: entries with both magnitudes below this are compared in
/// absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Mce,
    Kd,
    Proto,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [
        LossTerm::Mce,
        LossTerm::Kd,
        LossTerm::Proto,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Mce => "mce",
            LossTerm::Kd => "kd",
            LossTerm::Proto => "proto",
            LossTerm::Total => "total",
        }
    }
}

/// A small random model, teacher and batch.
#[derive(Clone, Debug)]
pub struct Problem {
    pub model: ModelState,
    pub teacher: TeacherSnapshot,
    pub incoming: Vec<(Vec<f64>, usize, DropoutMask)>,
    pub buffer: Vec<(Vec<f64>, usize, DropoutMask)>,
    pub scope: ClassScope,
    pub config: LossConfig,
}

impl Problem {
    /// Draws a random problem. Draws whose cosine features or prototypes
    /// vanish (a dead ReLU layer) are redrawn, since the loss is undefined
    /// there.
    pub fn random(seed: u64, head: HeadKind) -> Result<Self> {
        let mut last_err = None;
        for attempt in 0..64 {
            let p = Self::draw(seed, attempt, head)?;
            match p.value(&p.model, LossTerm::Total) {
                Ok(_) => return Ok(p),
                Err(e @ Error::DegenerateNorm { .. }) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }

    fn draw(seed: u64, attempt: u64, head: HeadKind) -> Result<Self> {
        let mut rng = seed::rng(&[seed, GRADCHECK_TAG, attempt]);
        let input_dim = rng.random_range(2..6);
        let n_hidden = rng.random_range(1..3);
        let hidden: Vec<usize> = (0..n_hidden).map(|_| rng.random_range(3..9)).collect();
        let num_classes = rng.random_range(3..6);
        let config = LossConfig {
            alpha_kd: rng.random_range(0.1..1.0),
            beta_proto: rng.random_range(0.05..0.5),
            tau1: rng.random_range(0.1..2.0),
            tau2: rng.random_range(0.5..4.0),
            scale: rng.random_range(1.0..10.0),
        };
        let spec = NetSpec {
            input_dim,
            hidden,
            num_classes,
            dropout_rate: rng.random_range(0.0..0.4),
            head,
            scale: config.scale,
        };
        let model = ModelState::init(&spec, &mut rng)?;
        let mut teacher_model = model.clone();
        for v in teacher_model.param_blocks_mut().into_iter().flatten() {
            *v += rng.random_range(-0.3..0.3);
        }
        let teacher = TeacherSnapshot::freeze(&teacher_model, 0);

        let seen_count = rng.random_range(2..=num_classes);
        let old_count = rng.random_range(1..seen_count);
        let scope = ClassScope::new((0..seen_count).collect(), (0..old_count).collect());
        let item = |rng: &mut seed::Rng| {
            let x: Vec<f64> = (0..input_dim)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let y = rng.random_range(0..seen_count);
            let mask = DropoutMask::sample(&model, rng);
            (x, y, mask)
        };
        let incoming = (0..rng.random_range(1..5))
            .map(|_| item(&mut rng))
            .collect();
        let buffer = (0..rng.random_range(1..5))
            .map(|_| item(&mut rng))
            .collect();
        Ok(Self {
            model,
            teacher,
            incoming,
            buffer,
            scope,
            config,
        })
    }

    fn items(list: &[(Vec<f64>, usize, DropoutMask)]) -> Vec<BatchItem<'_>> {
        list.iter()
            .map(|(x, y, m)| BatchItem {
                x,
                y: *y,
                mask: Some(m.clone()),
            })
            .collect()
    }

    fn weights(&self, term: LossTerm) -> LossWeights {
        match term {
            LossTerm::Mce => LossWeights::only_mce(),
            LossTerm::Kd => LossWeights::only_kd(),
            LossTerm::Proto => LossWeights::only_proto(),
            LossTerm::Total => LossWeights::from_config(&self.config),
        }
    }

    /// Loss value through the value-only functions.
    pub fn value(&self, model: &ModelState, term: LossTerm) -> Result<f64> {
        let incoming = Self::items(&self.incoming);
        let buffer = Self::items(&self.buffer);
        let all: Vec<BatchItem<'_>> = incoming.iter().chain(&buffer).cloned().collect();
        let cfg = &self.config;
        let mce = || mce_loss(model, &all, &self.scope, cfg);
        let kd = || kd_boundary_loss(&self.teacher, model, &buffer, &self.scope, cfg);
        let proto = || match model.head().kind() {
            HeadKind::Cosine => prototype_distill_loss(model, &self.teacher, &self.scope.old),
            HeadKind::Linear => Ok(0.0),
        };
        Ok(match term {
            LossTerm::Mce => mce()?,
            LossTerm::Kd => kd()?,
            LossTerm::Proto => proto()?,
            LossTerm::Total => mce()? + cfg.alpha_kd * kd()? + cfg.beta_proto * proto()?,
        })
    }

    pub fn analytic(&self, term: LossTerm) -> Result<Gradients> {
        let incoming = Self::items(&self.incoming);
        let buffer = Self::items(&self.buffer);
        let (_, g) = objectives::backward(
            &self.model,
            Some(&self.teacher),
            &incoming,
            &buffer,
            &self.scope,
            &self.config,
            self.weights(term),
        )?;
        Ok(g)
    }

    /// Central differences over every parameter.
    pub fn numeric(&self, term: LossTerm, eps: f64) -> Result<Vec<f64>> {
        let mut probe = self.model.clone();
        let n = probe.param_count();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let original = flat_get(&probe, k);
            flat_set(&mut probe, k, original + eps);
            let up = self.value(&probe, term)?;
            flat_set(&mut probe, k, original - eps);
            let down = self.value(&probe, term)?;
            flat_set(&mut probe, k, original);
            out.push((up - down) / (2.0 * eps));
        }
        Ok(out)
    }
}

fn flat_get(model: &ModelState, mut k: usize) -> f64 {
    for b in model.param_blocks() {
        if k < b.len() {
            return b[k];
        }
        k -= b.len();
    }
    panic!("parameter index out of range")
}

fn flat_set(model: &mut ModelState, mut k: usize, v: f64) {
    for b in model.param_blocks_mut() {
        if k < b.len() {
            b[k] = v;
            return;
        }
        k -= b.len();
    }
    panic!("parameter index out of range")
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub term: LossTerm,
    pub seed: u64,
    pub head: &'static str,
    pub params: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE
    }
}

pub fn check(problem: &Problem, term: LossTerm, eps: f64) -> Result<f64> {
    let analytic = problem.analytic(term)?.flat();
    let numeric = problem.numeric(term, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max))
}

/// Checks every loss term on `configs` random problems each. Cosine heads are
/// used throughout; mce and kd additionally alternate with linear heads.
pub fn run_suite(configs: usize, base_seed: u64, eps: f64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for term in LossTerm::ALL {
        for i in 0..configs {
            let seed = seed::derive(&[base_seed, term as u64, i as u64]);
            let head = match term {
                LossTerm::Mce | LossTerm::Kd if i % 2 == 1 => HeadKind::Linear,
                _ => HeadKind::Cosine,
            };
            let problem = Problem::random(seed, head)?;
            results.push(CheckResult {
                term,
                seed,
                head: match head {
                    HeadKind::Linear => "linear",
                    HeadKind::Cosine => "cosine",
                },
                params: problem.model.param_count(),
                max_rel_error: check(&problem, term, eps)?,
            });
        }
    }
    Ok(results)
}
