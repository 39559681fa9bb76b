//! MC-dropout predictive posterior and the entropy / mutual-information scores
//! used to rank samples at task end.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{softmax_temp, DropoutMask, ModelState};
use crate::report::sig9;
use crate::seed;
use crate::stream::{Sample, TaskDataset};

/// Slack on the Jensen gap `H - E[H] >= 0` that is attributed to rounding.
pub const JENSEN_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCConfig {
    /// Number of stochastic forward passes.
    pub passes: usize,
    pub tau1: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UncertaintyScore {
    pub mean_probs: Vec<f64>,
    /// Entropy of the mean distribution, in nats.
    pub entropy: f64,
    /// Mean of the per-pass entropies.
    pub expected_entropy: f64,
    pub mutual_information: f64,
}

/// Runs `mc.passes` dropout forward passes and returns the averaged softmax
/// together with the per-pass distributions. The softmax spans `classes`.
/// Pass `t` samples its mask from `seed::rng(&[mc.seed, t])`.
pub fn mc_posterior_in(
    model: &ModelState,
    x: &[f64],
    classes: &[usize],
    mc: &MCConfig,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if mc.passes == 0 {
        return Err(Error::param("MC posterior needs at least one pass"));
    }
    if classes.is_empty() {
        return Err(Error::param("MC posterior over an empty class set"));
    }
    if let Some(c) = classes.iter().find(|&&c| c >= model.num_classes()) {
        return Err(Error::param(format!("class {c} outside the head")));
    }
    let mut passes = Vec::with_capacity(mc.passes);
    let mut mean = vec![0.0; classes.len()];
    for t in 0..mc.passes {
        let mask = DropoutMask::sample(model, &mut seed::rng(&[mc.seed, t as u64]));
        let logits = model.forward(x, Some(&mask))?.logits;
        let picked: Vec<f64> = classes.iter().map(|&c| logits[c]).collect();
        let p = softmax_temp(&picked, mc.tau1)?;
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v;
        }
        passes.push(p);
    }
    for m in &mut mean {
        *m /= mc.passes as f64;
    }
    Ok((mean, passes))
}

/// [`mc_posterior_in`] over every class of the head.
pub fn mc_posterior(
    model: &ModelState,
    x: &[f64],
    mc: &MCConfig,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let all: Vec<usize> = (0..model.num_classes()).collect();
    mc_posterior_in(model, x, &all, mc)
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// `-sum p ln p` with `0 ln 0 = 0`.
pub fn predictive_entropy(p: &[f64]) -> Result<f64> {
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::param(
            "probability entries must be finite and non-negative",
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(entropy_unchecked(p).max(0.0))
}

/// Entropy of the averaged distribution minus the average entropy.
pub fn mutual_information(per_pass: &[Vec<f64>]) -> Result<UncertaintyScore> {
    let Some(first) = per_pass.first() else {
        return Err(Error::param("mutual information needs at least one pass"));
    };
    let k = first.len();
    let mut mean = vec![0.0; k];
    let mut expected = 0.0;
    for p in per_pass {
        if p.len() != k {
            return Err(Error::shape("MC pass classes", k, p.len()));
        }
        expected += predictive_entropy(p)?;
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let t = per_pass.len() as f64;
    for m in &mut mean {
        *m /= t;
    }
    let expected_entropy = expected / t;
    let entropy = entropy_unchecked(&mean).max(0.0);
    let gap = entropy - expected_entropy;
    if gap < -JENSEN_SLACK {
        return Err(Error::Contract(format!(
            "mutual information {gap:e} violates Jensen's inequality"
        )));
    }
    Ok(UncertaintyScore {
        mean_probs: mean,
        entropy,
        expected_entropy,
        mutual_information: gap.clamp(0.0, entropy),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredSample {
    /// Position of the sample within its task.
    pub index: usize,
    pub sample_id: u64,
    pub score: UncertaintyScore,
}

/// Which end of the mutual-information ranking candidates come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateOrder {
    #[default]
    MaxMi,
    MinMi,
}

/// Scores every sample of `task` and sorts by mutual information (descending
/// for [`CandidateOrder::MaxMi`], ascending for `MinMi`), ties by index.
///
/// Sample `k` uses mask seeds derived from `(mc.seed, task_id, k)`, so the
/// result does not depend on evaluation order.
pub fn score_and_sort_ordered(
    model: &ModelState,
    task: &TaskDataset,
    classes: &[usize],
    mc: &MCConfig,
    order: CandidateOrder,
) -> Result<Vec<ScoredSample>> {
    let mut scored = task
        .samples
        .par_iter()
        .enumerate()
        .map(|(index, sample)| score_one(model, task.task_id, index, sample, classes, mc))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        let (x, y) = (a.score.mutual_information, b.score.mutual_information);
        let primary = match order {
            CandidateOrder::MaxMi => y.total_cmp(&x),
            CandidateOrder::MinMi => x.total_cmp(&y),
        };
        primary.then(a.index.cmp(&b.index))
    });
    Ok(scored)
}

/// [`score_and_sort_ordered`] with the most uncertain samples first.
pub fn score_and_sort(
    model: &ModelState,
    task: &TaskDataset,
    classes: &[usize],
    mc: &MCConfig,
) -> Result<Vec<ScoredSample>> {
    score_and_sort_ordered(model, task, classes, mc, CandidateOrder::MaxMi)
}

fn score_one(
    model: &ModelState,
    task_id: usize,
    index: usize,
    sample: &Sample,
    classes: &[usize],
    mc: &MCConfig,
) -> Result<ScoredSample> {
    let per_sample = MCConfig {
        seed: seed::derive(&[mc.seed, seed::TAG_MC, task_id as u64, index as u64]),
        ..mc.clone()
    };
    let (_, passes) = mc_posterior_in(model, &sample.x, classes, &per_sample)?;
    Ok(ScoredSample {
        index,
        sample_id: sample.id,
        score: mutual_information(&passes)?,
    })
}

/// One `task_id,sample_index,H,expected_H,MI` line per scored sample, in the
/// order given.
pub fn score_dump(task_id: usize, scored: &[ScoredSample]) -> String {
    let mut out = String::new();
    for s in scored {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            task_id,
            s.index,
            sig9(s.score.entropy),
            sig9(s.score.expected_entropy),
            sig9(s.score.mutual_information)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{HeadKind, NetSpec};
    use crate::stream::Sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(dropout: f64, seed: u64) -> ModelState {
        ModelState::init(
            &NetSpec {
                input_dim: 3,
                hidden: vec![16, 16],
                num_classes: 4,
                dropout_rate: dropout,
                head: HeadKind::Cosine,
                scale: 10.0,
            },
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn mc(passes: usize) -> MCConfig {
        MCConfig {
            passes,
            tau1: 0.1,
            seed: 42,
        }
    }

    #[test]
    #[allow(clippy::approx_constant)] // six-digit reference values
    fn entropy_examples() {
        let uniform = vec![0.1; 10];
        assert!((predictive_entropy(&uniform).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((predictive_entropy(&uniform).unwrap() - 2.302_585).abs() < 1e-6);
        assert_eq!(predictive_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((predictive_entropy(&[0.5, 0.5]).unwrap() - 0.693_147).abs() < 1e-6);
        assert!(predictive_entropy(&[1.2, -0.2]).is_err());
        assert!(predictive_entropy(&[0.3, 0.3]).is_err());
    }

    #[test]
    fn mi_examples() {
        let same = vec![vec![0.2, 0.8]; 4];
        let s = mutual_information(&same).unwrap();
        assert_eq!(s.mutual_information, 0.0);

        let opposed = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = mutual_information(&opposed).unwrap();
        assert!((s.entropy - 2f64.ln()).abs() < 1e-15);
        assert_eq!(s.expected_entropy, 0.0);
        assert!((s.mutual_information - 2f64.ln()).abs() < 1e-15);

        assert!(matches!(
            mutual_information(&[vec![0.5, 0.5], vec![1.0, 0.0, 0.0]]),
            Err(Error::Shape { .. })
        ));
        assert!(mutual_information(&[]).is_err());
    }

    #[test]
    fn no_dropout_means_identical_passes() {
        let m = model(0.0, 1);
        let (mean, passes) = mc_posterior(&m, &[0.5, -0.3, 1.0], &mc(6)).unwrap();
        assert!(passes.iter().all(|p| p == &passes[0]));
        for (a, b) in mean.iter().zip(&passes[0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let s = mutual_information(&passes).unwrap();
        assert_eq!(s.mutual_information, 0.0);
    }

    #[test]
    fn single_pass_mean_is_the_pass() {
        let m = model(0.3, 2);
        let (mean, passes) = mc_posterior(&m, &[0.5, -0.3, 1.0], &mc(1)).unwrap();
        assert_eq!(mean, passes[0]);
        assert!(mc_posterior(&m, &[0.5, -0.3, 1.0], &mc(0)).is_err());
    }

    #[test]
    fn posterior_is_reproducible_and_normalized() {
        let m = model(0.3, 3);
        let x = [0.1, 0.9, -0.4];
        let a = mc_posterior(&m, &x, &mc(10)).unwrap();
        let b = mc_posterior(&m, &x, &mc(10)).unwrap();
        assert_eq!(a, b);
        assert!((a.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn task(xs: Vec<Vec<f64>>) -> TaskDataset {
        TaskDataset {
            task_id: 0,
            classes: vec![0, 1],
            samples: xs
                .into_iter()
                .enumerate()
                .map(|(i, x)| Sample {
                    id: 100 + i as u64,
                    x,
                    y: i % 2,
                })
                .collect(),
        }
    }

    #[test]
    fn identical_samples_keep_their_order() {
        let m = model(0.0, 4);
        let t = task(vec![vec![0.3, 0.3, 0.3]; 7]);
        let scored = score_and_sort(&m, &t, &[0, 1, 2, 3], &mc(5)).unwrap();
        assert_eq!(scored.len(), 7);
        assert!(scored.iter().enumerate().all(|(i, s)| s.index == i));
    }

    #[test]
    fn sorted_head_is_the_maximum() {
        let m = model(0.4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                (0..3)
                    .map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0))
                    .collect()
            })
            .collect();
        let t = task(xs);
        let scored = score_and_sort(&m, &t, &[0, 1, 2, 3], &mc(8)).unwrap();
        // linear scan
        let mut best = f64::NEG_INFINITY;
        for s in &scored {
            if s.score.mutual_information > best {
                best = s.score.mutual_information;
            }
        }
        assert_eq!(scored[0].score.mutual_information, best);
        assert!(scored
            .windows(2)
            .all(|w| w[0].score.mutual_information >= w[1].score.mutual_information));

        let rev =
            score_and_sort_ordered(&m, &t, &[0, 1, 2, 3], &mc(8), CandidateOrder::MinMi).unwrap();
        assert!(rev
            .windows(2)
            .all(|w| w[0].score.mutual_information <= w[1].score.mutual_information));
    }

    #[test]
    fn dump_format() {
        let scored = vec![ScoredSample {
            index: 3,
            sample_id: 9,
            score: UncertaintyScore {
                mean_probs: vec![0.5, 0.5],
                entropy: 2f64.ln(),
                expected_entropy: 0.0,
                mutual_information: 2f64.ln(),
            },
        }];
        assert_eq!(score_dump(1, &scored), "1,3,0.693147181,0,0.693147181\n");
    }
}
