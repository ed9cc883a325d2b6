//! Probability-of-Improvement acquisition and the dual-target proposal rule.
//!
//! A proposal scans a candidate list, scores each unvisited point by the
//! probability that its predicted loss beats a target, and returns the
//! highest-scoring point. Two targets are used in parallel during a search:
//! the best loss seen so far and a 25% improvement on it.

use crate::space::{EncodedPoint, ParamPoint, ParamSpace};
use crate::surrogate::{GPModel, Posterior, PredictScratch};
use rayon::prelude::*;
use std::collections::HashSet;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AcquireError {
    #[error("no unvisited candidates to propose")]
    Exhausted,
    #[error("candidate has {got} dims, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
}

/// Largest space that gets fully enumerated as the candidate set; bigger
/// spaces are sampled at [`SAMPLE_BUDGET`] points per proposal.
pub const ENUMERATION_LIMIT: u128 = 500_000;
pub const SAMPLE_BUDGET: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetLabel {
    BestSoFar,
    Improvement25Pct,
}

impl std::fmt::Display for TargetLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetLabel::BestSoFar => write!(f, "best-so-far"),
            TargetLabel::Improvement25Pct => write!(f, "improvement-25pct"),
        }
    }
}

impl std::str::FromStr for TargetLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "best-so-far" => Ok(TargetLabel::BestSoFar),
            "improvement-25pct" => Ok(TargetLabel::Improvement25Pct),
            other => Err(format!("unknown target label `{other}`")),
        }
    }
}

/// A loss level the acquisition tries to beat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionTarget {
    pub value: f64,
    pub label: TargetLabel,
}

/// The two parallel targets derived from the best loss so far: the best
/// itself, and a 25% improvement on it (losses are minimized, so the
/// improved target is 0.75x the best).
pub fn dual_targets(best_loss: f64) -> (AcquisitionTarget, AcquisitionTarget) {
    (
        AcquisitionTarget {
            value: best_loss,
            label: TargetLabel::BestSoFar,
        },
        AcquisitionTarget {
            value: 0.75 * best_loss,
            label: TargetLabel::Improvement25Pct,
        },
    )
}

/// Standard normal CDF by the Abramowitz & Stegun 26.2.17 rational
/// approximation; absolute error below 7.5e-8. Zero maps to exactly 0.5: the
/// approximation is one-sided, so symmetry must be imposed at the midpoint.
pub fn normal_cdf(z: f64) -> f64 {
    const P: f64 = 0.2316419;
    const B1: f64 = 0.319381530;
    const B2: f64 = -0.356563782;
    const B3: f64 = 1.781477937;
    const B4: f64 = -1.821255978;
    const B5: f64 = 1.330274429;

    if z == 0.0 {
        return 0.5;
    }
    let x = z.abs();
    let t = 1.0 / (1.0 + P * x);
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    let poly = t * (B1 + t * (B2 + t * (B3 + t * (B4 + t * B5))));
    let tail = (pdf * poly).clamp(0.0, 1.0);
    if z >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Probability that a loss drawn from the posterior lands below the target:
/// `Φ((L* - mean)/σ)`. A zero-σ posterior degenerates to the step function,
/// with 0.5 at equality.
pub fn probability_of_improvement(post: Posterior, target: AcquisitionTarget) -> f64 {
    let sigma = post.std_dev();
    if sigma == 0.0 {
        return if post.mean < target.value {
            1.0
        } else if post.mean == target.value {
            0.5
        } else {
            0.0
        };
    }
    normal_cdf((target.value - post.mean) / sigma)
}

/// The candidate set for one proposal: the whole space when it is small
/// enough to enumerate, otherwise a uniform sample of [`SAMPLE_BUDGET`]
/// points drawn from the stream keyed by `proposal_index`.
pub fn candidate_set(
    space: &ParamSpace,
    seed: u64,
    proposal_index: u64,
) -> Vec<(ParamPoint, EncodedPoint)> {
    if space.cardinality() <= ENUMERATION_LIMIT {
        space
            .iter_points()
            .map(|p| {
                let e = space.encode(&p).expect("enumerated point encodes");
                (p, e)
            })
            .collect()
    } else {
        let mut rng = crate::seeds::rng(seed, crate::seeds::stream::CANDIDATES, proposal_index);
        (0..SAMPLE_BUDGET)
            .map(|_| {
                let p = space.sample_uniform(&mut rng);
                let e = space.encode(&p).expect("sampled point encodes");
                (p, e)
            })
            .collect()
    }
}

/// Returns the unvisited candidate with the highest probability of
/// improvement. Ties break toward the lexicographically smallest point, so
/// the winner does not depend on candidate order or thread count.
pub fn propose<'a>(
    model: &GPModel,
    candidates: &'a [(ParamPoint, EncodedPoint)],
    target: AcquisitionTarget,
    visited: &HashSet<ParamPoint>,
) -> Result<&'a ParamPoint, AcquireError> {
    if let Some((_, e)) = candidates.iter().find(|(_, e)| e.len() != model.ndims()) {
        return Err(AcquireError::DimMismatch {
            expected: model.ndims(),
            got: e.len(),
        });
    }

    let pick_better = |a: Option<(f64, &'a ParamPoint)>, b: Option<(f64, &'a ParamPoint)>| match (
        a, b,
    ) {
        (None, x) | (x, None) => x,
        (Some((pa, qa)), Some((pb, qb))) => {
            if pb > pa || (pb == pa && qb < qa) {
                Some((pb, qb))
            } else {
                Some((pa, qa))
            }
        }
    };

    let best = candidates
        .par_iter()
        .fold(
            || (None, PredictScratch::default()),
            |(acc, mut scratch), (point, encoded)| {
                if visited.contains(point) {
                    return (acc, scratch);
                }
                let post = model.predict_coords(&encoded.coords, &mut scratch);
                let pi = probability_of_improvement(post, target);
                (pick_better(acc, Some((pi, point))), scratch)
            },
        )
        .map(|(acc, _)| acc)
        .reduce(|| None, pick_better);

    best.map(|(_, point)| point).ok_or(AcquireError::Exhausted)
}
