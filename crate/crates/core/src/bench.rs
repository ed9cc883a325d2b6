//! Cheap benchmark objective for exercising the search loop: the Branin
//! function discretized onto a square grid, plus a paired sign test for
//! comparing search strategies.

use crate::optimizer::{EvalOutcome, Objective, TrialStatus};
use crate::space::{DimKind, ParamDim, ParamPoint, ParamSpace, RawValue};
use std::f64::consts::PI;

/// Branin-Hoo function on [-5, 10] x [0, 15]; three global minima of value
/// ~0.397887.
pub fn branin(x1: f64, x2: f64) -> f64 {
    let a = 1.0;
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let r = 6.0;
    let s = 10.0;
    let t = 1.0 / (8.0 * PI);
    a * (x2 - b * x1 * x1 + c * x1 - r).powi(2) + s * (1.0 - t) * x1.cos() + s
}

/// A `side x side` grid over Branin's domain, with integer grid indices as
/// the raw values.
pub fn branin_space(side: usize) -> ParamSpace {
    assert!(side >= 2);
    let dim = |name: &str| ParamDim {
        name: name.to_string(),
        kind: DimKind::IntegerRange,
        values: (0..side as i64).map(RawValue::Int).collect(),
    };
    ParamSpace::new(vec![dim("x1"), dim("x2")]).unwrap()
}

/// Objective over [`branin_space`]: maps grid indices to domain coordinates
/// and returns the Branin value as the loss.
pub struct BraninObjective {
    side: usize,
}

impl BraninObjective {
    pub fn new(side: usize) -> Self {
        assert!(side >= 2);
        BraninObjective { side }
    }

    pub fn value_at(&self, point: &ParamPoint) -> f64 {
        let i = point.values[0].as_int().expect("grid index") as f64;
        let j = point.values[1].as_int().expect("grid index") as f64;
        let denom = (self.side - 1) as f64;
        let x1 = -5.0 + 15.0 * i / denom;
        let x2 = 15.0 * j / denom;
        branin(x1, x2)
    }
}

impl Objective for BraninObjective {
    fn evaluate(&mut self, _trial_id: u64, point: &ParamPoint) -> EvalOutcome {
        EvalOutcome {
            loss: self.value_at(point),
            error_rate: 0.0,
            status: TrialStatus::Ok,
        }
    }
}

/// One-sided sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties are excluded by the caller.
pub fn sign_test_p(wins: u32, losses: u32) -> f64 {
    let n = wins + losses;
    let mut coeff = 1.0f64; // C(n, 0)
    let mut tail = 0.0f64;
    for k in 0..=n {
        if k >= wins {
            tail += coeff;
        }
        if k < n {
            coeff = coeff * (n - k) as f64 / (k + 1) as f64;
        }
    }
    tail / 2.0f64.powi(n as i32)
}
