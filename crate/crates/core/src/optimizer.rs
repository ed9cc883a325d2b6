//! Two-stage hyper-parameter search: random warm-up, then GP-guided
//! proposals, with an append-only trial ledger as the resume source of truth.
//!
//! Every trial's randomness is keyed by its ledger index, never by process
//! history, so an interrupted run continued from the persisted ledger
//! reproduces the uninterrupted run exactly (wall times aside).

use crate::acquire::{
    candidate_set, dual_targets, propose, AcquireError, TargetLabel, ENUMERATION_LIMIT,
};
use crate::space::{ParamPoint, ParamSpace, RawValue, SpaceError};
use crate::surrogate::{GPConfig, GPModel};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("adaptive search needs at least 2 ok trials, ledger has {have}")]
    NeedOkTrials { have: usize },
    #[error("wanted {wanted} ok trials, ledger has {available}")]
    Shortfall { wanted: usize, available: usize },
    #[error("trial id {got} out of sequence, expected {expected}")]
    IdSequence { expected: u64, got: u64 },
    #[error("ledger line {line}: {reason}")]
    Ledger { line: usize, reason: String },
    #[error("ledger I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Random,
    Adaptive,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Random => write!(f, "random"),
            Stage::Adaptive => write!(f, "adaptive"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialStatus {
    Ok,
    Diverged,
    Failed,
}

impl std::fmt::Display for TrialStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrialStatus::Ok => write!(f, "ok"),
            TrialStatus::Diverged => write!(f, "diverged"),
            TrialStatus::Failed => write!(f, "failed"),
        }
    }
}

/// One evaluated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub id: u64,
    pub point: ParamPoint,
    pub stage: Stage,
    pub target_label: Option<TargetLabel>,
    pub loss: f64,
    pub error_rate: f64,
    pub status: TrialStatus,
    /// Seconds spent evaluating; excluded from determinism comparisons.
    pub wall_time: f64,
}

/// Desk-scale resource limits a trial must respect.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct ResourceCaps {
    /// Upper bound on trainable parameters.
    pub max_params: u64,
    /// Upper bound on estimated training work: forward-pass multiply-adds
    /// times examples seen across all epochs (backward pass folded into the
    /// estimate's constant).
    pub max_train_work: u64,
}

impl Default for ResourceCaps {
    fn default() -> Self {
        ResourceCaps {
            max_params: 2_000_000,
            max_train_work: 200_000_000_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SearchConfig {
    pub random_iters: u64,
    pub adaptive_iters: u64,
    pub seed: u64,
    pub objective_id: String,
    pub caps: ResourceCaps,
    /// Loss recorded for failed/diverged trials: twice the uniform-prediction
    /// cross-entropy of a 4-class problem.
    pub penalty_loss: f64,
    pub penalty_error: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            random_iters: 47,
            adaptive_iters: 53,
            seed: 0,
            objective_id: "cnn".to_string(),
            caps: ResourceCaps::default(),
            penalty_loss: 2.0 * 4.0f64.ln(),
            penalty_error: 0.75,
        }
    }
}

/// What an objective reports for one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    pub loss: f64,
    pub error_rate: f64,
    pub status: TrialStatus,
}

pub trait Objective {
    fn evaluate(&mut self, trial_id: u64, point: &ParamPoint) -> EvalOutcome;
}

/// Why a search stage stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    BudgetDone,
    SpaceExhausted,
}

/// In-memory trial sequence with gap-free ids. Text form is one record per
/// line, tab-separated: id, comma-joined point values, stage, target label
/// (`-` when absent), loss, error rate, status, wall-time seconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ledger {
    trials: Vec<Trial>,
}

impl Ledger {
    pub fn new() -> Self {
        Ledger::default()
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn push(&mut self, trial: Trial) -> Result<(), OptimError> {
        let expected = self.trials.len() as u64;
        if trial.id != expected {
            return Err(OptimError::IdSequence {
                expected,
                got: trial.id,
            });
        }
        self.trials.push(trial);
        Ok(())
    }

    pub fn ok_trials(&self) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(|t| t.status == TrialStatus::Ok)
    }

    pub fn visited(&self) -> HashSet<ParamPoint> {
        self.trials.iter().map(|t| t.point.clone()).collect()
    }

    pub fn best_ok(&self) -> Option<&Trial> {
        self.ok_trials().min_by(|a, b| {
            a.loss
                .partial_cmp(&b.loss)
                .unwrap()
                .then_with(|| a.id.cmp(&b.id))
        })
    }

    pub fn to_line(trial: &Trial) -> String {
        let label = trial
            .target_label
            .map_or_else(|| "-".to_string(), |l| l.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{:?}\t{:?}\t{}\t{:?}",
            trial.id,
            trial.point,
            trial.stage,
            label,
            trial.loss,
            trial.error_rate,
            trial.status,
            trial.wall_time
        )
    }

    pub fn parse_line(line: &str, lineno: usize) -> Result<Trial, OptimError> {
        let err = |reason: String| OptimError::Ledger {
            line: lineno,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        let id = fields[0]
            .parse::<u64>()
            .map_err(|e| err(format!("bad id: {e}")))?;
        let values: Vec<RawValue> = fields[1]
            .split(',')
            .map(|tok| match tok.parse::<i64>() {
                Ok(i) => RawValue::Int(i),
                Err(_) => RawValue::Name(tok.to_string()),
            })
            .collect();
        let stage = match fields[2] {
            "random" => Stage::Random,
            "adaptive" => Stage::Adaptive,
            other => return Err(err(format!("unknown stage `{other}`"))),
        };
        let target_label = match fields[3] {
            "-" => None,
            other => Some(other.parse::<TargetLabel>().map_err(err)?),
        };
        let loss = fields[4]
            .parse::<f64>()
            .map_err(|e| err(format!("bad loss: {e}")))?;
        let error_rate = fields[5]
            .parse::<f64>()
            .map_err(|e| err(format!("bad error rate: {e}")))?;
        let status = match fields[6] {
            "ok" => TrialStatus::Ok,
            "diverged" => TrialStatus::Diverged,
            "failed" => TrialStatus::Failed,
            other => return Err(err(format!("unknown status `{other}`"))),
        };
        let wall_time = fields[7]
            .parse::<f64>()
            .map_err(|e| err(format!("bad wall time: {e}")))?;
        Ok(Trial {
            id,
            point: ParamPoint { values },
            stage,
            target_label,
            loss,
            error_rate,
            status,
            wall_time,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            out.push_str(&Self::to_line(t));
            out.push('\n');
        }
        out
    }

    /// Parses a persisted ledger; ids must be 0-based and gap-free, and
    /// every point must be valid in `space`.
    pub fn from_text(text: &str, space: &ParamSpace) -> Result<Ledger, OptimError> {
        let mut ledger = Ledger::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let trial = Self::parse_line(line, i + 1)?;
            space.validate(&trial.point).map_err(|e| OptimError::Ledger {
                line: i + 1,
                reason: e.to_string(),
            })?;
            ledger.push(trial).map_err(|e| match e {
                OptimError::IdSequence { expected, got } => OptimError::Ledger {
                    line: i + 1,
                    reason: format!("trial id {got} out of sequence, expected {expected}"),
                },
                other => other,
            })?;
        }
        Ok(ledger)
    }
}

/// Clamps an objective outcome to the ledger contract: non-ok trials (and
/// ok claims with non-finite metrics) get the configured penalty values.
fn settle(outcome: EvalOutcome, cfg: &SearchConfig) -> (f64, f64, TrialStatus) {
    let claims_ok = outcome.status == TrialStatus::Ok
        && outcome.loss.is_finite()
        && (0.0..=1.0).contains(&outcome.error_rate);
    if claims_ok {
        (outcome.loss, outcome.error_rate, TrialStatus::Ok)
    } else {
        let status = if outcome.status == TrialStatus::Ok {
            TrialStatus::Failed
        } else {
            outcome.status
        };
        (cfg.penalty_loss, cfg.penalty_error, status)
    }
}

/// Draws an unvisited point, preferring rejection sampling and falling back
/// to a lexicographic scan if collisions persist. The caller guarantees at
/// least one unvisited point exists.
fn sample_unvisited(
    space: &ParamSpace,
    visited: &HashSet<ParamPoint>,
    seed: u64,
    trial_id: u64,
) -> ParamPoint {
    let mut rng = crate::seeds::rng(seed, crate::seeds::stream::SAMPLE, trial_id);
    for _ in 0..10_000 {
        let p = space.sample_uniform(&mut rng);
        if !visited.contains(&p) {
            return p;
        }
    }
    space
        .iter_points()
        .find(|p| !visited.contains(p))
        .expect("caller checked an unvisited point exists")
}

fn run_one(
    objective: &mut dyn Objective,
    cfg: &SearchConfig,
    ledger: &mut Ledger,
    persist: &mut dyn FnMut(&Trial) -> std::io::Result<()>,
    point: ParamPoint,
    stage: Stage,
    target_label: Option<TargetLabel>,
) -> Result<(), OptimError> {
    let id = ledger.len() as u64;
    let start = Instant::now();
    let outcome = objective.evaluate(id, &point);
    let wall_time = start.elapsed().as_secs_f64();
    let (loss, error_rate, status) = settle(outcome, cfg);
    let trial = Trial {
        id,
        point,
        stage,
        target_label,
        loss,
        error_rate,
        status,
        wall_time,
    };
    persist(&trial)?;
    ledger.push(trial)
}

/// Appends up to `n` uniformly sampled, unvisited trials. Deterministic for
/// a given seed and ledger prefix; each trial is persisted before the next
/// begins.
pub fn run_random(
    space: &ParamSpace,
    objective: &mut dyn Objective,
    n: u64,
    cfg: &SearchConfig,
    ledger: &mut Ledger,
    persist: &mut dyn FnMut(&Trial) -> std::io::Result<()>,
) -> Result<StopReason, OptimError> {
    let mut visited = ledger.visited();
    for _ in 0..n {
        if visited.len() as u128 >= space.cardinality() {
            return Ok(StopReason::SpaceExhausted);
        }
        let point = sample_unvisited(space, &visited, cfg.seed, ledger.len() as u64);
        visited.insert(point.clone());
        run_one(objective, cfg, ledger, persist, point, Stage::Random, None)?;
    }
    Ok(StopReason::BudgetDone)
}

/// Appends up to `n` GP-guided trials: each iteration refits the surrogate
/// on all ok trials, alternates between the best-so-far and 25%-improvement
/// targets, and evaluates the argmax-PI unvisited candidate. A failed GP fit
/// degrades that iteration to a random trial.
pub fn run_adaptive(
    space: &ParamSpace,
    objective: &mut dyn Objective,
    n: u64,
    cfg: &SearchConfig,
    ledger: &mut Ledger,
    persist: &mut dyn FnMut(&Trial) -> std::io::Result<()>,
) -> Result<StopReason, OptimError> {
    let have = ledger.ok_trials().count();
    if have < 2 {
        return Err(OptimError::NeedOkTrials { have });
    }

    // Small spaces enumerate once and reuse the list across iterations;
    // larger spaces resample per proposal inside the loop.
    let enumerated = (space.cardinality() <= ENUMERATION_LIMIT)
        .then(|| candidate_set(space, cfg.seed, 0));

    let mut visited = ledger.visited();
    for _ in 0..n {
        if visited.len() as u128 >= space.cardinality() {
            return Ok(StopReason::SpaceExhausted);
        }
        let id = ledger.len() as u64;

        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for t in ledger.ok_trials() {
            xs.push(space.encode(&t.point)?);
            ys.push(t.loss);
        }
        let best_loss = ledger.best_ok().expect("ok trials exist").loss;

        let gp_cfg = GPConfig {
            restart_seed: crate::seeds::derive(cfg.seed, crate::seeds::stream::GP_FIT, id),
            ..GPConfig::default()
        };
        let proposal = match GPModel::fit(&xs, &ys, &gp_cfg) {
            Ok(model) => {
                let adaptive_so_far = ledger
                    .trials()
                    .iter()
                    .filter(|t| t.stage == Stage::Adaptive)
                    .count();
                let (best_target, improve_target) = dual_targets(best_loss);
                // 1-based alternation: odd adaptive iterations chase the
                // best-so-far, even ones the 25% improvement.
                let target = if (adaptive_so_far + 1) % 2 == 1 {
                    best_target
                } else {
                    improve_target
                };
                let owned;
                let candidates = match &enumerated {
                    Some(c) => c,
                    None => {
                        owned = candidate_set(space, cfg.seed, id);
                        &owned
                    }
                };
                match propose(&model, candidates, target, &visited) {
                    Ok(point) => Some((point.clone(), target.label)),
                    Err(AcquireError::Exhausted) => {
                        // Sampled candidate sets can be fully visited even
                        // when the space is not; treat as exhaustion only
                        // when enumeration proves it.
                        if enumerated.is_some() {
                            return Ok(StopReason::SpaceExhausted);
                        }
                        None
                    }
                    Err(AcquireError::DimMismatch { .. }) => None,
                }
            }
            Err(_) => None,
        };

        match proposal {
            Some((point, label)) => {
                visited.insert(point.clone());
                run_one(
                    objective,
                    cfg,
                    ledger,
                    persist,
                    point,
                    Stage::Adaptive,
                    Some(label),
                )?;
            }
            None => {
                let point = sample_unvisited(space, &visited, cfg.seed, id);
                visited.insert(point.clone());
                run_one(objective, cfg, ledger, persist, point, Stage::Random, None)?;
            }
        }
    }
    Ok(StopReason::BudgetDone)
}

/// The `k` ok trials with the smallest losses, ascending; ties prefer the
/// earlier trial.
pub fn best_trials(ledger: &Ledger, k: usize) -> Result<Vec<&Trial>, OptimError> {
    let mut ok: Vec<&Trial> = ledger.ok_trials().collect();
    if ok.len() < k {
        return Err(OptimError::Shortfall {
            wanted: k,
            available: ok.len(),
        });
    }
    ok.sort_by(|a, b| {
        a.loss
            .partial_cmp(&b.loss)
            .unwrap()
            .then_with(|| a.id.cmp(&b.id))
    });
    ok.truncate(k);
    Ok(ok)
}

/// Prefix statistics per trial. Failed and diverged trials enter through
/// their recorded penalty loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunningStat {
    pub min_loss: f64,
    pub median_loss: f64,
    pub min_error: f64,
    pub median_error: f64,
}

pub fn running_stats(ledger: &Ledger) -> Vec<RunningStat> {
    fn median(sorted: &[f64]) -> f64 {
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        }
    }
    let mut losses: Vec<f64> = Vec::with_capacity(ledger.len());
    let mut errors: Vec<f64> = Vec::with_capacity(ledger.len());
    let mut min_loss = f64::INFINITY;
    let mut min_error = f64::INFINITY;
    let mut out = Vec::with_capacity(ledger.len());
    for t in ledger.trials() {
        let li = losses.partition_point(|&x| x < t.loss);
        losses.insert(li, t.loss);
        let ei = errors.partition_point(|&x| x < t.error_rate);
        errors.insert(ei, t.error_rate);
        min_loss = min_loss.min(t.loss);
        min_error = min_error.min(t.error_rate);
        out.push(RunningStat {
            min_loss,
            median_loss: median(&losses),
            min_error,
            median_error: median(&errors),
        });
    }
    out
}

/// Replays one adaptive trial's proposal from its ledger prefix: refits the
/// GP on the prefix's ok trials and recomputes the argmax-PI point. Used to
/// audit that recorded adaptive trials were genuine proposals.
pub fn replay_proposal(
    space: &ParamSpace,
    ledger: &Ledger,
    trial_id: u64,
    cfg: &SearchConfig,
) -> Result<Option<ParamPoint>, OptimError> {
    let prefix = &ledger.trials()[..trial_id as usize];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut best = f64::INFINITY;
    let mut visited = HashSet::new();
    for t in prefix {
        visited.insert(t.point.clone());
        if t.status == TrialStatus::Ok {
            xs.push(space.encode(&t.point)?);
            ys.push(t.loss);
            best = best.min(t.loss);
        }
    }
    if xs.len() < 2 {
        return Ok(None);
    }
    let gp_cfg = GPConfig {
        restart_seed: crate::seeds::derive(cfg.seed, crate::seeds::stream::GP_FIT, trial_id),
        ..GPConfig::default()
    };
    let Ok(model) = GPModel::fit(&xs, &ys, &gp_cfg) else {
        return Ok(None);
    };
    let adaptive_so_far = prefix.iter().filter(|t| t.stage == Stage::Adaptive).count();
    let (best_target, improve_target) = dual_targets(best);
    let target = if (adaptive_so_far + 1) % 2 == 1 {
        best_target
    } else {
        improve_target
    };
    let candidates = candidate_set(space, cfg.seed, trial_id);
    match propose(&model, &candidates, target, &visited) {
        Ok(point) => Ok(Some(point.clone())),
        Err(_) => Ok(None),
    }
}
