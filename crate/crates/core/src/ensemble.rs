//! Prediction averaging over the top trained models, slice- and
//! volume-level confusion matrices, and cutoff-based per-slice
//! localization.

use crate::datagen::{class_letter, SliceDataset, Split, Volume};
use crate::imaging::Image;
use crate::nnet::{predict_proba, NnetError, TrainedNet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("ensemble needs at least one member")]
    Empty,
    #[error("members disagree on shape: {0}")]
    MixedMembers(String),
    #[error("cutoff {0} outside (0.25, 1)")]
    BadCutoff(f64),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error(transparent)]
    Net(#[from] NnetError),
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<TrainedNet>,
}

impl Ensemble {
    pub fn new(members: Vec<TrainedNet>) -> Result<Ensemble, EnsembleError> {
        let first = members.first().ok_or(EnsembleError::Empty)?;
        let k = first.spec.num_classes;
        let side = first.spec.input_side;
        for m in &members {
            if m.spec.num_classes != k || m.spec.input_side != side {
                return Err(EnsembleError::MixedMembers(format!(
                    "{} classes on side {} vs {} classes on side {}",
                    m.spec.num_classes, m.spec.input_side, k, side
                )));
            }
        }
        Ok(Ensemble { members })
    }

    pub fn members(&self) -> &[TrainedNet] {
        &self.members
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].spec.num_classes
    }

    pub fn input_side(&self) -> usize {
        self.members[0].spec.input_side
    }
}

/// Elementwise arithmetic mean of probability vectors, summed in member
/// order.
pub fn mean_probs(outputs: &[Vec<f64>]) -> Result<Vec<f64>, EnsembleError> {
    let first = outputs.first().ok_or(EnsembleError::Empty)?;
    let k = first.len();
    let mut acc = vec![0.0; k];
    for out in outputs {
        if out.len() != k {
            return Err(EnsembleError::MixedMembers(format!(
                "probability vectors of lengths {} and {k}",
                out.len()
            )));
        }
        for (a, p) in acc.iter_mut().zip(out) {
            *a += p;
        }
    }
    let n = outputs.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

pub fn predict_ensemble(ens: &Ensemble, image: &Image) -> Result<Vec<f64>, EnsembleError> {
    let outputs: Vec<Vec<f64>> = ens
        .members
        .iter()
        .map(|m| predict_proba(&m.spec, &m.weights, image))
        .collect::<Result<_, NnetError>>()?;
    mean_probs(&outputs)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Majority vote over per-slice probability vectors: most frequent argmax
/// label; vote ties go to the class with the greater mean probability across
/// slices, then to the lowest class index.
pub fn vote_from_probs(slice_probs: &[Vec<f64>]) -> Result<usize, EnsembleError> {
    let first = slice_probs
        .first()
        .ok_or_else(|| EnsembleError::EmptyInput("no slices to vote over".into()))?;
    let k = first.len();
    let mut votes = vec![0usize; k];
    let mut mean = vec![0.0; k];
    for probs in slice_probs {
        if probs.len() != k {
            return Err(EnsembleError::MixedMembers(format!(
                "probability vectors of lengths {} and {k}",
                probs.len()
            )));
        }
        votes[argmax(probs)] += 1;
        for (m, p) in mean.iter_mut().zip(probs) {
            *m += p;
        }
    }
    for m in &mut mean {
        *m /= slice_probs.len() as f64;
    }
    let mut winner = 0usize;
    for c in 1..k {
        if votes[c] > votes[winner] || (votes[c] == votes[winner] && mean[c] > mean[winner]) {
            winner = c;
        }
    }
    Ok(winner)
}

pub fn classify_volume(ens: &Ensemble, vol: &Volume) -> Result<usize, EnsembleError> {
    if vol.slices.is_empty() {
        return Err(EnsembleError::EmptyInput(format!("volume {} has no slices", vol.id)));
    }
    let probs: Vec<Vec<f64>> = vol
        .slices
        .iter()
        .map(|s| predict_ensemble(ens, s))
        .collect::<Result<_, _>>()?;
    vote_from_probs(&probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Slice,
    Volume,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Slice => "slice",
            Level::Volume => "volume",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub level: Level,
    /// counts[true][predicted]
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Rows rescaled to sum to 1; an empty row stays all zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let sum: u64 = row.iter().sum();
                if sum == 0 {
                    vec![0.0; row.len()]
                } else {
                    row.iter().map(|&c| c as f64 / sum as f64).collect()
                }
            })
            .collect()
    }

    pub fn error_rate(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.k()).map(|i| self.counts[i][i]).sum();
        1.0 - correct as f64 / total as f64
    }

    /// Tab-delimited export: raw counts, row-normalized rates, error rate.
    pub fn to_table(&self) -> String {
        let k = self.k();
        let header: Vec<String> = (0..k).map(|c| class_letter(c).to_string()).collect();
        let mut out = format!("confusion\t{}\n", self.level);
        out.push_str(&format!("counts\t{}\n", header.join("\t")));
        for (i, row) in self.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("{}\t{}\n", class_letter(i), cells.join("\t")));
        }
        out.push_str(&format!("normalized\t{}\n", header.join("\t")));
        for (i, row) in self.normalized().iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:?}")).collect();
            out.push_str(&format!("{}\t{}\n", class_letter(i), cells.join("\t")));
        }
        out.push_str(&format!("error_rate\t{:?}\n", self.error_rate()));
        out
    }
}

/// Tally of (true, predicted) label pairs into a K x K matrix.
pub fn confusion_from_pairs(
    pairs: &[(usize, usize)],
    k: usize,
    level: Level,
) -> Result<ConfusionMatrix, EnsembleError> {
    if pairs.is_empty() {
        return Err(EnsembleError::EmptyInput("no labeled pairs".into()));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for &(t, p) in pairs {
        if t >= k || p >= k {
            return Err(EnsembleError::MixedMembers(format!(
                "label pair ({t}, {p}) outside {k} classes"
            )));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { level, counts })
}

pub fn confusion(
    ens: &Ensemble,
    data: &SliceDataset,
    split: Split,
    level: Level,
) -> Result<ConfusionMatrix, EnsembleError> {
    let k = ens.num_classes();
    let pairs: Vec<(usize, usize)> = match level {
        Level::Slice => {
            let mut pairs = Vec::new();
            for (img, class) in data.slices_in(split) {
                let probs = predict_ensemble(ens, img)?;
                pairs.push((class, argmax(&probs)));
            }
            pairs
        }
        Level::Volume => {
            let mut pairs = Vec::new();
            for vol in data.volumes_in(split) {
                pairs.push((vol.class, classify_volume(ens, vol)?));
            }
            pairs
        }
    };
    if pairs.is_empty() {
        return Err(EnsembleError::EmptyInput(format!("split {split} is empty")));
    }
    confusion_from_pairs(&pairs, k, level)
}

/// The unique class with probability strictly above the cutoff, if any.
/// Below 0.5 several classes can clear the bar; that also counts as
/// no-decision.
pub fn cutoff_decision(probs: &[f64], cutoff: f64) -> Option<usize> {
    let mut qualifying = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > cutoff)
        .map(|(i, _)| i);
    match (qualifying.next(), qualifying.next()) {
        (Some(c), None) => Some(c),
        _ => None,
    }
}

pub fn localize(
    ens: &Ensemble,
    vol: &Volume,
    cutoff: f64,
) -> Result<Vec<Option<usize>>, EnsembleError> {
    if !(cutoff > 0.25 && cutoff < 1.0) {
        return Err(EnsembleError::BadCutoff(cutoff));
    }
    vol.slices
        .iter()
        .map(|s| Ok(cutoff_decision(&predict_ensemble(ens, s)?, cutoff)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Run {
    pub decision: Option<usize>,
    pub start: usize,
    pub len: usize,
}

/// Groups consecutive equal decisions, preserving slice order.
pub fn decision_runs(decisions: &[Option<usize>]) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for (i, d) in decisions.iter().enumerate() {
        match runs.last_mut() {
            Some(run) if run.decision == *d => run.len += 1,
            _ => runs.push(Run {
                decision: *d,
                start: i,
                len: 1,
            }),
        }
    }
    runs
}

/// Tab-delimited localization track: one line per slice, then the runs.
pub fn track_table(decisions: &[Option<usize>]) -> String {
    let mut out = String::from("slice\tdecision\n");
    for (i, d) in decisions.iter().enumerate() {
        let label = match d {
            Some(c) => class_letter(*c).to_string(),
            None => "-".to_string(),
        };
        out.push_str(&format!("{i}\t{label}\n"));
    }
    out.push_str("run\tdecision\tstart\tlen\n");
    for (i, run) in decision_runs(decisions).iter().enumerate() {
        let label = match run.decision {
            Some(c) => class_letter(c).to_string(),
            None => "-".to_string(),
        };
        out.push_str(&format!("{i}\t{label}\t{}\t{}\n", run.start, run.len));
    }
    out
}
