//! The search objective: decode a point, enforce the resource caps, train
//! on the workspace dataset, and keep weight files for the best trials.

use slicetune_core::datagen::{SliceDataset, Split};
use slicetune_core::nnet::{
    build_capped, save_weights, spec_hash, train, train_work_estimate, NetSpec, Preset,
    TrainParams, Weights,
};
use slicetune_core::optimizer::{
    EvalOutcome, Ledger, Objective, ResourceCaps, TrialStatus,
};
use slicetune_core::seeds;
use slicetune_core::space::{ParamPoint, ParamSpace};
use std::path::{Path, PathBuf};

/// Keeps weight files on disk for the `k` lowest-loss trials seen so far,
/// evicting files that fall out of the set. Losses tie toward the earlier
/// trial, matching how the report picks its ensemble members.
pub struct WeightCache {
    dir: PathBuf,
    k: usize,
    ranked: Vec<(f64, u64, PathBuf)>,
}

/// Weight file location for one trial: keyed by trial id and spec hash, so
/// a stale file from a different configuration can never be mistaken for
/// the trial's weights.
pub fn member_path(dir: &Path, trial_id: u64, spec: &NetSpec) -> PathBuf {
    let hash = spec_hash(spec);
    dir.join(format!("trial-{trial_id:04}-{}.weights", &hash[..16]))
}

impl WeightCache {
    pub fn new(dir: &Path, k: usize) -> WeightCache {
        WeightCache {
            dir: dir.to_path_buf(),
            k,
            ranked: Vec::new(),
        }
    }

    /// Registers already-recorded ok trials so a resumed search competes
    /// against them instead of starting an empty contest. Files for the
    /// survivors were written by the interrupted run; nothing is deleted.
    pub fn seed_from(&mut self, ledger: &Ledger, space: &ParamSpace, max_params: u64) {
        for t in ledger.ok_trials() {
            if let Ok(spec) = build_capped(&t.point, space, Preset::Desk, Some(max_params)) {
                let path = member_path(&self.dir, t.id, &spec);
                self.insert(t.loss, t.id, path);
            }
        }
        self.ranked.truncate(self.k);
    }

    fn insert(&mut self, loss: f64, id: u64, path: PathBuf) -> usize {
        let rank = self
            .ranked
            .partition_point(|&(l, i, _)| l < loss || (l == loss && i < id));
        self.ranked.insert(rank, (loss, id, path));
        rank
    }

    /// Records a finished trial; writes its weights if it enters the top
    /// `k` and evicts whichever file that pushes out.
    pub fn admit(
        &mut self,
        trial_id: u64,
        loss: f64,
        spec: &NetSpec,
        weights: &Weights,
    ) -> std::io::Result<()> {
        let path = member_path(&self.dir, trial_id, spec);
        let rank = self.insert(loss, trial_id, path.clone());
        if rank < self.k {
            std::fs::create_dir_all(&self.dir)?;
            save_weights(spec, weights, &path).map_err(std::io::Error::other)?;
            if self.ranked.len() > self.k {
                let (_, _, evicted) = self.ranked.remove(self.k);
                match std::fs::remove_file(&evicted) {
                    Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e),
                    _ => {}
                }
            }
        } else {
            self.ranked.truncate(self.k);
        }
        Ok(())
    }

    #[cfg(test)]
    fn kept_ids(&self) -> Vec<u64> {
        self.ranked.iter().map(|&(_, id, _)| id).collect()
    }
}

/// Search-time evaluation of one configuration. Points that cannot build
/// (spatial collapse, parameter cap), exceed the training-work cap, or fail
/// to decode come back as failed; training that diverges is reported as
/// such. The runner substitutes penalty loss and error for both.
pub struct CnnObjective<'a> {
    space: &'a ParamSpace,
    data: &'a SliceDataset,
    master_seed: u64,
    caps: ResourceCaps,
    cache: WeightCache,
    train_slices: usize,
}

impl<'a> CnnObjective<'a> {
    pub fn new(
        space: &'a ParamSpace,
        data: &'a SliceDataset,
        master_seed: u64,
        caps: ResourceCaps,
        cache: WeightCache,
    ) -> CnnObjective<'a> {
        let train_slices = data.slices_in(Split::Train).len();
        CnnObjective {
            space,
            data,
            master_seed,
            caps,
            cache,
            train_slices,
        }
    }
}

const FAILED: EvalOutcome = EvalOutcome {
    loss: f64::INFINITY,
    error_rate: 1.0,
    status: TrialStatus::Failed,
};

impl Objective for CnnObjective<'_> {
    fn evaluate(&mut self, trial_id: u64, point: &ParamPoint) -> EvalOutcome {
        let spec = match build_capped(point, self.space, Preset::Desk, Some(self.caps.max_params))
        {
            Ok(spec) => spec,
            Err(_) => return FAILED,
        };
        let seed = seeds::derive(self.master_seed, seeds::stream::TRAIN, trial_id);
        let tp = match TrainParams::from_point(point, self.space, seed) {
            Ok(tp) => tp,
            Err(_) => return FAILED,
        };
        if train_work_estimate(&spec, self.train_slices, &tp) > self.caps.max_train_work as u128 {
            return FAILED;
        }
        match train(&spec, self.data, &tp) {
            Err(_) => FAILED,
            Ok(net) if net.metrics.diverged => EvalOutcome {
                loss: net.metrics.val_loss,
                error_rate: net.metrics.val_error,
                status: TrialStatus::Diverged,
            },
            Ok(net) => {
                let loss = net.metrics.val_loss;
                if let Err(e) = self.cache.admit(trial_id, loss, &net.spec, &net.weights) {
                    eprintln!("warning: could not cache trial {trial_id} weights: {e}");
                }
                EvalOutcome {
                    loss,
                    error_rate: net.metrics.val_error,
                    status: TrialStatus::Ok,
                }
            }
        }
    }
}
