//! Report generation: running-statistics and top-k tables from the ledger,
//! test-split confusion matrices for the reference configuration and the
//! top-k ensemble, and a localization track over concatenated test volumes.
//!
//! Every number written here is a pure function of the config, seed, and
//! workspace contents; wall-clock time never appears in a report file.

use crate::config::RunConfig;
use crate::objective::member_path;
use crate::workspace::Workspace;
use anyhow::{bail, Context, Result};
use slicetune_core::datagen::{class_letter, SliceDataset, Split, Volume};
use slicetune_core::ensemble::{confusion, localize, track_table, Ensemble, Level};
use slicetune_core::nnet::{
    build_capped, build_with, load_weights, save_weights, spec_hash, train, NetSpec, Preset,
    TrainMetrics, TrainParams, TrainedNet, Weights,
};
use slicetune_core::optimizer::{best_trials, running_stats, Ledger, Trial};
use slicetune_core::seeds;
use slicetune_core::space::{baseline_point, ParamSpace};
use std::path::{Path, PathBuf};

pub struct ReportSummary {
    pub files: [PathBuf; 4],
    pub baseline_slice_error: f64,
    pub baseline_volume_error: f64,
    pub ensemble_slice_error: f64,
    pub ensemble_volume_error: f64,
}

/// One line of human-readable architecture, derived from the trial's point.
pub fn describe_spec(spec: &NetSpec) -> String {
    format!(
        "{} blocks x {} convs, {} filters {k}x{k}, fc {}/{}, {} params",
        spec.blocks,
        spec.convs_per_block,
        spec.filters,
        spec.fc1,
        spec.fc2,
        spec.param_count(),
        k = spec.filter_size,
    )
}

fn describe_training(tp: &TrainParams) -> String {
    format!(
        "lr={:?} batch={} epochs={} augment={}",
        tp.learning_rate,
        tp.batch_size,
        tp.epochs,
        if tp.augment { "yes" } else { "no" },
    )
}

fn stats_table(ledger: &Ledger) -> String {
    let mut out = String::from(
        "trial\tstage\tstatus\tloss\terror\trunning_min_loss\trunning_median_loss\trunning_min_error\trunning_median_error\n",
    );
    let stats = running_stats(ledger);
    for (t, s) in ledger.trials().iter().zip(&stats) {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\n",
            t.id,
            t.stage,
            t.status,
            t.loss,
            t.error_rate,
            s.min_loss,
            s.median_loss,
            s.min_error,
            s.median_error,
        ));
    }
    out
}

fn topk_table(top: &[&Trial], space: &ParamSpace, max_params: u64) -> Result<String> {
    let mut out =
        String::from("rank\ttrial\tloss\terror\tstage\ttarget\tpoint\tarchitecture\ttraining\n");
    for (rank, t) in top.iter().enumerate() {
        let spec = build_capped(&t.point, space, Preset::Desk, Some(max_params))
            .with_context(|| format!("trial {} no longer builds under the current caps", t.id))?;
        let tp = TrainParams::from_point(&t.point, space, 0)?;
        let label = t.target_label.map_or_else(|| "-".into(), |l| l.to_string());
        out.push_str(&format!(
            "{}\t{}\t{:?}\t{:?}\t{}\t{}\t{}\t{}\t{}\n",
            rank + 1,
            t.id,
            t.loss,
            t.error_rate,
            t.stage,
            label,
            t.point,
            describe_spec(&spec),
            describe_training(&tp),
        ));
    }
    Ok(out)
}

fn synth_metrics(val_loss: f64, val_error: f64) -> TrainMetrics {
    TrainMetrics {
        train_loss: f64::NAN,
        val_loss,
        val_error,
        diverged: false,
        steps: 0,
        step_losses: Vec::new(),
    }
}

fn cached_weights(path: &Path, expected: &NetSpec) -> Option<Weights> {
    match load_weights(path) {
        Ok((spec, weights)) if spec == *expected => Some(weights),
        _ => None,
    }
}

/// Loads a member's weights from the cache, retraining (and then caching)
/// when the file is missing or stale. Evaluation always goes through the
/// saved file, so probabilities do not depend on which path was taken.
fn member_net(
    cfg: &RunConfig,
    ws: &Workspace,
    data: &SliceDataset,
    space: &ParamSpace,
    trial: &Trial,
) -> Result<TrainedNet> {
    let spec = build_capped(
        &trial.point,
        space,
        Preset::Desk,
        Some(cfg.search.caps.max_params),
    )
    .with_context(|| format!("trial {} no longer builds under the current caps", trial.id))?;
    let path = member_path(&ws.models_dir, trial.id, &spec);
    let weights = match cached_weights(&path, &spec) {
        Some(w) => {
            eprintln!("member trial {}: loaded {}", trial.id, path.display());
            w
        }
        None => {
            eprintln!("member trial {}: retraining", trial.id);
            let seed = seeds::derive(cfg.seed, seeds::stream::TRAIN, trial.id);
            let tp = TrainParams::from_point(&trial.point, space, seed)?;
            let net = train(&spec, data, &tp)
                .with_context(|| format!("retraining trial {}", trial.id))?;
            std::fs::create_dir_all(&ws.models_dir)?;
            save_weights(&spec, &net.weights, &path)?;
            let (_, reloaded) = load_weights(&path)?;
            reloaded
        }
    };
    Ok(TrainedNet {
        spec,
        weights,
        metrics: synth_metrics(trial.loss, trial.error_rate),
    })
}

fn upscaled(data: &SliceDataset, side: usize) -> SliceDataset {
    SliceDataset {
        side,
        volumes: data
            .volumes
            .iter()
            .map(|v| Volume {
                id: v.id.clone(),
                class: v.class,
                split: v.split,
                slices: v.slices.iter().map(|s| s.resize(side)).collect(),
            })
            .collect(),
    }
}

/// The hand-tuned reference configuration, trained on this workspace's
/// data. Its five pooling stages need a side of at least 32, so smaller
/// datasets are evaluated through a bilinear upscale.
pub fn baseline_net(
    cfg: &RunConfig,
    ws: &Workspace,
    data: &SliceDataset,
    space: &ParamSpace,
) -> Result<(TrainedNet, SliceDataset)> {
    let side = data.side.max(32);
    let bdata = if side == data.side {
        data.clone()
    } else {
        upscaled(data, side)
    };
    let point = baseline_point();
    let (fc1, fc2) = Preset::Desk.fc_widths();
    let spec = build_with(&point, space, side, fc1, fc2, None)?;
    let hash = spec_hash(&spec);
    let path = ws.models_dir.join(format!("baseline-{}.weights", &hash[..16]));
    let weights = match cached_weights(&path, &spec) {
        Some(w) => {
            eprintln!("baseline: loaded {}", path.display());
            w
        }
        None => {
            eprintln!("baseline: training ({side}px, {} params)", spec.param_count());
            let seed = seeds::derive(cfg.seed, seeds::stream::BASELINE, 0);
            let tp = TrainParams::from_point(&point, space, seed)?;
            let net = train(&spec, &bdata, &tp).context("training the reference configuration")?;
            std::fs::create_dir_all(&ws.models_dir)?;
            save_weights(&spec, &net.weights, &path)?;
            let (_, reloaded) = load_weights(&path)?;
            reloaded
        }
    };
    let net = TrainedNet {
        spec,
        weights,
        metrics: synth_metrics(f64::NAN, f64::NAN),
    };
    Ok((net, bdata))
}

fn localization_table(
    ens: &Ensemble,
    data: &SliceDataset,
    volumes: usize,
    cutoff: f64,
) -> Result<String> {
    let chosen: Vec<&Volume> = data.volumes_in(Split::Test).take(volumes).collect();
    if chosen.is_empty() {
        bail!("no test volumes to localize");
    }
    let mut out = String::new();
    let mut decisions = Vec::new();
    for vol in &chosen {
        out.push_str(&format!(
            "volume\t{}\t{}\t{}\n",
            vol.id,
            class_letter(vol.class),
            vol.slices.len()
        ));
        decisions.extend(localize(ens, vol, cutoff)?);
    }
    out.push_str(&track_table(&decisions));
    Ok(out)
}

pub fn write_report(
    cfg: &RunConfig,
    ws: &Workspace,
    data: &SliceDataset,
    ledger: &Ledger,
    space: &ParamSpace,
) -> Result<ReportSummary> {
    let top = best_trials(ledger, cfg.k)?;
    std::fs::create_dir_all(&ws.reports_dir)?;

    let stats_path = ws.reports_dir.join("stats.tsv");
    std::fs::write(&stats_path, stats_table(ledger))?;

    let topk_path = ws.reports_dir.join("topk.tsv");
    std::fs::write(
        &topk_path,
        topk_table(&top, space, cfg.search.caps.max_params)?,
    )?;

    let members: Vec<TrainedNet> = top
        .iter()
        .map(|t| member_net(cfg, ws, data, space, t))
        .collect::<Result<_>>()?;
    let ens = Ensemble::new(members)?;

    let (bnet, bdata) = baseline_net(cfg, ws, data, space)?;
    let baseline = Ensemble::new(vec![bnet])?;

    let b_slice = confusion(&baseline, &bdata, Split::Test, Level::Slice)?;
    let b_volume = confusion(&baseline, &bdata, Split::Test, Level::Volume)?;
    let e_slice = confusion(&ens, data, Split::Test, Level::Slice)?;
    let e_volume = confusion(&ens, data, Split::Test, Level::Volume)?;

    let mut ctext = String::new();
    ctext.push_str("model\tbaseline\n");
    ctext.push_str(&b_slice.to_table());
    ctext.push_str(&b_volume.to_table());
    ctext.push_str("model\tensemble\n");
    ctext.push_str(&e_slice.to_table());
    ctext.push_str(&e_volume.to_table());
    ctext.push_str(&format!(
        "summary\tbaseline_slice_error\t{:?}\n",
        b_slice.error_rate()
    ));
    ctext.push_str(&format!(
        "summary\tbaseline_volume_error\t{:?}\n",
        b_volume.error_rate()
    ));
    ctext.push_str(&format!(
        "summary\tensemble_slice_error\t{:?}\n",
        e_slice.error_rate()
    ));
    ctext.push_str(&format!(
        "summary\tensemble_volume_error\t{:?}\n",
        e_volume.error_rate()
    ));
    let confusion_path = ws.reports_dir.join("confusion.tsv");
    std::fs::write(&confusion_path, ctext)?;

    let local_path = ws.reports_dir.join("localization.tsv");
    std::fs::write(
        &local_path,
        localization_table(&ens, data, cfg.report.localize_volumes, cfg.report.cutoff)?,
    )?;

    Ok(ReportSummary {
        files: [stats_path, topk_path, confusion_path, local_path],
        baseline_slice_error: b_slice.error_rate(),
        baseline_volume_error: b_volume.error_rate(),
        ensemble_slice_error: e_slice.error_rate(),
        ensemble_volume_error: e_volume.error_rate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_description_reads_naturally() {
        let spec = NetSpec {
            input_side: 16,
            blocks: 2,
            convs_per_block: 1,
            filters: 16,
            filter_size: 3,
            fc1: 128,
            fc2: 64,
            num_classes: 4,
        };
        let text = describe_spec(&spec);
        assert!(text.contains("2 blocks x 1 convs"));
        assert!(text.contains("16 filters 3x3"));
        assert!(text.contains("fc 128/64"));
        assert!(text.ends_with("params"));
    }

    #[test]
    fn upscale_doubles_the_side_and_keeps_structure() {
        let data = slicetune_core::datagen::generate(&slicetune_core::datagen::GenConfig {
            slice_range: (2, 3),
            ..Default::default()
        })
        .unwrap();
        let up = upscaled(&data, 32);
        assert_eq!(up.side, 32);
        assert_eq!(up.volumes.len(), data.volumes.len());
        assert_eq!(up.volumes[0].slices[0].side(), 32);
        assert_eq!(up.volumes[0].id, data.volumes[0].id);
    }
}
