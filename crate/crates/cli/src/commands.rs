//! The four subcommands. Mutating commands (gen, search, resume) hold the
//! workspace lock for their whole run; report only requires that nothing
//! else is mutating, so finished workspaces can serve many readers at once.

use crate::config::RunConfig;
use crate::objective::{CnnObjective, WeightCache};
use crate::report::write_report;
use crate::workspace::{Lock, Workspace};
use anyhow::{bail, Context, Result};
use slicetune_core::datagen::{generate, read_dataset, write_dataset, SliceDataset, Split};
use slicetune_core::optimizer::{run_adaptive, run_random, Ledger, StopReason, Trial};
use slicetune_core::space::{default_space, ParamSpace};
use std::io::Write;

pub fn cmd_gen(cfg: &RunConfig, ws: &Workspace) -> Result<String> {
    let _lock = Lock::acquire(ws)?;
    let data = generate(&cfg.dataset).context("generating the dataset")?;
    write_dataset(&data, &ws.dataset_dir)
        .with_context(|| format!("writing dataset to {}", ws.dataset_dir.display()))?;
    let volumes = data.volumes.len();
    let train = data.slices_in(Split::Train).len();
    let val = data.slices_in(Split::Validation).len();
    let test = data.slices_in(Split::Test).len();
    Ok(format!(
        "gen: {volumes} volumes, {} slices (train {train} / validation {val} / test {test}) -> {}",
        data.total_slices(),
        ws.dataset_dir.display()
    ))
}

fn load_data(ws: &Workspace) -> Result<SliceDataset> {
    read_dataset(&ws.dataset_dir).with_context(|| {
        format!(
            "reading dataset from {} (run `gen` first)",
            ws.dataset_dir.display()
        )
    })
}

fn load_ledger(ws: &Workspace, space: &ParamSpace) -> Result<Ledger> {
    if !ws.ledger_path.exists() {
        return Ok(Ledger::new());
    }
    let text = std::fs::read_to_string(&ws.ledger_path)
        .with_context(|| format!("reading ledger {}", ws.ledger_path.display()))?;
    Ledger::from_text(&text, space)
        .with_context(|| format!("parsing ledger {}", ws.ledger_path.display()))
}

/// Runs the remaining trials: first whatever is left of the random stage,
/// then the adaptive stage, stopping early if `max_new` is hit. Progress is
/// measured purely by ledger length, so a run interrupted at any trial
/// boundary continues exactly where it stopped.
fn run_stages(
    cfg: &RunConfig,
    ws: &Workspace,
    space: &ParamSpace,
    data: &SliceDataset,
    ledger: &mut Ledger,
    max_new: Option<u64>,
) -> Result<String> {
    let total_random = cfg.search.random_iters;
    let total = total_random + cfg.search.adaptive_iters;
    let before = ledger.len() as u64;
    if before >= total {
        return Ok(format!(
            "nothing to do: ledger already has {before} of {total} trials"
        ));
    }
    let mut budget = max_new.unwrap_or(u64::MAX);

    let mut cache = WeightCache::new(&ws.models_dir, cfg.k);
    cache.seed_from(ledger, space, cfg.search.caps.max_params);
    let mut objective = CnnObjective::new(space, data, cfg.seed, cfg.search.caps, cache);

    if let Some(parent) = ws.ledger_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&ws.ledger_path)
        .with_context(|| format!("opening ledger {}", ws.ledger_path.display()))?;
    let mut persist = |t: &Trial| -> std::io::Result<()> {
        file.write_all(Ledger::to_line(t).as_bytes())?;
        file.write_all(b"\n")?;
        file.flush()?;
        eprintln!(
            "trial {} [{}] loss={:.4} error={:.3} {} ({:.1}s)",
            t.id, t.stage, t.loss, t.error_rate, t.status, t.wall_time
        );
        Ok(())
    };

    let mut stop = StopReason::BudgetDone;
    let done = ledger.len() as u64;
    if done < total_random && budget > 0 {
        let n = (total_random - done).min(budget);
        stop = run_random(space, &mut objective, n, &cfg.search, ledger, &mut persist)?;
        budget -= n;
    }
    let done = ledger.len() as u64;
    if done >= total_random && done < total && budget > 0 && stop == StopReason::BudgetDone {
        let n = (total - done).min(budget);
        stop = run_adaptive(space, &mut objective, n, &cfg.search, ledger, &mut persist)?;
    }

    let ran = ledger.len() as u64 - before;
    let ok = ledger.ok_trials().count();
    let best = ledger
        .best_ok()
        .map_or_else(|| "none".into(), |t| format!("{:?} (trial {})", t.loss, t.id));
    let note = match stop {
        StopReason::BudgetDone if (ledger.len() as u64) < total => ", interrupted by trial limit",
        StopReason::SpaceExhausted => ", space exhausted",
        _ => "",
    };
    Ok(format!(
        "search: {ran} new trials ({} total, {ok} ok), best loss {best}{note}",
        ledger.len()
    ))
}

pub fn cmd_search(cfg: &RunConfig, ws: &Workspace, max_new: Option<u64>) -> Result<String> {
    let _lock = Lock::acquire(ws)?;
    let data = load_data(ws)?;
    let space = default_space();
    if ws.ledger_path.exists() {
        let text = std::fs::read_to_string(&ws.ledger_path)?;
        if text.lines().any(|l| !l.is_empty()) {
            bail!(
                "ledger {} already has trials; run `resume` to continue it or remove the file for a fresh search",
                ws.ledger_path.display()
            );
        }
    }
    let mut ledger = Ledger::new();
    run_stages(cfg, ws, &space, &data, &mut ledger, max_new)
}

pub fn cmd_resume(cfg: &RunConfig, ws: &Workspace, max_new: Option<u64>) -> Result<String> {
    let _lock = Lock::acquire(ws)?;
    let data = load_data(ws)?;
    let space = default_space();
    let mut ledger = load_ledger(ws, &space)?;
    run_stages(cfg, ws, &space, &data, &mut ledger, max_new)
}

pub fn cmd_report(cfg: &RunConfig, ws: &Workspace) -> Result<String> {
    ws.ensure_quiescent()?;
    let data = load_data(ws)?;
    let space = default_space();
    let ledger = load_ledger(ws, &space)?;
    let summary = write_report(cfg, ws, &data, &ledger, &space)?;
    let mut out = String::new();
    out.push_str(&format!(
        "report: baseline slice error {:?}, volume error {:?}\n",
        summary.baseline_slice_error, summary.baseline_volume_error
    ));
    out.push_str(&format!(
        "report: ensemble slice error {:?}, volume error {:?}\n",
        summary.ensemble_slice_error, summary.ensemble_volume_error
    ));
    for f in &summary.files {
        out.push_str(&format!("report: wrote {}\n", f.display()));
    }
    out.pop();
    Ok(out)
}
