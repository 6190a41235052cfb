//! Multi-run drivers: scale sweeps and cross-mode verification.

use std::io::Write;

use crate::config::{Mode, RunConfig};
use crate::oracle::reference_digests;
use crate::report::{fill_speedups, write_results, write_summary, ResultRow, SummaryRow};
use crate::runner::{run_experiment_with, HubOptions, RunError, RunOutcome};
use crate::worker::{CostModel, RecordDigest};

/// Runs one configuration to completion. The CLI swaps in a
/// process-per-node launcher; tests use the in-process one.
pub type Launcher<'a> = dyn Fn(&RunConfig, HubOptions) -> Result<RunOutcome, RunError> + 'a;

pub fn in_process() -> Box<Launcher<'static>> {
    Box::new(run_experiment_with)
}

pub struct SweepRun {
    pub config: RunConfig,
    pub result: Result<RunOutcome, RunError>,
}

/// One sub-run per scale, with global batch and synthetic dataset size
/// scaled by node count. With `paired`, each scale runs in both modes.
/// Failed sub-runs are kept and the sweep goes on.
pub fn sweep(template: &RunConfig, scales: &[(u32, u32)], paired: bool, launch: &Launcher) -> Vec<SweepRun> {
    let modes: Vec<Mode> = if paired { vec![Mode::Distributed, Mode::Central] } else { vec![template.mode] };
    let mut runs = Vec::new();
    for &(b, w) in scales {
        for &mode in &modes {
            let mut base = template.clone();
            base.mode = mode;
            let (config, result) = match base.scaled(b, w) {
                Ok(c) => {
                    let r = launch(&c, HubOptions::default());
                    (c, r)
                }
                Err(e) => {
                    base.nodes = b;
                    base.workers_per_node = w;
                    (base, Err(e.into()))
                }
            };
            if let Err(e) = &result {
                log::warn!("sub-run {} {mode} failed: {e}", config.scale());
            }
            runs.push(SweepRun { config, result });
        }
    }
    runs
}

pub fn sweep_rows(runs: &[SweepRun]) -> Vec<ResultRow> {
    runs.iter().flat_map(|r| ResultRow::for_result(&r.config, &r.result)).collect()
}

pub fn sweep_summary(runs: &[SweepRun]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = runs.iter().map(|r| SummaryRow::new(&r.config, &r.result)).collect();
    let times: Vec<Option<f64>> = runs.iter().map(|r| r.result.as_ref().ok().map(RunOutcome::mean_iteration_time_s)).collect();
    fill_speedups(&mut rows, &times);
    rows
}

pub fn write_sweep<W: Write, S: Write>(runs: &[SweepRun], results: W, summary: S) -> Result<(), csv::Error> {
    write_results(results, &sweep_rows(runs))?;
    write_summary(summary, &sweep_summary(runs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub iterations: u32,
    pub records_checked: usize,
    pub mismatches: Vec<String>,
}

impl VerifyReport {
    pub fn equal(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn verdict(&self) -> &'static str {
        if self.equal() {
            "EQUAL"
        } else {
            "MISMATCH"
        }
    }
}

fn compare(label: &str, iteration: u32, got: &[RecordDigest], want: &[RecordDigest], out: &mut Vec<String>) {
    if got == want {
        return;
    }
    if got.len() != want.len() {
        out.push(format!("iteration {iteration}: {label} produced {} records, reference {}", got.len(), want.len()));
        return;
    }
    let ids = |v: &[RecordDigest]| v.iter().map(|d| d.sample_id).collect::<Vec<_>>();
    if ids(got) != ids(want) {
        out.push(format!("iteration {iteration}: {label} sample_id multiset differs from reference"));
        return;
    }
    let (g, w) = got.iter().zip(want).find(|(g, w)| g != w).expect("some record differs");
    out.push(format!("iteration {iteration}: {label} channels differ for sample {}", g.sample_id.max(w.sample_id)));
}

/// Runs `config` in distributed mode, in central mode and through the
/// single-process reference, then compares final per-record outputs keyed
/// by sample_id. `central_seed` overrides the seed of the central run.
pub fn verify(config: &RunConfig, central_seed: Option<u64>, launch: &Launcher) -> Result<VerifyReport, RunError> {
    let mut base = config.clone();
    base.cost = CostModel::zero();
    let reference = reference_digests(&base)?;
    let digests = |mode: Mode, seed: Option<u64>| -> Result<Vec<Vec<RecordDigest>>, RunError> {
        let mut c = base.clone();
        c.mode = mode;
        if let Some(s) = seed {
            c.seed = s;
        }
        let out = launch(&c, HubOptions { digests: true })?;
        Ok(out.iterations.iter().map(|m| m.digests()).collect())
    };
    let distributed = digests(Mode::Distributed, None)?;
    let central = digests(Mode::Central, central_seed)?;
    let mut mismatches = Vec::new();
    for (it, want) in reference.iter().enumerate() {
        let it32 = it as u32;
        compare("distributed", it32, distributed.get(it).map_or(&[][..], |v| v), want, &mut mismatches);
        compare("central", it32, central.get(it).map_or(&[][..], |v| v), want, &mut mismatches);
    }
    Ok(VerifyReport {
        iterations: reference.len() as u32,
        records_checked: reference.iter().map(Vec::len).sum(),
        mismatches,
    })
}
