//! CSV output for runs and sweeps.

use std::io::Write;

use serde::Serialize;

use crate::config::{Mode, RunConfig};
use crate::runner::{RunError, RunOutcome};

/// Columns that depend on wall-clock timing.
pub const WALL_COLUMNS: &[&str] = &["wall_time_s", "tokens_per_sec", "per_worker_tokens_per_sec", "stage_times_ms"];

pub const RESULT_COLUMNS: &[&str] = &[
    "config_fingerprint",
    "mode",
    "backend",
    "scale",
    "nodes",
    "workers_per_node",
    "world_size",
    "global_batch",
    "iteration",
    "status",
    "wall_time_s",
    "tokens_per_sec",
    "per_worker_tokens_per_sec",
    "stage_times_ms",
    "tokens",
    "records",
    "max_node_ingress_bytes",
    "max_node_egress_bytes",
    "internode_bytes",
    "controller_ingress_bytes",
    "controller_egress_bytes",
    "reward_mean",
    "entropy_proxy",
];

/// One measured iteration, or one failed run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub config_fingerprint: String,
    pub mode: String,
    pub backend: String,
    pub scale: String,
    pub nodes: u32,
    pub workers_per_node: u32,
    pub world_size: u32,
    pub global_batch: u64,
    pub iteration: Option<u32>,
    pub status: String,
    pub wall_time_s: Option<String>,
    pub tokens_per_sec: Option<String>,
    pub per_worker_tokens_per_sec: Option<String>,
    pub stage_times_ms: Option<String>,
    pub tokens: Option<u64>,
    pub records: Option<u64>,
    pub max_node_ingress_bytes: Option<u64>,
    pub max_node_egress_bytes: Option<u64>,
    pub internode_bytes: Option<u64>,
    pub controller_ingress_bytes: Option<u64>,
    pub controller_egress_bytes: Option<u64>,
    pub reward_mean: Option<String>,
    pub entropy_proxy: Option<String>,
}

fn blank(config: &RunConfig, status: String) -> ResultRow {
    ResultRow {
        config_fingerprint: config.fingerprint(),
        mode: config.mode.to_string(),
        backend: config.backend.to_string(),
        scale: config.scale(),
        nodes: config.nodes,
        workers_per_node: config.workers_per_node,
        world_size: config.world_size(),
        global_batch: config.global_batch,
        iteration: None,
        status,
        wall_time_s: None,
        tokens_per_sec: None,
        per_worker_tokens_per_sec: None,
        stage_times_ms: None,
        tokens: None,
        records: None,
        max_node_ingress_bytes: None,
        max_node_egress_bytes: None,
        internode_bytes: None,
        controller_ingress_bytes: None,
        controller_egress_bytes: None,
        reward_mean: None,
        entropy_proxy: None,
    }
}

impl ResultRow {
    /// Rows for the measured iterations; warmup is left out.
    pub fn measured(outcome: &RunOutcome) -> Vec<ResultRow> {
        let world = outcome.config.world_size() as f64;
        let ctl = outcome.controller_endpoint();
        outcome
            .measured()
            .iter()
            .map(|m| {
                let t = outcome.traffic(m.iteration);
                let stages = m.stage_times_ms().iter().map(|(id, ms)| format!("{id}={ms:.3}")).collect::<Vec<_>>().join(";");
                ResultRow {
                    iteration: Some(m.iteration),
                    wall_time_s: Some(format!("{:.9}", m.iteration_time_s())),
                    tokens_per_sec: Some(format!("{:.3}", m.tokens_per_sec())),
                    per_worker_tokens_per_sec: Some(format!("{:.3}", m.tokens_per_sec() / world)),
                    stage_times_ms: Some(stages),
                    tokens: Some(m.tokens()),
                    records: Some(m.records()),
                    max_node_ingress_bytes: Some(t.max_node_ingress()),
                    max_node_egress_bytes: Some(t.max_node_egress()),
                    internode_bytes: Some(t.internode_bytes()),
                    controller_ingress_bytes: ctl.map(|c| t.endpoint_ingress(c)),
                    controller_egress_bytes: ctl.map(|c| t.endpoint_egress(c)),
                    reward_mean: Some(format!("{:.9}", m.reward_mean())),
                    entropy_proxy: Some(format!("{:.9}", m.entropy_proxy())),
                    ..blank(&outcome.config, "ok".into())
                }
            })
            .collect()
    }

    pub fn failed(config: &RunConfig, error: &RunError) -> ResultRow {
        blank(config, format!("failed: {error}"))
    }

    pub fn for_result(config: &RunConfig, result: &Result<RunOutcome, RunError>) -> Vec<ResultRow> {
        match result {
            Ok(o) => ResultRow::measured(o),
            Err(e) => vec![ResultRow::failed(config, e)],
        }
    }
}

/// One line per run in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub config_fingerprint: String,
    pub mode: String,
    pub backend: String,
    pub scale: String,
    pub nodes: u32,
    pub workers_per_node: u32,
    pub world_size: u32,
    pub global_batch: u64,
    pub status: String,
    pub measured_iterations: usize,
    pub mean_iteration_time_s: Option<String>,
    pub mean_tokens_per_sec: Option<String>,
    pub per_worker_tokens_per_sec: Option<String>,
    pub max_node_ingress_bytes: Option<u64>,
    pub controller_ingress_bytes: Option<u64>,
    /// Central mean iteration time over distributed mean iteration time at
    /// the same scale. Filled on distributed rows of a paired sweep.
    pub speedup: Option<String>,
}

impl SummaryRow {
    pub fn new(config: &RunConfig, result: &Result<RunOutcome, RunError>) -> SummaryRow {
        let mut row = SummaryRow {
            config_fingerprint: config.fingerprint(),
            mode: config.mode.to_string(),
            backend: config.backend.to_string(),
            scale: config.scale(),
            nodes: config.nodes,
            workers_per_node: config.workers_per_node,
            world_size: config.world_size(),
            global_batch: config.global_batch,
            status: "ok".into(),
            measured_iterations: 0,
            mean_iteration_time_s: None,
            mean_tokens_per_sec: None,
            per_worker_tokens_per_sec: None,
            max_node_ingress_bytes: None,
            controller_ingress_bytes: None,
            speedup: None,
        };
        match result {
            Err(e) => row.status = format!("failed: {e}"),
            Ok(o) => {
                let m = o.measured();
                let n = m.len() as f64;
                let tps = m.iter().map(|x| x.tokens_per_sec()).sum::<f64>() / n;
                row.measured_iterations = m.len();
                row.mean_iteration_time_s = Some(format!("{:.9}", o.mean_iteration_time_s()));
                row.mean_tokens_per_sec = Some(format!("{tps:.3}"));
                row.per_worker_tokens_per_sec = Some(format!("{:.3}", tps / config.world_size() as f64));
                row.max_node_ingress_bytes = m.iter().map(|x| o.traffic(x.iteration).max_node_ingress()).max();
                row.controller_ingress_bytes =
                    o.controller_endpoint().and_then(|c| m.iter().map(|x| o.traffic(x.iteration).endpoint_ingress(c)).max());
            }
        }
        row
    }
}

/// Fills the speedup column for scales that have both an ok central row and
/// an ok distributed row.
pub fn fill_speedups(rows: &mut [SummaryRow], times: &[Option<f64>]) {
    for i in 0..rows.len() {
        if rows[i].mode != Mode::Distributed.to_string() {
            continue;
        }
        let partner = (0..rows.len()).find(|&j| rows[j].mode == Mode::Central.to_string() && rows[j].scale == rows[i].scale);
        if let (Some(j), Some(dist)) = (partner, times[i]) {
            if let Some(central) = times[j] {
                if dist > 0.0 {
                    rows[i].speedup = Some(format!("{:.4}", central / dist));
                }
            }
        }
    }
}

fn write_csv<W: Write, T: Serialize>(out: W, header: &[&str], rows: &[T]) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_results<W: Write>(out: W, rows: &[ResultRow]) -> Result<(), csv::Error> {
    write_csv(out, RESULT_COLUMNS, rows)
}

pub const SUMMARY_COLUMNS: &[&str] = &[
    "config_fingerprint",
    "mode",
    "backend",
    "scale",
    "nodes",
    "workers_per_node",
    "world_size",
    "global_batch",
    "status",
    "measured_iterations",
    "mean_iteration_time_s",
    "mean_tokens_per_sec",
    "per_worker_tokens_per_sec",
    "max_node_ingress_bytes",
    "controller_ingress_bytes",
    "speedup",
];

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<(), csv::Error> {
    write_csv(out, SUMMARY_COLUMNS, rows)
}

/// Drops the named columns from a CSV document, for comparisons that
/// should ignore timing.
pub fn strip_columns(csv_text: &str, drop: &[&str]) -> Result<String, csv::Error> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(csv_text.as_bytes());
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut keep: Vec<usize> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if i == 0 {
            keep = rec.iter().enumerate().filter(|(_, h)| !drop.contains(h)).map(|(k, _)| k).collect();
        }
        out.write_record(keep.iter().map(|&k| rec.get(k).unwrap_or("")))?;
    }
    Ok(String::from_utf8(out.into_inner().expect("in-memory writer")).expect("utf-8 input"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> RunConfig {
        RunConfig::from_json(r#"{"nodes": 1, "workers_per_node": 4, "global_batch": 16, "dataset": {"synthetic": {"size": 64, "prompt_tokens": 4}}}"#).unwrap()
    }

    #[test]
    fn golden_header() {
        let mut buf = Vec::new();
        write_results(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "config_fingerprint,mode,backend,scale,nodes,workers_per_node,world_size,global_batch,iteration,status,\
             wall_time_s,tokens_per_sec,per_worker_tokens_per_sec,stage_times_ms,tokens,records,max_node_ingress_bytes,\
             max_node_egress_bytes,internode_bytes,controller_ingress_bytes,controller_egress_bytes,reward_mean,entropy_proxy\n"
        );
        let mut buf = Vec::new();
        write_summary(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "config_fingerprint,mode,backend,scale,nodes,workers_per_node,world_size,global_batch,status,\
             measured_iterations,mean_iteration_time_s,mean_tokens_per_sec,per_worker_tokens_per_sec,\
             max_node_ingress_bytes,controller_ingress_bytes,speedup\n"
        );
    }

    #[test]
    fn failure_row_quotes_message() {
        let c = config();
        let row = ResultRow::failed(&c, &RunError::Launch("a, \"b\"".into()));
        let mut buf = Vec::new();
        write_results(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert!(line.starts_with(&format!("{},distributed,inproc,1x4,1,4,4,16,,\"failed: launch: a, \"\"b\"\"\",", c.fingerprint())), "{line}");
        assert_eq!(csv::Reader::from_reader(text.as_bytes()).records().next().unwrap().unwrap().len(), RESULT_COLUMNS.len());
    }

    #[test]
    fn speedup_is_central_over_distributed() {
        let mut d = config();
        let row_d = SummaryRow::new(&d, &Err(RunError::Launch("x".into())));
        d.mode = Mode::Central;
        let row_c = SummaryRow::new(&d, &Err(RunError::Launch("x".into())));
        let mut rows = vec![row_d, row_c];
        fill_speedups(&mut rows, &[Some(0.5), Some(2.0)]);
        assert_eq!(rows[0].speedup.as_deref(), Some("4.0000"));
        assert_eq!(rows[1].speedup, None);
    }

    #[test]
    fn strip_removes_named_columns() {
        let text = "a,b,c\n1,\"x,y\",3\n";
        assert_eq!(strip_columns(text, &["b"]).unwrap(), "a,c\n1,3\n");
    }
}
