//! Process-per-node launch for the TCP backend. Each node hub runs in its
//! own child process; a dedicated controller hub runs in the parent.

use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::thread;

use distflow::runner::HubOptions;
use distflow::transport::{bind_tcp, connect_tcp, HubLayout, TcpBinding};
use distflow::{run_hub, Backend, HubReport, RunConfig, RunError, RunOutcome};
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
pub struct NodeJob {
    pub config: RunConfig,
    pub hub: usize,
    pub digests: bool,
}

#[derive(Serialize, Deserialize)]
struct NodeFailure {
    message: String,
    secondary: bool,
}

/// Runs `config`, using child processes when the backend is TCP.
pub fn launch(config: &RunConfig, opts: HubOptions, processes: bool) -> Result<RunOutcome, RunError> {
    if processes && config.backend == Backend::Tcp {
        run_processes(config, opts)
    } else {
        distflow::runner::run_experiment_with(config, opts)
    }
}

struct NodeProc {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

fn launch_err(e: impl std::fmt::Display) -> RunError {
    RunError::Launch(e.to_string())
}

fn read_line(p: &mut NodeProc, hub: usize) -> Result<String, RunError> {
    let mut line = String::new();
    let n = p.stdout.read_line(&mut line).map_err(launch_err)?;
    if n == 0 {
        return Err(RunError::Launch(format!("node process for hub {hub} exited early")));
    }
    Ok(line.trim_end().to_string())
}

pub fn run_processes(config: &RunConfig, opts: HubOptions) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let topo = config.topology()?;
    let hubs = HubLayout::per_node(&topo, config.dedicated_controller());
    let exe = std::env::current_exe().map_err(launch_err)?;
    let mut procs: Vec<NodeProc> = Vec::new();
    let kill_all = |procs: &mut Vec<NodeProc>| {
        for p in procs.iter_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    };

    let mut addrs: Vec<SocketAddr> = Vec::new();
    for hub in 0..topo.nodes() as usize {
        let mut child = Command::new(&exe)
            .arg("node")
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(launch_err)?;
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut p = NodeProc { stdin: child.stdin.take(), child, stdout };
        let job = NodeJob { config: config.clone(), hub, digests: opts.digests };
        let sent = writeln!(p.stdin.as_mut().expect("piped stdin"), "{}", serde_json::to_string(&job).expect("job serializes"));
        procs.push(p);
        let port = sent.map_err(launch_err).and_then(|_| read_line(procs.last_mut().unwrap(), hub));
        match port.as_deref().map(|l| l.strip_prefix("PORT ").map(str::parse::<u16>)) {
            Ok(Some(Ok(port))) => addrs.push(SocketAddr::from(([127, 0, 0, 1], port))),
            other => {
                kill_all(&mut procs);
                return Err(match other {
                    Err(e) => e.clone(),
                    _ => RunError::Launch(format!("hub {hub} did not announce a port")),
                });
            }
        }
    }
    let controller: Option<TcpBinding> = if hubs.hub_count() > topo.nodes() as usize {
        let b = bind_tcp("127.0.0.1:0").map_err(|error| RunError::Hub { hub: topo.nodes() as usize, error })?;
        addrs.push(b.addr);
        Some(b)
    } else {
        None
    };

    let peers = serde_json::to_string(&addrs).expect("addresses serialize");
    for p in &mut procs {
        if let Some(mut stdin) = p.stdin.take() {
            let _ = writeln!(stdin, "{peers}");
        }
    }

    let ctl_thread = controller.map(|binding| {
        let (config, hubs, addrs) = (config.clone(), hubs.clone(), addrs.clone());
        thread::spawn(move || -> Result<(), RunError> {
            let hub = topo.nodes() as usize;
            let fabric = connect_tcp(binding, topo, hubs, hub, &addrs, config.fabric_options()).map_err(|error| RunError::Hub { hub, error })?;
            let r = run_hub(&config, fabric.clone(), opts);
            fabric.close();
            r.map(|_| ())
        })
    });

    let mut report: Option<HubReport> = None;
    let mut errors = Vec::new();
    for (hub, p) in procs.iter_mut().enumerate() {
        let mut lines = Vec::new();
        while let Ok(line) = read_line(p, hub) {
            lines.push(line);
        }
        let status = p.child.wait().map_err(launch_err)?;
        let mut reported = false;
        for line in lines {
            if let Some(json) = line.strip_prefix("RESULT ") {
                report = Some(serde_json::from_str(json).map_err(launch_err)?);
            } else if let Some(json) = line.strip_prefix("ERROR ") {
                let f: NodeFailure = serde_json::from_str(json).map_err(launch_err)?;
                errors.push(RunError::Remote { hub, message: f.message, secondary: f.secondary });
                reported = true;
            }
        }
        if !status.success() && !reported {
            errors.push(RunError::Launch(format!("node process for hub {hub} exited with {status}")));
        }
    }
    if let Some(t) = ctl_thread {
        match t.join() {
            Ok(Err(e)) => errors.push(e),
            Err(_) => errors.push(RunError::Launch("controller hub thread panicked".into())),
            Ok(Ok(())) => {}
        }
    }
    if let Some(e) = RunError::primary(errors) {
        return Err(e);
    }
    RunOutcome::from_report(config, report.ok_or_else(|| RunError::Launch("no result from the rank 0 process".into()))?)
}

/// Body of the hidden `node` subcommand.
pub fn node_main() -> i32 {
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    let mut next = || lines.next().and_then(Result::ok).unwrap_or_default();
    let out = std::io::stdout();
    let fail = |message: String, secondary: bool| {
        let mut o = out.lock();
        let _ = writeln!(o, "ERROR {}", serde_json::to_string(&NodeFailure { message, secondary }).expect("serializes"));
        let _ = o.flush();
        1
    };
    let job: NodeJob = match serde_json::from_str(&next()) {
        Ok(j) => j,
        Err(e) => return fail(format!("bad job: {e}"), false),
    };
    let binding = match bind_tcp("127.0.0.1:0") {
        Ok(b) => b,
        Err(e) => return fail(e.to_string(), false),
    };
    {
        let mut o = out.lock();
        let _ = writeln!(o, "PORT {}", binding.addr.port());
        let _ = o.flush();
    }
    let peers: Vec<SocketAddr> = match serde_json::from_str(&next()) {
        Ok(p) => p,
        Err(e) => return fail(format!("bad peer list: {e}"), false),
    };
    let run = || -> Result<Option<HubReport>, RunError> {
        let topo = job.config.topology()?;
        let hubs = HubLayout::per_node(&topo, job.config.dedicated_controller());
        let fabric = connect_tcp(binding, topo, hubs, job.hub, &peers, job.config.fabric_options())
            .map_err(|error| RunError::Hub { hub: job.hub, error })?;
        let r = run_hub(&job.config, fabric.clone(), HubOptions { digests: job.digests });
        fabric.close();
        r
    };
    match run() {
        Ok(Some(report)) => {
            let mut o = out.lock();
            let _ = writeln!(o, "RESULT {}", serde_json::to_string(&report).expect("report serializes"));
            let _ = o.flush();
            0
        }
        Ok(None) => 0,
        Err(e) => fail(e.to_string(), e.is_secondary()),
    }
}
