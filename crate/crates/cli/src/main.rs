use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use finemem_core::agent::{AgentEndpoint, Role};
use finemem_core::audit::audit_trace;
use finemem_core::qa::{build_dataset, dataset_records, write_dataset, DEFAULT_QA_BUDGET};
use finemem_core::retrieval::DEFAULT_RETRIEVAL_K;
use finemem_core::reward::RewardWeights;
use finemem_core::rollout::{read_streams, run_group, run_rollout, Agents, RolloutConfig};
use finemem_core::trace::{read_traces, write_traces};
use finemem_service::{RewardService, ServiceConfig};
use serde_json::json;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "finemem", version, about = "Memory-manager rollouts, reward attribution and audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run rollouts over every instance of a chunk-stream file and write traces.
    Rollout(RolloutArgs),
    /// Reward utilities.
    Rewards {
        #[command(subcommand)]
        command: RewardsCommand,
    },
    /// Chunk-level QA dataset construction.
    Qa {
        #[command(subcommand)]
        command: QaCommand,
    },
    /// Serve the HTTP reward API.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum RewardsCommand {
    /// Recompute every reward component of a trace file and report differences.
    Audit {
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Subcommand)]
enum QaCommand {
    /// Build per-chunk QA pairs with a teacher and a verifier.
    Build(QaBuildArgs),
}

fn parse_weights(text: &str) -> Result<RewardWeights, String> {
    RewardWeights::parse_assignments(text)
}

fn parse_endpoint(text: &str) -> Result<AgentEndpoint, String> {
    text.parse::<AgentEndpoint>().map_err(|e| e.to_string())
}

#[derive(Args)]
struct EndpointOptions {
    /// Timeout for one remote agent call, in seconds.
    #[arg(long, default_value_t = 60)]
    agent_timeout: u64,
    /// Retries for remote agent calls after transport errors or 5xx replies.
    #[arg(long, default_value_t = 2)]
    agent_retries: u32,
}

impl EndpointOptions {
    fn apply(&self, endpoint: AgentEndpoint, seed: u64) -> AgentEndpoint {
        endpoint
            .with_timeout(Duration::from_secs(self.agent_timeout))
            .with_max_retries(self.agent_retries)
            .with_seed(seed)
    }
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    stream: PathBuf,
    /// `scripted:NAME` or an http(s) endpoint.
    #[arg(long, value_parser = parse_endpoint)]
    manager: AgentEndpoint,
    #[arg(long, value_parser = parse_endpoint)]
    reasoner: AgentEndpoint,
    /// Judge for questions scored with the `judge` metric.
    #[arg(long, value_parser = parse_endpoint)]
    judge: Option<AgentEndpoint>,
    #[arg(long, default_value = "w1=0.5,w2=0.05,beta=0.5", value_parser = parse_weights)]
    weights: RewardWeights,
    #[arg(long, default_value_t = DEFAULT_RETRIEVAL_K)]
    retrieval_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of global questions evaluated per rollout.
    #[arg(long, default_value_t = 1.0)]
    global_qa_frac: f64,
    /// Answer chunk questions from the whole memory rather than top-k retrieval.
    #[arg(long)]
    chunk_qa_full_memory: bool,
    /// Concurrent reasoner calls within one step.
    #[arg(long, default_value_t = 1)]
    qa_parallelism: usize,
    /// Run G rollouts per instance and report per-step group advantages.
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    endpoints: EndpointOptions,
}

#[derive(Args)]
struct QaBuildArgs {
    /// Chunk-stream file; only `instance_id` and `chunks` are used.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_endpoint)]
    teacher: AgentEndpoint,
    #[arg(long, value_parser = parse_endpoint)]
    verifier: AgentEndpoint,
    #[arg(long, default_value_t = DEFAULT_QA_BUDGET)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    endpoints: EndpointOptions,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8731")]
    bind: SocketAddr,
    #[arg(long, default_value_t = 64)]
    max_concurrent_requests: usize,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 30)]
    request_timeout: u64,
    /// Defaults for requests that omit beta, epsilon or weights.
    #[arg(long, default_value = "w1=0.5,w2=0.05,beta=0.5", value_parser = parse_weights)]
    weights: RewardWeights,
}

fn rollout(args: RolloutArgs) -> Result<ExitCode> {
    let streams = read_streams(&args.stream).with_context(|| format!("reading {}", args.stream.display()))?;
    if streams.is_empty() {
        bail!("{} holds no instances", args.stream.display());
    }
    let config = RolloutConfig {
        retrieval_k: args.retrieval_k,
        global_qa_frac: args.global_qa_frac,
        seed: args.seed,
        chunk_qa_full_memory: args.chunk_qa_full_memory,
        qa_parallelism: args.qa_parallelism,
        ..RolloutConfig::default()
    };
    let manager = args.endpoints.apply(args.manager, args.seed);
    let reasoner = args.endpoints.apply(args.reasoner, args.seed).connect(Role::Reasoner)?;
    let judge = args
        .judge
        .map(|j| args.endpoints.apply(j, args.seed).connect(Role::Judge))
        .transpose()?;

    let stdout = io::stdout();
    let mut summary = stdout.lock();
    let mut traces = Vec::new();
    let mut incomplete = 0;
    for stream in &streams {
        match args.group_size {
            Some(g) => {
                let group = run_group(stream, &manager, reasoner.as_ref(), judge.as_deref(), &args.weights, &config, g)
                    .with_context(|| format!("instance {}", stream.instance_id))?;
                let r_global: Vec<f64> = group.traces.iter().map(|t| t.r_global).collect();
                writeln!(
                    summary,
                    "{}",
                    json!({"instance_id": stream.instance_id, "group_size": g, "r_global": r_global, "advantages": group.advantages})
                )?;
                traces.extend(group.traces);
            }
            None => {
                let agent = manager.connect(Role::Manager)?;
                let agents = Agents {
                    manager: agent.as_ref(),
                    reasoner: reasoner.as_ref(),
                    judge: judge.as_deref(),
                };
                let trace = run_rollout(stream, &agents, &args.weights, &config)
                    .with_context(|| format!("instance {}", stream.instance_id))?;
                if trace.incomplete {
                    incomplete += 1;
                }
                writeln!(
                    summary,
                    "{}",
                    json!({
                        "instance_id": trace.instance_id,
                        "steps": trace.steps.len(),
                        "incomplete": trace.incomplete,
                        "r_global": trace.r_global,
                        "r_comp": trace.r_comp,
                        "r_eara": trace.eara(),
                        "total": trace.totals(),
                    })
                )?;
                traces.push(trace);
            }
        }
    }
    write_traces(&args.out, &traces).with_context(|| format!("writing {}", args.out.display()))?;
    tracing::info!(traces = traces.len(), out = %args.out.display(), "traces written");
    if incomplete > 0 {
        eprintln!("{incomplete} rollout(s) incomplete; see the `fault` field of their footers");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn audit(path: PathBuf) -> Result<ExitCode> {
    let traces = read_traces(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut dirty = 0;
    for trace in &traces {
        let report = audit_trace(trace);
        if report.is_clean() {
            println!("{}: {} steps, clean", report.instance_id, report.steps);
        } else {
            dirty += 1;
            println!("{}: {} steps, {} diff(s)", report.instance_id, report.steps, report.diffs.len());
            for diff in &report.diffs {
                println!("  {diff}");
            }
        }
    }
    println!("{} trace(s), {} with diffs", traces.len(), dirty);
    Ok(if dirty == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn qa_build(args: QaBuildArgs) -> Result<ExitCode> {
    let streams = read_streams(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let teacher = args.endpoints.apply(args.teacher, args.seed);
    let verifier = args.endpoints.apply(args.verifier, args.seed);
    let results: Vec<Result<Vec<_>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = streams
            .iter()
            .map(|stream| {
                let (teacher, verifier) = (&teacher, &verifier);
                scope.spawn(move || -> Result<Vec<_>> {
                    let teacher = teacher.connect(Role::Teacher)?;
                    let verifier = verifier.connect(Role::Verifier)?;
                    let sets = build_dataset(&stream.instance_id, &stream.chunks, teacher.as_ref(), verifier.as_ref(), args.k)?;
                    Ok(dataset_records(&stream.instance_id, &sets))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("QA worker panicked")).collect()
    });
    let mut records = Vec::new();
    for result in results {
        records.extend(result?);
    }
    match &args.out {
        Some(path) => {
            let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
            write_dataset(&mut out, &records)?;
            out.flush()?;
        }
        None => write_dataset(io::stdout().lock(), &records)?,
    }
    tracing::info!(instances = streams.len(), pairs = records.len(), "QA dataset built");
    Ok(ExitCode::SUCCESS)
}

fn serve(args: ServeArgs) -> Result<ExitCode> {
    let config = ServiceConfig {
        bind_address: args.bind,
        max_concurrent_requests: args.max_concurrent_requests,
        default_weights: args.weights,
        request_timeout: Duration::from_secs(args.request_timeout),
    };
    let service = RewardService::new(config)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(service.serve(finemem_service::ctrl_c()))?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let filter = EnvFilter::try_from_env("FINEMEM_LOG").unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(io::stderr).init();

    let cli = Cli::parse();
    let result = match cli.command {
        Command::Rollout(args) => rollout(args),
        Command::Rewards {
            command: RewardsCommand::Audit { trace },
        } => audit(trace),
        Command::Qa {
            command: QaCommand::Build(args),
        } => qa_build(args),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
