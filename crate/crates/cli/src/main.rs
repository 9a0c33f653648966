//! `subenum`: plan, explain, run and verify subgraph enumeration queries.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use subenum_core::cluster::{plan_hash, run_dataflow};
use subenum_core::config::{DEFAULT_BATCH_SIZE, DEFAULT_CACHE_FRACTION, DEFAULT_QUEUE_CAPACITY, DEFAULT_SPILL_THRESHOLD};
use subenum_core::graphstore::{load_edge_list, relabel_by_degree};
use subenum_core::optimiser::load_logical_plan;
use subenum_core::oracle::{self, OracleConfig, OracleEmit};
use subenum_core::querymodel::parse_query;
use subenum_core::{
    optimal_plan, translate, EngineConfig, Error, ExecutionPlan, Graph, PlanStats, QueryGraph,
    SinkMode, TransportKind,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "subenum", version, about = "Distributed subgraph enumeration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute a query and print run metrics as JSON.
    Run(RunArgs),
    /// Print the chosen join plan and its dataflow.
    Explain {
        #[command(flatten)]
        input: Input,
        /// Also print the dataflow in Graphviz format.
        #[arg(long)]
        dot: bool,
    },
    /// Run the engine and the backtracking oracle and compare results.
    Verify {
        #[command(flatten)]
        run: RunArgs,
        /// Remove symmetry-breaking filters from the dataflow (negative control).
        #[arg(long, hide = true)]
        drop_order_filters: bool,
    },
    /// Write the optimised join tree as JSON (loadable with --plan).
    Plan {
        #[command(flatten)]
        input: Input,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Input {
    /// Edge-list file (`u v` per line, `#` comments) or a `.bin` CSR file.
    #[arg(long, short)]
    graph: PathBuf,
    /// Built-in query name (triangle, square, 4-clique, 5-path, ...) or a query file.
    #[arg(long, short)]
    query: String,
    /// Join tree JSON to use instead of the optimiser's plan.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Number of machines.
    #[arg(long, short = 'k', default_value_t = 1)]
    machines: usize,
    /// Keep the input vertex order instead of relabeling by degree.
    #[arg(long)]
    no_relabel: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TransportArg {
    Inproc,
    TcpLocal,
    Tcp,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    input: Input,
    /// Intersect workers per machine.
    #[arg(long, short = 'w', default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    /// Output queue capacity in results, or `inf`.
    #[arg(long, default_value_t = DEFAULT_QUEUE_CAPACITY.to_string(), value_parser = parse_capacity)]
    queue_capacity: String,
    /// Cache capacity as a fraction of 2|E|.
    #[arg(long, default_value_t = DEFAULT_CACHE_FRACTION)]
    cache_frac: f64,
    /// Absolute cache capacity in neighbour entries; overrides --cache-frac.
    #[arg(long)]
    cache_capacity: Option<usize>,
    /// Join buffer bytes per side before spilling to disk.
    #[arg(long, default_value_t = DEFAULT_SPILL_THRESHOLD)]
    spill_threshold: usize,
    #[arg(long)]
    spill_dir: Option<PathBuf>,
    /// Disable intra- and inter-machine work stealing.
    #[arg(long)]
    no_steal: bool,
    #[arg(long, value_enum, default_value_t = TransportArg::Inproc)]
    transport: TransportArg,
    /// This process's machine index (tcp transport).
    #[arg(long)]
    machine_id: Option<usize>,
    /// Comma-separated listen addresses of every machine (tcp transport).
    #[arg(long, value_delimiter = ',')]
    peers: Vec<SocketAddr>,
    /// `count` or `file:PATH`.
    #[arg(long, default_value = "count")]
    sink: String,
    /// Partition hash seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the metrics JSON here.
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Record the scheduled-operator trace in the metrics.
    #[arg(long)]
    trace: bool,
}

fn parse_capacity(s: &str) -> Result<String, String> {
    match s {
        "inf" | "infinite" | "unbounded" => Ok(s.to_string()),
        _ => s
            .parse::<usize>()
            .map(|_| s.to_string())
            .map_err(|_| format!("expected a number or `inf`, got {s:?}")),
    }
}

/// A failure with the exit code it maps to.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. }
            | Error::RawIo(_)
            | Error::Parse { .. }
            | Error::BadBinary(_)
            | Error::DisconnectedQuery
            | Error::QueryTooLarge(_)
            | Error::InvalidQuery(_)
            | Error::InvalidPlan(_) => EXIT_DATA,
            Error::InvalidMachineCount(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure(code, e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure(EXIT_USAGE, msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("subenum: {msg}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run(args) => cmd_run(&args),
        Command::Explain { input, dot } => cmd_explain(&input, dot),
        Command::Verify {
            run,
            drop_order_filters,
        } => cmd_verify(&run, drop_order_filters),
        Command::Plan { input, out } => cmd_plan(&input, out.as_deref()),
    }
}

fn load_graph(input: &Input) -> Result<Graph, Failure> {
    let path = &input.graph;
    let g = if path.extension().is_some_and(|e| e == "bin") {
        Graph::read_binary(path)?
    } else {
        load_edge_list(path)?
    };
    Ok(if input.no_relabel { g } else { relabel_by_degree(&g).0 })
}

fn load_query(spec: &str) -> Result<QueryGraph, Failure> {
    if let Some(q) = QueryGraph::named(spec) {
        return Ok(q);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(usage(format!("{spec:?} is neither a built-in query nor a file")));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Failure(EXIT_DATA, format!("{spec}: {e}")))?;
    Ok(parse_query(&text)?)
}

fn machines(input: &Input) -> Result<usize, Failure> {
    if input.machines == 0 {
        return Err(usage("--machines must be at least 1"));
    }
    Ok(input.machines)
}

fn build_plan(input: &Input, g: &Graph, q: &QueryGraph, k: usize) -> Result<(ExecutionPlan, PlanStats), Failure> {
    let stats = PlanStats::new(&g.stats(), k);
    let plan = match &input.plan {
        Some(p) => load_logical_plan(p, q, &stats)?,
        None => optimal_plan(q, &stats)?,
    };
    Ok((plan, stats))
}

fn engine_config(args: &RunArgs) -> Result<EngineConfig, Failure> {
    let mut k = machines(&args.input)?;
    let transport = match args.transport {
        TransportArg::Inproc => TransportKind::InProcess,
        TransportArg::TcpLocal => TransportKind::TcpLocal,
        TransportArg::Tcp => {
            let machine_id = args.machine_id.ok_or_else(|| usage("--transport tcp needs --machine-id"))?;
            if args.peers.is_empty() {
                return Err(usage("--transport tcp needs --peers"));
            }
            if machine_id >= args.peers.len() {
                return Err(usage("--machine-id must index --peers"));
            }
            k = args.peers.len();
            TransportKind::Tcp {
                machine_id,
                peers: args.peers.clone(),
            }
        }
    };
    if args.batch_size == 0 || args.workers == 0 {
        return Err(usage("--batch-size and --workers must be positive"));
    }
    if !(0.0..=1e6).contains(&args.cache_frac) {
        return Err(usage("--cache-frac must be non-negative"));
    }
    let sink = match args.sink.as_str() {
        "count" => SinkMode::Count,
        s => match s.strip_prefix("file:") {
            Some(p) if !p.is_empty() => SinkMode::File(PathBuf::from(p)),
            _ => return Err(usage(format!("--sink must be `count` or `file:PATH`, got {s:?}"))),
        },
    };
    let queue_capacity = args.queue_capacity.parse().unwrap_or(usize::MAX);
    Ok(EngineConfig {
        machines: k,
        workers: args.workers,
        batch_size: args.batch_size,
        queue_capacity,
        cache_capacity: args.cache_capacity,
        cache_fraction: args.cache_frac,
        spill_threshold: args.spill_threshold,
        spill_dir: args.spill_dir.clone(),
        transport,
        sink,
        seed: args.seed,
        record_trace: args.trace,
        ..EngineConfig::default()
    }
    .stealing(!args.no_steal))
}

fn emit_metrics(json: &serde_json::Value, out: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(json).expect("metrics serialise");
    println!("{text}");
    if let Some(p) = out {
        std::fs::write(p, text + "\n").map_err(|e| Failure(EXIT_RUNTIME, format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = engine_config(args)?;
    let g = load_graph(&args.input)?;
    let q = load_query(&args.input.query)?;
    let (plan, _) = build_plan(&args.input, &g, &q, cfg.machines)?;
    let out = run_dataflow(&g, translate(&plan)?, &cfg, plan_hash(&plan))?;
    let is_worker = matches!(cfg.transport, TransportKind::Tcp { machine_id, .. } if machine_id != 0);
    if is_worker {
        // Machine 0 reports for the whole cluster.
        eprintln!("machine finished: {} local results", out.metrics.per_machine[0].result_count);
        return Ok(());
    }
    emit_metrics(&out.metrics.to_json(), args.metrics_out.as_deref())
}

fn cmd_explain(input: &Input, dot: bool) -> Result<(), Failure> {
    let k = machines(input)?;
    let g = load_graph(input)?;
    let q = load_query(&input.query)?;
    let (plan, stats) = build_plan(input, &g, &q, k)?;
    let df = translate(&plan)?;
    let mut text = format!("query: {} vertices, edges {:?}, orders {:?}\n", q.n(), q.edges(), q.orders());
    text.push_str(&plan.describe(&stats));
    text.push_str("dataflow:\n");
    for sp in df.order_subplans() {
        let _ = writeln!(text, "  subplan {sp} (after {:?})", df.subplans[sp].depends_on);
        for &id in &df.subplans[sp].operators {
            let op = &df.operators[id];
            let _ = writeln!(
                text,
                "    {id}: {:?} inputs={:?} schema={:?} filters={:?}",
                op.kind, op.inputs, op.output_schema, op.filters
            );
        }
    }
    if dot {
        text.push_str(&df.to_dot());
    }
    print!("{text}");
    Ok(())
}

fn cmd_plan(input: &Input, out: Option<&Path>) -> Result<(), Failure> {
    let k = machines(input)?;
    let g = load_graph(input)?;
    let q = load_query(&input.query)?;
    let (plan, _) = build_plan(input, &g, &q, k)?;
    let text = serde_json::to_string_pretty(&plan.to_json()).expect("plan serialises");
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Failure(EXIT_RUNTIME, format!("{}: {e}", p.display())))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn first_divergence(engine: &[Vec<u32>], truth: &[Vec<u32>]) -> String {
    let i = engine.iter().zip(truth).position(|(a, b)| a != b).unwrap_or(engine.len().min(truth.len()));
    format!(
        "first divergence at sorted index {i}: engine {:?}, oracle {:?}",
        engine.get(i),
        truth.get(i)
    )
}

fn cmd_verify(args: &RunArgs, drop_order_filters: bool) -> Result<(), Failure> {
    let mut cfg = engine_config(args)?;
    if matches!(cfg.transport, TransportKind::Tcp { .. }) {
        return Err(usage("verify runs the whole cluster in-process; use inproc or tcp-local"));
    }
    let g = load_graph(&args.input)?;
    let q = load_query(&args.input.query)?;
    let (plan, _) = build_plan(&args.input, &g, &q, cfg.machines)?;
    let mut df = translate(&plan)?;
    if drop_order_filters {
        df.drop_order_filters();
    }
    let file = match std::mem::replace(&mut cfg.sink, SinkMode::Count) {
        SinkMode::File(p) => {
            cfg.sink = SinkMode::Collect;
            Some(p)
        }
        other => {
            cfg.sink = other;
            None
        }
    };
    let out = run_dataflow(&g, df, &cfg, plan_hash(&plan))?;
    let verdict = match (&file, &out.results) {
        (Some(path), Some(results)) => {
            let mut text = String::new();
            for r in results {
                let line: Vec<String> = r.iter().map(u32::to_string).collect();
                text.push_str(&line.join(" "));
                text.push('\n');
            }
            std::fs::write(path, text).map_err(|e| Failure(EXIT_RUNTIME, format!("{}: {e}", path.display())))?;
            let truth = oracle::enumerate(
                &q,
                &g,
                OracleConfig {
                    apply_symmetry: true,
                    emit: OracleEmit::List { limit: usize::MAX },
                },
            )?;
            let truth = truth.results.unwrap_or_default();
            if *results == truth {
                Ok(truth.len() as u64)
            } else {
                Err(format!(
                    "engine {} results, oracle {}; {}",
                    results.len(),
                    truth.len(),
                    first_divergence(results, &truth)
                ))
            }
        }
        _ => {
            let truth = oracle::count(&q, &g, true);
            if out.count == truth {
                Ok(truth)
            } else {
                Err(format!("engine count {} != oracle count {truth}", out.count))
            }
        }
    };
    match verdict {
        Ok(n) => {
            println!("PASS {n}={n}");
            Ok(())
        }
        Err(msg) => {
            println!("FAIL {msg}");
            Err(Failure(EXIT_MISMATCH, "verification failed".into()))
        }
    }
}
