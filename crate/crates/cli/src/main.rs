use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sieve_core::bench::{self, BenchConfig, VERIFY_DEFAULT_LIMIT};
use sieve_core::cache::RefreshStrategy;
use sieve_core::cost::{calibrate, CostConstants};
use sieve_core::data;
use sieve_core::engine::Engine;
use sieve_core::policy::{GroupDirectory, QueryMetadata};
use sieve_core::rewrite::{rewrite_sql, DialectCapabilities};
use sieve_core::store::PolicyStore;
use sieve_core::workload::{self, Campus, Mode, Scale, Scenario, ScenarioSpec, WorkloadConfig, WorkloadEvent};

#[derive(Parser)]
#[command(name = "sieve", version, about = "Fine-grained access control by query rewriting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a workload (policy inserts, queries, deletions) as JSONL.
    Gen(GenArgs),
    /// Generate synthetic WiFi connectivity rows as JSONL.
    GenData(GenDataArgs),
    /// Load a relation and print its statistics.
    Load(LoadArgs),
    /// Print the enforced form of a query.
    Rewrite(QueryArgs),
    /// Enforce and execute a query on the embedded engine.
    Run(QueryArgs),
    #[command(subcommand)]
    Guards(GuardsCmd),
    #[command(subcommand)]
    Store(StoreCmd),
    /// Measure cost constants and write a calibration file.
    Calibrate(CalibrateArgs),
    /// Replay a workload and report cache and execution metrics.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum GuardsCmd {
    /// Build and print the guarded expression of a querier.
    Dump(DumpArgs),
}

#[derive(Subcommand)]
enum StoreCmd {
    /// Build a store snapshot from the inserts and deletions of a workload.
    Import {
        workload: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Re-export a store snapshot or journal as a compact snapshot.
    Export {
        store: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "attendance")]
    scenario: Scenario,
    #[arg(long, default_value = "steady")]
    mode: Mode,
    #[arg(long, default_value = "desk")]
    preset: Scale,
    #[arg(long, default_value_t = 10)]
    x: usize,
    #[arg(long, default_value_t = 1)]
    y: usize,
    #[arg(long, default_value_t = 0)]
    z: usize,
    #[arg(long, default_value_t = 0.0)]
    zipf_alpha: f64,
    #[arg(long, default_value_t = 10)]
    window_size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "attendance")]
    scenario: Scenario,
    #[arg(long, default_value = "desk")]
    preset: Scale,
    #[arg(long, default_value_t = 20_000)]
    rows: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// JSONL rows of the relation.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = workload::RELATION)]
    relation: String,
    /// Indexed attributes; defaults to every column (the WiFi relation uses
    /// location_id, date and time). The owner is always indexed.
    #[arg(long = "index")]
    indexes: Vec<String>,
}

#[derive(Args)]
struct LoadArgs {
    data: PathBuf,
    #[arg(long, default_value = workload::RELATION)]
    relation: String,
    #[arg(long = "index")]
    indexes: Vec<String>,
}

#[derive(Args)]
struct PolicyArgs {
    /// Store snapshot or journal.
    #[arg(long, conflicts_with = "workload")]
    store: Option<PathBuf>,
    /// Workload whose inserts and deletions define the policies.
    #[arg(long)]
    workload: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    policies: PolicyArgs,
    #[arg(long)]
    querier: String,
    #[arg(long)]
    purpose: String,
    /// Built-in dialect: embedded, hinted or plain.
    #[arg(long, default_value = "embedded")]
    dialect: String,
    /// TOML file with dialect capabilities; overrides --dialect.
    #[arg(long)]
    dialect_config: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    sql: String,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    policies: PolicyArgs,
    #[arg(long)]
    querier: String,
    #[arg(long)]
    purpose: String,
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Write the fixed default constants instead of measuring.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    workload: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 80.0)]
    cache_size_pct: f64,
    #[arg(long, default_value = "o1")]
    refresh_strategy: RefreshStrategy,
    /// Cross-check every query against the oracle. On by default below
    /// 10k tuples.
    #[arg(long, conflicts_with = "no_verify")]
    verify: bool,
    #[arg(long)]
    no_verify: bool,
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Cost units per guard-generation operation.
    #[arg(long, default_value_t = 1.0)]
    c_build: f64,
    /// Also compare against the baselines on this many workload queries,
    /// over the final policy set.
    #[arg(long, default_value_t = 0)]
    baselines: usize,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn open(p: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?))
}

fn constants(path: &Option<PathBuf>) -> Result<CostConstants> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(CostConstants::parse(&text)?)
        }
        None => Ok(CostConstants::default()),
    }
}

fn load_engine(relation: &str, data_path: &Path, indexes: &[String]) -> Result<Engine> {
    if relation == workload::RELATION && indexes.is_empty() {
        let rows = data::read_rows(open(data_path)?, relation, Some(&bench::wifi_schema()))?;
        return Ok(bench::wifi_engine(&rows)?);
    }
    let rows = data::read_rows(open(data_path)?, relation, None)?;
    if rows.is_empty() {
        bail!("{} has no rows", data_path.display());
    }
    let mut e = Engine::new();
    e.load_tuples(&rows)?;
    let cols: Vec<String> = e.table(relation)?.schema.columns.iter().map(|(c, _)| c.clone()).collect();
    let wanted = if indexes.is_empty() { cols } else { indexes.to_vec() };
    for a in wanted {
        e.create_index(relation, &a)?;
    }
    e.analyze(relation)?;
    Ok(e)
}

fn engine_from(d: &DataArgs) -> Result<Engine> {
    load_engine(&d.relation, &d.data, &d.indexes)
}

fn read_workload(p: &Path) -> Result<Vec<WorkloadEvent>> {
    workload::read_jsonl(open(p)?).with_context(|| format!("reading workload {}", p.display()))
}

fn store_from_workload(events: &[WorkloadEvent]) -> Result<PolicyStore> {
    let mut s = PolicyStore::new(GroupDirectory::default());
    for e in events {
        match e {
            WorkloadEvent::InsertPolicy { policy } => {
                s.insert_policy(policy.clone())?;
            }
            WorkloadEvent::DeletePolicy { policy_id } => {
                s.delete_policy(*policy_id)?;
            }
            _ => {}
        }
    }
    Ok(s)
}

fn store_from(p: &PolicyArgs) -> Result<PolicyStore> {
    match (&p.store, &p.workload) {
        (Some(s), _) => Ok(PolicyStore::import(open(s)?, GroupDirectory::default())?),
        (None, Some(w)) => store_from_workload(&read_workload(w)?),
        (None, None) => bail!("give the policies with --store or --workload"),
    }
}

fn dialect(name: &str, config: &Option<PathBuf>) -> Result<DialectCapabilities> {
    match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing dialect config {}", p.display()))
        }
        None => Ok(DialectCapabilities::by_name(name)?),
    }
}

fn query(a: &QueryArgs, execute: bool) -> Result<()> {
    let engine = engine_from(&a.data)?;
    let store = store_from(&a.policies)?;
    let k = constants(&a.calibration)?;
    let caps = if execute { DialectCapabilities::embedded() } else { dialect(&a.dialect, &a.dialect_config)? };
    let builder = bench::builder_for(&engine, k);
    let qm = QueryMetadata::new(a.querier.clone(), a.purpose.clone());
    let bq = engine.bind(&sieve_core::sql::parse_query(&a.sql)?)?;
    let mut ges = BTreeMap::new();
    for s in &bq.sources {
        if engine.table(&s.relation)?.governed && !ges.contains_key(&s.relation) {
            let ge = bench::build_fresh(&store, &builder, &qm, &s.relation)?;
            ges.insert(s.relation.clone(), Arc::new(ge));
        }
    }
    let rw = rewrite_sql(&a.sql, &qm, &caps, &ges, &engine, &k)?;
    let mut out = io::stdout().lock();
    if !execute {
        writeln!(out, "{}", rw.sql)?;
        return Ok(());
    }
    let (rs, stats) = engine.execute(&rw.plan)?;
    writeln!(out, "{}", rs.columns.join("\t"))?;
    for row in &rs.rows {
        let cells: Vec<String> = row.iter().map(|v| data::to_json(v).to_string()).collect();
        writeln!(out, "{}", cells.join("\t"))?;
    }
    eprintln!("{} rows; {}", rs.rows.len(), serde_json::to_string(&stats)?);
    Ok(())
}

fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let kind = match c.downcast_ref::<sieve_core::Error>() {
            Some(sieve_core::Error::Io(e)) => Some(e.kind()),
            Some(sieve_core::Error::Json(e)) => e.io_error_kind(),
            _ => c.downcast_ref::<io::Error>().map(io::Error::kind),
        };
        kind == Some(io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed stdout (piping into `head`) is not a failure.
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen(a) => {
            let mut cfg = match a.mode {
                Mode::Steady => WorkloadConfig::steady(a.scenario, a.preset, a.x, a.y, a.seed),
                Mode::Deletion => WorkloadConfig::deletion(a.scenario, a.preset, a.x, a.y, a.z, a.seed),
                Mode::Bursty => WorkloadConfig::bursty(a.scenario, a.preset, a.seed),
            };
            cfg.zipf_alpha = a.zipf_alpha;
            cfg.window_size = a.window_size;
            cfg.max_epochs = a.max_epochs;
            let wl = workload::generate(&cfg)?;
            wl.write_jsonl(output(&a.out)?)?;
            let t = wl.totals;
            eprintln!(
                "{} policies, {} queries, {} deletions, {} epochs, {} queriers",
                t.policies, t.queries, t.deletions, t.epochs, t.queriers
            );
        }
        Cmd::GenData(a) => {
            let campus = Campus::generate(&ScenarioSpec::new(a.scenario, a.preset), a.seed);
            data::write_rows(output(&a.out)?, &campus.generate_events(a.rows, a.seed))?;
        }
        Cmd::Load(a) => {
            let e = load_engine(&a.relation, &a.data, &a.indexes)?;
            let t = e.table(&a.relation)?;
            let mut out = io::stdout().lock();
            writeln!(out, "{}: {} rows", t.name, t.rows.len())?;
            for (c, tag) in &t.schema.columns {
                let idx = if t.is_indexed(c) { "indexed" } else { "" };
                writeln!(out, "  {c:<16} {:<10} {idx}", tag.name())?;
            }
        }
        Cmd::Rewrite(a) => query(&a, false)?,
        Cmd::Run(a) => query(&a, true)?,
        Cmd::Guards(GuardsCmd::Dump(a)) => {
            let engine = engine_from(&a.data)?;
            let mut store = store_from(&a.policies)?;
            let builder = bench::builder_for(&engine, constants(&a.calibration)?);
            let qm = QueryMetadata::new(a.querier.clone(), a.purpose.clone());
            let ge = bench::build_fresh(&store, &builder, &qm, &a.data.relation)?;
            store.store_ge(ge.to_stored())?;
            let stored = store.fetch_ge(&qm.querier, &qm.purpose, &a.data.relation).expect("just stored");
            writeln!(io::stdout().lock(), "{}", serde_json::to_string_pretty(stored)?)?;
        }
        Cmd::Store(StoreCmd::Import { workload, out }) => {
            let store = store_from_workload(&read_workload(&workload)?)?;
            store.export(output(&out)?)?;
            eprintln!("{} live policies", store.len());
        }
        Cmd::Store(StoreCmd::Export { store, out }) => {
            let s = PolicyStore::import(open(&store)?, GroupDirectory::default())?;
            s.export(output(&out)?)?;
        }
        Cmd::Calibrate(a) => {
            let k = if a.deterministic { calibrate::deterministic() } else { calibrate::calibrate_measured(a.seed)? };
            let mut w = output(&a.out)?;
            w.write_all(k.to_file_string().as_bytes())?;
            w.flush()?;
        }
        Cmd::Bench(a) => {
            let engine = engine_from(&a.data)?;
            let events = read_workload(&a.workload)?;
            let rows = engine.table(&a.data.relation)?.rows.len();
            let verify = a.verify || (!a.no_verify && rows < VERIFY_DEFAULT_LIMIT);
            let cfg = BenchConfig {
                cache_size_pct: a.cache_size_pct,
                strategy: a.refresh_strategy,
                verify,
                constants: constants(&a.calibration)?,
                c_build: a.c_build,
                seed: None,
            };
            let mut report = bench::run_workload(&engine, &events, cfg)?;
            if a.baselines > 0 {
                let store = store_from_workload(&events)?;
                let qs: Vec<(QueryMetadata, String)> = events
                    .iter()
                    .filter_map(|e| match e {
                        WorkloadEvent::Query { querier, purpose, sql, seen: false } => {
                            Some((QueryMetadata::new(querier.clone(), purpose.clone()), sql.clone()))
                        }
                        _ => None,
                    })
                    .take(a.baselines)
                    .collect();
                let builder = bench::builder_for(&engine, cfg.constants);
                report.baselines = bench::run_baselines(&engine, &store, &qs, &builder)?;
            }
            if let Some(p) = &a.report {
                std::fs::write(p, report.to_json()?).with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(p) = &a.csv {
                std::fs::write(p, report.epochs_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
            match &a.text {
                Some(p) => std::fs::write(p, report.to_text()).with_context(|| format!("writing {}", p.display()))?,
                None => io::stdout().lock().write_all(report.to_text().as_bytes())?,
            }
        }
    }
    Ok(())
}
