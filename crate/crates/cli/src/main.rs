use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use resilitest::aggregation::render_cluster_report;
use resilitest::campaign::{self, Analysis, AnalyzeOptions, CampaignReport, PlanOptions};
use resilitest::executor::{OracleCriteria, PhaseConfig, PhaseSpec, RunOptions};
use resilitest::fault_catalog::{load_catalog, FaultCatalog};
use resilitest::scheduler::{render_run_plan, History, RunPlan};
use resilitest::selection::{render_selection_report, ComplexityWeights};
use resilitest::sim::{load_topology, load_workload, reference, simulate_record};
use resilitest::target_planner::render_plan;
use resilitest::templating::ManualVariableRegistry;
use resilitest::trace_model::{load_corpus, save_corpus};

/// Exit status when `--fail-on-vulnerability` is set and a case failed.
const VULNERABLE: u8 = 2;

#[derive(Parser)]
#[command(name = "resilitest", version, about = "Trace-driven resilience testing for microservice systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the reference topology, its bug-free variant, workload and registry.
    GenReference {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = reference::REFERENCE_SEED)]
        seed: u64,
    },
    /// Record a trace corpus by running a workload against a healthy system.
    SimulateRecord {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        workload: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster interfaces, build replay templates and rank by complexity.
    Analyze {
        #[arg(long)]
        corpus: PathBuf,
        /// Manually registered dynamic variables.
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Complexity weights `w_len,w_div,w_dur`.
        #[arg(long)]
        weights: Option<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay one instantiated request per interface against a healthy start.
    Replay {
        /// Directory written by `analyze`.
        #[arg(long)]
        analysis: PathBuf,
        #[arg(long)]
        topology: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select the top-K interfaces, plan test cases and batch them into runs.
    Plan(PlanArgs),
    /// Execute a run plan against a system.
    Run(RunArgs),
    /// Summarize one report, or print a sensitivity table for several.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct PlanArgs {
    /// Directory written by `analyze`.
    #[arg(long)]
    analysis: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Topology whose asynchronous steps guide dual-write prioritization.
    #[arg(long)]
    topology: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Interfaces to select; all when omitted.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = resilitest::target_planner::DEFAULT_N_SERVICES)]
    n_services: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip cases that already passed and interfaces fully tested.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Start a new history epoch before planning.
    #[arg(long, requires = "history")]
    reset_history: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Directory written by `plan`.
    #[arg(long)]
    plan: PathBuf,
    /// Directory written by `analyze`.
    #[arg(long)]
    analysis: PathBuf,
    #[arg(long)]
    topology: PathBuf,
    /// Oracle thresholds with optional per-interface overrides.
    #[arg(long)]
    criteria: Option<PathBuf>,
    /// Execution history to update with the verdicts.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Judge only the service entry point.
    #[arg(long)]
    entry_only_oracle: bool,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Length of each phase in virtual seconds.
    #[arg(long)]
    phase_seconds: Option<u64>,
    /// Requests per virtual second during each phase.
    #[arg(long)]
    rate: Option<f64>,
    /// Exit with status 2 when any case does not pass.
    #[arg(long)]
    fail_on_vulnerability: bool,
    #[arg(long)]
    out: PathBuf,
}

const ANALYSIS_FILE: &str = "analysis.json";
const RUN_PLAN_FILE: &str = "run-plan.json";

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_analysis(dir: &Path) -> Result<Analysis> {
    let path = dir.join(ANALYSIS_FILE);
    serde_json::from_str(&read(&path)?).with_context(|| format!("parsing {}", path.display()))
}

fn gen_reference(out: &Path, seed: u64) -> Result<()> {
    let assets = reference::generate(seed);
    for (name, body) in reference::ASSET_FILES.iter().zip(assets.render()) {
        write(&out.join(name), &body)?;
    }
    println!("wrote reference system to {}", out.display());
    Ok(())
}

fn simulate(topology: &Path, workload: &Path, seed: u64, out: &Path) -> Result<()> {
    let spec = load_topology(topology)?;
    let workload = load_workload(workload)?;
    let corpus = simulate_record(&spec, &workload, seed);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_corpus(&corpus, out)?;
    println!("recorded {} traces to {}", corpus.traces.len(), out.display());
    Ok(())
}

fn analyze(corpus: &Path, registry: Option<&Path>, weights: Option<&str>, out: &Path) -> Result<()> {
    let corpus = load_corpus(corpus)?;
    let registry = match registry {
        Some(p) => ManualVariableRegistry::load(p)?,
        None => ManualVariableRegistry::new(),
    };
    let mut opts = AnalyzeOptions::default();
    if let Some(w) = weights {
        opts.weights = ComplexityWeights::parse(w)?;
    }
    let (clusters, analysis) = campaign::analyze(&corpus, &registry, &opts)?;
    let mut json = serde_json::to_string(&analysis)?;
    json.push('\n');
    write(&out.join(ANALYSIS_FILE), &json)?;
    write(&out.join("clusters.txt"), &render_cluster_report(&clusters))?;
    write(&out.join("selection.txt"), &render_selection_report(&analysis.ranked))?;
    println!(
        "{} interfaces, {} templates, {} without template",
        analysis.ranked.len(),
        analysis.templates.len(),
        analysis.template_errors.len()
    );
    for (id, why) in &analysis.template_errors {
        println!("  {id}: {why}");
    }
    Ok(())
}

fn replay(analysis: &Path, topology: &Path, seed: u64, out: Option<&Path>) -> Result<()> {
    let analysis = load_analysis(analysis)?;
    let topology = load_topology(topology)?;
    let r = campaign::replay_check(&analysis, &topology, seed);
    if let Some(out) = out {
        write(out, &r.to_json())?;
    }
    println!("{}/{} interfaces replayed ({:.1}%)", r.succeeded(), r.total(), 100.0 * r.success_rate());
    for (id, status) in r.interfaces.iter().filter(|(_, s)| *s != "ok") {
        println!("  {id}: {status}");
    }
    Ok(())
}

fn plan(a: &PlanArgs) -> Result<()> {
    let analysis = load_analysis(&a.analysis)?;
    let corpus = load_corpus(&a.corpus)?;
    let catalog = match &a.catalog {
        Some(p) => load_catalog(p)?,
        None => FaultCatalog::builtin(),
    };
    let async_hints = match &a.topology {
        Some(p) => load_topology(p)?.async_hints(),
        None => Default::default(),
    };
    let mut history = match &a.history {
        Some(p) => Some(History::load_or_default(p)?),
        None => None,
    };
    if a.reset_history {
        if let (Some(h), Some(p)) = (history.as_mut(), &a.history) {
            h.reset();
            h.save(p)?;
        }
    }
    let opts = PlanOptions {
        top_k: a.top_k,
        n_services: a.n_services,
        seed: a.seed,
        async_hints,
    };
    let planned = campaign::plan(&analysis, &corpus, &catalog, &opts, history.as_ref())?;
    write(&a.out.join("plan.txt"), &render_plan(&planned.cases))?;
    write(&a.out.join("run-plan.txt"), &render_run_plan(&planned.run_plan))?;
    let mut json = serde_json::to_string_pretty(&planned.run_plan)?;
    json.push('\n');
    write(&a.out.join(RUN_PLAN_FILE), &json)?;
    println!(
        "{} interfaces selected, {} cases in {} runs ({} to full coverage), {} skipped by history",
        planned.selected.len(),
        planned.cases.len(),
        planned.run_plan.runs.len(),
        planned.run_plan.runs_to_full_coverage,
        planned.skipped.len()
    );
    Ok(())
}

fn phases(a: &RunArgs) -> Result<PhaseConfig> {
    let mut p = PhaseConfig::default();
    for phase in [&mut p.startup, &mut p.injection, &mut p.recovery] {
        *phase = PhaseSpec {
            duration_us: a.phase_seconds.map_or(phase.duration_us, |s| s * 1_000_000),
            rate_per_s: a.rate.unwrap_or(phase.rate_per_s),
        };
    }
    p.settle_us = p.settle_us.min(p.recovery.duration_us / 2);
    p.validate()?;
    Ok(p)
}

fn run(a: &RunArgs) -> Result<bool> {
    if a.parallel == 0 {
        bail!("--parallel must be at least 1");
    }
    let path = a.plan.join(RUN_PLAN_FILE);
    let run_plan: RunPlan = serde_json::from_str(&read(&path)?).with_context(|| format!("parsing {}", path.display()))?;
    let analysis = load_analysis(&a.analysis)?;
    let topology = load_topology(&a.topology)?;
    let criteria = match &a.criteria {
        Some(p) => OracleCriteria::load(p)?,
        None => OracleCriteria::default(),
    };
    let mut history = match &a.history {
        Some(p) => Some(History::load_or_default(p)?),
        None => None,
    };
    let opts = RunOptions {
        phases: phases(a)?,
        entry_only_oracle: a.entry_only_oracle,
        seed: a.seed,
        parallel: a.parallel,
    };
    let planned = campaign::Planned {
        run_plan,
        ..Default::default()
    };
    let report = campaign::execute(&planned, &topology, &analysis, &criteria, &opts, history.as_mut());
    write(&a.out, &report.to_json())?;
    if let (Some(h), Some(p)) = (&history, &a.history) {
        h.save(p)?;
    }
    print!("{}", campaign::render_summary(&report));
    let failed = report.failures().next().is_some();
    Ok(failed)
}

fn report(paths: &[PathBuf]) -> Result<()> {
    let mut reports = Vec::new();
    for p in paths {
        let r = CampaignReport::from_json(&read(p)?).with_context(|| format!("parsing {}", p.display()))?;
        let label = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        reports.push((label, r));
    }
    if let [(_, only)] = reports.as_slice() {
        print!("{}", campaign::render_summary(only));
    } else {
        print!("{}", campaign::sensitivity_table(&reports));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenReference { out, seed } => gen_reference(out, *seed).map(|_| false),
        Command::SimulateRecord {
            topology,
            workload,
            seed,
            out,
        } => simulate(topology, workload, *seed, out).map(|_| false),
        Command::Analyze {
            corpus,
            registry,
            weights,
            out,
        } => analyze(corpus, registry.as_deref(), weights.as_deref(), out).map(|_| false),
        Command::Replay {
            analysis,
            topology,
            seed,
            out,
        } => replay(analysis, topology, *seed, out.as_deref()).map(|_| false),
        Command::Plan(a) => plan(a).map(|_| false),
        Command::Run(a) => run(a).map(|failed| failed && a.fail_on_vulnerability),
        Command::Report { reports } => report(reports).map(|_| false),
    };
    match result {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(VULNERABLE),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
