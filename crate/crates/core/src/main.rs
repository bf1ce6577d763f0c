use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use recap_core::experiment::{
    cmd_build, cmd_check, cmd_report, cmd_run, read_triples, reference_triples, stats_table, ExperimentError, ListwiseMode, LoadedConfig,
    MethodId, EXIT_CONFIG, EXIT_OK, EXIT_VIOLATION, REFERENCE_SELECT_ALL,
};

#[derive(Parser)]
#[command(name = "recap", version, about = "Recap snippet identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// closest5, embed_zero, embed_charfilter, l2n, supervised_pw, llm_listwise, llm_pairwise, pipeline
    #[arg(long)]
    method: Option<String>,
    /// Listwise mode: top5 or free.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    k_filter: Option<usize>,
    #[arg(long)]
    char_filter: bool,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest corpora, build and label instances.
    Build(Overrides),
    /// Run a method on built instances and write reports.
    Run(Overrides),
    /// Recompute F1 of reference triples and the Select-All identity.
    Check {
        /// CSV of label,recall,precision,f1 replacing the built-in triples.
        #[arg(long)]
        triples: Option<PathBuf>,
    },
    /// Tabulate written reports.
    Report(Overrides),
}

fn load(o: &Overrides) -> Result<LoadedConfig, ExperimentError> {
    let mut cfg = LoadedConfig::from_file(&o.config)?;
    let c = &mut cfg.config;
    if let Some(s) = o.seed {
        c.seed = s;
    }
    if let Some(d) = &o.output_dir {
        c.output_dir = d.clone();
    }
    if let Some(m) = &o.method {
        c.method.id = MethodId::parse(m).ok_or_else(|| ExperimentError::Config(format!("unknown method {m:?}")))?;
    }
    if let Some(m) = &o.mode {
        c.method.llm.mode = match m.as_str() {
            "top5" => ListwiseMode::Top5,
            "free" => ListwiseMode::Free,
            _ => return Err(ExperimentError::Config(format!("unknown mode {m:?}"))),
        };
    }
    if let Some(k) = o.k_filter {
        c.method.llm.k_filter = k;
    }
    if o.char_filter {
        c.method.char_filter = true;
    }
    if o.threshold.is_some() {
        c.method.threshold = o.threshold;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, ExperimentError> {
    match cli.command {
        Command::Build(o) => {
            let cfg = load(&o)?;
            let stats = cmd_build(&cfg)?;
            println!("config {}", cfg.hash());
            print!("{}", stats_table(&stats));
        }
        Command::Run(o) => {
            let cfg = load(&o)?;
            for r in cmd_run(&cfg)? {
                println!("{}", r.summary());
            }
        }
        Command::Report(o) => {
            let cfg = load(&o)?;
            print!("{}", cmd_report(&cfg)?);
        }
        Command::Check { triples } => {
            let (t, select_all) = match &triples {
                Some(p) => (read_triples(p)?, Vec::new()),
                None => (reference_triples(), REFERENCE_SELECT_ALL.to_vec()),
            };
            if t.is_empty() && select_all.is_empty() {
                log::warn!("no triples to check; skipping");
                return Ok(EXIT_OK);
            }
            let report = cmd_check(&t, &select_all);
            print!("{}", report.render());
            if !report.passed() {
                return Ok(EXIT_VIOLATION);
            }
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
