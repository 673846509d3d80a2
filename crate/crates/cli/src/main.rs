use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ruler_core::data::PartitionSpec;
use ruler_core::lens1::BaselineKind;
use ruler_core::pipeline::{
    self, ModelCache, PipelineError, RunConfig, SweepAxis, VerifyInputs, VerifyOptions,
};
use ruler_core::{Embeddings, ModelRole};

const EXIT_FAILED_CELLS: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_RUNTIME: u8 = 1;

#[derive(Parser)]
#[command(
    name = "ruler",
    version,
    about = "Representation-level unlearning verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Added to every training seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train, unlearn and score every configured cell.
    Run(RunArgs),
    /// Score externally produced embeddings.
    Verify {
        #[arg(long)]
        unlearned: PathBuf,
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        original: Option<PathBuf>,
        /// Partition JSON (retain/forget/test indices).
        #[arg(long)]
        partition: PathBuf,
        /// Assert that original and oracle share an initialisation.
        #[arg(long)]
        paired_seed: bool,
        #[arg(long)]
        require_lens1: bool,
        #[arg(long, default_value = "median")]
        baseline: String,
        #[arg(long, default_value_t = ruler_core::lens2::DEFAULT_CAP)]
        m4_cap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "external")]
        label: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// M2 between independently retrained oracles.
    Calibrate(RunArgs),
    /// Rerun the pipeline along one axis.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// lr_u, forget_seed or baseline_kind.
        #[arg(long)]
        axis: String,
    },
    /// Re-aggregate statistics from an existing records.jsonl.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::MissingOracleForLens1 => {
                Failure::Config(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn cell_status(code: i32) -> u8 {
    if code == 0 {
        0
    } else {
        EXIT_FAILED_CELLS
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(&args.config)?.with_seed_offset(args.seed_offset))
}

fn parse_baseline(s: &str) -> Result<BaselineKind, Failure> {
    match s {
        "median" => Ok(BaselineKind::Median),
        "mean" => Ok(BaselineKind::Mean),
        _ => Err(Failure::Config(format!("unknown baseline '{s}'"))),
    }
}

fn load_embeddings(path: &Path, role: ModelRole) -> Result<Embeddings, Failure> {
    Embeddings::load(path, role).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn execute(cli: Cli) -> Result<u8, Failure> {
    let cache = ModelCache::from_env();
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let out = pipeline::run_pipeline(&cfg, &cache, args.threads)?;
            out.write(&args.out)?;
            eprintln!(
                "{} records, {} failed cells -> {}",
                out.records.len(),
                out.failures.len(),
                args.out.display()
            );
            Ok(cell_status(out.exit_code()))
        }
        Command::Verify {
            unlearned,
            oracle,
            original,
            partition,
            paired_seed,
            require_lens1,
            baseline,
            m4_cap,
            seed,
            label,
            out,
        } => {
            let unl = load_embeddings(&unlearned, ModelRole::Unlearned)?;
            let text = std::fs::read_to_string(&partition)
                .map_err(|e| Failure::Config(format!("{}: {e}", partition.display())))?;
            let part = PartitionSpec::from_json(&text, unl.n_records())
                .map_err(|e| Failure::Config(e.to_string()))?;
            let inputs = VerifyInputs {
                oracle: oracle
                    .map(|p| load_embeddings(&p, ModelRole::Oracle))
                    .transpose()?,
                original: original
                    .map(|p| load_embeddings(&p, ModelRole::Original))
                    .transpose()?,
                unlearned: unl,
                partition: part,
            };
            let opts = VerifyOptions {
                paired_seed,
                require_lens1,
                baseline: parse_baseline(&baseline)?,
                m4_cap,
                seed,
                label,
            };
            let rec = pipeline::verify_external(&inputs, &opts)?;
            pipeline::write_verify(&rec, &out)?;
            if let Some(l2) = &rec.lens2 {
                eprintln!("M4 = {:.4}", l2.aggregate);
            }
            if let Some(l1) = &rec.lens1 {
                eprintln!("M1 = {:.6}  M2 = {:+.6}", l1.m1, l1.m2);
            }
            Ok(0)
        }
        Command::Calibrate(args) => {
            let cfg = load_config(&args)?;
            let rep = pipeline::calibrate_oracle_pairs(&cfg, &cache, args.threads)?;
            rep.write(&args.out)?;
            eprintln!(
                "{} pairs: mean M2 {:+.6}, SE {:.6}, centred {}",
                rep.pairs.len(),
                rep.mean_m2,
                rep.se_m2,
                rep.centred
            );
            Ok(0)
        }
        Command::Sweep { run, axis } => {
            let axis: SweepAxis = axis.parse().map_err(Failure::Config)?;
            let cfg = load_config(&run)?;
            let rep = pipeline::sweep(&cfg, &cache, run.threads, axis)?;
            rep.write(&run.out)?;
            for p in &rep.points {
                eprintln!("{}: holds {}/{}", p.label, p.n_holds, p.holds.len());
            }
            Ok(cell_status(rep.exit_code()))
        }
        Command::Report { records, out } => {
            let run = pipeline::report_from_records(&records)?;
            std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(e.to_string()))?;
            let file = |name: &str| {
                std::fs::File::create(out.join(name)).map_err(|e| Failure::Runtime(e.to_string()))
            };
            pipeline::write_stat_report(&run.report, file("stat_report.json")?)?;
            pipeline::write_summary_csv(&run.report, file("summary.csv")?)?;
            pipeline::write_pairwise_csv(&run.report, file("pairwise.csv")?)?;
            Ok(cell_status(run.exit_code()))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
