use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use approxflow::asrs;
use approxflow::tuner::{self, DataSource, ErrorTargets, RateSearchConfig};
use approxflow::{
    builtin_pipeline, execute, execute_exact, load_text, ConfidenceSpec, FinalStage,
    PartitionedDataset, SamplingConfig, TransformChain,
};
use approxflow_cli::report::{ReportMetadata, RunReport};
use approxflow_cli::synth::{KeyDist, SynthParams, ValueDist};
use approxflow_cli::{compare, report, synth, CliError};

#[derive(Parser)]
#[command(
    name = "approxflow",
    version,
    about = "Approximate keyed aggregation with sampling error bounds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a pipeline approximately and write a per-key report.
    Run(RunArgs),
    /// Run a pipeline exactly and write `key,value` ground truth.
    Exact(ExactArgs),
    /// Compare an approximate report against ground truth.
    Compare(CompareArgs),
    /// Pick sampling rates from error-bound targets, then run.
    Tune(TuneArgs),
    /// Generate synthetic `key,value` input files.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Agg {
    Sum,
    Mean,
}

impl From<Agg> for FinalStage {
    fn from(a: Agg) -> Self {
        match a {
            Agg::Sum => FinalStage::Sum,
            Agg::Mean => FinalStage::Mean,
        }
    }
}

#[derive(Parser)]
struct CommonRunArgs {
    /// Built-in pipeline: wordcount, cooccur, group-sum or synth.
    #[arg(long)]
    pipeline: String,
    /// Input file or directory of newline-delimited text.
    #[arg(long)]
    input: PathBuf,
    /// Number of partitions to split the input into.
    #[arg(long)]
    partitions: usize,
    /// Aggregation for the synth pipeline.
    #[arg(long, value_enum, default_value_t = Agg::Sum)]
    agg: Agg,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    /// RNG seed; the APPROXFLOW_SEED environment variable overrides it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report destination (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Worker thread cap (defaults to the logical core count).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Parser)]
struct RunArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    #[arg(long, default_value_t = 1.0)]
    partition_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    item_rate: f64,
    /// Print the provenance tree shape to stderr.
    #[arg(long)]
    dump_provenance: bool,
    /// Sample with per-partition adaptive stratified reservoirs instead of
    /// item sampling (requires --reservoir-size; item rate must stay 1).
    #[arg(long)]
    asrs: bool,
    /// Total reservoir size, split evenly across partitions.
    #[arg(long)]
    reservoir_size: Option<usize>,
}

#[derive(Parser)]
struct ExactArgs {
    #[command(flatten)]
    common: CommonRunArgs,
}

#[derive(Parser)]
struct CompareArgs {
    /// Approximate run report (CSV).
    #[arg(long)]
    approx: PathBuf,
    /// Exact `key,value` file from the exact subcommand.
    #[arg(long)]
    exact: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Parser)]
struct TuneArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Error-bound target `PERCENTILE=BOUND`; repeatable.
    #[arg(long = "target", required = true)]
    targets: Vec<String>,
    #[arg(long, default_value_t = 0.10)]
    pilot_fraction: f64,
    #[arg(long, default_value_t = 0.001)]
    step: f64,
    /// Lowest rate the search may return (defaults to the step size).
    #[arg(long)]
    min_rate: Option<f64>,
    /// Headroom the search keeps against each target.
    #[arg(long, default_value_t = 0.05)]
    safety_margin: f64,
}

#[derive(Parser)]
struct SynthArgs {
    /// Output directory for part files and manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    keys: usize,
    #[arg(long)]
    partitions: usize,
    #[arg(long)]
    items_per_partition: usize,
    /// Key distribution: uniform or zipf:S.
    #[arg(long, default_value = "uniform")]
    distribution: String,
    /// Value distribution: uniform[:lo,hi], normal:mu,sigma or constant:c.
    #[arg(long, default_value = "uniform")]
    value_dist: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Exact(args) => cmd_exact(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Tune(args) => cmd_tune(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("approxflow: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// APPROXFLOW_SEED overrides the --seed flag when set.
fn effective_seed(flag: u64) -> Result<u64, CliError> {
    match std::env::var("APPROXFLOW_SEED") {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map_err(|_| CliError::Usage(format!("APPROXFLOW_SEED=`{v}` is not a u64"))),
        Err(_) => Ok(flag),
    }
}

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        // A second initialization in-process is harmless; keep the first.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    match path {
        Some(p) => Ok(Box::new(
            std::fs::File::create(p).map_err(|e| CliError::io(p, e))?,
        )),
        None => Ok(Box::new(std::io::stdout().lock())),
    }
}

fn load_for(
    common: &CommonRunArgs,
    partition_rate: f64,
    item_rate: f64,
    seed: u64,
) -> Result<(PartitionedDataset, TransformChain), CliError> {
    let cfg = SamplingConfig::new(partition_rate, item_rate, seed, common.confidence)?;
    let chain = builtin_pipeline(&common.pipeline, common.agg.into())?;
    let ds = load_text(&common.input, common.partitions, cfg)?;
    Ok((ds, chain))
}

fn emit_report(
    report: &RunReport,
    format: Format,
    out: &Option<PathBuf>,
    tuner_extra: Option<serde_json::Value>,
) -> Result<(), CliError> {
    let mut w = open_out(out)?;
    match format {
        Format::Csv => report.write_csv(&mut w)?,
        Format::Json => {
            serde_json::to_writer_pretty(&mut w, &report.to_json(tuner_extra))?;
            writeln!(w)?;
        }
    }
    eprintln!("{}", report.summary_line());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let seed = effective_seed(args.common.seed)?;
    init_threads(args.common.threads)?;
    if args.asrs && args.reservoir_size.is_none() {
        return Err(CliError::Usage("--asrs requires --reservoir-size".into()));
    }
    if !args.asrs && args.reservoir_size.is_some() {
        return Err(CliError::Usage("--reservoir-size requires --asrs".into()));
    }

    let started = Instant::now();
    let (ds, chain) = load_for(&args.common, args.partition_rate, args.item_rate, seed)?;

    let (per_key, mode, depth, level_rates) = if args.asrs {
        let reservoir = args.reservoir_size.expect("checked above");
        let (_, states) = asrs::asrs_transform(&ds, &chain.ops, reservoir)?;
        let spec = ConfidenceSpec::new(args.common.confidence)?;
        let per_key = asrs::stratified_estimate(
            &states,
            ds.origin_partition_count,
            &spec,
            chain.final_stage,
        );
        let rates = vec![ds.realized_partition_rate(), 1.0];
        (per_key, "stratified", 2, rates)
    } else {
        let result = execute(&ds, &chain)?;
        if args.dump_provenance {
            eprint!("{}", result.metadata.provenance_shape);
        }
        let depth = result.metadata.depth;
        let rates = result.metadata.level_rates.clone();
        (result.per_key, "multistage", depth, rates)
    };

    let metadata = ReportMetadata {
        pipeline: args.common.pipeline.clone(),
        input: args.common.input.display().to_string(),
        mode: mode.into(),
        partitions_requested: args.common.partitions,
        origin_partition_count: ds.origin_partition_count,
        chosen_partition_count: ds.chosen_partition_count(),
        partition_rate: args.partition_rate,
        item_rate: args.item_rate,
        realized_partition_rate: ds.realized_partition_rate(),
        confidence: args.common.confidence,
        seed,
        depth,
        level_rates,
        wall_ms: started.elapsed().as_millis(),
    };
    emit_report(
        &RunReport::new(&per_key, metadata),
        args.common.format,
        &args.common.out,
        None,
    )
}

fn cmd_exact(args: ExactArgs) -> Result<(), CliError> {
    let seed = effective_seed(args.common.seed)?;
    init_threads(args.common.threads)?;
    let (ds, chain) = load_for(&args.common, 1.0, 1.0, seed)?;
    let exact = execute_exact(&ds, &chain)?;
    let mut w = open_out(&args.common.out)?;
    report::write_exact(&mut w, &exact)?;
    eprintln!("exact keys={}", exact.len());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let rows = report::read_csv(&args.approx)?;
    let exact = report::read_exact(&args.exact)?;
    let comparison = compare::compare(&rows, &exact);
    let mut w = open_out(&args.out)?;
    serde_json::to_writer_pretty(&mut w, &comparison)?;
    writeln!(w)?;
    Ok(())
}

fn parse_targets(specs: &[String]) -> Result<ErrorTargets, CliError> {
    let mut entries = Vec::with_capacity(specs.len());
    for s in specs {
        let (p, b) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("target `{s}` is not PERCENTILE=BOUND")))?;
        let percentile: f64 = p
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad percentile in `{s}`")))?;
        let bound: f64 = b
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad bound in `{s}`")))?;
        entries.push((percentile, bound));
    }
    entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(ErrorTargets::new(entries)?)
}

fn cmd_tune(args: TuneArgs) -> Result<(), CliError> {
    let seed = effective_seed(args.common.seed)?;
    init_threads(args.common.threads)?;
    let targets = parse_targets(&args.targets)?;
    let search = RateSearchConfig {
        pilot_fraction: args.pilot_fraction,
        step: args.step,
        min_rate: args.min_rate.unwrap_or(args.step),
        safety_margin: args.safety_margin,
    };
    let chain = builtin_pipeline(&args.common.pipeline, args.common.agg.into())?;
    let base = SamplingConfig::new(1.0, 1.0, seed, args.common.confidence)?;
    let source = DataSource::Text {
        path: args.common.input.clone(),
        partitions: args.common.partitions,
    };

    let started = Instant::now();
    let tuned = tuner::run_with_targets(&source, base, &chain, &targets, &search)?;
    let meta = &tuned.result.metadata;
    let metadata = ReportMetadata {
        pipeline: args.common.pipeline.clone(),
        input: args.common.input.display().to_string(),
        mode: "tuned".into(),
        partitions_requested: args.common.partitions,
        origin_partition_count: meta.origin_partition_count,
        chosen_partition_count: meta.chosen_partition_count,
        partition_rate: tuned.partition_rate,
        item_rate: tuned.item_rate,
        realized_partition_rate: meta.realized_partition_rate,
        confidence: args.common.confidence,
        seed,
        depth: meta.depth,
        level_rates: meta.level_rates.clone(),
        wall_ms: started.elapsed().as_millis(),
    };
    let extra = serde_json::json!({
        "targets": targets.entries(),
        "chosen_partition_rate": tuned.partition_rate,
        "chosen_item_rate": tuned.item_rate,
        "pilot_partitions": tuned.pilot_partitions,
        "pilot_ms": tuned.pilot_elapsed.as_millis(),
        "predicted_bounds": tuned.predicted_cdf.bounds(),
    });
    eprintln!(
        "tuned rates: partition {:.4}, item {:.4} (pilot {} partitions, {} ms)",
        tuned.partition_rate,
        tuned.item_rate,
        tuned.pilot_partitions,
        tuned.pilot_elapsed.as_millis()
    );
    emit_report(
        &RunReport::new(&tuned.result.per_key, metadata),
        args.common.format,
        &args.common.out,
        Some(extra),
    )
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let seed = effective_seed(args.seed)?;
    let params = SynthParams {
        keys: args.keys,
        partitions: args.partitions,
        items_per_partition: args.items_per_partition,
        key_dist: KeyDist::parse(&args.distribution)?,
        value_dist: ValueDist::parse(&args.value_dist)?,
        seed,
    };
    let manifest = synth::write_to_dir(&params, &args.out)?;
    eprintln!(
        "wrote {} partitions x {} items over {} keys to {}",
        manifest.partitions,
        manifest.items_per_partition,
        manifest.true_counts.len(),
        args.out.display()
    );
    Ok(())
}
