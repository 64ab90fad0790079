use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand};
use smyrf::analysis::{analyze_maps, compare_with_output, scaling_study, CompareOptions, InstanceShape, ScalingOptions};
use smyrf::attention::dense_attention_counted;
use smyrf::container::{decode_instance, write_atomic, write_container, write_output_container};
use smyrf::oracle::{brute_force_biclustering, generate_compliant_instance, AssumptionSpec};
use smyrf::report::{DenseReport, OracleReport, ReportDocument};
use smyrf::{AttentionInstance, OpCounter, Rng, SmyrfConfig, SmyrfError, TransformKind};

const SEED_RANGE: std::ops::RangeInclusive<i64> = 0..=i64::MAX;

#[derive(Parser)]
#[command(name = "smyrf", version, about = "Clustered approximate attention with exact references")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run clustered attention and compare it with dense attention.
    Approx(ApproxArgs),
    /// Run dense attention.
    Dense(DenseArgs),
    /// Find the optimal balanced clustering by exhaustive search.
    Oracle(OracleArgs),
    /// Singular-value decay and sparsity of the attention map.
    Analyze(AnalyzeArgs),
    /// Time dense and clustered attention over several sequence lengths.
    Bench(BenchArgs),
    /// Write a synthetic Q/K/V container.
    Gen(GenArgs),
}

#[derive(Args)]
struct ReportOut {
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("size").required(true).args(["clusters", "queries_per_cluster"])))]
struct ApproxArgs {
    #[arg(long)]
    input: PathBuf,
    /// Number of clusters L.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    clusters: Option<u32>,
    /// Target queries per cluster C; L = ⌈N_q / C⌉.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    queries_per_cluster: Option<u32>,
    /// Hashing rounds H.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    rounds: u32,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(i64).range(SEED_RANGE))]
    seed: i64,
    #[arg(long, default_value = "smyrf", value_parser = ["smyrf", "l2lsh", "xbox", "h2lsh"])]
    transform: String,
    /// Fail instead of padding when L does not divide N_q and N_k.
    #[arg(long)]
    strict: bool,
    /// Also compute the attention-map error of the first round.
    #[arg(long)]
    materialize_maps: bool,
    /// Sparsity thresholds, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = smyrf::analysis::DEFAULT_THRESHOLDS)]
    thresholds: Vec<f64>,
    /// k for the top-k recall metric.
    #[arg(long, default_value_t = smyrf::analysis::DEFAULT_RECALL_K)]
    recall_k: usize,
    /// Write the N_q×d_v output as an output container.
    #[arg(long)]
    emit_output: Option<PathBuf>,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct DenseArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    emit_output: Option<PathBuf>,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    clusters: u32,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = smyrf::analysis::DEFAULT_THRESHOLDS)]
    thresholds: Vec<f64>,
    /// Divide the pre-softmax curve by its largest singular value.
    #[arg(long)]
    normalize: bool,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [512, 1024, 2048, 4096, 8192])]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = smyrf::clustering::DEFAULT_QUERIES_PER_CLUSTER)]
    queries_per_cluster: usize,
    #[arg(long, default_value_t = smyrf::clustering::DEFAULT_ROUNDS)]
    rounds: usize,
    #[arg(long, default_value_t = smyrf::analysis::MIN_REPETITIONS)]
    repetitions: usize,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(i64).range(SEED_RANGE))]
    seed: i64,
    #[command(flatten)]
    report: ReportOut,
}

#[derive(Args)]
#[command(group(ArgGroup::new("kind").required(true).args(["random", "blocks"])))]
struct GenArgs {
    /// Gaussian Q, K and V.
    #[arg(long)]
    random: bool,
    /// Block-structured instance with this many blocks.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    blocks: Option<u32>,
    /// Standard deviation of Q and K entries for --random.
    #[arg(long, default_value_t = 1.0, requires = "random")]
    norm_scale: f64,
    /// Bound on light/heavy weight ratio for --blocks.
    #[arg(long, default_value_t = 1e-12, requires = "blocks")]
    logit_gap: f64,
    #[arg(long, default_value_t = 64, requires = "random")]
    queries: usize,
    /// Defaults to the number of queries.
    #[arg(long, requires = "random")]
    keys: Option<usize>,
    #[arg(long, default_value_t = 8, requires = "blocks")]
    queries_per_block: usize,
    #[arg(long, default_value_t = 8, requires = "blocks")]
    keys_per_block: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Defaults to the key dimension.
    #[arg(long)]
    value_dim: Option<usize>,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(i64).range(SEED_RANGE))]
    seed: i64,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &SmyrfError) -> u8 {
    match err {
        SmyrfError::Usage(_) | SmyrfError::Shape(_) | SmyrfError::Invariant(_) | SmyrfError::Domain(_) => 2,
        SmyrfError::Format(_) | SmyrfError::Length { .. } | SmyrfError::Data(_) => 3,
        SmyrfError::Capacity { .. } => 4,
        SmyrfError::Io(_) => 1,
    }
}

fn configure_threads() -> smyrf::Result<()> {
    let Ok(raw) = std::env::var("SMYRF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| SmyrfError::Usage(format!("SMYRF_THREADS must be a non-negative integer, got {raw:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| SmyrfError::Usage(format!("cannot configure worker threads: {e}")))?;
    }
    Ok(())
}

fn load(path: &Path) -> smyrf::Result<(Vec<u8>, AttentionInstance)> {
    let bytes = std::fs::read(path)?;
    let inst = decode_instance(&bytes)?;
    Ok((bytes, inst))
}

/// Report text and where it goes; written only after all other work succeeded.
struct Emit {
    text: String,
    out: Option<PathBuf>,
}

fn emit(doc: &ReportDocument, out: &ReportOut) -> smyrf::Result<Option<Emit>> {
    Ok(Some(Emit {
        text: doc.to_toml()?,
        out: out.out.clone(),
    }))
}

fn approx(args: &ApproxArgs) -> smyrf::Result<Option<Emit>> {
    let (bytes, inst) = load(&args.input)?;
    let seed = args.seed as u64;
    let rounds = args.rounds as usize;
    let cfg = match (args.clusters, args.queries_per_cluster) {
        (Some(l), _) => SmyrfConfig::new(l as usize, rounds, seed),
        (None, Some(c)) => SmyrfConfig::with_cluster_size(c as usize, inst.n_queries(), rounds, seed)?,
        (None, None) => unreachable!("clap enforces one of --clusters and --queries-per-cluster"),
    }
    .transform(args.transform.parse::<TransformKind>()?)
    .strict(args.strict);
    let opts = CompareOptions {
        materialize_maps: args.materialize_maps,
        recall_k: args.recall_k,
        thresholds: args.thresholds.clone(),
        ..CompareOptions::default()
    };
    let (report, output) = compare_with_output(&inst, &cfg, &opts)?;
    if let Some(path) = &args.emit_output {
        write_output_container(path, &output)?;
    }
    let mut doc = ReportDocument::new(seed).with_input(&bytes);
    doc.approximation = Some(report);
    emit(&doc, &args.report)
}

fn dense(args: &DenseArgs) -> smyrf::Result<Option<Emit>> {
    let (bytes, inst) = load(&args.input)?;
    let counter = OpCounter::new();
    let start = Instant::now();
    let output = dense_attention_counted(&inst, &counter);
    let seconds = start.elapsed().as_secs_f64();
    if let Some(path) = &args.emit_output {
        write_output_container(path, &output)?;
    }
    let mut doc = ReportDocument::new(0).with_input(&bytes);
    doc.dense = Some(DenseReport {
        instance_shape: InstanceShape::from(&inst),
        operations: counter.snapshot(),
        seconds,
    });
    emit(&doc, &args.report)
}

fn oracle(args: &OracleArgs) -> smyrf::Result<Option<Emit>> {
    let (bytes, inst) = load(&args.input)?;
    let sol = brute_force_biclustering(&inst, args.clusters as usize)?;
    let mut doc = ReportDocument::new(0).with_input(&bytes);
    doc.oracle = Some(OracleReport {
        num_clusters: sol.assignment.num_clusters(),
        objective: sol.objective,
        enumerated_count: u64::try_from(sol.enumerated_count).unwrap_or(u64::MAX),
        query_clusters: sol.assignment.query_cluster().to_vec(),
        key_clusters: sol.assignment.key_cluster().to_vec(),
    });
    emit(&doc, &args.report)
}

fn analyze(args: &AnalyzeArgs) -> smyrf::Result<Option<Emit>> {
    let (bytes, inst) = load(&args.input)?;
    let mut doc = ReportDocument::new(0).with_input(&bytes);
    doc.analysis = Some(analyze_maps(&inst, &args.thresholds, args.normalize)?);
    emit(&doc, &args.report)
}

fn bench(args: &BenchArgs) -> smyrf::Result<Option<Emit>> {
    let study = scaling_study(&ScalingOptions {
        lengths: args.lengths.clone(),
        dim: args.dim,
        queries_per_cluster: args.queries_per_cluster,
        num_rounds: args.rounds,
        seed: args.seed as u64,
        repetitions: args.repetitions,
    })?;
    let mut doc = ReportDocument::new(args.seed as u64);
    doc.scaling = Some(study);
    emit(&doc, &args.report)
}

fn gen(args: &GenArgs) -> smyrf::Result<Option<Emit>> {
    let mut rng = Rng::new(args.seed as u64);
    let inst = if let Some(blocks) = args.blocks {
        let spec = AssumptionSpec {
            blocks: blocks as usize,
            queries_per_block: args.queries_per_block,
            keys_per_block: args.keys_per_block,
            dim: args.dim,
            value_dim: args.value_dim.unwrap_or(args.dim),
            heavy_count_t: args.keys_per_block,
            logit_gap: args.logit_gap,
            ..AssumptionSpec::default()
        };
        generate_compliant_instance(&spec, &mut rng)?
    } else {
        if !(args.norm_scale.is_finite() && args.norm_scale > 0.0) {
            return Err(SmyrfError::Usage(format!("--norm-scale must be positive, got {}", args.norm_scale)));
        }
        let keys = args.keys.unwrap_or(args.queries);
        let value_dim = args.value_dim.unwrap_or(args.dim);
        if args.queries == 0 || keys == 0 || args.dim == 0 || value_dim == 0 {
            return Err(SmyrfError::Usage("sizes must be positive".into()));
        }
        let q = rng.gaussian_matrix(args.queries, args.dim, args.norm_scale);
        let k = rng.gaussian_matrix(keys, args.dim, args.norm_scale);
        let v = rng.gaussian_matrix(keys, value_dim, 1.0);
        AttentionInstance::new(q, k, v)?
    };
    write_container(&args.out, &inst)?;
    Ok(None)
}

fn run(cli: &Cli) -> smyrf::Result<()> {
    configure_threads()?;
    let result = match &cli.command {
        Command::Approx(a) => approx(a),
        Command::Dense(a) => dense(a),
        Command::Oracle(a) => oracle(a),
        Command::Analyze(a) => analyze(a),
        Command::Bench(a) => bench(a),
        Command::Gen(a) => gen(a),
    }?;
    if let Some(Emit { text, out }) = result {
        match out {
            Some(path) => write_atomic(path, text.as_bytes())?,
            None => print!("{text}"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("smyrf: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
