//! `gcgsim` command-line entry point. Results go to stdout as JSON (CSV for
//! `gncm-dump`); errors go to stderr as `{"error": kind, "message": ...}`.
//! Exit codes: 1 runtime failure, 2 usage error, 3 gradient check failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use gcgsim::data::{self, Dataset, EisConfig, EisManifest, EisMode, GenConfig, Labeler, PairPlan, EIS_INTERPRETATION};
use gcgsim::eval::{self, encode_all};
use gcgsim::ged::{self, BeamWidth, GedResult, LabelPolicy};
use gcgsim::gradcheck::{check_model, check_primitives, GradCheckConfig};
use gcgsim::graph::{extract_partition, pad_pair, Graph, GraphJson, Vocab};
use gcgsim::metrics::RankScope;
use gcgsim::model::{check_parameters, AlphaMap, GcgSim, ModelConfig, SwapMode};
use gcgsim::train::{fit, TrainConfig, TrainReport};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("gradient check failed")]
    GradCheck,
}

type Result<T> = std::result::Result<T, CliError>;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser)]
#[command(name = "gcgsim", version, about = "Graph edit distance and neural graph similarity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit distance between two graph files.
    Ged(GedArgs),
    /// Aligned/unaligned substructures under the optimal (or heuristic) alignment.
    Partition(GedArgs),
    /// Generate a synthetic dataset, or label an external graph collection.
    Gen(GenArgs),
    /// Generate pairs for extra-instance swap probes.
    GenEis(GenEisArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Metric report for one split.
    Eval(EvalArgs),
    /// Top-k database graphs for a query.
    Rank(RankArgs),
    /// MSE change under representation swaps.
    SwapEval(SwapArgs),
    /// Per-layer GNCM node weights of one pair as CSV.
    GncmDump(GncmArgs),
    /// Finite-difference check of every primitive and the full model.
    Gradcheck(GradArgs),
}

#[derive(Args)]
struct Common {
    /// Random seed; falls back to GCGSIM_SEED, then the config file.
    #[arg(long, env = "GCGSIM_SEED", global = true)]
    seed: Option<u64>,
    /// JSON file with optional `model`, `train`, `gen` and `eis` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for pair-parallel work; output order does not change.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Brute,
    Astar,
    Beam,
    Hungarian,
    Min,
}

#[derive(Args)]
struct GedArgs {
    g1: PathBuf,
    g2: PathBuf,
    #[arg(long, value_enum, default_value = "astar")]
    method: Method,
    /// Beam width; omit for an unbounded (exact) beam.
    #[arg(long)]
    beam_width: Option<usize>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Label pairs of this graph collection instead of generating graphs.
    #[arg(long)]
    ingest: Option<PathBuf>,
    #[arg(long)]
    graphs: Option<usize>,
    #[arg(long)]
    min_nodes: Option<usize>,
    #[arg(long)]
    max_nodes: Option<usize>,
    #[arg(long)]
    labels: Option<usize>,
    #[arg(long)]
    edge_prob: Option<f64>,
    #[arg(long)]
    connected: bool,
    /// Largest padded size labeled exactly.
    #[arg(long)]
    exact_cap: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Sample this many training pairs instead of all of them.
    #[arg(long)]
    train_pairs: Option<usize>,
    /// Training graphs per validation/test query.
    #[arg(long)]
    database_size: Option<usize>,
    #[arg(long)]
    self_pairs: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EisModeArg {
    Aligned,
    Unaligned,
}

#[derive(Args)]
struct GenEisArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    mode: EisModeArg,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long)]
    labels: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlphaMapArg {
    Clamp,
    Affine,
}

#[derive(Args)]
struct ModelFlags {
    /// Comma-separated RGGC widths, e.g. 64,64,32,16.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    #[arg(long)]
    ntn_k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    no_gncm: bool,
    #[arg(long)]
    no_psgd: bool,
    /// Replace with probability 1 - beta.
    #[arg(long)]
    iir_flip: bool,
    #[arg(long, value_enum)]
    alpha_map: Option<AlphaMapArg>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the report here (it always goes to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Print per-epoch statistics to stderr as JSON lines.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Rank correlations over all pairs instead of averaging per query.
    #[arg(long)]
    global_rank: bool,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    model: PathBuf,
    /// Graph JSON file.
    #[arg(long)]
    query: PathBuf,
    /// Graph JSON array.
    #[arg(long)]
    database: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Add reference GED and similarity to each row.
    #[arg(long)]
    with_truth: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SwapModeArg {
    Iis,
    Eisa,
    Eisu,
}

#[derive(Args)]
struct SwapArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory (iis) or `gen-eis` output directory (eisa, eisu).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: SwapModeArg,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct GncmArgs {
    #[arg(long)]
    model: PathBuf,
    g1: PathBuf,
    g2: PathBuf,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, env = "GCGSIM_SEED", default_value_t = 0)]
    seed: u64,
}

/// Optional sections of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    gen: Option<GenConfig>,
    eis: Option<EisConfig>,
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = read(p)?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

/// Model file: label names plus configuration and parameters.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    vocab: Vec<String>,
    model: GcgSim,
}

fn load_model(path: &Path) -> Result<(GcgSim, Vocab)> {
    let f: ModelFile = serde_json::from_str(&read(path)?).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    f.model.config.validate().map_err(runtime)?;
    check_parameters(&f.model.config, &f.model.parameters).map_err(runtime)?;
    Ok((f.model, Vocab::from_names(f.vocab)))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn read_graph(path: &Path, vocab: &mut Vocab) -> Result<Graph> {
    let json: GraphJson = serde_json::from_str(&read(path)?).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Graph::from_json(&json, vocab).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

#[derive(Serialize)]
struct GedOutput {
    ged: u32,
    mapping: Vec<usize>,
    node_cost: u32,
    edge_cost: u32,
    exact: bool,
    method: String,
}

fn run_method(a: &GedArgs) -> Result<(gcgsim::graph::PaddedPair, GedResult)> {
    let mut vocab = Vocab::new();
    let g1 = read_graph(&a.g1, &mut vocab)?;
    let g2 = read_graph(&a.g2, &mut vocab)?;
    let pair = pad_pair(&g1, &g2);
    let width = a.beam_width.map_or(BeamWidth::Unbounded, BeamWidth::Finite);
    let result = match a.method {
        Method::Brute => ged::exact_ged_bruteforce(&pair),
        Method::Astar => ged::exact_ged_astar(&pair),
        Method::Beam => ged::beam_ged(&pair, width),
        Method::Hungarian => ged::hungarian_ged(&pair),
        Method::Min => ged::ground_truth_ged(
            &pair,
            LabelPolicy::MinHeuristics { beam_width: a.beam_width.unwrap_or(ged::DEFAULT_BEAM_WIDTH) },
        ),
    }
    .map_err(runtime)?;
    Ok((pair, result))
}

fn cmd_ged(a: &GedArgs) -> Result<()> {
    let (_, r) = run_method(a)?;
    print_json(&GedOutput {
        ged: r.value,
        mapping: r.alignment.mapping.clone(),
        node_cost: r.cost.node_cost,
        edge_cost: r.cost.edge_cost,
        exact: r.exact,
        method: r.method.to_string(),
    });
    Ok(())
}

fn cmd_partition(a: &GedArgs) -> Result<()> {
    let (pair, r) = run_method(a)?;
    print_json(&extract_partition(&pair, &r.alignment).map_err(runtime)?);
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let file = load_config(&a.common.config)?;
    let mut cfg = file.gen.unwrap_or_default();
    macro_rules! set {
        ($($flag:expr => $field:expr),*) => { $(if let Some(v) = $flag { $field = v; })* };
    }
    set!(a.common.seed => cfg.seed, a.graphs => cfg.num_graphs, a.min_nodes => cfg.min_nodes,
         a.max_nodes => cfg.max_nodes, a.labels => cfg.label_vocab, a.edge_prob => cfg.edge_prob,
         a.exact_cap => cfg.labeler.exact_cap, a.beam_width => cfg.labeler.beam_width);
    cfg.connected |= a.connected;
    cfg.pairs.self_pairs |= a.self_pairs;
    if a.train_pairs.is_some() {
        cfg.pairs.train_pairs = a.train_pairs;
    }
    if a.database_size.is_some() {
        cfg.pairs.database_size = a.database_size;
    }
    let ds = match &a.ingest {
        None => data::build_dataset(&cfg, a.common.jobs).map_err(|e| match e {
            data::DataError::Config(m) => CliError::Usage(m),
            e => runtime(e),
        })?,
        Some(path) => {
            let mut vocab = Vocab::new();
            let graphs = data::read_graphs(path, &mut vocab).map_err(runtime)?;
            let plan: PairPlan = cfg.pairs.clone();
            data::build_from_graphs(graphs, vocab, cfg.labeler, &plan, cfg.seed, None, a.common.jobs).map_err(runtime)?
        }
    };
    ds.write(&a.out).map_err(runtime)?;
    print_json(&ds.manifest.counts);
    Ok(())
}

fn cmd_gen_eis(a: &GenEisArgs) -> Result<()> {
    let file = load_config(&a.common.config)?;
    let mut cfg = file.eis.unwrap_or_default();
    if let Some(v) = a.labels {
        cfg.label_vocab = v;
    }
    let labeler = file.gen.map(|g| g.labeler).unwrap_or_default();
    let seed = a.common.seed.unwrap_or(0);
    let mode = match a.mode {
        EisModeArg::Aligned => EisMode::Aligned,
        EisModeArg::Unaligned => EisMode::Unaligned,
    };
    let sets = data::gen_eis_set(mode, a.count, &cfg, &labeler, seed).map_err(runtime)?;
    let vocab = data::generated_vocab(cfg.label_vocab);
    fs::create_dir_all(&a.out).map_err(|e| runtime(format!("{}: {e}", a.out.display())))?;
    data::write_eis(&a.out.join("eis.jsonl"), &sets, &vocab).map_err(runtime)?;
    let manifest = EisManifest {
        mode,
        count: a.count,
        seed,
        config: cfg,
        labeler,
        vocab: vocab.names().to_vec(),
        interpretation: EIS_INTERPRETATION.to_string(),
    };
    data::write_json(&a.out.join("manifest.json"), &manifest).map_err(runtime)?;
    print_json(&manifest);
    Ok(())
}

fn model_config(file: Option<ModelConfig>, flags: &ModelFlags, seed: Option<u64>, vocab: usize) -> ModelConfig {
    let mut cfg = file.unwrap_or_default();
    cfg.label_vocab_size = vocab;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(c) = &flags.channels {
        cfg.channels = c.clone();
    }
    if let Some(k) = flags.ntn_k {
        cfg.ntn_k = k;
    }
    if let Some(l) = flags.lambda {
        cfg.lambda = l;
    }
    if let Some(b) = flags.beta {
        cfg.beta = b;
    }
    if let Some(m) = flags.alpha_map {
        cfg.alpha_map = match m {
            AlphaMapArg::Clamp => AlphaMap::Clamp,
            AlphaMapArg::Affine => AlphaMap::Affine,
        };
    }
    cfg.use_gncm &= !flags.no_gncm;
    cfg.use_psgd &= !flags.no_psgd;
    cfg.iir_flip |= flags.iir_flip;
    cfg
}

#[derive(Serialize)]
struct TrainOutput {
    model_config: ModelConfig,
    training: TrainReport,
    val: Option<eval::SplitReport>,
    test: Option<eval::SplitReport>,
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let file = load_config(&a.common.config)?;
    let ds = Dataset::read(&a.data).map_err(runtime)?;
    let mcfg = model_config(file.model, &a.model, a.common.seed, ds.vocab.len().max(1));
    mcfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut tcfg = file.train.unwrap_or_default();
    if let Some(s) = a.common.seed {
        tcfg.seed = s;
    }
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        tcfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        tcfg.batch_size = b;
    }
    tcfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let mut model = GcgSim::new(mcfg).map_err(runtime)?;
    let graphs = encode_all(&model, &ds.graphs).map_err(runtime)?;
    let train = ds.examples(&ds.train).map_err(runtime)?;
    let val = ds.examples(&ds.val).map_err(runtime)?;
    let verbose = a.verbose;
    let report = fit(&mut model, &graphs, &train, &val, &tcfg, |s| {
        if verbose {
            eprintln!("{}", serde_json::to_string(s).expect("serializable"));
        }
    })
    .map_err(runtime)?;
    let file = ModelFile { vocab: ds.vocab.names().to_vec(), model };
    write(&a.out, &serde_json::to_string(&file).expect("serializable"))?;

    let split_report = |name: &str, records: &[data::PairRecord]| {
        if records.is_empty() {
            return Ok(None);
        }
        eval::evaluate_split(&file.model, &ds, name, RankScope::PerQuery, a.common.jobs).map(Some).map_err(runtime)
    };
    let out = TrainOutput {
        model_config: file.model.config.clone(),
        training: report,
        val: split_report("val", &ds.val)?,
        test: split_report("test", &ds.test)?,
    };
    let text = serde_json::to_string_pretty(&out).expect("serializable");
    if let Some(p) = &a.report {
        write(p, &(text.clone() + "\n"))?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (model, _) = load_model(&a.model)?;
    let ds = Dataset::read(&a.data).map_err(runtime)?;
    if ds.split(&a.split).is_none() {
        return Err(CliError::Usage(format!("unknown split `{}` (expected train, val or test)", a.split)));
    }
    let scope = if a.global_rank { RankScope::Global } else { RankScope::PerQuery };
    print_json(&eval::evaluate_split(&model, &ds, &a.split, scope, a.common.jobs).map_err(runtime)?);
    Ok(())
}

fn cmd_rank(a: &RankArgs) -> Result<()> {
    let (model, mut vocab) = load_model(&a.model)?;
    let query = read_graph(&a.query, &mut vocab)?;
    let database = data::read_graphs(&a.database, &mut vocab).map_err(runtime)?;
    let labeler = Labeler::default();
    let rows = eval::rank(&model, &query, &database, a.k, a.with_truth.then_some(&labeler)).map_err(runtime)?;
    print_json(&rows);
    Ok(())
}

fn cmd_swap(a: &SwapArgs) -> Result<()> {
    let (model, mut vocab) = load_model(&a.model)?;
    let report = match a.mode {
        SwapModeArg::Iis => {
            let ds = Dataset::read(&a.data).map_err(runtime)?;
            let records = ds.split(&a.split).ok_or_else(|| CliError::Usage(format!("unknown split `{}`", a.split)))?;
            let graphs = encode_all(&model, &ds.graphs).map_err(runtime)?;
            let examples = ds.examples(records).map_err(runtime)?;
            eval::swap_eval_iis(&model, &graphs, &examples).map_err(runtime)?
        }
        SwapModeArg::Eisa | SwapModeArg::Eisu => {
            let mode = if matches!(a.mode, SwapModeArg::Eisa) { SwapMode::Eisa } else { SwapMode::Eisu };
            let sets = data::read_eis(&a.data.join("eis.jsonl"), &mut vocab).map_err(runtime)?;
            eval::swap_eval_eis(&model, &sets, mode).map_err(runtime)?
        }
    };
    print_json(&report);
    Ok(())
}

fn cmd_gncm(a: &GncmArgs) -> Result<()> {
    let (model, mut vocab) = load_model(&a.model)?;
    let g1 = read_graph(&a.g1, &mut vocab)?;
    let g2 = read_graph(&a.g2, &mut vocab)?;
    print!("{}", eval::gncm_csv(&model, &g1, &g2).map_err(runtime)?);
    Ok(())
}

#[derive(Serialize)]
struct GradOutput {
    passed: bool,
    reports: Vec<gcgsim::gradcheck::GradCheckReport>,
}

fn cmd_gradcheck(a: &GradArgs) -> Result<()> {
    let cfg = GradCheckConfig::default();
    let mut reports = check_primitives(a.instances, a.seed, &cfg).map_err(runtime)?;
    reports.push(check_model(a.instances, a.seed, &cfg).map_err(runtime)?);
    let passed = reports.iter().all(|r| r.passed);
    print_json(&GradOutput { passed, reports });
    if passed {
        Ok(())
    } else {
        Err(CliError::GradCheck)
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ged(a) => cmd_ged(a),
        Command::Partition(a) => cmd_partition(a),
        Command::Gen(a) => cmd_gen(a),
        Command::GenEis(a) => cmd_gen_eis(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Rank(a) => cmd_rank(a),
        Command::SwapEval(a) => cmd_swap(a),
        Command::GncmDump(a) => cmd_gncm(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Usage(_)) => {
            report_error("usage", &e.to_string());
            ExitCode::from(2)
        }
        Err(e @ CliError::Runtime(_)) => {
            report_error("runtime", &e.to_string());
            ExitCode::from(1)
        }
        Err(e @ CliError::GradCheck) => {
            report_error("gradcheck", &e.to_string());
            ExitCode::from(3)
        }
    }
}
