//! Command-line front end for the synthetic face-recognition harness.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input, 3 numeric
//! divergence.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use budgetface::archflops::{expand_under_budget, human_flops, ArchSpec, BudgetQuery, R100_ARCH};
use budgetface::harness::experiment::{embed_framesets, test_framesets};
use budgetface::harness::synthetic::LabeledSet;
use budgetface::harness::train::{embeddings_of, write_metrics_csv};
use budgetface::harness::{
    config::PairingMode, gen_identities, run_experiment, train_model, Checkpoint, ExperimentConfig,
    HarnessError, TrainOutcome,
};
use budgetface::metrics::{fpr_resolution, label_of, roc_curve, tpr_at_fpr, verification_pairs};
use budgetface::numeric::{
    format_real, normalize_slice, read_embeddings_csv, write_embeddings_csv,
};
use budgetface::quality::{aggregate, read_framesets_csv, write_framesets_csv, AggregationPolicy};

#[derive(Parser, Debug)]
#[command(
    name = "budgetface",
    version,
    about = "Margin losses, quality aggregation and flops budgeting on synthetic identities"
)]
struct Cli {
    /// Experiment config (TOML). Defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `[data] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic inputs: train/test samples and test frame sets.
    Gen,
    /// Train one model per configured loss and export embeddings.
    Train,
    /// Collapse frame sets into one embedding each.
    Aggregate {
        /// Frame-set CSV (`set_id,frame_idx,quality,dim0..`).
        input: PathBuf,
        #[arg(long, default_value = "qan_pp")]
        policy: String,
    },
    /// TPR at fixed FPR for an embedding CSV; labels come from the id prefix before `#`.
    Eval {
        input: PathBuf,
        /// Repeatable; defaults to the `[eval]` targets.
        #[arg(long)]
        fpr: Vec<f64>,
        #[arg(long, value_enum)]
        pairing: Option<PairingArg>,
        #[arg(long)]
        pairs: Option<usize>,
        /// Also write the full ROC curve.
        #[arg(long)]
        roc: bool,
    },
    /// Print total and per-stage multiply-adds of an architecture file.
    Flops {
        /// Architecture file, or `r100` for the bundled network.
        arch: String,
    },
    /// List depth/width expansions that fit a multiply-add budget.
    Search {
        arch: String,
        #[arg(long)]
        budget: f64,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        depth_grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        width_grid: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        channel_round: u64,
    },
    /// Full experiment: train every loss and write the TPR report.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PairingArg {
    All,
    Sampled,
}

#[derive(Debug)]
enum CliError {
    Invalid(String),
    Diverged(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid input: {m}"),
            CliError::Diverged(m) => write!(f, "divergence: {m}"),
            CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::DivergedLoss { .. } => CliError::Diverged(e.to_string()),
            ref v if v.is_validation() => CliError::Invalid(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

/// Errors raised while parsing user-supplied files or arguments.
fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cfg.output.dir.clone();
    match &cli.command {
        Command::Gen => gen(&cfg, &out),
        Command::Train => train(&cfg, &out),
        Command::Aggregate { input, policy } => aggregate_cmd(input, policy, &out),
        Command::Eval {
            input,
            fpr,
            pairing,
            pairs,
            roc,
        } => eval(&cfg, input, fpr, *pairing, *pairs, *roc, &out),
        Command::Flops { arch } => flops(arch),
        Command::Search {
            arch,
            budget,
            depth_grid,
            width_grid,
            channel_round,
        } => search(arch, *budget, depth_grid, width_grid, *channel_round),
        Command::Report => report(&cfg, &out),
    }
}

fn write_inputs(path: &Path, set: &LabeledSet) -> Result<()> {
    let ids: Vec<String> = (0..set.len())
        .map(|i| format!("{}#{i}", set.identity_of(i)))
        .collect();
    let rows: Vec<(String, &[f64])> = ids
        .into_iter()
        .zip(set.inputs.rows())
        .map(|(id, r)| {
            (
                id,
                r.to_slice()
                    .expect("rows of a standard-layout matrix are contiguous"),
            )
        })
        .collect();
    write_embeddings_csv(create(path)?, set.inputs.ncols(), rows)
        .map_err(|e| CliError::Failed(e.to_string()))
}

fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = gen_identities(&cfg.data)?;
    write_inputs(&out.join("train_inputs.csv"), &data.train)?;
    write_inputs(&out.join("test_inputs.csv"), &data.test)?;
    let sets = test_framesets(cfg, &data)?;
    let mut w = create(&out.join("test_frames.csv"))?;
    writeln!(w, "set_id,frame_idx,corruption")?;
    for s in &sets {
        for (k, c) in s.corruption.iter().enumerate() {
            writeln!(w, "{},{k},{c:?}", s.set_id)?;
        }
    }
    w.flush()?;
    // frames in input space, reusing the embedding CSV layout with `set_id#frame` ids
    let ids: Vec<String> = sets
        .iter()
        .flat_map(|s| (0..s.inputs.nrows()).map(move |k| format!("{}#{k}", s.set_id)))
        .collect();
    let rows: Vec<(String, &[f64])> = ids
        .into_iter()
        .zip(sets.iter().flat_map(|s| s.inputs.rows()))
        .map(|(id, r)| (id, r.to_slice().expect("contiguous row")))
        .collect();
    write_embeddings_csv(
        create(&out.join("test_frame_inputs.csv"))?,
        cfg.data.input_dim,
        rows,
    )
    .map_err(|e| CliError::Failed(e.to_string()))?;
    println!(
        "wrote {} train samples, {} test samples and {} frame sets to {}",
        data.train.len(),
        data.test.len(),
        sets.len(),
        out.display()
    );
    Ok(())
}

fn write_run(
    cfg: &ExperimentConfig,
    dir: &Path,
    outcome: &TrainOutcome,
    ck: &Checkpoint,
) -> Result<()> {
    let mut w = create(&dir.join("metrics.csv"))?;
    write_metrics_csv(&mut w, &outcome.log)?;
    w.flush()?;
    ck.save(&dir.join("checkpoint.json"))?;

    let data = gen_identities(&cfg.data)?;
    let emb = embeddings_of(&outcome.net, data.test.inputs.view())?;
    let rows: Vec<(String, &[f64])> = emb
        .iter()
        .enumerate()
        .map(|(i, e)| (format!("{}#{i}", data.test.identity_of(i)), e.as_slice()))
        .collect();
    write_embeddings_csv(
        create(&dir.join("test_embeddings.csv"))?,
        cfg.data.embed_dim,
        rows,
    )
    .map_err(|e| CliError::Failed(e.to_string()))?;

    let sets = embed_framesets(&outcome.net, &test_framesets(cfg, &data)?)?;
    write_framesets_csv(create(&dir.join("test_framesets.csv"))?, &sets)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = gen_identities(&cfg.data)?;
    let frames = test_framesets(cfg, &data)?;
    let mut adabn = vec![data.test.inputs.view()];
    adabn.extend(frames.iter().map(|s| s.inputs.view()));
    let hash = cfg.hash();
    for &kind in &cfg.loss.loss {
        let margin = cfg.loss.margin_config(kind);
        let outcome = train_model(cfg, &margin, &data, &adabn)?;
        let ck = Checkpoint {
            config_hash: hash.clone(),
            loss: kind,
            iteration: outcome.iterations,
            net: outcome.net.clone(),
        };
        let dir = out.join(kind.name());
        write_run(cfg, &dir, &outcome, &ck)?;
        let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
        println!(
            "{}: {} iterations, final loss {last:.4}, outputs in {}",
            kind.name(),
            outcome.iterations,
            dir.display()
        );
    }
    Ok(())
}

fn aggregate_cmd(input: &Path, policy: &str, out: &Path) -> Result<()> {
    let policy: AggregationPolicy = policy.parse().map_err(invalid)?;
    let sets = read_framesets_csv(open(input)?).map_err(invalid)?;
    let agg = sets
        .iter()
        .map(|s| aggregate(s, policy))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(invalid)?;
    let dim = agg.first().map_or(0, |e| e.dim());
    let path = out.join(format!("aggregated_{}.csv", policy.name()));
    let rows: Vec<(String, &[f64])> = sets
        .iter()
        .zip(&agg)
        .map(|(s, e)| (s.set_id.clone(), e.as_slice()))
        .collect();
    write_embeddings_csv(create(&path)?, dim, rows).map_err(|e| CliError::Failed(e.to_string()))?;
    println!(
        "{} sets aggregated with {} into {}",
        sets.len(),
        policy.name(),
        path.display()
    );
    Ok(())
}

fn eval(
    cfg: &ExperimentConfig,
    input: &Path,
    fpr: &[f64],
    pairing: Option<PairingArg>,
    pairs: Option<usize>,
    roc: bool,
    out: &Path,
) -> Result<()> {
    let rows = read_embeddings_csv(open(input)?).map_err(invalid)?;
    let embeddings = rows
        .iter()
        .map(|(_, v)| normalize_slice(v))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(invalid)?;
    let labels: Vec<&str> = rows.iter().map(|(id, _)| label_of(id)).collect();
    let mut section = cfg.eval.clone();
    match pairing {
        Some(PairingArg::All) => section.pairing = PairingMode::All,
        Some(PairingArg::Sampled) => section.pairing = PairingMode::Sampled,
        None => {}
    }
    if let Some(k) = pairs {
        section.pairs = k;
    }
    let pairing = section.pairing(cfg.data.seed);
    let scores = verification_pairs(&embeddings, &labels, pairing).map_err(invalid)?;
    let targets = if fpr.is_empty() {
        cfg.eval.fpr_targets.clone()
    } else {
        fpr.to_vec()
    };

    let path = out.join("eval.csv");
    let mut w = create(&path)?;
    writeln!(w, "fpr_target,threshold,tpr")?;
    for &target in &targets {
        if target > 0.0 && target < fpr_resolution(scores.impostor.len()) {
            log::warn!(
                "fpr target {target} is below the resolution of {} impostor pairs; the result is the zero-false-accept point",
                scores.impostor.len()
            );
        }
        let r = tpr_at_fpr(&scores, target).map_err(invalid)?;
        writeln!(
            w,
            "{target},{},{}",
            format_real(r.threshold),
            format_real(r.tpr)
        )?;
        println!(
            "fpr {target}: tpr {:.4} at threshold {:.6}",
            r.tpr, r.threshold
        );
    }
    w.flush()?;
    if roc {
        let mut w = create(&out.join("roc.csv"))?;
        writeln!(w, "threshold,tpr,fpr")?;
        for p in roc_curve(&scores).map_err(invalid)? {
            writeln!(
                w,
                "{},{},{}",
                format_real(p.threshold),
                format_real(p.tpr),
                format_real(p.fpr)
            )?;
        }
        w.flush()?;
    }
    Ok(())
}

fn load_arch(arch: &str) -> Result<ArchSpec> {
    let text = if arch == "r100" {
        R100_ARCH.to_string()
    } else {
        fs::read_to_string(arch).map_err(|e| invalid(format!("{arch}: {e}")))?
    };
    text.parse().map_err(invalid)
}

fn flops(arch: &str) -> Result<()> {
    let spec = load_arch(arch)?;
    let report = spec.report().map_err(invalid)?;
    println!(
        "{:<16} {:<12} {:>16} {:>10}  output",
        "name", "kind", "ops", ""
    );
    for e in &report.entries {
        println!(
            "{:<16} {:<12} {:>16} {:>10}  {}",
            e.name,
            e.kind,
            e.flops,
            human_flops(e.flops),
            e.output
        );
    }
    println!(
        "{:<16} {:<12} {:>16} {:>10}  {}",
        "total",
        "",
        report.total,
        human_flops(report.total),
        report.output
    );
    Ok(())
}

fn search(arch: &str, budget: f64, depth: &[f64], width: &[f64], channel_round: u64) -> Result<()> {
    if !(budget.is_finite() && budget >= 1.0) {
        return Err(invalid(format!("budget {budget} must be at least one op")));
    }
    let spec = load_arch(arch)?;
    let query = BudgetQuery {
        channel_round,
        ..BudgetQuery::new(budget as u64, depth.to_vec(), width.to_vec())
    };
    let found = expand_under_budget(&spec, &query).map_err(invalid)?;
    println!(
        "{:>6} {:>6} {:<24} {:<28} {:>10}",
        "depth", "width", "blocks", "channels", "ops"
    );
    for c in &found {
        println!(
            "{:>6} {:>6} {:<24} {:<28} {:>10}",
            c.depth_mult,
            c.width_mult,
            format!("{:?}", c.repeats()),
            format!("{:?}", c.channels()),
            human_flops(c.flops)
        );
    }
    Ok(())
}

fn report(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let result = run_experiment(cfg)?;
    let path = out.join("report.csv");
    let mut w = create(&path)?;
    w.write_all(result.csv().as_bytes())?;
    w.flush()?;
    for run in &result.runs {
        write_run(
            cfg,
            &out.join(run.loss.name()),
            &run.outcome,
            &run.checkpoint,
        )?;
    }
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    print!("{}", result.csv());
    Ok(())
}
