//! Command-line front end. Exit codes: 0 success, 1 usage or configuration
//! error, 2 data or file error, 3 numeric failure.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attack::{run_attack_experiment, AttackSpec};
use crate::checkpoint;
use crate::data::{load_cifar10, load_mnist, synthetic, Batch, Dataset, EvalSet, SyntheticConfig};
use crate::error::{Error, Result};
use crate::grid::{expand_grid, manifest_argv, read_manifest, write_runs, GridConfig};
use crate::nn::{preset, Activation, InitRule, InitSpec, Network};
use crate::prune::{
    emit_colormap, measure_unit_pruning, remove_low_nnz_units, shrink, PruneScope, UnitRef,
};
use crate::scorers::param::{
    comparison_row, prune_and_measure, ParamScorer, ParamScorerKind, COMPARISON_CSV_HEADER,
};
use crate::scorers::unit::{unit_scores_csv, UnitScorerKind, UNIT_SCORE_CSV_HEADER};
use crate::train::{
    evaluate, train, EvalMetrics, LogRecord, PruneMode, PruneSchedule, TrainConfig, TrainOptions,
};

#[derive(Debug, Parser)]
#[command(
    name = "prunelab",
    version,
    about = "Train, score, prune and shrink small convolutional classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network, optionally with a pruning schedule.
    Train(TrainCmd),
    /// Periodically measure the loss change of pruning with several scorers.
    CompareScorers(CompareCmd),
    /// Learning-rate attack on one unit with a paired control run.
    Attack(AttackCmd),
    /// Physically remove dead units from a masked checkpoint.
    Shrink(ShrinkCmd),
    /// Write a layer's normalized weight magnitudes as CSV and PGM.
    Colormap(ColormapCmd),
    /// Expand a grid config into run directories with manifests and scripts.
    Expand(ExpandCmd),
    /// Execute one expanded run.
    RunManifest(RunManifestCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Mnist,
    Cifar,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Param,
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    InvSqrtFanIn,
    InvFanIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScopeArg {
    Global,
    PerLayer,
}

impl From<ScopeArg> for PruneScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Global => PruneScope::Global,
            ScopeArg::PerLayer => PruneScope::PerLayer,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct ModelArgs {
    /// mnist-fc32, mnist-fc64, mnist-fc256, cifar or tiny.
    #[arg(long, default_value = "mnist-fc64")]
    preset: String,
    /// Hidden width of the MNIST presets.
    #[arg(long)]
    fc1_width: Option<usize>,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    activation: ActivationArg,
    #[arg(long, value_enum, default_value_t = InitArg::InvSqrtFanIn)]
    init_rule: InitArg,
    /// Initialization seed; defaults to --seed.
    #[arg(long)]
    init_seed: Option<u64>,
    /// Start from this checkpoint instead of a fresh network.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    #[arg(long, value_enum, default_value_t = DatasetKind::Mnist)]
    dataset: DatasetKind,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Training samples of the synthetic dataset.
    #[arg(long, default_value_t = 2000)]
    synthetic_n: usize,
    /// Bump height over pixel-noise σ for the synthetic dataset.
    #[arg(long, default_value_t = 6.0)]
    synthetic_separation: f64,
    /// Largest per-sample shift of the synthetic class bumps, in pixels.
    #[arg(long, default_value_t = 0.0)]
    synthetic_jitter: f64,
    /// Use only the first N training samples.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    eval_size: usize,
    /// Split the evaluation set is drawn from.
    #[arg(long, value_enum)]
    score_split: Option<Split>,
}

#[derive(Debug, Clone, Args)]
struct OptimArgs {
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

impl OptimArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            log_every: self.log_every,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// table2_2, table4_2, or a file of `epoch fraction` lines.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long, value_enum, default_value_t = Mode::Param)]
    mode: Mode,
    /// Scorer used by the schedule (default magnitude, or mrs in unit mode).
    #[arg(long)]
    scorer: Option<String>,
    #[arg(long, value_enum, default_value_t = ScopeArg::Global)]
    scope: ScopeArg,
    /// Remove units without folding their mean output into the next layer.
    #[arg(long)]
    no_bias_propagation: bool,
    /// After training, remove units with at most this fraction of live
    /// incoming or outgoing weights.
    #[arg(long)]
    f_nz: Option<f64>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompareCmd {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Comma-separated scorer names.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "magnitude,taylor1,taylor2,hessian,random"
    )]
    kinds: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.4,0.6")]
    fractions: Vec<f64>,
    /// Compare unit scorers (mrp, mrs, normL1, normL2sq, random) instead.
    #[arg(long)]
    units: bool,
    #[arg(long, value_enum, default_value_t = ScopeArg::Global)]
    scope: ScopeArg,
    #[arg(long)]
    no_bias_propagation: bool,
    #[arg(long, default_value = "runs/compare")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AttackCmd {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Parametered-layer index of the target unit.
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    unit: usize,
    #[arg(long, default_value_t = 50)]
    start: usize,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 10)]
    interval: usize,
    #[arg(long, default_value_t = 100.0)]
    multiplier: f64,
    #[arg(long, default_value_t = 10)]
    metric_every: usize,
    #[arg(long, default_value = "runs/attack")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ShrinkCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ColormapCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Parametered-layer index.
    #[arg(long)]
    layer: usize,
    /// Output prefix; `.csv` and `.pgm` are appended.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExpandCmd {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Executable named in the generated scripts.
    #[arg(long)]
    exe: Option<String>,
}

#[derive(Debug, Args)]
struct RunManifestCmd {
    manifest: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) | Error::Json(_) => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command, true) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, allow_manifest: bool) -> Result<()> {
    match cmd {
        Command::Train(c) => cmd_train(c),
        Command::CompareScorers(c) => cmd_compare(c),
        Command::Attack(c) => cmd_attack(c),
        Command::Shrink(c) => cmd_shrink(c),
        Command::Colormap(c) => cmd_colormap(c),
        Command::Expand(c) => cmd_expand(c),
        Command::RunManifest(c) if allow_manifest => cmd_run_manifest(c),
        Command::RunManifest(_) => Err(Error::invalid("a manifest cannot run another manifest")),
    }
}

fn build_network(model: &ModelArgs, seed: u64) -> Result<Network> {
    if let Some(path) = &model.checkpoint {
        return checkpoint::load(path);
    }
    let act = match model.activation {
        ActivationArg::Relu => Activation::Relu,
        ActivationArg::Tanh => Activation::Tanh,
    };
    let rule = match model.init_rule {
        InitArg::InvSqrtFanIn => InitRule::InvSqrtFanIn,
        InitArg::InvFanIn => InitRule::InvFanIn,
    };
    let spec = preset(&model.preset, act, model.fc1_width)?;
    Network::build(
        spec,
        InitSpec {
            rule,
            seed: model.init_seed.unwrap_or(seed),
        },
    )
}

struct Loaded {
    train: Dataset,
    test: Dataset,
    eval: Batch,
}

fn load_data(args: &DataArgs, net: &Network, seed: u64, default_split: Split) -> Result<Loaded> {
    let (mut train, mut test) = match args.dataset {
        DatasetKind::Mnist => load_mnist(&args.data_dir)?,
        DatasetKind::Cifar => load_cifar10(&args.data_dir)?,
        DatasetKind::Synthetic => {
            let classes = net.outputs().clamp(2, 10);
            let shape = net.spec().input;
            let cfg = |n, s| {
                SyntheticConfig::new(classes, n, s)
                    .with_shape(shape)
                    .with_separation(args.synthetic_separation)
                    .with_jitter(args.synthetic_jitter)
            };
            let test_n = (args.synthetic_n / 4).max(1);
            (
                synthetic(cfg(args.synthetic_n, seed))?,
                synthetic(cfg(test_n, seed ^ 0x7E57))?,
            )
        }
    };
    if train.sample_shape() != net.spec().input {
        return Err(Error::invalid(format!(
            "dataset samples are {:?} but the network expects {:?}",
            train.sample_shape(),
            net.spec().input
        )));
    }
    if let Some(n) = args.train_limit {
        train = train.head(n);
    }
    if let Some(n) = args.test_limit {
        test = test.head(n);
    }
    let source = match args.score_split.unwrap_or(default_split) {
        Split::Train => &train,
        Split::Val => &test,
    };
    let eval =
        EvalSet::sample(source.len(), args.eval_size, seed ^ 0x0E7A_15E7)?.materialize(source);
    log::info!(
        "{}: {} train, {} test, {} eval samples",
        train.name,
        train.len(),
        test.len(),
        eval.len()
    );
    Ok(Loaded { train, test, eval })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn cmd_train(c: TrainCmd) -> Result<()> {
    let cfg = c.optim.config();
    let mut net = build_network(&c.model, cfg.seed)?;
    let data = load_data(&c.data, &net, cfg.seed, Split::Train)?;
    let bias_propagation = !c.no_bias_propagation;
    let schedule = match &c.schedule {
        Some(s) => {
            let mode = match c.mode {
                Mode::Param => PruneMode::Parameter {
                    scorer: c.scorer.as_deref().unwrap_or("magnitude").parse()?,
                    scope: c.scope.into(),
                },
                Mode::Unit => PruneMode::Unit {
                    scorer: c.scorer.as_deref().unwrap_or("mrs").parse()?,
                    bias_propagation,
                },
            };
            Some(PruneSchedule::resolve(s, mode)?)
        }
        None => None,
    };
    create_dir(&c.out)?;
    let test = data.test.all();
    let opts = TrainOptions {
        schedule,
        eval: Some(&data.eval),
        test: Some(&test),
        ..Default::default()
    };
    let mut log = train(&mut net, &data.train, &cfg, opts)?;
    if let Some(f_nz) = c.f_nz {
        let r = remove_low_nnz_units(&mut net, f_nz, bias_propagation.then_some(&data.eval))?;
        log::info!("removed {} low-connectivity units", r.pruned_units.len());
        let (loss, accuracy) = evaluate(&net, &test)?;
        let step = match log.records.last() {
            Some(LogRecord::Final { step, .. }) => *step,
            _ => 0,
        };
        log.records.push(LogRecord::Final {
            step,
            test: Some(EvalMetrics { loss, accuracy }),
            pruned_fraction: net.pruned_fraction(),
            params: net.param_count(),
        });
    }
    log.write(&c.out.join("runlog.jsonl"))?;
    checkpoint::save(&net, &c.out.join("model.prlb"))?;
    if let Some(LogRecord::Final { test: Some(t), .. }) = log.records.last() {
        println!(
            "test loss {:.6} accuracy {:.4} pruned {:.4} params {}",
            t.loss,
            t.accuracy,
            net.pruned_fraction(),
            net.param_count()
        );
    }
    Ok(())
}

fn cmd_compare(c: CompareCmd) -> Result<()> {
    let cfg = c.optim.config();
    let mut net = build_network(&c.model, cfg.seed)?;
    let data = load_data(&c.data, &net, cfg.seed, Split::Train)?;
    for &f in &c.fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::invalid(format!("fraction {f} outside [0, 1]")));
        }
    }
    create_dir(&c.out)?;
    let rows = RefCell::new(vec![COMPARISON_CSV_HEADER.to_string()]);
    let unit_rows = RefCell::new(UNIT_SCORE_CSV_HEADER.to_string() + "\n");
    let eval = &data.eval;
    let seed = cfg.seed;
    let bias_propagation = !c.no_bias_propagation;
    let hook: Box<dyn crate::train::Hook + '_> = if c.units {
        let kinds = c
            .kinds
            .iter()
            .map(|k| k.parse::<UnitScorerKind>())
            .collect::<Result<Vec<_>>>()?;
        let fractions = c.fractions.clone();
        let (rows, unit_rows) = (&rows, &unit_rows);
        Box::new(
            move |step: usize, _epoch: usize, net: &mut Network| -> Result<()> {
                for &kind in &kinds {
                    for (i, &f) in fractions.iter().enumerate() {
                        let (dl, tables) =
                            measure_unit_pruning(net, eval, kind, f, bias_propagation, seed)?;
                        rows.borrow_mut()
                            .push(comparison_row(step, kind.name(), f, dl));
                        if i == 0 {
                            unit_rows
                                .borrow_mut()
                                .push_str(&unit_scores_csv(step, &tables));
                        }
                    }
                }
                Ok(())
            },
        )
    } else {
        let kinds = c
            .kinds
            .iter()
            .map(|k| k.parse::<ParamScorerKind>())
            .collect::<Result<Vec<_>>>()?;
        let fractions = c.fractions.clone();
        let scope: PruneScope = c.scope.into();
        let rows = &rows;
        Box::new(
            move |step: usize, _epoch: usize, net: &mut Network| -> Result<()> {
                for &kind in &kinds {
                    for &f in &fractions {
                        let scorer = ParamScorer::new(kind).with_seed(seed);
                        let dl = prune_and_measure(net, eval, &scorer, f, scope)?;
                        rows.borrow_mut()
                            .push(comparison_row(step, kind.name(), f, dl));
                    }
                }
                Ok(())
            },
        )
    };
    let test = data.test.all();
    let opts = TrainOptions {
        eval: Some(eval),
        test: Some(&test),
        hooks: vec![hook],
        ..Default::default()
    };
    let log = train(&mut net, &data.train, &cfg, opts)?;
    log.write(&c.out.join("runlog.jsonl"))?;
    let mut csv = rows.into_inner().join("\n");
    csv.push('\n');
    write(&c.out.join("comparison.csv"), csv)?;
    if c.units {
        write(&c.out.join("unit_scores.csv"), unit_rows.into_inner())?;
    }
    println!("wrote {}", c.out.join("comparison.csv").display());
    Ok(())
}

fn cmd_attack(c: AttackCmd) -> Result<()> {
    let cfg = c.optim.config();
    let net = build_network(&c.model, cfg.seed)?;
    let data = load_data(&c.data, &net, cfg.seed, Split::Val)?;
    let spec = AttackSpec {
        target: UnitRef::new(c.layer, c.unit),
        start: c.start,
        count: c.count,
        interval: c.interval,
        multiplier: c.multiplier,
    };
    create_dir(&c.out)?;
    let report = run_attack_experiment(&net, &data.train, &data.eval, &cfg, &spec, c.metric_every)?;
    write(&c.out.join("metrics.csv"), report.metrics_csv())?;
    write(&c.out.join("histograms.jsonl"), report.histograms_jsonl()?)?;
    let mut losses = String::from("step,control,attacked\n");
    for (i, (a, b)) in report
        .control_losses
        .iter()
        .zip(&report.attacked_losses)
        .enumerate()
    {
        losses.push_str(&format!("{},{a},{b}\n", i + 1));
    }
    write(&c.out.join("losses.csv"), losses)?;
    checkpoint::save(&report.attacked_net, &c.out.join("attacked.prlb"))?;
    checkpoint::save(&report.control_net, &c.out.join("control.prlb"))?;
    println!("wrote {}", c.out.join("metrics.csv").display());
    Ok(())
}

fn cmd_shrink(c: ShrinkCmd) -> Result<()> {
    let net = checkpoint::load(&c.checkpoint)?;
    let shrunk = shrink(&net)?;
    if let Some(out) = &c.out {
        checkpoint::save(&shrunk.net, out)?;
    }
    for (p, kept) in shrunk.kept.iter().enumerate() {
        log::info!("layer {p}: kept {} of {} units", kept.len(), net.units(p));
    }
    println!("{}", shrunk.net.param_count());
    Ok(())
}

fn cmd_colormap(c: ColormapCmd) -> Result<()> {
    let net = checkpoint::load(&c.checkpoint)?;
    let map = emit_colormap(&net, c.layer, &c.out)?;
    println!(
        "{}×{} colormap written to {}.{{csv,pgm}}",
        map.rows,
        map.cols,
        c.out.display()
    );
    Ok(())
}

fn cmd_expand(c: ExpandCmd) -> Result<()> {
    let bytes = std::fs::read(&c.config).map_err(|e| Error::io(&c.config, e))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Error::invalid(format!("{} is not UTF-8", c.config.display())))?;
    let cfg = GridConfig::parse(&text)?;
    // Scripts must work from any directory.
    let out = std::path::absolute(&c.out).map_err(|e| Error::io(&c.out, e))?;
    let manifests = expand_grid(&cfg, &out);
    let exe = match c.exe {
        Some(e) => e,
        None => std::env::current_exe()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|_| "prunelab".into()),
    };
    write_runs(&manifests, &bytes, &exe)?;
    println!("{}", manifests.len());
    Ok(())
}

fn cmd_run_manifest(c: RunManifestCmd) -> Result<()> {
    let m = read_manifest(&c.manifest)?;
    let argv = manifest_argv(&m);
    log::info!("running {}", argv.join(" "));
    let cli = Cli::try_parse_from(&argv)
        .map_err(|e| Error::invalid(format!("manifest settings: {e}")))?;
    dispatch(cli.command, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["prunelab", "frobnicate"]), 1);
        assert_eq!(run(["prunelab", "train", "--no-such-flag"]), 1);
        assert_eq!(run(["prunelab", "--help"]), 0);
    }

    #[test]
    fn missing_data_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = run([
            "prunelab",
            "train",
            "--preset",
            "tiny",
            "--data-dir",
            dir.path().to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 3);
        assert_eq!(exit_code(&Error::invalid("x")), 1);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 2);
    }
}
