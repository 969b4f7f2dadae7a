//! Commands behind the `rocknet` binary.
//!
//! Every command accepts `--section.key=value` overrides (sections `model`,
//! `train`, `data`, `augment`), applied after the `--config` file. Exit
//! codes: 0 ok, 1 internal shape error, 2 configuration or checkpoint error,
//! 3 I/O or dataset error, 4 non-finite values or a failed gradient check.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rocknet::augment::{expand_dataset, AugmentSpec, Manifest};
use rocknet::config::RunConfig;
use rocknet::data_io::{make_synthetic_dataset, Dataset, Split};
use rocknet::gradcheck::suites::{self, Scope};
use rocknet::train_eval::{
    evaluate, metrics_csv, run_ablation, train, AblationReport, Checkpoint, GridEntry, Preset,
};
use rocknet::{Error, Network, OpKind, Result};

pub const SECTIONS: [&str; 4] = ["model", "train", "data", "augment"];

pub const CONFIG_ECHO: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.rkcp";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.csv";

#[derive(Debug, Parser)]
#[command(
    name = "rocknet",
    version,
    about = "ResNet-34 / bottleneck-transformer experiments on image folders"
)]
pub struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedurally generated train/test dataset.
    Synth(SynthArgs),
    /// Expand a dataset offline with augmented copies.
    Augment(AugmentArgs),
    /// Train one model and write checkpoint, metrics and resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and print a metrics row.
    Eval(EvalArgs),
    /// Train every configuration of a preset grid.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 10)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub test_per_class: usize,
    /// `HxW` or a single side length.
    #[arg(long, default_value = "32")]
    pub size: String,
    /// Defaults to `data.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub dst: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root with `train/` and `test/`; overrides `data.root`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// table1, table2, table3 or full.
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write 0 for wall_seconds so the CSV depends only on inputs and seeds.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// op, block or model.
    #[arg(long, default_value = "op")]
    pub scope: Scope,
    /// Corrupt the backward rule of one op kind (sensitivity check).
    #[arg(long, value_name = "OP")]
    pub inject_fault: Option<String>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Shape(_) => 1,
        Error::Config(_) | Error::Checkpoint(_) => 2,
        Error::Io { .. } | Error::Dataset(_) | Error::Decode { .. } | Error::Csv(_) => 3,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => 4,
    }
}

pub type Overrides = Vec<(String, String)>;

/// Removes `--section.key=value` arguments, returning the rest and the
/// overrides in command-line order.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let body = match arg.strip_prefix("--") {
            Some(b) => b,
            None => {
                rest.push(arg);
                continue;
            }
        };
        let key = body.split('=').next().unwrap_or("");
        let is_override = key
            .split_once('.')
            .is_some_and(|(section, _)| SECTIONS.contains(&section));
        if !is_override {
            rest.push(arg);
            continue;
        }
        match body.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                return Err(Error::config(format!(
                    "override {arg:?} needs the form --{key}=value"
                )))
            }
        }
    }
    Ok((rest, overrides))
}

/// Runs the command line `args` (without the program name), writing command
/// output to `out`. Returns the process exit code.
pub fn run(args: Vec<String>, out: &mut dyn Write) -> i32 {
    let (rest, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(e) => return report(&e),
    };
    let cli = match Cli::try_parse_from(std::iter::once("rocknet".to_string()).chain(rest)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command, &overrides, out) {
        Ok(code) => code,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

fn dispatch(cmd: Command, overrides: &[(String, String)], out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a, overrides, out),
        Command::Augment(a) => cmd_augment(&a, overrides, out),
        Command::Train(a) => cmd_train(&a, overrides, out),
        Command::Eval(a) => cmd_eval(&a, overrides, out),
        Command::Ablate(a) => cmd_ablate(&a, overrides, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, overrides, out),
    }
    .map(|()| 0)
    .or_else(|e| match e {
        CmdError::Lib(e) => Err(e),
        CmdError::Exit(code) => Ok(code),
    })
}

enum CmdError {
    Lib(Error),
    Exit(i32),
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        CmdError::Lib(e)
    }
}

type CmdResult = std::result::Result<(), CmdError>;

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// A run configuration with the file and overrides applied.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    /// Whether `model.num_classes` was given; otherwise it follows the data.
    pub classes_given: bool,
}

pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Resolved> {
    let mut config = RunConfig::default();
    let mut classes_given = false;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        config.apply_text(&text)?;
        classes_given |= text
            .lines()
            .filter_map(|l| l.split_once('='))
            .any(|(k, _)| k.trim() == "model.num_classes");
    }
    for (k, v) in overrides {
        config.set(k, v)?;
        classes_given |= k == "model.num_classes";
    }
    config.validate()?;
    Ok(Resolved {
        config,
        classes_given,
    })
}

impl Resolved {
    /// Opens the dataset at `data` (or `data.root`), sized for the model,
    /// and fills in the class count when it was not given.
    fn open_data(&mut self, data: Option<&Path>) -> Result<Dataset> {
        if let Some(d) = data {
            self.config.data.root = Some(d.to_path_buf());
        }
        let root = self
            .config
            .data
            .root
            .clone()
            .ok_or_else(|| Error::config("no dataset: pass --data or set data.root"))?;
        let ds = Dataset::open(&root, self.config.model.input_size)?;
        if !self.classes_given {
            self.config.model.num_classes = ds.num_classes();
        }
        self.config.validate()?;
        Ok(ds)
    }
}

fn cmd_synth(a: &SynthArgs, overrides: &[(String, String)], out: &mut dyn Write) -> CmdResult {
    let r = resolve(a.config.as_deref(), overrides)?;
    let seed = a.seed.unwrap_or(r.config.data.seed);
    let size = rocknet::config::parse_size("--size", &a.size)?;
    make_synthetic_dataset(&a.out, a.classes, a.train_per_class, a.test_per_class, size, seed)?;
    emit(
        out,
        &format!(
            "wrote {} train and {} test images in {} classes to {}\n",
            a.classes * a.train_per_class,
            a.classes * a.test_per_class,
            a.classes,
            a.out.display()
        ),
    )?;
    Ok(())
}

/// Expands `src` into `dst`. A tree with a `train/` directory has its train
/// split expanded and its `test/` split (if any) copied at the output size
/// without augmented copies; any other tree is treated as class folders.
pub fn augment_tree(src: &Path, dst: &Path, spec: &AugmentSpec) -> Result<Vec<(String, Manifest)>> {
    let train = src.join("train");
    if !train.is_dir() {
        return Ok(vec![(String::new(), expand_dataset(src, dst, spec)?)]);
    }
    let mut parts = vec![(
        "train".to_string(),
        expand_dataset(&train, &dst.join("train"), spec)?,
    )];
    let test = src.join("test");
    if test.is_dir() {
        let copy = AugmentSpec {
            copies_per_image: 0,
            ..spec.clone()
        };
        parts.push((
            "test".to_string(),
            expand_dataset(&test, &dst.join("test"), &copy)?,
        ));
    }
    Ok(parts)
}

fn cmd_augment(a: &AugmentArgs, overrides: &[(String, String)], out: &mut dyn Write) -> CmdResult {
    let r = resolve(a.config.as_deref(), overrides)?;
    let parts = augment_tree(&a.src, &a.dst, &r.config.augment)?;
    write_file(&a.dst.join(CONFIG_ECHO), r.config.to_text().as_bytes())?;
    for (name, m) in &parts {
        let label = if name.is_empty() { "all" } else { name.as_str() };
        let manifest = if name.is_empty() {
            a.dst.join("manifest.csv")
        } else {
            a.dst.join(name).join("manifest.csv")
        };
        emit(
            out,
            &format!(
                "{label}: {} outputs, {} skipped, manifest {}\n",
                m.outputs(),
                m.skipped(),
                manifest.display()
            ),
        )?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, overrides: &[(String, String)], out: &mut dyn Write) -> CmdResult {
    let mut r = resolve(a.config.as_deref(), overrides)?;
    let data = r.open_data(a.data.as_deref())?;
    create_dir(&a.out)?;
    write_file(&a.out.join(CONFIG_ECHO), r.config.to_text().as_bytes())?;
    let mut net: Network = Network::build(&r.config.model)?;
    let outcome = train(&mut net, &data, &r.config.train)?;
    outcome.checkpoint.save(&a.out.join(CHECKPOINT_FILE))?;
    let csv = metrics_csv(&outcome.metrics);
    write_file(&a.out.join(METRICS_FILE), csv.as_bytes())?;
    emit(out, &csv)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, overrides: &[(String, String)], out: &mut dyn Write) -> CmdResult {
    if !overrides.is_empty() {
        return Err(Error::config("eval takes its configuration from the checkpoint").into());
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = Dataset::open(&a.data, ckpt.model.input_size)?;
    if data.num_classes() != ckpt.model.num_classes {
        return Err(Error::config(format!(
            "checkpoint has {} classes, dataset {} has {}",
            ckpt.model.num_classes,
            a.data.display(),
            data.num_classes()
        ))
        .into());
    }
    let mut net: Network = Network::build(&ckpt.model)?;
    let record = evaluate(&mut net, &ckpt, data.split(a.split))?;
    emit(out, &format!("{}\n", record.csv_row()))?;
    Ok(())
}

fn suffixed(grid: Vec<GridEntry>, tag: &str) -> Vec<GridEntry> {
    grid.into_iter()
        .map(|mut e| {
            e.id = format!("{}@{tag}", e.id);
            e
        })
        .collect()
}

fn cmd_ablate(a: &AblateArgs, overrides: &[(String, String)], out: &mut dyn Write) -> CmdResult {
    let preset: Preset = a.preset.parse()?;
    let mut r = resolve(a.config.as_deref(), overrides)?;
    let data = r.open_data(a.data.as_deref())?;
    create_dir(&a.out)?;
    let echo = format!("# preset={}\n{}", a.preset, r.config.to_text());
    write_file(&a.out.join(CONFIG_ECHO), echo.as_bytes())?;

    let grid = preset.grid(&r.config.model);
    let report = if preset == Preset::Table1 {
        // The baseline before and after offline augmentation of the train split.
        let mut report = run_ablation(&suffixed(grid.clone(), "initial"), &data, &r.config.train)?;
        let root = r.config.data.root.clone().unwrap_or_default();
        let aug_root = a.out.join("augmented");
        augment_tree(&root, &aug_root, &r.config.augment)?;
        let aug = Dataset::open(&aug_root, r.config.model.input_size)?;
        report.extend(run_ablation(&suffixed(grid, "augmented"), &aug, &r.config.train)?);
        report
    } else {
        run_ablation(&grid, &data, &r.config.train)?
    };
    write_report(&report, &a.out, !a.deterministic)?;
    emit(out, &report.to_csv(!a.deterministic))?;
    Ok(())
}

fn write_report(report: &AblationReport, dir: &Path, record_time: bool) -> Result<()> {
    write_file(&dir.join(ABLATION_FILE), report.to_csv(record_time).as_bytes())?;
    write_file(&dir.join(RUN_MANIFEST_FILE), report.manifest_csv().as_bytes())
}

fn parse_op(name: &str) -> Result<OpKind> {
    OpKind::ALL.into_iter().find(|k| k.name() == name).ok_or_else(|| {
        let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        Error::config(format!("unknown op {name:?} (valid: {})", names.join(", ")))
    })
}

fn cmd_gradcheck(a: &GradcheckArgs, overrides: &[(String, String)], out: &mut dyn Write) -> CmdResult {
    if !overrides.is_empty() {
        return Err(Error::config("gradcheck takes no config overrides").into());
    }
    let fault = a.inject_fault.as_deref().map(parse_op).transpose()?;
    let reports = suites::run(a.scope, fault)?;
    let mut text = String::from("name,checked,max_rel_err,max_abs_err,status\n");
    for r in &reports {
        text.push_str(&format!(
            "{},{},{:.3e},{:.3e},{}\n",
            r.name,
            r.checked,
            r.max_rel_err,
            r.max_abs_err,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    emit(out, &text)?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        eprintln!("{failed} of {} gradient checks failed", reports.len());
        return Err(CmdError::Exit(4));
    }
    Ok(())
}
