//! Subcommands of the `dsnn` binary.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsnn_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, MANIFEST};
use dsnn_core::data::SyntheticDataset;
use dsnn_core::sparse::{bench_speedup, write_bench_csv};
use dsnn_core::trainer::{
    evaluate, pretrain_with, train_dsnn_with, train_single_sparsity, write_metrics_csv, MaskPolicy, StepReport, SuperNetwork, TrainPlan,
};

use crate::config::ExperimentConfig;
use crate::report::{ablation_grid, ablation_label, compare_markdown, compare_rows, write_compare_csv, CompareRow};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "dsnn", version, about = "Train, evaluate and compare dynamic sparsity networks")]
pub struct Cli {
    /// Print the complete default configuration and exit.
    #[arg(long)]
    pub dump_defaults: bool,
    /// Suppress progress lines on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dense pretraining on the task labels.
    Pretrain(RunArgs),
    /// Multi-configuration training from a pretrained checkpoint.
    TrainDsnn(FromPretrained),
    /// Train one configuration alone from a pretrained checkpoint.
    TrainSingle {
        #[command(flatten)]
        run: FromPretrained,
        /// Configuration to train, by name.
        #[arg(long)]
        sparsity_config: String,
    },
    /// The structured slimmable baseline from a pretrained checkpoint.
    TrainSnn(FromPretrained),
    /// Evaluate one configuration of a checkpoint; modifies nothing.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sparsity_config: String,
    },
    /// Evaluate checkpoints that share a plan and tabulate the results.
    Compare {
        #[arg(required = true, num_args = 2..)]
        checkpoints: Vec<PathBuf>,
        /// Name rows by their ablation flags; all inputs must be DSNN runs.
        #[arg(long)]
        ablation: bool,
        /// Table printed on stdout.
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
        /// Also write the CSV table here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write the markdown table here.
        #[arg(long)]
        markdown: Option<PathBuf>,
    },
    /// Dense versus block-sparse matvec timings as CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.7,0.8,0.9,0.95")]
        sparsities: Vec<f64>,
        #[arg(long, default_value_t = 16)]
        block_height: usize,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain, DSNN and one single-sparsity run per sparse configuration,
    /// then the comparison table, all under `output.dir`.
    Pipeline {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also train the structured slimmable baseline.
        #[arg(long)]
        snn: bool,
    },
    /// The four-row ablation grid under `output.dir`.
    Ablation {
        #[command(flatten)]
        config: ConfigArgs,
        /// Reuse this pretrained checkpoint instead of pretraining.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Markdown,
    Csv,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Configuration file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint directory; metrics go to `<out>.metrics.csv` beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model name used in reports.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct FromPretrained {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub pretrained: PathBuf,
}

/// Parses `args` and runs the command, writing results to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            write!(out, "{}", e.render()).map_err(stdout_err)?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    let ctx = Context { quiet: cli.quiet };
    if cli.dump_defaults {
        return emit(out, &ExperimentConfig::default().dump());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no command given; see --help".into()));
    };
    match command {
        Command::Pretrain(args) => {
            let cfg = load_config(&args.config)?;
            let (train, _) = cfg.task_spec().generate()?;
            let net = ctx.pretrain(&cfg, &train)?;
            ctx.save(out, net, &cfg, args.out.unwrap_or_else(|| cfg.output_dir.join("pretrain")), args.label)
        }
        Command::TrainDsnn(args) => ctx.train_from(out, args, Stage::Dsnn(MaskPolicy::Scored)),
        Command::TrainSnn(args) => ctx.train_from(out, args, Stage::Dsnn(MaskPolicy::Structured)),
        Command::TrainSingle { run, sparsity_config } => ctx.train_from(out, run, Stage::Single(sparsity_config)),
        Command::Eval {
            checkpoint,
            sparsity_config,
        } => eval(out, &checkpoint, &sparsity_config),
        Command::Compare {
            checkpoints,
            ablation,
            format,
            csv,
            markdown,
        } => {
            let runs = checkpoints.iter().map(|p| open(p)).collect::<Result<Vec<_>, _>>()?;
            let rows = compare(&runs, ablation)?;
            report(out, &rows, format, csv.as_deref(), markdown.as_deref())
        }
        Command::Bench {
            sizes,
            sparsities,
            block_height,
            reps,
            out: path,
        } => {
            let rows = bench_speedup(&sizes, &sparsities, block_height, reps)?;
            let mut csv = Vec::new();
            write_bench_csv(&mut csv, &rows)?;
            if let Some(path) = path {
                write_file(&path, &csv)?;
            }
            out.write_all(&csv).map_err(stdout_err)
        }
        Command::Pipeline { config, snn } => ctx.pipeline(out, &config, snn),
        Command::Ablation { config, pretrained } => ctx.ablation(out, &config, pretrained.as_deref()),
    }
}

enum Stage {
    Dsnn(MaskPolicy),
    Single(String),
}

struct Context {
    quiet: bool,
}

impl Context {
    /// Progress line roughly every tenth of `total` steps.
    fn progress(&self, tag: &str, total: u64) -> impl FnMut(&SuperNetwork, &StepReport) + '_ {
        let every = (total / 10).max(1);
        let tag = tag.to_string();
        move |_, report: &StepReport| {
            if self.quiet || (report.step + 1) % every != 0 {
                return;
            }
            let losses: Vec<String> = report.records.iter().map(|r| format!("{} {:.4}", r.config, r.loss)).collect();
            eprintln!("[{tag}] step {}/{total}: {}", report.step + 1, losses.join(", "));
        }
    }

    fn pretrain(&self, cfg: &ExperimentConfig, train: &SyntheticDataset) -> Result<SuperNetwork, CliError> {
        let mut observer = self.progress("pretrain", cfg.pretrain_steps);
        Ok(pretrain_with(cfg.build_network()?, train, &cfg.train, cfg.pretrain_steps, &mut observer)?)
    }

    fn stage(&self, pre: &SuperNetwork, train: &SyntheticDataset, plan: &TrainPlan, stage: &Stage) -> Result<SuperNetwork, CliError> {
        let net = match stage {
            Stage::Dsnn(policy) => {
                let tag = if *policy == MaskPolicy::Scored { "DSNN" } else { "SNN" };
                let mut observer = self.progress(tag, plan.steps);
                train_dsnn_with(pre, train, plan, *policy, &mut observer)?
            }
            Stage::Single(config) => train_single_sparsity(pre, train, plan, config)?,
        };
        Ok(net)
    }

    fn train_from(&self, out: &mut dyn Write, args: FromPretrained, stage: Stage) -> Result<(), CliError> {
        let cfg = load_config(&args.run.config)?;
        let (pre, _) = open(&args.pretrained)?;
        check_compatible(&pre, &cfg)?;
        let (train, _) = cfg.task_spec().generate()?;
        let net = self.stage(&pre, &train, &cfg.train, &stage)?;
        let default_dir = match &stage {
            Stage::Dsnn(MaskPolicy::Scored) => "dsnn".to_string(),
            Stage::Dsnn(MaskPolicy::Structured) => "snn".to_string(),
            Stage::Single(c) => format!("single_{c}"),
        };
        let dir = args.run.out.unwrap_or_else(|| cfg.output_dir.join(default_dir));
        self.save(out, net, &cfg, dir, args.run.label)
    }

    fn save(
        &self,
        out: &mut dyn Write,
        mut net: SuperNetwork,
        cfg: &ExperimentConfig,
        dir: PathBuf,
        label: Option<String>,
    ) -> Result<(), CliError> {
        save_run(&mut net, cfg, &cfg.train, &dir, label)?;
        emit(out, &format!("checkpoint {}\n", dir.display()))
    }

    fn pipeline(&self, out: &mut dyn Write, args: &ConfigArgs, snn: bool) -> Result<(), CliError> {
        let cfg = load_config(args)?;
        let (train, eval) = cfg.task_spec().generate()?;
        let dir = cfg.output_dir.clone();
        let mut pre = self.pretrain(&cfg, &train)?;
        save_run(&mut pre, &cfg, &cfg.train, &dir.join("pretrain"), None)?;
        // row order within a configuration follows this order
        let mut stages: Vec<(String, Stage)> = Vec::new();
        for c in cfg.train.plan.configs().iter().skip(1) {
            stages.push((format!("single_{}", c.name), Stage::Single(c.name.clone())));
        }
        stages.push(("dsnn".to_string(), Stage::Dsnn(MaskPolicy::Scored)));
        if snn {
            stages.push(("snn".to_string(), Stage::Dsnn(MaskPolicy::Structured)));
        }
        let meta = meta(&cfg, &cfg.train);
        let mut runs = vec![(pre.clone(), meta.clone())];
        for (name, stage) in &stages {
            let mut net = self.stage(&pre, &train, &cfg.train, stage)?;
            save_run(&mut net, &cfg, &cfg.train, &dir.join(name), None)?;
            runs.push((net, meta.clone()));
        }
        let rows = compare_rows(&runs, &eval, false)?;
        report(out, &rows, Format::Markdown, Some(&dir.join("compare.csv")), Some(&dir.join("compare.md")))
    }

    fn ablation(&self, out: &mut dyn Write, args: &ConfigArgs, pretrained: Option<&Path>) -> Result<(), CliError> {
        let cfg = load_config(args)?;
        let (train, eval) = cfg.task_spec().generate()?;
        let dir = cfg.output_dir.clone();
        let pre = match pretrained {
            Some(p) => {
                let (pre, _) = open(p)?;
                check_compatible(&pre, &cfg)?;
                pre
            }
            None => {
                let mut pre = self.pretrain(&cfg, &train)?;
                save_run(&mut pre, &cfg, &cfg.train, &dir.join("pretrain"), None)?;
                pre
            }
        };
        let mut runs = Vec::new();
        for (i, plan) in ablation_grid(&cfg.train).iter().enumerate() {
            let mut net = self.stage(&pre, &train, plan, &Stage::Dsnn(MaskPolicy::Scored))?;
            save_run(&mut net, &cfg, plan, &dir.join(format!("ablation_{i}")), Some(ablation_label(plan)))?;
            runs.push((net, meta(&cfg, plan)));
        }
        let rows = compare_rows(&runs, &eval, true)?;
        report(out, &rows, Format::Markdown, Some(&dir.join("ablation.csv")), Some(&dir.join("ablation.md")))
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let text = match &args.config {
        Some(path) => fs::read_to_string(path).map_err(|source| crate::ConfigError::Io {
            path: path.clone(),
            source,
        })?,
        None => String::new(),
    };
    let cfg = ExperimentConfig::parse_with(&text, &args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn meta(cfg: &ExperimentConfig, plan: &TrainPlan) -> CheckpointMeta {
    CheckpointMeta {
        task: Some(cfg.task_spec()),
        train: Some(plan.clone()),
    }
}

/// Metrics file written next to checkpoint directory `dir`.
pub fn metrics_path(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    dir.with_file_name(format!("{name}.metrics.csv"))
}

fn save_run(net: &mut SuperNetwork, cfg: &ExperimentConfig, plan: &TrainPlan, dir: &Path, label: Option<String>) -> Result<(), CliError> {
    if let Some(label) = label {
        net.label = label;
    }
    save_checkpoint(dir, net, &meta(cfg, plan))?;
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &net.history)?;
    write_file(&metrics_path(dir), &csv)
}

fn check_compatible(pre: &SuperNetwork, cfg: &ExperimentConfig) -> Result<(), CliError> {
    if pre.network.arch != cfg.architecture() {
        return Err(CliError::Incompatible(format!(
            "pretrained architecture {:?} differs from the configured {:?}",
            pre.network.arch,
            cfg.architecture()
        )));
    }
    Ok(())
}

fn open(dir: &Path) -> Result<(SuperNetwork, CheckpointMeta), CliError> {
    if !dir.join(MANIFEST).is_file() {
        return Err(CliError::MissingCheckpoint(dir.to_path_buf()));
    }
    Ok(load_checkpoint(dir)?)
}

fn eval_split(meta: &CheckpointMeta, source: &str) -> Result<SyntheticDataset, CliError> {
    let spec = meta
        .task
        .as_ref()
        .ok_or_else(|| CliError::Incompatible(format!("{source} records no task")))?;
    Ok(spec.generate()?.1)
}

fn eval(out: &mut dyn Write, dir: &Path, config: &str) -> Result<(), CliError> {
    let (net, meta) = open(dir)?;
    let c = net.config_index(config)?;
    let data = eval_split(&meta, &dir.display().to_string())?;
    let m = evaluate(&net, config, &data)?;
    let mut s = format!(
        "config {config}\nmodel {}\nloss {:.6}\naccuracy {:.4}\nsparsity {:.4}\n",
        net.label, m.loss, m.accuracy, m.sparsity
    );
    let set = net.mask_set(c)?;
    for (p, mask) in net.network.params.iter().zip(set) {
        if let Some(mask) = mask {
            s.push_str(&format!("weight {} {:.4}\n", p.name, mask.sparsity()));
        }
    }
    emit(out, &s)
}

fn compare(runs: &[(SuperNetwork, CheckpointMeta)], ablation: bool) -> Result<Vec<CompareRow>, CliError> {
    let task = &runs[0].1.task;
    if runs.iter().any(|(_, m)| &m.task != task) {
        return Err(CliError::Incompatible("checkpoints were trained on different tasks".into()));
    }
    let eval = eval_split(&runs[0].1, &runs[0].0.label)?;
    compare_rows(runs, &eval, ablation)
}

fn report(out: &mut dyn Write, rows: &[CompareRow], format: Format, csv: Option<&Path>, md: Option<&Path>) -> Result<(), CliError> {
    let mut csv_bytes = Vec::new();
    write_compare_csv(&mut csv_bytes, rows)?;
    let markdown = compare_markdown(rows);
    if let Some(p) = csv {
        write_file(p, &csv_bytes)?;
    }
    if let Some(p) = md {
        write_file(p, markdown.as_bytes())?;
    }
    match format {
        Format::Markdown => emit(out, &markdown),
        Format::Csv => out.write_all(&csv_bytes).map_err(stdout_err),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

fn emit(out: &mut dyn Write, s: &str) -> Result<(), CliError> {
    out.write_all(s.as_bytes()).map_err(stdout_err)
}

fn stdout_err(source: std::io::Error) -> CliError {
    CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    }
}
