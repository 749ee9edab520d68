//! `selftrain` command-line driver.
//!
//! Exit status is 0 on success, 1 when work failed after it started (a run
//! directory left behind can be continued with `run --resume`), and 2 for
//! bad flags, configuration or input files. Nothing is written before the
//! configuration has been validated.

use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use selftrain::adjudicator::server::MockServer;
use selftrain::adjudicator::{AgentRole, Candidate};
use selftrain::classifier::{hard_label, DevSet};
use selftrain::config::{MockKind, TransportKind};
use selftrain::data::{load_dataset, write_samples};
use selftrain::features::FeatureMatrix;
use selftrain::persist::{read_checksummed, write_checksummed, Checkpoint, RunDir};
use selftrain::pipeline::{run_self_training, run_supervised_only, PipelineError, RoundReport};
use selftrain::synth::{generate, SynthConfig};
use selftrain::{Dataset, Label, RunConfig, Split};

#[derive(Parser)]
#[command(name = "selftrain", version, about = "Agent-verified self-training for binary content classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-class dataset as JSONL.
    Synth(SynthArgs),
    /// Run self-training until the unlabeled pool is exhausted.
    Run(RunArgs),
    /// Train the supervised-only baseline on the labeled seed set.
    Supervised(SupervisedArgs),
    /// Score a checkpoint against one split of a dataset.
    Eval(EvalArgs),
    /// Run the agent negotiation on given samples and print transcripts.
    Adjudicate(AdjudicateArgs),
    /// Serve scripted agents over the chat-completion wire format.
    MockServer(MockServerArgs),
}

/// Flags shared by every command that reads a run configuration. Each one
/// is shorthand for a `--set` key.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// JSONL dataset (`dataset`).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory (`run_dir`).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Random seed (`seed`); required.
    #[arg(long)]
    seed: Option<u64>,
    /// Size of the labeled seed set (`n_labeled`).
    #[arg(long)]
    n_labeled: Option<usize>,
    /// Samples adjudicated per round (`k`).
    #[arg(long)]
    k: Option<usize>,
    /// Gradient-descent epochs per training (`epochs`).
    #[arg(long)]
    epochs: Option<usize>,
    /// Step size (`learning_rate`).
    #[arg(long)]
    learning_rate: Option<f64>,
    /// PU / NU mixing weight in [-1, 1] (`loss.gamma`).
    #[arg(long, allow_negative_numbers = true)]
    gamma: Option<f64>,
    /// Concurrent negotiations (`adjudicator.parallelism`).
    #[arg(long)]
    parallelism: Option<usize>,
    /// Agent transport (`adjudicator.transport.kind`).
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// Mock agent behaviour (`adjudicator.transport.mock.mode`).
    #[arg(long, value_enum)]
    mock_mode: Option<MockArg>,
    /// Any configuration key, e.g. `--set loss.pi_p=0.4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TransportArg {
    Mock,
    Live,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MockArg {
    Oracle,
    Fixed,
    Adversarial,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LabelArg {
    Positive,
    Negative,
}

impl From<LabelArg> for Label {
    fn from(l: LabelArg) -> Self {
        match l {
            LabelArg::Positive => Label::Positive,
            LabelArg::Negative => Label::Negative,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output JSONL path.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    size: usize,
    /// Fraction of positive samples.
    #[arg(long, default_value_t = 0.5)]
    balance: f64,
    /// Class separation; larger is easier.
    #[arg(long, default_value_t = 2.0)]
    separability: f64,
    /// Fraction of gold labels flipped.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Embedding dimension; 0 writes text only.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Leave the text field empty.
    #[arg(long)]
    no_text: bool,
    #[arg(long, default_value_t = 16)]
    tokens_per_sample: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue the run in the run directory from its last completed round.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct SupervisedArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Also write the trained classifier as a checkpoint.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Expected embedding dimension of the dataset.
    #[arg(long)]
    embedding_dim: Option<usize>,
}

#[derive(Args)]
struct AdjudicateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Sample ids, comma separated or repeated.
    #[arg(long, value_delimiter = ',', required = true)]
    ids: Vec<String>,
    /// Take each pseudo-label from this classifier checkpoint.
    #[arg(long, conflicts_with = "label")]
    checkpoint: Option<PathBuf>,
    /// Pseudo-label shown to the agents when no checkpoint is given.
    #[arg(long, value_enum, default_value_t = LabelArg::Positive)]
    label: LabelArg,
}

#[derive(Args)]
struct MockServerArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "127.0.0.1:8089")]
    addr: String,
}

enum Failure {
    /// Flags, configuration or input files are unusable. Exit 2.
    Config(String),
    /// Work started and failed. Exit 1.
    Runtime(String),
}

fn config_err(e: impl Display) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime_err(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type CmdResult = Result<(), Failure>;

fn toml_string(p: &Path) -> String {
    serde_json::to_string(&p.to_string_lossy()).expect("string serializes")
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>, Failure> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(p) = &self.dataset {
            push("dataset", toml_string(p));
        }
        if let Some(p) = &self.run_dir {
            push("run_dir", toml_string(p));
        }
        if let Some(v) = self.seed {
            push("seed", v.to_string());
        }
        if let Some(v) = self.n_labeled {
            push("n_labeled", v.to_string());
        }
        if let Some(v) = self.k {
            push("k", v.to_string());
        }
        if let Some(v) = self.epochs {
            push("epochs", v.to_string());
        }
        if let Some(v) = self.learning_rate {
            push("learning_rate", format!("{v:?}"));
        }
        if let Some(v) = self.gamma {
            push("loss.gamma", format!("{v:?}"));
        }
        if let Some(v) = self.parallelism {
            push("adjudicator.parallelism", v.to_string());
        }
        if let Some(t) = self.transport {
            let name = match t {
                TransportArg::Mock => "mock",
                TransportArg::Live => "live",
            };
            push("adjudicator.transport.kind", format!("\"{name}\""));
        }
        if let Some(m) = self.mock_mode {
            let name = match m {
                MockArg::Oracle => "oracle",
                MockArg::Fixed => "fixed",
                MockArg::Adversarial => "adversarial",
            };
            push("adjudicator.transport.mock.mode", format!("\"{name}\""));
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Failure::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
            push(k.trim(), v.trim().to_string());
        }
        Ok(out)
    }

    /// Defaults, then `file` (or `--config`), then the environment, then flags.
    fn resolve(&self, file: Option<RunConfig>) -> Result<RunConfig, Failure> {
        let mut cfg = match (&self.config, file) {
            (Some(path), _) => RunConfig::load(path).map_err(config_err)?,
            (None, Some(c)) => c,
            (None, None) => RunConfig::default(),
        };
        cfg.apply_overrides(&RunConfig::env_overrides(std::env::vars()))
            .map_err(config_err)?;
        cfg.apply_overrides(&self.overrides()?).map_err(config_err)?;
        Ok(cfg)
    }

    fn load(&self) -> Result<RunConfig, Failure> {
        let cfg = self.resolve(None)?;
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }
}

fn dataset(cfg: &RunConfig) -> Result<Dataset, Failure> {
    load_dataset(&cfg.dataset, cfg.embedding_dim).map_err(|e| Failure::Config(format!("{}: {e}", cfg.dataset.display())))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        size: args.size,
        balance: args.balance,
        separability: args.separability,
        noise: args.noise,
        seed: args.seed,
        dim: args.dim,
        text: !args.no_text,
        tokens_per_sample: args.tokens_per_sample,
        ..Default::default()
    };
    let samples = generate(&cfg).map_err(config_err)?;
    write_samples(&args.out, &samples).map_err(|e| runtime_err(format!("{}: {e}", args.out.display())))?;
    let count = |split| samples.iter().filter(|s| s.split == split).count();
    eprintln!(
        "wrote {} samples to {} (train {}, dev {}, test {})",
        samples.len(),
        args.out.display(),
        count(Split::Train),
        count(Split::Dev),
        count(Split::Test)
    );
    Ok(())
}

fn summary(r: &RoundReport) -> String {
    let p = &r.pools;
    if r.round_number == 0 {
        return format!(
            "round {:>3}  labeled {} (+{} / -{})  unlabeled {}  dev macro-F1 {:.4}",
            0,
            p.labeled_positive + p.labeled_negative,
            p.labeled_positive,
            p.labeled_negative,
            p.unlabeled,
            r.dev_after.macro_f1
        );
    }
    format!(
        "round {:>3}  selected {}  agreed +{} / -{}  disagreed {}  dev macro-F1 {:.4} -> {:.4}  {}  unlabeled {}",
        r.round_number,
        r.k_selected,
        r.moved.agreed_positive,
        r.moved.agreed_negative,
        r.moved.disagreed,
        r.dev_before.map_or(f64::NAN, |m| m.macro_f1),
        r.dev_after.macro_f1,
        if r.accepted { "accepted" } else { "reverted" },
        p.unlabeled
    )
}

fn cmd_run(args: RunArgs) -> CmdResult {
    let mut cfg = args.config.resolve(None)?;
    if args.resume && args.config.config.is_none() {
        // the snapshot written at run start stands in for the config file
        let dir = RunDir::open(&cfg.run_dir).map_err(config_err)?;
        cfg = args.config.resolve(Some(dir.read_config().map_err(config_err)?))?;
    }
    cfg.validate().map_err(config_err)?;
    let ds = dataset(&cfg)?;
    let adjudicator = cfg.build_adjudicator(&ds).map_err(config_err)?;

    let dir = if args.resume {
        RunDir::open(&cfg.run_dir).map_err(config_err)?
    } else {
        if cfg.run_dir.join("state.json").exists() {
            return Err(Failure::Config(format!(
                "{} already holds a run; pass --resume to continue it or choose another --run-dir",
                cfg.run_dir.display()
            )));
        }
        RunDir::create(&cfg.run_dir).map_err(runtime_err)?
    };

    eprintln!(
        "run {}: gamma {}, k {}, n_labeled {}, seed {}",
        cfg.run_dir.display(),
        cfg.loss.gamma,
        cfg.k,
        cfg.n_labeled,
        cfg.seed()
    );
    let mut stdout = std::io::stdout();
    let result = run_self_training::<f64>(&ds, &cfg, &adjudicator, Some(&dir), args.resume, &mut |r| {
        let _ = writeln!(stdout, "{}", summary(r));
        let _ = stdout.flush();
    });
    match result {
        Ok(res) => {
            print_json(&json!({
                "run_dir": cfg.run_dir,
                "rounds": res.reports.last().map_or(0, |r| r.round_number),
                "best_round": res.best_round,
                "dev": res.dev,
                "test": res.test,
            }));
            Ok(())
        }
        Err(PipelineError::ConfigMismatch) => Err(Failure::Config(format!(
            "{} was started with a different configuration; resume without changing settings",
            cfg.run_dir.display()
        ))),
        Err(e) => Err(Failure::Runtime(format!(
            "{e}\ncompleted rounds are saved; continue with `selftrain run --resume --run-dir {}`",
            cfg.run_dir.display()
        ))),
    }
}

fn cmd_supervised(args: SupervisedArgs) -> CmdResult {
    let cfg = args.config.load()?;
    let ds = dataset(&cfg)?;
    let res = run_supervised_only::<f64>(&ds, &cfg).map_err(|e| match e {
        PipelineError::EmptySplit(_) | PipelineError::Features(_) => config_err(e),
        other => runtime_err(other),
    })?;
    if let Some(path) = &args.save {
        let ckpt = Checkpoint::new(&res.params, cfg.hash(), cfg.features.clone());
        write_checksummed(path, &ckpt).map_err(runtime_err)?;
    }
    print_json(&json!({
        "seed": cfg.seed(),
        "n_labeled": res.report.pools.labeled_positive + res.report.pools.labeled_negative,
        "best_epoch": res.report.best_epoch,
        "dev": res.dev,
        "test": res.test,
    }));
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f64>, Failure> {
    read_checksummed::<Checkpoint<f64>>(path).map_err(config_err)
}

fn features_for(ckpt: &Checkpoint<f64>, ds: &Dataset) -> Result<FeatureMatrix<f64>, Failure> {
    let features = FeatureMatrix::<f64>::build(ds, &ckpt.features).map_err(config_err)?;
    if features.dim() != ckpt.dimension {
        return Err(Failure::Config(format!(
            "checkpoint has dimension {} but the dataset gives {}-dimensional features",
            ckpt.dimension,
            features.dim()
        )));
    }
    Ok(features)
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let ds = load_dataset(&args.dataset, args.embedding_dim).map_err(config_err)?;
    let features = features_for(&ckpt, &ds)?;
    let mut set = DevSet::default();
    for i in ds.split_indices(args.split) {
        if let Some(g) = ds.samples()[i].gold_label {
            set.rows.push(i);
            set.golds.push(g);
        }
    }
    let metrics = set
        .evaluate(&ckpt.params(), &features)
        .ok_or_else(|| Failure::Config(format!("the {} split has no gold-labeled samples", args.split)))?;
    print_json(&json!({
        "split": args.split,
        "samples": set.rows.len(),
        "accuracy": metrics.accuracy,
        "macro_f1": metrics.macro_f1,
    }));
    Ok(())
}

fn cmd_adjudicate(args: AdjudicateArgs) -> CmdResult {
    let cfg = args.config.load()?;
    let ds = dataset(&cfg)?;
    let adjudicator = cfg.build_adjudicator(&ds).map_err(config_err)?;
    let scorer = match &args.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let features = features_for(&ckpt, &ds)?;
            Some((ckpt.params(), features))
        }
        None => None,
    };
    let mut candidates = Vec::with_capacity(args.ids.len());
    for id in &args.ids {
        let row = ds.index_of(id).ok_or_else(|| Failure::Config(format!("no sample with id `{id}`")))?;
        let label = match &scorer {
            Some((params, features)) => hard_label(params.proba_row(features.row(row))),
            None => args.label.into(),
        };
        candidates.push(Candidate {
            sample: &ds.samples()[row],
            label,
        });
    }
    let transcripts = adjudicator
        .adjudicate_batch(&candidates, cfg.adjudicator.parallelism)
        .map_err(runtime_err)?;
    let mut stdout = std::io::stdout().lock();
    for t in &transcripts {
        writeln!(stdout, "{}", serde_json::to_string(t).expect("transcript serializes")).map_err(runtime_err)?;
    }
    let agreed = transcripts
        .iter()
        .filter(|t| t.outcome != selftrain::Outcome::Disagreed)
        .count();
    eprintln!("{} adjudicated: {agreed} agreed, {} disagreed", transcripts.len(), transcripts.len() - agreed);
    Ok(())
}

fn cmd_mock_server(args: MockServerArgs) -> CmdResult {
    let cfg = args.config.resolve(None)?;
    let mock = &cfg.adjudicator.transport.mock;
    if cfg.adjudicator.transport.kind != TransportKind::Mock {
        return Err(Failure::Config("mock-server serves mock agents only".into()));
    }
    let ds = match mock.mode {
        MockKind::Adversarial => {
            return Err(Failure::Config(
                "adversarial agents need the classifier label, which the wire format does not carry".into(),
            ))
        }
        MockKind::Oracle => dataset(&cfg)?,
        MockKind::Fixed => Dataset::default(),
    };
    let agent = cfg.mock_agent(mock.flip_probability, &ds).map_err(config_err)?;
    let server = MockServer::start(&args.addr, agent).map_err(|e| Failure::Config(format!("{}: {e}", args.addr)))?;
    println!("listening on http://{}", server.addr());
    for role in [AgentRole::Moderator, AgentRole::User] {
        println!("  {role}: {}", server.endpoint(role));
    }
    let _ = std::io::stdout().flush();
    server.wait();
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("SELFTRAIN_LOG").unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Run(a) => cmd_run(a),
        Command::Supervised(a) => cmd_supervised(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Adjudicate(a) => cmd_adjudicate(a),
        Command::MockServer(a) => cmd_mock_server(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
