//! Command-line entry point.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::{AnomalyConfig, AnomalyModel, AnomalyRepair, TtcRepair};
use crate::config::RunConfig;
use crate::corpus::{build_corpus, Corpus, CorpusSpec, DEFAULT_ATTEMPT_CAP};
use crate::error::{Error, Result};
use crate::eval::{evaluate, monitor_quality, render_table, report_lines, robustness_run, RepairMethod};
use crate::repair::RepairModel;
use crate::rng;
use crate::sim::trace::write_trace;
use crate::sim::{run_episode, Scenario, TemplateId};
use crate::train::{train_reft, train_sl, AnnotationConfig, ReftConfig, SlConfig};

#[derive(Debug, Parser)]
#[command(name = "repairlab", version, about = "Runtime decision repair for a 2D driving simulator")]
pub struct Cli {
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Simulation timestep in seconds; overrides the config file.
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    /// TOML file with [sim], [encoder], [policy] and [templates] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuzz scenarios and bank violations and successes of the driving policy.
    GenCorpus(GenCorpusArgs),
    /// Supervised warm-up of encoder, monitor and adapter.
    TrainSl(TrainSlArgs),
    /// Reinforcement fine-tuning of the adapter.
    TrainReft(TrainReftArgs),
    /// Repair metrics of one method on a banked corpus.
    Eval(EvalArgs),
    /// Run one scenario file and write its trace.
    Replay(ReplayArgs),
    /// Cumulative violations over freshly fuzzed scenarios.
    Robustness(RobustnessArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated templates (S1..S5 or full names).
    #[arg(long, alias = "template", value_delimiter = ',', default_value = "S1,S2,S3,S4,S5")]
    pub templates: Vec<String>,
    #[arg(long, default_value_t = 40)]
    pub violations: usize,
    #[arg(long, default_value_t = 40)]
    pub successes: usize,
    #[arg(long, default_value_t = DEFAULT_ATTEMPT_CAP)]
    pub attempt_cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SlAblation {
    /// Annotate only the pre-collision window, without the clearance rule.
    WoRegulation,
}

#[derive(Debug, Args)]
pub struct TrainSlArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Negatives sampled per positive each epoch.
    #[arg(long, default_value_t = 3.0)]
    pub negative_ratio: f64,
    /// Keep every n-th negative state of each trace.
    #[arg(long, default_value_t = 1)]
    pub negative_stride: usize,
    /// Fraction of scenarios held out to calibrate the monitor threshold.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Append speed as a seventh token attribute.
    #[arg(long)]
    pub token_velocity: bool,
    #[arg(long, value_enum)]
    pub ablate: Option<SlAblation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReftAblation {
    /// Start from a randomly initialized model instead of a warm one.
    OnlyRl,
    /// Drop the safe-explore reward term and keep the collision penalty.
    WoSr,
}

#[derive(Debug, Args)]
pub struct TrainReftArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Warm model from train-sl; required unless `--ablate only-rl`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub episodes: usize,
    #[arg(long, default_value_t = 5000)]
    pub buffer: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.95)]
    pub gamma: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub target_sync: usize,
    #[arg(long, default_value_t = 0.5)]
    pub epsilon_start: f64,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon_end: f64,
    #[arg(long, default_value_t = 200)]
    pub epsilon_decay: usize,
    /// Minibatch updates after each episode.
    #[arg(long, default_value_t = 1)]
    pub updates_per_episode: usize,
    #[arg(long, value_enum)]
    pub ablate: Option<ReftAblation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RepairName {
    None,
    Random,
    Ttc,
    Anomaly,
    Adreft,
    AdreftSl,
    /// Learned monitor with random repair actions.
    AdreftRandr,
}

impl RepairName {
    fn needs_model(self) -> bool {
        matches!(self, RepairName::Adreft | RepairName::AdreftSl | RepairName::AdreftRandr)
    }

    fn label(self) -> &'static str {
        match self {
            RepairName::None => "none",
            RepairName::Random => "random",
            RepairName::Ttc => "ttc",
            RepairName::Anomaly => "anomaly",
            RepairName::Adreft => "adreft",
            RepairName::AdreftSl => "adreft-sl",
            RepairName::AdreftRandr => "adreft-randr",
        }
    }
}

#[derive(Debug, Args)]
pub struct RepairArgs {
    #[arg(long, value_enum, default_value = "none")]
    pub repair: RepairName,
    /// Weight file for the learned methods.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub random_prob: f64,
    #[arg(long, default_value_t = 3.0)]
    pub ttc_threshold: f64,
    /// Corpus whose success episodes train the anomaly detector.
    #[arg(long)]
    pub fit_corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub repair: RepairArgs,
    /// Text table output.
    #[arg(long)]
    pub out: PathBuf,
    /// Line-delimited JSON records; defaults to the table path with a `.jsonl` extension.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Directory for one trace per repaired episode.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub trace_out: PathBuf,
    #[command(flatten)]
    pub repair: RepairArgs,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[arg(long, value_delimiter = ',', default_value = "S1,S2,S3,S4,S5")]
    pub templates: Vec<String>,
    /// Scenarios per template.
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[command(flatten)]
    pub repair: RepairArgs,
    /// One JSON line per template with its cumulative violation counts.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 2 for usage errors and 1 for failed operations.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct Env {
    config: RunConfig,
    seed: u64,
}

fn load_env(cli: &Cli) -> CliResult<Env> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dt) = cli.dt {
        config.sim.dt = dt;
        config.validate()?;
    }
    Ok(Env { config, seed: cli.seed })
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    let env = load_env(cli)?;
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(&env, a),
        Command::TrainSl(a) => train_sl_cmd(&env, a),
        Command::TrainReft(a) => train_reft_cmd(&env, a),
        Command::Eval(a) => eval_cmd(&env, a),
        Command::Replay(a) => replay_cmd(&env, a),
        Command::Robustness(a) => robustness_cmd(&env, a),
    }
}

fn parse_templates(names: &[String]) -> CliResult<Vec<TemplateId>> {
    names
        .iter()
        .map(|n| n.trim().parse::<TemplateId>().map_err(|e| usage(e.to_string())))
        .collect()
}

/// Writes through a sibling temp file so a failed run never leaves a
/// truncated output behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_corpus(env: &Env, dir: &Path) -> Result<Corpus> {
    Corpus::load(dir, &env.config.policy, &env.config.sim)
}

fn gen_corpus(env: &Env, a: &GenCorpusArgs) -> CliResult<()> {
    let spec = CorpusSpec {
        templates: parse_templates(&a.templates)?,
        violations: a.violations,
        successes: a.successes,
        seed: env.seed,
        attempt_cap: a.attempt_cap,
    };
    let corpus = build_corpus(&spec, &env.config.template_table(), &env.config.policy, &env.config.sim)?;
    corpus.save(&a.out)?;
    println!("banked {} scenarios in {}", corpus.len(), a.out.display());
    Ok(())
}

fn train_sl_cmd(env: &Env, a: &TrainSlArgs) -> CliResult<()> {
    let mut encoder = env.config.encoder.clone();
    encoder.hidden = a.hidden.unwrap_or(encoder.hidden);
    encoder.layers = a.layers.unwrap_or(encoder.layers);
    encoder.heads = a.heads.unwrap_or(encoder.heads);
    encoder.token_velocity |= a.token_velocity;
    encoder.validate().map_err(usage)?;
    if !(a.lr > 0.0) || a.batch == 0 || !(0.0..1.0).contains(&a.holdout) {
        return Err(usage("--lr and --batch must be positive and --holdout in [0, 1)"));
    }
    let corpus = load_corpus(env, &a.corpus)?;
    let mut model = RepairModel::new(&encoder, &mut rng::stream(env.seed, "init"))?;
    let cfg = SlConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch,
        negative_ratio: a.negative_ratio,
        holdout_fraction: a.holdout,
        negative_stride: a.negative_stride,
        annotation: AnnotationConfig {
            use_clearance: a.ablate != Some(SlAblation::WoRegulation),
            ..AnnotationConfig::default()
        },
        seed: env.seed,
    };
    let report = train_sl(&mut model, &corpus, &env.config.policy, &env.config.sim, &cfg)?;
    write_atomic(&a.out, &model.to_bytes())?;
    println!(
        "trained on {} positive / {} negative states; final loss {:.4}; lambda_safe {:.6}",
        report.train_positives,
        report.train_negatives,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        report.lambda_safe
    );
    Ok(())
}

fn train_reft_cmd(env: &Env, a: &TrainReftArgs) -> CliResult<()> {
    let only_rl = a.ablate == Some(ReftAblation::OnlyRl);
    let mut model = match (&a.model, only_rl) {
        (Some(path), _) => RepairModel::load(path)?,
        (None, true) => RepairModel::new(&env.config.encoder, &mut rng::stream(env.seed, "init"))?,
        (None, false) => return Err(usage("--model is required unless --ablate only-rl")),
    };
    if a.batch == 0 || !(a.lr > 0.0) || !(0.0..=1.0).contains(&a.gamma) {
        return Err(usage("--batch and --lr must be positive and --gamma in [0, 1]"));
    }
    let corpus = load_corpus(env, &a.corpus)?;
    let cfg = ReftConfig {
        episodes: a.episodes,
        buffer_capacity: a.buffer,
        learning_rate: a.lr,
        gamma: a.gamma,
        batch_size: a.batch,
        target_sync_every: a.target_sync,
        epsilon_start: a.epsilon_start,
        epsilon_end: a.epsilon_end,
        epsilon_decay_episodes: a.epsilon_decay,
        updates_per_episode: a.updates_per_episode,
        safe_explore: a.ablate != Some(ReftAblation::WoSr),
        seed: env.seed,
    };
    let report = train_reft(&mut model, &corpus, &env.config.policy, &env.config.sim, &cfg)?;
    write_atomic(&a.out, &model.to_bytes())?;
    let collisions = report.episode_collisions.iter().filter(|&&c| c).count();
    println!(
        "{} episodes, {} collisions, {} updates",
        report.episode_returns.len(),
        collisions,
        report.updates
    );
    Ok(())
}

/// Builds the method; the learned model, if any, is loaded into `slot`.
fn build_method<'m>(
    env: &Env,
    a: &RepairArgs,
    slot: &'m mut Option<RepairModel>,
    default_fit: Option<&Corpus>,
) -> CliResult<RepairMethod<'m>> {
    if a.repair.needs_model() {
        let path = a
            .model
            .as_ref()
            .ok_or_else(|| usage(format!("--model is required for --repair {}", a.repair.label())))?;
        *slot = Some(RepairModel::load(path)?);
    }
    Ok(match a.repair {
        RepairName::None => RepairMethod::None,
        RepairName::Random => {
            if !(0.0..=1.0).contains(&a.random_prob) {
                return Err(usage("--random-prob must be in [0, 1]"));
            }
            RepairMethod::Random {
                intervene_prob: a.random_prob,
                seed: env.seed,
            }
        }
        RepairName::Ttc => {
            if !(a.ttc_threshold > 0.0) {
                return Err(usage("--ttc-threshold must be positive"));
            }
            RepairMethod::Ttc(TtcRepair {
                threshold: a.ttc_threshold,
                dt: env.config.sim.dt,
                ..TtcRepair::default()
            })
        }
        RepairName::Anomaly => {
            let loaded;
            let fit = match (&a.fit_corpus, default_fit) {
                (Some(dir), _) => {
                    loaded = load_corpus(env, dir)?;
                    &loaded
                }
                (None, Some(c)) => c,
                (None, None) => return Err(usage("--fit-corpus is required for --repair anomaly")),
            };
            let cfg = AnomalyConfig {
                seed: env.seed,
                ..AnomalyConfig::default()
            };
            let detector = AnomalyModel::fit_corpus(fit, &env.config.policy, &env.config.sim, &cfg)?;
            RepairMethod::Anomaly(AnomalyRepair::new(detector, &env.config.sim)?)
        }
        RepairName::Adreft | RepairName::AdreftSl => RepairMethod::Learned(slot.as_ref().expect("loaded above")),
        RepairName::AdreftRandr => RepairMethod::LearnedRandomActions {
            model: slot.as_ref().expect("loaded above"),
            seed: env.seed,
        },
    })
}

fn eval_cmd(env: &Env, a: &EvalArgs) -> CliResult<()> {
    // Validate flags before the corpus replay, which is the slow part.
    if a.repair.repair.needs_model() && a.repair.model.is_none() {
        return Err(usage(format!("--model is required for --repair {}", a.repair.repair.label())));
    }
    let corpus = load_corpus(env, &a.corpus)?;
    let mut slot = None;
    let method = build_method(env, &a.repair, &mut slot, Some(&corpus))?;
    if let Some(dir) = &a.trace_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut trace_err = None;
    let mut report = evaluate(
        &corpus,
        &method,
        a.repair.repair.label(),
        &env.config.policy,
        &env.config.sim,
        |banked, trace| {
            if let (Some(dir), None) = (&a.trace_dir, &trace_err) {
                let path = dir.join(Path::new(&banked.file).with_extension("trace"));
                if let Err(e) = std::fs::write(&path, write_trace(trace)) {
                    trace_err = Some(Error::io(path, e));
                }
            }
        },
    )?;
    if let Some(e) = trace_err {
        return Err(e.into());
    }
    if let (Some(model), true) = (&slot, a.repair.repair != RepairName::AdreftRandr) {
        let all: Vec<_> = corpus.entries.iter().collect();
        report.monitor = Some(monitor_quality(
            model,
            &all,
            &env.config.policy,
            &env.config.sim,
            &AnnotationConfig::default(),
        )?);
    }
    let table = render_table(std::slice::from_ref(&report));
    write_atomic(&a.out, table.as_bytes())?;
    let records = a.records.clone().unwrap_or_else(|| a.out.with_extension("jsonl"));
    write_atomic(&records, report_lines(&report).as_bytes())?;
    print!("{table}");
    Ok(())
}

fn replay_cmd(env: &Env, a: &ReplayArgs) -> CliResult<()> {
    let scenario = Scenario::load(&a.scenario)?;
    let mut slot = None;
    let method = build_method(env, &a.repair, &mut slot, None)?;
    let mut plugin = method.plugin(&env.config.sim, 0)?;
    let trace = run_episode(
        &scenario,
        &env.config.policy,
        plugin.as_mut().map(|p| p.as_mut() as &mut dyn crate::sim::RepairPlugin),
        &env.config.sim,
    )?;
    write_atomic(&a.trace_out, write_trace(&trace).as_bytes())?;
    println!("{} after {} steps", trace.outcome.result.name(), trace.outcome.final_step);
    Ok(())
}

fn robustness_cmd(env: &Env, a: &RobustnessArgs) -> CliResult<()> {
    let templates = parse_templates(&a.templates)?;
    let mut slot = None;
    let method = build_method(env, &a.repair, &mut slot, None)?;
    let curves = robustness_run(
        &templates,
        a.count,
        env.seed,
        &env.config.template_table(),
        &env.config.policy,
        &env.config.sim,
        &method,
    )?;
    let mut out = String::new();
    for c in &curves {
        out.push_str(&serde_json::to_string(c).expect("plain data"));
        out.push('\n');
        println!("{:<16} {:>5} violations", c.template, c.total());
    }
    write_atomic(&a.out, out.as_bytes())?;
    Ok(())
}
