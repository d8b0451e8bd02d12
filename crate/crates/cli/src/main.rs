//! `eager`: dataset generation, QA training and evaluation, shaped PPO runs
//! and learning-curve plots.

mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use eager::bot::NoiseDistribution;
use eager::dataset::{self, BuildConfig, DatasetError, Split, SplitConfig};
use eager::gridworld::{success_reward, TaskSpec};
use eager::qa::{self, QaConfig, QaError, QaModel, TrainConfig};
use eager::rl::{self, CurvePoint, PolicyConfig, PpoConfig, RlError, Shaping, TrainOptions};
use eager::shaping::{self, lambda_bound, lambda_inputs, write_trace_csv, OracleQa, QaBackend, ShapingConfig};
use serde::Serialize;
use serde_json::json;

const SEED_ENV: &str = "EAGER_SEED";

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Exists(_) => CliError::Config(e.to_string()),
            DatasetError::Budget { .. } => CliError::Data(e.to_string()),
            DatasetError::Grid(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<QaError> for CliError {
    fn from(e: QaError) -> Self {
        match e {
            QaError::Diverged { .. } => CliError::Numeric(e.to_string()),
            QaError::Model(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RlError> for CliError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            RlError::Config(_) | RlError::Model(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "eager", version, about = "Question-driven reward shaping for instruction-following agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a QA dataset from bot demonstrations.
    GenDataset(GenDataset),
    /// Train a QA model on a dataset.
    TrainQa(TrainQa),
    /// Report the success rate of a QA checkpoint on a dataset split.
    EvalQa(EvalQa),
    /// Train PPO agents, optionally with EAGER shaping.
    TrainAgent(TrainAgent),
    /// Aggregate learning curves across seeds and methods.
    Plot(Plot),
}

#[derive(Args, Debug, Clone, Serialize)]
struct TaskArgs {
    /// Task as Kind-Layout, e.g. PutNextTo-Local.
    #[arg(long)]
    task: String,
    #[arg(long)]
    room_size: Option<usize>,
    #[arg(long)]
    horizon: Option<u32>,
    #[arg(long)]
    distractors: Option<usize>,
}

fn parse_task(name: &str, room_size: Option<usize>, horizon: Option<u32>, distractors: Option<usize>) -> Result<TaskSpec, CliError> {
    let mut spec = TaskSpec::from_str(name).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(n) = room_size {
        spec = spec.with_room_size(n);
    }
    if let Some(h) = horizon {
        spec = spec.with_horizon(h);
    }
    if let Some(d) = distractors {
        spec = spec.with_distractors(d);
    }
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

impl TaskArgs {
    fn spec(&self) -> Result<TaskSpec, CliError> {
        parse_task(&self.task, self.room_size, self.horizon, self.distractors)
    }
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct GenDataset {
    /// Tasks to include; repeat or separate with commas.
    #[arg(long = "task", required = true, value_delimiter = ',')]
    tasks: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    n_per_task: usize,
    /// Bot noise distribution as p:weight pairs.
    #[arg(long, default_value = "0:0.45,0.1:0.35,0.4:0.1,0.8:0.1")]
    noise: String,
    /// Recent distinct goals that negative questions are drawn from.
    #[arg(long, default_value_t = 3)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    test_fraction: f64,
    /// Hold out whole goals in a separate unseen-goal test split.
    #[arg(long)]
    disjoint_goals: bool,
    #[arg(long)]
    room_size: Option<usize>,
    #[arg(long)]
    horizon: Option<u32>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SplitArg {
    Train,
    Test,
    TestUnseen,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
            SplitArg::TestUnseen => Split::TestUnseen,
        }
    }
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct TrainQa {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 5)]
    decay_every: usize,
    #[arg(long, default_value_t = 0.1)]
    decay_factor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop after the epoch that crosses this many minutes.
    #[arg(long)]
    time_budget_min: Option<f64>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    eval_split: SplitArg,
    #[arg(long, default_value_t = QaConfig::default().d_model)]
    d_model: usize,
    #[arg(long, default_value_t = QaConfig::default().layers)]
    layers: usize,
    #[arg(long, default_value_t = QaConfig::default().heads)]
    heads: usize,
    #[arg(long, default_value_t = QaConfig::default().d_ff)]
    d_ff: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct EvalQa {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ShapingArg {
    None,
    Eager,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum QaArg {
    Oracle,
    Learned,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct TrainAgent {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 2_000_000)]
    frames: u64,
    #[arg(long, value_enum, default_value_t = ShapingArg::None)]
    shaping: ShapingArg,
    #[arg(long, value_enum)]
    qa: Option<QaArg>,
    #[arg(long)]
    qa_ckpt: Option<PathBuf>,
    /// Bonus scale, or `auto` for the tabulated worst-case length.
    #[arg(long, default_value = "auto")]
    lambda: String,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    /// Refuse λ at or above the safe bound.
    #[arg(long)]
    enforce_bound: bool,
    /// Pay λ per answered question regardless of confidence.
    #[arg(long)]
    simple_reward: bool,
    /// Drop no-answer from the QA distribution before answering.
    #[arg(long)]
    no_noanswer: bool,
    #[arg(long, default_value_t = 500)]
    eval_episodes: usize,
    /// Evaluate with the most probable action instead of sampling.
    #[arg(long)]
    eval_argmax: bool,
    /// Episodes per seed whose shaping records are written.
    #[arg(long, default_value_t = 20)]
    trace_episodes: usize,
    #[arg(long, default_value_t = PpoConfig::default().envs)]
    envs: usize,
    #[arg(long, default_value_t = PpoConfig::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = PpoConfig::default().minibatch)]
    minibatch: usize,
    #[arg(long, default_value_t = PpoConfig::default().epochs)]
    ppo_epochs: usize,
    #[arg(long, default_value_t = PpoConfig::default().recurrence)]
    recurrence: usize,
    #[arg(long, default_value_t = PpoConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = PolicyConfig::default().hidden)]
    hidden: usize,
    /// Divide rewards by the largest success reward before advantage estimation.
    #[arg(long)]
    normalize_returns: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
struct Plot {
    /// `train-agent` output directories, one per method.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Legend labels, in input order; directory names by default.
    #[arg(long = "label")]
    labels: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Interpolate seeds onto a common frame grid instead of failing.
    #[arg(long)]
    resample: bool,
    #[arg(long)]
    force: bool,
}

/// Expands `--config FILE` into flags placed before the command-line ones,
/// so explicit flags win.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, CliError> {
    let Some(i) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let (path, consumed) = match args[i].strip_prefix("--config=") {
        Some(p) => (p.to_string(), 1),
        None => (args.get(i + 1).cloned().ok_or_else(|| CliError::Config("--config needs a file".into()))?, 2),
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
    let map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
    let mut from_file = Vec::new();
    for (k, v) in map {
        let flag = format!("--{}", k.replace('_', "-"));
        match v {
            serde_json::Value::Bool(true) => from_file.push(flag),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::Array(xs) => {
                let parts: Vec<String> = xs.iter().map(|x| x.as_str().map(str::to_string).unwrap_or_else(|| x.to_string())).collect();
                from_file.push(flag);
                from_file.push(parts.join(","));
            }
            serde_json::Value::String(s) => {
                from_file.push(flag);
                from_file.push(s);
            }
            other => {
                from_file.push(flag);
                from_file.push(other.to_string());
            }
        }
    }
    let mut rest = args;
    rest.drain(i..i + consumed);
    let cmd_end = 2.min(rest.len());
    let mut out: Vec<String> = rest[..cmd_end].to_vec();
    out.extend(from_file);
    out.extend_from_slice(&rest[cmd_end..]);
    Ok(out)
}

fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| CliError::Config(format!("{SEED_ENV}='{s}' is not an integer"))),
        Err(_) => Ok(None),
    }
}

fn prepare_out(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() && fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(true) && !force {
        return Err(CliError::Config(format!("{} already exists and is not empty; pass --force to overwrite", dir.display())));
    }
    fs::create_dir_all(dir).map_err(io(dir))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value).expect("json serialises") + "\n").map_err(io(path))
}

fn command_line() -> Vec<String> {
    std::env::args().collect()
}

fn gen_dataset(a: GenDataset) -> Result<(), CliError> {
    let tasks = a
        .tasks
        .iter()
        .map(|t| parse_task(t, a.room_size, a.horizon, a.distractors))
        .collect::<Result<Vec<_>, _>>()?;
    let noise = NoiseDistribution::from_str(&a.noise).map_err(|e| CliError::Config(e.to_string()))?;
    let mut cfg = BuildConfig::new(tasks, a.n_per_task);
    cfg.noise = noise;
    cfg.window = a.window;
    cfg.seed = seed_override()?.unwrap_or(a.seed);
    cfg.split = SplitConfig { test_fraction: a.test_fraction, disjoint_goals: a.disjoint_goals };
    if a.out.exists() && !a.force {
        return Err(CliError::Config(format!("{} already exists; pass --force to overwrite", a.out.display())));
    }
    let start = Instant::now();
    let ds = dataset::build(&cfg)?;
    dataset::save(&ds, &a.out, a.force)?;
    for s in &ds.noise_stats {
        log::info!("p={}: {} attempts, {} kept, discard rate {:.3}", s.p, s.attempts, s.retained, s.discard_rate());
    }
    println!(
        "wrote {} trajectories and {} examples (train {}, test {}, unseen {}) to {} in {:.1}s",
        ds.trajectories.len(),
        ds.examples.len(),
        ds.count(Split::Train),
        ds.count(Split::Test),
        ds.count(Split::TestUnseen),
        a.out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<dataset::QaDataset, CliError> {
    if !dir.join("manifest.json").exists() {
        return Err(CliError::Data(format!("no dataset at {}", dir.display())));
    }
    Ok(dataset::load(dir)?)
}

fn load_qa(path: &Path) -> Result<QaModel, CliError> {
    let f = fs::File::open(path).map_err(io(path))?;
    QaModel::load(std::io::BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn train_qa(a: TrainQa) -> Result<(), CliError> {
    let ds = load_dataset(&a.data)?;
    prepare_out(&a.out, a.force)?;
    let seed = seed_override()?.unwrap_or(a.seed);
    let cfg = QaConfig { d_model: a.d_model, layers: a.layers, heads: a.heads, d_ff: a.d_ff, ..QaConfig::default() };
    let mut model = QaModel::new(cfg, ds.answer_vocab.clone(), seed)?;
    let tc = TrainConfig {
        batch_size: a.batch_size,
        lr: a.lr,
        decay_every: a.decay_every,
        decay_factor: a.decay_factor,
        epochs: a.epochs,
        seed,
        time_budget: a.time_budget_min.map(|m| Duration::from_secs_f64(m * 60.0)),
        eval_split: a.eval_split.into(),
    };
    let ckpt = a.out.join("qa.ckpt");
    let save = |m: &QaModel| -> Result<(), CliError> {
        let f = fs::File::create(&ckpt).map_err(io(&ckpt))?;
        m.save(std::io::BufWriter::new(f)).map_err(CliError::from)
    };
    let result = qa::train(&mut model, &ds, &tc, |l| {
        println!("epoch {:>3}  loss {:.4}  test SR {:.4}  ({:.0}s)", l.epoch, l.train_loss, l.test_sr, l.seconds)
    });
    let logs = match result {
        Ok(logs) => logs,
        Err(QaError::Diverged { epoch, last_good }) => {
            save(&last_good)?;
            return Err(CliError::Numeric(format!("training diverged in epoch {epoch}; last finite model saved to {}", ckpt.display())));
        }
        Err(e) => return Err(e.into()),
    };
    save(&model)?;
    let log_path = a.out.join("sr_log.csv");
    qa::write_sr_log(fs::File::create(&log_path).map_err(io(&log_path))?, &logs).map_err(io(&log_path))?;
    write_json(
        &a.out.join("manifest.json"),
        &json!({
            "command": "train-qa",
            "argv": command_line(),
            "resolved": { "args": &a, "seed": seed, "model": cfg, "train": tc },
            "dataset": a.data,
            "epochs": logs,
        }),
    )?;
    println!("saved {}", ckpt.display());
    Ok(())
}

fn eval_qa(a: EvalQa) -> Result<(), CliError> {
    let ds = load_dataset(&a.data)?;
    let model = load_qa(&a.ckpt)?;
    let ev = qa::evaluate(&model, &ds, a.split.into())?;
    println!("SR {:.4} ({}/{}) on {:?}", ev.sr(), ev.correct, ev.total, a.split);
    let mut rows: Vec<_> = ev.confusion.iter().collect();
    rows.sort_by_key(|((e, p), _)| (e.0, p.0));
    println!("{:<12} {:<12} {:>6}", "expected", "predicted", "count");
    for ((e, p), n) in &rows {
        println!("{:<12} {:<12} {:>6}", e.text(), p.text(), n);
    }
    if let Some(path) = &a.json {
        let confusion: Vec<_> = rows.iter().map(|((e, p), n)| json!({"expected": e.text(), "predicted": p.text(), "count": n})).collect();
        write_json(path, &json!({"split": a.split, "sr": ev.sr(), "correct": ev.correct, "total": ev.total, "confusion": confusion}))?;
    }
    Ok(())
}

fn train_agent(a: TrainAgent) -> Result<(), CliError> {
    let spec = a.task.spec()?;
    let seeds: Vec<u64> = match seed_override()? {
        Some(base) => (0..a.seeds.len() as u64).map(|i| base + i).collect(),
        None => a.seeds.clone(),
    };
    if seeds.is_empty() {
        return Err(CliError::Config("no seeds".into()));
    }
    let (n, k) = lambda_inputs(&spec);
    let lambda = if a.lambda == "auto" {
        shaping::auto_lambda(&spec, a.gamma)
    } else {
        a.lambda.parse::<f64>().map_err(|_| CliError::Config(format!("--lambda '{}' is neither auto nor a number", a.lambda)))?
    };
    let bound = lambda_bound(a.gamma, spec.horizon, success_reward(spec.horizon, spec.horizon), k).map_err(|e| CliError::Config(e.to_string()))?;
    let eager = a.shaping == ShapingArg::Eager;
    if eager && a.enforce_bound && lambda >= bound {
        return Err(CliError::Config(format!("λ = {lambda} is not below the bound {bound} (γ={}, H={}, k={k})", a.gamma, spec.horizon)));
    }
    let mut scfg = ShapingConfig::new(lambda, a.gamma).map_err(|e| CliError::Config(e.to_string()))?;
    scfg.simple_reward = a.simple_reward;
    scfg.no_noanswer = a.no_noanswer;
    let ppo = PpoConfig {
        gamma: a.gamma,
        lr: a.lr,
        batch: a.batch,
        minibatch: a.minibatch,
        epochs: a.ppo_epochs,
        envs: a.envs,
        recurrence: a.recurrence,
        normalize_returns: a.normalize_returns,
        ..PpoConfig::default()
    };
    ppo.validate()?;
    let policy_cfg = PolicyConfig { hidden: a.hidden, ..PolicyConfig::default() };
    let backend_kind = match (eager, a.qa, &a.qa_ckpt) {
        (false, _, _) => None,
        (true, None, _) => return Err(CliError::Config("--shaping eager needs --qa oracle or --qa learned --qa-ckpt PATH".into())),
        (true, Some(QaArg::Learned), None) => return Err(CliError::Config("--qa learned needs --qa-ckpt PATH".into())),
        (true, Some(q), _) => Some(q),
    };
    let resolved = json!({
        "task": spec,
        "task_name": spec.name(),
        "seeds": seeds,
        "frames": a.frames,
        "shaping": a.shaping,
        "qa": backend_kind,
        "qa_ckpt": a.qa_ckpt,
        "lambda": if eager { Some(lambda) } else { None },
        "lambda_inputs": { "n": n, "k": k },
        "lambda_bound": bound,
        "shaping_config": if eager { Some(scfg) } else { None },
        "ppo": ppo,
        "policy": policy_cfg,
        "eval_episodes": a.eval_episodes,
        "eval_argmax": a.eval_argmax,
    });
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&resolved).expect("json serialises"));
        return Ok(());
    }
    if let Some(p) = &a.qa_ckpt {
        if !p.exists() {
            return Err(CliError::Data(format!("QA checkpoint {} not found", p.display())));
        }
    }
    prepare_out(&a.out, a.force)?;
    let oracle;
    let learned;
    let backend: Option<&dyn QaBackend> = match backend_kind {
        None => None,
        Some(QaArg::Oracle) => {
            oracle = OracleQa::new(shaping::full_answer_vocab());
            Some(&oracle)
        }
        Some(QaArg::Learned) => {
            learned = load_qa(a.qa_ckpt.as_deref().expect("checked above"))?;
            Some(&learned)
        }
    };
    let mut runs = Vec::new();
    let mut all = Vec::new();
    for &seed in &seeds {
        let dir = a.out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let opts = TrainOptions { frames: a.frames, seed, policy: policy_cfg, ppo, keep_traces: if eager { a.trace_episodes } else { 0 } };
        let shaping = backend.map(|b| Shaping { cfg: scfg, backend: b });
        let every = (a.frames / ppo.batch as u64 / 20).max(1);
        let out = rl::train(&spec, shaping, &opts, |p, u| {
            if (p.frames / ppo.batch as u64) % every == 0 {
                println!(
                    "seed {seed} frames {:>9} return {:.3} success {:.3} bonus {:.3} entropy {:.3}",
                    p.frames, p.mean_return, p.success_rate, p.mean_bonus, u.entropy
                );
            }
        });
        let out = match out {
            Ok(o) => o,
            Err(RlError::NonFinite { frames, last_good }) => {
                let ck = dir.join("policy.ckpt");
                last_good.save(fs::File::create(&ck).map_err(io(&ck))?)?;
                return Err(CliError::Numeric(format!("seed {seed}: non-finite loss after {frames} frames; last finite policy saved")));
            }
            Err(e) => return Err(e.into()),
        };
        let curve = dir.join("curve.csv");
        rl::write_curve_csv(fs::File::create(&curve).map_err(io(&curve))?, &out.curve).map_err(io(&curve))?;
        let ck = dir.join("policy.ckpt");
        out.policy.save(std::io::BufWriter::new(fs::File::create(&ck).map_err(io(&ck))?))?;
        let ev = rl::evaluate(&out.policy, &spec, a.eval_episodes, seed, a.eval_argmax)?;
        write_json(&dir.join("eval.json"), &serde_json::to_value(&ev).expect("json serialises"))?;
        if eager {
            let path = dir.join("trace.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Data(e.to_string()))?;
            w.write_record(["episode", "t", "reward", "bonus", "answered"]).map_err(|e| CliError::Data(e.to_string()))?;
            for (ep, records) in &out.traces {
                let mut buf = Vec::new();
                write_trace_csv(&mut buf, records).map_err(io(&path))?;
                let text = String::from_utf8(buf).expect("csv is utf-8");
                for line in text.lines().skip(1) {
                    let mut fields = vec![ep.to_string()];
                    fields.extend(split_csv_line(line));
                    w.write_record(&fields).map_err(|e| CliError::Data(e.to_string()))?;
                }
            }
            w.flush().map_err(io(&path))?;
        }
        println!("seed {seed}: eval return {:.3}, success {:.3} over {} episodes ({:.0}s)", ev.mean_return, ev.success_rate, ev.episodes, out.seconds);
        runs.push(json!({"seed": seed, "eval": ev, "seconds": out.seconds}));
        all.push((seed, out.curve));
    }
    let combined = a.out.join("curves.csv");
    let mut w = csv::Writer::from_path(&combined).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_record(["seed", "frames", "mean_return", "std_return", "mean_bonus", "mean_shaped", "success_rate", "episodes"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for (seed, curve) in &all {
        for p in curve {
            w.write_record([
                seed.to_string(),
                p.frames.to_string(),
                p.mean_return.to_string(),
                p.std_return.to_string(),
                p.mean_bonus.to_string(),
                p.mean_shaped.to_string(),
                p.success_rate.to_string(),
                p.episodes.to_string(),
            ])
            .map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    w.flush().map_err(io(&combined))?;
    let label = a.out.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "run".into());
    let curves: Vec<Vec<CurvePoint>> = all.into_iter().map(|(_, c)| c).collect();
    let series = aggregate(&label, &curves, false)?;
    let svg_path = a.out.join("curve.svg");
    fs::write(&svg_path, svg::render(&[series], &spec.name(), "frames", "mean extrinsic return")).map_err(io(&svg_path))?;
    write_json(
        &a.out.join("manifest.json"),
        &json!({ "command": "train-agent", "argv": command_line(), "args": &a, "resolved": resolved, "runs": runs }),
    )?;
    Ok(())
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(line.as_bytes());
    r.records().next().and_then(|x| x.ok()).map(|rec| rec.iter().map(str::to_string).collect()).unwrap_or_default()
}

/// Mean and standard deviation across seeds on a shared frame grid.
fn aggregate(label: &str, curves: &[Vec<CurvePoint>], resample: bool) -> Result<svg::Series, CliError> {
    let first = curves.first().ok_or_else(|| CliError::Data(format!("{label}: no curves")))?;
    let grid: Vec<f64> = first.iter().map(|p| p.frames as f64).collect();
    let mut ys: Vec<Vec<f64>> = Vec::new();
    for c in curves {
        let xs: Vec<f64> = c.iter().map(|p| p.frames as f64).collect();
        let vals: Vec<f64> = c.iter().map(|p| p.mean_return).collect();
        if xs == grid {
            ys.push(vals);
        } else if resample {
            ys.push(grid.iter().map(|&g| interpolate(&xs, &vals, g)).collect());
        } else {
            return Err(CliError::Data(format!("{label}: seeds use different frame grids; pass --resample to interpolate")));
        }
    }
    let n = ys.len() as f64;
    let mean: Vec<f64> = (0..grid.len()).map(|i| ys.iter().map(|y| y[i]).sum::<f64>() / n).collect();
    let std = (ys.len() > 1).then(|| {
        (0..grid.len()).map(|i| (ys.iter().map(|y| (y[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt()).collect()
    });
    Ok(svg::Series { label: label.to_string(), x: grid, mean, std })
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    match xs.iter().position(|&v| v >= x) {
        None => *ys.last().unwrap_or(&0.0),
        Some(0) => ys[0],
        Some(i) => {
            let t = (x - xs[i - 1]) / (xs[i] - xs[i - 1]);
            ys[i - 1] + t * (ys[i] - ys[i - 1])
        }
    }
}

fn read_method(dir: &Path) -> Result<Vec<Vec<CurvePoint>>, CliError> {
    let mut seeds: BTreeMap<u64, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let entry = entry.map_err(io(dir))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(s) = name.strip_prefix("seed_").and_then(|s| s.parse().ok()) {
            seeds.insert(s, entry.path().join("curve.csv"));
        }
    }
    if seeds.is_empty() {
        return Err(CliError::Data(format!("{}: no seed_*/curve.csv", dir.display())));
    }
    seeds
        .values()
        .map(|p| rl::read_curve_csv(fs::File::open(p).map_err(io(p))?).map_err(io(p)))
        .collect()
}

fn plot(a: Plot) -> Result<(), CliError> {
    if !a.labels.is_empty() && a.labels.len() != a.inputs.len() {
        return Err(CliError::Config(format!("{} labels for {} inputs", a.labels.len(), a.inputs.len())));
    }
    let mut series = Vec::new();
    for (i, dir) in a.inputs.iter().enumerate() {
        let label = a.labels.get(i).cloned().unwrap_or_else(|| dir.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default());
        series.push(aggregate(&label, &read_method(dir)?, a.resample)?);
    }
    prepare_out(&a.out, a.force)?;
    let csv_path = a.out.join("aggregated.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_record(["method", "frames", "mean_return", "std_return"]).map_err(|e| CliError::Data(e.to_string()))?;
    for s in &series {
        for (j, (&x, &m)) in s.x.iter().zip(&s.mean).enumerate() {
            let sd = s.std.as_ref().map(|v| v[j]).unwrap_or(0.0);
            w.write_record([s.label.clone(), x.to_string(), m.to_string(), sd.to_string()]).map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    w.flush().map_err(io(&csv_path))?;
    let svg_path = a.out.join("plot.svg");
    fs::write(&svg_path, svg::render(&series, "learning curves", "frames", "mean extrinsic return")).map_err(io(&svg_path))?;
    write_json(&a.out.join("manifest.json"), &json!({ "command": "plot", "argv": command_line(), "args": &a }))?;
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return ExitCode::from(e.code());
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenDataset(a) => gen_dataset(a),
        Command::TrainQa(a) => train_qa(a),
        Command::EvalQa(a) => eval_qa(a),
        Command::TrainAgent(a) => train_agent(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
