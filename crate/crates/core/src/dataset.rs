//! Question-answering corpus: noisy bot trajectories, positive questions from
//! each trajectory's own goal, and no-answer questions borrowed from recent
//! other goals.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! manifest.json      format version, build config, counts, discard rates, answer set
//! vocab.txt          token table, one token per line
//! trajectories.jsonl one trajectory per line; observations referenced by offset
//! examples.jsonl     one (question, trajectory, answer) triple per line
//! observations.bin   "EAGROBS\0", u32 LE version, u64 LE count, count × 192 bytes
//! ```

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bot::{generate_trajectory, NoiseDistribution, Trajectory};
use crate::gridworld::{Action, GridError, Observation, TaskSpec, OBS_LEN};
use crate::lang::{
    build_answer_vocab, check_vocab_file, detokenize, qg, shared_words, write_vocab_file, AnswerVocab, Instruction,
    LexiconError, Question, Token,
};

pub const FORMAT_VERSION: u32 = 1;
const OBS_MAGIC: &[u8; 8] = b"EAGROBS\0";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("generation budget exhausted for {task}: {retained}/{wanted} trajectories after {attempts} attempts ({report})")]
    Budget { task: String, retained: usize, wanted: usize, attempts: usize, report: String },
    #[error("{0} already exists; pass force to overwrite")]
    Exists(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

/// Probability of keeping a no-answer question whose source goal shares `c`
/// words with the trajectory's goal.
pub fn keep_probability(c: f64) -> f64 {
    0.325 / (1.0 + (6.75 - 3.0 * c).exp()) + 0.095
}

/// One Bernoulli draw deciding whether a borrowed question sharing `c` words is kept.
pub fn retain_negative(c: usize, rng: &mut impl Rng) -> bool {
    rng.gen_bool(keep_probability(c as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    /// Held-out trajectories whose goals may also occur in training.
    Test,
    /// Held-out goals, present only with `disjoint_goals`.
    TestUnseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub disjoint_goals: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { test_fraction: 0.05, disjoint_goals: false }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn hash_unit(s: &str) -> f64 {
    (fnv1a(s.as_bytes()) % 1_000_000) as f64 / 1_000_000.0
}

impl SplitConfig {
    /// Deterministic split from the goal text and the trajectory identity.
    pub fn assign(&self, goal: &str, task: &str, seed: u64) -> Split {
        if self.disjoint_goals && hash_unit(goal) < self.test_fraction {
            return Split::TestUnseen;
        }
        if hash_unit(&format!("{task}#{seed}#{goal}")) < self.test_fraction {
            Split::Test
        } else {
            Split::Train
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub tasks: Vec<TaskSpec>,
    pub n_per_task: usize,
    pub noise: NoiseDistribution,
    /// Number of recent distinct goals that negatives are drawn from.
    pub window: usize,
    pub seed: u64,
    pub split: SplitConfig,
    /// Attempts allowed per task, as a multiple of `n_per_task`.
    pub budget_factor: usize,
}

impl BuildConfig {
    pub fn new(tasks: Vec<TaskSpec>, n_per_task: usize) -> Self {
        BuildConfig {
            tasks,
            n_per_task,
            noise: NoiseDistribution::wide(),
            window: 3,
            seed: 0,
            split: SplitConfig::default(),
            budget_factor: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub p: f64,
    pub attempts: usize,
    pub retained: usize,
}

impl NoiseStats {
    pub fn discard_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            1.0 - self.retained as f64 / self.attempts as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QaExample {
    pub question: Question,
    pub trajectory: usize,
    /// Masked word, or no-answer for borrowed questions.
    pub answer: Token,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaDataset {
    pub trajectories: Vec<Trajectory>,
    pub splits: Vec<Split>,
    pub examples: Vec<QaExample>,
    pub answer_vocab: AnswerVocab,
    pub config: BuildConfig,
    pub noise_stats: Vec<NoiseStats>,
}

impl QaDataset {
    pub fn split_of(&self, example: &QaExample) -> Split {
        self.splits[example.trajectory]
    }

    pub fn examples_in(&self, split: Split) -> impl Iterator<Item = &QaExample> {
        self.examples.iter().filter(move |e| self.splits[e.trajectory] == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.examples_in(split).count()
    }
}

fn progress_report(stats: &[NoiseStats]) -> String {
    stats
        .iter()
        .map(|s| format!("p={}: {}/{} kept", s.p, s.retained, s.attempts))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Generates the corpus. Tasks are visited round-robin so the recent-goal
/// window mixes tasks.
pub fn build(cfg: &BuildConfig) -> Result<QaDataset, DatasetError> {
    if cfg.tasks.is_empty() || cfg.n_per_task == 0 || cfg.window == 0 {
        return Err(DatasetError::Format("need at least one task, n_per_task ≥ 1 and window ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDA7A_5E7);
    let mut stats: Vec<NoiseStats> =
        cfg.noise.support().iter().map(|&(p, _)| NoiseStats { p, attempts: 0, retained: 0 }).collect();
    let mut retained = vec![0usize; cfg.tasks.len()];
    let mut attempts = vec![0usize; cfg.tasks.len()];
    let budget = cfg.n_per_task.saturating_mul(cfg.budget_factor.max(1));
    let mut trajectories = Vec::new();
    let mut splits = Vec::new();
    let mut examples = Vec::new();
    let mut recent: VecDeque<(Vec<Token>, Split)> = VecDeque::new();

    while retained.iter().any(|&r| r < cfg.n_per_task) {
        for (ti, spec) in cfg.tasks.iter().enumerate() {
            if retained[ti] >= cfg.n_per_task {
                continue;
            }
            if attempts[ti] >= budget {
                return Err(DatasetError::Budget {
                    task: spec.name(),
                    retained: retained[ti],
                    wanted: cfg.n_per_task,
                    attempts: attempts[ti],
                    report: progress_report(&stats),
                });
            }
            let seed = cfg.seed.wrapping_add((ti as u64) << 40).wrapping_add(attempts[ti] as u64);
            attempts[ti] += 1;
            let (p, traj) = generate_trajectory(spec, seed, &cfg.noise)?;
            let slot = stats.iter_mut().find(|s| s.p == p).expect("sampled p is in the support");
            slot.attempts += 1;
            let Some(traj) = traj else { continue };
            slot.retained += 1;
            retained[ti] += 1;

            let id = trajectories.len();
            let goal = traj.instruction.clone();
            let split = cfg.split.assign(&detokenize(&goal), &spec.name(), seed);
            let positives = qg(&Instruction::from_tokens(goal.clone()))?;
            for q in &positives {
                examples.push(QaExample { question: q.clone(), trajectory: id, answer: q.answer });
            }
            if !recent.is_empty() {
                let (other, other_split) = recent[rng.gen_range(0..recent.len())].clone();
                // Training never sees held-out goals, even as negatives.
                let leaks = other_split == Split::TestUnseen && split != Split::TestUnseen;
                if other != goal && !leaks {
                    let c = shared_words(&goal, &other);
                    for q in qg(&Instruction::from_tokens(other.clone()))? {
                        // A borrowed question identical to one of our own has a real answer.
                        let collides = positives.iter().any(|p| p.tokens == q.tokens);
                        if retain_negative(c, &mut rng) && !collides {
                            examples.push(QaExample { question: q, trajectory: id, answer: Token::NO_ANSWER });
                        }
                    }
                }
            }
            if let Some(pos) = recent.iter().position(|(g, _)| *g == goal) {
                recent.remove(pos);
            }
            recent.push_back((goal, split));
            if recent.len() > cfg.window {
                recent.pop_front();
            }
            trajectories.push(traj);
            splits.push(split);
        }
    }
    let corpus: Vec<Instruction> = trajectories.iter().map(|t| Instruction::from_tokens(t.instruction.clone())).collect();
    let answer_vocab = build_answer_vocab(&corpus)?;
    log::info!(
        "built {} trajectories and {} examples ({})",
        trajectories.len(),
        examples.len(),
        progress_report(&stats)
    );
    Ok(QaDataset { trajectories, splits, examples, answer_vocab, config: cfg.clone(), noise_stats: stats })
}

#[derive(Serialize, Deserialize)]
struct NoiseRecord {
    p: f64,
    attempts: usize,
    retained: usize,
    discard_rate: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    n_trajectories: usize,
    n_examples: usize,
    n_observations: usize,
    examples_per_split: Vec<(Split, usize)>,
    answer_vocab: Vec<String>,
    noise: Vec<NoiseRecord>,
    config: BuildConfig,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    id: usize,
    task: TaskSpec,
    seed: u64,
    noise_p: f64,
    instruction: String,
    actions: Vec<u8>,
    obs_offset: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    trajectory: usize,
    question: String,
    /// Word under the mask in the goal the question came from.
    masked: String,
    answer: String,
}

pub fn save(ds: &QaDataset, dir: &Path, force: bool) -> Result<(), DatasetError> {
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(DatasetError::Exists(dir.display().to_string()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let create = |name: &str| -> Result<BufWriter<File>, DatasetError> {
        let p = dir.join(name);
        Ok(BufWriter::new(File::create(&p).map_err(io_err(&p))?))
    };
    let ser = |e: serde_json::Error| DatasetError::Format(e.to_string());

    let mut vocab = create("vocab.txt")?;
    write_vocab_file(&mut vocab).map_err(io_err(dir))?;
    vocab.flush().map_err(io_err(dir))?;

    let n_obs: usize = ds.trajectories.iter().map(|t| t.observations.len()).sum();
    let mut obs = create("observations.bin")?;
    let mut traj_out = create("trajectories.jsonl")?;
    let mut header = Vec::with_capacity(20);
    header.extend_from_slice(OBS_MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.extend_from_slice(&(n_obs as u64).to_le_bytes());
    obs.write_all(&header).map_err(io_err(dir))?;
    let mut offset = 0;
    for (id, t) in ds.trajectories.iter().enumerate() {
        for o in &t.observations {
            obs.write_all(o.as_bytes()).map_err(io_err(dir))?;
        }
        let rec = TrajectoryRecord {
            id,
            task: t.task.clone(),
            seed: t.seed,
            noise_p: t.noise_p,
            instruction: detokenize(&t.instruction),
            actions: t.actions.iter().map(|a| a.id() as u8).collect(),
            obs_offset: offset,
            split: ds.splits[id],
        };
        offset += t.observations.len();
        serde_json::to_writer(&mut traj_out, &rec).map_err(ser)?;
        traj_out.write_all(b"\n").map_err(io_err(dir))?;
    }
    obs.flush().map_err(io_err(dir))?;
    traj_out.flush().map_err(io_err(dir))?;

    let mut ex_out = create("examples.jsonl")?;
    for e in &ds.examples {
        let rec = ExampleRecord {
            trajectory: e.trajectory,
            question: e.question.text(),
            masked: e.question.answer.text().into(),
            answer: e.answer.text().into(),
        };
        serde_json::to_writer(&mut ex_out, &rec).map_err(ser)?;
        ex_out.write_all(b"\n").map_err(io_err(dir))?;
    }
    ex_out.flush().map_err(io_err(dir))?;

    let manifest = Manifest {
        format: "eager-qa-dataset".into(),
        version: FORMAT_VERSION,
        n_trajectories: ds.trajectories.len(),
        n_examples: ds.examples.len(),
        n_observations: n_obs,
        examples_per_split: [Split::Train, Split::Test, Split::TestUnseen].into_iter().map(|s| (s, ds.count(s))).collect(),
        answer_vocab: ds.answer_vocab.answers().iter().map(|t| t.text().to_string()).collect(),
        noise: ds
            .noise_stats
            .iter()
            .map(|s| NoiseRecord { p: s.p, attempts: s.attempts, retained: s.retained, discard_rate: s.discard_rate() })
            .collect(),
        config: ds.config.clone(),
    };
    let mut m = create("manifest.json")?;
    serde_json::to_writer_pretty(&mut m, &manifest).map_err(ser)?;
    m.write_all(b"\n").map_err(io_err(dir))?;
    m.flush().map_err(io_err(dir))?;
    Ok(())
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| DatasetError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn load(dir: &Path) -> Result<QaDataset, DatasetError> {
    let mpath = dir.join("manifest.json");
    let mtext = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let raw: serde_json::Value =
        serde_json::from_str(&mtext).map_err(|e| DatasetError::Format(format!("manifest: {e}")))?;
    let version = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| DatasetError::Format("manifest lacks version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(DatasetError::Version { found: version as u32, expected: FORMAT_VERSION });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| DatasetError::Format(format!("manifest: {e}")))?;

    let vpath = dir.join("vocab.txt");
    check_vocab_file(BufReader::new(File::open(&vpath).map_err(io_err(&vpath))?))?;

    let opath = dir.join("observations.bin");
    let mut bytes = Vec::new();
    File::open(&opath).map_err(io_err(&opath))?.read_to_end(&mut bytes).map_err(io_err(&opath))?;
    if bytes.len() < 20 || &bytes[..8] != OBS_MAGIC {
        return Err(DatasetError::Format("observations.bin: bad magic".into()));
    }
    let v = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if v != FORMAT_VERSION {
        return Err(DatasetError::Version { found: v, expected: FORMAT_VERSION });
    }
    let n_obs = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() != n_obs * OBS_LEN || n_obs != manifest.n_observations {
        return Err(DatasetError::Format(format!(
            "observations.bin holds {} bytes, header promises {n_obs} observations",
            body.len()
        )));
    }

    let records: Vec<TrajectoryRecord> = read_lines(&dir.join("trajectories.jsonl"))?;
    if records.len() != manifest.n_trajectories {
        return Err(DatasetError::Format(format!("{} trajectories listed, manifest says {}", records.len(), manifest.n_trajectories)));
    }
    let mut trajectories = Vec::with_capacity(records.len());
    let mut splits = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        if r.id != i {
            return Err(DatasetError::Format(format!("trajectory {i} has id {}", r.id)));
        }
        let actions = r
            .actions
            .iter()
            .map(|&a| Action::from_id(a as usize).ok_or_else(|| DatasetError::Format(format!("trajectory {i}: action id {a}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let end = r.obs_offset + actions.len();
        if end > n_obs {
            return Err(DatasetError::Format(format!("trajectory {i} reads past the observation store")));
        }
        let observations = (r.obs_offset..end)
            .map(|k| Observation::from_bytes(&body[k * OBS_LEN..(k + 1) * OBS_LEN]).unwrap())
            .collect();
        let instruction = Instruction::parse(&r.instruction)?.tokens().to_vec();
        trajectories.push(Trajectory {
            task: r.task,
            seed: r.seed,
            noise_p: r.noise_p,
            instruction,
            observations,
            actions,
            success: true,
        });
        splits.push(r.split);
    }

    let ex_records: Vec<ExampleRecord> = read_lines(&dir.join("examples.jsonl"))?;
    let mut examples = Vec::with_capacity(ex_records.len());
    for r in ex_records {
        if r.trajectory >= trajectories.len() {
            return Err(DatasetError::Format(format!("example refers to missing trajectory {}", r.trajectory)));
        }
        let question = Question::parse(&r.question, Token::of(&r.masked)?)?;
        examples.push(QaExample { question, trajectory: r.trajectory, answer: Token::of(&r.answer)? });
    }
    let answers = manifest
        .answer_vocab
        .iter()
        .map(|w| Token::of(w))
        .collect::<Result<Vec<_>, _>>()?;
    let answer_vocab = AnswerVocab::from_answers(answers);
    let noise_stats =
        manifest.noise.iter().map(|n| NoiseStats { p: n.p, attempts: n.attempts, retained: n.retained }).collect();
    Ok(QaDataset { trajectories, splits, examples, answer_vocab, config: manifest.config, noise_stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{Layout, TaskKind};

    fn small() -> QaDataset {
        let tasks = vec![
            TaskSpec::new(TaskKind::PutNextTo, Layout::Local).unwrap(),
            TaskSpec::new(TaskKind::Open, Layout::Medium).unwrap(),
        ];
        let mut cfg = BuildConfig::new(tasks, 6);
        cfg.split = SplitConfig { test_fraction: 0.3, disjoint_goals: true };
        build(&cfg).unwrap()
    }

    #[test]
    fn keep_probability_points() {
        assert!((keep_probability(0.0) - (0.325 / (1.0 + 6.75f64.exp()) + 0.095)).abs() < 1e-15);
        assert!((keep_probability(2.25) - 0.2575).abs() < 1e-12);
        assert!((keep_probability(1e3) - 0.42).abs() < 1e-12);
    }

    #[test]
    fn positives_answer_their_own_goal() {
        let ds = small();
        assert_eq!(ds.trajectories.len(), 12);
        for e in &ds.examples {
            let goal = &ds.trajectories[e.trajectory].instruction;
            if e.answer != Token::NO_ANSWER {
                assert_eq!(goal[e.question.position], e.answer);
                assert_eq!(&e.question.resubstitute(), goal);
            } else {
                assert_ne!(&e.question.resubstitute(), goal);
            }
            assert!(ds.answer_vocab.index_of(e.answer).is_some());
        }
    }

    #[test]
    fn round_trip_and_version_check() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path(), false).unwrap();
        assert!(matches!(save(&ds, dir.path(), false), Err(DatasetError::Exists(_))));
        let back = load(dir.path()).unwrap();
        assert_eq!(back, ds);

        let bin = dir.path().join("observations.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[8] += 1;
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(DatasetError::Version { found: 2, .. })));
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(small(), small());
    }

    #[test]
    fn exhausted_budget_reports_progress() {
        let spec = TaskSpec::new(TaskKind::PutNextTo, Layout::Local).unwrap().with_horizon(3);
        let cfg = BuildConfig { budget_factor: 2, ..BuildConfig::new(vec![spec], 5) };
        match build(&cfg) {
            Err(DatasetError::Budget { attempts, report, .. }) => {
                assert_eq!(attempts, 10);
                assert!(report.contains("p=0"));
            }
            other => panic!("expected a budget error, got {other:?}"),
        }
    }
}
