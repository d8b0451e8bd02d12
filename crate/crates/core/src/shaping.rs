//! Question-driven reward shaping.
//!
//! Each episode starts with one question per content word of the goal. After
//! every step the unanswered questions are put to a QA backend; a question
//! answered correctly pays `λ · confidence` and leaves the set. When the
//! episode succeeds at step `N`, the final reward becomes
//! `r_N − Σ_{t∈T_S} γ^{t−N} · bonus_t`, which makes the discounted return of
//! every successful episode equal to that of the unshaped episode.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{default_horizon, success_reward, Action, Layout, Observation, TaskKind, TaskSpec};
use crate::lang::{qg, AnswerVocab, Instruction, Question, Token};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapingError {
    #[error("QA backend failed: {0}")]
    Backend(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
}

/// Probabilities over an answer vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerDistribution {
    pub probs: Vec<f64>,
}

impl AnswerDistribution {
    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[i] = 1.0;
        AnswerDistribution { probs }
    }

    /// Most probable index, lowest index on ties, with its probability.
    pub fn greedy(&self) -> (usize, f64) {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        (best, self.probs[best])
    }

    /// Zeroes no-answer and renormalises; `None` when nothing is left.
    pub fn without(&self, index: usize) -> Option<Self> {
        let mut probs = self.probs.clone();
        probs[index] = 0.0;
        let s: f64 = probs.iter().sum();
        (s > 0.0).then(|| AnswerDistribution { probs: probs.iter().map(|p| p / s).collect() })
    }
}

/// What a backend may look at: the trajectory prefix, plus for the oracle the
/// per-word flags of the current goal.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeView<'a> {
    pub observations: &'a [Observation],
    pub actions: &'a [Action],
    /// For each instruction position, whether the entity it names has been dealt with.
    pub mention_flags: &'a [bool],
}

pub trait QaBackend {
    fn answer_vocab(&self) -> &AnswerVocab;
    fn answer_batch(&self, questions: &[&Question], view: &EpisodeView<'_>) -> Result<Vec<AnswerDistribution>, ShapingError>;
}

/// Ground-truth answers read from the simulator, always fully confident.
#[derive(Clone, Debug)]
pub struct OracleQa {
    vocab: AnswerVocab,
}

impl OracleQa {
    pub fn new(vocab: AnswerVocab) -> Self {
        OracleQa { vocab }
    }
}

impl QaBackend for OracleQa {
    fn answer_vocab(&self) -> &AnswerVocab {
        &self.vocab
    }

    fn answer_batch(&self, questions: &[&Question], view: &EpisodeView<'_>) -> Result<Vec<AnswerDistribution>, ShapingError> {
        let n = self.vocab.len();
        questions
            .iter()
            .map(|q| {
                let done = *view.mention_flags.get(q.position).ok_or_else(|| {
                    ShapingError::Backend(format!("question position {} outside the goal", q.position))
                })?;
                let idx = if done {
                    self.vocab
                        .index_of(q.answer)
                        .ok_or_else(|| ShapingError::Backend(format!("'{}' not in the answer set", q.answer)))?
                } else {
                    self.vocab.no_answer_index()
                };
                Ok(AnswerDistribution::one_hot(n, idx))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapingConfig {
    pub lambda: f64,
    pub gamma: f64,
    /// Pay `λ` per correct answer instead of `λ · confidence`.
    pub simple_reward: bool,
    /// Remove no-answer from the distribution before taking the greedy answer.
    pub no_noanswer: bool,
}

impl ShapingConfig {
    pub fn new(lambda: f64, gamma: f64) -> Result<Self, ShapingError> {
        if !(lambda > 0.0) || !(gamma > 0.0 && gamma <= 1.0) {
            return Err(ShapingError::Config(format!("need λ > 0 and 0 < γ ≤ 1, got λ={lambda}, γ={gamma}")));
        }
        Ok(ShapingConfig { lambda, gamma, simple_reward: false, no_noanswer: false })
    }
}

/// Unanswered questions with their index in the initial set.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveQuestionSet {
    questions: Vec<(usize, Question)>,
}

impl ActiveQuestionSet {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, Question)> {
        self.questions.iter()
    }
}

pub fn init_episode(instruction: &Instruction) -> Result<ActiveQuestionSet, ShapingError> {
    let qs = qg(instruction).map_err(|e| ShapingError::Usage(e.to_string()))?;
    Ok(ActiveQuestionSet { questions: qs.into_iter().enumerate().collect() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapedStepRecord {
    pub t: usize,
    pub reward: f64,
    pub bonus: f64,
    /// Initial-set indices of the questions answered at this step.
    pub answered: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeShapingLedger {
    pub records: Vec<ShapedStepRecord>,
}

impl EpisodeShapingLedger {
    /// Steps at which a bonus was paid.
    pub fn bonus_steps(&self) -> Vec<usize> {
        self.records.iter().filter(|r| r.bonus > 0.0).map(|r| r.t).collect()
    }

    pub fn total_bonus(&self) -> f64 {
        self.records.iter().map(|r| r.bonus).sum()
    }
}

/// Bonus for one step: queries every active question, pays the correct ones
/// and removes them once the sweep is over.
pub fn qa_shape(
    active: &mut ActiveQuestionSet,
    backend: &dyn QaBackend,
    view: &EpisodeView<'_>,
    r_t: f64,
    t: usize,
    cfg: &ShapingConfig,
) -> Result<(f64, ShapedStepRecord), ShapingError> {
    if t == 0 || view.actions.len() != t || view.observations.len() != t {
        return Err(ShapingError::Usage(format!(
            "step {t} needs a prefix of {t} observations and actions, got {} and {}",
            view.observations.len(),
            view.actions.len()
        )));
    }
    let mut record = ShapedStepRecord { t, reward: r_t, bonus: 0.0, answered: Vec::new() };
    if active.is_empty() {
        return Ok((r_t, record));
    }
    let refs: Vec<&Question> = active.questions.iter().map(|(_, q)| q).collect();
    let dists = backend.answer_batch(&refs, view)?;
    if dists.len() != refs.len() {
        return Err(ShapingError::Backend(format!("{} answers for {} questions", dists.len(), refs.len())));
    }
    let vocab = backend.answer_vocab();
    let na = vocab.no_answer_index();
    let mut keep = Vec::with_capacity(active.len());
    for ((id, q), dist) in active.questions.drain(..).zip(dists) {
        let dist = if cfg.no_noanswer { dist.without(na) } else { Some(dist) };
        let correct = dist.as_ref().map(|d| d.greedy()).filter(|&(i, _)| i != na && vocab.token(i) == q.answer);
        match correct {
            Some((_, conf)) => {
                record.bonus += cfg.lambda * if cfg.simple_reward { 1.0 } else { conf };
                record.answered.push(id);
            }
            None => keep.push((id, q)),
        }
    }
    active.questions = keep;
    Ok((r_t + record.bonus, record))
}

/// Final reward of a successful episode ending at step `n`.
pub fn neutralise(ledger: &EpisodeShapingLedger, r_n: f64, n: usize, gamma: f64, success: bool) -> Result<f64, ShapingError> {
    if !success {
        return Err(ShapingError::Usage("only successful episodes are neutralised".into()));
    }
    let paid: f64 = ledger
        .records
        .iter()
        .filter(|r| r.bonus > 0.0)
        .map(|r| gamma.powi(r.t as i32 - n as i32) * r.bonus)
        .sum();
    Ok(r_n - paid)
}

/// Exclusive upper bound on λ below which no failed episode out-earns a
/// successful one.
pub fn lambda_bound(gamma: f64, h: u32, r_h: f64, k: usize) -> Result<f64, ShapingError> {
    if k == 0 {
        return Err(ShapingError::Config("λ bound undefined without questions (k = 0)".into()));
    }
    Ok(gamma.powi(h as i32) * r_h / k as f64)
}

/// λ assuming successful episodes take `n` steps.
pub fn lambda_for_task(gamma: f64, n: u32, r_n: f64, k: usize) -> f64 {
    gamma.powi(n as i32) * r_n / k as f64
}

/// Worst-case success length `N` and question count `k` used for λ.
/// Listed tasks use their tabulated values; others assume `N = 5H/16`.
/// `N` scales with the horizon when it differs from the default.
pub fn lambda_inputs(spec: &TaskSpec) -> (u32, usize) {
    let (n0, k) = match (spec.kind, spec.layout) {
        (TaskKind::PutNextTo, Layout::Local) => (Some(40), 4),
        (TaskKind::PutNextTo, Layout::Medium) => (Some(80), 4),
        (TaskKind::Unlock, Layout::Medium) => (Some(40), 2),
        (TaskKind::Sequence, Layout::Medium) => (Some(185), 9),
        (TaskKind::PutNextTo, _) => (None, 4),
        (TaskKind::Sequence, _) => (None, 9),
        _ => (None, 2),
    };
    let h0 = default_horizon(spec.kind, spec.layout);
    let n0 = n0.unwrap_or(h0 * 5 / 16) as f64;
    let n = (n0 * spec.horizon as f64 / h0 as f64).round().max(1.0) as u32;
    (n.min(spec.horizon), k)
}

/// λ from [`lambda_inputs`] and [`lambda_for_task`].
pub fn auto_lambda(spec: &TaskSpec, gamma: f64) -> f64 {
    let (n, k) = lambda_inputs(spec);
    lambda_for_task(gamma, n, success_reward(n, spec.horizon), k)
}

/// Per-episode shaping state.
#[derive(Clone, Debug)]
pub struct EpisodeShaper {
    pub cfg: ShapingConfig,
    pub active: ActiveQuestionSet,
    pub ledger: EpisodeShapingLedger,
    k: usize,
}

impl EpisodeShaper {
    pub fn new(instruction: &Instruction, cfg: ShapingConfig) -> Result<Self, ShapingError> {
        let active = init_episode(instruction)?;
        let k = active.len();
        Ok(EpisodeShaper { cfg, active, ledger: EpisodeShapingLedger::default(), k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Shaped reward for step `t`, neutralised when the episode ends in success.
    pub fn step(
        &mut self,
        backend: &dyn QaBackend,
        view: &EpisodeView<'_>,
        r_t: f64,
        t: usize,
        done: bool,
        success: bool,
    ) -> Result<f64, ShapingError> {
        let (shaped, rec) = qa_shape(&mut self.active, backend, view, r_t, t, &self.cfg)?;
        let bonus = rec.bonus;
        self.ledger.records.push(rec);
        if done && success {
            Ok(bonus + neutralise(&self.ledger, r_t, t, self.cfg.gamma, true)?)
        } else {
            Ok(shaped)
        }
    }
}

/// Cumulative confidence of correct answers over a whole trajectory.
/// `flags[t - 1]` are the oracle flags after step `t`; learned backends ignore them.
pub fn score_trajectory(
    instruction: &Instruction,
    observations: &[Observation],
    actions: &[Action],
    flags: &[Vec<bool>],
    backend: &dyn QaBackend,
) -> Result<f64, ShapingError> {
    let mut active = init_episode(instruction)?;
    let cfg = ShapingConfig { lambda: 1.0, gamma: 1.0, simple_reward: false, no_noanswer: false };
    let empty = vec![false; instruction.len()];
    let mut m = 0.0;
    for t in 1..=actions.len() {
        if active.is_empty() {
            break;
        }
        let view = EpisodeView {
            observations: &observations[..t],
            actions: &actions[..t],
            mention_flags: flags.get(t - 1).unwrap_or(&empty),
        };
        m += qa_shape(&mut active, backend, &view, 0.0, t, &cfg)?.1.bonus;
    }
    Ok(m)
}

/// Writes `t,reward,bonus,answered` rows; answered ids are `;`-separated.
pub fn write_trace_csv(w: impl Write, records: &[ShapedStepRecord]) -> Result<(), std::io::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "reward", "bonus", "answered"])?;
    for r in records {
        let ids: Vec<String> = r.answered.iter().map(|i| i.to_string()).collect();
        out.write_record([r.t.to_string(), r.reward.to_string(), r.bonus.to_string(), ids.join(";")])?;
    }
    out.flush()
}

/// Answer vocabulary of every template over all colours and nouns.
pub fn full_answer_vocab() -> AnswerVocab {
    let mut answers: Vec<Token> = crate::gridworld::Color::ALL.iter().map(|c| Token::of(c.name()).unwrap()).collect();
    answers.extend(["ball", "box", "key", "door"].iter().map(|w| Token::of(w).unwrap()));
    AnswerVocab::from_answers(answers)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(AnswerVocab, Vec<f64>);

    impl QaBackend for Fixed {
        fn answer_vocab(&self) -> &AnswerVocab {
            &self.0
        }
        fn answer_batch(&self, qs: &[&Question], _: &EpisodeView<'_>) -> Result<Vec<AnswerDistribution>, ShapingError> {
            Ok(qs.iter().map(|_| AnswerDistribution { probs: self.1.clone() }).collect())
        }
    }

    fn view<'a>(obs: &'a [Observation], acts: &'a [Action], flags: &'a [bool]) -> EpisodeView<'a> {
        EpisodeView { observations: obs, actions: acts, mention_flags: flags }
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let d = AnswerDistribution { probs: vec![0.1, 0.45, 0.45] };
        assert_eq!(d.greedy(), (1, 0.45));
    }

    #[test]
    fn confident_answer_pays_lambda_times_confidence() {
        let ins = Instruction::parse("open the red door").unwrap();
        let vocab = AnswerVocab::from_answers(vec![Token::of("red").unwrap(), Token::of("door").unwrap()]);
        let backend = Fixed(vocab, vec![0.8, 0.1, 0.1]);
        let mut active = init_episode(&ins).unwrap();
        let cfg = ShapingConfig::new(2.4, 0.99).unwrap();
        let obs = [Observation([0; crate::gridworld::OBS_LEN])];
        let (r, rec) = qa_shape(&mut active, &backend, &view(&obs, &[Action::Forward], &[]), 0.0, 1, &cfg).unwrap();
        assert!((rec.bonus - 1.92).abs() < 1e-12);
        assert_eq!(r, rec.bonus);
        assert_eq!(rec.answered, vec![0]);
        assert_eq!(active.len(), 1);
    }

    #[test]
    fn no_answer_is_never_paid_and_can_be_ablated() {
        let ins = Instruction::parse("open the red door").unwrap();
        let vocab = AnswerVocab::from_answers(vec![Token::of("red").unwrap(), Token::of("door").unwrap()]);
        let backend = Fixed(vocab, vec![0.3, 0.1, 0.6]);
        let obs = [Observation([0; crate::gridworld::OBS_LEN])];
        let v = view(&obs, &[Action::Forward], &[]);
        let mut cfg = ShapingConfig::new(1.0, 0.99).unwrap();
        let mut active = init_episode(&ins).unwrap();
        let (_, rec) = qa_shape(&mut active, &backend, &v, 0.0, 1, &cfg).unwrap();
        assert_eq!(rec.bonus, 0.0);
        cfg.no_noanswer = true;
        let (_, rec) = qa_shape(&mut active, &backend, &v, 0.0, 1, &cfg).unwrap();
        assert!((rec.bonus - 0.75).abs() < 1e-12);
        cfg.simple_reward = true;
        let (_, rec) = qa_shape(&mut init_episode(&ins).unwrap(), &backend, &v, 0.0, 1, &cfg).unwrap();
        assert_eq!(rec.bonus, 1.0);
    }

    #[test]
    fn neutralise_single_bonus() {
        let ledger = EpisodeShapingLedger {
            records: vec![ShapedStepRecord { t: 3, reward: 0.0, bonus: 1.5, answered: vec![0] }],
        };
        let r = neutralise(&ledger, 10.0, 7, 0.9, true).unwrap();
        assert!((r - (10.0 - 0.9f64.powi(-4) * 1.5)).abs() < 1e-12);
        assert!(neutralise(&ledger, 0.0, 7, 0.9, false).is_err());
        assert_eq!(neutralise(&EpisodeShapingLedger::default(), 4.0, 7, 0.9, true).unwrap(), 4.0);
    }

    #[test]
    fn lambda_formulas() {
        assert!(lambda_bound(0.99, 128, 2.0, 0).is_err());
        let b = lambda_bound(0.99, 128, 2.0, 4).unwrap();
        assert!((b - 0.99f64.powi(128) * 0.5).abs() < 1e-15);
        assert!((b - 0.138_125_833_849_604).abs() < 1e-12);
        assert_eq!(lambda_bound(0.99, 10, 3.0, 1).unwrap(), 0.99f64.powi(10) * 3.0);
    }

    #[test]
    fn auto_lambda_follows_the_table() {
        let l = |k, lay| auto_lambda(&TaskSpec::new(k, lay).unwrap(), 0.99);
        assert!((l(TaskKind::PutNextTo, Layout::Local) - 2.4).abs() < 0.05);
        assert!((l(TaskKind::PutNextTo, Layout::Medium) - 1.6).abs() < 0.05);
        assert!((l(TaskKind::Unlock, Layout::Medium) - 4.8).abs() < 0.05);
        assert!((l(TaskKind::Sequence, Layout::Medium) - 0.23).abs() < 0.01);
        let small = TaskSpec::new(TaskKind::PutNextTo, Layout::Local).unwrap().with_horizon(96);
        assert_eq!(lambda_inputs(&small), (30, 4));
    }

    #[test]
    fn full_vocab_has_eleven_answers() {
        assert_eq!(full_answer_vocab().len(), 11);
    }
}
