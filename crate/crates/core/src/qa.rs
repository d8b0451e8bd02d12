//! Question answering over trajectories.
//!
//! A small episodic transformer reads the question tokens, one encoded frame
//! per step and the action taken at that step as a single sequence, then
//! classifies the hidden state at the masked position into the answer set.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::time::{Duration, Instant};

use eager_nn::checkpoint::{read_params, write_params, CheckpointError};
use eager_nn::{Adam, ConvGeom, ParamId, ParamStore, Real, StepDecay, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{QaDataset, QaExample, Split};
use crate::gridworld::{shape_id, Action, Observation, COLOR_COUNT, OBS_LEN, STATE_COUNT, VIEW};
use crate::lang::{vocabulary, AnswerVocab, Question, Token};
use crate::shaping::{AnswerDistribution, EpisodeView, QaBackend, ShapingError};

#[derive(Debug, Error)]
pub enum QaError {
    #[error("model error: {0}")]
    Model(String),
    #[error("loss became non-finite in epoch {epoch}; the last finite parameters were kept")]
    Diverged { epoch: usize, last_good: Box<QaModel> },
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("the {0:?} split has no examples")]
    EmptySplit(Split),
}

/// Rows of the cell table: shape ids, then colours, then door states.
pub const CELL_TABLE_ROWS: usize = shape_id::COUNT + COLOR_COUNT + STATE_COUNT;

/// Cell-table rows of every observation channel, `3` per cell.
pub fn cell_indices(obs: &Observation, out: &mut Vec<usize>) {
    for cell in obs.as_bytes().chunks(3) {
        out.push(cell[0] as usize);
        out.push(shape_id::COUNT + cell[1] as usize);
        out.push(shape_id::COUNT + COLOR_COUNT + cell[2] as usize);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub cell_dim: usize,
    pub conv1: usize,
    pub conv2: usize,
    /// Positions past this share the last embedding.
    pub max_positions: usize,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig { d_model: 128, layers: 2, heads: 4, d_ff: 256, cell_dim: 8, conv1: 16, conv2: 32, max_positions: 256 }
    }
}

impl QaConfig {
    pub fn tiny() -> Self {
        QaConfig { d_model: 4, layers: 1, heads: 2, d_ff: 4, cell_dim: 2, conv1: 2, conv2: 2, max_positions: 4 }
    }

    fn validate(&self) -> Result<(), QaError> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 || self.max_positions == 0 {
            return Err(QaError::Model(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layer {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Ids {
    tokens: ParamId,
    actions: ParamId,
    positions: ParamId,
    modality: ParamId,
    cells: ParamId,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    frame: (ParamId, ParamId),
    layers: Vec<Layer>,
    ln_out: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

fn init_params(cfg: &QaConfig, n_answers: usize, seed: u64) -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let d = cfg.d_model;
    let emb = 0.1;
    p.uniform("tokens", &[vocabulary().len(), d], emb, &mut rng);
    p.uniform("actions", &[Action::COUNT, d], emb, &mut rng);
    p.uniform("positions", &[cfg.max_positions, d], emb, &mut rng);
    p.uniform("modality", &[3, d], emb, &mut rng);
    p.uniform("cells", &[CELL_TABLE_ROWS, cfg.cell_dim], 0.5, &mut rng);
    p.glorot("conv1.w", 9 * cfg.cell_dim, cfg.conv1, &mut rng);
    p.zeros("conv1.b", &[cfg.conv1]);
    p.glorot("conv2.w", 9 * cfg.conv1, cfg.conv2, &mut rng);
    p.zeros("conv2.b", &[cfg.conv2]);
    let half = VIEW / 2;
    p.glorot("frame.w", half * half * cfg.conv2, d, &mut rng);
    p.zeros("frame.b", &[d]);
    for l in 0..cfg.layers {
        p.ones(&format!("l{l}.ln1.g"), &[d]);
        p.zeros(&format!("l{l}.ln1.b"), &[d]);
        for m in ["q", "k", "v", "o"] {
            p.glorot(&format!("l{l}.{m}.w"), d, d, &mut rng);
            p.zeros(&format!("l{l}.{m}.b"), &[d]);
        }
        p.ones(&format!("l{l}.ln2.g"), &[d]);
        p.zeros(&format!("l{l}.ln2.b"), &[d]);
        p.glorot(&format!("l{l}.ff1.w"), d, cfg.d_ff, &mut rng);
        p.zeros(&format!("l{l}.ff1.b"), &[cfg.d_ff]);
        p.glorot(&format!("l{l}.ff2.w"), cfg.d_ff, d, &mut rng);
        p.zeros(&format!("l{l}.ff2.b"), &[d]);
    }
    p.ones("out.ln.g", &[d]);
    p.zeros("out.ln.b", &[d]);
    p.glorot("head.w", d, n_answers, &mut rng);
    p.zeros("head.b", &[n_answers]);
    p
}

fn lookup<F: Real>(p: &ParamStore<F>, cfg: &QaConfig, n_answers: usize) -> Result<Ids, QaError> {
    let get = |name: &str, shape: &[usize]| -> Result<ParamId, QaError> {
        let id = p.find(name).ok_or_else(|| QaError::Model(format!("missing parameter {name}")))?;
        if p.get(id).shape() != shape {
            return Err(QaError::Model(format!("{name} has shape {:?}, expected {shape:?}", p.get(id).shape())));
        }
        Ok(id)
    };
    let d = cfg.d_model;
    let pair = |n: &str, rows: usize, cols: usize| -> Result<(ParamId, ParamId), QaError> {
        Ok((get(&format!("{n}.w"), &[rows, cols])?, get(&format!("{n}.b"), &[cols])?))
    };
    let ln = |n: &str| -> Result<(ParamId, ParamId), QaError> { Ok((get(&format!("{n}.g"), &[d])?, get(&format!("{n}.b"), &[d])?)) };
    let half = VIEW / 2;
    let layers = (0..cfg.layers)
        .map(|l| {
            Ok(Layer {
                ln1: ln(&format!("l{l}.ln1"))?,
                wq: pair(&format!("l{l}.q"), d, d)?,
                wk: pair(&format!("l{l}.k"), d, d)?,
                wv: pair(&format!("l{l}.v"), d, d)?,
                wo: pair(&format!("l{l}.o"), d, d)?,
                ln2: ln(&format!("l{l}.ln2"))?,
                ff1: pair(&format!("l{l}.ff1"), d, cfg.d_ff)?,
                ff2: pair(&format!("l{l}.ff2"), cfg.d_ff, d)?,
            })
        })
        .collect::<Result<Vec<_>, QaError>>()?;
    Ok(Ids {
        tokens: get("tokens", &[vocabulary().len(), d])?,
        actions: get("actions", &[Action::COUNT, d])?,
        positions: get("positions", &[cfg.max_positions, d])?,
        modality: get("modality", &[3, d])?,
        cells: get("cells", &[CELL_TABLE_ROWS, cfg.cell_dim])?,
        conv1: pair("conv1", 9 * cfg.cell_dim, cfg.conv1)?,
        conv2: pair("conv2", 9 * cfg.conv1, cfg.conv2)?,
        frame: pair("frame", half * half * cfg.conv2, d)?,
        layers,
        ln_out: ln("out.ln")?,
        head: pair("head", d, n_answers)?,
    })
}

/// One question about one trajectory prefix.
#[derive(Clone, Copy, Debug)]
pub struct QaItem<'a> {
    pub question: &'a [Token],
    pub observations: &'a [Observation],
    pub actions: &'a [Action],
}

impl QaItem<'_> {
    fn mask_position(&self) -> Result<usize, QaError> {
        self.question
            .iter()
            .position(|&t| t == Token::MASK)
            .ok_or_else(|| QaError::Model("question has no masked word".into()))
    }
}

#[derive(Clone, Debug)]
pub struct QaModel<F: Real = f32> {
    pub cfg: QaConfig,
    pub answers: AnswerVocab,
    pub params: ParamStore<F>,
    ids: Ids,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: QaConfig,
    answers: Vec<String>,
}

impl QaModel<f32> {
    pub fn new(cfg: QaConfig, answers: AnswerVocab, seed: u64) -> Result<Self, QaError> {
        cfg.validate()?;
        let params = init_params(&cfg, answers.len(), seed);
        let ids = lookup(&params, &cfg, answers.len())?;
        Ok(QaModel { cfg, answers, params, ids })
    }

    pub fn save(&self, w: impl Write) -> Result<(), QaError> {
        let meta = Meta {
            kind: "qa".into(),
            config: self.cfg,
            answers: self.answers.answers().iter().map(|t| t.text().to_string()).collect(),
        };
        write_params(w, &serde_json::to_string(&meta).expect("meta serialises"), &self.params)?;
        Ok(())
    }

    pub fn load(r: impl Read) -> Result<Self, QaError> {
        let (meta, params) = read_params::<f32>(r)?;
        let meta: Meta = serde_json::from_str(&meta).map_err(|e| QaError::Model(format!("bad checkpoint metadata: {e}")))?;
        if meta.kind != "qa" {
            return Err(QaError::Model(format!("checkpoint holds a '{}' model, not a QA model", meta.kind)));
        }
        let answers = meta
            .answers
            .iter()
            .map(|w| Token::of(w).map_err(|e| QaError::Model(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let answers = AnswerVocab::from_answers(answers);
        meta.config.validate()?;
        let ids = lookup(&params, &meta.config, answers.len())?;
        Ok(QaModel { cfg: meta.config, answers, params, ids })
    }

    pub fn cast_f64(&self) -> QaModel<f64> {
        QaModel { cfg: self.cfg, answers: self.answers.clone(), params: self.params.cast(), ids: self.ids.clone() }
    }
}

impl<F: Real> QaModel<F> {
    /// Records the forward pass and returns logits `[items, answers]`.
    pub fn logits<'p>(&self, tape: &mut Tape<'p, F>, items: &[QaItem<'_>]) -> Result<Var, QaError> {
        if items.is_empty() {
            return Err(QaError::Model("empty batch".into()));
        }
        let cfg = &self.cfg;
        let ids = &self.ids;
        let n_vocab = vocabulary().len();

        // Frames are shared by every item whose trajectory starts at the same slice.
        let mut bases: Vec<(*const Observation, &[Observation])> = Vec::new();
        let mut base_of = Vec::with_capacity(items.len());
        for it in items {
            let t = it.actions.len();
            if t == 0 || it.observations.len() != t {
                return Err(QaError::Model(format!("{} observations for {t} actions", it.observations.len())));
            }
            if let Some(&tok) = it.question.iter().find(|t| t.index() >= n_vocab) {
                return Err(QaError::Model(format!("token id {} outside the vocabulary", tok.0)));
            }
            let ptr = it.observations.as_ptr();
            match bases.iter().position(|b| b.0 == ptr) {
                Some(i) => {
                    if it.observations.len() > bases[i].1.len() {
                        bases[i].1 = it.observations;
                    }
                    base_of.push(i);
                }
                None => {
                    bases.push((ptr, it.observations));
                    base_of.push(bases.len() - 1);
                }
            }
        }
        let mut base_off = Vec::with_capacity(bases.len());
        let mut frames = 0;
        for b in &bases {
            base_off.push(frames);
            frames += b.1.len();
        }

        let mut cells = Vec::with_capacity(frames * OBS_LEN);
        for b in &bases {
            for o in b.1 {
                cell_indices(o, &mut cells);
            }
        }
        let table = tape.param(ids.cells);
        let x = tape.embed_sum(table, cells, 3);
        let x = tape.reshape(x, &[frames, VIEW, VIEW, cfg.cell_dim]);
        let (w, b) = (tape.param(ids.conv1.0), tape.param(ids.conv1.1));
        let x = tape.conv2d(x, w, b, ConvGeom { kernel: 3, stride: 1, pad: 1 });
        let x = tape.relu(x);
        let (w, b) = (tape.param(ids.conv2.0), tape.param(ids.conv2.1));
        let x = tape.conv2d(x, w, b, ConvGeom { kernel: 3, stride: 2, pad: 1 });
        let x = tape.relu(x);
        let half = VIEW / 2;
        let x = tape.reshape(x, &[frames, half * half * cfg.conv2]);
        let (w, b) = (tape.param(ids.frame.0), tape.param(ids.frame.1));
        let frame_rows = tape.affine(x, w, Some(b));

        let tok_idx: Vec<usize> = items.iter().flat_map(|it| it.question.iter().map(|t| t.index())).collect();
        let n_tok = tok_idx.len();
        let table = tape.param(ids.tokens);
        let tok_rows = tape.embed_sum(table, tok_idx, 1);
        let act_idx: Vec<usize> = items.iter().flat_map(|it| it.actions.iter().map(|a| a.id())).collect();
        let table = tape.param(ids.actions);
        let act_rows = tape.embed_sum(table, act_idx, 1);
        let all = tape.concat_rows(&[tok_rows, frame_rows, act_rows]);

        let last = cfg.max_positions - 1;
        let (mut order, mut pos, mut modality, mut segments, mut readout) = (vec![], vec![], vec![], vec![], vec![]);
        let (mut tok_off, mut act_off) = (0, n_tok + frames);
        for (it, &bi) in items.iter().zip(&base_of) {
            let start = order.len();
            readout.push(start + it.mask_position()?);
            for i in 0..it.question.len() {
                order.push(tok_off + i);
                pos.push(i.min(last));
                modality.push(0);
            }
            tok_off += it.question.len();
            let t = it.actions.len();
            for j in 0..t {
                order.push(n_tok + base_off[bi] + j);
                pos.push(j.min(last));
                modality.push(1);
            }
            for j in 0..t {
                order.push(act_off + j);
                pos.push(j.min(last));
                modality.push(2);
            }
            act_off += t;
            segments.push((start, order.len() - start));
        }
        let mut x = tape.embed_sum(all, order, 1);
        let table = tape.param(ids.positions);
        let pe = tape.embed_sum(table, pos, 1);
        let table = tape.param(ids.modality);
        let me = tape.embed_sum(table, modality, 1);
        x = tape.add(x, pe);
        x = tape.add(x, me);

        let aff = |tape: &mut Tape<'p, F>, x: Var, p: (ParamId, ParamId)| {
            let (w, b) = (tape.param(p.0), tape.param(p.1));
            tape.affine(x, w, Some(b))
        };
        let ln = |tape: &mut Tape<'p, F>, x: Var, p: (ParamId, ParamId)| {
            let (g, b) = (tape.param(p.0), tape.param(p.1));
            tape.layer_norm(x, g, b)
        };
        for l in &ids.layers {
            let h = ln(tape, x, l.ln1);
            let q = aff(tape, h, l.wq);
            let k = aff(tape, h, l.wk);
            let v = aff(tape, h, l.wv);
            let a = tape.attention(q, k, v, segments.clone(), cfg.heads);
            let o = aff(tape, a, l.wo);
            x = tape.add(x, o);
            let h = ln(tape, x, l.ln2);
            let f = aff(tape, h, l.ff1);
            let f = tape.relu(f);
            let f = aff(tape, f, l.ff2);
            x = tape.add(x, f);
        }
        let x = ln(tape, x, ids.ln_out);
        let pooled = tape.embed_sum(x, readout, 1);
        Ok(aff(tape, pooled, ids.head))
    }

    /// Answer distributions for a batch of items.
    pub fn forward(&self, items: &[QaItem<'_>]) -> Result<Vec<AnswerDistribution>, QaError> {
        let mut tape = Tape::new(&self.params);
        let logits = self.logits(&mut tape, items)?;
        let lp = tape.log_softmax(logits);
        let t = tape.value(lp);
        Ok((0..t.rows())
            .map(|r| AnswerDistribution { probs: t.row(r).iter().map(|v| v.to_f64().unwrap().exp()).collect() })
            .collect())
    }

    /// Greedy answer with its probability; ties go to the lowest index.
    pub fn answer(&self, item: QaItem<'_>) -> Result<(Token, f64), QaError> {
        let d = self.forward(&[item])?.remove(0);
        let (i, p) = d.greedy();
        Ok((self.answers.token(i), p))
    }

    /// Mean cross-entropy of `items` against answer indices.
    pub fn loss<'p>(&self, tape: &mut Tape<'p, F>, items: &[QaItem<'_>], targets: Vec<usize>) -> Result<Var, QaError> {
        let logits = self.logits(tape, items)?;
        Ok(tape.cross_entropy(logits, targets))
    }
}

impl QaBackend for QaModel<f32> {
    fn answer_vocab(&self) -> &AnswerVocab {
        &self.answers
    }

    fn answer_batch(&self, questions: &[&Question], view: &EpisodeView<'_>) -> Result<Vec<AnswerDistribution>, ShapingError> {
        if questions.is_empty() {
            return Ok(Vec::new());
        }
        let items: Vec<QaItem> = questions
            .iter()
            .map(|q| QaItem { question: &q.tokens, observations: view.observations, actions: view.actions })
            .collect();
        self.forward(&items).map_err(|e| ShapingError::Backend(e.to_string()))
    }
}

fn item_of<'a>(ds: &'a QaDataset, ex: &'a QaExample) -> QaItem<'a> {
    let tr = &ds.trajectories[ex.trajectory];
    QaItem { question: &ex.question.tokens, observations: &tr.observations, actions: &tr.actions }
}

fn target_of(model: &QaModel, ex: &QaExample) -> Result<usize, QaError> {
    model
        .answers
        .index_of(ex.answer)
        .ok_or_else(|| QaError::Model(format!("answer '{}' is not in the model's answer set", ex.answer.text())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after the epoch that crosses this wall-clock budget.
    pub time_budget: Option<Duration>,
    /// Split reported as test SR each epoch.
    pub eval_split: Split,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            lr: 1e-4,
            decay_every: 5,
            decay_factor: 0.1,
            epochs: 10,
            seed: 0,
            time_budget: None,
            eval_split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_sr: f64,
    pub seconds: f64,
}

/// Trains `model` in place and returns one log row per epoch.
/// `on_epoch` sees each row as soon as it is available.
pub fn train(
    model: &mut QaModel,
    ds: &QaDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>, QaError> {
    let train: Vec<&QaExample> = ds.examples_in(Split::Train).collect();
    if train.is_empty() {
        return Err(QaError::EmptySplit(Split::Train));
    }
    let eval: Vec<&QaExample> = ds.examples_in(cfg.eval_split).collect();
    let targets = train.iter().map(|ex| target_of(model, ex)).collect::<Result<Vec<_>, _>>()?;
    let decay = StepDecay { initial: cfg.lr, every: cfg.decay_every, factor: cfg.decay_factor };
    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();
    let mut logs = Vec::new();
    for epoch in 0..cfg.epochs {
        adam.lr = decay.lr_at(epoch);
        order.shuffle(&mut rng);
        let snapshot = model.params.clone();
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let items: Vec<QaItem> = chunk.iter().map(|&i| item_of(ds, train[i])).collect();
            let tgt: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let grads = {
                let mut tape = Tape::new(&model.params);
                let loss = model.loss(&mut tape, &items, tgt)?;
                let l = tape.value(loss).item() as f64;
                if !l.is_finite() {
                    model.params = snapshot;
                    return Err(QaError::Diverged { epoch, last_good: Box::new(model.clone()) });
                }
                total += l * chunk.len() as f64;
                tape.backward(loss)
            };
            adam.step(&mut model.params, &grads);
        }
        if !model.params.all_finite() {
            model.params = snapshot;
            return Err(QaError::Diverged { epoch, last_good: Box::new(model.clone()) });
        }
        let test_sr = if eval.is_empty() { f64::NAN } else { evaluate_examples(model, ds, &eval)?.sr() };
        let log = EpochLog { epoch: epoch + 1, train_loss: total / train.len() as f64, test_sr, seconds: start.elapsed().as_secs_f64() };
        on_epoch(&log);
        logs.push(log);
        if cfg.time_budget.is_some_and(|b| start.elapsed() >= b) {
            break;
        }
    }
    Ok(logs)
}

pub fn write_sr_log(w: impl Write, logs: &[EpochLog]) -> Result<(), std::io::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "train_loss", "test_SR"])?;
    for l in logs {
        out.write_record([l.epoch.to_string(), l.train_loss.to_string(), l.test_sr.to_string()])?;
    }
    out.flush()
}

/// Success rate with per-answer confusion counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    /// `(expected, predicted) -> count`.
    pub confusion: HashMap<(Token, Token), usize>,
}

impl Evaluation {
    pub fn sr(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

fn evaluate_examples(model: &QaModel, ds: &QaDataset, examples: &[&QaExample]) -> Result<Evaluation, QaError> {
    let mut ev = Evaluation::default();
    for chunk in examples.chunks(32) {
        let items: Vec<QaItem> = chunk.iter().map(|ex| item_of(ds, ex)).collect();
        for (ex, d) in chunk.iter().zip(model.forward(&items)?) {
            let predicted = model.answers.token(d.greedy().0);
            ev.total += 1;
            ev.correct += usize::from(predicted == ex.answer);
            *ev.confusion.entry((ex.answer, predicted)).or_default() += 1;
        }
    }
    Ok(ev)
}

pub fn evaluate(model: &QaModel, ds: &QaDataset, split: Split) -> Result<Evaluation, QaError> {
    let examples: Vec<&QaExample> = ds.examples_in(split).collect();
    if examples.is_empty() {
        return Err(QaError::EmptySplit(split));
    }
    evaluate_examples(model, ds, &examples)
}
