//! Recurrent actor-critic trained with PPO on shaped rewards.
//!
//! The policy embeds each frame with one strided convolution modulated by
//! the instruction (FiLM), feeds it to an LSTM and reads action logits and a
//! value estimate from the hidden state. Rewards pass through the EAGER
//! shaper while they are collected; evaluation uses extrinsic rewards only.

use std::io::{Read, Write};
use std::time::Instant;

use eager_nn::checkpoint::{read_params, write_params, CheckpointError};
use eager_nn::{Adam, ConvGeom, ParamId, ParamStore, Real, Tape, Tensor, Var, NO_INDEX};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, GridEnv, GridError, Observation, TaskSpec, OBS_LEN, VIEW};
use crate::lang::{vocabulary, Token};
use crate::qa::{cell_indices, CELL_TABLE_ROWS};
use crate::shaping::{EpisodeShaper, EpisodeView, QaBackend, ShapedStepRecord, ShapingConfig, ShapingError};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("model error: {0}")]
    Model(String),
    #[error("environment error in episode {episode}: {source}")]
    Env { episode: u64, source: GridError },
    #[error("shaping error in episode {episode}: {source}")]
    Shaping { episode: u64, source: ShapingError },
    #[error("loss became non-finite after {frames} frames")]
    NonFinite { frames: u64, last_good: Box<Policy> },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub cell_dim: usize,
    pub conv: usize,
    pub instr_dim: usize,
    pub embed: usize,
    pub hidden: usize,
    pub head: usize,
    /// Instruction tokens past this are ignored.
    pub max_tokens: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { cell_dim: 8, conv: 16, instr_dim: 32, embed: 64, hidden: 128, head: 64, max_tokens: 24 }
    }
}

impl PolicyConfig {
    pub fn tiny() -> Self {
        PolicyConfig { cell_dim: 2, conv: 2, instr_dim: 2, embed: 3, hidden: 3, head: 3, max_tokens: 9 }
    }
}

#[derive(Clone, Debug)]
struct Ids {
    cells: ParamId,
    conv: (ParamId, ParamId),
    words: ParamId,
    film_gamma: (ParamId, ParamId),
    film_beta: (ParamId, ParamId),
    embed: (ParamId, ParamId),
    lstm_x: (ParamId, ParamId),
    lstm_h: ParamId,
    actor1: (ParamId, ParamId),
    actor2: (ParamId, ParamId),
    critic1: (ParamId, ParamId),
    critic2: (ParamId, ParamId),
}

const GRID_OUT: usize = VIEW / 2;

fn init_params(cfg: &PolicyConfig, seed: u64) -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let h = cfg.hidden;
    p.uniform("cells", &[CELL_TABLE_ROWS, cfg.cell_dim], 0.5, &mut rng);
    p.glorot("conv.w", 9 * cfg.cell_dim, cfg.conv, &mut rng);
    p.zeros("conv.b", &[cfg.conv]);
    p.uniform("words", &[vocabulary().len() * cfg.max_tokens, cfg.instr_dim], 0.5, &mut rng);
    p.glorot("film.gamma.w", cfg.instr_dim, cfg.conv, &mut rng);
    p.ones("film.gamma.b", &[cfg.conv]);
    p.glorot("film.beta.w", cfg.instr_dim, cfg.conv, &mut rng);
    p.zeros("film.beta.b", &[cfg.conv]);
    p.glorot("embed.w", GRID_OUT * GRID_OUT * cfg.conv, cfg.embed, &mut rng);
    p.zeros("embed.b", &[cfg.embed]);
    p.glorot("lstm.x.w", cfg.embed, 4 * h, &mut rng);
    let mut bias = vec![0.0; 4 * h];
    bias[h..2 * h].fill(1.0);
    p.insert("lstm.x.b", Tensor::new(&[4 * h], bias));
    p.glorot("lstm.h.w", h, 4 * h, &mut rng);
    p.glorot("actor1.w", h, cfg.head, &mut rng);
    p.zeros("actor1.b", &[cfg.head]);
    p.uniform("actor2.w", &[cfg.head, Action::COUNT], 0.01, &mut rng);
    p.zeros("actor2.b", &[Action::COUNT]);
    p.glorot("critic1.w", h, cfg.head, &mut rng);
    p.zeros("critic1.b", &[cfg.head]);
    p.glorot("critic2.w", cfg.head, 1, &mut rng);
    p.zeros("critic2.b", &[1]);
    p
}

fn lookup<F: Real>(p: &ParamStore<F>, cfg: &PolicyConfig) -> Result<Ids, RlError> {
    let get = |name: &str, shape: &[usize]| -> Result<ParamId, RlError> {
        let id = p.find(name).ok_or_else(|| RlError::Model(format!("missing parameter {name}")))?;
        if p.get(id).shape() != shape {
            return Err(RlError::Model(format!("{name} has shape {:?}, expected {shape:?}", p.get(id).shape())));
        }
        Ok(id)
    };
    let pair = |n: &str, rows: usize, cols: usize| -> Result<(ParamId, ParamId), RlError> {
        Ok((get(&format!("{n}.w"), &[rows, cols])?, get(&format!("{n}.b"), &[cols])?))
    };
    let h = cfg.hidden;
    Ok(Ids {
        cells: get("cells", &[CELL_TABLE_ROWS, cfg.cell_dim])?,
        conv: pair("conv", 9 * cfg.cell_dim, cfg.conv)?,
        words: get("words", &[vocabulary().len() * cfg.max_tokens, cfg.instr_dim])?,
        film_gamma: pair("film.gamma", cfg.instr_dim, cfg.conv)?,
        film_beta: pair("film.beta", cfg.instr_dim, cfg.conv)?,
        embed: pair("embed", GRID_OUT * GRID_OUT * cfg.conv, cfg.embed)?,
        lstm_x: pair("lstm.x", cfg.embed, 4 * h)?,
        lstm_h: get("lstm.h.w", &[h, 4 * h])?,
        actor1: pair("actor1", h, cfg.head)?,
        actor2: pair("actor2", cfg.head, Action::COUNT)?,
        critic1: pair("critic1", h, cfg.head)?,
        critic2: pair("critic2", cfg.head, 1)?,
    })
}

#[derive(Clone, Debug)]
pub struct Policy<F: Real = f32> {
    pub cfg: PolicyConfig,
    pub params: ParamStore<F>,
    ids: Ids,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: PolicyConfig,
}

/// LSTM state of a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    pub rows: usize,
    pub h: Vec<f32>,
    pub c: Vec<f32>,
}

impl Memory {
    pub fn zeros(rows: usize, hidden: usize) -> Self {
        Memory { rows, h: vec![0.0; rows * hidden], c: vec![0.0; rows * hidden] }
    }
}

/// Output of [`Policy::act`].
#[derive(Clone, Debug)]
pub struct ActOutput {
    pub probs: Vec<[f64; Action::COUNT]>,
    pub values: Vec<f64>,
    pub memory: Memory,
}

impl Policy<f32> {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self, RlError> {
        if cfg.max_tokens == 0 || cfg.hidden == 0 {
            return Err(RlError::Model("policy sizes must be positive".into()));
        }
        let params = init_params(&cfg, seed);
        let ids = lookup(&params, &cfg)?;
        Ok(Policy { cfg, params, ids })
    }

    pub fn save(&self, w: impl Write) -> Result<(), RlError> {
        let meta = serde_json::to_string(&Meta { kind: "policy".into(), config: self.cfg }).expect("meta serialises");
        write_params(w, &meta, &self.params)?;
        Ok(())
    }

    pub fn load(r: impl Read) -> Result<Self, RlError> {
        let (meta, params) = read_params::<f32>(r)?;
        let meta: Meta = serde_json::from_str(&meta).map_err(|e| RlError::Model(format!("bad checkpoint metadata: {e}")))?;
        if meta.kind != "policy" {
            return Err(RlError::Model(format!("checkpoint holds a '{}' model, not a policy", meta.kind)));
        }
        let ids = lookup(&params, &meta.config)?;
        Ok(Policy { cfg: meta.config, params, ids })
    }

    pub fn cast_f64(&self) -> Policy<f64> {
        Policy { cfg: self.cfg, params: self.params.cast(), ids: self.ids.clone() }
    }

    /// One step for a batch of rows. `reset[r]` clears row `r`'s memory first.
    pub fn act(&self, obs: &[Observation], instr: &[&[Token]], memory: &Memory, reset: &[bool]) -> Result<ActOutput, RlError> {
        let n = obs.len();
        let hd = self.cfg.hidden;
        if instr.len() != n || reset.len() != n || memory.rows != n {
            return Err(RlError::Model(format!("act: {n} observations, {} instructions, {} memories", instr.len(), memory.rows)));
        }
        let mut tape = Tape::new(&self.params);
        let x = self.encode(&mut tape, obs, instr)?;
        let mask: Vec<f32> = reset.iter().map(|&r| if r { 0.0 } else { 1.0 }).collect();
        let h = tape.constant(Tensor::new(&[n, hd], memory.h.clone()));
        let c = tape.constant(Tensor::new(&[n, hd], memory.c.clone()));
        let h = tape.row_scale(h, mask.clone());
        let c = tape.row_scale(c, mask);
        let (h, c) = self.lstm(&mut tape, x, h, c);
        let (logits, value) = self.heads(&mut tape, h);
        let lp = tape.log_softmax(logits);
        let lpv = tape.value(lp);
        let probs = (0..n)
            .map(|r| {
                let mut p = [0.0; Action::COUNT];
                for (o, &l) in p.iter_mut().zip(lpv.row(r)) {
                    *o = (l as f64).exp();
                }
                p
            })
            .collect();
        let values = tape.value(value).data().iter().map(|&v| v as f64).collect();
        let memory = Memory { rows: n, h: tape.value(h).data().to_vec(), c: tape.value(c).data().to_vec() };
        Ok(ActOutput { probs, values, memory })
    }

    /// FiLM scale and shift produced for an instruction.
    pub fn film_params(&self, instr: &[Token]) -> Result<(Vec<f32>, Vec<f32>), RlError> {
        let mut tape = Tape::new(&self.params);
        let e = self.instruction(&mut tape, &[instr])?;
        let (g, b) = self.film(&mut tape, e);
        Ok((tape.value(g).data().to_vec(), tape.value(b).data().to_vec()))
    }
}

impl<F: Real> Policy<F> {
    fn instruction<'p>(&self, tape: &mut Tape<'p, F>, instr: &[&[Token]]) -> Result<Var, RlError> {
        let m = self.cfg.max_tokens;
        let n_vocab = vocabulary().len();
        let mut idx = Vec::with_capacity(instr.len() * m);
        for ins in instr {
            for p in 0..m {
                idx.push(match ins.get(p) {
                    Some(t) if t.index() >= n_vocab => return Err(RlError::Model(format!("token id {} outside the vocabulary", t.0))),
                    Some(t) => t.index() * m + p,
                    None => NO_INDEX,
                });
            }
        }
        let table = tape.param(self.ids.words);
        Ok(tape.embed_sum(table, idx, m))
    }

    fn film<'p>(&self, tape: &mut Tape<'p, F>, e: Var) -> (Var, Var) {
        let (w, b) = (tape.param(self.ids.film_gamma.0), tape.param(self.ids.film_gamma.1));
        let g = tape.affine(e, w, Some(b));
        let (w, b) = (tape.param(self.ids.film_beta.0), tape.param(self.ids.film_beta.1));
        let be = tape.affine(e, w, Some(b));
        (g, be)
    }

    /// Frame embedding `[rows, embed]`.
    fn encode<'p>(&self, tape: &mut Tape<'p, F>, obs: &[Observation], instr: &[&[Token]]) -> Result<Var, RlError> {
        let n = obs.len();
        let cfg = &self.cfg;
        let mut cells = Vec::with_capacity(n * OBS_LEN);
        for o in obs {
            cell_indices(o, &mut cells);
        }
        let table = tape.param(self.ids.cells);
        let x = tape.embed_sum(table, cells, 3);
        let x = tape.reshape(x, &[n, VIEW, VIEW, cfg.cell_dim]);
        let (w, b) = (tape.param(self.ids.conv.0), tape.param(self.ids.conv.1));
        let x = tape.conv2d(x, w, b, ConvGeom { kernel: 3, stride: 2, pad: 1 });
        let x = tape.reshape(x, &[n * GRID_OUT * GRID_OUT, cfg.conv]);
        let e = self.instruction(tape, instr)?;
        let (g, be) = self.film(tape, e);
        let x = tape.film(x, g, be);
        let x = tape.relu(x);
        let x = tape.reshape(x, &[n, GRID_OUT * GRID_OUT * cfg.conv]);
        let (w, b) = (tape.param(self.ids.embed.0), tape.param(self.ids.embed.1));
        let x = tape.affine(x, w, Some(b));
        Ok(tape.relu(x))
    }

    fn lstm<'p>(&self, tape: &mut Tape<'p, F>, x: Var, h: Var, c: Var) -> (Var, Var) {
        let hd = self.cfg.hidden;
        let (wx, b) = (tape.param(self.ids.lstm_x.0), tape.param(self.ids.lstm_x.1));
        let zx = tape.affine(x, wx, Some(b));
        let wh = tape.param(self.ids.lstm_h);
        let zh = tape.matmul(h, wh);
        let z = tape.add(zx, zh);
        let i = tape.slice_cols(z, 0, hd);
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(z, hd, hd);
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(z, 2 * hd, hd);
        let g = tape.tanh(g);
        let o = tape.slice_cols(z, 3 * hd, hd);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c = tape.add(fc, ig);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc);
        (h, c)
    }

    /// Logits `[rows, 7]` and values `[rows]`.
    fn heads<'p>(&self, tape: &mut Tape<'p, F>, h: Var) -> (Var, Var) {
        let ids = &self.ids;
        let mlp = |tape: &mut Tape<'p, F>, a: (ParamId, ParamId), b: (ParamId, ParamId)| {
            let (w, bb) = (tape.param(a.0), tape.param(a.1));
            let x = tape.affine(h, w, Some(bb));
            let x = tape.tanh(x);
            let (w, bb) = (tape.param(b.0), tape.param(b.1));
            tape.affine(x, w, Some(bb))
        };
        let logits = mlp(tape, ids.actor1, ids.actor2);
        let v = mlp(tape, ids.critic1, ids.critic2);
        let rows = tape.shape(v)[0];
        let v = tape.reshape(v, &[rows]);
        (logits, v)
    }

    /// PPO loss over a batch of fixed-length sequences.
    pub fn ppo_loss<'p>(&self, tape: &mut Tape<'p, F>, b: &SequenceBatch<'_>, cfg: &PpoConfig) -> Result<LossParts, RlError> {
        let n = b.n_seq;
        let hd = self.cfg.hidden;
        let rows = n * b.steps;
        if b.observations.len() != rows || b.instructions.len() != rows || b.h0.len() != n * hd {
            return Err(RlError::Model("sequence batch shapes disagree".into()));
        }
        let f = |v: &[f64]| v.iter().map(|&x| F::of(x)).collect::<Vec<F>>();
        let x = self.encode(tape, &b.observations, &b.instructions)?;
        let mut h = tape.constant(Tensor::new(&[n, hd], f(&b.h0)));
        let mut c = tape.constant(Tensor::new(&[n, hd], f(&b.c0)));
        let mut hs = Vec::with_capacity(b.steps);
        for s in 0..b.steps {
            let mask = f(&b.masks[s * n..(s + 1) * n]);
            h = tape.row_scale(h, mask.clone());
            c = tape.row_scale(c, mask);
            let xs = tape.slice_rows(x, s * n, n);
            (h, c) = self.lstm(tape, xs, h, c);
            hs.push(h);
        }
        let hall = tape.concat_rows(&hs);
        let (logits, value) = self.heads(tape, hall);
        let lp_all = tape.log_softmax(logits);
        let lp = tape.pick(lp_all, b.actions.clone());
        let old = tape.constant(Tensor::new(&[rows], f(&b.old_logp)));
        let diff = tape.sub(lp, old);
        let ratio = tape.exp(diff);
        let adv = tape.constant(Tensor::new(&[rows], f(&b.advantages)));
        let s1 = tape.mul(ratio, adv);
        let clipped = tape.clamp(ratio, F::of(1.0 - cfg.clip), F::of(1.0 + cfg.clip));
        let s2 = tape.mul(clipped, adv);
        let surr = tape.minimum(s1, s2);
        let surr = tape.mean(surr);
        let policy = tape.scale(surr, -F::one());
        let p = tape.exp(lp_all);
        let plogp = tape.mul(p, lp_all);
        let neg_ent = tape.row_sum(plogp);
        let neg_ent = tape.mean(neg_ent);
        let entropy = tape.scale(neg_ent, -F::one());
        let ret = tape.constant(Tensor::new(&[rows], f(&b.returns)));
        let err = tape.sub(value, ret);
        let err = tape.square(err);
        let value_loss = tape.mean(err);
        let a = tape.scale(value_loss, F::of(cfg.value_coef));
        let e = tape.scale(neg_ent, F::of(cfg.entropy_coef));
        let loss = tape.add(policy, a);
        let loss = tape.add(loss, e);
        Ok(LossParts { loss, policy, value: value_loss, entropy })
    }
}

/// Loss terms recorded by [`Policy::ppo_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
}

/// Sequences laid out step-major: row `s * n_seq + j` is step `s` of sequence `j`.
#[derive(Clone, Debug, Default)]
pub struct SequenceBatch<'a> {
    pub n_seq: usize,
    pub steps: usize,
    pub observations: Vec<Observation>,
    pub instructions: Vec<&'a [Token]>,
    /// `0` clears the memory before that step.
    pub masks: Vec<f64>,
    pub h0: Vec<f64>,
    pub c0: Vec<f64>,
    pub actions: Vec<usize>,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub clip: f64,
    pub gae_lambda: f64,
    pub batch: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub envs: usize,
    pub recurrence: usize,
    pub max_grad_norm: f64,
    pub adam_eps: f64,
    /// Divide rewards by the largest success reward before advantage
    /// estimation, so values and returns are of order one.
    pub normalize_returns: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            lr: 7e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            clip: 0.2,
            gae_lambda: 0.99,
            batch: 2560,
            minibatch: 1280,
            epochs: 4,
            envs: 16,
            recurrence: 4,
            max_grad_norm: 0.5,
            adam_eps: 1e-5,
            normalize_returns: false,
        }
    }
}

impl PpoConfig {
    /// Factor applied to rewards before advantage estimation.
    pub fn reward_scale(&self) -> f64 {
        if self.normalize_returns {
            1.0 / crate::gridworld::REWARD_SCALE
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        let steps = self.batch / self.envs.max(1);
        let ok = self.envs > 0
            && self.recurrence > 0
            && self.batch % self.envs == 0
            && steps % self.recurrence == 0
            && self.minibatch > 0
            && self.minibatch % self.recurrence == 0
            && self.minibatch <= self.batch
            && (0.0..=1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.gae_lambda)
            && self.lr > 0.0;
        if ok {
            Ok(())
        } else {
            Err(RlError::Config(format!(
                "batch {} must split into {} envs and sequences of {}; minibatch {} likewise",
                self.batch, self.envs, self.recurrence, self.minibatch
            )))
        }
    }
}

/// Advantages and returns by generalised advantage estimation over `[t][env]`
/// arrays; `dones[t]` marks that step `t` ended its episode.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_values: &[f64],
    envs: usize,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let steps = rewards.len() / envs;
    let mut adv = vec![0.0; rewards.len()];
    for e in 0..envs {
        let mut next_adv = 0.0;
        let mut next_value = last_values[e];
        for t in (0..steps).rev() {
            let i = t * envs + e;
            let live = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * next_value * live - values[i];
            next_adv = delta + gamma * lambda * live * next_adv;
            adv[i] = next_adv;
            next_value = values[i];
        }
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// `(x - mean) / (std + 1e-8)`.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    for x in xs {
        *x = (*x - mean) / (std + 1e-8);
    }
}

/// Reward shaping used while collecting rollouts.
#[derive(Clone, Copy)]
pub struct Shaping<'a> {
    pub cfg: ShapingConfig,
    pub backend: &'a dyn QaBackend,
}

struct EnvSlot {
    env: GridEnv,
    obs: Observation,
    episode: u64,
    shaper: Option<EpisodeShaper>,
    history_obs: Vec<Observation>,
    history_act: Vec<Action>,
    ret: f64,
    shaped: f64,
    bonus: f64,
    fresh: bool,
}

/// Summary of one finished episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: u64,
    pub extrinsic: f64,
    pub shaped: f64,
    pub bonus: f64,
    pub length: u32,
    pub success: bool,
}

/// Collected experience, `[t][env]` flattened.
#[derive(Clone, Debug, Default)]
pub struct Rollout {
    pub envs: usize,
    pub observations: Vec<Observation>,
    pub instructions: Vec<Vec<Token>>,
    pub resets: Vec<bool>,
    pub h0: Vec<f32>,
    pub c0: Vec<f32>,
    pub actions: Vec<usize>,
    pub logp: Vec<f64>,
    pub values: Vec<f64>,
    /// Shaped rewards times [`PpoConfig::reward_scale`], as used for advantages.
    pub rewards: Vec<f64>,
    pub extrinsic: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub finished: Vec<EpisodeStats>,
}

/// Stateful collector owning the environments and their memories.
pub struct Collector<'a> {
    spec: TaskSpec,
    shaping: Option<Shaping<'a>>,
    slots: Vec<EnvSlot>,
    memory: Memory,
    rng: ChaCha8Rng,
    next_episode: u64,
    seed: u64,
    /// Shaping records of the first episodes, in completion order.
    pub traces: Vec<(u64, Vec<ShapedStepRecord>)>,
    pub keep_traces: usize,
}

fn episode_seed(run_seed: u64, episode: u64) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ episode
}

impl<'a> Collector<'a> {
    pub fn new(spec: &TaskSpec, shaping: Option<Shaping<'a>>, envs: usize, hidden: usize, seed: u64) -> Result<Self, RlError> {
        let mut c = Collector {
            spec: spec.clone(),
            shaping,
            slots: Vec::with_capacity(envs),
            memory: Memory::zeros(envs, hidden),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xC011_EC70),
            next_episode: 0,
            seed,
            traces: Vec::new(),
            keep_traces: 0,
        };
        for _ in 0..envs {
            let slot = c.new_slot()?;
            c.slots.push(slot);
        }
        Ok(c)
    }

    fn new_slot(&mut self) -> Result<EnvSlot, RlError> {
        let episode = self.next_episode;
        self.next_episode += 1;
        let (env, obs) = GridEnv::reset(&self.spec, episode_seed(self.seed, episode)).map_err(|source| RlError::Env { episode, source })?;
        let shaper = match &self.shaping {
            Some(s) => Some(EpisodeShaper::new(env.instruction(), s.cfg).map_err(|source| RlError::Shaping { episode, source })?),
            None => None,
        };
        Ok(EnvSlot { env, obs, episode, shaper, history_obs: Vec::new(), history_act: Vec::new(), ret: 0.0, shaped: 0.0, bonus: 0.0, fresh: true })
    }

    /// Runs `steps` steps in every environment and fills advantages.
    pub fn collect(&mut self, policy: &Policy, steps: usize, cfg: &PpoConfig) -> Result<Rollout, RlError> {
        let envs = self.slots.len();
        let hd = policy.cfg.hidden;
        let scale = cfg.reward_scale();
        let mut ro = Rollout { envs, ..Rollout::default() };
        for _ in 0..steps {
            let obs: Vec<Observation> = self.slots.iter().map(|s| s.obs).collect();
            let instr: Vec<Vec<Token>> = self.slots.iter().map(|s| s.env.instruction().tokens().to_vec()).collect();
            let refs: Vec<&[Token]> = instr.iter().map(|v| v.as_slice()).collect();
            let resets: Vec<bool> = self.slots.iter().map(|s| s.fresh).collect();
            let out = policy.act(&obs, &refs, &self.memory, &resets)?;
            let base = ro.h0.len();
            ro.h0.extend_from_slice(&self.memory.h);
            ro.c0.extend_from_slice(&self.memory.c);
            for (e, &fresh) in resets.iter().enumerate() {
                if fresh {
                    ro.h0[base + e * hd..base + (e + 1) * hd].fill(0.0);
                    ro.c0[base + e * hd..base + (e + 1) * hd].fill(0.0);
                }
            }
            ro.observations.extend_from_slice(&obs);
            ro.instructions.extend(instr);
            ro.resets.extend_from_slice(&resets);
            self.memory = out.memory;
            for e in 0..envs {
                let probs = &out.probs[e];
                let a = WeightedIndex::new(probs.iter().map(|p| p.max(0.0)))
                    .map(|d| d.sample(&mut self.rng))
                    .unwrap_or(0);
                ro.actions.push(a);
                ro.logp.push(probs[a].max(1e-30).ln());
                ro.values.push(out.values[e]);
                let (reward, extrinsic, done) = self.step_env(e, Action::from_id(a).expect("seven actions"))?;
                ro.rewards.push(reward * scale);
                ro.extrinsic.push(extrinsic);
                ro.dones.push(done);
                if done {
                    let slot = &self.slots[e];
                    let stats = EpisodeStats {
                        episode: slot.episode,
                        extrinsic: slot.ret,
                        shaped: slot.shaped,
                        bonus: slot.bonus,
                        length: slot.env.state().step_count,
                        success: slot.env.succeeded(),
                    };
                    if self.traces.len() < self.keep_traces {
                        if let Some(sh) = &slot.shaper {
                            self.traces.push((slot.episode, sh.ledger.records.clone()));
                        }
                    }
                    ro.finished.push(stats);
                    self.slots[e] = self.new_slot()?;
                }
            }
        }
        let obs: Vec<Observation> = self.slots.iter().map(|s| s.obs).collect();
        let instr: Vec<Vec<Token>> = self.slots.iter().map(|s| s.env.instruction().tokens().to_vec()).collect();
        let refs: Vec<&[Token]> = instr.iter().map(|v| v.as_slice()).collect();
        let resets: Vec<bool> = self.slots.iter().map(|s| s.fresh).collect();
        let last = policy.act(&obs, &refs, &self.memory, &resets)?.values;
        let (mut adv, ret) = gae(&ro.rewards, &ro.values, &ro.dones, &last, envs, cfg.gamma, cfg.gae_lambda);
        normalize(&mut adv);
        ro.advantages = adv;
        ro.returns = ret;
        Ok(ro)
    }

    fn step_env(&mut self, e: usize, a: Action) -> Result<(f64, f64, bool), RlError> {
        let shaping = self.shaping;
        let slot = &mut self.slots[e];
        let episode = slot.episode;
        slot.fresh = false;
        let r = slot.env.step(a).map_err(|source| RlError::Env { episode, source })?;
        let mut reward = r.reward;
        if let (Some(sh), Some(shaper)) = (shaping, slot.shaper.as_mut()) {
            slot.history_obs.push(slot.obs);
            slot.history_act.push(a);
            let flags: Vec<bool> = (0..slot.env.instruction().len()).map(|p| slot.env.mention_achieved(p)).collect();
            let view = EpisodeView { observations: &slot.history_obs, actions: &slot.history_act, mention_flags: &flags };
            let t = slot.history_act.len();
            let before = shaper.ledger.total_bonus();
            reward = shaper
                .step(sh.backend, &view, r.reward, t, r.done, r.success)
                .map_err(|source| RlError::Shaping { episode, source })?;
            slot.bonus += shaper.ledger.total_bonus() - before;
        }
        slot.ret += r.reward;
        slot.shaped += reward;
        slot.obs = r.observation;
        Ok((reward, r.reward, r.done))
    }
}

/// Minibatch of whole sequences from a rollout.
pub fn sequence_batch<'r>(ro: &'r Rollout, starts: &[(usize, usize)], len: usize, hidden: usize) -> SequenceBatch<'r> {
    let n = starts.len();
    let mut b = SequenceBatch { n_seq: n, steps: len, ..SequenceBatch::default() };
    for &(t0, e) in starts {
        let i = t0 * ro.envs + e;
        b.h0.extend(ro.h0[i * hidden..(i + 1) * hidden].iter().map(|&v| v as f64));
        b.c0.extend(ro.c0[i * hidden..(i + 1) * hidden].iter().map(|&v| v as f64));
    }
    for s in 0..len {
        for &(t0, e) in starts {
            let i = (t0 + s) * ro.envs + e;
            b.observations.push(ro.observations[i]);
            b.instructions.push(&ro.instructions[i]);
            b.masks.push(if ro.resets[i] { 0.0 } else { 1.0 });
            b.actions.push(ro.actions[i]);
            b.old_logp.push(ro.logp[i]);
            b.advantages.push(ro.advantages[i]);
            b.returns.push(ro.returns[i]);
        }
    }
    b
}

/// Mean losses of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

pub fn ppo_update(policy: &mut Policy, adam: &mut Adam<f32>, ro: &Rollout, cfg: &PpoConfig, rng: &mut impl Rng) -> Result<UpdateStats, RlError> {
    let steps = ro.actions.len() / ro.envs;
    let mut starts: Vec<(usize, usize)> = (0..steps).step_by(cfg.recurrence).flat_map(|t| (0..ro.envs).map(move |e| (t, e))).collect();
    let per_mb = (cfg.minibatch / cfg.recurrence).max(1);
    let mut stats = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        starts.shuffle(rng);
        for chunk in starts.chunks(per_mb) {
            let b = sequence_batch(ro, chunk, cfg.recurrence, policy.cfg.hidden);
            let mut grads = {
                let mut tape = Tape::new(&policy.params);
                let parts = policy.ppo_loss(&mut tape, &b, cfg)?;
                stats.policy_loss += tape.value(parts.policy).item() as f64;
                stats.value_loss += tape.value(parts.value).item() as f64;
                stats.entropy += tape.value(parts.entropy).item() as f64;
                tape.backward(parts.loss)
            };
            stats.grad_norm += grads.clip_global_norm(cfg.max_grad_norm as f32) as f64;
            count += 1.0;
            if !grads.is_finite() {
                return Err(RlError::Model("non-finite gradient".into()));
            }
            adam.step(&mut policy.params, &grads);
        }
    }
    stats.policy_loss /= count;
    stats.value_loss /= count;
    stats.entropy /= count;
    stats.grad_norm /= count;
    Ok(stats)
}

/// One row of the learning curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub frames: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_bonus: f64,
    pub mean_shaped: f64,
    pub success_rate: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub frames: u64,
    pub seed: u64,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
    /// Episodes whose shaping records are kept.
    pub keep_traces: usize,
}

pub struct TrainOutcome {
    pub policy: Policy,
    pub curve: Vec<CurvePoint>,
    pub traces: Vec<(u64, Vec<ShapedStepRecord>)>,
    pub seconds: f64,
}

/// Trains a fresh policy for `opts.frames` frames.
pub fn train(
    spec: &TaskSpec,
    shaping: Option<Shaping<'_>>,
    opts: &TrainOptions,
    mut on_batch: impl FnMut(&CurvePoint, &UpdateStats),
) -> Result<TrainOutcome, RlError> {
    let cfg = &opts.ppo;
    cfg.validate()?;
    if opts.frames < cfg.batch as u64 {
        return Err(RlError::Config(format!("budget of {} frames is below one batch of {}", opts.frames, cfg.batch)));
    }
    let start = Instant::now();
    let mut policy = Policy::new(opts.policy, opts.seed)?;
    let mut adam = Adam::new(&policy.params, cfg.lr).with_eps(cfg.adam_eps);
    let mut collector = Collector::new(spec, shaping, cfg.envs, opts.policy.hidden, opts.seed)?;
    collector.keep_traces = opts.keep_traces;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED_0F99);
    let steps = cfg.batch / cfg.envs;
    let mut frames = 0u64;
    let mut curve: Vec<CurvePoint> = Vec::new();
    while frames + cfg.batch as u64 <= opts.frames {
        let ro = collector.collect(&policy, steps, cfg)?;
        frames += cfg.batch as u64;
        let snapshot = policy.clone();
        let upd = match ppo_update(&mut policy, &mut adam, &ro, cfg, &mut rng) {
            Ok(u) if policy.params.all_finite() => u,
            _ => return Err(RlError::NonFinite { frames, last_good: Box::new(snapshot) }),
        };
        let point = curve_point(frames, &ro.finished, curve.last());
        on_batch(&point, &upd);
        curve.push(point);
    }
    Ok(TrainOutcome { policy, curve, traces: collector.traces, seconds: start.elapsed().as_secs_f64() })
}

fn curve_point(frames: u64, eps: &[EpisodeStats], prev: Option<&CurvePoint>) -> CurvePoint {
    if eps.is_empty() {
        let mut p = prev.cloned().unwrap_or(CurvePoint {
            frames,
            mean_return: 0.0,
            std_return: 0.0,
            mean_bonus: 0.0,
            mean_shaped: 0.0,
            success_rate: 0.0,
            episodes: 0,
        });
        p.frames = frames;
        p.episodes = 0;
        return p;
    }
    let n = eps.len() as f64;
    let mean = eps.iter().map(|e| e.extrinsic).sum::<f64>() / n;
    let var = eps.iter().map(|e| (e.extrinsic - mean).powi(2)).sum::<f64>() / n;
    CurvePoint {
        frames,
        mean_return: mean,
        std_return: var.sqrt(),
        mean_bonus: eps.iter().map(|e| e.bonus).sum::<f64>() / n,
        mean_shaped: eps.iter().map(|e| e.shaped).sum::<f64>() / n,
        success_rate: eps.iter().filter(|e| e.success).count() as f64 / n,
        episodes: eps.len(),
    }
}

pub fn write_curve_csv(w: impl Write, curve: &[CurvePoint]) -> Result<(), std::io::Error> {
    let mut out = csv::Writer::from_writer(w);
    for p in curve {
        out.serialize(p).map_err(std::io::Error::other)?;
    }
    out.flush()
}

pub fn read_curve_csv(r: impl Read) -> Result<Vec<CurvePoint>, std::io::Error> {
    csv::Reader::from_reader(r).deserialize().map(|p| p.map_err(std::io::Error::other)).collect()
}

/// Policy results on fresh episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: f64,
    pub mean_length: f64,
}

/// Runs `episodes` episodes with extrinsic reward only, taking the most
/// probable action when `argmax` is set and sampling otherwise.
pub fn evaluate(policy: &Policy, spec: &TaskSpec, episodes: usize, seed: u64, argmax: bool) -> Result<EvalReport, RlError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A4D_0000);
    let batch = 16.min(episodes.max(1));
    let hd = policy.cfg.hidden;
    let (mut total, mut wins, mut length) = (0.0, 0usize, 0u64);
    let mut done_count = 0;
    while done_count < episodes {
        let n = batch.min(episodes - done_count);
        let mut envs = Vec::with_capacity(n);
        for i in 0..n {
            let ep = (done_count + i) as u64;
            let seed = episode_seed(seed ^ 0xE7A1_0000_0000, ep);
            envs.push(GridEnv::reset(spec, seed).map_err(|source| RlError::Env { episode: ep, source })?);
        }
        let mut memory = Memory::zeros(n, hd);
        let mut resets = vec![true; n];
        let mut live: Vec<bool> = vec![true; n];
        while live.iter().any(|&l| l) {
            let obs: Vec<Observation> = envs.iter().map(|e| e.1).collect();
            let refs: Vec<&[Token]> = envs.iter().map(|e| e.0.instruction().tokens()).collect();
            let out = policy.act(&obs, &refs, &memory, &resets)?;
            memory = out.memory;
            resets.fill(false);
            for (i, (env, obs)) in envs.iter_mut().enumerate() {
                if !live[i] {
                    continue;
                }
                let probs = &out.probs[i];
                let a = if argmax {
                    probs.iter().enumerate().fold(0, |best, (j, &p)| if p > probs[best] { j } else { best })
                } else {
                    WeightedIndex::new(probs.iter().map(|p| p.max(0.0))).map(|d| d.sample(&mut rng)).unwrap_or(0)
                };
                let r = env.step(Action::from_id(a).expect("seven actions")).map_err(|source| RlError::Env { episode: i as u64, source })?;
                total += r.reward;
                *obs = r.observation;
                if r.done {
                    live[i] = false;
                    wins += usize::from(r.success);
                    length += env.state().step_count as u64;
                }
            }
        }
        done_count += n;
    }
    let n = episodes as f64;
    Ok(EvalReport { episodes, mean_return: total / n, success_rate: wins as f64 / n, mean_length: length as f64 / n })
}
