//! Training: next-token pretraining for the base model and two-stage
//! training for the speculator.
//!
//! Stage 1 teacher-forces the speculator on corpus text, conditioned on the
//! frozen base model's states. Stage 2 trains on the base model's own greedy
//! continuations of short prompts. Data order is a pure function of the
//! seed and the step, so an interrupted run resumes to the same weights.

mod optim;

pub use optim::{AdamW, AdamWConfig};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::corpus::{batch_windows, DocumentStream, TokenId, WindowBatch};
use crate::decode::greedy_generate;
use crate::error::{Error, Result};
use crate::model::{base_loss_and_grad, BaseModel, BaseModelConfig, BaseWeights};
use crate::speculator::{speculator_loss_and_grad, SpecLoss, Speculator, SpeculatorConfig, TeacherForced};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_steps: usize,
    pub base_seq_len: usize,
    pub base_batch: usize,
    pub base_lr_peak: f64,
    pub base_lr_floor: f64,

    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1_seq_len: usize,
    pub stage1_batch: usize,
    pub stage2_prompt_len: usize,
    pub stage2_gen_len: usize,
    pub stage2_batch: usize,
    pub stage1_lr_peak: f64,
    pub stage1_lr_floor: f64,
    pub stage2_lr_peak: f64,
    pub stage2_lr_floor: f64,

    pub warmup_frac: f64,
    pub optimizer: AdamWConfig,
    /// Steps between checkpoints; 0 saves only at stage ends.
    pub checkpoint_every: usize,
    /// Upper bound on cached stage-1 base states, in floats.
    pub state_cache_floats: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_steps: 1200,
            base_seq_len: 128,
            base_batch: 8,
            base_lr_peak: 2e-3,
            base_lr_floor: 2e-4,
            stage1_steps: 2000,
            stage2_steps: 800,
            stage1_seq_len: 512,
            stage1_batch: 2,
            stage2_prompt_len: 32,
            stage2_gen_len: 64,
            stage2_batch: 8,
            stage1_lr_peak: 1e-3,
            stage1_lr_floor: 1e-4,
            stage2_lr_peak: 1e-4,
            stage2_lr_floor: 1e-5,
            warmup_frac: 0.05,
            optimizer: AdamWConfig::default(),
            checkpoint_every: 500,
            state_cache_floats: 1 << 27,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!("warmup_frac {} is outside (0, 1)", self.warmup_frac)));
        }
        let positive = [
            ("base_batch", self.base_batch),
            ("stage1_batch", self.stage1_batch),
            ("stage2_batch", self.stage2_batch),
            ("stage2_gen_len", self.stage2_gen_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.stage2_prompt_len < 2 {
            return Err(Error::Config("stage2_prompt_len must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Base,
    One,
    Two,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::One => "1",
            Stage::Two => "2",
        }
    }
}

/// Linear warmup from 0 over the first `warmup_frac` of the budget, then
/// cosine decay reaching the floor on the final step.
pub fn lr_at(cfg: &TrainConfig, step: usize, stage: Stage) -> f64 {
    let (total, peak, floor) = match stage {
        Stage::Base => (cfg.base_steps, cfg.base_lr_peak, cfg.base_lr_floor),
        Stage::One => (cfg.stage1_steps, cfg.stage1_lr_peak, cfg.stage1_lr_floor),
        Stage::Two => (cfg.stage2_steps, cfg.stage2_lr_peak, cfg.stage2_lr_floor),
    };
    let warmup = ((cfg.warmup_frac * total as f64).round() as usize).max(1);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let last = total.saturating_sub(1);
    let progress = if last > warmup {
        ((step - warmup) as f64 / (last - warmup) as f64).min(1.0)
    } else {
        1.0
    };
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-head losses of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Global step, counting stage 1 then stage 2.
    pub step: usize,
    pub stage: Stage,
    pub per_head: Vec<f64>,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.per_head.iter().sum()
    }
}

/// `step,stage,loss_head_1..h` with a header line.
pub fn losses_to_csv(losses: &[LossReport], heads: usize) -> String {
    let mut out = String::from("step,stage");
    for i in 1..=heads {
        let _ = write!(out, ",loss_head_{i}");
    }
    out.push('\n');
    for l in losses {
        let _ = write!(out, "{},{}", l.step, l.stage.tag());
        for v in &l.per_head {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn losses_from_csv(text: &str) -> Result<Vec<LossReport>> {
    let bad = |line: &str| Error::Checkpoint(format!("malformed loss row: {line}"));
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let mut parts = line.split(',');
        let step = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(line))?;
        let stage = match parts.next() {
            Some("1") => Stage::One,
            Some("2") => Stage::Two,
            Some("base") => Stage::Base,
            _ => return Err(bad(line)),
        };
        let per_head = parts
            .map(|p| p.parse::<f64>().map_err(|_| bad(line)))
            .collect::<Result<Vec<_>>>()?;
        out.push(LossReport { step, stage, per_head });
    }
    Ok(out)
}

/// Non-overlapping windows of the stream, one per entry.
fn windows(stream: &DocumentStream, seq_len: usize) -> Result<Vec<(Vec<TokenId>, Vec<bool>)>> {
    Ok(batch_windows(stream, seq_len, 1)?
        .into_iter()
        .map(|b| (b.tokens.into_iter().next().unwrap(), b.mask.into_iter().next().unwrap()))
        .collect())
}

/// Indices of the items used at `step`: a fresh seeded permutation per epoch.
fn batch_indices(n: usize, batch: usize, step: usize, seed: u64, salt: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for j in 0..batch {
        let flat = step * batch + j;
        let (epoch, pos) = (flat / n, flat % n);
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.rotate_left(32) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[pos]);
    }
    out
}

/// Trains a fresh base model on next-token prediction.
pub fn train_base(
    cfg: &TrainConfig,
    base_cfg: BaseModelConfig,
    stream: &DocumentStream,
    mut progress: impl FnMut(usize, f32),
) -> Result<(BaseModel, Vec<f32>)> {
    cfg.validate()?;
    if cfg.base_seq_len > base_cfg.max_seq {
        return Err(Error::Config(format!(
            "base_seq_len {} exceeds max_seq {}",
            cfg.base_seq_len, base_cfg.max_seq
        )));
    }
    let data = windows(stream, cfg.base_seq_len)?;
    let mut weights = BaseWeights::init(&base_cfg)?;
    let mut grads = weights.zeros_like();
    let mut opt = AdamW::new(cfg.optimizer, &weights);
    let mut losses = Vec::with_capacity(cfg.base_steps);
    for step in 0..cfg.base_steps {
        let idx = batch_indices(data.len(), cfg.base_batch, step, cfg.seed, 0xBA5E);
        // Random start positions let short windows train every position id.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5057_0000 ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let batch = WindowBatch {
            tokens: idx.iter().map(|&i| data[i].0.clone()).collect(),
            mask: idx.iter().map(|&i| data[i].1.clone()).collect(),
            start: idx.iter().map(|_| rng.gen_range(0..=base_cfg.max_seq - cfg.base_seq_len)).collect(),
        };
        crate::params::zero_all(&mut grads);
        let loss = base_loss_and_grad(&base_cfg, &weights, &batch, &mut grads)?;
        opt.step(&mut weights, &grads, lr_at(cfg, step, Stage::Base))?;
        losses.push(loss.loss);
        progress(step, loss.loss);
    }
    Ok((BaseModel::from_weights(base_cfg, weights)?, losses))
}

/// Teacher-forced rows for stage 1 from corpus windows.
pub fn stage1_data(
    base: &BaseModel,
    n_stages: usize,
    windows: &[(Vec<TokenId>, Vec<bool>)],
) -> Result<TeacherForced> {
    let seqs: Vec<Vec<TokenId>> = windows.iter().map(|w| w.0.clone()).collect();
    let outs = base.forward_full(&seqs)?;
    let mut tf = TeacherForced::new(n_stages, base.config().d_model);
    for (w, out) in windows.iter().zip(&outs) {
        tf.push_sequence(&w.0, &w.1, out.states.data(), 0)?;
    }
    Ok(tf)
}

/// Stage-2 rows: the base greedily continues each prompt and only targets
/// inside the generated region are scored.
pub fn stage2_data(
    base: &BaseModel,
    n_stages: usize,
    prompts: &[Vec<TokenId>],
    gen_len: usize,
) -> Result<(TeacherForced, Vec<Vec<TokenId>>)> {
    let (generated, _) = greedy_generate(base, prompts, gen_len)?;
    let seqs: Vec<Vec<TokenId>> = prompts
        .iter()
        .zip(&generated)
        .map(|(p, g)| p.iter().chain(g).copied().collect())
        .collect();
    let outs = base.forward_full(&seqs)?;
    let mut tf = TeacherForced::new(n_stages, base.config().d_model);
    for ((p, s), out) in prompts.iter().zip(&seqs).zip(&outs) {
        // Row p-2 is the first whose stage-1 target, t[p], was generated.
        tf.push_sequence(s, &vec![true; s.len()], out.states.data(), p.len() - 2)?;
    }
    Ok((tf, seqs))
}

/// Stage-1 loss and gradients for a batch of windows. Gradients are added
/// into `grads`; the base model is only read.
pub fn stage1_batch_loss(
    base: &BaseModel,
    spec: &Speculator,
    windows: &[(Vec<TokenId>, Vec<bool>)],
    grads: &mut Speculator,
) -> Result<SpecLoss> {
    let tf = stage1_data(base, spec.config().n_stages, windows)?;
    speculator_loss_and_grad(spec, &tf, grads)
}

pub fn stage2_batch_loss(
    base: &BaseModel,
    spec: &Speculator,
    prompts: &[Vec<TokenId>],
    gen_len: usize,
    grads: &mut Speculator,
) -> Result<SpecLoss> {
    let (tf, _) = stage2_data(base, spec.config().n_stages, prompts, gen_len)?;
    speculator_loss_and_grad(spec, &tf, grads)
}

/// Checkpointing and interruption controls for [`run_two_stage_training`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in `checkpoint_dir`.
    pub resume: bool,
    /// Stop (after checkpointing) once this many global steps are done.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub speculator: Speculator,
    /// Weights at the end of stage 1.
    pub stage1: Option<Speculator>,
    pub losses: Vec<LossReport>,
    /// Global steps completed.
    pub steps_done: usize,
}

impl TrainOutcome {
    pub fn finished(&self, cfg: &TrainConfig) -> bool {
        self.steps_done == cfg.stage1_steps + cfg.stage2_steps
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunState {
    steps_done: usize,
    latest: String,
    has_stage1: bool,
    fingerprint: String,
}

fn fingerprint(cfg: &TrainConfig, spec_cfg: &SpeculatorConfig, base: &BaseModel, data_tokens: usize) -> Result<String> {
    let text = serde_json::to_string(&(cfg, spec_cfg, base.checksum(), data_tokens))?;
    Ok(crate::params::hex(&<sha2::Sha256 as sha2::Digest>::digest(text.as_bytes())))
}

fn save_checkpoint(
    dir: &Path,
    steps_done: usize,
    spec: &Speculator,
    opt: &AdamW,
    stage1: Option<&Speculator>,
    losses: &[LossReport],
    fp: &str,
) -> Result<()> {
    let name = format!("step-{steps_done:06}");
    let sub = dir.join(&name);
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    spec.to_container()?.save(sub.join("speculator.ckpt"))?;
    opt.to_container(spec)?.save(sub.join("optimizer.ckpt"))?;
    if let Some(s1) = stage1 {
        s1.to_container()?.save(sub.join("stage1.ckpt"))?;
    }
    let csv = losses_to_csv(losses, spec.config().n_stages);
    let csv_path = dir.join("losses.csv");
    fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    let state = RunState {
        steps_done,
        latest: name.clone(),
        has_stage1: stage1.is_some(),
        fingerprint: fp.to_string(),
    };
    // The state file is replaced atomically, so it always names a complete
    // checkpoint directory.
    let tmp = dir.join("state.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&state)?).map_err(|e| Error::io(&tmp, e))?;
    let path = dir.join("state.json");
    let previous = fs::read(&path).ok().and_then(|b| serde_json::from_slice::<RunState>(&b).ok());
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    if let Some(prev) = previous.filter(|p| p.latest != name) {
        let _ = fs::remove_dir_all(dir.join(prev.latest));
    }
    Ok(())
}

type Loaded = (usize, Speculator, AdamW, Option<Speculator>, Vec<LossReport>);

fn load_checkpoint(dir: &Path, fp: &str) -> Result<Option<Loaded>> {
    let path = dir.join("state.json");
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let state: RunState = serde_json::from_slice(&bytes)?;
    if state.fingerprint != fp {
        return Err(Error::Checkpoint(
            "checkpoint was written with a different config, base model or corpus".into(),
        ));
    }
    let sub = dir.join(&state.latest);
    let spec = Speculator::from_container(Container::load(sub.join("speculator.ckpt"))?)?;
    let opt = AdamW::from_container(Container::load(sub.join("optimizer.ckpt"))?, &spec)?;
    let stage1 = if state.has_stage1 {
        Some(Speculator::from_container(Container::load(sub.join("stage1.ckpt"))?)?)
    } else {
        None
    };
    let csv_path = dir.join("losses.csv");
    let csv = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut losses = losses_from_csv(&csv)?;
    losses.truncate(state.steps_done);
    Ok(Some((state.steps_done, spec, opt, stage1, losses)))
}

/// Runs stage 1 then stage 2 on a frozen base model.
pub fn run_two_stage_training(
    cfg: &TrainConfig,
    spec_cfg: SpeculatorConfig,
    base: &BaseModel,
    corpus: &DocumentStream,
    opts: &RunOptions,
    mut progress: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec_cfg.validate()?;
    if spec_cfg.d_base != base.config().d_model || spec_cfg.vocab_size != base.config().vocab_size {
        return Err(Error::Config(
            "speculator d_base/vocab_size do not match the base model".into(),
        ));
    }
    let h = spec_cfg.n_stages;
    let max_seq = base.config().max_seq;
    if cfg.stage1_seq_len > max_seq || cfg.stage2_prompt_len + cfg.stage2_gen_len > max_seq {
        return Err(Error::Capacity {
            needed: cfg.stage1_seq_len.max(cfg.stage2_prompt_len + cfg.stage2_gen_len),
            max_seq,
        });
    }
    if cfg.stage1_seq_len < h + 2 || cfg.stage2_prompt_len + cfg.stage2_gen_len < h + 2 {
        return Err(Error::Data(format!("sequences must hold at least {} tokens", h + 2)));
    }

    let s1_windows = windows(corpus, cfg.stage1_seq_len)?;
    let prompts: Vec<Vec<TokenId>> = windows(corpus, cfg.stage2_prompt_len)?
        .into_iter()
        .filter(|(_, m)| m.iter().all(|&r| r))
        .map(|(t, _)| t)
        .collect();
    if prompts.is_empty() {
        return Err(Error::Data("corpus too short for a single stage-2 prompt".into()));
    }
    let fp = fingerprint(cfg, &spec_cfg, base, corpus.token_count())?;
    let total = cfg.stage1_steps + cfg.stage2_steps;

    let mut spec = Speculator::init(spec_cfg)?;
    let mut opt = AdamW::new(cfg.optimizer, &spec);
    let mut stage1: Option<Speculator> = None;
    let mut losses = Vec::with_capacity(total);
    let mut done = 0;
    if opts.resume {
        let dir = opts
            .checkpoint_dir
            .as_ref()
            .ok_or_else(|| Error::Config("resume needs a checkpoint directory".into()))?;
        if let Some((d, s, o, s1, l)) = load_checkpoint(dir, &fp)? {
            (done, spec, opt, stage1, losses) = (d, s, o, s1, l);
        }
    }
    if cfg.stage1_steps == 0 && stage1.is_none() {
        stage1 = Some(spec.clone());
    }

    let d_base = base.config().d_model;
    let per_window = cfg.stage1_seq_len * d_base;
    let cache_cap = cfg.state_cache_floats / per_window.max(1);
    let mut state_cache: HashMap<usize, Vec<f32>> = HashMap::new();
    let mut grads = spec.zeros_like();

    while done < total {
        if opts.stop_after.is_some_and(|s| done >= s) {
            break;
        }
        let (stage, local) = if done < cfg.stage1_steps {
            (Stage::One, done)
        } else {
            (Stage::Two, done - cfg.stage1_steps)
        };
        let tf = match stage {
            Stage::One => {
                let idx = batch_indices(s1_windows.len(), cfg.stage1_batch, local, cfg.seed, 1);
                let mut tf = TeacherForced::new(h, d_base);
                for &i in &idx {
                    if !state_cache.contains_key(&i) {
                        let out = base.forward_full(&[s1_windows[i].0.clone()])?;
                        let states = out.into_iter().next().unwrap().states.into_data();
                        if state_cache.len() < cache_cap {
                            state_cache.insert(i, states.clone());
                        }
                        tf.push_sequence(&s1_windows[i].0, &s1_windows[i].1, &states, 0)?;
                    } else {
                        tf.push_sequence(&s1_windows[i].0, &s1_windows[i].1, &state_cache[&i], 0)?;
                    }
                }
                tf
            }
            _ => {
                let idx = batch_indices(prompts.len(), cfg.stage2_batch, local, cfg.seed, 2);
                let batch: Vec<Vec<TokenId>> = idx.iter().map(|&i| prompts[i].clone()).collect();
                stage2_data(base, h, &batch, cfg.stage2_gen_len)?.0
            }
        };
        crate::params::zero_all(&mut grads);
        let loss = speculator_loss_and_grad(&spec, &tf, &mut grads)?;
        opt.step(&mut spec, &grads, lr_at(cfg, local, stage))?;
        let report = LossReport {
            step: done,
            stage,
            per_head: loss.per_head,
        };
        progress(&report);
        losses.push(report);
        done += 1;
        if done == cfg.stage1_steps {
            stage1 = Some(spec.clone());
        }

        if let Some(dir) = &opts.checkpoint_dir {
            let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
            let boundary = done == cfg.stage1_steps || done == total;
            let stopping = opts.stop_after == Some(done);
            if periodic || boundary || stopping {
                save_checkpoint(dir, done, &spec, &opt, stage1.as_ref(), &losses, &fp)?;
            }
        }
    }

    Ok(TrainOutcome {
        speculator: spec,
        stage1,
        losses,
        steps_done: done,
    })
}
