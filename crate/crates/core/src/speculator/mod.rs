//! Multi-stage MLP speculator.
//!
//! Stage `i` mixes the previous state (the base model's state for `i = 1`)
//! with the embedding of one token, normalises, applies GeLU and reads out
//! next-token logits. Stages share no weights. Expanding each stage's top
//! tokens yields a tree of candidate continuations.

pub(crate) mod grad;

pub use grad::{speculator_loss_and_grad, SpecLoss, TeacherForced};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::corpus::{TokenId, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, ParamSet};
use crate::tensor::{gelu_scalar, gemm, layernorm_row_cached, log_softmax_row, Tensor, LAYERNORM_EPS};
use crate::tree::CandidateTree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeculatorConfig {
    pub n_stages: usize,
    pub d_state: usize,
    pub d_base: usize,
    pub vocab_size: usize,
    /// Children per node at each depth.
    pub branching: Vec<usize>,
    /// Share of the last stage's state variance owed to the base state.
    pub state_weight: f64,
    pub seed: u64,
}

impl Default for SpeculatorConfig {
    fn default() -> Self {
        Self {
            n_stages: 3,
            d_state: 256,
            d_base: 256,
            vocab_size: VOCAB_SIZE,
            branching: vec![6, 3, 2],
            state_weight: 0.5,
            seed: 0,
        }
    }
}

impl SpeculatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 || self.d_state == 0 || self.d_base == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "n_stages, d_state, d_base and vocab_size must be positive".into(),
            ));
        }
        if self.branching.len() != self.n_stages {
            return Err(Error::Config(format!(
                "branching has {} entries for {} stages",
                self.branching.len(),
                self.n_stages
            )));
        }
        if self.branching.iter().any(|&b| b == 0 || b > self.vocab_size) {
            return Err(Error::Config(format!(
                "branch counts must lie in 1..={}",
                self.vocab_size
            )));
        }
        if !(self.state_weight > 0.0 && self.state_weight < 1.0) {
            return Err(Error::Config(format!(
                "state_weight {} is outside (0, 1)",
                self.state_weight
            )));
        }
        Ok(())
    }

    /// Input width of stage `i` (1-based).
    pub fn d_in(&self, stage: usize) -> usize {
        if stage == 1 {
            self.d_base
        } else {
            self.d_state
        }
    }

    /// Per-stage share `w` with `w^h = state_weight`.
    pub fn stage_share(&self) -> f64 {
        self.state_weight.powf(1.0 / self.n_stages as f64)
    }

    /// Scalars `(α_s, α_e)` on the projected state and the embedding row.
    ///
    /// With unit-variance inputs and weights of variance `1/d_state`, the
    /// projected state has per-entry variance `d_in/d_state` while an
    /// embedding row has `1/d_state`. The extra `sqrt(d_in)` on `α_e`
    /// equalises the two before the `w : 1-w` split.
    pub fn alphas(&self, stage: usize) -> (f32, f32) {
        let w = self.stage_share();
        let a_s = w.sqrt();
        let a_e = ((1.0 - w) * self.d_in(stage) as f64).sqrt();
        (a_s as f32, a_e as f32)
    }

    /// Number of root-to-leaf paths in a full tree.
    pub fn leaf_count(&self) -> usize {
        self.branching.iter().product()
    }

    pub fn expected_param_count(&self) -> usize {
        (1..=self.n_stages)
            .map(|i| {
                self.d_in(i) * self.d_state
                    + self.vocab_size * self.d_state
                    + 2 * self.d_state
                    + self.d_state * self.vocab_size
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageWeights {
    /// d_in × d_state.
    pub ws: Tensor,
    /// vocab × d_state.
    pub emb: Tensor,
    pub ln_g: Tensor,
    pub ln_b: Tensor,
    /// d_state × vocab.
    pub head: Tensor,
}

const STAGE_TENSORS: [&str; 5] = ["ws", "emb", "ln_g", "ln_b", "head"];

impl StageWeights {
    fn parts(&self) -> [&Tensor; 5] {
        [&self.ws, &self.emb, &self.ln_g, &self.ln_b, &self.head]
    }

    fn parts_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.ws,
            &mut self.emb,
            &mut self.ln_g,
            &mut self.ln_b,
            &mut self.head,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Speculator {
    config: SpeculatorConfig,
    pub stages: Vec<StageWeights>,
}

impl ParamSet for Speculator {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            for (name, t) in STAGE_TENSORS.iter().zip(s.parts()) {
                out.push((format!("spec.stage{}.{name}", i + 1), t));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.stages.iter_mut().flat_map(|s| s.parts_mut()).collect()
    }
}

/// Activations of one stage over a batch of rows.
pub(crate) struct StageActs {
    /// rows × d_state, normalised before gain and bias.
    pub xhat: Vec<f32>,
    /// Per-row inverse standard deviation.
    pub inv: Vec<f32>,
    /// rows × d_state, LayerNorm output (GeLU input).
    pub normed: Vec<f32>,
    /// rows × d_state.
    pub state: Vec<f32>,
    /// rows × vocab.
    pub logits: Vec<f32>,
}

impl Speculator {
    /// Gaussian init with std `d_state^-1/2`; LayerNorm gains 1, biases 0.
    pub fn init(config: SpeculatorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (ds, v) = (config.d_state, config.vocab_size);
        let std = (ds as f32).powf(-0.5);
        let stages = (1..=config.n_stages)
            .map(|i| StageWeights {
                ws: normal_tensor(&mut rng, &[config.d_in(i), ds], std),
                emb: normal_tensor(&mut rng, &[v, ds], std),
                ln_g: Tensor::full(&[ds], 1.0),
                ln_b: Tensor::zeros(&[ds]),
                head: normal_tensor(&mut rng, &[ds, v], std),
            })
            .collect();
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &SpeculatorConfig {
        &self.config
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        crate::params::zero_all(&mut z);
        z
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.config.n_stages {
            return Err(Error::Range(format!(
                "stage {stage} outside 1..={}",
                self.config.n_stages
            )));
        }
        Ok(())
    }

    /// One stage for a batch of rows. `inputs` is rows × d_in(stage).
    pub(crate) fn stage_rows(&self, stage: usize, inputs: &[f32], tokens: &[TokenId]) -> StageActs {
        let rows: Vec<usize> = (0..tokens.len()).collect();
        self.stage_rows_shared(stage, inputs, &rows, tokens)
    }

    /// Like `stage_rows`, but row `r` reads input row `source[r]`, so rows
    /// sharing an input share its projection.
    fn stage_rows_shared(&self, stage: usize, inputs: &[f32], source: &[usize], tokens: &[TokenId]) -> StageActs {
        let cfg = &self.config;
        let w = &self.stages[stage - 1];
        let (d_in, ds, v) = (cfg.d_in(stage), cfg.d_state, cfg.vocab_size);
        let rows = tokens.len();
        let (a_s, a_e) = cfg.alphas(stage);
        let unique = inputs.len() / d_in;
        let mut proj = vec![0.0; unique * ds];
        gemm(inputs, w.ws.data(), &mut proj, unique, d_in, ds);
        let mut pre = vec![0.0; rows * ds];
        for (r, (&tok, &src)) in tokens.iter().zip(source).enumerate() {
            let e = w.emb.row(tok as usize);
            let sp = &proj[src * ds..(src + 1) * ds];
            for ((p, &s), &ev) in pre[r * ds..(r + 1) * ds].iter_mut().zip(sp).zip(e) {
                *p = a_s * s + a_e * ev;
            }
        }
        let mut normed = vec![0.0; rows * ds];
        let mut xhat = vec![0.0; rows * ds];
        let mut inv = vec![0.0; rows];
        for r in 0..rows {
            inv[r] = layernorm_row_cached(
                &pre[r * ds..(r + 1) * ds],
                w.ln_g.data(),
                w.ln_b.data(),
                LAYERNORM_EPS,
                &mut normed[r * ds..(r + 1) * ds],
                &mut xhat[r * ds..(r + 1) * ds],
            );
        }
        let state: Vec<f32> = normed.iter().map(|&x| gelu_scalar(x)).collect();
        let mut logits = vec![0.0; rows * v];
        gemm(&state, w.head.data(), &mut logits, rows, ds, v);
        StageActs {
            xhat,
            inv,
            normed,
            state,
            logits,
        }
    }

    /// `(state_out, logits)` of stage `stage` (1-based) for one input.
    pub fn stage_forward(
        &self,
        stage: usize,
        state_in: &[f32],
        token_in: TokenId,
    ) -> Result<(Vec<f32>, Vec<f32>)> {
        self.check_stage(stage)?;
        let d_in = self.config.d_in(stage);
        if state_in.len() != d_in {
            return Err(Error::Shape(format!(
                "stage {stage} takes a state of width {d_in}, got {}",
                state_in.len()
            )));
        }
        if token_in as usize >= self.config.vocab_size {
            return Err(Error::Range(format!(
                "token {token_in} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let acts = self.stage_rows(stage, state_in, &[token_in]);
        Ok((acts.state, acts.logits))
    }

    /// Expands the full candidate tree from the base state at the last
    /// consumed position and the pending token. Nodes are stored level by
    /// level; each node's children are contiguous and sorted by descending
    /// log-probability, ties to the lower token id.
    pub fn speculate_tree(&self, base_state: &[f32], last_token: TokenId) -> Result<CandidateTree> {
        let cfg = &self.config;
        if base_state.len() != cfg.d_base {
            return Err(Error::Shape(format!(
                "base state has width {}, want {}",
                base_state.len(),
                cfg.d_base
            )));
        }
        if last_token as usize >= cfg.vocab_size {
            return Err(Error::Range(format!("token {last_token} outside vocabulary")));
        }
        let v = cfg.vocab_size;
        let mut tree = CandidateTree::new();
        // Frontier: (node index, input token) with matching input state rows.
        let mut frontier: Vec<(Option<usize>, TokenId)> = vec![(None, last_token)];
        let mut inputs = base_state.to_vec();
        let mut logp = vec![0.0; v];
        // Siblings share their parent's state; `source` maps each frontier
        // row to its row in `inputs`.
        let mut source = vec![0];
        for stage in 1..=cfg.n_stages {
            let tokens: Vec<TokenId> = frontier.iter().map(|f| f.1).collect();
            let acts = self.stage_rows_shared(stage, &inputs, &source, &tokens);
            let b = cfg.branching[stage - 1];
            let mut next = Vec::with_capacity(frontier.len() * b);
            source.clear();
            for (r, &(parent, _)) in frontier.iter().enumerate() {
                log_softmax_row(&acts.logits[r * v..(r + 1) * v], &mut logp);
                for tok in top_tokens(&logp, b) {
                    let idx = tree.push(parent, tok, logp[tok as usize])?;
                    next.push((Some(idx), tok));
                    source.push(r);
                }
            }
            frontier = next;
            inputs = acts.state;
        }
        Ok(tree)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("speculator", serde_json::to_value(&self.config)?);
        for (name, t) in self.named() {
            c.insert(name, t.clone());
        }
        Ok(c)
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        if c.kind != "speculator" {
            return Err(Error::Checkpoint(format!(
                "expected a speculator checkpoint, got {}",
                c.kind
            )));
        }
        let config: SpeculatorConfig = serde_json::from_value(c.config.clone())?;
        config.validate()?;
        let (ds, v) = (config.d_state, config.vocab_size);
        let mut stages = Vec::with_capacity(config.n_stages);
        for i in 1..=config.n_stages {
            let mut get = |name: &str, shape: Vec<usize>| -> Result<Tensor> {
                let t = c.take(&format!("spec.stage{i}.{name}"))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "spec.stage{i}.{name}: shape {:?}, want {shape:?}",
                        t.shape()
                    )));
                }
                Ok(t)
            };
            stages.push(StageWeights {
                ws: get("ws", vec![config.d_in(i), ds])?,
                emb: get("emb", vec![v, ds])?,
                ln_g: get("ln_g", vec![ds])?,
                ln_b: get("ln_b", vec![ds])?,
                head: get("head", vec![ds, v])?,
            });
        }
        if let Some(extra) = c.tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Self { config, stages })
    }
}

/// The `b` best token ids by descending score, ties to the lower id.
pub fn top_tokens(scores: &[f32], b: usize) -> Vec<TokenId> {
    let b = b.min(scores.len());
    if b == 0 {
        return Vec::new();
    }
    // Integer keys that order like `f32::total_cmp`.
    let key = |x: f32| {
        let i = x.to_bits() as i32;
        i ^ (((i >> 31) as u32) >> 1) as i32
    };
    let mut best: Vec<(i32, TokenId)> = Vec::with_capacity(b + 1);
    let mut floor = i32::MIN;
    // Scanning ids upward and inserting only on strict improvement keeps
    // ties in id order.
    for (id, &x) in scores.iter().enumerate() {
        let k = key(x);
        if best.len() == b && k <= floor {
            continue;
        }
        let at = best.iter().position(|&(y, _)| k > y).unwrap_or(best.len());
        best.insert(at, (k, id as TokenId));
        best.truncate(b);
        if best.len() == b {
            floor = best[b - 1].0;
        }
    }
    best.into_iter().map(|(_, id)| id).collect()
}
