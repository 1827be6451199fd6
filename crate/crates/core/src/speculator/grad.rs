//! Teacher-forced speculator loss and its hand-written backward pass.
//!
//! Row `n` holds the base state after consuming `t[0..=n]`. Stage `i` reads
//! token `t[n+i]` and is scored against `t[n+i+1]`, which is exactly the
//! situation at decode time, where the base model has already produced
//! `t[n+1]` from the same state.

use super::Speculator;
use crate::corpus::{TokenId, PAD};
use crate::error::{Error, Result};
use crate::tensor::{gelu_grad_scalar, gemm_nt, gemm_tn_acc, layernorm_row_backward, log_softmax_row};

/// Rows of teacher-forced speculator inputs, one per base-state position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TeacherForced {
    pub d_base: usize,
    /// rows × d_base.
    pub states: Vec<f32>,
    /// `[stage][row]` input token.
    pub inputs: Vec<Vec<TokenId>>,
    /// `[stage][row]` target token.
    pub targets: Vec<Vec<TokenId>>,
    /// `[stage][row]` whether the row is scored at that stage.
    pub valid: Vec<Vec<bool>>,
}

impl TeacherForced {
    pub fn new(n_stages: usize, d_base: usize) -> Self {
        Self {
            d_base,
            states: Vec::new(),
            inputs: vec![Vec::new(); n_stages],
            targets: vec![Vec::new(); n_stages],
            valid: vec![Vec::new(); n_stages],
        }
    }

    pub fn rows(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn n_stages(&self) -> usize {
        self.inputs.len()
    }

    /// Adds rows `first_row..` of one sequence. `states` holds one base state
    /// per position (at least up to the last usable row); `real` flags
    /// non-padding tokens. A row is scored at stage `i` only when every token
    /// from `n` to `n+i+1` is real.
    pub fn push_sequence(
        &mut self,
        tokens: &[TokenId],
        real: &[bool],
        states: &[f32],
        first_row: usize,
    ) -> Result<()> {
        let h = self.n_stages();
        let d = self.d_base;
        let t = tokens.len();
        if real.len() != t || states.len() % d != 0 {
            return Err(Error::Shape("token, mask and state lengths disagree".into()));
        }
        if t < h + 2 {
            return Err(Error::Data(format!(
                "a sequence of {t} tokens is too short for {h} stages (need {})",
                h + 2
            )));
        }
        let n_states = states.len() / d;
        let last = (t - 2).min(n_states);
        for n in first_row..last {
            self.states.extend_from_slice(&states[n * d..(n + 1) * d]);
            for i in 1..=h {
                let ok = n + i + 1 < t && real[n..=n + i + 1].iter().all(|&r| r);
                let tok = |j: usize| if j < t { tokens[j] } else { PAD };
                self.inputs[i - 1].push(tok(n + i));
                self.targets[i - 1].push(tok(n + i + 1));
                self.valid[i - 1].push(ok);
            }
        }
        Ok(())
    }

    /// Scored rows at each stage.
    pub fn counts(&self) -> Vec<usize> {
        self.valid.iter().map(|v| v.iter().filter(|&&x| x).count()).collect()
    }
}

/// Per-head mean cross-entropy over scored rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecLoss {
    pub per_head: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SpecLoss {
    /// Unweighted sum over heads; the quantity being minimised.
    pub fn total(&self) -> f64 {
        self.per_head.iter().sum()
    }
}

/// Forward and backward over a teacher-forced batch. Gradients are added
/// into `grads`, which must have the speculator's shapes.
pub fn speculator_loss_and_grad(
    spec: &Speculator,
    batch: &TeacherForced,
    grads: &mut Speculator,
) -> Result<SpecLoss> {
    let cfg = spec.config();
    let (h, ds, v) = (cfg.n_stages, cfg.d_state, cfg.vocab_size);
    if batch.n_stages() != h || batch.d_base != cfg.d_base {
        return Err(Error::Shape(format!(
            "batch built for {} stages and width {}, speculator has {h} and {}",
            batch.n_stages(),
            batch.d_base,
            cfg.d_base
        )));
    }
    let rows = batch.rows();
    if rows == 0 {
        return Err(Error::Data("empty teacher-forced batch".into()));
    }
    for i in 0..h {
        if let Some(&tok) = batch.inputs[i].iter().chain(&batch.targets[i]).find(|&&t| t as usize >= v) {
            return Err(Error::Range(format!("token {tok} outside vocabulary of {v}")));
        }
    }

    let mut acts = Vec::with_capacity(h);
    for stage in 1..=h {
        let input: &[f32] = if stage == 1 {
            &batch.states
        } else {
            &acts.last().map(|a: &super::StageActs| &a.state).unwrap()[..]
        };
        let a = spec.stage_rows(stage, input, &batch.inputs[stage - 1]);
        acts.push(a);
    }

    let counts = batch.counts();
    let mut per_head = vec![0.0f64; h];
    let mut logp = vec![0.0f32; v];
    // Gradient flowing into the current stage's output state from the next.
    let mut d_state_next: Option<Vec<f32>> = None;
    for stage in (1..=h).rev() {
        let i = stage - 1;
        let a = &acts[i];
        let w = &spec.stages[i];
        let g = &mut grads.stages[i];
        let d_in = cfg.d_in(stage);
        let (a_s, a_e) = cfg.alphas(stage);

        let mut dlogits = vec![0.0f32; rows * v];
        if counts[i] > 0 {
            let scale = 1.0 / counts[i] as f32;
            let mut sum = 0.0f64;
            for r in 0..rows {
                if !batch.valid[i][r] {
                    continue;
                }
                log_softmax_row(&a.logits[r * v..(r + 1) * v], &mut logp);
                let tgt = batch.targets[i][r] as usize;
                sum -= logp[tgt] as f64;
                let dl = &mut dlogits[r * v..(r + 1) * v];
                for (d, &lp) in dl.iter_mut().zip(&logp) {
                    *d = lp.exp() * scale;
                }
                dl[tgt] -= scale;
            }
            per_head[i] = sum / counts[i] as f64;
        }

        gemm_tn_acc(&a.state, &dlogits, g.head.data_mut(), rows, ds, v);
        let mut dstate = vec![0.0f32; rows * ds];
        gemm_nt(&dlogits, w.head.data(), &mut dstate, rows, v, ds);
        if let Some(extra) = d_state_next.take() {
            for (d, e) in dstate.iter_mut().zip(extra) {
                *d += e;
            }
        }
        for (d, &z) in dstate.iter_mut().zip(&a.normed) {
            *d *= gelu_grad_scalar(z);
        }
        let mut dpre = vec![0.0f32; rows * ds];
        for r in 0..rows {
            layernorm_row_backward(
                &a.xhat[r * ds..(r + 1) * ds],
                a.inv[r],
                w.ln_g.data(),
                &dstate[r * ds..(r + 1) * ds],
                &mut dpre[r * ds..(r + 1) * ds],
                g.ln_g.data_mut(),
                g.ln_b.data_mut(),
            );
        }
        for (r, &tok) in batch.inputs[i].iter().enumerate() {
            let row = g.emb.row_mut(tok as usize);
            for (e, &d) in row.iter_mut().zip(&dpre[r * ds..(r + 1) * ds]) {
                *e += a_e * d;
            }
        }
        let input: &[f32] = if stage == 1 { &batch.states } else { &acts[i - 1].state };
        let scaled: Vec<f32> = dpre.iter().map(|&d| a_s * d).collect();
        gemm_tn_acc(input, &scaled, g.ws.data_mut(), rows, d_in, ds);
        if stage > 1 {
            let mut din = vec![0.0f32; rows * d_in];
            gemm_nt(&scaled, w.ws.data(), &mut din, rows, ds, d_in);
            d_state_next = Some(din);
        }
    }

    Ok(SpecLoss { per_head, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use crate::speculator::SpeculatorConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SpeculatorConfig {
        SpeculatorConfig {
            n_stages: 2,
            d_state: 16,
            d_base: 12,
            vocab_size: 32,
            branching: vec![2, 2],
            state_weight: 0.5,
            seed: 9,
        }
    }

    fn random_batch(cfg: &SpeculatorConfig, seed: u64) -> TeacherForced {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tf = TeacherForced::new(cfg.n_stages, cfg.d_base);
        for s in 0..2 {
            let t = 9;
            let tokens: Vec<TokenId> = (0..t).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
            let mut real = vec![true; t];
            if s == 1 {
                real[7] = false;
                real[8] = false;
            }
            let states: Vec<f32> = (0..t * cfg.d_base).map(|_| rng.gen_range(-1.5..1.5)).collect();
            tf.push_sequence(&tokens, &real, &states, 0).unwrap();
        }
        tf
    }

    /// Independent f64 forward: loops only, no shared kernels.
    fn oracle_loss(spec: &Speculator, params: &[Vec<f64>], tf: &TeacherForced) -> f64 {
        let cfg = spec.config();
        let (h, ds, v) = (cfg.n_stages, cfg.d_state, cfg.vocab_size);
        let w = cfg.stage_share();
        let mut total = 0.0;
        let counts = tf.counts();
        for r in 0..tf.rows() {
            let mut x: Vec<f64> = tf.states[r * tf.d_base..(r + 1) * tf.d_base]
                .iter()
                .map(|&v| v as f64)
                .collect();
            for i in 0..h {
                let stage = i + 1;
                let d_in = cfg.d_in(stage);
                let a_s = w.sqrt();
                let a_e = ((1.0 - w) * d_in as f64).sqrt();
                let p = &params[i * 5..i * 5 + 5];
                let (ws, emb, g, b, head) = (&p[0], &p[1], &p[2], &p[3], &p[4]);
                let tok = tf.inputs[i][r] as usize;
                let mut u = vec![0.0; ds];
                for j in 0..ds {
                    let mut acc = 0.0;
                    for k in 0..d_in {
                        acc += x[k] * ws[k * ds + j];
                    }
                    u[j] = a_s * acc + a_e * emb[tok * ds + j];
                }
                let mean = u.iter().sum::<f64>() / ds as f64;
                let var = u.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / ds as f64;
                let sd = (var + 1e-5).sqrt();
                let y: Vec<f64> = (0..ds)
                    .map(|j| {
                        let z = (u[j] - mean) / sd * g[j] + b[j];
                        let c = (2.0 / std::f64::consts::PI).sqrt();
                        0.5 * z * (1.0 + (c * (z + 0.044715 * z * z * z)).tanh())
                    })
                    .collect();
                if tf.valid[i][r] {
                    let logits: Vec<f64> = (0..v)
                        .map(|o| (0..ds).map(|j| y[j] * head[j * v + o]).sum())
                        .collect();
                    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                    total += (lse - logits[tf.targets[i][r] as usize]) / counts[i] as f64;
                }
                x = y;
            }
        }
        total
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let cfg = tiny();
        let mut spec = Speculator::init(cfg.clone()).unwrap();
        for s in &mut spec.stages {
            s.head.fill(0.0);
        }
        let tf = random_batch(&cfg, 1);
        let mut g = spec.zeros_like();
        let loss = speculator_loss_and_grad(&spec, &tf, &mut g).unwrap();
        for l in &loss.per_head {
            assert!((l - (32f64).ln()).abs() < 1e-5);
        }
    }

    #[test]
    fn confident_correct_logits_give_near_zero() {
        // One stage, identity-like path: make the head map the embedding of
        // token t to a large logit on target t by construction.
        let cfg = SpeculatorConfig {
            n_stages: 1,
            branching: vec![1],
            ..tiny()
        };
        let mut spec = Speculator::init(cfg.clone()).unwrap();
        let mut tf = TeacherForced::new(1, cfg.d_base);
        tf.states = vec![0.0; cfg.d_base];
        tf.inputs = vec![vec![3]];
        tf.targets = vec![vec![5]];
        tf.valid = vec![vec![true]];
        let (state, _) = spec.stage_forward(1, &[0.0; 12], 3).unwrap();
        let head = &mut spec.stages[0].head;
        for j in 0..16 {
            head.data_mut()[j * 32 + 5] = 1000.0 * state[j];
        }
        let mut g = spec.zeros_like();
        let loss = speculator_loss_and_grad(&spec, &tf, &mut g).unwrap();
        assert!(loss.per_head[0] < 1e-6, "{}", loss.per_head[0]);
    }

    #[test]
    fn row_construction_and_masking() {
        let cfg = tiny();
        let mut tf = TeacherForced::new(2, cfg.d_base);
        let tokens: Vec<TokenId> = (0..6).collect();
        let real = [true, true, true, true, true, false];
        tf.push_sequence(&tokens, &real, &vec![0.0; 6 * 12], 0).unwrap();
        assert_eq!(tf.rows(), 4);
        assert_eq!(tf.inputs[0], vec![1, 2, 3, 4]);
        assert_eq!(tf.targets[0], vec![2, 3, 4, 5]);
        assert_eq!(tf.inputs[1], vec![2, 3, 4, 5]);
        assert_eq!(tf.valid[0], vec![true, true, true, false]);
        assert_eq!(tf.valid[1], vec![true, true, false, false]);
        let mut short = TeacherForced::new(2, 12);
        assert!(matches!(
            short.push_sequence(&[0, 1, 2], &[true; 3], &[0.0; 36], 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn gradients_match_f64_finite_differences() {
        let cfg = tiny();
        let mut spec = Speculator::init(cfg.clone()).unwrap();
        // Non-trivial LayerNorm parameters so their gradients are exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in &mut spec.stages {
            s.ln_g.data_mut().iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
            s.ln_b.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        }
        let tf = random_batch(&cfg, 2);
        let mut grads = spec.zeros_like();
        speculator_loss_and_grad(&spec, &tf, &mut grads).unwrap();

        let params: Vec<Vec<f64>> = spec
            .named()
            .iter()
            .map(|(_, t)| t.data().iter().map(|&x| x as f64).collect())
            .collect();
        let eps = 1e-5;
        let names: Vec<String> = spec.named().into_iter().map(|(n, _)| n).collect();
        for (ti, (name, g)) in names.iter().zip(grads.named()).enumerate() {
            let mut num = vec![0.0f64; g.1.len()];
            for (j, slot) in num.iter_mut().enumerate() {
                let mut p = params.clone();
                p[ti][j] += eps;
                let up = oracle_loss(&spec, &p, &tf);
                p[ti][j] -= 2.0 * eps;
                let down = oracle_loss(&spec, &p, &tf);
                *slot = (up - down) / (2.0 * eps);
            }
            let diff: f64 = num
                .iter()
                .zip(g.1.data())
                .map(|(n, &a)| (n - a as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt();
            let rel = diff / norm.max(1e-12);
            assert!(rel <= 1e-3, "{name}: relative error {rel}");
        }
    }

    #[test]
    fn oracle_agrees_with_forward_loss() {
        let cfg = tiny();
        let spec = Speculator::init(cfg.clone()).unwrap();
        let tf = random_batch(&cfg, 3);
        let mut g = spec.zeros_like();
        let loss = speculator_loss_and_grad(&spec, &tf, &mut g).unwrap();
        let params: Vec<Vec<f64>> = spec
            .named()
            .iter()
            .map(|(_, t)| t.data().iter().map(|&x| x as f64).collect())
            .collect();
        let oracle = oracle_loss(&spec, &params, &tf);
        assert!((loss.total() - oracle).abs() < 1e-4, "{} vs {oracle}", loss.total());
    }

    #[test]
    fn later_tokens_do_not_affect_head_losses() {
        // Head i at row n sees tokens up to n+i+1 only.
        let cfg = tiny();
        let spec = Speculator::init(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tokens: Vec<TokenId> = (0..10).map(|_| rng.gen_range(0..32)).collect();
        let states: Vec<f32> = (0..10 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let head_loss_at_row0 = |toks: &[TokenId]| {
            let mut tf = TeacherForced::new(2, 12);
            tf.push_sequence(toks, &[true; 10], &states, 0).unwrap();
            // Keep only row 0.
            tf.states.truncate(12);
            for i in 0..2 {
                tf.inputs[i].truncate(1);
                tf.targets[i].truncate(1);
                tf.valid[i].truncate(1);
            }
            let mut g = spec.zeros_like();
            speculator_loss_and_grad(&spec, &tf, &mut g).unwrap().per_head
        };
        let base = head_loss_at_row0(&tokens);
        let mut changed = tokens.clone();
        changed[3] = (changed[3] + 1) % 32;
        let after = head_loss_at_row0(&changed);
        assert_eq!(base[0], after[0]);
        // Head 2 at row 0 is scored against t[3].
        assert_ne!(base[1], after[1]);
        let mut later = tokens.clone();
        later[4] = (later[4] + 1) % 32;
        assert_eq!(head_loss_at_row0(&later), base);
    }
}
