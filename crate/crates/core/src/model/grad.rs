//! Next-token training pass for the base model: forward with saved
//! activations, then hand-written backward.

use super::{add_bias, masked_softmax_row, BaseModelConfig, BaseWeights};
use crate::corpus::WindowBatch;
use crate::error::{Error, Result};
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, gemm, gemm_nt, gemm_tn_acc, layernorm_row_backward,
    layernorm_row_cached, log_softmax_row, LAYERNORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaseBatchLoss {
    /// Mean cross-entropy over scored positions.
    pub loss: f32,
    pub scored: usize,
}

struct LayerActs {
    xhat1: Vec<f32>,
    inv1: Vec<f32>,
    h1: Vec<f32>,
    qkv: Vec<f32>,
    /// Attention weights per (sequence, head) as a `t × t` matrix, zero above
    /// the diagonal.
    probs: Vec<f32>,
    att: Vec<f32>,
    xhat2: Vec<f32>,
    inv2: Vec<f32>,
    h2: Vec<f32>,
    pre: Vec<f32>,
    act: Vec<f32>,
}

fn layernorm_rows(
    x: &[f32],
    g: &[f32],
    b: &[f32],
    d: usize,
    out: &mut [f32],
    xhat: &mut [f32],
    inv: &mut [f32],
) {
    for r in 0..inv.len() {
        inv[r] = layernorm_row_cached(
            &x[r * d..(r + 1) * d],
            g,
            b,
            LAYERNORM_EPS,
            &mut out[r * d..(r + 1) * d],
            &mut xhat[r * d..(r + 1) * d],
        );
    }
}

fn layernorm_rows_backward(
    xhat: &[f32],
    inv: &[f32],
    g: &[f32],
    dy: &[f32],
    d: usize,
    dx: &mut [f32],
    dg: &mut [f32],
    db: &mut [f32],
) {
    for r in 0..inv.len() {
        layernorm_row_backward(
            &xhat[r * d..(r + 1) * d],
            inv[r],
            g,
            &dy[r * d..(r + 1) * d],
            &mut dx[r * d..(r + 1) * d],
            dg,
            db,
        );
    }
}

fn col_sum_acc(x: &[f32], cols: usize, out: &mut [f32]) {
    for row in x.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Mean next-token cross-entropy over the batch's real positions; gradients
/// are added into `grads`. All windows must share one length.
pub fn base_loss_and_grad(
    cfg: &BaseModelConfig,
    w: &BaseWeights,
    batch: &WindowBatch,
    grads: &mut BaseWeights,
) -> Result<BaseBatchLoss> {
    let (d, ff, vocab) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let b = batch.tokens.len();
    let t = batch.tokens.first().map_or(0, Vec::len);
    if b == 0 || t < 2 {
        return Err(Error::Data("base training needs windows of at least 2 tokens".into()));
    }
    if batch.tokens.iter().any(|w| w.len() != t) || batch.start.len() != b {
        return Err(Error::Data("windows must share a length and each have a start".into()));
    }
    if batch.start.iter().any(|&s| s + t > cfg.max_seq) {
        return Err(Error::Capacity {
            needed: batch.start.iter().max().unwrap() + t,
            max_seq: cfg.max_seq,
        });
    }
    let n = b * t;

    // Targets: token i+1 for every position i whose successor is real.
    let mut targets = vec![None; n];
    let mut scored = 0usize;
    for s in 0..b {
        for i in 0..t - 1 {
            if batch.mask[s][i] && batch.mask[s][i + 1] {
                let tok = batch.tokens[s][i + 1] as usize;
                if tok >= vocab {
                    return Err(Error::Range(format!("token {tok} outside vocabulary")));
                }
                targets[s * t + i] = Some(tok);
                scored += 1;
            }
        }
    }
    if scored == 0 {
        return Err(Error::Data("batch has no scorable positions".into()));
    }

    // ---- forward ----
    let mut x = vec![0.0f32; n * d];
    for s in 0..b {
        for i in 0..t {
            let tok = batch.tokens[s][i] as usize;
            if tok >= vocab {
                return Err(Error::Range(format!("token {tok} outside vocabulary")));
            }
            let row = &mut x[(s * t + i) * d..(s * t + i + 1) * d];
            let pos = w.pos_emb.row(batch.start[s] + i);
            for ((o, e), p) in row.iter_mut().zip(w.tok_emb.row(tok)).zip(pos) {
                *o = e + p;
            }
        }
    }

    let mut acts = Vec::with_capacity(cfg.n_layers);
    let mut qh = vec![0.0f32; t * hd];
    let mut kh = vec![0.0f32; t * hd];
    let mut vh = vec![0.0f32; t * hd];
    let mut oh = vec![0.0f32; t * hd];
    let mut proj = vec![0.0f32; n * d];
    for lw in &w.layers {
        let mut xhat1 = vec![0.0; n * d];
        let mut inv1 = vec![0.0; n];
        let mut h1 = vec![0.0; n * d];
        layernorm_rows(&x, lw.ln1_g.data(), lw.ln1_b.data(), d, &mut h1, &mut xhat1, &mut inv1);
        let mut qkv = vec![0.0; n * 3 * d];
        gemm(&h1, lw.wqkv.data(), &mut qkv, n, d, 3 * d);

        // Per (sequence, head): scores, causal softmax, value mix.
        let mut all_probs = vec![0.0f32; b * nh * t * t];
        let mut att = vec![0.0f32; n * d];
        for s in 0..b {
            let seq = &qkv[s * t * 3 * d..(s + 1) * t * 3 * d];
            for head in 0..nh {
                let off = head * hd;
                split_head(seq, d, off, hd, &mut qh, &mut kh, &mut vh);
                let p = &mut all_probs[(s * nh + head) * t * t..(s * nh + head + 1) * t * t];
                gemm_nt(&qh, &kh, p, t, hd, t);
                for (i, row) in p.chunks_exact_mut(t).enumerate() {
                    masked_softmax_row(row, scale, i + 1, &[]);
                }
                gemm(p, &vh, &mut oh, t, t, hd);
                for i in 0..t {
                    let r = (s * t + i) * d + off;
                    att[r..r + hd].copy_from_slice(&oh[i * hd..(i + 1) * hd]);
                }
            }
        }
        gemm(&att, lw.wo.data(), &mut proj, n, d, d);
        for (xv, p) in x.iter_mut().zip(&proj) {
            *xv += p;
        }

        let mut xhat2 = vec![0.0; n * d];
        let mut inv2 = vec![0.0; n];
        let mut h2 = vec![0.0; n * d];
        layernorm_rows(&x, lw.ln2_g.data(), lw.ln2_b.data(), d, &mut h2, &mut xhat2, &mut inv2);
        let mut pre = vec![0.0; n * ff];
        gemm(&h2, lw.w1.data(), &mut pre, n, d, ff);
        add_bias(&mut pre, lw.b1.data());
        let act: Vec<f32> = pre.iter().map(|&v| gelu_scalar(v)).collect();
        gemm(&act, lw.w2.data(), &mut proj, n, ff, d);
        add_bias(&mut proj, lw.b2.data());
        for (xv, p) in x.iter_mut().zip(&proj) {
            *xv += p;
        }
        acts.push(LayerActs {
            xhat1,
            inv1,
            h1,
            qkv,
            probs: all_probs,
            att,
            xhat2,
            inv2,
            h2,
            pre,
            act,
        });
    }

    let mut xhatf = vec![0.0; n * d];
    let mut invf = vec![0.0; n];
    let mut z = vec![0.0; n * d];
    layernorm_rows(&x, w.lnf_g.data(), w.lnf_b.data(), d, &mut z, &mut xhatf, &mut invf);
    let mut logits = vec![0.0; n * vocab];
    gemm(&z, w.head.data(), &mut logits, n, d, vocab);

    // ---- loss and its gradient ----
    let mut dlogits = vec![0.0f32; n * vocab];
    let mut total = 0.0f64;
    let norm = 1.0 / scored as f32;
    let mut lsm = vec![0.0f32; vocab];
    for r in 0..n {
        if let Some(tok) = targets[r] {
            log_softmax_row(&logits[r * vocab..(r + 1) * vocab], &mut lsm);
            total -= lsm[tok] as f64;
            let dl = &mut dlogits[r * vocab..(r + 1) * vocab];
            for (g, &l) in dl.iter_mut().zip(&lsm) {
                *g = l.exp() * norm;
            }
            dl[tok] -= norm;
        }
    }

    // ---- backward ----
    gemm_tn_acc(&z, &dlogits, grads.head.data_mut(), n, d, vocab);
    let mut dz = vec![0.0; n * d];
    gemm_nt(&dlogits, w.head.data(), &mut dz, n, vocab, d);
    let mut dx = vec![0.0; n * d];
    layernorm_rows_backward(
        &xhatf,
        &invf,
        w.lnf_g.data(),
        &dz,
        d,
        &mut dx,
        grads.lnf_g.data_mut(),
        grads.lnf_b.data_mut(),
    );

    let mut dact = vec![0.0f32; n * ff];
    let mut dh = vec![0.0f32; n * d];
    let mut dln = vec![0.0f32; n * d];
    let mut datt = vec![0.0f32; n * d];
    let mut dqkv = vec![0.0f32; n * 3 * d];
    let mut dscores = vec![0.0f32; t * t];
    let mut dq = vec![0.0f32; t * hd];
    let mut dk = vec![0.0f32; t * hd];
    let mut dv = vec![0.0f32; t * hd];
    for (l, (lw, a)) in w.layers.iter().zip(&acts).enumerate().rev() {
        let g = &mut grads.layers[l];

        // Feed-forward block.
        gemm_tn_acc(&a.act, &dx, g.w2.data_mut(), n, ff, d);
        col_sum_acc(&dx, d, g.b2.data_mut());
        gemm_nt(&dx, lw.w2.data(), &mut dact, n, d, ff);
        for (da, &p) in dact.iter_mut().zip(&a.pre) {
            *da *= gelu_grad_scalar(p);
        }
        gemm_tn_acc(&a.h2, &dact, g.w1.data_mut(), n, d, ff);
        col_sum_acc(&dact, ff, g.b1.data_mut());
        gemm_nt(&dact, lw.w1.data(), &mut dh, n, ff, d);
        layernorm_rows_backward(
            &a.xhat2,
            &a.inv2,
            lw.ln2_g.data(),
            &dh,
            d,
            &mut dln,
            g.ln2_g.data_mut(),
            g.ln2_b.data_mut(),
        );
        for (v, dl) in dx.iter_mut().zip(&dln) {
            *v += dl;
        }

        // Attention block.
        gemm_tn_acc(&a.att, &dx, g.wo.data_mut(), n, d, d);
        gemm_nt(&dx, lw.wo.data(), &mut datt, n, d, d);
        dqkv.fill(0.0);
        for s in 0..b {
            let seq = &a.qkv[s * t * 3 * d..(s + 1) * t * 3 * d];
            for head in 0..nh {
                let off = head * hd;
                split_head(seq, d, off, hd, &mut qh, &mut kh, &mut vh);
                let p = &a.probs[(s * nh + head) * t * t..(s * nh + head + 1) * t * t];
                for i in 0..t {
                    let r = (s * t + i) * d + off;
                    oh[i * hd..(i + 1) * hd].copy_from_slice(&datt[r..r + hd]);
                }
                // dP = dO Vᵀ, then the softmax Jacobian row by row.
                gemm_nt(&oh, &vh, &mut dscores, t, hd, t);
                for (i, (ds, pr)) in dscores.chunks_exact_mut(t).zip(p.chunks_exact(t)).enumerate() {
                    let weighted: f32 = (0..=i).map(|j| pr[j] * ds[j]).sum();
                    for j in 0..t {
                        ds[j] = if j <= i { pr[j] * (ds[j] - weighted) * scale } else { 0.0 };
                    }
                }
                dq.fill(0.0);
                dk.fill(0.0);
                dv.fill(0.0);
                gemm(&dscores, &kh, &mut dq, t, t, hd);
                gemm_tn_acc(&dscores, &qh, &mut dk, t, t, hd);
                gemm_tn_acc(p, &oh, &mut dv, t, t, hd);
                let dseq = &mut dqkv[s * t * 3 * d..(s + 1) * t * 3 * d];
                for i in 0..t {
                    let r = i * 3 * d + off;
                    dseq[r..r + hd].copy_from_slice(&dq[i * hd..(i + 1) * hd]);
                    dseq[r + d..r + d + hd].copy_from_slice(&dk[i * hd..(i + 1) * hd]);
                    dseq[r + 2 * d..r + 2 * d + hd].copy_from_slice(&dv[i * hd..(i + 1) * hd]);
                }
            }
        }
        gemm_tn_acc(&a.h1, &dqkv, g.wqkv.data_mut(), n, d, 3 * d);
        gemm_nt(&dqkv, lw.wqkv.data(), &mut dh, n, 3 * d, d);
        layernorm_rows_backward(
            &a.xhat1,
            &a.inv1,
            lw.ln1_g.data(),
            &dh,
            d,
            &mut dln,
            g.ln1_g.data_mut(),
            g.ln1_b.data_mut(),
        );
        for (v, dl) in dx.iter_mut().zip(&dln) {
            *v += dl;
        }
    }

    for s in 0..b {
        for i in 0..t {
            let r = s * t + i;
            let tok = batch.tokens[s][i] as usize;
            let src = &dx[r * d..(r + 1) * d];
            for (o, v) in grads.tok_emb.row_mut(tok).iter_mut().zip(src) {
                *o += v;
            }
            for (o, v) in grads.pos_emb.row_mut(batch.start[s] + i).iter_mut().zip(src) {
                *o += v;
            }
        }
    }

    Ok(BaseBatchLoss {
        loss: (total / scored as f64) as f32,
        scored,
    })
}

/// Copies one head's query, key and value rows out of packed QKV rows.
fn split_head(seq: &[f32], d: usize, off: usize, hd: usize, q: &mut [f32], k: &mut [f32], v: &mut [f32]) {
    for (i, row) in seq.chunks_exact(3 * d).enumerate() {
        q[i * hd..(i + 1) * hd].copy_from_slice(&row[off..off + hd]);
        k[i * hd..(i + 1) * hd].copy_from_slice(&row[d + off..d + off + hd]);
        v[i * hd..(i + 1) * hd].copy_from_slice(&row[2 * d + off..2 * d + off + hd]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WindowBatch;
    use crate::model::{BaseModel, BaseModelConfig, Block};
    use crate::params::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> BaseModelConfig {
        BaseModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            vocab_size: 12,
            max_seq: 16,
            seed: 3,
        }
    }

    fn batch() -> WindowBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tokens: Vec<Vec<u32>> = (0..2).map(|_| (0..7).map(|_| rng.gen_range(0..12)).collect()).collect();
        let mut mask = vec![vec![true; 7]; 2];
        mask[1][5] = false;
        mask[1][6] = false;
        WindowBatch {
            tokens,
            mask,
            start: vec![0, 5],
        }
    }

    fn loss_of(cfg: &BaseModelConfig, w: &BaseWeights, b: &WindowBatch) -> f64 {
        let mut g = w.zeros_like();
        base_loss_and_grad(cfg, w, b, &mut g).unwrap().loss as f64
    }

    #[test]
    fn loss_matches_inference_forward() {
        let cfg = tiny();
        let m = BaseModel::init(cfg.clone()).unwrap();
        let b = batch();
        let outs: Vec<_> = b
            .tokens
            .iter()
            .zip(&b.start)
            .map(|(toks, &start)| {
                let mut cache = m.new_cache(1);
                let mut out = m.forward(&mut cache, &[Block::causal(toks.clone(), start)]).unwrap();
                out.remove(0)
            })
            .collect();
        let mut total = 0.0f64;
        let mut count = 0;
        let mut lsm = vec![0.0; 12];
        for (s, out) in outs.iter().enumerate() {
            for i in 0..6 {
                if b.mask[s][i + 1] {
                    log_softmax_row(out.logits.row(i), &mut lsm);
                    total -= lsm[b.tokens[s][i + 1] as usize] as f64;
                    count += 1;
                }
            }
        }
        let got = loss_of(&cfg, m.weights(), &b);
        assert!((got - total / count as f64).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny();
        let mut w = BaseWeights::init(&cfg).unwrap();
        // Non-trivial norms and biases so every path carries signal.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in w.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let b = batch();
        let mut grads = w.zeros_like();
        base_loss_and_grad(&cfg, &w, &b, &mut grads).unwrap();

        let names: Vec<String> = w.named().into_iter().map(|(n, _)| n).collect();
        let analytic: Vec<Vec<f32>> = grads.named().iter().map(|(_, t)| t.data().to_vec()).collect();
        let eps = 1e-2f32;
        for (ti, name) in names.iter().enumerate() {
            let len = analytic[ti].len();
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            // Sample up to 24 entries per tensor.
            for e in (0..len).step_by((len / 24).max(1)) {
                let orig = w.tensors_mut()[ti].data()[e];
                w.tensors_mut()[ti].data_mut()[e] = orig + eps;
                let up = loss_of(&cfg, &w, &b);
                w.tensors_mut()[ti].data_mut()[e] = orig - eps;
                let down = loss_of(&cfg, &w, &b);
                w.tensors_mut()[ti].data_mut()[e] = orig;
                let fd = (up - down) / (2.0 * eps as f64);
                num += (fd - analytic[ti][e] as f64).powi(2);
                den += fd.powi(2);
            }
            let rel = (num / den.max(1e-12)).sqrt();
            assert!(rel < 2e-2 || num.sqrt() < 1e-4, "{name}: relative error {rel}");
        }
    }
}
