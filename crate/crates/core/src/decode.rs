//! Greedy decoding, plain or speculative.
//!
//! Each sequence keeps its committed tokens in the KV cache except the most
//! recent one (the root). A speculative step feeds the root plus the pruned,
//! flattened candidate tree as one masked block, checks every candidate
//! against the base model's own argmax, and keeps the longest match. The
//! accepted tokens are always base-model argmaxes, so the output equals
//! plain greedy decoding.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::{greedy_next, BaseModel, Block, BlockOutput, KvCache};
use crate::speculator::Speculator;
use crate::tree::{prune_to_topk, CandidateTree, PrunedCandidateSet};

/// Anything that proposes a candidate tree from the base state at the last
/// consumed position and the committed tokens so far.
pub trait Drafter {
    /// Depth of a full tree.
    fn depth(&self) -> usize;
    fn draft(&self, state: &[f32], context: &[TokenId]) -> Result<CandidateTree>;
}

impl Drafter for Speculator {
    fn depth(&self) -> usize {
        self.config().n_stages
    }

    fn draft(&self, state: &[f32], context: &[TokenId]) -> Result<CandidateTree> {
        let last = *context
            .last()
            .ok_or_else(|| Error::Data("cannot draft from an empty context".into()))?;
        self.speculate_tree(state, last)
    }
}

/// Outcome of one verification step for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// Newly committed tokens, `acceptance + 1` of them.
    pub accepted: Vec<TokenId>,
    /// Index of the kept candidate, if any were verified.
    pub winner: Option<usize>,
    /// Matched speculated tokens per candidate.
    pub per_candidate: Vec<usize>,
    /// Base state at the position that produced the last accepted token.
    pub next_state: Vec<f32>,
    /// Positions fed to the base model in this step.
    pub block_len: usize,
}

impl StepResult {
    pub fn acceptance(&self) -> usize {
        self.accepted.len() - 1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    /// Generated tokens over all sequences.
    pub total_tokens: usize,
    /// Base forward passes, counted per sequence; prefill counts as one.
    pub total_steps: usize,
    /// Drafter invocations.
    pub drafts: usize,
    /// Positions fed to the base model after prefill.
    pub verified_positions: usize,
    /// Tree nodes saved by sharing candidate prefixes.
    pub dedup_saved: usize,
    pub wall_ms: f64,
    /// Part of `wall_ms` spent in prefill.
    pub prefill_ms: f64,
    /// Tokens per step.
    pub tau: f64,
    /// Iterative latency: wall time after prefill over the tokens generated
    /// per sequence after the first.
    pub ms_per_token: f64,
}

impl DecodeStats {
    fn finish(&mut self, wall_ms: f64, per_sequence_tokens: usize) {
        self.wall_ms = wall_ms;
        self.tau = if self.total_steps == 0 {
            0.0
        } else {
            self.total_tokens as f64 / self.total_steps as f64
        };
        self.ms_per_token = if per_sequence_tokens < 2 {
            0.0
        } else {
            (wall_ms - self.prefill_ms) / (per_sequence_tokens - 1) as f64
        };
    }
}

/// Verification job for one sequence: the pending root token and an
/// optional pruned candidate set.
pub struct VerifyJob<'a> {
    pub seq: usize,
    pub root: TokenId,
    pub candidates: Option<&'a PrunedCandidateSet>,
}

/// Scores every job's block in one batched forward and commits the winning
/// path of each into the cache. Sequences without a job are left untouched.
pub fn verify_batch(model: &BaseModel, cache: &mut KvCache, jobs: &[VerifyJob]) -> Result<Vec<StepResult>> {
    let mut blocks = vec![Block::empty(); cache.batch()];
    let mut bases = vec![0; jobs.len()];
    for (j, job) in jobs.iter().enumerate() {
        if job.seq >= cache.batch() {
            return Err(Error::Range(format!("sequence {} outside batch", job.seq)));
        }
        let base = cache.filled_len(job.seq);
        bases[j] = base;
        blocks[job.seq] = match job.candidates {
            Some(c) => c.block(job.root, base),
            None => Block::causal(vec![job.root], base),
        };
    }
    let outs = model.forward(cache, &blocks)?;
    let mut results = Vec::with_capacity(jobs.len());
    for (j, job) in jobs.iter().enumerate() {
        let out = &outs[job.seq];
        let r = accept(out, job.candidates);
        let keep: Vec<usize> = std::iter::once(0)
            .chain(r.kept_nodes.iter().map(|&f| f + 1))
            .collect();
        cache.commit_block(job.seq, bases[j], &keep)?;
        results.push(r.step);
    }
    Ok(results)
}

struct Accepted {
    step: StepResult,
    kept_nodes: Vec<usize>,
}

fn accept(out: &BlockOutput, candidates: Option<&PrunedCandidateSet>) -> Accepted {
    let greedy_at = |row: usize| greedy_next(out.logits.row(row));
    let root_next = greedy_at(0);
    let Some(set) = candidates else {
        return Accepted {
            step: StepResult {
                accepted: vec![root_next],
                winner: None,
                per_candidate: Vec::new(),
                next_state: out.states.row(0).to_vec(),
                block_len: 1,
            },
            kept_nodes: Vec::new(),
        };
    };
    let mut per_candidate = Vec::with_capacity(set.candidates.len());
    for c in &set.candidates {
        let mut expected = root_next;
        let mut a = 0;
        for (&tok, &f) in c.tokens.iter().zip(&c.flat_path) {
            if tok != expected {
                break;
            }
            a += 1;
            expected = greedy_at(f + 1);
        }
        per_candidate.push(a);
    }
    // Longest match; the first (highest-ranked) candidate wins ties.
    let mut winner = 0;
    for (i, &a) in per_candidate.iter().enumerate() {
        if a > per_candidate[winner] {
            winner = i;
        }
    }
    let a = per_candidate[winner];
    let kept_nodes = set.candidates[winner].flat_path[..a].to_vec();
    let mut accepted = vec![root_next];
    accepted.extend(kept_nodes.iter().map(|&f| greedy_at(f + 1)));
    let last_row = kept_nodes.last().map_or(0, |&f| f + 1);
    Accepted {
        step: StepResult {
            accepted,
            winner: Some(winner),
            per_candidate,
            next_state: out.states.row(last_row).to_vec(),
            block_len: set.block_len(),
        },
        kept_nodes,
    }
}

/// Single-sequence convenience over [`verify_batch`].
pub fn verify_and_accept(
    model: &BaseModel,
    cache: &mut KvCache,
    root: TokenId,
    candidates: Option<&PrunedCandidateSet>,
) -> Result<StepResult> {
    let mut r = verify_batch(model, cache, &[VerifyJob { seq: 0, root, candidates }])?;
    Ok(r.remove(0))
}

fn check_prompts(model: &BaseModel, prompts: &[Vec<TokenId>], max_new: usize) -> Result<()> {
    if prompts.is_empty() {
        return Err(Error::Data("no prompts".into()));
    }
    if max_new == 0 {
        return Err(Error::Range("max_new must be at least 1".into()));
    }
    let max_seq = model.config().max_seq;
    for p in prompts {
        if p.is_empty() {
            return Err(Error::Data("empty prompt".into()));
        }
        if p.len() + max_new > max_seq {
            return Err(Error::Capacity {
                needed: p.len() + max_new,
                max_seq,
            });
        }
    }
    Ok(())
}

/// Prefill: consumes every prompt and yields each sequence's first token and
/// the state that produced it.
fn prefill(
    model: &BaseModel,
    prompts: &[Vec<TokenId>],
    stats: &mut DecodeStats,
) -> Result<(KvCache, Vec<Vec<TokenId>>, Vec<Vec<f32>>)> {
    let start = Instant::now();
    let mut cache = model.new_cache(prompts.len());
    let blocks: Vec<Block> = prompts.iter().map(|p| Block::causal(p.clone(), 0)).collect();
    let outs = model.forward(&mut cache, &blocks)?;
    let mut generated = Vec::with_capacity(prompts.len());
    let mut states = Vec::with_capacity(prompts.len());
    for out in &outs {
        let last = out.logits.rows() - 1;
        generated.push(vec![greedy_next(out.logits.row(last))]);
        states.push(out.states.row(last).to_vec());
    }
    stats.total_steps += prompts.len();
    stats.total_tokens += prompts.len();
    stats.prefill_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((cache, generated, states))
}

/// Plain greedy decoding, one base pass per token. Returns the generated
/// tokens (prompt excluded) of every sequence.
pub fn greedy_generate(
    model: &BaseModel,
    prompts: &[Vec<TokenId>],
    max_new: usize,
) -> Result<(Vec<Vec<TokenId>>, DecodeStats)> {
    check_prompts(model, prompts, max_new)?;
    let start = Instant::now();
    let mut stats = DecodeStats::default();
    let (mut cache, mut generated, _) = prefill(model, prompts, &mut stats)?;
    for _ in 1..max_new {
        let jobs: Vec<VerifyJob> = generated
            .iter()
            .enumerate()
            .map(|(seq, g)| VerifyJob {
                seq,
                root: *g.last().unwrap(),
                candidates: None,
            })
            .collect();
        let results = verify_batch(model, &mut cache, &jobs)?;
        for (g, r) in generated.iter_mut().zip(results) {
            g.extend(r.accepted);
            stats.total_steps += 1;
            stats.total_tokens += 1;
            stats.verified_positions += 1;
        }
    }
    stats.finish(start.elapsed().as_secs_f64() * 1e3, max_new);
    Ok((generated, stats))
}

/// Speculative greedy decoding over a batch of prompts, verifying the top
/// `k` candidates per sequence per step. `k = 0` runs [`greedy_generate`]
/// and never calls the drafter.
pub fn batched_speculative_generate<D: Drafter + ?Sized>(
    model: &BaseModel,
    drafter: &D,
    prompts: &[Vec<TokenId>],
    max_new: usize,
    k: usize,
) -> Result<(Vec<Vec<TokenId>>, DecodeStats)> {
    if k == 0 {
        return greedy_generate(model, prompts, max_new);
    }
    check_prompts(model, prompts, max_new)?;
    let start = Instant::now();
    let max_seq = model.config().max_seq;
    let mut stats = DecodeStats::default();
    let (mut cache, mut generated, mut states) = prefill(model, prompts, &mut stats)?;
    loop {
        let mut pruned: Vec<(usize, Option<PrunedCandidateSet>)> = Vec::new();
        for (seq, g) in generated.iter().enumerate() {
            let remaining = max_new - g.len();
            if remaining == 0 {
                continue;
            }
            // Never speculate past the token budget.
            let depth = drafter.depth().min(remaining - 1);
            if depth == 0 {
                pruned.push((seq, None));
                continue;
            }
            let mut context = prompts[seq].clone();
            context.extend_from_slice(g);
            let mut tree = drafter.draft(&states[seq], &context)?;
            stats.drafts += 1;
            if tree.depth() > depth {
                tree = tree.truncated(depth);
            }
            let leaves = tree.leaves().len();
            if leaves == 0 {
                pruned.push((seq, None));
                continue;
            }
            let free = max_seq - cache.filled_len(seq);
            let mut kk = k.min(leaves);
            let mut set = prune_to_topk(&tree, kk)?;
            // Pruning is nested, so shrinking k always ends at a block that fits.
            while set.block_len() > free && kk > 1 {
                kk -= 1;
                set = prune_to_topk(&tree, kk)?;
            }
            stats.dedup_saved += set.dedup_savings();
            pruned.push((seq, Some(set)));
        }
        if pruned.is_empty() {
            break;
        }
        let jobs: Vec<VerifyJob> = pruned
            .iter()
            .map(|(seq, set)| VerifyJob {
                seq: *seq,
                root: *generated[*seq].last().unwrap(),
                candidates: set.as_ref(),
            })
            .collect();
        let results = verify_batch(model, &mut cache, &jobs)?;
        for ((seq, _), r) in pruned.iter().zip(results) {
            stats.total_steps += 1;
            stats.total_tokens += r.accepted.len();
            stats.verified_positions += r.block_len;
            generated[*seq].extend_from_slice(&r.accepted);
            states[*seq] = r.next_state;
        }
    }
    stats.finish(start.elapsed().as_secs_f64() * 1e3, max_new);
    Ok((generated, stats))
}

/// Single-sequence speculative decoding.
pub fn speculative_generate<D: Drafter + ?Sized>(
    model: &BaseModel,
    drafter: &D,
    prompt: &[TokenId],
    max_new: usize,
    k: usize,
) -> Result<(Vec<TokenId>, DecodeStats)> {
    let (mut out, stats) = batched_speculative_generate(model, drafter, &[prompt.to_vec()], max_new, k)?;
    Ok((out.remove(0), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BaseModelConfig;
    use crate::speculator::SpeculatorConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> BaseModel {
        BaseModel::init(BaseModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 40,
            max_seq: 128,
            seed: 1,
        })
        .unwrap()
    }

    fn spec(m: &BaseModel, branching: Vec<usize>) -> Speculator {
        Speculator::init(SpeculatorConfig {
            n_stages: branching.len(),
            d_state: 32,
            d_base: m.config().d_model,
            vocab_size: 40,
            branching,
            state_weight: 0.5,
            seed: 2,
        })
        .unwrap()
    }

    /// Reference: recompute the whole sequence from scratch for every token.
    fn naive_greedy(m: &BaseModel, prompt: &[TokenId], n: usize) -> Vec<TokenId> {
        let mut seq = prompt.to_vec();
        for _ in 0..n {
            let out = m.forward_full(&[seq.clone()]).unwrap();
            let last = out[0].logits.rows() - 1;
            seq.push(greedy_next(out[0].logits.row(last)));
        }
        seq[prompt.len()..].to_vec()
    }

    /// Proposes the true greedy continuation for the first `good` tokens and
    /// garbage afterwards, as a single chain.
    struct Scripted<'a> {
        model: &'a BaseModel,
        depth: usize,
        good: usize,
    }

    impl Drafter for Scripted<'_> {
        fn depth(&self) -> usize {
            self.depth
        }

        fn draft(&self, _state: &[f32], context: &[TokenId]) -> Result<CandidateTree> {
            let truth = naive_greedy(self.model, context, self.depth + 1);
            let mut tree = CandidateTree::new();
            let mut parent = None;
            for d in 0..self.depth {
                // truth[0] is what the base emits for the root; drafts start after it.
                let tok = if d < self.good { truth[d] } else { (truth[d] + 1) % 40 };
                parent = Some(tree.push(parent, tok, -0.1)?);
            }
            Ok(tree)
        }
    }

    #[test]
    fn incremental_greedy_matches_naive() {
        let m = model();
        let prompt = vec![0, 5, 6, 7];
        let (out, stats) = greedy_generate(&m, &[prompt.clone()], 12).unwrap();
        assert_eq!(out[0], naive_greedy(&m, &prompt, 12));
        assert_eq!(stats.tau, 1.0);
        assert_eq!(stats.drafts, 0);
    }

    #[test]
    fn speculative_is_lossless() {
        let m = model();
        let s = spec(&m, vec![4, 3, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let len = rng.gen_range(1..10);
            let prompt: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..40)).collect();
            let want = naive_greedy(&m, &prompt, 20);
            for k in [1, 2, 5, 24] {
                let (got, stats) = speculative_generate(&m, &s, &prompt, 20, k).unwrap();
                assert_eq!(got, want, "k = {k}");
                assert_eq!(stats.total_tokens, 20);
            }
        }
    }

    #[test]
    fn perfect_drafts_accept_everything() {
        let m = model();
        let d = Scripted { model: &m, depth: 3, good: 3 };
        let prompt = vec![0, 9, 10];
        let (out, stats) = speculative_generate(&m, &d, &prompt, 17, 1).unwrap();
        assert_eq!(out, naive_greedy(&m, &prompt, 17));
        // Prefill gives 1 token, then 4 steps of 4.
        assert_eq!(stats.total_steps, 5);
        assert_eq!(stats.tau, 17.0 / 5.0);
    }

    #[test]
    fn wrong_drafts_accept_one_per_step() {
        let m = model();
        let d = Scripted { model: &m, depth: 3, good: 0 };
        let prompt = vec![0, 9, 10];
        let (out, stats) = speculative_generate(&m, &d, &prompt, 10, 1).unwrap();
        assert_eq!(out, naive_greedy(&m, &prompt, 10));
        assert_eq!(stats.total_steps, 10);
        assert_eq!(stats.tau, 1.0);
    }

    #[test]
    fn partial_drafts_accept_prefix() {
        let m = model();
        let prompt = vec![0, 3];
        let mut cache = m.new_cache(1);
        let out = m.forward(&mut cache, &[Block::causal(prompt.clone(), 0)]).unwrap();
        let root = greedy_next(out[0].logits.row(1));
        let mut context = prompt.clone();
        context.push(root);
        let d = Scripted { model: &m, depth: 3, good: 2 };
        let tree = d.draft(&[], &context).unwrap();
        let set = prune_to_topk(&tree, 1).unwrap();
        let r = verify_and_accept(&m, &mut cache, root, Some(&set)).unwrap();
        assert_eq!(r.acceptance(), 2);
        assert_eq!(r.accepted, naive_greedy(&m, &context, 3));
        assert_eq!(cache.filled_len(0), prompt.len() + 3);
    }

    #[test]
    fn per_candidate_acceptance_matches_brute_force() {
        let m = model();
        let s = spec(&m, vec![5, 3, 2]);
        let prompt = vec![0, 11, 12, 13];
        let mut cache = m.new_cache(1);
        let out = m.forward(&mut cache, &[Block::causal(prompt.clone(), 0)]).unwrap();
        let root = greedy_next(out[0].logits.row(3));
        let tree = s.speculate_tree(out[0].states.row(3), root).unwrap();
        let set = prune_to_topk(&tree, 30).unwrap();
        let r = verify_and_accept(&m, &mut cache, root, Some(&set)).unwrap();
        let mut context = prompt.clone();
        context.push(root);
        for (c, &a) in set.candidates.iter().zip(&r.per_candidate) {
            // Oracle: re-run the base on context + candidate prefix, one
            // token at a time, from scratch.
            let mut seq = context.clone();
            let mut want = 0;
            for &tok in &c.tokens {
                let o = m.forward_full(&[seq.clone()]).unwrap();
                if greedy_next(o[0].logits.row(seq.len() - 1)) != tok {
                    break;
                }
                want += 1;
                seq.push(tok);
            }
            assert_eq!(a, want);
        }
        let best = *r.per_candidate.iter().max().unwrap();
        assert_eq!(r.acceptance(), best);
        assert_eq!(r.per_candidate.iter().position(|&a| a == best), r.winner);
    }

    #[test]
    fn block_size_accounting() {
        let m = BaseModel::init(BaseModelConfig {
            max_seq: 512,
            ..model().config().clone()
        })
        .unwrap();
        let s = spec(&m, vec![6, 3, 2]);
        let prompts: Vec<Vec<TokenId>> = (0..4).map(|i| vec![0, i + 2, i + 3]).collect();
        let mut cache = m.new_cache(4);
        let blocks: Vec<Block> = prompts.iter().map(|p| Block::causal(p.clone(), 0)).collect();
        let out = m.forward(&mut cache, &blocks).unwrap();
        let mut sets = Vec::new();
        let mut roots = Vec::new();
        for o in &out {
            let root = greedy_next(o.logits.row(2));
            let tree = s.speculate_tree(o.states.row(2), root).unwrap();
            sets.push(prune_to_topk(&tree, 32).unwrap());
            roots.push(root);
        }
        // Without prefix sharing every candidate would occupy 3 positions.
        let undeduped: usize = sets.iter().map(|s| s.k * s.depth() + 1).sum();
        assert_eq!(undeduped, 4 * (32 * 3 + 1));
        let jobs: Vec<VerifyJob> = sets
            .iter()
            .enumerate()
            .map(|(i, s)| VerifyJob { seq: i, root: roots[i], candidates: Some(s) })
            .collect();
        let results = verify_batch(&m, &mut cache, &jobs).unwrap();
        let fed: usize = results.iter().map(|r| r.block_len).sum();
        let saved: usize = sets.iter().map(|s| s.dedup_savings()).sum();
        assert_eq!(fed + saved, 388);
    }

    #[test]
    fn capacity_is_checked() {
        let m = model();
        let s = spec(&m, vec![2, 2]);
        let prompt = vec![0; 120];
        assert!(matches!(
            speculative_generate(&m, &s, &prompt, 9, 2),
            Err(Error::Capacity { .. })
        ));
        // Exactly at capacity still works; trees shrink to fit.
        let (out, _) = speculative_generate(&m, &s, &prompt, 8, 4).unwrap();
        assert_eq!(out, naive_greedy(&m, &prompt, 8));
    }

    #[test]
    fn k_zero_never_drafts() {
        struct Panics;
        impl Drafter for Panics {
            fn depth(&self) -> usize {
                3
            }
            fn draft(&self, _: &[f32], _: &[TokenId]) -> Result<CandidateTree> {
                panic!("drafter called with k = 0")
            }
        }
        let m = model();
        let (out, stats) = speculative_generate(&m, &Panics, &[0, 1], 5, 0).unwrap();
        assert_eq!(out, naive_greedy(&m, &[0, 1], 5));
        assert_eq!(stats.drafts, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn batched_matches_per_sequence(
            prompts in proptest::collection::vec(proptest::collection::vec(0u32..40, 1..8), 1..4),
            k in 0usize..6,
        ) {
            let m = model();
            let s = spec(&m, vec![3, 2, 2]);
            let (batched, bstats) = batched_speculative_generate(&m, &s, &prompts, 9, k).unwrap();
            for (p, out) in prompts.iter().zip(&batched) {
                prop_assert_eq!(out, &naive_greedy(&m, p, 9));
            }
            prop_assert_eq!(bstats.total_tokens, 9 * prompts.len());
            prop_assert!(bstats.tau >= 1.0 && bstats.tau <= 4.0);
        }
    }
}
