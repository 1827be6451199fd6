//! Latency grid over batch size, prompt length and candidate count, in the
//! layout of a rows-by-`b`, columns-by-`k` latency table with a tokens-per-step
//! footer.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentStream, TokenId};
use crate::decode::{batched_speculative_generate, greedy_generate, DecodeStats, Drafter};
use crate::error::{Error, Result};
use crate::model::BaseModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub prompt_lens: Vec<usize>,
    /// Candidate counts; must include 0, the plain greedy baseline.
    pub ks: Vec<usize>,
    pub trials: usize,
    pub gen_tokens: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_sizes: vec![1, 2, 4],
            prompt_lens: vec![64, 256],
            ks: vec![0, 1, 2, 4, 8, 16, 32],
            trials: 4,
            gen_tokens: 100,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.ks.contains(&0) {
            return Err(Error::Config("bench ks must include 0 for the baseline column".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("bench trials must be at least 1".into()));
        }
        if self.gen_tokens == 0 {
            return Err(Error::Config("bench gen_tokens must be at least 1".into()));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::Config("bench batch_sizes must be non-empty and positive".into()));
        }
        if self.prompt_lens.is_empty() || self.prompt_lens.contains(&0) {
            return Err(Error::Config("bench prompt_lens must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.batch_sizes.len() * self.prompt_lens.len() * self.ks.len()
    }
}

/// One timed trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub ms_per_token: f64,
    pub wall_ms: f64,
    pub prefill_ms: f64,
    /// Tokens generated per sequence.
    pub gen_tokens: usize,
    /// Tokens over all sequences of the batch.
    pub total_tokens: usize,
    /// Base forward passes over all sequences of the batch.
    pub total_steps: usize,
    pub drafts: usize,
    pub verified_positions: usize,
    pub dedup_saved: usize,
}

impl TrialLog {
    fn from_stats(s: &DecodeStats, gen_tokens: usize) -> Self {
        Self {
            ms_per_token: s.ms_per_token,
            wall_ms: s.wall_ms,
            prefill_ms: s.prefill_ms,
            gen_tokens,
            total_tokens: s.total_tokens,
            total_steps: s.total_steps,
            drafts: s.drafts,
            verified_positions: s.verified_positions,
            dedup_saved: s.dedup_saved,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub b: usize,
    pub p: usize,
    pub k: usize,
    pub ms_per_token_mean: f64,
    pub ms_per_token_std: f64,
    pub tau: f64,
    pub trials: Vec<TrialLog>,
}

impl BenchCell {
    fn from_trials(b: usize, p: usize, k: usize, trials: Vec<TrialLog>) -> Self {
        let n = trials.len() as f64;
        let mean = trials.iter().map(|t| t.ms_per_token).sum::<f64>() / n;
        let var = trials.iter().map(|t| (t.ms_per_token - mean).powi(2)).sum::<f64>() / n;
        let mut cell = Self {
            b,
            p,
            k,
            ms_per_token_mean: mean,
            ms_per_token_std: var.sqrt(),
            tau: 0.0,
            trials,
        };
        cell.tau = cell.tau_from_logs();
        cell
    }

    /// Total tokens over total steps across the per-trial logs.
    pub fn tau_from_logs(&self) -> f64 {
        let tokens: usize = self.trials.iter().map(|t| t.total_tokens).sum();
        let steps: usize = self.trials.iter().map(|t| t.total_steps).sum();
        if steps == 0 {
            0.0
        } else {
            tokens as f64 / steps as f64
        }
    }

    /// Tokens generated per sequence summed over trials.
    pub fn timed_tokens(&self) -> usize {
        self.trials.iter().map(|t| t.gen_tokens).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchMetadata {
    pub base_hash: String,
    pub speculator_hash: Option<String>,
    pub hardware: String,
    pub threads: usize,
}

impl BenchMetadata {
    /// Hashes of the serialized checkpoints plus a short host description.
    pub fn describe(model: &BaseModel, speculator: Option<&crate::speculator::Speculator>) -> Result<Self> {
        Ok(Self {
            base_hash: model.to_container()?.hash()?,
            speculator_hash: speculator.map(|s| s.to_container()?.hash()).transpose()?,
            hardware: hardware_note(),
            threads: crate::tensor::max_threads(),
        })
    }
}

fn hardware_note() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}; {cores} cores; {}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchGrid {
    pub config: BenchConfig,
    pub metadata: BenchMetadata,
    /// Ordered by `p`, then `b`, then `k`, each as listed in the config.
    pub cells: Vec<BenchCell>,
}

impl BenchGrid {
    pub fn cell(&self, b: usize, p: usize, k: usize) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.b == b && c.p == p && c.k == k)
    }

    /// The `k` with the lowest mean latency in row `(b, p)`; ties go to the
    /// smaller `k`.
    pub fn optimal_k(&self, b: usize, p: usize) -> Option<usize> {
        self.cells
            .iter()
            .filter(|c| c.b == b && c.p == p)
            .min_by(|x, y| {
                x.ms_per_token_mean
                    .total_cmp(&y.ms_per_token_mean)
                    .then(x.k.cmp(&y.k))
            })
            .map(|c| c.k)
    }

    /// Tokens per step pooled over every batch size for `(p, k)`.
    pub fn pooled_tau(&self, p: usize, k: usize) -> f64 {
        let (tokens, steps) = self
            .cells
            .iter()
            .filter(|c| c.p == p && c.k == k)
            .flat_map(|c| &c.trials)
            .fold((0, 0), |(a, b), t| (a + t.total_tokens, b + t.total_steps));
        if steps == 0 {
            0.0
        } else {
            tokens as f64 / steps as f64
        }
    }
}

/// `count` prompts of `len` tokens, cut from random offsets of `source`.
/// Depends only on the arguments, so every `k` sees the same prompts.
pub fn sample_prompts(source: &[TokenId], len: usize, count: usize, seed: u64, salt: u64) -> Result<Vec<Vec<TokenId>>> {
    if source.len() < len {
        return Err(Error::Data(format!(
            "held-out corpus has {} tokens, prompts need {len}",
            source.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    Ok((0..count)
        .map(|_| {
            let start = rng.gen_range(0..=source.len() - len);
            source[start..start + len].to_vec()
        })
        .collect())
}

/// Runs every `(b, p, k)` cell sequentially. Each cell gets one untimed
/// warmup trial, then `trials` timed decodes of exactly `gen_tokens` tokens
/// per sequence. `k = 0` cells use the plain greedy loop and never touch the
/// drafter.
pub fn run_bench(
    config: &BenchConfig,
    model: &BaseModel,
    drafter: Option<&dyn Drafter>,
    heldout: &DocumentStream,
    metadata: BenchMetadata,
    mut progress: impl FnMut(&BenchCell),
) -> Result<BenchGrid> {
    config.validate()?;
    if drafter.is_none() && config.ks.iter().any(|&k| k > 0) {
        return Err(Error::Checkpoint("a speculator is required for k > 0".into()));
    }
    let source = heldout.tokens();
    let mut cells = Vec::with_capacity(config.cell_count());
    for &p in &config.prompt_lens {
        for &b in &config.batch_sizes {
            // Trial `trials` is the warmup.
            let prompt_sets: Vec<Vec<Vec<TokenId>>> = (0..=config.trials)
                .map(|t| sample_prompts(&source, p, b, config.seed, ((p as u64) << 32) ^ ((b as u64) << 16) ^ t as u64))
                .collect::<Result<_>>()?;
            for &k in &config.ks {
                let run = |prompts: &[Vec<TokenId>]| -> Result<DecodeStats> {
                    let stats = match (k, drafter) {
                        (0, _) => greedy_generate(model, prompts, config.gen_tokens)?.1,
                        (_, Some(d)) => batched_speculative_generate(model, d, prompts, config.gen_tokens, k)?.1,
                        (_, None) => unreachable!("checked above"),
                    };
                    Ok(stats)
                };
                run(&prompt_sets[config.trials])?;
                let trials = prompt_sets[..config.trials]
                    .iter()
                    .map(|ps| run(ps).map(|s| TrialLog::from_stats(&s, config.gen_tokens)))
                    .collect::<Result<Vec<_>>>()?;
                let cell = BenchCell::from_trials(b, p, k, trials);
                progress(&cell);
                cells.push(cell);
            }
        }
    }
    Ok(BenchGrid {
        config: config.clone(),
        metadata,
        cells,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridFormat {
    Csv,
    Json,
    Text,
}

impl std::str::FromStr for GridFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "text" => Ok(Self::Text),
            other => Err(Error::Config(format!("unknown grid format {other:?}; expected csv, json or text"))),
        }
    }
}

pub fn emit_grid(grid: &BenchGrid, format: GridFormat) -> Result<String> {
    match format {
        GridFormat::Csv => Ok(grid_csv(grid)),
        GridFormat::Json => {
            let mut s = serde_json::to_string_pretty(grid)?;
            s.push('\n');
            Ok(s)
        }
        GridFormat::Text => Ok(grid_text(grid)),
    }
}

pub fn parse_grid_json(text: &str) -> Result<BenchGrid> {
    Ok(serde_json::from_str(text)?)
}

fn grid_csv(grid: &BenchGrid) -> String {
    let mut out = String::from("b,p,k,trials,gen_tokens,ms_per_token_mean,ms_per_token_std,tau\n");
    for c in &grid.cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.4},{:.4},{:.4}",
            c.b,
            c.p,
            c.k,
            c.trials.len(),
            grid.config.gen_tokens,
            c.ms_per_token_mean,
            c.ms_per_token_std,
            c.tau
        );
    }
    out
}

/// One block per prompt length: latency rows per batch size, one column per
/// `k`, and a tau footer pooled over batch sizes.
fn grid_text(grid: &BenchGrid) -> String {
    let ks = &grid.config.ks;
    let mut out = String::new();
    for (i, &p) in grid.config.prompt_lens.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "ms/token, p = {p}");
        let _ = write!(out, "{:>6}", "b \\ k");
        for k in ks {
            let _ = write!(out, "{k:>9}");
        }
        out.push('\n');
        for &b in &grid.config.batch_sizes {
            let _ = write!(out, "{b:>6}");
            for &k in ks {
                match grid.cell(b, p, k) {
                    Some(c) => {
                        let _ = write!(out, "{:>9.3}", c.ms_per_token_mean);
                    }
                    None => {
                        let _ = write!(out, "{:>9}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "{:>6}", "tau");
        for &k in ks {
            let _ = write!(out, "{:>9.2}", grid.pooled_tau(p, k));
        }
        out.push('\n');
    }
    out
}
