use crate::error::{Error, Result};

/// Per-sequence key/value storage for every layer, preallocated to
/// `max_seq` slots. Keys are kept transposed per head (`[head][dim][slot]`)
/// and values per head (`[head][slot][dim]`), so attention over the cache is
/// two small matrix products. Rollback truncates; [`KvCache::commit_block`]
/// compacts a verified block.
#[derive(Clone, Debug)]
pub struct KvCache {
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    max_seq: usize,
    seqs: Vec<SeqCache>,
}

#[derive(Clone, Debug)]
struct SeqCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub(crate) fn new(n_layers: usize, n_heads: usize, head_dim: usize, max_seq: usize, batch: usize) -> Self {
        let per_layer = n_heads * head_dim * max_seq;
        let seqs = (0..batch)
            .map(|_| SeqCache {
                keys: vec![vec![0.0; per_layer]; n_layers],
                values: vec![vec![0.0; per_layer]; n_layers],
                len: 0,
            })
            .collect();
        Self {
            n_layers,
            n_heads,
            head_dim,
            max_seq,
            seqs,
        }
    }

    pub fn batch(&self) -> usize {
        self.seqs.len()
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    /// `(n_layers, n_heads, head_dim, max_seq)`.
    pub(crate) fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n_layers, self.n_heads, self.head_dim, self.max_seq)
    }

    /// Number of filled positions of sequence `seq`.
    pub fn filled_len(&self, seq: usize) -> usize {
        self.seqs[seq].len
    }

    /// Drops every slot at or after `to_len`.
    pub fn rollback(&mut self, seq: usize, to_len: usize) -> Result<()> {
        let s = &mut self.seqs[seq];
        if to_len > s.len {
            return Err(Error::Range(format!(
                "cannot roll back to {to_len}: only {} positions filled",
                s.len
            )));
        }
        s.len = to_len;
        Ok(())
    }

    /// Keeps only the block slots listed in `keep` (block-relative, strictly
    /// increasing), moving them to sit contiguously after `base`.
    pub fn commit_block(&mut self, seq: usize, base: usize, keep: &[usize]) -> Result<()> {
        let (nh, hd, cap) = (self.n_heads, self.head_dim, self.max_seq);
        let s = &mut self.seqs[seq];
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Range("kept slots must be strictly increasing".into()));
        }
        if keep.last().is_some_and(|&k| base + k >= s.len) {
            return Err(Error::Range("kept slot beyond filled length".into()));
        }
        for l in 0..self.n_layers {
            for (dst, &src) in keep.iter().enumerate() {
                let (from, to) = (base + src, base + dst);
                if from == to {
                    continue;
                }
                for h in 0..nh {
                    let kt = &mut s.keys[l][h * hd * cap..(h + 1) * hd * cap];
                    for e in 0..hd {
                        kt[e * cap + to] = kt[e * cap + from];
                    }
                    let v = &mut s.values[l][h * cap * hd..(h + 1) * cap * hd];
                    v.copy_within(from * hd..(from + 1) * hd, to * hd);
                }
            }
        }
        s.len = base + keep.len();
        Ok(())
    }

    /// Stores the key and value rows (all heads side by side) of `slot`.
    pub(crate) fn write(&mut self, seq: usize, layer: usize, slot: usize, k: &[f32], v: &[f32]) {
        let (hd, cap) = (self.head_dim, self.max_seq);
        let s = &mut self.seqs[seq];
        for (h, (kh, vh)) in k.chunks_exact(hd).zip(v.chunks_exact(hd)).enumerate() {
            let kt = &mut s.keys[layer][h * hd * cap..(h + 1) * hd * cap];
            for (e, &x) in kh.iter().enumerate() {
                kt[e * cap + slot] = x;
            }
            s.values[layer][(h * cap + slot) * hd..(h * cap + slot + 1) * hd].copy_from_slice(vh);
        }
    }

    /// Transposed keys of one head: `head_dim` rows of `max_seq` slots.
    pub(crate) fn keys_t(&self, seq: usize, layer: usize, head: usize) -> &[f32] {
        let n = self.head_dim * self.max_seq;
        &self.seqs[seq].keys[layer][head * n..(head + 1) * n]
    }

    /// Values of one head: `max_seq` rows of `head_dim`.
    pub(crate) fn values(&self, seq: usize, layer: usize, head: usize) -> &[f32] {
        let n = self.head_dim * self.max_seq;
        &self.seqs[seq].values[layer][head * n..(head + 1) * n]
    }

    pub(crate) fn set_len(&mut self, seq: usize, len: usize) {
        self.seqs[seq].len = len;
    }
}

/// New tokens for one sequence, with explicit position ids and a mask over
/// the new tokens. Every new token sees the whole cache; `mask[i][j]` says
/// whether new token `i` may also see new token `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub mask: Vec<Vec<bool>>,
}

impl Block {
    /// Ordinary causal block starting at position `start`.
    pub fn causal(tokens: Vec<u32>, start: usize) -> Self {
        let t = tokens.len();
        Self {
            positions: (start..start + t).collect(),
            mask: (0..t).map(|i| (0..t).map(|j| j <= i).collect()).collect(),
            tokens,
        }
    }

    pub fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            positions: Vec::new(),
            mask: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub(crate) fn validate(&self, max_seq: usize, vocab: usize) -> Result<()> {
        let t = self.tokens.len();
        if self.positions.len() != t || self.mask.len() != t {
            return Err(Error::Mask(format!(
                "block of {t} tokens has {} positions and {} mask rows",
                self.positions.len(),
                self.mask.len()
            )));
        }
        for (i, row) in self.mask.iter().enumerate() {
            if row.len() != t {
                return Err(Error::Mask(format!("mask row {i} has {} entries, want {t}", row.len())));
            }
            if !row[i] {
                return Err(Error::Mask(format!("token {i} cannot see itself")));
            }
            if let Some(j) = (i + 1..t).find(|&j| row[j]) {
                return Err(Error::Mask(format!("token {i} attends to later token {j}")));
            }
        }
        if let Some(&p) = self.positions.iter().find(|&&p| p >= max_seq) {
            return Err(Error::Capacity { needed: p + 1, max_seq });
        }
        if let Some(&tok) = self.tokens.iter().find(|&&tok| tok as usize >= vocab) {
            return Err(Error::Range(format!("token {tok} outside vocabulary of {vocab}")));
        }
        Ok(())
    }
}
