//! Byte-level tokenizer, document loading, the synthetic Markov corpus and
//! fixed-length training windows.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const PAD: TokenId = 1;
/// Byte `b` maps to token `b + BYTE_OFFSET`.
pub const BYTE_OFFSET: TokenId = 2;
pub const VOCAB_SIZE: usize = 258;

/// 256 byte tokens plus BOS and PAD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Encodes bytes, prepending BOS.
    pub fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(text.len() + 1);
        ids.push(BOS);
        ids.extend(text.iter().map(|&b| b as TokenId + BYTE_OFFSET));
        ids
    }

    /// Decodes ids back to bytes; BOS and PAD are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| id >= BYTE_OFFSET && (id as usize) < VOCAB_SIZE)
            .map(|&id| (id - BYTE_OFFSET) as u8)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// An order-`pattern_order` Markov source over a small alphabet of lowercase
/// letters. Every context has one designated successor; at each position the
/// successor is emitted with probability `determinism`, otherwise a uniform
/// draw from the remaining letters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusSpec {
    pub seed: u64,
    pub pattern_order: usize,
    pub determinism: f64,
    #[serde(default = "default_alphabet")]
    pub alphabet_size: usize,
}

fn default_alphabet() -> usize {
    8
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            pattern_order: 3,
            determinism: 0.9,
            alphabet_size: default_alphabet(),
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.determinism) {
            return Err(Error::Config(format!(
                "determinism must be in [0, 1], got {}",
                self.determinism
            )));
        }
        if self.pattern_order == 0 {
            return Err(Error::Config("pattern_order must be at least 1".into()));
        }
        if !(2..=26).contains(&self.alphabet_size) {
            return Err(Error::Config(format!(
                "alphabet_size must be in [2, 26], got {}",
                self.alphabet_size
            )));
        }
        if (self.alphabet_size as f64).powi(self.pattern_order as i32) > 1e7 {
            return Err(Error::Config("successor table too large".into()));
        }
        Ok(())
    }

    /// Token id of alphabet letter `s`.
    pub fn symbol_token(&self, s: usize) -> TokenId {
        (b'a' + s as u8) as TokenId + BYTE_OFFSET
    }

    pub fn token_symbol(&self, t: TokenId) -> Option<usize> {
        let s = t.checked_sub(BYTE_OFFSET + b'a' as TokenId)? as usize;
        (s < self.alphabet_size).then_some(s)
    }
}

/// The designated-successor table of a [`SyntheticCorpusSpec`].
#[derive(Clone, Debug)]
pub struct MarkovTable {
    spec: SyntheticCorpusSpec,
    successor: Vec<u8>,
}

impl MarkovTable {
    pub fn new(spec: &SyntheticCorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7ab1_e5ee_d000_0001);
        let contexts = spec.alphabet_size.pow(spec.pattern_order as u32);
        let successor = (0..contexts)
            .map(|_| rng.gen_range(0..spec.alphabet_size) as u8)
            .collect();
        Ok(Self {
            spec: spec.clone(),
            successor,
        })
    }

    fn context_index(&self, ctx: &[usize]) -> usize {
        ctx.iter().fold(0, |acc, &s| acc * self.spec.alphabet_size + s)
    }

    /// Designated successor of the last `pattern_order` symbols.
    pub fn successor(&self, ctx: &[usize]) -> usize {
        debug_assert_eq!(ctx.len(), self.spec.pattern_order);
        self.successor[self.context_index(ctx)] as usize
    }

    /// Designated successor token of the last `pattern_order` tokens, if they
    /// are all alphabet symbols.
    pub fn successor_token(&self, ctx: &[TokenId]) -> Option<TokenId> {
        if ctx.len() < self.spec.pattern_order {
            return None;
        }
        let tail = &ctx[ctx.len() - self.spec.pattern_order..];
        let syms: Option<Vec<usize>> = tail.iter().map(|&t| self.spec.token_symbol(t)).collect();
        Some(self.spec.symbol_token(self.successor(&syms?)))
    }

    pub fn spec(&self) -> &SyntheticCorpusSpec {
        &self.spec
    }
}

/// Generates `n_tokens` symbol tokens (plus a leading BOS) from the spec.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, n_tokens: usize) -> Result<DocumentStream> {
    if n_tokens == 0 {
        return Err(Error::Config("n_tokens must be positive".into()));
    }
    let table = MarkovTable::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let order = spec.pattern_order;
    let a = spec.alphabet_size;

    let mut symbols: Vec<usize> = (0..order.min(n_tokens)).map(|_| rng.gen_range(0..a)).collect();
    while symbols.len() < n_tokens {
        let forced = table.successor(&symbols[symbols.len() - order..]);
        let next = if rng.gen_bool(spec.determinism) {
            forced
        } else {
            // Uniform over the other a-1 letters.
            let r = rng.gen_range(0..a - 1);
            if r >= forced {
                r + 1
            } else {
                r
            }
        };
        symbols.push(next);
    }

    let mut doc = Vec::with_capacity(n_tokens + 1);
    doc.push(BOS);
    doc.extend(symbols.into_iter().map(|s| spec.symbol_token(s)));
    Ok(DocumentStream {
        documents: vec![doc],
        truncation: None,
    })
}

// ---------------------------------------------------------------------------
// Documents and windows
// ---------------------------------------------------------------------------

/// An ordered collection of tokenized documents.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentStream {
    documents: Vec<Vec<TokenId>>,
    truncation: Option<usize>,
}

impl DocumentStream {
    pub fn from_documents(documents: Vec<Vec<TokenId>>) -> Self {
        Self {
            documents,
            truncation: None,
        }
    }

    /// Newline-delimited documents from raw bytes; empty lines are skipped.
    pub fn from_text(text: &[u8]) -> Self {
        let tok = Tokenizer;
        let documents = text
            .split(|&b| b == b'\n')
            .filter(|line| !line.is_empty())
            .map(|line| tok.encode(line))
            .collect();
        Self::from_documents(documents)
    }

    /// Loads files in the given order. With `one_per_file` each file is a
    /// single document; otherwise files are newline-delimited.
    pub fn from_files<P: AsRef<Path>>(paths: &[P], one_per_file: bool) -> Result<Self> {
        let tok = Tokenizer;
        let mut documents = Vec::new();
        for p in paths {
            let p = p.as_ref();
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            if one_per_file {
                documents.push(tok.encode(&bytes));
            } else {
                documents.extend(Self::from_text(&bytes).documents);
            }
        }
        Ok(Self::from_documents(documents))
    }

    /// Caps each emitted document at `len` tokens.
    pub fn truncated(mut self, len: usize) -> Self {
        self.truncation = Some(len);
        self
    }

    pub fn documents(&self) -> impl Iterator<Item = &[TokenId]> {
        let cap = self.truncation.unwrap_or(usize::MAX);
        self.documents.iter().map(move |d| &d[..d.len().min(cap)])
    }

    /// All documents concatenated in order.
    pub fn tokens(&self) -> Vec<TokenId> {
        self.documents().flat_map(|d| d.iter().copied()).collect()
    }

    pub fn token_count(&self) -> usize {
        self.documents().map(<[TokenId]>::len).sum()
    }

    /// Splits the concatenated stream at `at` tokens into two streams.
    pub fn split_at(&self, at: usize) -> (DocumentStream, DocumentStream) {
        let toks = self.tokens();
        let at = at.min(toks.len());
        (
            DocumentStream::from_documents(vec![toks[..at].to_vec()]),
            DocumentStream::from_documents(vec![toks[at..].to_vec()]),
        )
    }
}

/// One batch of windows; `mask[i][j]` is false on padding.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub tokens: Vec<Vec<TokenId>>,
    pub mask: Vec<Vec<bool>>,
    /// Position id of each window's first token.
    pub start: Vec<usize>,
}

impl WindowBatch {
    pub fn real_tokens(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }
}

/// Cuts the concatenated stream into non-overlapping `seq_len` windows,
/// grouped `batch` at a time. The final window is padded with PAD; the final
/// batch may hold fewer than `batch` windows.
pub fn batch_windows(stream: &DocumentStream, seq_len: usize, batch: usize) -> Result<Vec<WindowBatch>> {
    if seq_len < 2 {
        return Err(Error::Config(format!("seq_len must be at least 2, got {seq_len}")));
    }
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let toks = stream.tokens();
    if toks.is_empty() {
        return Err(Error::Data("end of data: stream is empty".into()));
    }
    let windows: Vec<(Vec<TokenId>, Vec<bool>)> = toks
        .chunks(seq_len)
        .map(|chunk| {
            let mut w = chunk.to_vec();
            let mut m = vec![true; chunk.len()];
            w.resize(seq_len, PAD);
            m.resize(seq_len, false);
            (w, m)
        })
        .collect();
    Ok(windows
        .chunks(batch)
        .map(|group| WindowBatch {
            tokens: group.iter().map(|(w, _)| w.clone()).collect(),
            mask: group.iter().map(|(_, m)| m.clone()).collect(),
            start: vec![0; group.len()],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn encode_examples() {
        let tok = Tokenizer;
        assert_eq!(tok.encode(b""), vec![BOS]);
        assert_eq!(
            tok.encode(b"ab"),
            vec![BOS, b'a' as u32 + BYTE_OFFSET, b'b' as u32 + BYTE_OFFSET]
        );
    }

    #[test]
    fn round_trip_random_bytes() {
        let tok = Tokenizer;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let len = rng.gen_range(0..64);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let ids = tok.encode(&bytes);
            assert!(ids.iter().all(|&i| (i as usize) < tok.vocab_size()));
            assert_eq!(tok.decode(&ids), bytes);
        }
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let tok = Tokenizer;
            prop_assert_eq!(tok.decode(&tok.encode(&bytes)), bytes);
        }
    }

    #[test]
    fn fully_deterministic_source_is_periodic() {
        let spec = SyntheticCorpusSpec {
            determinism: 1.0,
            ..Default::default()
        };
        let table = MarkovTable::new(&spec).unwrap();
        let toks = generate_synthetic_corpus(&spec, 5000).unwrap().tokens();
        let body = &toks[1..];
        for i in spec.pattern_order..body.len() {
            assert_eq!(Some(body[i]), table.successor_token(&body[..i]));
        }
        // The state space has 8^3 contexts, so the tail must have entered a cycle.
        let tail = &body[1000..];
        let period = (1..=512)
            .find(|&p| tail.iter().zip(&tail[p..]).all(|(a, b)| a == b))
            .expect("periodic tail");
        assert!(period <= 512);
    }

    #[test]
    fn same_spec_same_stream() {
        let spec = SyntheticCorpusSpec::default();
        assert_eq!(
            generate_synthetic_corpus(&spec, 3000).unwrap(),
            generate_synthetic_corpus(&spec, 3000).unwrap()
        );
    }

    #[test]
    fn forced_transition_frequency() {
        let spec = SyntheticCorpusSpec {
            seed: 17,
            pattern_order: 3,
            determinism: 0.9,
            alphabet_size: 8,
        };
        let table = MarkovTable::new(&spec).unwrap();
        let toks = generate_synthetic_corpus(&spec, 100_000).unwrap().tokens();
        let body = &toks[1..];
        let mut forced = 0usize;
        let mut total = 0usize;
        for i in 3..body.len() {
            total += 1;
            if Some(body[i]) == table.successor_token(&body[..i]) {
                forced += 1;
            }
        }
        let freq = forced as f64 / total as f64;
        assert!((freq - 0.9).abs() <= 0.02, "forced frequency {freq}");
    }

    #[test]
    fn invalid_determinism_rejected() {
        let spec = SyntheticCorpusSpec {
            determinism: 1.5,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic_corpus(&spec, 10), Err(Error::Config(_))));
    }

    #[test]
    fn window_examples() {
        let ten = DocumentStream::from_documents(vec![(2..12).collect()]);
        let batches = batch_windows(&ten, 5, 1).unwrap();
        assert_eq!(batches.len(), 2);

        let twelve = DocumentStream::from_documents(vec![(2..14).collect()]);
        let batches = batch_windows(&twelve, 5, 1).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].tokens[0], vec![12, 13, PAD, PAD, PAD]);
        assert_eq!(batches[2].mask[0], vec![true, true, false, false, false]);

        let empty = DocumentStream::from_documents(vec![]);
        assert!(matches!(batch_windows(&empty, 5, 1), Err(Error::Data(_))));
        assert!(batch_windows(&ten, 1, 1).is_err());
    }

    proptest! {
        #[test]
        fn windowing_conserves_tokens(
            lens in proptest::collection::vec(0usize..40, 1..6),
            seq_len in 2usize..17,
            batch in 1usize..5,
        ) {
            let docs: Vec<Vec<TokenId>> = lens.iter().map(|&n| vec![7; n]).collect();
            let stream = DocumentStream::from_documents(docs);
            let total = stream.token_count();
            prop_assume!(total > 0);
            let batches = batch_windows(&stream, seq_len, batch).unwrap();
            let real: usize = batches.iter().map(WindowBatch::real_tokens).sum();
            prop_assert_eq!(real, total);
            for b in &batches {
                prop_assert!(b.tokens.iter().all(|w| w.len() == seq_len));
            }
        }
    }

    #[test]
    fn truncation_caps_documents() {
        let s = DocumentStream::from_text(b"hello world\nabc\n").truncated(4);
        assert!(s.documents().all(|d| d.len() <= 4));
        assert_eq!(s.token_count(), 8);
    }
}
