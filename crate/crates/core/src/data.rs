//! Corpus ingestion, tokenization, vocabulary, and synthetic task generators.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijective token <-> id map with reserved ids 0..3 for pad/bos/eos/unk.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from a corpus: reserved tokens first, then the unique corpus
    /// tokens in sorted order. Order-stable for identical corpora.
    pub fn from_corpus(corpus: &ParallelCorpus) -> Self {
        let mut uniq: Vec<&str> = corpus
            .pairs
            .iter()
            .flat_map(|(s, t)| s.iter().chain(t.iter()))
            .map(String::as_str)
            .collect();
        uniq.sort_unstable();
        uniq.dedup();
        Self::from_tokens(uniq.into_iter().map(String::from))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encode tokens to ids, appending `eos` and right-padding to `len`.
    /// Fails if the content does not fit in `len - 1` slots.
    pub fn encode_padded(&self, tokens: &[String], len: usize) -> Result<Vec<usize>> {
        if tokens.len() + 1 > len {
            return Err(Error::Data(format!(
                "sequence of {} tokens does not fit in length {len} with eos",
                tokens.len()
            )));
        }
        let mut ids: Vec<usize> = tokens.iter().map(|t| self.id(t)).collect();
        ids.push(EOS_ID);
        ids.resize(len, PAD_ID);
        Ok(ids)
    }

    /// Drop everything from the first eos on, plus any stray pad/bos ids.
    pub fn trim_ids(ids: &[usize]) -> Vec<usize> {
        ids.iter()
            .take_while(|&&id| id != EOS_ID)
            .filter(|&&id| id != PAD_ID && id != BOS_ID)
            .copied()
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// FNV-1a hash over the token list; stored in checkpoints to detect
    /// vocabulary mismatches.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tokens {
            for b in t.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0x0a;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Persist as one token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read vocabulary {path:?}: {e}")))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED_TOKENS.len()
            || lines[..RESERVED_TOKENS.len()] != RESERVED_TOKENS[..]
        {
            return Err(Error::Data(format!(
                "vocabulary file {path:?} missing reserved token header"
            )));
        }
        Ok(Self::from_tokens(
            lines[RESERVED_TOKENS.len()..]
                .iter()
                .map(|s| s.to_string()),
        ))
    }

    /// Rebuild from an id-ordered token list (as stored in checkpoints).
    pub fn from_token_list(tokens: &[String]) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens[..RESERVED_TOKENS.len()]
                .iter()
                .zip(RESERVED_TOKENS.iter())
                .any(|(a, b)| a != b)
        {
            return Err(Error::Data("token list missing reserved header".into()));
        }
        Ok(Self::from_tokens(
            tokens[RESERVED_TOKENS.len()..].iter().cloned(),
        ))
    }
}

/// Tokenization mode for plain-text input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizeMode {
    Whitespace,
    Char,
}

/// Deterministic text split. Char mode splits on Unicode scalar values.
pub fn tokenize(text: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Whitespace => text.split_whitespace().map(String::from).collect(),
        TokenizeMode::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    }
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Source/target token pairs with length bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Vec<String>, Vec<String>)>,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    src: String,
    tgt: String,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<(Vec<String>, Vec<String>)>) -> Result<Self> {
        if pairs.iter().any(|(_, t)| t.is_empty()) {
            return Err(Error::Data("corpus contains an empty target".into()));
        }
        let max_src_len = pairs.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
        let max_tgt_len = pairs.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
        Ok(ParallelCorpus {
            pairs,
            max_src_len,
            max_tgt_len,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Load from JSONL with objects {"src": str, "tgt": str}, whitespace
    /// tokenized.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open corpus {path:?}: {e}")))?;
        let reader = std::io::BufReader::new(file);
        let mut pairs = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Data(format!("corpus read failed: {e}")))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CorpusLine = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!("corpus line {}: invalid JSON: {e}", lineno + 1))
            })?;
            pairs.push((
                tokenize(&parsed.src, TokenizeMode::Whitespace),
                tokenize(&parsed.tgt, TokenizeMode::Whitespace),
            ));
        }
        if pairs.is_empty() {
            return Err(Error::Data(format!("corpus {path:?} is empty")));
        }
        Self::new(pairs)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        for (src, tgt) in &self.pairs {
            let line = serde_json::to_string(&CorpusLine {
                src: detokenize(src),
                tgt: detokenize(tgt),
            })
            .expect("corpus line serializes");
            writeln!(file, "{line}")?;
        }
        Ok(())
    }
}

/// Synthetic seq2seq task kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Target equals the source.
    Copy,
    /// Target is the source reversed.
    Reverse,
    /// Target is the source sorted ascending by numeric value.
    Sort,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            other => Err(Error::InvalidArgument(format!("unknown task kind {other}"))),
        }
    }
}

/// Generate a synthetic parallel corpus over numeric tokens drawn from
/// `[4, vocab_size)`. Sequence lengths are uniform on `[1, max_len - 1]`,
/// leaving room for the eos marker at encode time. Deterministic given
/// `seed`.
pub fn synth_task(
    kind: TaskKind,
    vocab_size: usize,
    max_len: usize,
    count: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    if vocab_size <= 4 {
        return Err(Error::InvalidArgument(
            "vocab_size must exceed the 4 reserved ids".into(),
        ));
    }
    if max_len < 2 {
        return Err(Error::InvalidArgument("max_len must be at least 2".into()));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(1..=max_len - 1);
        let src: Vec<u64> = (0..len)
            .map(|_| rng.gen_range(4..vocab_size as u64))
            .collect();
        let tgt = apply_task(kind, &src);
        pairs.push((
            src.iter().map(u64::to_string).collect(),
            tgt.iter().map(u64::to_string).collect(),
        ));
    }
    ParallelCorpus::new(pairs)
}

fn apply_task(kind: TaskKind, src: &[u64]) -> Vec<u64> {
    match kind {
        TaskKind::Copy => src.to_vec(),
        TaskKind::Reverse => src.iter().rev().copied().collect(),
        TaskKind::Sort => {
            let mut out = src.to_vec();
            out.sort_unstable();
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("a b", TokenizeMode::Whitespace), vec!["a", "b"]);
        assert_eq!(tokenize("ab", TokenizeMode::Char), vec!["a", "b"]);
        assert!(tokenize("", TokenizeMode::Whitespace).is_empty());
        assert!(tokenize("", TokenizeMode::Char).is_empty());
    }

    #[test]
    fn detokenize_round_trip() {
        let s = "5 17 9 3";
        assert_eq!(detokenize(&tokenize(s, TokenizeMode::Whitespace)), s);
    }

    #[test]
    fn task_kinds() {
        assert_eq!(apply_task(TaskKind::Copy, &[5, 7, 6]), vec![5, 7, 6]);
        assert_eq!(apply_task(TaskKind::Reverse, &[5, 7, 6]), vec![6, 7, 5]);
        assert_eq!(apply_task(TaskKind::Sort, &[7, 5, 6]), vec![5, 6, 7]);
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_task(TaskKind::Copy, 20, 8, 50, 1).unwrap();
        let b = synth_task(TaskKind::Copy, 20, 8, 50, 1).unwrap();
        assert_eq!(a, b);
        let c = synth_task(TaskKind::Copy, 20, 8, 50, 2).unwrap();
        assert_ne!(a, c);
        for (src, tgt) in &a.pairs {
            assert_eq!(src, tgt);
            assert!(!tgt.is_empty() && tgt.len() <= 7);
        }
    }

    #[test]
    fn synth_rejects_bad_args() {
        assert!(synth_task(TaskKind::Copy, 4, 8, 10, 0).is_err());
        assert!(synth_task(TaskKind::Copy, 20, 1, 10, 0).is_err());
        assert!(synth_task(TaskKind::Copy, 20, 8, 0, 0).is_err());
    }

    #[test]
    fn vocabulary_reserved_and_stable() {
        let corpus = synth_task(TaskKind::Copy, 10, 6, 30, 3).unwrap();
        let v1 = Vocabulary::from_corpus(&corpus);
        let v2 = Vocabulary::from_corpus(&corpus);
        assert_eq!(v1, v2);
        assert_eq!(v1.token(PAD_ID), "<pad>");
        assert_eq!(v1.token(BOS_ID), "<bos>");
        assert_eq!(v1.token(EOS_ID), "<eos>");
        assert_eq!(v1.token(UNK_ID), "<unk>");
        // Bijective: every token maps back to its id.
        for id in 0..v1.len() {
            assert_eq!(v1.id(v1.token(id)), id);
        }
        assert_eq!(v1.id("never-seen"), UNK_ID);
    }

    #[test]
    fn encode_padded_and_trim() {
        let corpus = ParallelCorpus::new(vec![(
            vec!["5".into(), "7".into()],
            vec!["5".into(), "7".into()],
        )])
        .unwrap();
        let vocab = Vocabulary::from_corpus(&corpus);
        let ids = vocab
            .encode_padded(&["5".into(), "7".into()], 5)
            .unwrap();
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[2], EOS_ID);
        assert_eq!(ids[3], PAD_ID);
        assert_eq!(Vocabulary::trim_ids(&ids), ids[..2].to_vec());
        assert!(vocab
            .encode_padded(&["5".into(), "7".into(), "5".into()], 3)
            .is_err());
    }

    #[test]
    fn corpus_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let corpus = synth_task(TaskKind::Reverse, 15, 7, 20, 9).unwrap();
        corpus.save_jsonl(&path).unwrap();
        let loaded = ParallelCorpus::load_jsonl(&path).unwrap();
        assert_eq!(corpus, loaded);
    }

    #[test]
    fn corpus_rejects_empty_target() {
        assert!(ParallelCorpus::new(vec![(vec!["a".into()], vec![])]).is_err());
    }

    #[test]
    fn vocab_save_load() {
        let corpus = synth_task(TaskKind::Sort, 12, 6, 10, 4).unwrap();
        let vocab = Vocabulary::from_corpus(&corpus);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
    }
}
