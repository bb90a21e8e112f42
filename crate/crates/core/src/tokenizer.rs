//! Local byte-level BPE tokenization.
//!
//! Vocabularies use the usual GPT-2 file pair: a JSON map from
//! (byte-to-unicode encoded) token strings to ids, and a merges list with one
//! space-separated pair per line, ordered by priority. The GPT-2 files are
//! bundled and serve as the fallback for unknown models.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use fancy_regex::Regex;
use serde::Deserialize;
use thiserror::Error;

const GPT2_VOCAB: &str = include_str!("../assets/gpt2/vocab.json");
const GPT2_MERGES: &str = include_str!("../assets/gpt2/merges.txt");
const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

pub const DEFAULT_TOKENIZER_ID: &str = "gpt2";

/// Models whose tokenizer is exactly the bundled GPT-2 vocabulary.
const GPT2_MODELS: &[&str] = &[
    "gpt2",
    "gpt-2",
    "davinci",
    "curie",
    "babbage",
    "ada",
    "text-davinci-001",
    "text-curie-001",
    "text-babbage-001",
    "text-ada-001",
];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("invalid merges line {line}: {reason}")]
    Merges { line: usize, reason: String },
    #[error("invalid tokenizer registry: {0}")]
    Registry(String),
}

/// Counts tokens in text.
pub trait Tokenizer: Send + Sync {
    fn id(&self) -> &str;

    fn count(&self, text: &str) -> usize;

    /// True when this tokenizer stands in for a model it was not built for.
    fn approximate(&self) -> bool {
        false
    }
}

pub fn count_tokens(tok: &dyn Tokenizer, texts: &[&str]) -> Vec<usize> {
    texts.iter().map(|t| tok.count(t)).collect()
}

/// GPT-2's reversible byte-to-unicode table: printable bytes map to
/// themselves, the rest to code points from 256 upward.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut next = 256u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            char::from(b)
        } else {
            let c = char::from_u32(next).expect("valid code point");
            next += 1;
            c
        };
    }
    table
}

pub struct BpeTokenizer {
    id: String,
    /// Token id for each single byte.
    byte_ids: [u32; 256],
    /// (left id, right id) -> (merge rank, merged id).
    merges: HashMap<(u32, u32), (u32, u32)>,
    pattern: Regex,
}

impl std::fmt::Debug for BpeTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BpeTokenizer")
            .field("id", &self.id)
            .field("merges", &self.merges.len())
            .finish()
    }
}

impl BpeTokenizer {
    pub fn from_strs(
        id: impl Into<String>,
        vocab_json: &str,
        merges_txt: &str,
    ) -> Result<Self, TokenizerError> {
        let vocab: HashMap<String, u32> = serde_json::from_str(vocab_json)
            .map_err(|e| TokenizerError::Vocabulary(e.to_string()))?;

        let mut byte_ids = [0u32; 256];
        for (byte, ch) in bytes_to_unicode().iter().enumerate() {
            byte_ids[byte] = *vocab.get(&ch.to_string()).ok_or_else(|| {
                TokenizerError::Vocabulary(format!("no token for byte {byte:#04x}"))
            })?;
        }

        let mut merges = HashMap::new();
        let mut rank = 0u32;
        for (index, line) in merges_txt.lines().enumerate() {
            let line_no = index + 1;
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let (left, right) = line.split_once(' ').ok_or_else(|| TokenizerError::Merges {
                line: line_no,
                reason: "expected two space-separated symbols".into(),
            })?;
            let lookup = |sym: &str| {
                vocab
                    .get(sym)
                    .copied()
                    .ok_or_else(|| TokenizerError::Merges {
                        line: line_no,
                        reason: format!("symbol {sym:?} not in vocabulary"),
                    })
            };
            let merged = format!("{left}{right}");
            let key = (lookup(left)?, lookup(right)?);
            let merged_id = lookup(&merged)?;
            merges.entry(key).or_insert((rank, merged_id));
            rank += 1;
        }

        Ok(Self {
            id: id.into(),
            byte_ids,
            merges,
            pattern: Regex::new(GPT2_PATTERN).expect("pre-tokenizer pattern compiles"),
        })
    }

    pub fn from_files(
        id: impl Into<String>,
        vocab: &Path,
        merges: &Path,
    ) -> Result<Self, TokenizerError> {
        let read = |path: &Path| {
            fs::read_to_string(path).map_err(|source| TokenizerError::Io {
                path: path.to_path_buf(),
                source,
            })
        };
        Self::from_strs(id, &read(vocab)?, &read(merges)?)
    }

    /// The bundled GPT-2 vocabulary, parsed once per process.
    pub fn gpt2() -> Arc<BpeTokenizer> {
        static GPT2: OnceLock<Arc<BpeTokenizer>> = OnceLock::new();
        GPT2.get_or_init(|| {
            Arc::new(
                BpeTokenizer::from_strs(DEFAULT_TOKENIZER_ID, GPT2_VOCAB, GPT2_MERGES)
                    .expect("bundled vocabulary is valid"),
            )
        })
        .clone()
    }

    fn encode_piece(&self, piece: &[u8], out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = piece.iter().map(|&b| self.byte_ids[b as usize]).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, pair)| {
                    self.merges
                        .get(&(pair[0], pair[1]))
                        .map(|&(rank, id)| (rank, i, id))
                })
                .min();
            let Some((_, at, merged)) = best else { break };
            symbols[at] = merged;
            symbols.remove(at + 1);
        }
        out.extend(symbols);
    }

    /// Pre-tokenizes with the GPT-2 pattern, then applies merges to each
    /// piece by ascending rank.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in self.pattern.find_iter(text) {
            // The pattern has no catastrophic backtracking; a match error
            // would mean a bug in the regex engine.
            let piece = piece.expect("pre-tokenizer match");
            self.encode_piece(piece.as_str().as_bytes(), &mut ids);
        }
        ids
    }
}

impl Tokenizer for BpeTokenizer {
    fn id(&self) -> &str {
        &self.id
    }

    fn count(&self, text: &str) -> usize {
        self.encode(text).len()
    }
}

/// A tokenizer chosen for a model, possibly as a stand-in.
#[derive(Debug, Clone)]
pub struct ResolvedTokenizer {
    inner: Arc<BpeTokenizer>,
    approximate: bool,
}

impl ResolvedTokenizer {
    pub fn exact(inner: Arc<BpeTokenizer>) -> Self {
        Self {
            inner,
            approximate: false,
        }
    }
}

impl Tokenizer for ResolvedTokenizer {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn count(&self, text: &str) -> usize {
        self.inner.count(text)
    }

    fn approximate(&self) -> bool {
        self.approximate
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct VocabFiles {
    pub vocab: PathBuf,
    pub merges: PathBuf,
}

/// Maps model ids to vocabulary files. Keys ending in `*` match by prefix.
#[derive(Debug, Clone, Default)]
pub struct TokenizerRegistry {
    entries: Vec<(String, VocabFiles)>,
}

impl TokenizerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads a JSON object `{"model-id": {"vocab": "...", "merges": "..."}}`.
    /// Relative paths resolve against the registry file's directory.
    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        // serde_json is built with preserve_order, so prefix rules keep
        // their document order.
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| TokenizerError::Registry(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut registry = Self::new();
        for (model, value) in map {
            let mut files: VocabFiles = serde_json::from_value(value)
                .map_err(|e| TokenizerError::Registry(format!("{model}: {e}")))?;
            if files.vocab.is_relative() {
                files.vocab = base.join(&files.vocab);
            }
            if files.merges.is_relative() {
                files.merges = base.join(&files.merges);
            }
            registry.register(model, files);
        }
        Ok(registry)
    }

    pub fn register(&mut self, model: impl Into<String>, files: VocabFiles) {
        self.entries.push((model.into(), files));
    }

    fn lookup(&self, model: &str) -> Option<&VocabFiles> {
        self.entries.iter().find_map(|(key, files)| {
            let hit = match key.strip_suffix('*') {
                Some(prefix) => model.starts_with(prefix),
                None => key == model,
            };
            hit.then_some(files)
        })
    }

    /// Picks the tokenizer for `model`: a registered vocabulary, the bundled
    /// GPT-2 vocabulary for GPT-2 family models, or GPT-2 as an approximate
    /// fallback.
    pub fn resolve(&self, model: &str) -> Result<ResolvedTokenizer, TokenizerError> {
        if let Some(files) = self.lookup(model) {
            let tok = BpeTokenizer::from_files(model, &files.vocab, &files.merges)?;
            return Ok(ResolvedTokenizer::exact(Arc::new(tok)));
        }
        let approximate = !GPT2_MODELS.contains(&model);
        if approximate {
            tracing::warn!(
                model,
                "no tokenizer registered for model; counting with GPT-2 as the default tokenizer"
            );
        }
        Ok(ResolvedTokenizer {
            inner: BpeTokenizer::gpt2(),
            approximate,
        })
    }
}
