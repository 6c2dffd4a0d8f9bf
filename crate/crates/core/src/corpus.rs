//! Question/code pair corpora: loading, tokenization, character encoding and
//! retrieval-case construction.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub mod synthetic;

/// Index of the padding symbol in every character row.
pub const PAD: u8 = 0;
/// Index for characters outside the alphabet.
pub const UNKNOWN: u8 = 1;
/// Size of the character table. Indices past the last assigned symbol are
/// reserved and never produced.
pub const ALPHABET_SIZE: usize = 100;

const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^`{|}~";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error(
        "corpus has {have} pairs; at least {need} are needed for {negatives} negatives per query"
    )]
    TooSmall {
        have: usize,
        need: usize,
        negatives: usize,
    },
    #[error("unknown id `{0}` in retrieval case")]
    UnknownId(String),
    #[error("case `{id}`: {message}")]
    InvalidCase { id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    NaturalLanguage,
    Code,
}

/// One question/code pair as read from a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPair {
    pub id: String,
    pub question: String,
    pub code: String,
}

/// Sizes used when turning token lists into [`TokenSeq`]s.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerConfig {
    /// Characters kept per token.
    pub char_len: usize,
    pub max_len_nl: usize,
    pub max_len_code: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            char_len: 16,
            max_len_nl: 50,
            max_len_code: 200,
        }
    }
}

impl TokenizerConfig {
    pub fn max_len(&self, kind: Kind) -> usize {
        match kind {
            Kind::NaturalLanguage => self.max_len_nl,
            Kind::Code => self.max_len_code,
        }
    }
}

/// Lowercase tokens plus their fixed-width character index rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    tokens: Vec<String>,
    chars: Vec<u8>,
    char_len: usize,
    kind: Kind,
}

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn char_len(&self) -> usize {
        self.char_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Character indices of token `i`, exactly `char_len` entries.
    pub fn char_row(&self, i: usize) -> &[u8] {
        &self.chars[i * self.char_len..(i + 1) * self.char_len]
    }

    /// All rows, flattened `[len, char_len]`.
    pub fn char_rows(&self) -> &[u8] {
        &self.chars
    }
}

/// One query with its candidate snippets; exactly one candidate is relevant.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalCase {
    pub id: String,
    pub query: TokenSeq,
    pub candidate_ids: Vec<String>,
    pub candidates: Vec<TokenSeq>,
    pub positive_index: usize,
}

/// The id-only form of a retrieval case, as stored in case files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub query_id: String,
    pub candidate_ids: Vec<String>,
    pub positive_index: usize,
}

/// Maps a character to its alphabet index.
pub fn char_index(c: char) -> u8 {
    match c {
        'a'..='z' => 2 + (c as u8 - b'a'),
        '0'..='9' => 28 + (c as u8 - b'0'),
        '_' => 38,
        _ => match PUNCTUATION.find(c) {
            Some(pos) => 39 + pos as u8,
            None => UNKNOWN,
        },
    }
}

fn is_word_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'
}

/// Splits text into lowercase tokens: maximal runs of `[a-z0-9_]`, and every
/// other non-whitespace character on its own. Identifiers are kept verbatim
/// apart from case.
pub fn tokenize(text: &str, _kind: Kind) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in lower.chars() {
        if is_word_char(c) {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Encodes tokens as character rows, truncating the sequence to the kind's cap
/// and each token to `char_len` characters.
pub fn to_token_seq(tokens: &[String], kind: Kind, config: &TokenizerConfig) -> TokenSeq {
    let cl = config.char_len;
    let kept: Vec<String> = tokens
        .iter()
        .filter(|t| !t.is_empty())
        .take(config.max_len(kind))
        .cloned()
        .collect();
    let mut chars = vec![PAD; kept.len() * cl];
    for (i, tok) in kept.iter().enumerate() {
        for (j, c) in tok.chars().take(cl).enumerate() {
            chars[i * cl + j] = char_index(c);
        }
    }
    TokenSeq {
        tokens: kept,
        chars,
        char_len: cl,
        kind,
    }
}

/// `tokenize` followed by `to_token_seq`.
pub fn encode(text: &str, kind: Kind, config: &TokenizerConfig) -> TokenSeq {
    to_token_seq(&tokenize(text, kind), kind, config)
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a corpus of JSON lines with `id`, `question` and `code` fields.
/// Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<RawPair>, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    parse_corpus(BufReader::new(file)).map_err(|e| match e {
        CorpusError::Io { source, .. } => io_err(path, source),
        other => other,
    })
}

pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<RawPair>, CorpusError> {
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: "<input>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: RawPair = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let blank = |field: &str| CorpusError::Malformed {
            line: line_no,
            message: format!("field `{field}` is empty"),
        };
        if pair.id.is_empty() {
            return Err(blank("id"));
        }
        if pair.question.trim().is_empty() {
            return Err(blank("question"));
        }
        if pair.code.trim().is_empty() {
            return Err(blank("code"));
        }
        if !seen.insert(pair.id.clone()) {
            return Err(CorpusError::DuplicateId(pair.id));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_corpus(path: &Path, pairs: &[RawPair]) -> Result<(), CorpusError> {
    write_json_lines(path, pairs)
}

pub(crate) fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CorpusError> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("serializing plain records cannot fail");
        out.push(b'\n');
    }
    let mut f = File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))
}

pub(crate) fn check_size(have: usize, negatives: usize) -> Result<(), CorpusError> {
    if have <= negatives {
        return Err(CorpusError::TooSmall {
            have,
            need: negatives + 1,
            negatives,
        });
    }
    Ok(())
}

/// Draws `k` distinct indices from `0..n` excluding `skip`, uniformly.
pub(crate) fn sample_others<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    skip: usize,
    k: usize,
) -> Vec<usize> {
    index::sample(rng, n - 1, k)
        .into_iter()
        .map(|j| if j >= skip { j + 1 } else { j })
        .collect()
}

/// One case per pair: its own code plus `negatives_per_case` other snippets,
/// with the positive at a seed-determined slot.
pub fn build_case_specs(
    pairs: &[RawPair],
    negatives_per_case: usize,
    seed: u64,
) -> Result<Vec<CaseSpec>, CorpusError> {
    check_size(pairs.len(), negatives_per_case)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = (0..pairs.len())
        .map(|i| {
            let negatives = sample_others(&mut rng, pairs.len(), i, negatives_per_case);
            let positive_index = rng.random_range(0..=negatives_per_case);
            let mut candidate_ids: Vec<String> =
                negatives.iter().map(|&j| pairs[j].id.clone()).collect();
            candidate_ids.insert(positive_index, pairs[i].id.clone());
            CaseSpec {
                query_id: pairs[i].id.clone(),
                candidate_ids,
                positive_index,
            }
        })
        .collect();
    Ok(specs)
}

/// Resolves case specs against a corpus, tokenizing queries and candidates.
pub fn resolve_cases(
    specs: &[CaseSpec],
    pairs: &[RawPair],
    config: &TokenizerConfig,
) -> Result<Vec<RetrievalCase>, CorpusError> {
    let by_id: std::collections::HashMap<&str, &RawPair> =
        pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    let lookup = |id: &str| {
        by_id
            .get(id)
            .copied()
            .ok_or_else(|| CorpusError::UnknownId(id.to_string()))
    };
    specs
        .iter()
        .map(|s| {
            if s.candidate_ids.len() < 2 || s.positive_index >= s.candidate_ids.len() {
                return Err(CorpusError::InvalidCase {
                    id: s.query_id.clone(),
                    message: format!(
                        "positive_index {} with {} candidates",
                        s.positive_index,
                        s.candidate_ids.len()
                    ),
                });
            }
            let q = lookup(&s.query_id)?;
            let candidates = s
                .candidate_ids
                .iter()
                .map(|id| lookup(id).map(|p| encode(&p.code, Kind::Code, config)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(RetrievalCase {
                id: s.query_id.clone(),
                query: encode(&q.question, Kind::NaturalLanguage, config),
                candidate_ids: s.candidate_ids.clone(),
                candidates,
                positive_index: s.positive_index,
            })
        })
        .collect()
}

pub fn build_cases(
    pairs: &[RawPair],
    negatives_per_case: usize,
    seed: u64,
    config: &TokenizerConfig,
) -> Result<Vec<RetrievalCase>, CorpusError> {
    let specs = build_case_specs(pairs, negatives_per_case, seed)?;
    resolve_cases(&specs, pairs, config)
}

pub fn load_case_specs(path: &Path) -> Result<Vec<CaseSpec>, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let spec: CaseSpec = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(spec);
    }
    Ok(out)
}

pub fn write_case_specs(path: &Path, specs: &[CaseSpec]) -> Result<(), CorpusError> {
    write_json_lines(path, specs)
}

/// Token-count statistics over a corpus (before length caps).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub pairs: usize,
    pub avg_tokens_description: f64,
    pub max_tokens_description: usize,
    pub avg_tokens_code: f64,
    pub max_tokens_code: usize,
}

impl CorpusStats {
    pub fn compute(pairs: &[RawPair]) -> Self {
        let nl: Vec<usize> = pairs
            .iter()
            .map(|p| tokenize(&p.question, Kind::NaturalLanguage).len())
            .collect();
        let code: Vec<usize> = pairs
            .iter()
            .map(|p| tokenize(&p.code, Kind::Code).len())
            .collect();
        let avg = |v: &[usize]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<usize>() as f64 / v.len() as f64
            }
        };
        Self {
            pairs: pairs.len(),
            avg_tokens_description: avg(&nl),
            max_tokens_description: nl.iter().copied().max().unwrap_or(0),
            avg_tokens_code: avg(&code),
            max_tokens_code: code.iter().copied().max().unwrap_or(0),
        }
    }
}
