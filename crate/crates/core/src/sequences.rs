//! Fixed-shape one-hot token sequences and a synthetic corpus with a
//! structure-dependent scalar target.
//!
//! Sequences are written as concatenated bracket tokens, e.g. `[C][=O][N]`.
//! Every token including its brackets is one alphabet entry. Rows after the
//! end of a sequence hold the padding token [`PADDING_TOKEN`].

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::metrics::argmax;
use crate::rng::Rng;
use crate::split::{RangeSplit, Split, SplitError};
use crate::tensor::Matrix;

pub const PADDING_TOKEN: &str = "[nop]";
pub const DEFAULT_LENGTH: usize = 21;
pub const DEFAULT_ALPHABET_SIZE: usize = 27;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("token '{token}' at position {position} is not in the alphabet")]
    UnknownToken { token: String, position: usize },
    #[error("sequence has {len} tokens, maximum is {max}")]
    TooLong { len: usize, max: usize },
    #[error("cannot parse sequence '{0}': expected bracketed tokens like [C][=O]")]
    BadSequence(String),
    #[error("alphabet: {0}")]
    Alphabet(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column '{0}' in header")]
    MissingColumn(&'static str),
    #[error("{count} malformed row(s); first at line {line}: {message}")]
    Malformed {
        count: usize,
        line: u64,
        message: String,
    },
    #[error("logits have {got} columns, alphabet has {want}")]
    Width { got: usize, want: usize },
    #[error(transparent)]
    Split(#[from] SplitError),
}

/// Ordered token list with one designated padding token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    padding: usize,
}

impl Alphabet {
    pub fn new(tokens: Vec<String>, padding_token: &str) -> Result<Self, SequenceError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(SequenceError::Alphabet(format!("duplicate token '{t}'")));
            }
        }
        let padding = *index.get(padding_token).ok_or_else(|| {
            SequenceError::Alphabet(format!("padding token '{padding_token}' is missing"))
        })?;
        Ok(Self {
            tokens,
            index,
            padding,
        })
    }

    /// Sorted distinct corpus tokens followed by placeholder tokens and the
    /// padding token, `size` entries in total.
    pub fn from_corpus<'a, I>(sequences: I, size: Option<usize>) -> Result<Self, SequenceError>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut seen = BTreeSet::new();
        for seq in sequences {
            for t in seq {
                if t != PADDING_TOKEN {
                    seen.insert(t.clone());
                }
            }
        }
        let mut tokens: Vec<String> = seen.into_iter().collect();
        if let Some(size) = size {
            if tokens.len() + 1 > size {
                return Err(SequenceError::Alphabet(format!(
                    "corpus has {} distinct tokens, does not fit alphabet size {size}",
                    tokens.len()
                )));
            }
            let mut k = 0;
            while tokens.len() + 1 < size {
                tokens.push(format!("[unused{k}]"));
                k += 1;
            }
        }
        tokens.push(PADDING_TOKEN.to_string());
        Self::new(tokens, PADDING_TOKEN)
    }

    /// The synthetic-corpus alphabet: the first `size - 1` entries of
    /// [`SYNTHETIC_TOKENS`] plus padding.
    pub fn synthetic(size: usize) -> Result<Self, SequenceError> {
        if !(2..=SYNTHETIC_TOKENS.len() + 1).contains(&size) {
            return Err(SequenceError::Alphabet(format!(
                "synthetic alphabet size must be in 2..={}, got {size}",
                SYNTHETIC_TOKENS.len() + 1
            )));
        }
        let mut tokens: Vec<String> = SYNTHETIC_TOKENS[..size - 1]
            .iter()
            .map(|t| t.token.to_string())
            .collect();
        tokens.push(PADDING_TOKEN.to_string());
        Self::new(tokens, PADDING_TOKEN)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn padding_index(&self) -> usize {
        self.padding
    }

    pub fn padding_token(&self) -> &str {
        &self.tokens[self.padding]
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }
}

/// Splits `[C][=O]` into `["[C]", "[=O]"]`. Whitespace between tokens is
/// ignored; anything else outside brackets is an error.
pub fn parse_tokens(text: &str) -> Result<Vec<String>, SequenceError> {
    let mut out = Vec::new();
    let mut rest = text.trim();
    while !rest.is_empty() {
        if !rest.starts_with('[') {
            return Err(SequenceError::BadSequence(text.to_string()));
        }
        let end = rest
            .find(']')
            .ok_or_else(|| SequenceError::BadSequence(text.to_string()))?;
        let tok = &rest[..=end];
        if tok.len() < 3 || tok[1..end].contains('[') {
            return Err(SequenceError::BadSequence(text.to_string()));
        }
        out.push(tok.to_string());
        rest = rest[end + 1..].trim_start();
    }
    Ok(out)
}

pub fn format_tokens(tokens: &[String]) -> String {
    tokens.concat()
}

/// `L × A` one-hot matrix; rows past the sequence end hold padding.
pub fn one_hot_encode(
    tokens: &[String],
    alphabet: &Alphabet,
    length: usize,
) -> Result<Matrix, SequenceError> {
    if tokens.len() > length {
        return Err(SequenceError::TooLong {
            len: tokens.len(),
            max: length,
        });
    }
    let mut m = Matrix::zeros(length, alphabet.len());
    for (pos, t) in tokens.iter().enumerate() {
        let i = alphabet
            .index_of(t)
            .ok_or_else(|| SequenceError::UnknownToken {
                token: t.clone(),
                position: pos,
            })?;
        m.set(pos, i, 1.0);
    }
    for pos in tokens.len()..length {
        m.set(pos, alphabet.padding_index(), 1.0);
    }
    Ok(m)
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Tokens with trailing padding removed.
    pub tokens: Vec<String>,
    /// Argmax choices re-encoded as one-hot.
    pub onehot: Matrix,
}

/// Per-row softmax then argmax (lowest index on ties).
pub fn one_hot_decode(logits: &Matrix, alphabet: &Alphabet) -> Result<Decoded, SequenceError> {
    if logits.cols() != alphabet.len() {
        return Err(SequenceError::Width {
            got: logits.cols(),
            want: alphabet.len(),
        });
    }
    let probs = softmax_rows(logits);
    let mut onehot = Matrix::zeros(logits.rows(), logits.cols());
    let mut choice = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        let k = argmax(probs.row(r));
        onehot.set(r, k, 1.0);
        choice.push(k);
    }
    while choice.last() == Some(&alphabet.padding_index()) {
        choice.pop();
    }
    let tokens = choice
        .into_iter()
        .map(|k| alphabet.token(k).to_string())
        .collect();
    Ok(Decoded { tokens, onehot })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub tokens: Vec<String>,
    pub onehot: Matrix,
    pub target: f64,
}

impl SequenceSample {
    pub fn new(
        tokens: Vec<String>,
        target: f64,
        alphabet: &Alphabet,
        length: usize,
    ) -> Result<Self, SequenceError> {
        let onehot = one_hot_encode(&tokens, alphabet, length)?;
        Ok(Self {
            tokens,
            onehot,
            target,
        })
    }
}

/// One parsed CSV row before validation against an alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub line: u64,
    pub tokens: Vec<String>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowProblem {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvLoad {
    pub samples: Vec<SequenceSample>,
    pub rows_read: usize,
    pub rejected: Vec<RowProblem>,
}

fn open(path: &Path) -> Result<std::fs::File, SequenceError> {
    std::fs::File::open(path).map_err(|source| SequenceError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses `sequence,target` rows without an alphabet. Rows that fail to parse
/// are reported with their line number.
pub fn read_sequence_rows<R: Read>(reader: R) -> Result<(Vec<RawRow>, Vec<RowProblem>), SequenceError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &'static str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or(SequenceError::MissingColumn(name))
    };
    let seq_col = col("sequence")?;
    let target_col = col("target")?;
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let (Some(seq), Some(target)) = (record.get(seq_col), record.get(target_col)) else {
            problems.push(RowProblem {
                line,
                message: format!("expected at least {} fields", seq_col.max(target_col) + 1),
            });
            continue;
        };
        let target = match target.trim().parse::<f64>() {
            Ok(t) if t.is_finite() => t,
            _ => {
                problems.push(RowProblem {
                    line,
                    message: format!("target '{target}' is not a finite number"),
                });
                continue;
            }
        };
        match parse_tokens(seq) {
            Ok(tokens) => rows.push(RawRow {
                line,
                tokens,
                target,
            }),
            Err(e) => problems.push(RowProblem {
                line,
                message: e.to_string(),
            }),
        }
    }
    Ok((rows, problems))
}

/// Validates parsed rows against an alphabet and length. In strict mode any
/// problem (including parse problems passed in) is an error.
pub fn validate_rows(
    rows: Vec<RawRow>,
    mut problems: Vec<RowProblem>,
    alphabet: &Alphabet,
    length: usize,
    strict: bool,
) -> Result<CsvLoad, SequenceError> {
    let rows_read = rows.len() + problems.len();
    let mut samples = Vec::with_capacity(rows.len());
    for row in rows {
        match SequenceSample::new(row.tokens, row.target, alphabet, length) {
            Ok(s) => samples.push(s),
            Err(e) => problems.push(RowProblem {
                line: row.line,
                message: e.to_string(),
            }),
        }
    }
    problems.sort_by_key(|p| p.line);
    if strict && !problems.is_empty() {
        return Err(SequenceError::Malformed {
            count: problems.len(),
            line: problems[0].line,
            message: problems[0].message.clone(),
        });
    }
    Ok(CsvLoad {
        samples,
        rows_read,
        rejected: problems,
    })
}

pub fn load_sequence_csv(
    path: &Path,
    alphabet: &Alphabet,
    length: usize,
    strict: bool,
) -> Result<CsvLoad, SequenceError> {
    let (rows, problems) = read_sequence_rows(open(path)?)?;
    validate_rows(rows, problems, alphabet, length, strict)
}

pub fn write_sequence_csv<W: Write>(w: W, samples: &[SequenceSample]) -> Result<(), SequenceError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["sequence", "target"])?;
    for s in samples {
        out.write_record([format_tokens(&s.tokens), format!("{:?}", s.target)])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Partitions sequences by target value.
pub fn split_by_target(
    samples: &[SequenceSample],
    split: &RangeSplit,
) -> Result<Split<SequenceSample>, SequenceError> {
    split.validate()?;
    Ok(split.partition(samples, |s| s.target)?)
}

/// Entry of the synthetic weight table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticToken {
    pub token: &'static str,
    pub weight: i32,
    pub class: usize,
}

const fn tok(token: &'static str, weight: i32, class: usize) -> SyntheticToken {
    SyntheticToken {
        token,
        weight,
        class,
    }
}

/// Token weights and adjacency classes of the synthetic corpus. Classes:
/// 0 carbon, 1 nitrogen, 2 oxygen and halogens, 3 branches, 4 rings.
pub const SYNTHETIC_TOKENS: [SyntheticToken; 26] = [
    tok("[C]", -12, 0),
    tok("[=C]", -9, 0),
    tok("[#C]", -5, 0),
    tok("[CH1]", -11, 0),
    tok("[C@@H1]", -13, 0),
    tok("[C@H1]", -13, 0),
    tok("[N]", -8, 1),
    tok("[=N]", -6, 1),
    tok("[#N]", -3, 1),
    tok("[NH1]", -7, 1),
    tok("[N+1]", -2, 1),
    tok("[O]", -10, 2),
    tok("[=O]", -14, 2),
    tok("[O-1]", -4, 2),
    tok("[F]", -15, 2),
    tok("[Cl]", -6, 2),
    tok("[Br]", -3, 2),
    tok("[S]", -5, 2),
    tok("[Branch1]", 2, 3),
    tok("[=Branch1]", 3, 3),
    tok("[Branch2]", 1, 3),
    tok("[#Branch1]", 4, 3),
    tok("[Ring1]", -1, 4),
    tok("[=Ring1]", 0, 4),
    tok("[Ring2]", -2, 4),
    tok("[P]", -4, 1),
];

/// Bonus added for each adjacent pair `(class of left, class of right)`.
pub const ADJACENCY_BONUS: [[i32; 5]; 5] = [
    [-3, -2, -4, 1, -1],
    [-2, 2, -5, 1, 0],
    [-4, -5, 6, 2, 1],
    [1, 0, 2, 4, 3],
    [-1, 1, 0, 3, 5],
];

fn synthetic_entry(token: &str) -> Option<&'static SyntheticToken> {
    SYNTHETIC_TOKENS.iter().find(|t| t.token == token)
}

/// Unscaled synthetic target: sum of token weights plus the adjacency bonus of
/// every consecutive pair. Integer valued, so the result is exact.
pub fn synthetic_raw_target(tokens: &[String]) -> Result<f64, SequenceError> {
    let entries = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            synthetic_entry(t).ok_or_else(|| SequenceError::UnknownToken {
                token: t.clone(),
                position: i,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut total: i64 = entries.iter().map(|e| e.weight as i64).sum();
    for w in entries.windows(2) {
        total += ADJACENCY_BONUS[w[0].class][w[1].class] as i64;
    }
    Ok(total as f64)
}

/// Affine map of `[raw_min, raw_max]` onto `range`. A degenerate raw range
/// maps to the midpoint.
pub fn rescale_target(raw: f64, raw_min: f64, raw_max: f64, range: [f64; 2]) -> f64 {
    if raw_max > raw_min {
        range[0] + (raw - raw_min) * (range[1] - range[0]) / (raw_max - raw_min)
    } else {
        0.5 * (range[0] + range[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub samples: Vec<SequenceSample>,
    pub raw_min: f64,
    pub raw_max: f64,
    pub target_range: [f64; 2],
}

impl SyntheticCorpus {
    /// Target recomputed from tokens alone.
    pub fn target_of(&self, tokens: &[String]) -> Result<f64, SequenceError> {
        Ok(rescale_target(
            synthetic_raw_target(tokens)?,
            self.raw_min,
            self.raw_max,
            self.target_range,
        ))
    }
}

/// `n` random sequences with lengths uniform in `[3, length]` and tokens
/// uniform over the non-padding alphabet. Targets are rescaled so the corpus
/// minimum and maximum land on `target_range`. Sample `i` uses stream `i + 1`.
pub fn generate_synthetic_sequences(
    n: usize,
    alphabet: &Alphabet,
    length: usize,
    target_range: [f64; 2],
    rng: &Rng,
) -> Result<SyntheticCorpus, SequenceError> {
    if length < 3 {
        return Err(SequenceError::TooLong { len: 3, max: length });
    }
    let symbols: Vec<&str> = alphabet
        .tokens()
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != alphabet.padding_index())
        .map(|(_, t)| t.as_str())
        .collect();
    if let Some(bad) = symbols.iter().find(|t| synthetic_entry(t).is_none()) {
        return Err(SequenceError::Alphabet(format!(
            "token '{bad}' has no synthetic weight"
        )));
    }
    if symbols.is_empty() {
        return Err(SequenceError::Alphabet("no non-padding tokens".into()));
    }
    let mut seqs = Vec::with_capacity(n);
    let mut raws = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng.split(i as u64 + 1);
        let len = 3 + r.below((length - 2) as u64) as usize;
        let tokens: Vec<String> = (0..len)
            .map(|_| symbols[r.below(symbols.len() as u64) as usize].to_string())
            .collect();
        raws.push(synthetic_raw_target(&tokens)?);
        seqs.push(tokens);
    }
    let raw_min = raws.iter().copied().fold(f64::INFINITY, f64::min);
    let raw_max = raws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let samples = seqs
        .into_iter()
        .zip(&raws)
        .map(|(tokens, &raw)| {
            let target = rescale_target(raw, raw_min, raw_max, target_range);
            SequenceSample::new(tokens, target, alphabet, length)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SyntheticCorpus {
        samples,
        raw_min,
        raw_max,
        target_range,
    })
}
