//! Character-overlap features between token sequences.
//!
//! The overlap score of token `t1` against token `t2` is the length of their
//! longest common substring divided by the length of `t2`. Because the
//! denominator comes from the second argument the score is directional:
//! `"joint_table_b"` fully covers `"joint"` (score 1.0), while `"joint"` covers
//! only 5 of the 13 characters of `"joint_table_b"`.
//!
//! A matrix of these scores between a query and a snippet is reduced to one
//! value per query token by taking row maxima, and each value is mapped to one
//! of [`NUM_BUCKETS`] buckets of width 0.01 for embedding.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Kind, TokenSeq};

pub const NUM_BUCKETS: usize = 100;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OverlapError {
    #[error("overlap score against an empty token")]
    EmptyToken,
    #[error("overlap matrix needs two non-empty sequences")]
    EmptySequence,
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
}

/// Which string similarity fills the matrix cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapMetric {
    /// Longest common substring.
    #[default]
    Lcs,
    /// The larger of longest common prefix and longest common suffix.
    Lcp,
}

impl std::str::FromStr for OverlapMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lcs" => Ok(Self::Lcs),
            "lcp" => Ok(Self::Lcp),
            other => Err(format!(
                "unknown overlap metric `{other}` (expected lcs or lcp)"
            )),
        }
    }
}

impl std::fmt::Display for OverlapMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lcs => "lcs",
            Self::Lcp => "lcp",
        })
    }
}

/// Per-token-pair scores; rows follow the first sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    direction: (Kind, Kind),
}

impl OverlapMatrix {
    /// Builds a matrix from explicit rows, checking the value range.
    pub fn from_rows(rows: &[Vec<f64>], direction: (Kind, Kind)) -> Result<Self, OverlapError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged overlap rows");
            for &v in r {
                if !(0.0..=1.0).contains(&v) {
                    return Err(OverlapError::ScoreOutOfRange(v));
                }
                values.push(v);
            }
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values,
            direction,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn direction(&self) -> (Kind, Kind) {
        self.direction
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    /// Tab-separated rows with four decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            let cells: Vec<String> = self.row(i).iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(out, "{}", cells.join("\t"));
        }
        out
    }
}

/// Row maxima of an [`OverlapMatrix`], one per token of its first sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapVector(Vec<f64>);

impl OverlapVector {
    pub fn new(values: Vec<f64>) -> Result<Self, OverlapError> {
        if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(OverlapError::ScoreOutOfRange(v));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Bucket index of every entry.
    pub fn buckets(&self) -> Vec<usize> {
        self.0
            .iter()
            .map(|&v| bucketize(v).expect("values are range-checked on construction"))
            .collect()
    }
}

/// Length of the longest contiguous run of characters shared by `s1` and `s2`.
pub fn lcs_substring_len(s1: &str, s2: &str) -> usize {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // prev[j] = length of the common suffix of a[..i] and b[..j]
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut best = 0;
    for &ca in &a {
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// `lcs_substring_len(t1, t2) / len(t2)`.
pub fn overlap_score(t1: &str, t2: &str) -> Result<f64, OverlapError> {
    let n2 = t2.chars().count();
    if n2 == 0 {
        return Err(OverlapError::EmptyToken);
    }
    Ok(lcs_substring_len(t1, t2) as f64 / n2 as f64)
}

fn common_prefix_len(a: &[char], b: &[char]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn common_suffix_len(a: &[char], b: &[char]) -> usize {
    a.iter()
        .rev()
        .zip(b.iter().rev())
        .take_while(|(x, y)| x == y)
        .count()
}

/// Prefix/suffix overlap: with `p` the longer of the common prefix and common
/// suffix, returns `(p / len(t1), p / len(t2))`.
pub fn lcp_score(t1: &str, t2: &str) -> Result<(f64, f64), OverlapError> {
    let a: Vec<char> = t1.chars().collect();
    let b: Vec<char> = t2.chars().collect();
    if a.is_empty() || b.is_empty() {
        return Err(OverlapError::EmptyToken);
    }
    let p = common_prefix_len(&a, &b).max(common_suffix_len(&a, &b)) as f64;
    Ok((p / a.len() as f64, p / b.len() as f64))
}

/// Directional score of `t1` against `t2` under `metric`, normalized by `t2`.
pub fn metric_score(metric: OverlapMetric, t1: &str, t2: &str) -> Result<f64, OverlapError> {
    match metric {
        OverlapMetric::Lcs => overlap_score(t1, t2),
        OverlapMetric::Lcp => lcp_score(t1, t2).map(|(_, s)| s),
    }
}

/// `A[i][j] = overlap_score(t1[i], t2[j])`.
pub fn overlap_matrix(t1: &TokenSeq, t2: &TokenSeq) -> Result<OverlapMatrix, OverlapError> {
    overlap_matrix_with(OverlapMetric::Lcs, t1, t2)
}

pub fn overlap_matrix_with(
    metric: OverlapMetric,
    t1: &TokenSeq,
    t2: &TokenSeq,
) -> Result<OverlapMatrix, OverlapError> {
    overlap_matrix_tokens(metric, t1.tokens(), t2.tokens(), (t1.kind(), t2.kind()))
}

pub fn overlap_matrix_tokens(
    metric: OverlapMetric,
    t1: &[String],
    t2: &[String],
    direction: (Kind, Kind),
) -> Result<OverlapMatrix, OverlapError> {
    if t1.is_empty() || t2.is_empty() {
        return Err(OverlapError::EmptySequence);
    }
    let mut values = Vec::with_capacity(t1.len() * t2.len());
    for a in t1 {
        for b in t2 {
            values.push(metric_score(metric, a, b)?);
        }
    }
    Ok(OverlapMatrix {
        rows: t1.len(),
        cols: t2.len(),
        values,
        direction,
    })
}

/// Row maxima.
pub fn pool_overlap_vector(a: &OverlapMatrix) -> OverlapVector {
    let values = (0..a.rows())
        .map(|i| a.row(i).iter().copied().fold(0.0, f64::max))
        .collect();
    OverlapVector(values)
}

/// Bucket of width 0.01; a score of exactly 1.0 goes to the last bucket.
pub fn bucketize(score: f64) -> Result<usize, OverlapError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(OverlapError::ScoreOutOfRange(score));
    }
    // Snap values within rounding noise of a bucket edge (0.29999999 -> 30).
    let scaled = score * NUM_BUCKETS as f64;
    let snapped = if (scaled - scaled.round()).abs() < 1e-9 {
        scaled.round()
    } else {
        scaled.floor()
    };
    Ok((snapped as usize).min(NUM_BUCKETS - 1))
}

/// Both pooled directions for a query/snippet pair: `(a(nl), a(code))`.
pub fn pair_features(
    metric: OverlapMetric,
    query: &TokenSeq,
    code: &TokenSeq,
) -> Result<(OverlapVector, OverlapVector), OverlapError> {
    let nl = pool_overlap_vector(&overlap_matrix_with(metric, query, code)?);
    let code = pool_overlap_vector(&overlap_matrix_with(metric, code, query)?);
    Ok((nl, code))
}

/// Untrained lexical relevance: the sum of the query's pooled overlap vector.
pub fn lexical_score(query: &TokenSeq, code: &TokenSeq) -> Result<f64, OverlapError> {
    Ok(pool_overlap_vector(&overlap_matrix(query, code)?)
        .values()
        .iter()
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{to_token_seq, TokenizerConfig};
    use proptest::prelude::*;

    /// Exhaustive oracle: the longest substring of `a` that occurs in `b`.
    fn brute_lcs(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let mut best = 0;
        for i in 0..a.len() {
            for j in i + 1..=a.len() {
                let sub: String = a[i..j].iter().collect();
                if j - i > best && b.contains(&sub) {
                    best = j - i;
                }
            }
        }
        best
    }

    fn seq(tokens: &[&str], kind: Kind) -> TokenSeq {
        let t: Vec<String> = tokens.iter().map(|s| s.to_string()).collect();
        to_token_seq(&t, kind, &TokenizerConfig::default())
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(brute_lcs("joint", "joint_table_b"), 5);
        assert_eq!(lcs_substring_len("joint", "joint_table_b"), 5);
        assert_eq!(lcs_substring_len("abc", "abc"), 3);
        assert_eq!(lcs_substring_len("xyz", "abc"), 0);
        assert_eq!(lcs_substring_len("", "abc"), 0);
    }

    #[test]
    fn overlap_score_examples() {
        assert!((overlap_score("joint", "joint_table_b").unwrap() - 5.0 / 13.0).abs() < 1e-15);
        assert_eq!(overlap_score("joint_table_b", "joint").unwrap(), 1.0);
        assert_eq!(overlap_score("x", "x").unwrap(), 1.0);
        assert_eq!(overlap_score("x", ""), Err(OverlapError::EmptyToken));
    }

    #[test]
    fn matrix_examples() {
        let nl = Kind::NaturalLanguage;
        let m = overlap_matrix(&seq(&["a"], nl), &seq(&["a"], Kind::Code)).unwrap();
        assert_eq!(m.row(0), &[1.0]);
        let m = overlap_matrix(&seq(&["ab", "cd"], nl), &seq(&["abcd"], Kind::Code)).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 1));
        assert_eq!(m.get(0, 0), 0.5);
        assert_eq!(m.get(1, 0), 0.5);
        let fwd = overlap_matrix(&seq(&["abcd"], nl), &seq(&["ab"], nl)).unwrap();
        let back = overlap_matrix(&seq(&["ab"], nl), &seq(&["abcd"], nl)).unwrap();
        assert_eq!(fwd.get(0, 0), 1.0);
        assert_eq!(back.get(0, 0), 0.5);
        assert_eq!(
            overlap_matrix(&seq(&[], nl), &seq(&["a"], nl)),
            Err(OverlapError::EmptySequence)
        );
    }

    #[test]
    fn pooling_examples() {
        let dir = (Kind::NaturalLanguage, Kind::Code);
        let m = OverlapMatrix::from_rows(&[vec![0.1, 0.9, 0.3]], dir).unwrap();
        assert_eq!(pool_overlap_vector(&m).values(), &[0.9]);
        let z = OverlapMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]], dir).unwrap();
        assert_eq!(pool_overlap_vector(&z).values(), &[0.0, 0.0]);
        let m = OverlapMatrix::from_rows(
            &[
                vec![0.3, 0.1, 0.0],
                vec![0.2, 0.75, 0.5],
                vec![0.4, 0.0, 0.4],
                vec![0.0, 0.3, 0.25],
            ],
            dir,
        )
        .unwrap();
        let v = pool_overlap_vector(&m);
        assert_eq!(v.values(), &[0.3, 0.75, 0.4, 0.3]);
        assert_eq!(v.buckets(), vec![30, 75, 40, 30]);
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(bucketize(0.75).unwrap(), 75);
        assert_eq!(bucketize(0.0).unwrap(), 0);
        assert_eq!(bucketize(1.0).unwrap(), 99);
        assert_eq!(bucketize(0.301).unwrap(), 30);
        assert_eq!(bucketize(0.309).unwrap(), 30);
        // 0.29 / 0.01 is 28.999999999999996 in binary floating point
        assert_eq!(bucketize(0.29).unwrap(), 29);
        assert_eq!(bucketize(1.5), Err(OverlapError::ScoreOutOfRange(1.5)));
        assert!(bucketize(-0.01).is_err());
    }

    #[test]
    fn lcp_examples() {
        let (a, b) = lcp_score("joint_table_a", "joint_table_b").unwrap();
        assert!((a - 12.0 / 13.0).abs() < 1e-15 && (b - 12.0 / 13.0).abs() < 1e-15);
        assert_eq!(lcp_score("abc", "abc").unwrap(), (1.0, 1.0));
        assert_eq!(lcp_score("abc", "xyz").unwrap(), (0.0, 0.0));
        // suffix wins
        assert_eq!(lcp_score("user_id", "id").unwrap(), (2.0 / 7.0, 1.0));
        assert_eq!(lcp_score("", "a"), Err(OverlapError::EmptyToken));
    }

    #[test]
    fn tsv_output() {
        let m = overlap_matrix(
            &seq(&["joint", "x"], Kind::NaturalLanguage),
            &seq(&["joint_table_b", "x"], Kind::Code),
        )
        .unwrap();
        assert_eq!(m.to_tsv(), "0.3846\t0.0000\n0.0000\t1.0000\n");
    }

    fn token() -> impl Strategy<Value = String> {
        "[abcd]{0,12}"
    }

    proptest! {
        #[test]
        fn lcs_matches_exhaustive_oracle(a in token(), b in token()) {
            prop_assert_eq!(lcs_substring_len(&a, &b), brute_lcs(&a, &b));
            prop_assert_eq!(lcs_substring_len(&a, &b), lcs_substring_len(&b, &a));
        }

        #[test]
        fn score_bounds(a in token(), b in "[abcd]{1,12}") {
            let s = overlap_score(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s == 1.0, a.contains(b.as_str()));
            prop_assert_eq!(overlap_score(&b, &b).unwrap(), 1.0);
        }

        #[test]
        fn bucketize_monotone(x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(bucketize(lo).unwrap() <= bucketize(hi).unwrap());
            prop_assert!(bucketize(x).unwrap() < NUM_BUCKETS);
        }

        #[test]
        fn pooled_entries_are_attained(rows in proptest::collection::vec(
            proptest::collection::vec(0.0f64..=1.0, 3), 1..6)) {
            let m = OverlapMatrix::from_rows(&rows, (Kind::Code, Kind::NaturalLanguage)).unwrap();
            let v = pool_overlap_vector(&m);
            prop_assert_eq!(v.len(), rows.len());
            for (i, r) in rows.iter().enumerate() {
                prop_assert!(r.contains(&v.values()[i]));
                prop_assert!(r.iter().all(|&x| x <= v.values()[i]));
            }
        }
    }
}
