//! Ranking, mean reciprocal rank, score ensembling and perfect-ranking analysis.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::RetrievalCase;
use crate::model::{Model, ModelError};

/// Weight on the model's own score when ensembling.
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no rankings to evaluate")]
    Empty,
    #[error("lambda {0} is outside [0, 1]")]
    Lambda(f64),
    #[error("case `{case_id}` has a non-finite score")]
    NonFinite { case_id: String },
    #[error("case `{case_id}`: {message}")]
    InvalidCase { case_id: String, message: String },
    #[error("rankings cover different cases: {0}")]
    MismatchedCases(String),
    #[error("no score for candidate `{candidate_id}` in case `{case_id}`")]
    MissingScore {
        case_id: String,
        candidate_id: String,
    },
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Scores for one case and the resulting order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRanking {
    pub case_id: String,
    pub scores: Vec<f64>,
    /// Candidate indices, best first.
    pub order: Vec<usize>,
    pub positive_index: usize,
    /// 1-based rank of the positive candidate.
    pub positive_rank: usize,
}

impl ScoredRanking {
    /// Sorts by descending score; equal scores keep ascending index order.
    pub fn new(
        case_id: impl Into<String>,
        scores: Vec<f64>,
        positive_index: usize,
    ) -> Result<Self, EvalError> {
        let case_id = case_id.into();
        if positive_index >= scores.len() {
            return Err(EvalError::InvalidCase {
                case_id,
                message: format!(
                    "positive index {positive_index} with {} candidates",
                    scores.len()
                ),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(EvalError::NonFinite { case_id });
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let positive_rank = order.iter().position(|&i| i == positive_index).unwrap() + 1;
        Ok(Self {
            case_id,
            scores,
            order,
            positive_index,
            positive_rank,
        })
    }
}

/// Scores every candidate with `model` and ranks them.
pub fn rank_case(model: &Model, case: &RetrievalCase) -> Result<ScoredRanking, EvalError> {
    let scores = model.score_case(case)?;
    ScoredRanking::new(case.id.clone(), scores, case.positive_index)
}

/// [`rank_case`] over many cases, in parallel on the current rayon pool.
pub fn rank_cases(model: &Model, cases: &[RetrievalCase]) -> Result<Vec<ScoredRanking>, EvalError> {
    cases.par_iter().map(|c| rank_case(model, c)).collect()
}

pub fn mrr_from_ranks(ranks: &[usize]) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Mean reciprocal rank of the positives.
pub fn mrr(rankings: &[ScoredRanking]) -> Result<f64, EvalError> {
    let ranks: Vec<usize> = rankings.iter().map(|r| r.positive_rank).collect();
    mrr_from_ranks(&ranks)
}

fn check_lambda(lambda: f64) -> Result<(), EvalError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(EvalError::Lambda(lambda));
    }
    Ok(())
}

/// `lambda * s1 + (1 - lambda) * s2`.
pub fn ensemble(s1: f64, s2: f64, lambda: f64) -> Result<f64, EvalError> {
    check_lambda(lambda)?;
    Ok(lambda * s1 + (1.0 - lambda) * s2)
}

/// Re-ranks `own` after mixing its scores with `external` (same candidate order).
pub fn ensemble_ranking(
    own: &ScoredRanking,
    external: &[f64],
    lambda: f64,
) -> Result<ScoredRanking, EvalError> {
    check_lambda(lambda)?;
    if external.len() != own.scores.len() {
        return Err(EvalError::InvalidCase {
            case_id: own.case_id.clone(),
            message: format!(
                "{} external scores for {} candidates",
                external.len(),
                own.scores.len()
            ),
        });
    }
    let mixed = own
        .scores
        .iter()
        .zip(external)
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect();
    ScoredRanking::new(own.case_id.clone(), mixed, own.positive_index)
}

/// One record of an external model's score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub case_id: String,
    pub candidate_id: String,
    pub score: f64,
}

/// Scores produced by another retrieval model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    pub model_name: String,
    pub entries: HashMap<(String, String), f64>,
}

impl ScoreFile {
    pub fn from_records(
        model_name: impl Into<String>,
        records: impl IntoIterator<Item = ScoreRecord>,
    ) -> Self {
        Self {
            model_name: model_name.into(),
            entries: records
                .into_iter()
                .map(|r| ((r.case_id, r.candidate_id), r.score))
                .collect(),
        }
    }

    /// Reads line-delimited records; the model name is the file stem.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let io = |e| EvalError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let file = File::open(path).map_err(io)?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ScoreRecord = serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
                line: n + 1,
                message: e.to_string(),
            })?;
            if !r.score.is_finite() {
                return Err(EvalError::NonFinite { case_id: r.case_id });
            }
            records.push(r);
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::from_records(name, records))
    }

    /// Scores for each candidate of `case`, in candidate order.
    ///
    /// When any score falls outside `(0, 1)` the case is min-max normalized to
    /// `[0, 1]` and a warning is logged.
    pub fn case_scores(&self, case: &RetrievalCase) -> Result<Vec<f64>, EvalError> {
        let mut scores = Vec::with_capacity(case.candidate_ids.len());
        for cid in &case.candidate_ids {
            let s = self
                .entries
                .get(&(case.id.clone(), cid.clone()))
                .ok_or_else(|| EvalError::MissingScore {
                    case_id: case.id.clone(),
                    candidate_id: cid.clone(),
                })?;
            scores.push(*s);
        }
        if scores.iter().any(|&s| s <= 0.0 || s >= 1.0) {
            log::warn!(
                "{}: scores for case `{}` fall outside (0, 1); min-max normalizing",
                self.model_name,
                case.id
            );
            min_max_normalize(&mut scores);
        }
        Ok(scores)
    }

    /// Ranks every case by this file's scores alone.
    pub fn rank_cases(&self, cases: &[RetrievalCase]) -> Result<Vec<ScoredRanking>, EvalError> {
        cases
            .iter()
            .map(|c| ScoredRanking::new(c.id.clone(), self.case_scores(c)?, c.positive_index))
            .collect()
    }
}

/// Maps values linearly onto `[0, 1]`; a constant slice becomes all `0.5`.
pub fn min_max_normalize(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
    }
}

/// Per-case line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub positive_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub mrr: f64,
    pub cases: Vec<CaseResult>,
}

impl EvalReport {
    pub fn new(model: impl Into<String>, rankings: &[ScoredRanking]) -> Result<Self, EvalError> {
        Ok(Self {
            model: model.into(),
            mrr: mrr(rankings)?,
            cases: rankings
                .iter()
                .map(|r| CaseResult {
                    case_id: r.case_id.clone(),
                    positive_rank: r.positive_rank,
                })
                .collect(),
        })
    }
}

/// Size of the cases ranked perfectly by every model in `models`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub models: Vec<String>,
    pub size: usize,
}

/// Which cases each model ranks perfectly, and how those sets overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfectSets {
    pub total_cases: usize,
    pub sets: BTreeMap<String, BTreeSet<String>>,
    pub sizes: BTreeMap<String, usize>,
    pub intersections: Vec<Intersection>,
    /// Cases ranked perfectly by only that model.
    pub exclusive: BTreeMap<String, usize>,
    pub union: usize,
}

/// Perfect-ranking sets for each model plus every pairwise and three-way
/// intersection. All models must cover the same cases.
pub fn perfect_ranking_sets(
    models: &[(String, Vec<ScoredRanking>)],
) -> Result<PerfectSets, EvalError> {
    let Some((first_name, first)) = models.first() else {
        return Err(EvalError::Empty);
    };
    let cases: BTreeSet<&str> = first.iter().map(|r| r.case_id.as_str()).collect();
    for (name, rankings) in models {
        let other: BTreeSet<&str> = rankings.iter().map(|r| r.case_id.as_str()).collect();
        if other != cases || rankings.len() != first.len() {
            return Err(EvalError::MismatchedCases(format!(
                "`{name}` and `{first_name}`"
            )));
        }
    }
    let sets: BTreeMap<String, BTreeSet<String>> = models
        .iter()
        .map(|(name, rankings)| {
            let set = rankings
                .iter()
                .filter(|r| r.positive_rank == 1)
                .map(|r| r.case_id.clone())
                .collect();
            (name.clone(), set)
        })
        .collect();
    let names: Vec<&String> = models.iter().map(|(n, _)| n).collect();
    let inter = |group: &[&String]| -> Intersection {
        let size = sets[group[0]]
            .iter()
            .filter(|c| group[1..].iter().all(|n| sets[*n].contains(*c)))
            .count();
        Intersection {
            models: group.iter().map(|s| s.to_string()).collect(),
            size,
        }
    };
    let mut intersections = Vec::new();
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            intersections.push(inter(&[names[i], names[j]]));
            for k in j + 1..names.len() {
                intersections.push(inter(&[names[i], names[j], names[k]]));
            }
        }
    }
    let exclusive = names
        .iter()
        .map(|n| {
            let only = sets[*n]
                .iter()
                .filter(|c| names.iter().all(|m| m == n || !sets[*m].contains(*c)))
                .count();
            (n.to_string(), only)
        })
        .collect();
    let union = sets.values().flatten().collect::<BTreeSet<_>>().len();
    Ok(PerfectSets {
        total_cases: cases.len(),
        sizes: sets.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
        sets,
        intersections,
        exclusive,
        union,
    })
}
