//! Segment scores: BIC/MDL, Cheeseman-Stutz and cross-validation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::AlignedDataset;
use crate::error::{Error, Result};
use crate::mixture::{
    complete_data_log_marginal, completed_stats, fit_em_on_rows, fit_span, fold_seed,
    DirichletPrior, EmConfig, Objective, SpanData,
};
use crate::seed::{rng_from, stream};

pub const DEFAULT_CV_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScoreKind {
    Bic,
    Cs,
    Cv { folds: usize },
}

impl ScoreKind {
    pub fn cv() -> Self {
        ScoreKind::Cv {
            folds: DEFAULT_CV_FOLDS,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoreKind::Bic => "bic",
            ScoreKind::Cs => "cs",
            ScoreKind::Cv { .. } => "cv",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreKind::Cv { folds } => write!(f, "cv{folds}"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    /// `bic`, `cs`, `cv` (default folds) or `cv<k>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bic" => Ok(ScoreKind::Bic),
            "cs" => Ok(ScoreKind::Cs),
            "cv" => Ok(ScoreKind::cv()),
            _ => s
                .strip_prefix("cv")
                .and_then(|k| k.parse().ok())
                .map(|folds| ScoreKind::Cv { folds })
                .ok_or_else(|| Error::InvalidParameter(format!("unknown score kind {s:?}"))),
        }
    }
}

/// EM settings and prior shared by every candidate. `em.seed` is the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub em: EmConfig,
    pub prior: DirichletPrior,
}

impl ScoringConfig {
    pub fn new(alphabet_size: usize, seed: u64) -> Self {
        Self {
            em: EmConfig {
                seed,
                ..EmConfig::default()
            },
            prior: DirichletPrior::for_alphabet(alphabet_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreDiagnostics {
    /// EM iterations of the selected restart, summed over folds for CV.
    pub iterations: usize,
    /// Held-out log-likelihood of each fold (CV only).
    pub fold_values: Vec<f64>,
}

/// Score of one candidate `(start, length, cardinality)`; `start` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub start: usize,
    pub length: usize,
    pub cardinality: usize,
    pub value: f64,
    pub diagnostics: ScoreDiagnostics,
}

/// Free parameters of a segment model. A length-1 segment is a single
/// multinomial with `A - 1` parameters.
pub fn dimension(c: usize, l: usize, alphabet_size: usize) -> usize {
    if l == 1 {
        alphabet_size - 1
    } else {
        (c - 1) + (alphabet_size - 1) * c * l
    }
}

struct Candidate {
    start0: usize,
    length: usize,
    card: usize,
}

fn candidate(ds: &AlignedDataset, s: usize, l: usize, c: usize) -> Result<Candidate> {
    if s == 0 || l == 0 || s + l - 1 > ds.n_cols() {
        return Err(Error::InvalidParameter(format!(
            "candidate (s={s}, l={l}) outside 1..{}",
            ds.n_cols()
        )));
    }
    if l > 1 && c == 0 {
        return Err(Error::InvalidParameter("cardinality must be >= 1".into()));
    }
    Ok(Candidate {
        start0: s - 1,
        length: l,
        // a single position has no hidden parent
        card: if l == 1 { 1 } else { c },
    })
}

fn all_rows(ds: &AlignedDataset) -> Vec<usize> {
    (0..ds.n_rows()).collect()
}

fn finish(cand: &Candidate, value: f64, diagnostics: ScoreDiagnostics) -> SegScore {
    SegScore {
        start: cand.start0 + 1,
        length: cand.length,
        cardinality: cand.card,
        value,
        diagnostics,
    }
}

/// Dispatch on `kind`.
pub fn seg_score(
    ds: &AlignedDataset,
    s: usize,
    l: usize,
    c: usize,
    kind: ScoreKind,
    cfg: &ScoringConfig,
) -> Result<SegScore> {
    match kind {
        ScoreKind::Bic => seg_score_bic(ds, s, l, c, cfg),
        ScoreKind::Cs => seg_score_cs(ds, s, l, c, cfg),
        ScoreKind::Cv { folds } => seg_score_cv(ds, s, l, c, folds, cfg),
    }
}

/// ML log-likelihood minus `d log N / 2`.
pub fn seg_score_bic(
    ds: &AlignedDataset,
    s: usize,
    l: usize,
    c: usize,
    cfg: &ScoringConfig,
) -> Result<SegScore> {
    let cand = candidate(ds, s, l, c)?;
    let em = cfg.em.with_objective(Objective::Ml);
    let rows = all_rows(ds);
    let span = cand.start0..cand.start0 + cand.length;
    let mix = fit_em_on_rows(ds, &rows, span, cand.card, &cfg.prior, &em)?;
    let d = dimension(cand.card, cand.length, ds.alphabet().len()) as f64;
    let value = mix.train_loglik() - d * (ds.n_rows() as f64).ln() / 2.0;
    Ok(finish(
        &cand,
        value,
        ScoreDiagnostics {
            iterations: mix.diagnostics().iterations,
            fold_values: Vec::new(),
        },
    ))
}

/// Cheeseman-Stutz: exact marginal of the data completed with expected
/// hidden-state counts, corrected by `log P(x|Θ̃) - log P(x, h'|Θ̃)` at the
/// MAP fit.
///
/// The hidden variable's family uses the configured weight concentration, or
/// a uniform Dirichlet(1) when none is set.
pub fn seg_score_cs(
    ds: &AlignedDataset,
    s: usize,
    l: usize,
    c: usize,
    cfg: &ScoringConfig,
) -> Result<SegScore> {
    let cand = candidate(ds, s, l, c)?;
    let em = cfg.em.with_objective(Objective::Map);
    let rows = all_rows(ds);
    let data = SpanData::new(ds, cand.start0..cand.start0 + cand.length, &rows);
    let (mix, _) = fit_span(&data, cand.card, &cfg.prior, &em, false)?;
    let stats = completed_stats(&mix, &data);

    let a = ds.alphabet().len();
    let beta = if cfg.prior.weight_concentration > 0.0 {
        cfg.prior.weight_concentration
    } else {
        1.0
    };
    let hidden_alpha = vec![beta; cand.card];
    let emission_alpha = vec![cfg.prior.emission_concentration; a];
    let families = std::iter::once((stats.hidden_counts.as_slice(), hidden_alpha.as_slice()))
        .chain(
            stats
                .emission_counts
                .chunks_exact(a)
                .map(|n| (n, emission_alpha.as_slice())),
        );
    let marginal = complete_data_log_marginal(families)?;
    let value = marginal + stats.observed_loglik - stats.completed_loglik;
    Ok(finish(
        &cand,
        value,
        ScoreDiagnostics {
            iterations: mix.diagnostics().iterations,
            fold_values: Vec::new(),
        },
    ))
}

/// Fold label of every row: a seeded shuffle dealt round-robin into `k` folds.
pub fn cv_folds(n_rows: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || k > n_rows {
        return Err(Error::InvalidParameter(format!(
            "fold count {k} must lie in 2..={n_rows}"
        )));
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    order.shuffle(&mut rng_from(&[stream::CV_FOLDS, seed]));
    let mut folds = vec![0; n_rows];
    for (pos, row) in order.into_iter().enumerate() {
        folds[row] = pos % k;
    }
    Ok(folds)
}

/// Sum over folds of the held-out log-likelihood under the MAP fit trained
/// on the remaining rows.
pub fn seg_score_cv(
    ds: &AlignedDataset,
    s: usize,
    l: usize,
    c: usize,
    k: usize,
    cfg: &ScoringConfig,
) -> Result<SegScore> {
    let folds = cv_folds(ds.n_rows(), k, cfg.em.seed)?;
    seg_score_cv_with_folds(ds, s, l, c, &folds, k, cfg)
}

pub(crate) fn seg_score_cv_with_folds(
    ds: &AlignedDataset,
    s: usize,
    l: usize,
    c: usize,
    folds: &[usize],
    k: usize,
    cfg: &ScoringConfig,
) -> Result<SegScore> {
    let cand = candidate(ds, s, l, c)?;
    let span = cand.start0..cand.start0 + cand.length;
    let mut fold_values = Vec::with_capacity(k);
    let mut iterations = 0;
    for f in 0..k {
        let (train, test): (Vec<usize>, Vec<usize>) =
            (0..ds.n_rows()).partition(|&r| folds[r] != f);
        let data = SpanData::new(ds, span.clone(), &train);
        if data.observed() == 0 {
            return Err(Error::DegenerateFold {
                fold: f + 1,
                start: cand.start0 + 1,
                end: span.end,
            });
        }
        let em = cfg
            .em
            .with_objective(Objective::Map)
            .with_seed(fold_seed(cfg.em.seed, f));
        let (mix, _) = fit_span(&data, cand.card, &cfg.prior, &em, false)?;
        iterations += mix.diagnostics().iterations;
        let held_out: f64 = test
            .iter()
            .map(|&r| mix.loglik_sequence(&ds.row(r)[span.clone()]))
            .sum();
        fold_values.push(held_out);
    }
    let value = fold_values.iter().sum();
    Ok(finish(
        &cand,
        value,
        ScoreDiagnostics {
            iterations,
            fold_values,
        },
    ))
}
