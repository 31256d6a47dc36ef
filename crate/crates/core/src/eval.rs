//! Experimental protocols: held-out likelihood comparisons, sign tests,
//! masked-entry imputation, and a planted-block generator.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::dataset::{majority_error, mask_entries, AlignedDataset, Alphabet, MajorityRule, MaskRecord};
use crate::error::{Error, Result};
use crate::mixture::{DirichletPrior, EmConfig};
use crate::model::{assemble_model, build_clust_baseline, build_ind_baseline, Provenance, SegmentationModel};
use crate::scores::{cv_folds, ScoreKind, ScoringConfig, DEFAULT_CV_FOLDS};
use crate::seed::{derive_seed, rng_from, stream};
use crate::segment_dp::{
    build_score_table, greedy_segmentation, optimal_segmentation, Caps, Pruning, ScoreTable, Segment,
    Segmentation,
};

/// A way of turning training rows into a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ind,
    Clust,
    Dp(ScoreKind),
    Greedy(ScoreKind),
}

impl Method {
    /// `name` is one of `ind`, `clust`, `dp`, `greedy`; `kind` is used by the last two.
    pub fn from_parts(name: &str, kind: ScoreKind) -> Result<Self> {
        match name {
            "ind" => Ok(Method::Ind),
            "clust" => Ok(Method::Clust),
            "dp" => Ok(Method::Dp(kind)),
            "greedy" => Ok(Method::Greedy(kind)),
            other => Err(Error::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }

    pub fn score_kind(&self) -> Option<ScoreKind> {
        match self {
            Method::Dp(k) | Method::Greedy(k) => Some(*k),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Ind => f.write_str("ind"),
            Method::Clust => f.write_str("clust"),
            Method::Dp(k) => write!(f, "dp+{k}"),
            Method::Greedy(k) => write!(f, "greedy+{k}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    /// `ind`, `clust`, `dp+<score>` or `greedy+<score>`; a bare `dp` or
    /// `greedy` uses the CV score.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('+') {
            Some((name, kind)) => Method::from_parts(name, kind.parse()?),
            None => Method::from_parts(s, ScoreKind::cv()),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything needed to train any [`Method`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub caps: Caps,
    /// `None` means the default `1/A` emission prior of the data's alphabet.
    pub prior: Option<DirichletPrior>,
    /// EM settings for candidate scoring. Its seed is ignored; `seed` is used.
    pub scoring_em: EmConfig,
    pub final_restarts: usize,
    pub pruning: Option<Pruning>,
    /// Folds of the CV score CLUST uses to pick its cardinality.
    pub clust_folds: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            caps: Caps {
                max_card: 5,
                max_len: 50,
            },
            prior: None,
            scoring_em: EmConfig::default(),
            final_restarts: 25,
            pruning: None,
            clust_folds: DEFAULT_CV_FOLDS,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn prior_for(&self, alphabet: &Alphabet) -> DirichletPrior {
        self.prior
            .unwrap_or_else(|| DirichletPrior::for_alphabet(alphabet.len()))
    }

    pub fn scoring(&self, alphabet: &Alphabet) -> ScoringConfig {
        ScoringConfig {
            em: self.scoring_em.with_seed(self.seed),
            prior: self.prior_for(alphabet),
        }
    }

    pub fn final_em(&self) -> EmConfig {
        EmConfig {
            restarts: self.final_restarts,
            ..self.scoring_em.with_seed(self.seed)
        }
    }

    fn validate(&self) -> Result<()> {
        self.caps.validate()?;
        self.scoring_em.validate()?;
        if self.final_restarts == 0 {
            return Err(Error::InvalidParameter("final restarts must be >= 1".into()));
        }
        if let Some(p) = self.prior {
            p.validate()?;
        }
        Ok(())
    }
}

/// Result of training one method.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: SegmentationModel,
    /// The candidate table, for DP and greedy.
    pub table: Option<ScoreTable>,
    /// Table total of the chosen segmentation, for DP and greedy.
    pub total: Option<f64>,
}

/// Train `method` on all of `ds`. A saved table in `resume` is reused where
/// its metadata matches.
pub fn train(
    ds: &AlignedDataset,
    method: Method,
    cfg: &PipelineConfig,
    resume: Option<&ScoreTable>,
) -> Result<Trained> {
    cfg.validate()?;
    let prior = cfg.prior_for(ds.alphabet());
    let scoring = cfg.scoring(ds.alphabet());
    match method {
        Method::Ind => {
            let mut model = build_ind_baseline(ds, &prior)?;
            model.provenance.seed = cfg.seed;
            Ok(Trained {
                model,
                table: None,
                total: None,
            })
        }
        Method::Clust => {
            let model = build_clust_baseline(ds, cfg.caps.max_card, cfg.clust_folds, &scoring, &cfg.final_em())?;
            Ok(Trained {
                model,
                table: None,
                total: None,
            })
        }
        Method::Dp(kind) | Method::Greedy(kind) => {
            let table = build_score_table(ds, kind, cfg.caps, &scoring, cfg.pruning, resume)?;
            let (seg, total) = match method {
                Method::Dp(_) => optimal_segmentation(&table)?,
                _ => greedy_segmentation(&table)?,
            };
            let mut provenance = Provenance::new(method.to_string(), cfg.seed, prior);
            provenance.score_kind = Some(kind.to_string());
            provenance.caps = Some(cfg.caps);
            let model = assemble_model(ds, &seg, &prior, &cfg.final_em(), provenance)?;
            Ok(Trained {
                model,
                table: Some(table),
                total: Some(total),
            })
        }
    }
}

/// Two-sided exact binomial sign test of `wins` against `losses` under
/// p = 1/2, capped at 1. Ties must already be dropped.
pub fn sign_test(wins: usize, losses: usize) -> Result<f64> {
    let n = wins + losses;
    if n == 0 {
        return Err(Error::AllTies);
    }
    let ln_half_n = n as f64 * 0.5f64.ln();
    let tail: f64 = (0..=wins.min(losses) as u64)
        .map(|i| (ln_binomial(n as u64, i) + ln_half_n).exp())
        .sum();
    Ok((2.0 * tail).min(1.0))
}

/// Sign test on paired values: a win is `a > b`, exact ties are dropped.
pub fn sign_test_pairs(pairs: &[(f64, f64)]) -> Result<f64> {
    let (w, l, _) = count_wins(pairs.iter().copied());
    sign_test(w, l)
}

fn count_wins(pairs: impl Iterator<Item = (f64, f64)>) -> (usize, usize, usize) {
    let (mut w, mut l, mut t) = (0, 0, 0);
    for (a, b) in pairs {
        if a > b {
            w += 1;
        } else if b > a {
            l += 1;
        } else {
            t += 1;
        }
    }
    (w, l, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub a: Method,
    pub b: Method,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    /// `None` when every sequence tied.
    pub p_value: Option<f64>,
}

/// Per-sequence held-out log-likelihoods of every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub folds: usize,
    pub seed: u64,
    /// Always contains [`Method::Ind`], first.
    pub methods: Vec<Method>,
    /// Fold of every row.
    pub fold_of_row: Vec<usize>,
    /// `test_loglik[m][r]`: log-likelihood of row `r` under method `m`
    /// trained without `r`'s fold.
    pub test_loglik: Vec<Vec<f64>>,
    /// `sum_r test_loglik[m][r] - test_loglik[IND][r]`.
    pub relative_totals: Vec<f64>,
    pub pairwise: Vec<PairwiseComparison>,
}

impl HoldoutReport {
    pub fn method_index(&self, m: Method) -> Option<usize> {
        self.methods.iter().position(|x| *x == m)
    }

    pub fn relative_total(&self, m: Method) -> Option<f64> {
        self.method_index(m).map(|i| self.relative_totals[i])
    }

    pub fn pair(&self, a: Method, b: Method) -> Option<&PairwiseComparison> {
        self.pairwise.iter().find(|p| p.a == a && p.b == b)
    }

    /// One row per sequence: index, fold, then one column per method.
    pub fn to_tsv(&self, labels: Option<&[String]>) -> String {
        let mut out = String::from("row\tlabel\tfold");
        for m in &self.methods {
            out.push('\t');
            out.push_str(&m.to_string());
        }
        out.push('\n');
        for (r, fold) in self.fold_of_row.iter().enumerate() {
            let label = labels.map_or_else(|| (r + 1).to_string(), |l| l[r].clone());
            out.push_str(&format!("{}\t{}\t{}", r + 1, label, fold + 1));
            for m in 0..self.methods.len() {
                out.push_str(&format!("\t{}", self.test_loglik[m][r]));
            }
            out.push('\n');
        }
        out
    }

    /// Long format: `method, metric, key, value`.
    pub fn long_table(&self) -> String {
        let mut out = String::from("method\tmetric\tkey\tvalue\n");
        for (m, method) in self.methods.iter().enumerate() {
            for f in 0..self.folds {
                let v: f64 = self
                    .fold_of_row
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| x == f)
                    .map(|(r, _)| self.test_loglik[m][r] - self.test_loglik[0][r])
                    .sum();
                out.push_str(&format!("{method}\trelative_loglik\tfold{}\t{v}\n", f + 1));
            }
            out.push_str(&format!(
                "{method}\trelative_loglik\ttotal\t{}\n",
                self.relative_totals[m]
            ));
        }
        for p in &self.pairwise {
            let key = format!("{}_vs_{}", p.a, p.b);
            out.push_str(&format!("{}\twins\t{key}\t{}\n", p.a, p.wins_a));
            out.push_str(&format!("{}\twins\t{key}\t{}\n", p.b, p.wins_b));
            if let Some(pv) = p.p_value {
                out.push_str(&format!("{}\tsign_test_p\t{key}\t{pv}\n", p.a));
            }
        }
        out
    }
}

/// Called once per fold with the training and test row indices, before
/// any method sees the fold.
pub type FoldObserver<'a> = &'a (dyn Fn(usize, &[usize], &[usize]) + Sync);

/// k-fold held-out comparison of `methods`. IND is always evaluated and
/// serves as the reference.
pub fn kfold_holdout_eval(
    ds: &AlignedDataset,
    methods: &[Method],
    folds: usize,
    cfg: &PipelineConfig,
    observer: Option<FoldObserver<'_>>,
) -> Result<HoldoutReport> {
    let mut all = vec![Method::Ind];
    for m in methods {
        if !all.contains(m) {
            all.push(*m);
        }
    }
    let n = ds.n_rows();
    let fold_of_row = cv_folds(n, folds, derive_seed(&[stream::HOLDOUT, cfg.seed]))?;

    let per_fold: Vec<Vec<(usize, Vec<f64>)>> = (0..folds)
        .into_par_iter()
        .map(|f| -> Result<_> {
            let (test, train_rows): (Vec<usize>, Vec<usize>) = (0..n).partition(|&r| fold_of_row[r] == f);
            if train_rows.is_empty() || test.is_empty() {
                return Err(Error::DegenerateFold {
                    fold: f + 1,
                    start: 1,
                    end: ds.n_cols(),
                });
            }
            if let Some(obs) = observer {
                obs(f, &train_rows, &test);
            }
            let training = ds.select_rows(&train_rows);
            let fold_cfg = cfg.with_seed(derive_seed(&[stream::HOLDOUT, cfg.seed, f as u64]));
            let models = all
                .iter()
                .map(|&m| train(&training, m, &fold_cfg, None).map(|t| t.model))
                .collect::<Result<Vec<_>>>()?;
            Ok(test
                .iter()
                .map(|&r| (r, models.iter().map(|m| m.model_loglik(ds.row(r))).collect()))
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut test_loglik = vec![vec![0.0; n]; all.len()];
    for fold in per_fold {
        for (r, lls) in fold {
            for (m, ll) in lls.into_iter().enumerate() {
                test_loglik[m][r] = ll;
            }
        }
    }
    let relative_totals = test_loglik
        .iter()
        .map(|ll| ll.iter().zip(&test_loglik[0]).map(|(a, b)| a - b).sum())
        .collect();
    let mut pairwise = Vec::new();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            let pairs = test_loglik[j].iter().copied().zip(test_loglik[i].iter().copied());
            let (wins_a, wins_b, ties) = count_wins(pairs);
            pairwise.push(PairwiseComparison {
                a: all[j],
                b: all[i],
                wins_a,
                wins_b,
                ties,
                p_value: sign_test(wins_a, wins_b).ok(),
            });
        }
    }
    Ok(HoldoutReport {
        folds,
        seed: cfg.seed,
        methods: all,
        fold_of_row,
        test_loglik,
        relative_totals,
        pairwise,
    })
}

/// Fraction of masked cells whose imputed symbol differs from the original.
pub fn imputation_error(model: &SegmentationModel, masked: &AlignedDataset, record: &MaskRecord) -> Option<f64> {
    if record.is_empty() {
        return None;
    }
    let mut wrong = 0usize;
    let mut cached: Option<(usize, Vec<u16>)> = None;
    for cell in &record.cells {
        if cached.as_ref().is_none_or(|(r, _)| *r != cell.row) {
            cached = Some((cell.row, model.impute_missing(masked.row(cell.row)).completed));
        }
        let completed = &cached.as_ref().expect("filled above").1;
        if completed[cell.col] != cell.original {
            wrong += 1;
        }
    }
    Some(wrong as f64 / record.len() as f64)
}

/// Mean and sample standard deviation; `None` when undefined.
pub fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub rate: f64,
    pub masked_cells: Vec<usize>,
    /// One entry per repeat; `None` when nothing was masked.
    pub method_errors: Vec<Option<f64>>,
    pub majority_errors: Vec<Option<f64>>,
    pub method_mean: Option<f64>,
    pub method_sd: Option<f64>,
    pub majority_mean: Option<f64>,
    pub majority_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingReport {
    pub method: Method,
    pub repeats: usize,
    pub seed: u64,
    pub rates: Vec<RateSummary>,
}

impl MissingReport {
    /// One row per rate with means and standard deviations.
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut out = String::from("rate\tmethod_mean\tmethod_sd\tmajority_mean\tmajority_sd\n");
        for r in &self.rates {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.rate,
                fmt(r.method_mean),
                fmt(r.method_sd),
                fmt(r.majority_mean),
                fmt(r.majority_sd)
            ));
        }
        out
    }

    /// Long format: `method, metric, key, value`, one line per repeat.
    pub fn long_table(&self) -> String {
        let mut out = String::from("method\tmetric\tkey\tvalue\n");
        let method = self.method.to_string();
        for r in &self.rates {
            for (i, (m, j)) in r.method_errors.iter().zip(&r.majority_errors).enumerate() {
                let key = format!("rate={};repeat={}", r.rate, i + 1);
                if let Some(v) = m {
                    out.push_str(&format!("{method}\timputation_error\t{key}\t{v}\n"));
                }
                if let Some(v) = j {
                    out.push_str(&format!("majority\timputation_error\t{key}\t{v}\n"));
                }
            }
        }
        out
    }
}

/// For every rate and repeat: mask observed cells, train `method` on the
/// masked data, impute, and compare against per-column majority voting.
pub fn missing_value_experiment(
    ds: &AlignedDataset,
    rates: &[f64],
    repeats: usize,
    method: Method,
    cfg: &PipelineConfig,
) -> Result<MissingReport> {
    if repeats == 0 {
        return Err(Error::InvalidParameter("repeats must be >= 1".into()));
    }
    for &r in rates {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::InvalidParameter(format!("missing rate {r} outside (0, 1)")));
        }
    }
    let cells: Vec<(usize, usize)> = (0..rates.len())
        .flat_map(|i| (0..repeats).map(move |j| (i, j)))
        .collect();
    let results: Vec<(usize, Option<f64>, Option<f64>)> = cells
        .par_iter()
        .map(|&(i, j)| -> Result<_> {
            let seed = derive_seed(&[stream::EXPERIMENT, cfg.seed, rates[i].to_bits(), j as u64]);
            let (masked, record) = mask_entries(ds, rates[i], seed)?;
            if record.is_empty() {
                return Ok((0, None, None));
            }
            let model = train(&masked, method, &cfg.with_seed(seed), None)?.model;
            let err = imputation_error(&model, &masked, &record);
            let maj = majority_error(&masked, &record, MajorityRule::PerColumn)?;
            Ok((record.len(), err, maj))
        })
        .collect::<Result<_>>()?;

    let summaries = rates
        .iter()
        .enumerate()
        .map(|(i, &rate)| {
            let chunk = &results[i * repeats..(i + 1) * repeats];
            let method_errors: Vec<Option<f64>> = chunk.iter().map(|c| c.1).collect();
            let majority_errors: Vec<Option<f64>> = chunk.iter().map(|c| c.2).collect();
            let m: Vec<f64> = method_errors.iter().flatten().copied().collect();
            let j: Vec<f64> = majority_errors.iter().flatten().copied().collect();
            let (method_mean, method_sd) = mean_sd(&m);
            let (majority_mean, majority_sd) = mean_sd(&j);
            RateSummary {
                rate,
                masked_cells: chunk.iter().map(|c| c.0).collect(),
                method_errors,
                majority_errors,
                method_mean,
                method_sd,
                majority_mean,
                majority_sd,
            }
        })
        .collect();
    Ok(MissingReport {
        method,
        repeats,
        seed: cfg.seed,
        rates: summaries,
    })
}

/// Settings of the planted-block generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub n_rows: usize,
    pub n_cols: usize,
    pub alphabet_size: usize,
    pub block_length: usize,
    pub types_per_block: usize,
    /// Probability of replacing a copied symbol with a different one.
    pub noise: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

impl PlantedConfig {
    fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 || self.block_length == 0 || self.types_per_block == 0 {
            return Err(Error::InvalidParameter(
                "rows, columns, block length and types must be positive".into(),
            ));
        }
        if self.alphabet_size < 2 {
            return Err(Error::AlphabetTooSmall(self.alphabet_size));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::InvalidParameter(format!("noise {} outside [0, 0.5)", self.noise)));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::InvalidParameter(format!(
                "missing rate {} outside [0, 1)",
                self.missing_rate
            )));
        }
        Ok(())
    }
}

/// Rows made of per-block archetype copies with symbol noise and random
/// missing entries, plus the block structure as ground truth. Archetypes
/// within a block are distinct whenever the block is long enough to allow it.
pub fn generate_planted_blocks(cfg: &PlantedConfig) -> Result<(AlignedDataset, Segmentation)> {
    cfg.validate()?;
    let a = cfg.alphabet_size;
    let mut rng = rng_from(&[stream::PLANTED, cfg.seed]);
    let mut truth = Vec::new();
    let mut archetypes: Vec<Vec<Vec<u16>>> = Vec::new();
    let mut start = 1;
    while start <= cfg.n_cols {
        let len = cfg.block_length.min(cfg.n_cols - start + 1);
        let possible = (a as u128).saturating_pow(len as u32);
        let distinct = (cfg.types_per_block as u128) <= possible;
        let mut types: Vec<Vec<u16>> = Vec::with_capacity(cfg.types_per_block);
        while types.len() < cfg.types_per_block {
            let t: Vec<u16> = (0..len).map(|_| rng.random_range(0..a) as u16).collect();
            if !distinct || !types.contains(&t) {
                types.push(t);
            }
        }
        truth.push(Segment::new(start, len, cfg.types_per_block));
        archetypes.push(types);
        start += len;
    }

    let mut rows = Vec::with_capacity(cfg.n_rows);
    for _ in 0..cfg.n_rows {
        let mut row = Vec::with_capacity(cfg.n_cols);
        for types in &archetypes {
            let t = &types[rng.random_range(0..types.len())];
            for &v in t {
                let mut sym = v;
                if rng.random::<f64>() < cfg.noise {
                    let shift = rng.random_range(1..a) as u16;
                    sym = (v + shift) % a as u16;
                }
                row.push(sym);
            }
        }
        let row = row
            .into_iter()
            .map(|v| (rng.random::<f64>() >= cfg.missing_rate).then_some(v))
            .collect();
        rows.push(row);
    }
    let ds = AlignedDataset::from_rows(Alphabet::letters(a)?, rows)?;
    Ok((ds, Segmentation::new(truth)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of the internal boundaries of `found` against
/// `truth`. An empty set scores 1 for precision (nothing wrong was claimed)
/// and for recall (nothing was there to find).
pub fn boundary_scores(truth: &Segmentation, found: &Segmentation) -> Result<BoundaryScores> {
    if truth.n_cols() != found.n_cols() {
        return Err(Error::Mismatch(format!(
            "segmentations cover {} and {} positions",
            truth.n_cols(),
            found.n_cols()
        )));
    }
    let t = truth.boundaries();
    let f = found.boundaries();
    let hit = t.intersection(&f).count() as f64;
    let precision = if f.is_empty() { 1.0 } else { hit / f.len() as f64 };
    let recall = if t.is_empty() { 1.0 } else { hit / t.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BoundaryScores { precision, recall, f1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::sync::Mutex;

    fn small_cfg(seed: u64) -> PipelineConfig {
        PipelineConfig {
            caps: Caps {
                max_card: 3,
                max_len: 6,
            },
            scoring_em: EmConfig {
                restarts: 3,
                ..EmConfig::default()
            },
            final_restarts: 5,
            seed,
            ..PipelineConfig::default()
        }
    }

    fn planted(seed: u64) -> (AlignedDataset, Segmentation) {
        generate_planted_blocks(&PlantedConfig {
            n_rows: 30,
            n_cols: 12,
            alphabet_size: 2,
            block_length: 4,
            types_per_block: 2,
            noise: 0.02,
            missing_rate: 0.0,
            seed,
        })
        .unwrap()
    }

    /// Upper tail of Binomial(n, 1/2) by direct summation of pmf terms.
    fn binom_two_sided(w: u64, l: u64) -> f64 {
        let n = w + l;
        let k = w.min(l);
        let mut total = 0.0;
        let mut coef = 1.0f64; // C(n, 0)
        for i in 0..=k {
            if i > 0 {
                coef = coef * (n - i + 1) as f64 / i as f64;
            }
            total += coef;
        }
        (2.0 * total / 2f64.powi(n as i32)).min(1.0)
    }

    #[test]
    fn sign_test_cases() {
        assert!((sign_test(10, 0).unwrap() - 2.0 * 0.5f64.powi(10)).abs() < 1e-12);
        assert_eq!(sign_test(5, 5).unwrap(), 1.0);
        let p = sign_test(17, 3).unwrap();
        assert!((p - binom_two_sided(17, 3)).abs() < 1e-12);
        assert!((p - 0.0026).abs() < 1e-4);
        assert_eq!(sign_test(0, 0), Err(Error::AllTies));
        assert_eq!(sign_test(3, 17).unwrap(), p);
        assert_eq!(sign_test_pairs(&[(1.0, 1.0)]), Err(Error::AllTies));
        assert_eq!(sign_test_pairs(&[(2.0, 1.0), (1.0, 1.0)]).unwrap(), 1.0);
    }

    #[test]
    fn method_names_roundtrip() {
        for m in [
            Method::Ind,
            Method::Clust,
            Method::Dp(ScoreKind::cv()),
            Method::Greedy(ScoreKind::Bic),
            Method::Dp(ScoreKind::Cv { folds: 3 }),
        ] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
        }
        assert_eq!("dp".parse::<Method>().unwrap(), Method::Dp(ScoreKind::cv()));
        assert!("tree".parse::<Method>().is_err());
    }

    #[test]
    fn generator_identical_rows_without_noise() {
        let (ds, truth) = generate_planted_blocks(&PlantedConfig {
            n_rows: 10,
            n_cols: 9,
            alphabet_size: 3,
            block_length: 4,
            types_per_block: 1,
            noise: 0.0,
            missing_rate: 0.0,
            seed: 1,
        })
        .unwrap();
        assert!(ds.rows().all(|r| r == ds.row(0)));
        let lens: Vec<usize> = truth.segments().iter().map(|s| s.length).collect();
        assert_eq!(lens, vec![4, 4, 1]);
    }

    #[test]
    fn generator_two_patterns_per_block() {
        let (ds, truth) = generate_planted_blocks(&PlantedConfig {
            n_rows: 60,
            n_cols: 12,
            alphabet_size: 2,
            block_length: 4,
            types_per_block: 2,
            noise: 0.0,
            missing_rate: 0.0,
            seed: 5,
        })
        .unwrap();
        for seg in truth.segments() {
            let patterns: BTreeSet<Vec<Option<u16>>> =
                ds.rows().map(|r| r[seg.columns()].to_vec()).collect();
            assert_eq!(patterns.len(), 2);
        }
    }

    #[test]
    fn generator_flip_rate_matches_noise() {
        let eps = 0.1;
        let (ds, _) = generate_planted_blocks(&PlantedConfig {
            n_rows: 4000,
            n_cols: 5,
            alphabet_size: 4,
            block_length: 5,
            types_per_block: 1,
            noise: eps,
            missing_rate: 0.0,
            seed: 9,
        })
        .unwrap();
        // with one type, the archetype is the column majority
        let mut flips = 0;
        for c in 0..5 {
            let major = crate::dataset::column_majority(&ds, c).unwrap();
            flips += ds.column(c).filter(|v| *v != Some(major)).count();
        }
        let rate = flips as f64 / (4000.0 * 5.0);
        let se = (eps * (1.0 - eps) / 20000.0).sqrt();
        assert!((rate - eps).abs() < 4.0 * se, "{rate}");
    }

    #[test]
    fn generator_missing_rate_and_determinism() {
        let cfg = PlantedConfig {
            n_rows: 500,
            n_cols: 20,
            alphabet_size: 2,
            block_length: 5,
            types_per_block: 3,
            noise: 0.05,
            missing_rate: 0.2,
            seed: 2,
        };
        let (a, _) = generate_planted_blocks(&cfg).unwrap();
        let (b, _) = generate_planted_blocks(&cfg).unwrap();
        assert_eq!(a, b);
        let frac = a.missing_count() as f64 / 10000.0;
        assert!((frac - 0.2).abs() < 4.0 * (0.2 * 0.8 / 10000.0f64).sqrt());
        assert!(generate_planted_blocks(&PlantedConfig { noise: 0.5, ..cfg }).is_err());
    }

    #[test]
    fn boundary_metric_cases() {
        let truth = Segmentation::new(vec![Segment::new(1, 3, 2), Segment::new(4, 3, 2), Segment::new(7, 2, 2)])
            .unwrap();
        let same = boundary_scores(&truth, &truth).unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let found = Segmentation::new(vec![Segment::new(1, 3, 2), Segment::new(4, 5, 2)]).unwrap();
        let s = boundary_scores(&truth, &found).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        let none = boundary_scores(&truth, &Segmentation::new(vec![Segment::new(1, 8, 2)]).unwrap()).unwrap();
        assert_eq!(none.f1, 0.0);
        assert!(boundary_scores(&truth, &Segmentation::singletons(7)).is_err());
    }

    #[test]
    fn mean_sd_cases() {
        assert_eq!(mean_sd(&[]), (None, None));
        assert_eq!(mean_sd(&[0.5]), (Some(0.5), None));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, Some(2.0));
        assert!((s.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ind_alone_is_zero_relative() {
        let (ds, _) = planted(3);
        let r = kfold_holdout_eval(&ds, &[Method::Ind], 5, &small_cfg(1), None).unwrap();
        assert_eq!(r.methods, vec![Method::Ind]);
        assert_eq!(r.relative_totals, vec![0.0]);
        assert!(r.pairwise.is_empty());
    }

    #[test]
    fn holdout_never_trains_on_test_rows() {
        let (ds, _) = planted(4);
        let seen = Mutex::new(Vec::new());
        let observer = |f: usize, train: &[usize], test: &[usize]| {
            let t: BTreeSet<usize> = train.iter().copied().collect();
            assert!(test.iter().all(|r| !t.contains(r)));
            assert_eq!(train.len() + test.len(), 30);
            seen.lock().unwrap().push((f, test.to_vec()));
        };
        let r = kfold_holdout_eval(&ds, &[Method::Ind, Method::Dp(ScoreKind::Bic)], 3, &small_cfg(2), Some(&observer))
            .unwrap();
        let mut seen = seen.into_inner().unwrap();
        seen.sort();
        assert_eq!(seen.len(), 3);
        let mut all: Vec<usize> = seen.iter().flat_map(|(_, t)| t.clone()).collect();
        all.sort();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        for (f, test) in &seen {
            assert!(test.iter().all(|&row| r.fold_of_row[row] == *f));
        }
    }

    #[test]
    fn holdout_favours_structure_on_planted_data() {
        let (ds, _) = planted(6);
        let dp = Method::Dp(ScoreKind::Bic);
        let r = kfold_holdout_eval(&ds, &[dp, Method::Greedy(ScoreKind::Bic)], 5, &small_cfg(3), None).unwrap();
        assert!(r.relative_total(dp).unwrap() > 0.0);
        let p = r.pair(dp, Method::Ind).unwrap();
        assert_eq!(p.wins_a + p.wins_b + p.ties, 30);
        assert!(r.to_tsv(None).lines().count() == 31);
        assert!(r.long_table().contains("dp+bic\trelative_loglik\ttotal"));
        let again = kfold_holdout_eval(&ds, &[dp, Method::Greedy(ScoreKind::Bic)], 5, &small_cfg(3), None).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn holdout_rejects_too_many_folds() {
        let (ds, _) = planted(1);
        assert!(kfold_holdout_eval(&ds, &[Method::Ind], 31, &small_cfg(0), None).is_err());
    }

    #[test]
    fn missing_experiment_shape() {
        let (ds, _) = planted(8);
        let rep = missing_value_experiment(&ds, &[0.001, 0.1], 3, Method::Dp(ScoreKind::Bic), &small_cfg(4)).unwrap();
        // 0.001 of 360 cells rounds to zero masked cells
        let empty = &rep.rates[0];
        assert_eq!(empty.masked_cells, vec![0, 0, 0]);
        assert_eq!(empty.method_mean, None);
        assert_eq!(empty.majority_mean, None);
        let full = &rep.rates[1];
        assert_eq!(full.method_errors.len(), 3);
        assert!(full.method_errors.iter().all(|e| e.is_some_and(|v| (0.0..=1.0).contains(&v))));
        assert!(full.method_sd.is_some());
        assert_eq!(rep.to_tsv().lines().count(), 3);
        assert!(rep.to_tsv().contains("NA"));
        assert_eq!(rep.long_table().lines().count(), 1 + 6);
        assert!(missing_value_experiment(&ds, &[1.0], 1, Method::Ind, &small_cfg(0)).is_err());
    }

    #[test]
    fn majority_error_on_planted_data_matches_count_oracle() {
        let (ds, _) = generate_planted_blocks(&PlantedConfig {
            n_rows: 300,
            n_cols: 10,
            alphabet_size: 2,
            block_length: 5,
            types_per_block: 3,
            noise: 0.0,
            missing_rate: 0.0,
            seed: 12,
        })
        .unwrap();
        let (masked, record) = mask_entries(&ds, 0.1, 3).unwrap();
        let err = majority_error(&masked, &record, MajorityRule::PerColumn).unwrap().unwrap();
        // oracle: count masked cells that disagree with the majority of the
        // observed cells in their column
        let mut wrong = 0;
        for cell in &record.cells {
            let mut counts = [0usize; 2];
            for v in masked.column(cell.col).flatten() {
                counts[v as usize] += 1;
            }
            let major = if counts[1] > counts[0] { 1 } else { 0 };
            if major != cell.original {
                wrong += 1;
            }
        }
        assert!((err - wrong as f64 / record.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn imputation_with_structure_beats_majority() {
        let (ds, _) = generate_planted_blocks(&PlantedConfig {
            n_rows: 60,
            n_cols: 8,
            alphabet_size: 2,
            block_length: 4,
            types_per_block: 3,
            noise: 0.0,
            missing_rate: 0.0,
            seed: 21,
        })
        .unwrap();
        let rep = missing_value_experiment(&ds, &[0.1], 2, Method::Dp(ScoreKind::cv()), &small_cfg(5)).unwrap();
        let r = &rep.rates[0];
        assert!(r.method_mean.unwrap() < r.majority_mean.unwrap(), "{r:?}");
    }

    #[test]
    fn train_reports_tables_only_for_segmenters() {
        let (ds, _) = planted(2);
        let cfg = small_cfg(9);
        let ind = train(&ds, Method::Ind, &cfg, None).unwrap();
        assert!(ind.table.is_none());
        assert_eq!(ind.model.segments().len(), 12);
        let dp = train(&ds, Method::Dp(ScoreKind::Bic), &cfg, None).unwrap();
        let greedy = train(&ds, Method::Greedy(ScoreKind::Bic), &cfg, None).unwrap();
        assert!(dp.total.unwrap() >= greedy.total.unwrap());
        let table = dp.table.as_ref().unwrap();
        assert_eq!(table.total(&dp.model.segmentation()).unwrap(), dp.total.unwrap());
        let resumed = train(&ds, Method::Dp(ScoreKind::Bic), &cfg, Some(table)).unwrap();
        assert_eq!(resumed.model.to_json().unwrap(), dp.model.to_json().unwrap());
    }
}
