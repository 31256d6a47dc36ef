//! Multinomial mixture models over a contiguous span of positions.
//!
//! A segment of length `l` is modelled as `c` hidden states, each with its own
//! independent multinomial per position. Missing entries are marginalized out
//! everywhere: in EM, in likelihoods and in posteriors.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dataset::{AlignedDataset, Entry};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from, stream};

/// Smallest mixture weight kept after an M-step.
const WEIGHT_FLOOR: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletPrior {
    /// Pseudocount on every emission parameter.
    pub emission_concentration: f64,
    /// Pseudocount on every mixture weight; zero means none.
    pub weight_concentration: f64,
}

impl DirichletPrior {
    /// `1/A` on emissions, nothing on the hidden variable.
    pub fn for_alphabet(alphabet_size: usize) -> Self {
        Self {
            emission_concentration: 1.0 / alphabet_size as f64,
            weight_concentration: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.emission_concentration > 0.0 && self.emission_concentration.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "emission concentration must be positive, got {}",
                self.emission_concentration
            )));
        }
        if !(self.weight_concentration >= 0.0 && self.weight_concentration.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "weight concentration must be non-negative, got {}",
                self.weight_concentration
            )));
        }
        Ok(())
    }
}

/// What EM maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Observed-data log-likelihood.
    Ml,
    /// Log-likelihood plus `α Σ log θ + β Σ log w`. The smoothed update
    /// `(n + α) / (N + Aα)` is the exact maximizer of this objective.
    Map,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    /// Stop once one iteration improves the objective by less than this.
    pub tolerance: f64,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iterations: 500,
            tolerance: 1e-6,
            objective: Objective::Map,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::InvalidParameter("restarts must be >= 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("max_iterations must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter("tolerance must be > 0".into()));
        }
        Ok(())
    }

    pub fn with_objective(mut self, objective: Objective) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitDiagnostics {
    pub restarts_used: usize,
    /// EM iterations of the selected restart.
    pub iterations: usize,
    pub converged: bool,
    pub restart_objectives: Vec<f64>,
}

/// Mixture weights and per-state, per-position emission multinomials.
#[derive(Debug, Clone)]
pub struct FittedMixture {
    start: usize,
    length: usize,
    alphabet_size: usize,
    weights: Vec<f64>,
    /// `[state][position][symbol]`, flattened.
    emissions: Vec<f64>,
    log_weights: Vec<f64>,
    log_emissions: Vec<f64>,
    train_loglik: f64,
    objective: f64,
    diagnostics: FitDiagnostics,
}

/// Equality of parameters only; fit bookkeeping is ignored.
impl PartialEq for FittedMixture {
    fn eq(&self, other: &Self) -> bool {
        self.start == other.start
            && self.length == other.length
            && self.alphabet_size == other.alphabet_size
            && self.weights == other.weights
            && self.emissions == other.emissions
    }
}

impl FittedMixture {
    /// Build from explicit parameters. `start` is the 0-based first column.
    pub fn from_parameters(
        start: usize,
        weights: Vec<f64>,
        emissions: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let c = weights.len();
        if c == 0 || emissions.len() != c {
            return Err(Error::InvalidParameter(
                "need one emission block per mixture weight".into(),
            ));
        }
        let length = emissions[0].len();
        if length == 0 {
            return Err(Error::InvalidParameter("empty segment".into()));
        }
        let alphabet_size = emissions[0][0].len();
        let mut flat = Vec::with_capacity(c * length * alphabet_size);
        for block in &emissions {
            if block.len() != length {
                return Err(Error::InvalidParameter("ragged emission blocks".into()));
            }
            for row in block {
                if row.len() != alphabet_size {
                    return Err(Error::InvalidParameter("ragged emission rows".into()));
                }
                check_distribution(row)?;
                flat.extend_from_slice(row);
            }
        }
        check_distribution(&weights)?;
        let mut mix = Self {
            start,
            length,
            alphabet_size,
            weights,
            emissions: flat,
            log_weights: Vec::new(),
            log_emissions: Vec::new(),
            train_loglik: f64::NAN,
            objective: f64::NAN,
            diagnostics: FitDiagnostics::default(),
        };
        mix.refresh_logs();
        Ok(mix)
    }

    fn empty(start: usize, length: usize, alphabet_size: usize, c: usize) -> Self {
        Self {
            start,
            length,
            alphabet_size,
            weights: vec![1.0 / c as f64; c],
            emissions: vec![1.0 / alphabet_size as f64; c * length * alphabet_size],
            log_weights: Vec::new(),
            log_emissions: Vec::new(),
            train_loglik: f64::NAN,
            objective: f64::NAN,
            diagnostics: FitDiagnostics::default(),
        }
    }

    fn refresh_logs(&mut self) {
        self.log_weights = self.weights.iter().map(|w| w.ln()).collect();
        self.log_emissions = self.emissions.iter().map(|p| p.ln()).collect();
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn span(&self) -> Range<usize> {
        self.start..self.start + self.length
    }

    pub fn cardinality(&self) -> usize {
        self.weights.len()
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Emission distribution of `state` at segment-relative `position`.
    pub fn emission(&self, state: usize, position: usize) -> &[f64] {
        let a = self.alphabet_size;
        let off = (state * self.length + position) * a;
        &self.emissions[off..off + a]
    }

    /// Emissions as `[state][position][symbol]`.
    pub fn emissions_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.cardinality())
            .map(|k| {
                (0..self.length)
                    .map(|i| self.emission(k, i).to_vec())
                    .collect()
            })
            .collect()
    }

    /// Training log-likelihood of the fit (NaN for hand-built parameters).
    pub fn train_loglik(&self) -> f64 {
        self.train_loglik
    }

    /// Final value of the EM objective (NaN for hand-built parameters).
    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.diagnostics
    }

    fn joint_log_terms(&self, obs: &[Entry], skip: Option<usize>, out: &mut [f64]) {
        let a = self.alphabet_size;
        for (k, slot) in out.iter_mut().enumerate() {
            let base = k * self.length * a;
            let mut acc = self.log_weights[k];
            for (i, e) in obs.iter().enumerate() {
                if Some(i) == skip {
                    continue;
                }
                if let Some(v) = e {
                    acc += self.log_emissions[base + i * a + *v as usize];
                }
            }
            *slot = acc;
        }
    }

    fn check_obs(&self, obs: &[Entry]) {
        assert_eq!(
            obs.len(),
            self.length,
            "observation length does not match segment length"
        );
    }

    /// `log Σ_k w_k Π_{observed i} θ_k,i(obs_i)`.
    pub fn loglik_sequence(&self, obs: &[Entry]) -> f64 {
        self.check_obs(obs);
        if obs.iter().all(Option::is_none) {
            return 0.0;
        }
        let mut terms = vec![0.0; self.cardinality()];
        self.joint_log_terms(obs, None, &mut terms);
        log_sum_exp(&terms)
    }

    /// Posterior over hidden states given the observed entries of `obs`.
    pub fn posterior_responsibilities(&self, obs: &[Entry]) -> Vec<f64> {
        self.check_obs(obs);
        self.posterior_excluding(obs, None)
    }

    fn posterior_excluding(&self, obs: &[Entry], skip: Option<usize>) -> Vec<f64> {
        let mut terms = vec![0.0; self.cardinality()];
        self.joint_log_terms(obs, skip, &mut terms);
        normalize_log(&mut terms);
        terms
    }

    /// Predictive distribution at segment-relative `position` given the other
    /// entries of `obs`, and its argmax (lowest index on ties).
    pub fn impute_position(&self, obs: &[Entry], position: usize) -> (Vec<f64>, u16) {
        self.check_obs(obs);
        assert!(position < self.length, "position outside segment");
        let post = self.posterior_excluding(obs, Some(position));
        let mut dist = vec![0.0; self.alphabet_size];
        for (k, p) in post.iter().enumerate() {
            for (d, e) in dist.iter_mut().zip(self.emission(k, position)) {
                *d += p * e;
            }
        }
        let best = argmax(&dist) as u16;
        (dist, best)
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidParameter(
            "probabilities must be finite and non-negative".into(),
        ));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::InvalidParameter(format!(
            "probabilities sum to {s}, not 1"
        )));
    }
    Ok(())
}

/// Index of the first maximum.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Turn log-weights into a probability vector in place; returns the log normalizer.
fn normalize_log(xs: &mut [f64]) -> f64 {
    let z = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = (*x - z).exp();
    }
    z
}

/// Observed cells of a span, compacted for EM.
#[derive(Debug, Clone)]
pub(crate) struct SpanData {
    start: usize,
    length: usize,
    alphabet_size: usize,
    offsets: Vec<usize>,
    /// `position * A + symbol` for every observed cell, row by row.
    cells: Vec<u32>,
}

impl SpanData {
    pub(crate) fn new(ds: &AlignedDataset, span: Range<usize>, rows: &[usize]) -> Self {
        let a = ds.alphabet().len();
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut cells = Vec::new();
        offsets.push(0);
        for &r in rows {
            let row = &ds.row(r)[span.clone()];
            for (i, e) in row.iter().enumerate() {
                if let Some(v) = e {
                    cells.push((i * a + *v as usize) as u32);
                }
            }
            offsets.push(cells.len());
        }
        Self {
            start: span.start,
            length: span.len(),
            alphabet_size: a,
            offsets,
            cells,
        }
    }

    pub(crate) fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub(crate) fn observed(&self) -> usize {
        self.cells.len()
    }

    fn row(&self, j: usize) -> &[u32] {
        &self.cells[self.offsets[j]..self.offsets[j + 1]]
    }

    fn span(&self) -> Range<usize> {
        self.start..self.start + self.length
    }
}

/// Responsibilities into `resp` (row-major, `c` per row); returns the log-likelihood.
fn e_step(mix: &FittedMixture, data: &SpanData, resp: &mut [f64]) -> f64 {
    let c = mix.cardinality();
    let la = mix.length * mix.alphabet_size;
    let mut total = 0.0;
    for j in 0..data.n_rows() {
        let r = &mut resp[j * c..(j + 1) * c];
        for (k, slot) in r.iter_mut().enumerate() {
            let table = &mix.log_emissions[k * la..(k + 1) * la];
            *slot = mix.log_weights[k] + data.row(j).iter().map(|&x| table[x as usize]).sum::<f64>();
        }
        total += normalize_log(r);
    }
    total
}

fn m_step(
    mix: &mut FittedMixture,
    data: &SpanData,
    resp: &[f64],
    prior: &DirichletPrior,
    objective: Objective,
) {
    let c = mix.cardinality();
    let a = mix.alphabet_size;
    let l = mix.length;
    let la = l * a;
    let n = data.n_rows() as f64;

    let mut weight_counts = vec![0.0; c];
    let counts = &mut mix.emissions;
    counts.iter_mut().for_each(|x| *x = 0.0);
    for j in 0..data.n_rows() {
        let r = &resp[j * c..(j + 1) * c];
        for (k, &rk) in r.iter().enumerate() {
            weight_counts[k] += rk;
            let block = &mut counts[k * la..(k + 1) * la];
            for &x in data.row(j) {
                block[x as usize] += rk;
            }
        }
    }

    let alpha = prior.emission_concentration;
    for row in counts.chunks_exact_mut(a) {
        let total: f64 = row.iter().sum();
        match objective {
            Objective::Map => {
                let denom = total + a as f64 * alpha;
                row.iter_mut().for_each(|x| *x = (*x + alpha) / denom);
            }
            Objective::Ml if total > 0.0 => row.iter_mut().for_each(|x| *x /= total),
            Objective::Ml => row.iter_mut().for_each(|x| *x = 1.0 / a as f64),
        }
    }

    let beta = match objective {
        Objective::Map => prior.weight_concentration,
        Objective::Ml => 0.0,
    };
    let denom = n + c as f64 * beta;
    for (w, nk) in mix.weights.iter_mut().zip(&weight_counts) {
        *w = ((nk + beta) / denom).max(WEIGHT_FLOOR);
    }
    let s: f64 = mix.weights.iter().sum();
    mix.weights.iter_mut().for_each(|w| *w /= s);
    mix.refresh_logs();
}

fn log_prior_term(mix: &FittedMixture, prior: &DirichletPrior, objective: Objective) -> f64 {
    match objective {
        Objective::Ml => 0.0,
        Objective::Map => {
            let mut t = prior.emission_concentration * mix.log_emissions.iter().sum::<f64>();
            if prior.weight_concentration > 0.0 {
                t += prior.weight_concentration * mix.log_weights.iter().sum::<f64>();
            }
            t
        }
    }
}

struct RestartOutcome {
    mix: FittedMixture,
    trace: Vec<f64>,
    converged: bool,
}

fn run_restart(
    data: &SpanData,
    c: usize,
    prior: &DirichletPrior,
    cfg: &EmConfig,
    restart: usize,
) -> Result<RestartOutcome> {
    let n = data.n_rows();
    let mut mix = FittedMixture::empty(data.start, data.length, data.alphabet_size, c);
    let mut resp = vec![1.0; n * c];
    if c > 1 {
        let mut rng = rng_from(&[
            stream::EM_RESTART,
            cfg.seed,
            data.start as u64,
            data.length as u64,
            c as u64,
            restart as u64,
        ]);
        for r in resp.chunks_exact_mut(c) {
            // Dirichlet(1) draw via normalized exponentials
            for x in r.iter_mut() {
                *x = -(1.0 - rng.random::<f64>()).ln();
            }
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|x| *x /= s);
        }
    }
    m_step(&mut mix, data, &resp, prior, cfg.objective);

    let mut trace = Vec::new();
    let mut converged = false;
    let mut loglik = f64::NAN;
    for iter in 0..cfg.max_iterations {
        loglik = e_step(&mix, data, &mut resp);
        let obj = loglik + log_prior_term(&mix, prior, cfg.objective);
        if !obj.is_finite() {
            return Err(Error::NonFiniteObjective { restart });
        }
        let improvement = trace.last().map(|prev| obj - prev);
        trace.push(obj);
        if improvement.is_some_and(|d| d < cfg.tolerance) {
            converged = true;
            break;
        }
        if iter + 1 == cfg.max_iterations {
            break;
        }
        m_step(&mut mix, data, &resp, prior, cfg.objective);
    }
    mix.train_loglik = loglik;
    mix.objective = *trace.last().expect("at least one iteration");
    Ok(RestartOutcome {
        mix,
        trace,
        converged,
    })
}

pub(crate) fn fit_span(
    data: &SpanData,
    c: usize,
    prior: &DirichletPrior,
    cfg: &EmConfig,
    keep_traces: bool,
) -> Result<(FittedMixture, Vec<Vec<f64>>)> {
    if c == 0 {
        return Err(Error::InvalidParameter("cardinality must be >= 1".into()));
    }
    prior.validate()?;
    cfg.validate()?;
    if data.observed() == 0 {
        return Err(Error::NoObservedEntries {
            start: data.start + 1,
            end: data.start + data.length,
        });
    }
    let mut seen = vec![false; data.length];
    for &x in &data.cells {
        seen[x as usize / data.alphabet_size] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        log::warn!(
            "column {} has no observed entries in span {}..{}; its emissions stay at the prior",
            data.start + i + 1,
            data.start + 1,
            data.start + data.length
        );
    }

    // a single state has nothing to randomize
    let restarts = if c == 1 { 1 } else { cfg.restarts };
    let mut best: Option<(RestartOutcome, usize)> = None;
    let mut objectives = Vec::with_capacity(restarts);
    let mut traces = Vec::new();
    for r in 0..restarts {
        let mut out = run_restart(data, c, prior, cfg, r)?;
        let iterations = out.trace.len();
        objectives.push(out.mix.objective);
        if keep_traces {
            traces.push(std::mem::take(&mut out.trace));
        }
        if best
            .as_ref()
            .is_none_or(|(b, _)| out.mix.objective > b.mix.objective)
        {
            best = Some((out, iterations));
        }
    }
    let (best, iterations) = best.expect("restarts >= 1");
    let mut mix = best.mix;
    mix.diagnostics = FitDiagnostics {
        restarts_used: restarts,
        iterations,
        converged: best.converged,
        restart_objectives: objectives,
    };
    Ok((mix, traces))
}

/// Fit a `c`-state mixture to columns `span` (0-based) of every row, keeping
/// the best of `cfg.restarts` EM runs.
pub fn fit_em(
    ds: &AlignedDataset,
    span: Range<usize>,
    c: usize,
    prior: &DirichletPrior,
    cfg: &EmConfig,
) -> Result<FittedMixture> {
    let rows: Vec<usize> = (0..ds.n_rows()).collect();
    fit_em_on_rows(ds, &rows, span, c, prior, cfg)
}

/// As [`fit_em`], restricted to the given rows.
pub fn fit_em_on_rows(
    ds: &AlignedDataset,
    rows: &[usize],
    span: Range<usize>,
    c: usize,
    prior: &DirichletPrior,
    cfg: &EmConfig,
) -> Result<FittedMixture> {
    check_span(ds, &span)?;
    let data = SpanData::new(ds, span, rows);
    fit_span(&data, c, prior, cfg, false).map(|(m, _)| m)
}

/// As [`fit_em`], also returning each restart's per-iteration objective trace.
pub fn fit_em_traced(
    ds: &AlignedDataset,
    span: Range<usize>,
    c: usize,
    prior: &DirichletPrior,
    cfg: &EmConfig,
) -> Result<(FittedMixture, Vec<Vec<f64>>)> {
    check_span(ds, &span)?;
    let rows: Vec<usize> = (0..ds.n_rows()).collect();
    let data = SpanData::new(ds, span, &rows);
    fit_span(&data, c, prior, cfg, true)
}

fn check_span(ds: &AlignedDataset, span: &Range<usize>) -> Result<()> {
    if span.is_empty() || span.end > ds.n_cols() {
        return Err(Error::InvalidParameter(format!(
            "span {}..{} outside 1..{}",
            span.start + 1,
            span.end,
            ds.n_cols()
        )));
    }
    Ok(())
}

/// Seed for the `fold`-th refit of a candidate under cross-validation.
pub(crate) fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(&[stream::CV_FIT, seed, fold as u64])
}

/// Expected complete-data sufficient statistics of a span under `mix`.
#[derive(Debug, Clone)]
pub(crate) struct CompletedStats {
    pub hidden_counts: Vec<f64>,
    /// `[state][position][symbol]`, flattened.
    pub emission_counts: Vec<f64>,
    pub observed_loglik: f64,
    pub completed_loglik: f64,
}

pub(crate) fn completed_stats(mix: &FittedMixture, data: &SpanData) -> CompletedStats {
    debug_assert_eq!(mix.span(), data.span());
    let c = mix.cardinality();
    let la = mix.length * mix.alphabet_size;
    let mut resp = vec![0.0; data.n_rows() * c];
    let observed_loglik = e_step(mix, data, &mut resp);
    let mut hidden_counts = vec![0.0; c];
    let mut emission_counts = vec![0.0; c * la];
    let mut completed_loglik = 0.0;
    for j in 0..data.n_rows() {
        for k in 0..c {
            let rk = resp[j * c + k];
            if rk == 0.0 {
                continue;
            }
            hidden_counts[k] += rk;
            let mut lp = mix.log_weights[k];
            for &x in data.row(j) {
                emission_counts[k * la + x as usize] += rk;
                lp += mix.log_emissions[k * la + x as usize];
            }
            completed_loglik += rk * lp;
        }
    }
    CompletedStats {
        hidden_counts,
        emission_counts,
        observed_loglik,
        completed_loglik,
    }
}

/// Log marginal likelihood of one multinomial family under a Dirichlet prior:
/// `log Γ(Σα)/Γ(Σα+Σn) + Σ_v log Γ(α_v+n_v)/Γ(α_v)`. Counts may be fractional.
pub fn dirichlet_multinomial_log_marginal(counts: &[f64], concentrations: &[f64]) -> Result<f64> {
    if counts.len() != concentrations.len() {
        return Err(Error::InvalidParameter(
            "counts and concentrations differ in length".into(),
        ));
    }
    if let Some(&bad) = counts.iter().find(|n| !(**n >= 0.0)) {
        return Err(Error::NegativeCount(bad));
    }
    if concentrations.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::InvalidParameter("concentrations must be > 0".into()));
    }
    let alpha_sum: f64 = concentrations.iter().sum();
    let n_sum: f64 = counts.iter().sum();
    let mut acc = ln_gamma(alpha_sum) - ln_gamma(alpha_sum + n_sum);
    for (&n, &a) in counts.iter().zip(concentrations) {
        if n > 0.0 {
            acc += ln_gamma(a + n) - ln_gamma(a);
        }
    }
    Ok(acc)
}

/// Sum of [`dirichlet_multinomial_log_marginal`] over independent families,
/// each given as `(counts, concentrations)`.
pub fn complete_data_log_marginal<'a, I>(families: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    families
        .into_iter()
        .map(|(n, a)| dirichlet_multinomial_log_marginal(n, a))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Alphabet;
    use proptest::prelude::*;

    fn ds(rows: &[&str]) -> AlignedDataset {
        let alphabet = Alphabet::new(["A", "B"]).unwrap();
        let rows = rows
            .iter()
            .map(|r| {
                r.chars()
                    .map(|ch| match ch {
                        '?' => None,
                        other => alphabet.index_of(&other.to_string()),
                    })
                    .collect()
            })
            .collect();
        AlignedDataset::from_rows(alphabet, rows).unwrap()
    }

    fn toy() -> AlignedDataset {
        ds(&["ABAB", "ABAB", "ABAB", "BABA", "BABA", "BABA"])
    }

    fn prior() -> DirichletPrior {
        DirichletPrior::for_alphabet(2)
    }

    #[test]
    fn single_state_single_column_closed_form() {
        let d = ds(&["A", "A", "A", "A"]);
        let m = fit_em(&d, 0..1, 1, &prior(), &EmConfig::default()).unwrap();
        assert!((m.emission(0, 0)[0] - 0.9).abs() < 1e-12);
        assert_eq!(m.weights(), &[1.0]);
    }

    #[test]
    fn separable_clusters_split_hard() {
        let m = fit_em(&toy(), 0..4, 2, &prior(), &EmConfig::default()).unwrap();
        // analytic optimum for a hard split: weights 1/2, each state puts
        // (3+α)/(3+2α) on its pattern; residual soft responsibility is ~1e-4
        let peak = 3.5 / 4.0;
        for k in 0..2 {
            assert!((m.weights()[k] - 0.5).abs() < 1e-3);
            let first = m.emission(k, 0);
            let is_a = first[0] > first[1];
            for i in 0..4 {
                let want = if (i % 2 == 0) == is_a { 0 } else { 1 };
                assert!((m.emission(k, i)[want] - peak).abs() < 1e-3, "{:?}", m.emission(k, i));
            }
        }
        for row in toy().rows() {
            let post = m.posterior_responsibilities(row);
            assert!(post.iter().any(|p| *p > 1.0 - 1e-3));
        }
    }

    #[test]
    fn zero_observed_span_is_an_error() {
        let d = ds(&["A?", "B?"]);
        assert!(matches!(
            fit_em(&d, 1..2, 1, &prior(), &EmConfig::default()),
            Err(Error::NoObservedEntries { start: 2, end: 2 })
        ));
    }

    #[test]
    fn unobserved_column_stays_uniform() {
        let d = ds(&["A?", "B?", "A?"]);
        let m = fit_em(&d, 0..2, 2, &prior(), &EmConfig::default()).unwrap();
        for k in 0..2 {
            assert_eq!(m.emission(k, 1), &[0.5, 0.5]);
        }
    }

    #[test]
    fn invalid_configs() {
        let d = toy();
        let bad = EmConfig { restarts: 0, ..Default::default() };
        assert!(fit_em(&d, 0..2, 2, &prior(), &bad).is_err());
        let bad = EmConfig { tolerance: 0.0, ..Default::default() };
        assert!(fit_em(&d, 0..2, 2, &prior(), &bad).is_err());
        let bad_prior = DirichletPrior { emission_concentration: 0.0, weight_concentration: 0.0 };
        assert!(fit_em(&d, 0..2, 2, &bad_prior, &EmConfig::default()).is_err());
        assert!(fit_em(&d, 0..2, 0, &prior(), &EmConfig::default()).is_err());
        assert!(fit_em(&d, 3..5, 2, &prior(), &EmConfig::default()).is_err());
    }

    #[test]
    fn smoothing_floor_holds() {
        let d = toy();
        let m = fit_em(&d, 0..4, 3, &prior(), &EmConfig::default()).unwrap();
        let alpha = 0.5;
        let floor = alpha / (d.n_rows() as f64 + 2.0 * alpha);
        for k in 0..3 {
            for i in 0..4 {
                assert!(m.emission(k, i).iter().all(|p| *p >= floor - 1e-15));
            }
        }
    }

    fn two_state() -> FittedMixture {
        FittedMixture::from_parameters(
            0,
            vec![0.3, 0.7],
            vec![
                vec![vec![0.9, 0.1], vec![0.2, 0.8]],
                vec![vec![0.4, 0.6], vec![0.75, 0.25]],
            ],
        )
        .unwrap()
    }

    #[test]
    fn loglik_all_missing_is_zero() {
        assert_eq!(two_state().loglik_sequence(&[None, None]), 0.0);
    }

    #[test]
    fn loglik_single_state() {
        let m = FittedMixture::from_parameters(0, vec![1.0], vec![vec![vec![0.9, 0.1], vec![0.2, 0.8]]])
            .unwrap();
        let want = 0.1f64.ln() + 0.2f64.ln();
        assert!((m.loglik_sequence(&[Some(1), Some(0)]) - want).abs() < 1e-12);
    }

    #[test]
    fn loglik_matches_enumeration() {
        let m = two_state();
        let obs = [Some(0), Some(1)];
        let want: f64 = 0.3 * 0.9 * 0.8 + 0.7 * 0.4 * 0.25;
        assert!((m.loglik_sequence(&obs) - want.ln()).abs() < 1e-12);
        let half = [None, Some(0)];
        let want: f64 = 0.3 * 0.2 + 0.7 * 0.75;
        assert!((m.loglik_sequence(&half) - want.ln()).abs() < 1e-12);
    }

    #[test]
    fn posterior_cases() {
        let m = two_state();
        assert_eq!(m.posterior_responsibilities(&[None, None]), vec![0.3, 0.7]);
        let a = 0.3 * 0.9 * 0.8;
        let b = 0.7 * 0.4 * 0.25;
        let post = m.posterior_responsibilities(&[Some(0), Some(1)]);
        assert!((post[0] - a / (a + b)).abs() < 1e-12);
        assert!((post[1] - b / (a + b)).abs() < 1e-12);

        let same = FittedMixture::from_parameters(
            0,
            vec![0.5, 0.5],
            vec![vec![vec![0.6, 0.4]], vec![vec![0.6, 0.4]]],
        )
        .unwrap();
        assert_eq!(same.posterior_responsibilities(&[Some(1)]), vec![0.5, 0.5]);
    }

    #[test]
    fn impute_single_state_ignores_evidence() {
        let m = FittedMixture::from_parameters(0, vec![1.0], vec![vec![vec![0.9, 0.1], vec![0.2, 0.8]]])
            .unwrap();
        for obs in [[None, None], [Some(0), None], [Some(1), Some(1)]] {
            let (dist, best) = m.impute_position(&obs, 1);
            assert_eq!(dist, vec![0.2, 0.8]);
            assert_eq!(best, 1);
        }
    }

    #[test]
    fn impute_completes_matching_pattern() {
        let m = fit_em(&toy(), 0..4, 2, &prior(), &EmConfig::default()).unwrap();
        // A?AB: matches ABAB, so position 2 should be B
        let obs = [Some(0), None, Some(0), Some(1)];
        let (dist, best) = m.impute_position(&obs, 1);
        // oracle: exact posterior from the other three positions
        let mut post = [0.0; 2];
        for (k, p) in post.iter_mut().enumerate() {
            *p = m.weights()[k] * m.emission(k, 0)[0] * m.emission(k, 2)[0] * m.emission(k, 3)[1];
        }
        let z: f64 = post.iter().sum();
        for v in 0..2 {
            let want: f64 = (0..2).map(|k| post[k] / z * m.emission(k, 1)[v]).sum();
            assert!((dist[v] - want).abs() < 1e-12);
        }
        assert_eq!(best, 1);
        // observed entry at the target position is ignored
        let (again, _) = m.impute_position(&[Some(0), Some(0), Some(0), Some(1)], 1);
        assert_eq!(again, dist);
    }

    #[test]
    fn marginal_known_values() {
        assert_eq!(dirichlet_multinomial_log_marginal(&[0.0, 0.0], &[0.5, 0.5]).unwrap(), 0.0);
        let single = dirichlet_multinomial_log_marginal(&[1.0, 0.0, 0.0], &[0.2, 0.3, 0.5]).unwrap();
        assert!((single - 0.2f64.ln()).abs() < 1e-12);
        let v = dirichlet_multinomial_log_marginal(&[2.0, 1.0], &[0.5, 0.5]).unwrap();
        assert!((v - 0.0625f64.ln()).abs() < 1e-12);
        assert_eq!(
            dirichlet_multinomial_log_marginal(&[-1.0, 1.0], &[0.5, 0.5]),
            Err(Error::NegativeCount(-1.0))
        );
    }

    #[test]
    fn fit_is_deterministic() {
        let cfg = EmConfig { seed: 42, ..Default::default() };
        let a = fit_em(&toy(), 0..4, 3, &prior(), &cfg).unwrap();
        let b = fit_em(&toy(), 0..4, 3, &prior(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn best_restart_dominates() {
        let d = ds(&["ABAB", "ABBB", "AAAB", "BABA", "BBBA", "BA?A", "??AB"]);
        for objective in [Objective::Ml, Objective::Map] {
            let cfg = EmConfig { objective, seed: 9, ..Default::default() };
            let (m, traces) = fit_em_traced(&d, 0..4, 3, &prior(), &cfg).unwrap();
            assert_eq!(traces.len(), 10);
            for (t, obj) in traces.iter().zip(&m.diagnostics().restart_objectives) {
                assert_eq!(t.last(), Some(obj));
                assert!(m.objective() >= *obj);
            }
        }
    }

    proptest! {
        #[test]
        fn hidden_value_of_a_missing_cell_is_irrelevant(
            row in prop::collection::vec(0u16..2, 2),
            at in 0usize..2,
        ) {
            let m = two_state();
            let mut a: Vec<Entry> = row.iter().copied().map(Some).collect();
            let mut b = a.clone();
            b[at] = Some(1 - row[at]);
            a[at] = None;
            b[at] = None;
            prop_assert_eq!(m.loglik_sequence(&a), m.loglik_sequence(&b));
            prop_assert_eq!(m.posterior_responsibilities(&a), m.posterior_responsibilities(&b));
        }

        #[test]
        fn parameters_stay_normalized(seed in any::<u64>(), c in 1usize..4) {
            let d = ds(&["ABAB", "ABBB", "A?AB", "BABA", "BBBA", "BA?A"]);
            let cfg = EmConfig { seed, restarts: 2, ..Default::default() };
            let m = fit_em(&d, 0..4, c, &prior(), &cfg).unwrap();
            prop_assert!((m.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for k in 0..c {
                for i in 0..4 {
                    prop_assert!((m.emission(k, i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
