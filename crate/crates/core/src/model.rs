//! The assembled generative model and the queries it answers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{AlignedDataset, Alphabet, Entry};
use crate::error::{Error, Result};
use crate::mixture::{argmax, fit_em, DirichletPrior, EmConfig, FittedMixture, Objective};
use crate::scores::{seg_score_cv, ScoringConfig};
use crate::segment_dp::{Caps, Segment, Segmentation};

/// Default cap on configurations enumerated by [`SegmentationModel::select_tags`].
pub const DEFAULT_TAG_CONFIG_CAP: u128 = 1 << 22;

/// CV scores closer than this count as tied when CLUST picks a cardinality;
/// it matches the EM convergence tolerance, below which scores are noise.
pub const CLUST_TIE_TOLERANCE: f64 = 1e-6;

/// How a model was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub score_kind: Option<String>,
    pub seed: u64,
    pub prior: DirichletPrior,
    pub caps: Option<Caps>,
    /// Full run configuration, when the model came from the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl Provenance {
    pub fn new(method: impl Into<String>, seed: u64, prior: DirichletPrior) -> Self {
        Self {
            method: method.into(),
            score_kind: None,
            seed,
            prior,
            caps: None,
            config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSegment {
    pub segment: Segment,
    /// A one-state, one-position mixture for length-1 segments.
    pub params: FittedMixture,
}

/// A segmentation with fitted parameters for every segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    alphabet: Alphabet,
    segments: Vec<ModelSegment>,
    pub provenance: Provenance,
}

/// Filled-in row plus the predictive distribution of every imputed cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputation {
    pub completed: Vec<u16>,
    pub cells: Vec<ImputedCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedCell {
    /// 0-based column.
    pub col: usize,
    pub symbol: u16,
    pub distribution: Vec<f64>,
}

impl ImputedCell {
    pub fn probability(&self) -> f64 {
        self.distribution[self.symbol as usize]
    }
}

/// Most likely hidden state of one segment; `None` for independent positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TypeCall {
    pub segment: usize,
    pub state: Option<usize>,
    pub posterior: f64,
}

pub type TypeAssignment = Vec<TypeCall>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TagPick {
    /// 1-based sequence position.
    pub position: usize,
    /// Mutual information (nats) between the hidden state and all picks so far.
    pub cumulative_mi: f64,
}

/// Smoothed multinomial of one column: `(n_v + α) / (n + Aα)`.
fn column_multinomial(ds: &AlignedDataset, col: usize, prior: &DirichletPrior) -> Result<FittedMixture> {
    let counts = ds.column_counts(col);
    let a = counts.len() as f64;
    let n: usize = counts.iter().sum();
    let alpha = prior.emission_concentration;
    let denom = n as f64 + a * alpha;
    let dist = counts.iter().map(|&k| (k as f64 + alpha) / denom).collect();
    FittedMixture::from_parameters(col, vec![1.0], vec![vec![dist]])
}

/// Refit every segment of `seg` on all of `ds` with the final EM budget.
pub fn assemble_model(
    ds: &AlignedDataset,
    seg: &Segmentation,
    prior: &DirichletPrior,
    em: &EmConfig,
    provenance: Provenance,
) -> Result<SegmentationModel> {
    seg.check_covers(ds.n_cols())?;
    prior.validate()?;
    let em = em.with_objective(Objective::Map);
    let segments = seg
        .segments()
        .par_iter()
        .map(|s| {
            let params = if s.is_correlated() {
                fit_em(ds, s.columns(), s.cardinality, prior, &em)?
            } else {
                column_multinomial(ds, s.start - 1, prior)?
            };
            Ok(ModelSegment {
                segment: *s,
                params,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentationModel {
        alphabet: ds.alphabet().clone(),
        segments,
        provenance,
    })
}

/// All positions independent, each with its smoothed column multinomial.
pub fn build_ind_baseline(ds: &AlignedDataset, prior: &DirichletPrior) -> Result<SegmentationModel> {
    let seg = Segmentation::singletons(ds.n_cols());
    let provenance = Provenance::new("ind", 0, *prior);
    assemble_model(ds, &seg, prior, &EmConfig::default(), provenance)
}

/// One hidden variable over the whole sequence, its cardinality picked by
/// the CV score over `2..=max_card` (ties to the smaller cardinality).
pub fn build_clust_baseline(
    ds: &AlignedDataset,
    max_card: usize,
    folds: usize,
    scoring: &ScoringConfig,
    final_em: &EmConfig,
) -> Result<SegmentationModel> {
    if max_card < 2 {
        return Err(Error::InvalidParameter("max_card must be >= 2".into()));
    }
    let n = ds.n_cols();
    let mut provenance = Provenance::new("clust", scoring.em.seed, scoring.prior);
    provenance.score_kind = Some(format!("cv{folds}"));
    if n == 1 {
        return assemble_model(ds, &Segmentation::singletons(1), &scoring.prior, final_em, provenance);
    }
    let scores = (2..=max_card)
        .into_par_iter()
        .map(|c| seg_score_cv(ds, 1, n, c, folds, scoring).map(|s| s.value))
        .collect::<Result<Vec<f64>>>()?;
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let c = 2 + scores
        .iter()
        .position(|&v| v >= best - CLUST_TIE_TOLERANCE)
        .expect("at least one cardinality");
    let seg = Segmentation::new(vec![Segment::new(1, n, c)])?;
    assemble_model(ds, &seg, &scoring.prior, final_em, provenance)
}

impl SegmentationModel {
    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn segments(&self) -> &[ModelSegment] {
        &self.segments
    }

    pub fn n_cols(&self) -> usize {
        self.segments.last().map_or(0, |s| s.segment.end())
    }

    pub fn segmentation(&self) -> Segmentation {
        Segmentation::new(self.segments.iter().map(|s| s.segment).collect())
            .expect("model segments tile the sequence")
    }

    fn check_row(&self, row: &[Entry]) {
        assert_eq!(row.len(), self.n_cols(), "row length does not match model");
    }

    /// Log-likelihood of each segment's slice of `row`.
    pub fn segment_logliks(&self, row: &[Entry]) -> Vec<f64> {
        self.check_row(row);
        self.segments
            .iter()
            .map(|s| s.params.loglik_sequence(&row[s.segment.columns()]))
            .collect()
    }

    /// `log Pr(row)`, the sum over segments; missing entries are marginalized.
    pub fn model_loglik(&self, row: &[Entry]) -> f64 {
        self.segment_logliks(row).iter().sum()
    }

    /// Fill every missing cell with the argmax of its predictive distribution
    /// within its segment. Observed cells are left as they are.
    pub fn impute_missing(&self, row: &[Entry]) -> Imputation {
        self.check_row(row);
        let mut completed = Vec::with_capacity(row.len());
        let mut cells = Vec::new();
        for s in &self.segments {
            let slice = &row[s.segment.columns()];
            for (i, e) in slice.iter().enumerate() {
                match e {
                    Some(v) => completed.push(*v),
                    None => {
                        let (distribution, symbol) = s.params.impute_position(slice, i);
                        completed.push(symbol);
                        cells.push(ImputedCell {
                            col: s.segment.start - 1 + i,
                            symbol,
                            distribution,
                        });
                    }
                }
            }
        }
        Imputation { completed, cells }
    }

    /// MAP hidden state of every segment for `row`.
    pub fn assign_types(&self, row: &[Entry]) -> TypeAssignment {
        self.check_row(row);
        self.segments
            .iter()
            .enumerate()
            .map(|(a, s)| {
                if !s.segment.is_correlated() {
                    return TypeCall {
                        segment: a,
                        state: None,
                        posterior: 1.0,
                    };
                }
                let post = s.params.posterior_responsibilities(&row[s.segment.columns()]);
                let k = argmax(&post);
                TypeCall {
                    segment: a,
                    state: Some(k),
                    posterior: post[k],
                }
            })
            .collect()
    }

    /// Greedy forward selection of up to `budget` positions of segment
    /// `segment` (0-based) maximizing the exact mutual information with the
    /// segment's hidden variable under the model.
    pub fn select_tags(&self, segment: usize, budget: usize, config_cap: u128) -> Result<Vec<TagPick>> {
        let s = self.segments.get(segment).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "segment {} out of range 1..={}",
                segment + 1,
                self.segments.len()
            ))
        })?;
        let mix = &s.params;
        if !s.segment.is_correlated() || mix.cardinality() < 2 {
            return Err(Error::InvalidParameter(format!(
                "segment {} has no hidden variable to tag",
                segment + 1
            )));
        }
        if budget == 0 || budget > s.segment.length {
            return Err(Error::InvalidParameter(format!(
                "budget must lie in 1..={}",
                s.segment.length
            )));
        }
        let needed = (mix.alphabet_size() as u128).saturating_pow(budget as u32);
        if needed > config_cap {
            return Err(Error::TooManyConfigurations {
                needed,
                cap: config_cap,
            });
        }
        let mut chosen: Vec<usize> = Vec::with_capacity(budget);
        let mut picks = Vec::with_capacity(budget);
        for _ in 0..budget {
            let mut best: Option<(usize, f64)> = None;
            for i in 0..s.segment.length {
                if chosen.contains(&i) {
                    continue;
                }
                chosen.push(i);
                let mi = mutual_information(mix, &chosen);
                chosen.pop();
                if best.is_none_or(|(_, b)| mi > b) {
                    best = Some((i, mi));
                }
            }
            let (i, mi) = best.expect("budget <= segment length");
            chosen.push(i);
            picks.push(TagPick {
                position: s.segment.start + i,
                cumulative_mi: mi,
            });
        }
        Ok(picks)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            alphabet: self.alphabet.clone(),
            segments: self
                .segments
                .iter()
                .map(|s| SegmentFile {
                    start: s.segment.start,
                    length: s.segment.length,
                    cardinality: s.segment.cardinality,
                    weights: s.params.weights().to_vec(),
                    emissions: s.params.emissions_nested(),
                })
                .collect(),
            provenance: self.provenance.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let seg = Segmentation::new(
            file.segments
                .iter()
                .map(|s| Segment::new(s.start, s.length, s.cardinality))
                .collect(),
        )?;
        let mut segments = Vec::with_capacity(seg.len());
        for (segment, s) in seg.segments().iter().zip(file.segments) {
            let params = FittedMixture::from_parameters(segment.start - 1, s.weights, s.emissions)?;
            if params.length() != segment.length
                || params.cardinality() != segment.cardinality
                || params.alphabet_size() != file.alphabet.len()
            {
                return Err(Error::Mismatch(format!(
                    "segment starting at {} has parameters of the wrong shape",
                    segment.start
                )));
            }
            segments.push(ModelSegment {
                segment: *segment,
                params,
            });
        }
        Ok(Self {
            alphabet: file.alphabet,
            segments,
            provenance: file.provenance,
        })
    }
}

/// `I(H; X_S)` in nats by enumerating every configuration of `positions`.
fn mutual_information(mix: &FittedMixture, positions: &[usize]) -> f64 {
    let c = mix.cardinality();
    let a = mix.alphabet_size();
    let w = mix.weights();
    // depth-first over configurations, carrying p(x_S | k) for every state
    let mut stack: Vec<(usize, Vec<f64>)> = vec![(0, vec![1.0; c])];
    let mut mi = 0.0;
    while let Some((depth, cond)) = stack.pop() {
        if depth == positions.len() {
            let px: f64 = cond.iter().zip(w).map(|(p, wk)| p * wk).sum();
            if px <= 0.0 {
                continue;
            }
            for k in 0..c {
                let joint = w[k] * cond[k];
                if joint > 0.0 {
                    mi += joint * (cond[k] / px).ln();
                }
            }
            continue;
        }
        let i = positions[depth];
        for v in 0..a {
            let next: Vec<f64> = (0..c).map(|k| cond[k] * mix.emission(k, i)[v]).collect();
            stack.push((depth + 1, next));
        }
    }
    mi.max(0.0)
}

/// Entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    alphabet: Alphabet,
    segments: Vec<SegmentFile>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct SegmentFile {
    start: usize,
    length: usize,
    cardinality: usize,
    weights: Vec<f64>,
    emissions: Vec<Vec<Vec<f64>>>,
}
