//! Optimal segmentation of aligned discrete sequences into independent
//! multinomial mixture models.
//!
//! Each candidate segment `(start, length, cardinality)` is scored on its own
//! ([`scores`]), the scores are collected into a [`segment_dp::ScoreTable`], and
//! a dynamic program recovers the best complete, non-overlapping tiling. The
//! fitted [`model::SegmentationModel`] then answers likelihood, imputation,
//! typing and tag-selection queries.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod mixture;
pub mod model;
pub mod scores;
mod seed;
pub mod segment_dp;

pub use dataset::{
    column_majority, mask_entries, parse_alignment, AlignedDataset, Alphabet, Entry, Format,
    MaskRecord, ParseOptions,
};
pub use error::{Error, Result};
pub use mixture::{fit_em, DirichletPrior, EmConfig, FittedMixture, Objective};
pub use model::{assemble_model, build_clust_baseline, build_ind_baseline, Provenance, SegmentationModel};
pub use scores::{seg_score, ScoreKind, ScoringConfig, SegScore};
pub use seed::derive_seed;
pub use segment_dp::{
    build_score_table, greedy_segmentation, optimal_segmentation, Caps, Pruning, ScoreTable, Segment,
    Segmentation,
};
pub use eval::{
    boundary_scores, generate_planted_blocks, kfold_holdout_eval, missing_value_experiment, sign_test, train,
    HoldoutReport, Method, MissingReport, PipelineConfig, PlantedConfig,
};
