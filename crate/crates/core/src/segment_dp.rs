//! Score tables and the segmentation dynamic program.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::AlignedDataset;
use crate::error::{Error, Result};
use crate::scores::{seg_score, ScoreKind, ScoringConfig};

/// One segment of a segmentation. `start` is 1-based; `cardinality` is 1 for
/// length-1 segments, which have no hidden variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub length: usize,
    pub cardinality: usize,
}

impl Segment {
    pub fn new(start: usize, length: usize, cardinality: usize) -> Self {
        Self {
            start,
            length,
            cardinality: if length == 1 { 1 } else { cardinality },
        }
    }

    /// Last position covered, 1-based and inclusive.
    pub fn end(&self) -> usize {
        self.start + self.length - 1
    }

    /// Covered columns as a 0-based range.
    pub fn columns(&self) -> std::ops::Range<usize> {
        self.start - 1..self.start - 1 + self.length
    }

    pub fn is_correlated(&self) -> bool {
        self.length > 1
    }
}

/// Complete, non-overlapping tiling of positions `1..=L`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct Segmentation {
    segments: Vec<Segment>,
}

impl Segmentation {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let Some(first) = segments.first() else {
            return Err(Error::InvalidSegmentation("no segments".into()));
        };
        if first.start != 1 {
            return Err(Error::InvalidSegmentation(format!(
                "first segment starts at {}",
                first.start
            )));
        }
        for (a, seg) in segments.iter().enumerate() {
            if seg.length == 0 {
                return Err(Error::InvalidSegmentation(format!("segment {} is empty", a + 1)));
            }
            if seg.cardinality == 0 {
                return Err(Error::InvalidSegmentation(format!(
                    "segment {} has cardinality 0",
                    a + 1
                )));
            }
            if let Some(next) = segments.get(a + 1) {
                if seg.start + seg.length != next.start {
                    return Err(Error::InvalidSegmentation(format!(
                        "segment {} ends at {} but segment {} starts at {}",
                        a + 1,
                        seg.end(),
                        a + 2,
                        next.start
                    )));
                }
            }
        }
        Ok(Self { segments })
    }

    /// `n_cols` independent positions.
    pub fn singletons(n_cols: usize) -> Self {
        Self {
            segments: (1..=n_cols).map(|s| Segment::new(s, 1, 1)).collect(),
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Sequence length covered.
    pub fn n_cols(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end())
    }

    pub fn correlated_count(&self) -> usize {
        self.segments.iter().filter(|s| s.is_correlated()).count()
    }

    /// Positions `i` such that a segment ends at `i` and another starts at `i + 1`.
    pub fn boundaries(&self) -> BTreeSet<usize> {
        let n = self.n_cols();
        self.segments
            .iter()
            .map(Segment::end)
            .filter(|&e| e < n)
            .collect()
    }

    pub fn check_covers(&self, n_cols: usize) -> Result<()> {
        if self.n_cols() != n_cols {
            return Err(Error::InvalidSegmentation(format!(
                "segmentation covers {} positions, data has {}",
                self.n_cols(),
                n_cols
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<Segment>> for Segmentation {
    type Error = Error;

    fn try_from(value: Vec<Segment>) -> Result<Self> {
        Segmentation::new(value)
    }
}

impl From<Segmentation> for Vec<Segment> {
    fn from(s: Segmentation) -> Self {
        s.segments
    }
}

/// Maximum cardinality and maximum segment length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caps {
    pub max_card: usize,
    pub max_len: usize,
}

impl Caps {
    pub fn validate(&self) -> Result<()> {
        if self.max_card < 2 || self.max_len < 1 {
            return Err(Error::InvalidParameter(format!(
                "caps need max_card >= 2 and max_len >= 1, got {} and {}",
                self.max_card, self.max_len
            )));
        }
        Ok(())
    }
}

fn cardinalities(length: usize, max_card: usize) -> std::ops::RangeInclusive<usize> {
    if length == 1 {
        1..=1
    } else {
        2..=max_card
    }
}

/// Every `(s, l, c)` candidate for a sequence of `n_cols` positions.
pub fn candidates(n_cols: usize, caps: Caps) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for l in 1..=caps.max_len.min(n_cols) {
        for s in 1..=n_cols - l + 1 {
            for c in cardinalities(l, caps.max_card) {
                out.push((s, l, c));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkipReason {
    /// Score fell more than `slack` below the best smaller cardinality.
    Cardinality,
    /// A shorter segment from the same start already lost its advantage over
    /// independent positions by more than `slack`.
    Extension,
}

impl SkipReason {
    fn tag(&self) -> &'static str {
        match self {
            SkipReason::Cardinality => "skip-cardinality",
            SkipReason::Extension => "skip-extension",
        }
    }
}

/// Identity of the scores in a table, used to decide whether a saved table
/// can be resumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub kind: ScoreKind,
    pub seed: u64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub caps: Caps,
    pub restarts: usize,
    pub emission_concentration: f64,
}

impl TableMeta {
    /// Whether scores saved under `self` can be reused for a run with `other`.
    /// Caps may differ; every shared candidate has the same score.
    pub fn compatible(&self, other: &TableMeta) -> bool {
        self.kind == other.kind
            && self.seed == other.seed
            && self.n_rows == other.n_rows
            && self.n_cols == other.n_cols
            && self.restarts == other.restarts
            && self.emission_concentration == other.emission_concentration
    }
}

/// `seg_score` values keyed by `(start, length, cardinality)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub meta: TableMeta,
    entries: BTreeMap<(usize, usize, usize), f64>,
    skipped: BTreeMap<(usize, usize, usize), SkipReason>,
}

impl ScoreTable {
    pub fn new(meta: TableMeta) -> Self {
        Self {
            meta,
            entries: BTreeMap::new(),
            skipped: BTreeMap::new(),
        }
    }

    /// An empty table with placeholder metadata, for hand-built score sets.
    pub fn for_length(n_cols: usize, caps: Caps) -> Self {
        Self::new(TableMeta {
            kind: ScoreKind::Bic,
            seed: 0,
            n_rows: 0,
            n_cols,
            caps,
            restarts: 0,
            emission_concentration: 0.0,
        })
    }

    pub fn n_cols(&self) -> usize {
        self.meta.n_cols
    }

    pub fn caps(&self) -> Caps {
        self.meta.caps
    }

    pub fn insert(&mut self, s: usize, l: usize, c: usize, value: f64) {
        let c = if l == 1 { 1 } else { c };
        self.skipped.remove(&(s, l, c));
        self.entries.insert((s, l, c), value);
    }

    pub fn get(&self, s: usize, l: usize, c: usize) -> Option<f64> {
        let c = if l == 1 { 1 } else { c };
        self.entries.get(&(s, l, c)).copied()
    }

    pub fn mark_skipped(&mut self, s: usize, l: usize, c: usize, reason: SkipReason) {
        self.entries.remove(&(s, l, c));
        self.skipped.insert((s, l, c), reason);
    }

    pub fn is_skipped(&self, s: usize, l: usize, c: usize) -> bool {
        self.skipped.contains_key(&(s, l, c))
    }

    pub fn skipped(&self) -> impl Iterator<Item = ((usize, usize, usize), SkipReason)> + '_ {
        self.skipped.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize, usize), f64)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    /// Sum of table scores over a segmentation.
    pub fn total(&self, seg: &Segmentation) -> Result<f64> {
        seg.segments()
            .iter()
            .map(|s| {
                self.get(s.start, s.length, s.cardinality)
                    .ok_or(Error::MissingScore {
                        start: s.start,
                        length: s.length,
                        cardinality: s.cardinality,
                    })
            })
            .sum()
    }

    /// Resumable TSV: a `#` metadata line, a header, then
    /// `start length cardinality kind value` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let meta = serde_json::to_string(&self.meta).expect("metadata serializes");
        let _ = writeln!(out, "# {meta}");
        out.push_str("start\tlength\tcardinality\tkind\tvalue\n");
        let kind = self.meta.kind.name();
        let mut rows: Vec<(&(usize, usize, usize), String)> = self
            .entries
            .iter()
            .map(|(k, v)| (k, format!("{v}")))
            .chain(self.skipped.iter().map(|(k, r)| (k, r.tag().to_string())))
            .collect();
        rows.sort_by_key(|(k, _)| **k);
        for ((s, l, c), v) in rows {
            let _ = writeln!(out, "{s}\t{l}\t{c}\t{kind}\t{v}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let malformed = |line: usize, reason: &str| Error::Malformed {
            what: "score table",
            line,
            reason: reason.into(),
        };
        let mut lines = text.lines().enumerate();
        let meta_line = lines
            .next()
            .and_then(|(_, l)| l.strip_prefix("# "))
            .ok_or_else(|| malformed(1, "missing metadata line"))?;
        let meta: TableMeta = serde_json::from_str(meta_line)?;
        let mut table = ScoreTable::new(meta);
        match lines.next() {
            Some((_, "start\tlength\tcardinality\tkind\tvalue")) => {}
            _ => return Err(malformed(2, "missing header")),
        }
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(malformed(i + 1, "expected 5 fields"));
            }
            let num = |x: &str| x.parse::<usize>().map_err(|_| malformed(i + 1, "bad integer"));
            let (s, l, c) = (num(f[0])?, num(f[1])?, num(f[2])?);
            if f[3] != table.meta.kind.name() {
                return Err(malformed(i + 1, "score kind differs from metadata"));
            }
            match f[4] {
                "skip-cardinality" => table.mark_skipped(s, l, c, SkipReason::Cardinality),
                "skip-extension" => table.mark_skipped(s, l, c, SkipReason::Extension),
                v => {
                    let value: f64 = v.parse().map_err(|_| malformed(i + 1, "bad value"))?;
                    table.insert(s, l, c, value);
                }
            }
        }
        Ok(table)
    }
}

/// Opt-in pruning of the table build.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pruning {
    pub slack: f64,
}

/// Stops the cardinality sweep of one `(s, l)` once a score falls more than
/// `slack` below the running maximum. The offending candidate is dropped;
/// the DP only ever uses the best cardinality of a span, so nothing it
/// would pick is lost.
#[derive(Debug, Clone)]
pub struct CardinalityPruner {
    slack: f64,
    best: f64,
    stopped: bool,
}

impl CardinalityPruner {
    pub fn new(slack: f64) -> Self {
        Self {
            slack,
            best: f64::NEG_INFINITY,
            stopped: false,
        }
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    /// Returns `true` when the candidate should be kept.
    pub fn observe(&mut self, score: f64) -> bool {
        if score < self.best - self.slack {
            self.stopped = true;
            return false;
        }
        self.best = self.best.max(score);
        true
    }
}

/// Heuristic extension bound for one `(s, c)`: tracks how much a segment
/// beats the independent positions it covers, and stops extending once that
/// advantage is negative and has fallen more than `slack` below its best.
#[derive(Debug, Clone)]
pub struct ExtensionPruner {
    slack: f64,
    best_excess: f64,
    stopped: bool,
}

impl ExtensionPruner {
    pub fn new(slack: f64) -> Self {
        Self {
            slack,
            best_excess: f64::NEG_INFINITY,
            stopped: false,
        }
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    pub fn observe(&mut self, score: f64, independent: f64) {
        let excess = score - independent;
        if excess < 0.0 && excess < self.best_excess - self.slack {
            self.stopped = true;
        }
        self.best_excess = self.best_excess.max(excess);
    }
}

fn score_value(
    ds: &AlignedDataset,
    (s, l, c): (usize, usize, usize),
    kind: ScoreKind,
    cfg: &ScoringConfig,
    resume: Option<&ScoreTable>,
) -> Result<f64> {
    if let Some(v) = resume.and_then(|t| t.get(s, l, c)) {
        return Ok(v);
    }
    let v = seg_score(ds, s, l, c, kind, cfg)?.value;
    if !v.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "non-finite score for (s={s}, l={l}, c={c})"
        )));
    }
    Ok(v)
}

/// Score every candidate, in parallel on the current rayon pool.
///
/// Values from `resume` are reused when its metadata matches; results are
/// independent of thread count because every candidate derives its own seed.
pub fn build_score_table(
    ds: &AlignedDataset,
    kind: ScoreKind,
    caps: Caps,
    cfg: &ScoringConfig,
    pruning: Option<Pruning>,
    resume: Option<&ScoreTable>,
) -> Result<ScoreTable> {
    caps.validate()?;
    let meta = TableMeta {
        kind,
        seed: cfg.em.seed,
        n_rows: ds.n_rows(),
        n_cols: ds.n_cols(),
        caps,
        restarts: cfg.em.restarts,
        emission_concentration: cfg.prior.emission_concentration,
    };
    let resume = resume.filter(|t| {
        let same = t.meta.compatible(&meta);
        if !same {
            log::warn!("saved score table does not match this run; rescoring from scratch");
        }
        same
    });
    let mut table = ScoreTable::new(meta);

    match pruning {
        None => {
            let cands = candidates(ds.n_cols(), caps);
            let values: Vec<f64> = cands
                .par_iter()
                .map(|&k| score_value(ds, k, kind, cfg, resume))
                .collect::<Result<_>>()?;
            for ((s, l, c), v) in cands.into_iter().zip(values) {
                table.insert(s, l, c, v);
            }
        }
        Some(p) => build_pruned(ds, kind, caps, cfg, p.slack, resume, &mut table)?,
    }
    Ok(table)
}

type StartResult = (Vec<((usize, usize, usize), f64)>, Vec<((usize, usize, usize), SkipReason)>);

fn build_pruned(
    ds: &AlignedDataset,
    kind: ScoreKind,
    caps: Caps,
    cfg: &ScoringConfig,
    slack: f64,
    resume: Option<&ScoreTable>,
    table: &mut ScoreTable,
) -> Result<()> {
    let n = ds.n_cols();
    let singles: Vec<f64> = (1..=n)
        .into_par_iter()
        .map(|s| score_value(ds, (s, 1, 1), kind, cfg, resume))
        .collect::<Result<_>>()?;
    for (i, v) in singles.iter().enumerate() {
        table.insert(i + 1, 1, 1, *v);
    }

    let per_start: Vec<StartResult> = (1..n)
        .into_par_iter()
        .map(|s| -> Result<StartResult> {
            let mut kept = Vec::new();
            let mut skipped = Vec::new();
            let mut ext: Vec<ExtensionPruner> =
                (0..=caps.max_card).map(|_| ExtensionPruner::new(slack)).collect();
            let max_l = caps.max_len.min(n - s + 1);
            for l in 2..=max_l {
                let independent: f64 = singles[s - 1..s - 1 + l].iter().sum();
                let mut card = CardinalityPruner::new(slack);
                for c in 2..=caps.max_card {
                    if ext[c].stopped() {
                        skipped.push(((s, l, c), SkipReason::Extension));
                        continue;
                    }
                    if card.stopped() {
                        skipped.push(((s, l, c), SkipReason::Cardinality));
                        continue;
                    }
                    let v = score_value(ds, (s, l, c), kind, cfg, resume)?;
                    if card.observe(v) {
                        kept.push(((s, l, c), v));
                    } else {
                        skipped.push(((s, l, c), SkipReason::Cardinality));
                    }
                    ext[c].observe(v, independent);
                }
            }
            Ok((kept, skipped))
        })
        .collect::<Result<_>>()?;

    for (kept, skipped) in per_start {
        for ((s, l, c), v) in kept {
            table.insert(s, l, c, v);
        }
        for ((s, l, c), reason) in skipped {
            log::debug!("pruned candidate (s={s}, l={l}, c={c}): {reason:?}");
            table.mark_skipped(s, l, c, reason);
        }
    }
    let n_skipped = table.skipped.len();
    if n_skipped > 0 {
        log::info!("pruning skipped {n_skipped} candidates");
    }
    Ok(())
}

/// Best prefix scores and back-pointers.
#[derive(Debug, Clone, PartialEq)]
pub struct DpState {
    /// `best[i]`: score of the best segmentation of positions `1..=i`.
    pub best: Vec<f64>,
    /// `last[i - 1]`: `(length, cardinality)` of the final segment of that optimum.
    pub last: Vec<(usize, usize)>,
}

pub fn fill_dp(table: &ScoreTable) -> Result<DpState> {
    let n = table.n_cols();
    let caps = table.caps();
    let mut best = vec![0.0; n + 1];
    let mut last = Vec::with_capacity(n);
    for i in 1..=n {
        let mut top = f64::NEG_INFINITY;
        let mut arg = None;
        // ascending l then c with strict improvement: shorter, then simpler, wins ties
        for l in 1..=caps.max_len.min(i) {
            let s = i - l + 1;
            for c in cardinalities(l, caps.max_card) {
                let Some(v) = table.get(s, l, c) else {
                    if table.is_skipped(s, l, c) {
                        continue;
                    }
                    return Err(Error::MissingScore {
                        start: s,
                        length: l,
                        cardinality: c,
                    });
                };
                let cand = best[i - l] + v;
                if cand > top {
                    top = cand;
                    arg = Some((l, c));
                }
            }
        }
        let arg = arg.ok_or(Error::MissingScore {
            start: i,
            length: 1,
            cardinality: 1,
        })?;
        best[i] = top;
        last.push(arg);
    }
    Ok(DpState { best, last })
}

/// Maximum-score complete segmentation and its total.
pub fn optimal_segmentation(table: &ScoreTable) -> Result<(Segmentation, f64)> {
    let n = table.n_cols();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let dp = fill_dp(table)?;
    let mut segments = Vec::new();
    let mut i = n;
    while i > 0 {
        let (l, c) = dp.last[i - 1];
        segments.push(Segment::new(i - l + 1, l, c));
        i -= l;
    }
    segments.reverse();
    Ok((Segmentation::new(segments)?, dp.best[n]))
}

/// Repeatedly commit the non-overlapping candidate with the highest
/// per-position score until every position is covered.
pub fn greedy_segmentation(table: &ScoreTable) -> Result<(Segmentation, f64)> {
    let n = table.n_cols();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut cands: Vec<((usize, usize, usize), f64)> = table.iter().collect();
    cands.sort_by(|(ka, va), (kb, vb)| {
        let na = va / ka.1 as f64;
        let nb = vb / kb.1 as f64;
        nb.total_cmp(&na).then(ka.cmp(kb))
    });
    let mut covered = vec![false; n];
    let mut remaining = n;
    let mut chosen = Vec::new();
    for ((s, l, c), v) in cands {
        if remaining == 0 {
            break;
        }
        if s + l - 1 > n || covered[s - 1..s - 1 + l].iter().any(|x| *x) {
            continue;
        }
        covered[s - 1..s - 1 + l].iter_mut().for_each(|x| *x = true);
        remaining -= l;
        chosen.push((Segment::new(s, l, c), v));
    }
    if remaining > 0 {
        let i = covered.iter().position(|x| !x).unwrap_or(0);
        return Err(Error::MissingScore {
            start: i + 1,
            length: 1,
            cardinality: 1,
        });
    }
    chosen.sort_by_key(|(seg, _)| seg.start);
    let total = chosen.iter().map(|(_, v)| v).sum();
    let segments = chosen.into_iter().map(|(s, _)| s).collect();
    Ok((Segmentation::new(segments)?, total))
}
