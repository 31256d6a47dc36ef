//! Aligned sequence matrices with missing entries.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_from, stream};

/// Ordered set of distinct symbol tokens. A symbol's index is its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Alphabet {
    symbols: Vec<String>,
}

impl Alphabet {
    pub fn new<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        let mut seen = BTreeSet::new();
        for s in &symbols {
            if s.is_empty() {
                return Err(Error::InvalidParameter("empty alphabet symbol".into()));
            }
            if !seen.insert(s.as_str()) {
                return Err(Error::DuplicateSymbol(s.clone()));
            }
        }
        if symbols.len() < 2 {
            return Err(Error::AlphabetTooSmall(symbols.len()));
        }
        if symbols.len() > u16::MAX as usize {
            return Err(Error::InvalidParameter("alphabet too large".into()));
        }
        Ok(Self { symbols })
    }

    /// `A..` for up to 26 symbols, otherwise `s0, s1, ...`.
    pub fn letters(size: usize) -> Result<Self> {
        if size <= 26 {
            Self::new((0..size).map(|i| char::from(b'A' + i as u8).to_string()))
        } else {
            Self::new((0..size).map(|i| format!("s{i}")))
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, index: u16) -> &str {
        &self.symbols[index as usize]
    }

    pub fn index_of(&self, token: &str) -> Option<u16> {
        self.symbols
            .iter()
            .position(|s| s == token)
            .map(|i| i as u16)
    }

    fn single_chars(&self) -> bool {
        self.symbols.iter().all(|s| s.chars().count() == 1)
    }
}

impl TryFrom<Vec<String>> for Alphabet {
    type Error = Error;

    fn try_from(value: Vec<String>) -> Result<Self> {
        Alphabet::new(value)
    }
}

impl From<Alphabet> for Vec<String> {
    fn from(a: Alphabet) -> Self {
        a.symbols
    }
}

/// A single matrix cell: a symbol index or `None` when missing.
pub type Entry = Option<u16>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Matrix,
    Fasta,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matrix" => Ok(Format::Matrix),
            "fasta" => Ok(Format::Fasta),
            other => Err(Error::InvalidParameter(format!("unknown format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParseOptions {
    pub format: Format,
    pub missing_token: String,
    /// Token separator. `None` means one character per position; a
    /// whitespace delimiter splits on any run of whitespace.
    pub delimiter: Option<char>,
    /// Fixes symbol order; inferred (sorted) when absent.
    pub alphabet: Option<Alphabet>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            format: Format::Matrix,
            missing_token: "?".into(),
            delimiter: None,
            alphabet: None,
        }
    }
}

/// N aligned sequences of length L over a shared alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDataset {
    alphabet: Alphabet,
    n_rows: usize,
    n_cols: usize,
    entries: Vec<Entry>,
    labels: Option<Vec<String>>,
}

impl AlignedDataset {
    /// Build from row-major entries. Every present entry must index into `alphabet`.
    pub fn from_rows(alphabet: Alphabet, rows: Vec<Vec<Entry>>) -> Result<Self> {
        let n_rows = rows.len();
        if n_rows == 0 {
            return Err(Error::EmptyInput);
        }
        let n_cols = rows[0].len();
        if n_cols == 0 {
            return Err(Error::EmptyInput);
        }
        let mut entries = Vec::with_capacity(n_rows * n_cols);
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::RaggedRow {
                    row: r + 1,
                    expected: n_cols,
                    found: row.len(),
                });
            }
            for (c, e) in row.iter().enumerate() {
                if let Some(v) = e {
                    if *v as usize >= alphabet.len() {
                        return Err(Error::UnknownSymbol {
                            row: r + 1,
                            col: c + 1,
                            token: format!("#{v}"),
                        });
                    }
                }
            }
            entries.extend(row);
        }
        Ok(Self {
            alphabet,
            n_rows,
            n_cols,
            entries,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_rows {
            return Err(Error::InvalidParameter(format!(
                "{} labels for {} rows",
                labels.len(),
                self.n_rows
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    /// Number of sequences (N).
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// Sequence length (L).
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Label of row `r`, or its 1-based index.
    pub fn row_label(&self, r: usize) -> String {
        match &self.labels {
            Some(l) => l[r].clone(),
            None => (r + 1).to_string(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Entry {
        self.entries[row * self.n_cols + col]
    }

    pub fn row(&self, row: usize) -> &[Entry] {
        &self.entries[row * self.n_cols..(row + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Entry]> {
        self.entries.chunks_exact(self.n_cols)
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = Entry> + '_ {
        (0..self.n_rows).map(move |r| self.get(r, col))
    }

    pub fn observed_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn missing_count(&self) -> usize {
        self.entries.len() - self.observed_count()
    }

    pub fn column_observed_count(&self, col: usize) -> usize {
        self.column(col).filter(Option::is_some).count()
    }

    /// Per-symbol counts of observed entries in `col`.
    pub fn column_counts(&self, col: usize) -> Vec<usize> {
        let mut counts = vec![0; self.alphabet.len()];
        for v in self.column(col).flatten() {
            counts[v as usize] += 1;
        }
        counts
    }

    /// New dataset holding the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> AlignedDataset {
        let mut entries = Vec::with_capacity(rows.len() * self.n_cols);
        for &r in rows {
            entries.extend_from_slice(self.row(r));
        }
        AlignedDataset {
            alphabet: self.alphabet.clone(),
            n_rows: rows.len(),
            n_cols: self.n_cols,
            entries,
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r].clone()).collect()),
        }
    }

    fn set(&mut self, row: usize, col: usize, value: Entry) {
        self.entries[row * self.n_cols + col] = value;
    }

    /// Render as the matrix text format.
    pub fn to_matrix(&self, missing_token: &str, delimiter: Option<char>) -> Result<String> {
        if delimiter.is_none() {
            if !self.alphabet.single_chars() {
                let bad = self
                    .alphabet
                    .symbols()
                    .iter()
                    .find(|s| s.chars().count() != 1)
                    .cloned()
                    .unwrap_or_default();
                return Err(Error::TokenNeedsDelimiter(bad));
            }
            if missing_token.chars().count() != 1 {
                return Err(Error::TokenNeedsDelimiter(missing_token.into()));
            }
        }
        let mut out = String::new();
        for row in self.rows() {
            for (i, e) in row.iter().enumerate() {
                if i > 0 {
                    if let Some(d) = delimiter {
                        out.push(d);
                    }
                }
                match e {
                    Some(v) => out.push_str(self.alphabet.symbol(*v)),
                    None => out.push_str(missing_token),
                }
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_fasta(&self, missing_token: &str) -> Result<String> {
        let body = self.to_matrix(missing_token, None)?;
        let mut out = String::new();
        for (r, line) in body.lines().enumerate() {
            let _ = writeln!(out, ">{}", self.row_label(r));
            out.push_str(line);
            out.push('\n');
        }
        Ok(out)
    }
}

fn tokenize(line: &str, delimiter: Option<char>) -> Vec<&str> {
    match delimiter {
        None => line
            .char_indices()
            .map(|(i, ch)| &line[i..i + ch.len_utf8()])
            .collect(),
        Some(d) if d.is_whitespace() => line.split_whitespace().collect(),
        Some(d) => line.split(d).map(str::trim).collect(),
    }
}

/// Parse a matrix or FASTA alignment.
pub fn parse_alignment(text: &str, opts: &ParseOptions) -> Result<AlignedDataset> {
    if opts.missing_token.is_empty() {
        return Err(Error::InvalidParameter("empty missing token".into()));
    }
    let mut labels = Vec::new();
    let mut raw: Vec<Vec<String>> = Vec::new();
    match opts.format {
        Format::Matrix => {
            for line in text.lines().map(|l| l.trim_end_matches('\r')) {
                if line.trim().is_empty() {
                    continue;
                }
                raw.push(
                    tokenize(line, opts.delimiter)
                        .into_iter()
                        .map(String::from)
                        .collect(),
                );
            }
        }
        Format::Fasta => {
            for (lineno, line) in text.lines().map(|l| l.trim_end_matches('\r')).enumerate() {
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                if let Some(header) = trimmed.strip_prefix('>') {
                    labels.push(header.trim().to_string());
                    raw.push(Vec::new());
                } else {
                    let Some(current) = raw.last_mut() else {
                        return Err(Error::Malformed {
                            what: "FASTA",
                            line: lineno + 1,
                            reason: "sequence data before the first header".into(),
                        });
                    };
                    current.extend(
                        tokenize(trimmed, opts.delimiter)
                            .into_iter()
                            .map(String::from),
                    );
                }
            }
        }
    }
    if raw.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n_cols = raw[0].len();
    if n_cols == 0 {
        return Err(Error::EmptyInput);
    }
    for (r, row) in raw.iter().enumerate() {
        if row.len() != n_cols {
            return Err(Error::RaggedRow {
                row: r + 1,
                expected: n_cols,
                found: row.len(),
            });
        }
    }

    let alphabet = match &opts.alphabet {
        Some(a) => {
            if a.index_of(&opts.missing_token).is_some() {
                return Err(Error::MissingTokenCollision(opts.missing_token.clone()));
            }
            a.clone()
        }
        None => {
            let set: BTreeSet<&str> = raw
                .iter()
                .flatten()
                .map(String::as_str)
                .filter(|t| *t != opts.missing_token)
                .collect();
            Alphabet::new(set)?
        }
    };

    let mut rows = Vec::with_capacity(raw.len());
    for (r, row) in raw.iter().enumerate() {
        let mut out = Vec::with_capacity(n_cols);
        for (c, tok) in row.iter().enumerate() {
            if *tok == opts.missing_token {
                out.push(None);
            } else {
                let v = alphabet.index_of(tok).ok_or_else(|| Error::UnknownSymbol {
                    row: r + 1,
                    col: c + 1,
                    token: tok.clone(),
                })?;
                out.push(Some(v));
            }
        }
        rows.push(out);
    }
    let ds = AlignedDataset::from_rows(alphabet, rows)?;
    if opts.format == Format::Fasta {
        ds.with_labels(labels)
    } else {
        Ok(ds)
    }
}

/// A hidden cell and the value it held before masking (0-based coordinates).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedCell {
    pub row: usize,
    pub col: usize,
    pub original: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskRecord {
    pub cells: Vec<MaskedCell>,
}

impl MaskRecord {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Put the original values back.
    pub fn restore(&self, masked: &AlignedDataset) -> AlignedDataset {
        let mut ds = masked.clone();
        for cell in &self.cells {
            ds.set(cell.row, cell.col, Some(cell.original));
        }
        ds
    }

    /// TSV with 1-based `row`, `col` and the original symbol token.
    pub fn to_tsv(&self, alphabet: &Alphabet) -> String {
        let mut out = String::from("row\tcol\toriginal_symbol\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                c.row + 1,
                c.col + 1,
                alphabet.symbol(c.original)
            );
        }
        out
    }

    pub fn from_tsv(text: &str, alphabet: &Alphabet) -> Result<Self> {
        let mut cells = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: &str| Error::Malformed {
                what: "mask TSV",
                line: i + 1,
                reason: reason.into(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad("expected 3 fields"));
            }
            let row: usize = f[0].parse().map_err(|_| bad("bad row"))?;
            let col: usize = f[1].parse().map_err(|_| bad("bad col"))?;
            if row == 0 || col == 0 {
                return Err(bad("coordinates are 1-based"));
            }
            let original = alphabet.index_of(f[2]).ok_or_else(|| bad("unknown symbol"))?;
            cells.push(MaskedCell {
                row: row - 1,
                col: col - 1,
                original,
            });
        }
        Ok(Self { cells })
    }
}

/// Hide `round(rate * observed)` observed cells, chosen uniformly without replacement.
pub fn mask_entries(
    ds: &AlignedDataset,
    rate: f64,
    seed: u64,
) -> Result<(AlignedDataset, MaskRecord)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!(
            "mask rate {rate} outside [0, 1]"
        )));
    }
    let observed: Vec<usize> = ds
        .entries
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.map(|_| i))
        .collect();
    let k = (rate * observed.len() as f64).round() as usize;
    let mut rng = rng_from(&[stream::MASK, seed]);
    let mut picked: Vec<usize> = index::sample(&mut rng, observed.len(), k)
        .into_iter()
        .map(|i| observed[i])
        .collect();
    picked.sort_unstable();

    let mut masked = ds.clone();
    let cells = picked
        .into_iter()
        .map(|flat| {
            let original = ds.entries[flat].expect("observed cell");
            masked.entries[flat] = None;
            MaskedCell {
                row: flat / ds.n_cols,
                col: flat % ds.n_cols,
                original,
            }
        })
        .collect();
    Ok((masked, MaskRecord { cells }))
}

fn argmax_count(counts: &[usize]) -> u16 {
    // first maximum wins, i.e. lowest alphabet index
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best as u16
}

/// Most frequent observed symbol in `col`; ties go to the lowest index.
pub fn column_majority(ds: &AlignedDataset, col: usize) -> Result<u16> {
    let counts = ds.column_counts(col);
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::AllMissingColumn(col + 1));
    }
    Ok(argmax_count(&counts))
}

/// Most frequent observed symbol over the whole matrix.
pub fn global_majority(ds: &AlignedDataset) -> Result<u16> {
    let mut counts = vec![0usize; ds.alphabet.len()];
    for v in ds.entries.iter().flatten() {
        counts[*v as usize] += 1;
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::EmptyInput);
    }
    Ok(argmax_count(&counts))
}

/// Fraction of observed entries that differ from the global majority symbol.
pub fn minority_fraction(ds: &AlignedDataset) -> Result<f64> {
    let major = global_majority(ds)?;
    let observed = ds.observed_count();
    let minority = ds.entries.iter().flatten().filter(|&&v| v != major).count();
    Ok(minority as f64 / observed as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MajorityRule {
    #[default]
    PerColumn,
    Global,
}

/// Error rate of majority prediction over the masked cells, computed from
/// the masked dataset and the record alone. `None` when nothing was masked.
///
/// Under [`MajorityRule::PerColumn`], a column left with no observed entries
/// falls back to the global majority.
pub fn majority_error(
    masked: &AlignedDataset,
    record: &MaskRecord,
    rule: MajorityRule,
) -> Result<Option<f64>> {
    if record.is_empty() {
        return Ok(None);
    }
    let global = global_majority(masked)?;
    let mut wrong = 0usize;
    for cell in &record.cells {
        let guess = match rule {
            MajorityRule::Global => global,
            MajorityRule::PerColumn => column_majority(masked, cell.col).unwrap_or(global),
        };
        if guess != cell.original {
            wrong += 1;
        }
    }
    Ok(Some(wrong as f64 / record.len() as f64))
}
