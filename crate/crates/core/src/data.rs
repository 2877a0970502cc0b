//! Multiply-imputed regression data: datasets, masks, imputed stacks,
//! standardization and the CSV formats used on disk.
//!
//! Missingness follows the `R_ij = 0 ⇔ missing` convention. On disk a
//! long CSV carries an integer `.imp` column (1-based), the outcome `y` and
//! then one column per covariate. Numbers are written with 17 significant
//! digits so that every finite `f64` survives a write/read cycle exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Binary,
}

impl ColumnKind {
    /// A column is binary iff every (observed) value is exactly 0 or 1.
    pub fn infer<'a, I: IntoIterator<Item = &'a f64>>(values: I) -> Self {
        if values.into_iter().all(|&v| v == 0.0 || v == 1.0) {
            ColumnKind::Binary
        } else {
            ColumnKind::Continuous
        }
    }
}

/// One complete regression dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    column_names: Vec<String>,
    column_kinds: Vec<ColumnKind>,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        column_names: Vec<String>,
        column_kinds: Vec<ColumnKind>,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        if n < 2 {
            return Err(Error::Dimension(format!("need n >= 2 rows, got {n}")));
        }
        if p < 1 {
            return Err(Error::Dimension("need at least one covariate".into()));
        }
        if y.len() != n {
            return Err(Error::Dimension(format!(
                "outcome has {} rows, covariates have {n}",
                y.len()
            )));
        }
        if column_names.len() != p || column_kinds.len() != p {
            return Err(Error::Dimension(format!(
                "{p} covariates but {} names and {} kinds",
                column_names.len(),
                column_kinds.len()
            )));
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite covariate at ({},{})",
                pos % n,
                pos / n
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite outcome at row {i}")));
        }
        for (j, kind) in column_kinds.iter().enumerate() {
            if *kind == ColumnKind::Binary && ColumnKind::infer(x.column(j).iter()) != ColumnKind::Binary
            {
                return Err(Error::Schema(format!(
                    "column `{}` is declared binary but holds values outside {{0,1}}",
                    column_names[j]
                )));
            }
        }
        Ok(Self {
            x,
            y,
            column_names,
            column_kinds,
        })
    }

    /// Builds a dataset with kinds inferred from the values.
    pub fn with_inferred_kinds(
        x: DMatrix<f64>,
        y: DVector<f64>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let kinds = (0..x.ncols())
            .map(|j| ColumnKind::infer(x.column(j).iter()))
            .collect();
        Self::new(x, y, column_names, kinds)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn column_kinds(&self) -> &[ColumnKind] {
        &self.column_kinds
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Rows selected by `keep`, in order.
    pub fn subset_rows(&self, keep: &[usize]) -> Result<Self> {
        let x = DMatrix::from_fn(keep.len(), self.p(), |i, j| self.x[(keep[i], j)]);
        let y = DVector::from_fn(keep.len(), |i, _| self.y[keep[i]]);
        Self::new(x, y, self.column_names.clone(), self.column_kinds.clone())
    }
}

pub fn default_column_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// A dataset with missing covariate cells. The outcome is always observed.
#[derive(Debug, Clone, PartialEq)]
pub struct IncompleteDataset {
    /// Missing cells hold `NaN`.
    x: DMatrix<f64>,
    y: DVector<f64>,
    /// `true` where `R_ij = 1` (observed).
    observed: DMatrix<bool>,
    column_names: Vec<String>,
    column_kinds: Vec<ColumnKind>,
}

impl IncompleteDataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        observed: DMatrix<bool>,
        column_names: Vec<String>,
        column_kinds: Option<Vec<ColumnKind>>,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        if observed.shape() != (n, p) {
            return Err(Error::Dimension(format!(
                "mask is {:?}, covariates are {:?}",
                observed.shape(),
                (n, p)
            )));
        }
        if y.len() != n || column_names.len() != p {
            return Err(Error::Dimension("outcome or names do not match covariates".into()));
        }
        if n < 2 || p < 1 {
            return Err(Error::Dimension(format!("need n >= 2 and p >= 1, got {n}x{p}")));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("outcome missing or non-finite at row {i}")));
        }
        let mut x = x;
        for j in 0..p {
            let mut count = 0;
            for i in 0..n {
                if observed[(i, j)] {
                    if !x[(i, j)].is_finite() {
                        return Err(Error::NonNumeric { row: i, col: j });
                    }
                    count += 1;
                } else {
                    x[(i, j)] = f64::NAN;
                }
            }
            if count < 2 {
                return Err(Error::Schema(format!(
                    "column `{}` has {count} observed values (need >= 2)",
                    column_names[j]
                )));
            }
        }
        let kinds = match column_kinds {
            Some(k) => {
                if k.len() != p {
                    return Err(Error::Dimension("column kinds length".into()));
                }
                k
            }
            None => (0..p)
                .map(|j| {
                    ColumnKind::infer(
                        x.column(j).iter().zip(observed.column(j).iter()).filter(|(_, o)| **o).map(|(v, _)| v),
                    )
                })
                .collect(),
        };
        Ok(Self {
            x,
            y,
            observed,
            column_names,
            column_kinds: kinds,
        })
    }

    /// Wraps a complete dataset with an all-observed mask.
    pub fn from_complete(data: &Dataset) -> Self {
        Self {
            x: data.x.clone(),
            y: data.y.clone(),
            observed: DMatrix::from_element(data.n(), data.p(), true),
            column_names: data.column_names.clone(),
            column_kinds: data.column_kinds.clone(),
        }
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn observed(&self) -> &DMatrix<bool> {
        &self.observed
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[(i, j)]
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn column_kinds(&self) -> &[ColumnKind] {
        &self.column_kinds
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn missing_count(&self, j: usize) -> usize {
        self.observed.column(j).iter().filter(|o| !**o).count()
    }

    pub fn total_missing(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }

    pub fn complete_case_rows(&self) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| (0..self.p()).all(|j| self.observed[(i, j)]))
            .collect()
    }

    /// Rows with no masked entry, as a complete dataset.
    pub fn complete_cases(&self) -> Result<Dataset> {
        let rows = self.complete_case_rows();
        let x = DMatrix::from_fn(rows.len(), self.p(), |i, j| self.x[(rows[i], j)]);
        let y = DVector::from_fn(rows.len(), |i, _| self.y[rows[i]]);
        Dataset::new(x, y, self.column_names.clone(), self.column_kinds.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Simulated,
    Imputed,
    Loaded,
}

/// `D` completed datasets sharing one column schema.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedStack {
    datasets: Vec<Dataset>,
    provenance: Provenance,
}

impl ImputedStack {
    pub fn new(datasets: Vec<Dataset>, provenance: Provenance) -> Result<Self> {
        let first = datasets
            .first()
            .ok_or_else(|| Error::Schema("an imputed stack needs at least one dataset".into()))?;
        for (d, ds) in datasets.iter().enumerate().skip(1) {
            if ds.n() != first.n() || ds.p() != first.p() {
                return Err(Error::Schema(format!(
                    "imputation {} is {}x{}, imputation 1 is {}x{}",
                    d + 1,
                    ds.n(),
                    ds.p(),
                    first.n(),
                    first.p()
                )));
            }
            if ds.column_names() != first.column_names() {
                return Err(Error::Schema(format!(
                    "imputation {} has different column names",
                    d + 1
                )));
            }
        }
        if datasets.len() < 2 {
            log::debug!("imputed stack has D = 1; models degenerate to single-dataset fits");
        }
        Ok(Self {
            datasets,
            provenance,
        })
    }

    /// `D` identical copies of a complete dataset.
    pub fn replicate(data: &Dataset, d: usize, provenance: Provenance) -> Result<Self> {
        Self::new(vec![data.clone(); d.max(1)], provenance)
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    pub fn dataset(&self, d: usize) -> &Dataset {
        &self.datasets[d]
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn d(&self) -> usize {
        self.datasets.len()
    }

    pub fn n(&self) -> usize {
        self.datasets[0].n()
    }

    pub fn p(&self) -> usize {
        self.datasets[0].p()
    }

    pub fn column_names(&self) -> &[String] {
        self.datasets[0].column_names()
    }

    /// Whether every cell observed in `source` is identical in every dataset.
    pub fn agrees_with_observed(&self, source: &IncompleteDataset) -> bool {
        if source.n() != self.n() || source.p() != self.p() {
            return false;
        }
        self.datasets.iter().all(|ds| {
            (0..self.n()).all(|i| {
                ds.y()[i].to_bits() == source.y()[i].to_bits()
                    && (0..self.p()).all(|j| {
                        !source.is_observed(i, j) || ds.x()[(i, j)].to_bits() == source.x()[(i, j)].to_bits()
                    })
            })
        })
    }
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Column means and standard deviations per imputed dataset, plus outcome means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationState {
    /// `x_mean[d][j]`.
    pub x_mean: Vec<Vec<f64>>,
    /// `x_sd[d][j]`, sample standard deviation (denominator n-1).
    pub x_sd: Vec<Vec<f64>>,
    pub y_mean: Vec<f64>,
}

impl StandardizationState {
    pub fn identity(d: usize, p: usize) -> Self {
        Self {
            x_mean: vec![vec![0.0; p]; d],
            x_sd: vec![vec![1.0; p]; d],
            y_mean: vec![0.0; d],
        }
    }

    pub fn d(&self) -> usize {
        self.y_mean.len()
    }

    pub fn p(&self) -> usize {
        self.x_mean.first().map_or(0, Vec::len)
    }
}

/// Per-imputation centered and scaled covariates with centered outcomes.
#[derive(Debug, Clone)]
pub struct StandardizedStack {
    x: Vec<DMatrix<f64>>,
    y: Vec<DVector<f64>>,
    state: StandardizationState,
    original: ImputedStack,
}

/// Centers and scales each covariate and centers the outcome, separately in
/// every imputed dataset.
pub fn standardize(stack: &ImputedStack) -> Result<StandardizedStack> {
    let mut xs = Vec::with_capacity(stack.d());
    let mut ys = Vec::with_capacity(stack.d());
    let mut state = StandardizationState {
        x_mean: Vec::new(),
        x_sd: Vec::new(),
        y_mean: Vec::new(),
    };
    for (d, ds) in stack.datasets().iter().enumerate() {
        let n = ds.n();
        let mut means = Vec::with_capacity(ds.p());
        let mut sds = Vec::with_capacity(ds.p());
        for j in 0..ds.p() {
            let col = ds.x().column(j);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let sd = var.sqrt();
            if !(sd > 1e-12 * mean.abs().max(1.0)) {
                return Err(Error::ZeroVariance {
                    column: ds.column_names()[j].clone(),
                    dataset: d + 1,
                });
            }
            means.push(mean);
            sds.push(sd);
        }
        let x = DMatrix::from_fn(n, ds.p(), |i, j| (ds.x()[(i, j)] - means[j]) / sds[j]);
        let y_mean = ds.y().mean();
        let y = ds.y().map(|v| v - y_mean);
        xs.push(x);
        ys.push(y);
        state.x_mean.push(means);
        state.x_sd.push(sds);
        state.y_mean.push(y_mean);
    }
    Ok(StandardizedStack {
        x: xs,
        y: ys,
        state,
        original: stack.clone(),
    })
}

impl StandardizedStack {
    /// Wraps data that is already centered and scaled; the state is the identity.
    pub fn from_standardized(x: Vec<DMatrix<f64>>, y: Vec<DVector<f64>>) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Dimension("need matching, non-empty x and y lists".into()));
        }
        let p = x[0].ncols();
        let names = default_column_names(p);
        let datasets = x
            .iter()
            .zip(&y)
            .map(|(xd, yd)| {
                Dataset::new(
                    xd.clone(),
                    yd.clone(),
                    names.clone(),
                    vec![ColumnKind::Continuous; p],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let original = ImputedStack::new(datasets, Provenance::Simulated)?;
        Ok(Self {
            state: StandardizationState::identity(x.len(), p),
            x,
            y,
            original,
        })
    }

    pub fn x(&self, d: usize) -> &DMatrix<f64> {
        &self.x[d]
    }

    pub fn y(&self, d: usize) -> &DVector<f64> {
        &self.y[d]
    }

    pub fn state(&self) -> &StandardizationState {
        &self.state
    }

    pub fn original(&self) -> &ImputedStack {
        &self.original
    }

    pub fn d(&self) -> usize {
        self.x.len()
    }

    pub fn n(&self) -> usize {
        self.x[0].nrows()
    }

    pub fn p(&self) -> usize {
        self.x[0].ncols()
    }

    pub fn column_names(&self) -> &[String] {
        self.original.column_names()
    }

    /// The standardized values as an ordinary stack (all columns continuous).
    pub fn to_stack(&self) -> Result<ImputedStack> {
        let names = self.column_names().to_vec();
        let datasets = self
            .x
            .iter()
            .zip(&self.y)
            .map(|(x, y)| {
                Dataset::new(
                    x.clone(),
                    y.clone(),
                    names.clone(),
                    vec![ColumnKind::Continuous; x.ncols()],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        ImputedStack::new(datasets, self.original.provenance())
    }

    /// Undoes the transform, returning covariates and outcomes on the original scale.
    pub fn invert(&self) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        self.x
            .iter()
            .zip(&self.y)
            .enumerate()
            .map(|(d, (x, y))| {
                let m = &self.state.x_mean[d];
                let s = &self.state.x_sd[d];
                let xo = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * s[j] + m[j]);
                let yo = y.map(|v| v + self.state.y_mean[d]);
                (xo, yo)
            })
            .collect()
    }
}

/// Coefficients on the original scale, one row per imputed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub intercept: Vec<f64>,
    /// `D × p`.
    pub beta: DMatrix<f64>,
}

/// Maps standardized-scale slopes (`D × p`) back to the original scale and
/// recovers the intercepts.
pub fn destandardize_coefficients(
    beta_std: &DMatrix<f64>,
    state: &StandardizationState,
) -> Result<Coefficients> {
    let (d, p) = beta_std.shape();
    if d != state.d() || p != state.p() {
        return Err(Error::Dimension(format!(
            "coefficients are {d}x{p}, standardization covers {}x{}",
            state.d(),
            state.p()
        )));
    }
    let mut beta = DMatrix::zeros(d, p);
    let mut intercept = vec![0.0; d];
    for k in 0..d {
        let mut shift = 0.0;
        for j in 0..p {
            let b = beta_std[(k, j)] / state.x_sd[k][j];
            beta[(k, j)] = b;
            shift += state.x_mean[k][j] * b;
        }
        intercept[k] = state.y_mean[k] - shift;
    }
    Ok(Coefficients { intercept, beta })
}

/// Destandardizes one flat draw laid out `d`-major (`index = d·p + j`) in
/// place, writing intercepts to `intercepts`.
pub(crate) fn destandardize_flat(
    beta_std: &[f64],
    state: &StandardizationState,
    out: &mut [f64],
    intercepts: &mut [f64],
) {
    let p = state.p();
    for (k, icpt) in intercepts.iter_mut().enumerate() {
        let mut shift = 0.0;
        for j in 0..p {
            let b = beta_std[k * p + j] / state.x_sd[k][j];
            out[k * p + j] = b;
            shift += state.x_mean[k][j] * b;
        }
        *icpt = state.y_mean[k] - shift;
    }
}

// ---------------------------------------------------------------------------
// CSV formats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackFormat {
    LongCsv,
    MultiFile,
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        // keeps -0.0 distinguishable
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    format!("{v:.16e}")
}

fn parse_cell(s: &str, row: usize, col: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or(Error::NonNumeric { row, col })
}

fn is_missing_token(s: &str) -> bool {
    matches!(s.trim(), "" | "NA" | "NaN" | "nan" | "na" | ".")
}

fn open_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn read_records(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut rdr = open_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect::<Vec<_>>();
    let records = rdr
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::csv(path, e))?;
    Ok((headers, records))
}

fn parse_block(
    records: &[&csv::StringRecord],
    y_col: usize,
    x_cols: &[usize],
    row_offset: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = records.len();
    let mut x = DMatrix::zeros(n, x_cols.len());
    let mut y = DVector::zeros(n);
    for (i, rec) in records.iter().enumerate() {
        y[i] = parse_cell(&rec[y_col], row_offset + i, y_col)?;
        for (j, &c) in x_cols.iter().enumerate() {
            x[(i, j)] = parse_cell(&rec[c], row_offset + i, c)?;
        }
    }
    Ok((x, y))
}

fn infer_stack_kinds(blocks: &[(DMatrix<f64>, DVector<f64>)]) -> Vec<ColumnKind> {
    let p = blocks[0].0.ncols();
    (0..p)
        .map(|j| ColumnKind::infer(blocks.iter().flat_map(|(x, _)| x.column(j).into_iter())))
        .collect()
}

/// Reads an imputed stack from a long CSV (`path` is the file) or from
/// `stem_1.csv … stem_D.csv` (`path` is the stem, with or without `.csv`).
pub fn load_stack(path: &Path, format: StackFormat) -> Result<ImputedStack> {
    match format {
        StackFormat::LongCsv => load_long_csv(path),
        StackFormat::MultiFile => load_multi_file(path),
    }
}

fn load_long_csv(path: &Path) -> Result<ImputedStack> {
    let (headers, records) = read_records(path)?;
    let imp_col = headers
        .iter()
        .position(|h| h == ".imp")
        .ok_or(Error::MissingImpColumn)?;
    let y_col = headers
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| Error::Schema("missing `y` column".into()))?;
    let x_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != imp_col && c != y_col).collect();
    let names: Vec<String> = x_cols.iter().map(|&c| headers[c].clone()).collect();

    let mut groups: BTreeMap<usize, Vec<(usize, &csv::StringRecord)>> = BTreeMap::new();
    for (row, rec) in records.iter().enumerate() {
        let imp = rec[imp_col]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::NonNumeric { row, col: imp_col })?;
        groups.entry(imp).or_default().push((row, rec));
    }
    let d = groups.len();
    if groups.keys().copied().ne(1..=d) {
        return Err(Error::Schema(format!(
            "`.imp` values must be 1..D, found {:?}",
            groups.keys().collect::<Vec<_>>()
        )));
    }
    let n = groups[&1].len();
    let mut blocks = Vec::with_capacity(d);
    for (imp, rows) in &groups {
        if rows.len() != n {
            return Err(Error::Schema(format!(
                "imputation {imp} has {} rows, imputation 1 has {n}",
                rows.len()
            )));
        }
        let offset = rows[0].0;
        let recs: Vec<&csv::StringRecord> = rows.iter().map(|(_, r)| *r).collect();
        // row numbers in errors refer to data rows of the whole file
        let block = parse_block(&recs, y_col, &x_cols, offset).map_err(|e| match e {
            Error::NonNumeric { row, col } => {
                let local = row - offset;
                Error::NonNumeric { row: rows[local].0, col }
            }
            other => other,
        })?;
        blocks.push(block);
    }
    stack_from_blocks(blocks, names, Provenance::Loaded)
}

fn multi_file_path(stem: &Path, d: usize) -> PathBuf {
    let s = stem.to_string_lossy();
    let base = s.strip_suffix(".csv").unwrap_or(&s);
    PathBuf::from(format!("{base}_{d}.csv"))
}

fn load_multi_file(stem: &Path) -> Result<ImputedStack> {
    let mut blocks = Vec::new();
    let mut names: Option<Vec<String>> = None;
    let mut d = 1;
    loop {
        let path = multi_file_path(stem, d);
        if !path.exists() {
            break;
        }
        let (headers, records) = read_records(&path)?;
        let y_col = headers
            .iter()
            .position(|h| h == "y")
            .ok_or_else(|| Error::Schema(format!("missing `y` column in {}", path.display())))?;
        let x_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != y_col).collect();
        let these: Vec<String> = x_cols.iter().map(|&c| headers[c].clone()).collect();
        match &names {
            None => names = Some(these),
            Some(prev) if *prev != these => {
                return Err(Error::Schema(format!(
                    "{} has a different header than imputation 1",
                    path.display()
                )))
            }
            _ => {}
        }
        let recs: Vec<&csv::StringRecord> = records.iter().collect();
        blocks.push(parse_block(&recs, y_col, &x_cols, 0)?);
        d += 1;
    }
    let names = names.ok_or_else(|| {
        Error::Schema(format!("no files matching {}", multi_file_path(stem, 1).display()))
    })?;
    if blocks.iter().any(|(x, _)| x.nrows() != blocks[0].0.nrows()) {
        return Err(Error::Schema("imputed files differ in row count".into()));
    }
    stack_from_blocks(blocks, names, Provenance::Loaded)
}

fn stack_from_blocks(
    blocks: Vec<(DMatrix<f64>, DVector<f64>)>,
    names: Vec<String>,
    provenance: Provenance,
) -> Result<ImputedStack> {
    let kinds = infer_stack_kinds(&blocks);
    let datasets = blocks
        .into_iter()
        .map(|(x, y)| Dataset::new(x, y, names.clone(), kinds.clone()))
        .collect::<Result<Vec<_>>>()?;
    ImputedStack::new(datasets, provenance)
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes the long-CSV stack format.
pub fn write_long_csv(stack: &ImputedStack, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    write!(w, ".imp,y").map_err(io)?;
    for name in stack.column_names() {
        write!(w, ",{name}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for (d, ds) in stack.datasets().iter().enumerate() {
        for i in 0..ds.n() {
            write!(w, "{},{}", d + 1, fmt_f64(ds.y()[i])).map_err(io)?;
            for j in 0..ds.p() {
                write!(w, ",{}", fmt_f64(ds.x()[(i, j)])).map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Writes `stem_1.csv … stem_D.csv`.
pub fn write_multi_file(stack: &ImputedStack, stem: &Path) -> Result<()> {
    for (d, ds) in stack.datasets().iter().enumerate() {
        write_dataset_csv(ds, &multi_file_path(stem, d + 1))?;
    }
    Ok(())
}

pub fn write_dataset_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    write!(w, "y").map_err(io)?;
    for name in ds.column_names() {
        write!(w, ",{name}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for i in 0..ds.n() {
        write!(w, "{}", fmt_f64(ds.y()[i])).map_err(io)?;
        for j in 0..ds.p() {
            write!(w, ",{}", fmt_f64(ds.x()[(i, j)])).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes covariates/outcome (missing cells as `NA`) and, if given, the 0/1 mask.
pub fn write_incomplete_csv(
    data: &IncompleteDataset,
    data_path: &Path,
    mask_path: Option<&Path>,
) -> Result<()> {
    let mut w = create(data_path)?;
    let io = |e| Error::io(data_path, e);
    write!(w, "y").map_err(io)?;
    for name in data.column_names() {
        write!(w, ",{name}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for i in 0..data.n() {
        write!(w, "{}", fmt_f64(data.y()[i])).map_err(io)?;
        for j in 0..data.p() {
            if data.is_observed(i, j) {
                write!(w, ",{}", fmt_f64(data.x()[(i, j)])).map_err(io)?;
            } else {
                write!(w, ",NA").map_err(io)?;
            }
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)?;
    if let Some(mp) = mask_path {
        let mut w = create(mp)?;
        let io = |e| Error::io(mp, e);
        writeln!(w, "{}", data.column_names().join(",")).map_err(io)?;
        for i in 0..data.n() {
            let row: Vec<&str> = (0..data.p())
                .map(|j| if data.is_observed(i, j) { "1" } else { "0" })
                .collect();
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    Ok(())
}

/// Reads a single complete dataset (header `y`, covariates).
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let (headers, records) = read_records(path)?;
    let y_col = headers
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| Error::Schema("missing `y` column".into()))?;
    let x_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != y_col).collect();
    let names = x_cols.iter().map(|&c| headers[c].clone()).collect();
    let recs: Vec<&csv::StringRecord> = records.iter().collect();
    let (x, y) = parse_block(&recs, y_col, &x_cols, 0)?;
    Dataset::with_inferred_kinds(x, y, names)
}

/// Reads an incomplete dataset. Without a mask file, `NA`/empty cells are
/// missing; with one, mask zeros mark missing cells and their contents are
/// ignored.
pub fn read_incomplete_csv(data_path: &Path, mask_path: Option<&Path>) -> Result<IncompleteDataset> {
    let (headers, records) = read_records(data_path)?;
    let y_col = headers
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| Error::Schema("missing `y` column".into()))?;
    let x_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != y_col).collect();
    let names: Vec<String> = x_cols.iter().map(|&c| headers[c].clone()).collect();
    let n = records.len();
    let p = x_cols.len();

    let mask: Option<DMatrix<bool>> = match mask_path {
        Some(mp) => {
            let (mh, mrecs) = read_records(mp)?;
            if mh.len() != p || mrecs.len() != n {
                return Err(Error::Schema(format!(
                    "mask is {}x{}, data covariates are {n}x{p}",
                    mrecs.len(),
                    mh.len()
                )));
            }
            let mut m = DMatrix::from_element(n, p, true);
            for (i, rec) in mrecs.iter().enumerate() {
                for j in 0..p {
                    m[(i, j)] = match rec[j].trim() {
                        "1" => true,
                        "0" => false,
                        _ => return Err(Error::NonNumeric { row: i, col: j }),
                    };
                }
            }
            Some(m)
        }
        None => None,
    };

    let mut x = DMatrix::from_element(n, p, f64::NAN);
    let mut observed = DMatrix::from_element(n, p, true);
    let mut y = DVector::zeros(n);
    for (i, rec) in records.iter().enumerate() {
        y[i] = parse_cell(&rec[y_col], i, y_col)?;
        for (j, &c) in x_cols.iter().enumerate() {
            let cell = &rec[c];
            let obs = match &mask {
                Some(m) => m[(i, j)],
                None => !is_missing_token(cell),
            };
            observed[(i, j)] = obs;
            if obs {
                x[(i, j)] = parse_cell(cell, i, c)?;
            }
        }
    }
    IncompleteDataset::new(x, y, observed, names, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy(n: usize, p: usize, shift: f64) -> Dataset {
        let x = DMatrix::from_fn(n, p, |i, j| ((i * (j + 2)) as f64).sin() * 3.0 + shift + j as f64);
        let y = DVector::from_fn(n, |i, _| i as f64 * 0.5 - shift);
        Dataset::with_inferred_kinds(x, y, default_column_names(p)).unwrap()
    }

    #[test]
    fn dataset_rejects_bad_binary_and_nonfinite() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(Dataset::new(x.clone(), y.clone(), vec!["a".into()], vec![ColumnKind::Binary]).is_err());
        let mut xn = x;
        xn[(1, 0)] = f64::NAN;
        assert!(Dataset::new(xn, y, vec!["a".into()], vec![ColumnKind::Continuous]).is_err());
    }

    #[test]
    fn multi_file_three_imputations() {
        let dir = tempfile::tempdir().unwrap();
        let stack = ImputedStack::new(vec![toy(10, 3, 0.0), toy(10, 3, 1.0), toy(10, 3, 2.0)], Provenance::Imputed)
            .unwrap();
        let stem = dir.path().join("imp");
        write_multi_file(&stack, &stem).unwrap();
        let back = load_stack(&stem, StackFormat::MultiFile).unwrap();
        assert_eq!((back.d(), back.n(), back.p()), (3, 10, 3));
        assert_eq!(back.datasets(), stack.datasets());
    }

    #[test]
    fn long_csv_partition_by_imp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.csv");
        let mut f = File::create(&path).unwrap();
        writeln!(f, ".imp,y,a,b").unwrap();
        for imp in 1..=2 {
            for i in 0..10 {
                writeln!(f, "{imp},{},{},{}", i, i * imp, (i % 2)).unwrap();
            }
        }
        drop(f);
        let s = load_stack(&path, StackFormat::LongCsv).unwrap();
        assert_eq!((s.d(), s.n(), s.p()), (2, 10, 2));
        assert_eq!(s.dataset(0).column_kinds(), &[ColumnKind::Continuous, ColumnKind::Binary]);
    }

    #[test]
    fn long_csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, ".imp,y,a\n1,1.0,2.0\n1,2.0,NA\n").unwrap();
        match load_stack(&path, StackFormat::LongCsv) {
            Err(Error::NonNumeric { row, col }) => assert_eq!((row, col), (1, 2)),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            load_stack(&path, StackFormat::LongCsv).unwrap_err().to_string(),
            "non-numeric cell at (1,2)"
        );
        std::fs::write(&path, "y,a\n1.0,2.0\n2.0,3.0\n").unwrap();
        assert!(matches!(load_stack(&path, StackFormat::LongCsv), Err(Error::MissingImpColumn)));
        std::fs::write(&path, ".imp,y,a\n1,1.0,2.0\n1,2.0,3.0\n2,1.0,2.0\n").unwrap();
        assert!(matches!(load_stack(&path, StackFormat::LongCsv), Err(Error::Schema(_))));
    }

    #[test]
    fn standardize_unit_column() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let ds = Dataset::with_inferred_kinds(x, DVector::from_vec(vec![1.0, 0.0, 2.0]), vec!["a".into()]).unwrap();
        let st = standardize(&ImputedStack::new(vec![ds], Provenance::Loaded).unwrap()).unwrap();
        let col = st.x(0).column(0);
        assert_relative_eq!(col.mean(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(col.norm_squared() / 2.0, 1.0, epsilon = 1e-15);
        assert_relative_eq!(st.y(0).sum(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let ds = Dataset::with_inferred_kinds(x, DVector::from_vec(vec![1.0, 0.0, 2.0]), vec!["a".into(), "b".into()])
            .unwrap();
        let err = standardize(&ImputedStack::new(vec![ds], Provenance::Loaded).unwrap()).unwrap_err();
        match err {
            Error::ZeroVariance { column, .. } => assert_eq!(column, "b"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn standardize_round_trip_and_idempotence() {
        let stack = ImputedStack::new(vec![toy(12, 3, 0.0), toy(12, 3, 4.0)], Provenance::Imputed).unwrap();
        let st = standardize(&stack).unwrap();
        for (d, (x, y)) in st.invert().iter().enumerate() {
            let ds = stack.dataset(d);
            for (a, b) in x.iter().zip(ds.x().iter()) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            }
            for (a, b) in y.iter().zip(ds.y().iter()) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            }
        }
        let again = standardize(&st.to_stack().unwrap()).unwrap();
        for d in 0..2 {
            assert_relative_eq!(again.x(d), st.x(d), epsilon = 1e-12);
            assert_relative_eq!(again.y(d), st.y(d), epsilon = 1e-12);
        }
    }

    #[test]
    fn destandardize_identity_and_scaling() {
        let state = StandardizationState {
            x_mean: vec![vec![0.0, 0.0]],
            x_sd: vec![vec![1.0, 1.0]],
            y_mean: vec![3.5],
        };
        let b = DMatrix::from_row_slice(1, 2, &[0.7, -1.2]);
        let c = destandardize_coefficients(&b, &state).unwrap();
        assert_eq!(c.beta, b);
        assert_eq!(c.intercept, vec![3.5]);

        let scaled = StandardizationState {
            x_mean: vec![vec![0.0]],
            x_sd: vec![vec![2.0]],
            y_mean: vec![0.0],
        };
        let c = destandardize_coefficients(&DMatrix::from_element(1, 1, 1.0), &scaled).unwrap();
        assert_eq!(c.beta[(0, 0)], 0.5);

        assert!(destandardize_coefficients(&DMatrix::zeros(1, 3), &state).is_err());
    }

    #[test]
    fn destandardized_fit_reproduces_exact_system() {
        // 5x3 exact linear system; the oracle is a direct least squares
        // solve with an intercept on the raw scale.
        let x = DMatrix::from_row_slice(
            5,
            3,
            &[1.0, 4.0, -2.0, 2.5, 0.0, 1.0, -1.0, 3.0, 0.5, 0.0, 1.0, 2.0, 3.0, -2.0, -1.0],
        );
        let y = DVector::from_fn(5, |i, _| 2.0 + 1.5 * x[(i, 0)] - 0.25 * x[(i, 1)] + 0.75 * x[(i, 2)]);
        let ds = Dataset::with_inferred_kinds(x.clone(), y.clone(), default_column_names(3)).unwrap();
        let st = standardize(&ImputedStack::new(vec![ds], Provenance::Loaded).unwrap()).unwrap();
        let (beta_std, _) = crate::linalg::least_squares(st.x(0), st.y(0));
        let coef = destandardize_coefficients(&DMatrix::from_row_slice(1, 3, beta_std.as_slice()), st.state()).unwrap();
        let (icpt, slopes, _) = crate::linalg::least_squares_with_intercept(&x, &y);
        for j in 0..3 {
            assert!((coef.beta[(0, j)] - slopes[j]).abs() < 1e-8);
        }
        assert!((coef.intercept[0] - icpt).abs() < 1e-8);
        let resid = (0..5)
            .map(|i| y[i] - coef.intercept[0] - (0..3).map(|j| coef.beta[(0, j)] * x[(i, j)]).sum::<f64>())
            .fold(0.0f64, |a, r| a.max(r.abs()));
        assert!(resid < 1e-8);
    }

    #[test]
    fn incomplete_round_trip_and_complete_cases() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(6, 2, 0.0);
        let mut observed = DMatrix::from_element(6, 2, true);
        observed[(1, 0)] = false;
        observed[(4, 1)] = false;
        let inc = IncompleteDataset::new(ds.x().clone(), ds.y().clone(), observed, ds.column_names().to_vec(), None)
            .unwrap();
        assert_eq!(inc.complete_case_rows(), vec![0, 2, 3, 5]);
        let dp = dir.path().join("d.csv");
        let mp = dir.path().join("m.csv");
        write_incomplete_csv(&inc, &dp, Some(&mp)).unwrap();
        let a = read_incomplete_csv(&dp, Some(&mp)).unwrap();
        let b = read_incomplete_csv(&dp, None).unwrap();
        assert_eq!(a.observed(), inc.observed());
        assert_eq!(b.observed(), inc.observed());
        assert_eq!(inc.complete_cases().unwrap().n(), 4);
    }

    #[test]
    fn fmt_round_trips_extremes() {
        for v in [f64::MIN_POSITIVE, 1.0 / 3.0, -2.5e-300, 1.7976931348623157e308, -0.0, 123_456_789.123_456_79] {
            let back: f64 = fmt_f64(v).parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
    }
}
