//! CSV ingestion, preprocessing (z-scoring, ordinal encoding, zero
//! imputation) and deterministic train/test/fold splitting.
//!
//! The preprocessing protocol: numerical columns are z-scored with
//! train-split statistics (population 1/N std), categorical columns are
//! ordinal-encoded with code 0 reserved for missing/unknown, and missing
//! values impute to 0 after encoding (0.0 for numericals, code 0 for
//! categoricals).

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::{rng_for_stream, shuffled_indices};
use crate::schema::{ColumnKind, TabularSchema, TaskKind};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// A typed, unpreprocessed table: features as parsed cells, target as text.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub schema: TabularSchema,
    /// One Vec per numerical column (schema order), None = missing.
    pub numerical: Vec<Vec<Option<f64>>>,
    /// One Vec per categorical column (schema order), None = missing.
    pub categorical: Vec<Vec<Option<String>>>,
    /// Raw target cells.
    pub target: Vec<Option<String>>,
    pub n_rows: usize,
}

impl RawTable {
    pub fn empty(schema: TabularSchema) -> Self {
        let nn = schema.n_numerical();
        let nc = schema.n_categorical();
        RawTable {
            schema,
            numerical: vec![Vec::new(); nn],
            categorical: vec![Vec::new(); nc],
            target: Vec::new(),
            n_rows: 0,
        }
    }

    /// Keep only the given row indices (used for subsampling and splits).
    pub fn select_rows(&self, rows: &[usize]) -> RawTable {
        let pick_f = |col: &Vec<Option<f64>>| rows.iter().map(|&r| col[r]).collect::<Vec<_>>();
        let pick_s =
            |col: &Vec<Option<String>>| rows.iter().map(|&r| col[r].clone()).collect::<Vec<_>>();
        RawTable {
            schema: self.schema.clone(),
            numerical: self.numerical.iter().map(pick_f).collect(),
            categorical: self.categorical.iter().map(pick_s).collect(),
            target: rows.iter().map(|&r| self.target[r].clone()).collect(),
            n_rows: rows.len(),
        }
    }
}

/// Load a CSV file (RFC-4180-style, UTF-8, header required) under a schema.
///
/// Header order may differ from schema order; all schema columns must be
/// present. Unparseable numeric cells and empty cells become missing.
pub fn load_csv(path: &Path, schema: &TabularSchema) -> Result<RawTable> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::schema(format!("cannot open csv {}: {}", path.display(), e)))?;
    load_csv_reader(file, schema).map_err(|e| match e {
        Error::Parse(msg) => Error::parse(format!("{}: {}", path.display(), msg)),
        other => other,
    })
}

pub fn load_csv_reader<R: std::io::Read>(reader: R, schema: &TabularSchema) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(format!("cannot read header: {}", e)))?
        .clone();
    let header_pos: BTreeMap<&str, usize> =
        headers.iter().enumerate().map(|(i, h)| (h, i)).collect();

    // schema-order -> csv column index
    let mut num_pos = Vec::new();
    let mut cat_pos = Vec::new();
    let mut target_pos = None;
    for col in &schema.columns {
        let pos = *header_pos.get(col.name.as_str()).ok_or_else(|| {
            Error::schema(format!("column `{}` declared in schema but missing from csv header", col.name))
        })?;
        match col.kind {
            ColumnKind::Numerical => num_pos.push(pos),
            ColumnKind::Categorical => cat_pos.push(pos),
            ColumnKind::Target => target_pos = Some(pos),
        }
    }
    let target_pos = target_pos.expect("validated schema has target");

    let mut table = RawTable::empty(schema.clone());
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line().to_string())
                .unwrap_or_else(|| format!("~{}", i + 2));
            Error::parse(format!("row at line {}: {}", line, e))
        })?;
        for (j, &pos) in num_pos.iter().enumerate() {
            let cell = record.get(pos).unwrap_or("").trim();
            let v = if cell.is_empty() { None } else { cell.parse::<f64>().ok() };
            table.numerical[j].push(v.filter(|x| x.is_finite()));
        }
        for (j, &pos) in cat_pos.iter().enumerate() {
            let cell = record.get(pos).unwrap_or("").trim();
            table.categorical[j]
                .push(if cell.is_empty() { None } else { Some(cell.to_string()) });
        }
        let t = record.get(target_pos).unwrap_or("").trim();
        table.target.push(if t.is_empty() { None } else { Some(t.to_string()) });
        table.n_rows += 1;
    }
    Ok(table)
}

/// Per-column statistics fitted on a training split, serializable for reuse
/// at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStatistics {
    /// Per numerical column: (mean, population std; std 1.0 substituted when
    /// the column has zero variance).
    pub numerical: Vec<NumericalStats>,
    /// Per categorical column: sorted observed values; code = position + 1
    /// (0 is the reserved missing/unknown code).
    pub categorical: Vec<Vec<String>>,
    /// Classification only: sorted class labels; class index = position.
    pub class_labels: Option<Vec<String>>,
    /// Regression only: target mean/std from the train split. Training runs
    /// in standardized target space; metrics are in natural units.
    pub target_stats: Option<NumericalStats>,
    /// Convention marker recorded for reproducibility.
    pub std_convention: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericalStats {
    pub mean: f64,
    pub std: f64,
}

/// Supervised targets in model-ready form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes(Vec<u32>),
    /// Natural-unit regression values.
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Preprocessed dataset ready for batching.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub schema: TabularSchema,
    /// n_rows x n_numerical, z-scored.
    pub numerical: Mat,
    /// Row-major n_rows x n_categorical ordinal codes.
    pub categorical: Vec<u32>,
    pub n_categorical: usize,
    pub targets: Targets,
    pub stats: FitStatistics,
    pub warnings: Vec<String>,
}

impl PreparedDataset {
    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn n_features(&self) -> usize {
        self.schema.feature_count()
    }

    /// Cardinality passed to the embedding table for categorical feature j
    /// (observed values + 1 for the reserved missing code).
    pub fn cardinality(&self, cat_idx: usize) -> usize {
        self.stats.categorical[cat_idx].len() + 1
    }

    pub fn cat_code(&self, row: usize, cat_idx: usize) -> u32 {
        self.categorical[row * self.n_categorical + cat_idx]
    }

    pub fn select_rows(&self, rows: &[usize]) -> PreparedDataset {
        let nn = self.numerical.cols();
        let mut num = Mat::zeros(rows.len(), nn);
        for (i, &r) in rows.iter().enumerate() {
            num.row_mut(i).copy_from_slice(self.numerical.row(r));
        }
        let mut cats = Vec::with_capacity(rows.len() * self.n_categorical);
        for &r in rows {
            for c in 0..self.n_categorical {
                cats.push(self.cat_code(r, c));
            }
        }
        let targets = match &self.targets {
            Targets::Classes(v) => Targets::Classes(rows.iter().map(|&r| v[r]).collect()),
            Targets::Values(v) => Targets::Values(rows.iter().map(|&r| v[r]).collect()),
        };
        PreparedDataset {
            schema: self.schema.clone(),
            numerical: num,
            categorical: cats,
            n_categorical: self.n_categorical,
            targets,
            stats: self.stats.clone(),
            warnings: Vec::new(),
        }
    }
}

/// Fit preprocessing statistics on a table (the training split).
pub fn fit_statistics(table: &RawTable) -> Result<FitStatistics> {
    let mut numerical = Vec::with_capacity(table.numerical.len());
    for col in &table.numerical {
        let present: Vec<f64> = col.iter().flatten().copied().collect();
        if present.is_empty() {
            numerical.push(NumericalStats { mean: 0.0, std: 1.0 });
            continue;
        }
        let n = present.len() as f64;
        let mean = present.iter().sum::<f64>() / n;
        let var = present.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        numerical.push(NumericalStats { mean, std: if std > 0.0 { std } else { 1.0 } });
    }

    let mut categorical = Vec::with_capacity(table.categorical.len());
    for col in &table.categorical {
        let mut values: Vec<String> = col.iter().flatten().cloned().collect();
        values.sort_unstable();
        values.dedup();
        categorical.push(values);
    }

    let (class_labels, target_stats) = match table.schema.task {
        TaskKind::Regression => {
            let vals: Vec<f64> = table
                .target
                .iter()
                .flatten()
                .filter_map(|s| s.parse::<f64>().ok())
                .collect();
            if vals.is_empty() {
                return Err(Error::schema("regression target has no parseable values"));
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            (None, Some(NumericalStats { mean, std: if std > 0.0 { std } else { 1.0 } }))
        }
        _ => {
            let mut labels: Vec<String> = table.target.iter().flatten().cloned().collect();
            labels.sort_unstable();
            labels.dedup();
            if let Some(c) = table.schema.task.n_classes() {
                if labels.len() > c as usize {
                    return Err(Error::schema(format!(
                        "target has {} distinct labels but task declares {} classes",
                        labels.len(),
                        c
                    )));
                }
            }
            (Some(labels), None)
        }
    };

    Ok(FitStatistics {
        numerical,
        categorical,
        class_labels,
        target_stats,
        std_convention: "population".to_string(),
    })
}

/// Transform a raw table into model-ready form.
///
/// When `fit` is `None` this is the fitting call (statistics computed from
/// this table); otherwise the provided statistics are applied unchanged.
/// `strict` makes unknown categorical values an error instead of code 0.
pub fn preprocess(table: &RawTable, fit: Option<&FitStatistics>, strict: bool) -> Result<PreparedDataset> {
    let owned;
    let stats = match fit {
        Some(s) => s,
        None => {
            owned = fit_statistics(table)?;
            &owned
        }
    };
    let mut warnings = Vec::new();
    if stats.numerical.len() != table.numerical.len()
        || stats.categorical.len() != table.categorical.len()
    {
        return Err(Error::schema("fit statistics do not match table shape"));
    }

    let n_num = table.numerical.len();
    let mut numerical = Mat::zeros(table.n_rows, n_num);
    for (j, col) in table.numerical.iter().enumerate() {
        let NumericalStats { mean, std } = stats.numerical[j];
        if fit.is_none() {
            // flag zero-variance columns found during fitting
            let present: Vec<f64> = col.iter().flatten().copied().collect();
            if !present.is_empty() {
                let m = present.iter().sum::<f64>() / present.len() as f64;
                if present.iter().all(|x| (x - m).abs() == 0.0) {
                    warnings.push(format!(
                        "numerical column {} has zero variance; std set to 1",
                        table.schema.numerical_names()[j]
                    ));
                }
            }
        }
        for (r, cell) in col.iter().enumerate() {
            // missing -> 0.0 AFTER normalization, i.e. the train mean
            let v = match cell {
                Some(x) => (x - mean) / std,
                None => 0.0,
            };
            numerical.set(r, j, v);
        }
    }

    let n_cat = table.categorical.len();
    let mut categorical = Vec::with_capacity(table.n_rows * n_cat);
    for r in 0..table.n_rows {
        for (j, col) in table.categorical.iter().enumerate() {
            let code = match &col[r] {
                None => 0u32,
                Some(v) => match stats.categorical[j].binary_search(v) {
                    Ok(pos) => pos as u32 + 1,
                    Err(_) => {
                        if strict {
                            return Err(Error::schema(format!(
                                "unknown categorical value `{}` in column {} (strict mode)",
                                v,
                                table.schema.categorical_names()[j]
                            )));
                        }
                        0u32
                    }
                },
            };
            categorical.push(code);
        }
    }

    let targets = match table.schema.task {
        TaskKind::Regression => {
            let mut vals = Vec::with_capacity(table.n_rows);
            for (r, cell) in table.target.iter().enumerate() {
                let s = cell.as_deref().ok_or_else(|| {
                    Error::parse(format!("row {}: missing regression target", r))
                })?;
                let v: f64 = s
                    .parse()
                    .map_err(|_| Error::parse(format!("row {}: bad regression target `{}`", r, s)))?;
                vals.push(v);
            }
            Targets::Values(vals)
        }
        _ => {
            let labels = stats.class_labels.as_ref().ok_or_else(|| {
                Error::schema("classification task but fit statistics have no class labels")
            })?;
            let mut classes = Vec::with_capacity(table.n_rows);
            for (r, cell) in table.target.iter().enumerate() {
                let s = cell
                    .as_deref()
                    .ok_or_else(|| Error::parse(format!("row {}: missing class label", r)))?;
                let idx = labels.binary_search(&s.to_string()).map_err(|_| {
                    Error::schema(format!("row {}: unseen class label `{}`", r, s))
                })?;
                classes.push(idx as u32);
            }
            Targets::Classes(classes)
        }
    };

    Ok(PreparedDataset {
        schema: table.schema.clone(),
        numerical,
        categorical,
        n_categorical: n_cat,
        targets,
        stats: stats.clone(),
        warnings,
    })
}

/// Deterministic K-fold assignment: stratified by class for classification,
/// uniform otherwise. Fold sizes differ by at most one.
pub fn split_kfold(targets: &Targets, k: usize, seed: u64) -> Result<(Vec<u32>, Vec<String>)> {
    let n = targets.len();
    if k < 2 {
        return Err(Error::contract(format!("split_kfold: K={} < 2", k)));
    }
    if n < k {
        return Err(Error::contract(format!("split_kfold: N={} < K={}", n, k)));
    }
    let mut rng = rng_for_stream(seed, 0xF01D);
    let mut warnings = Vec::new();
    let mut folds = vec![0u32; n];

    let groups: Vec<Vec<usize>> = match targets {
        Targets::Classes(classes) => {
            let n_classes = classes.iter().copied().max().unwrap_or(0) as usize + 1;
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
            for (i, &c) in classes.iter().enumerate() {
                by_class[c as usize].push(i);
            }
            let starving = by_class.iter().any(|g| !g.is_empty() && g.len() < k);
            if starving {
                warnings.push(format!(
                    "a class has fewer than K={} members; falling back to unstratified folds",
                    k
                ));
                vec![(0..n).collect()]
            } else {
                by_class.into_iter().filter(|g| !g.is_empty()).collect()
            }
        }
        Targets::Values(_) => vec![(0..n).collect()],
    };

    // Deal shuffled group members round-robin with a cursor carried across
    // groups so global fold sizes stay within one of each other.
    let mut cursor = 0usize;
    for group in groups {
        let order = shuffled_indices(&mut rng, group.len());
        for local in order {
            folds[group[local]] = (cursor % k) as u32;
            cursor += 1;
        }
    }
    Ok((folds, warnings))
}

/// Convenience: indices of rows in/out of fold `f`.
pub fn fold_split(folds: &[u32], f: u32) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, &fi) in folds.iter().enumerate() {
        if fi == f {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ColumnSpec;

    fn schema_nc() -> TabularSchema {
        TabularSchema::new(
            vec![
                ColumnSpec { name: "x".into(), kind: ColumnKind::Numerical },
                ColumnSpec { name: "c".into(), kind: ColumnKind::Categorical },
                ColumnSpec { name: "y".into(), kind: ColumnKind::Target },
            ],
            TaskKind::Binary,
        )
        .unwrap()
    }

    #[test]
    fn load_csv_basic_and_missing() {
        let csv = "x,c,y\n1.0,b,yes\n,a,no\n3.5,b,yes\n";
        let t = load_csv_reader(csv.as_bytes(), &schema_nc()).unwrap();
        assert_eq!(t.n_rows, 3);
        assert_eq!(t.numerical[0], vec![Some(1.0), None, Some(3.5)]);
        assert_eq!(t.categorical[0][1], Some("a".to_string()));
    }

    #[test]
    fn missing_schema_column_is_schema_error() {
        let csv = "x,y\n1.0,yes\n";
        let err = load_csv_reader(csv.as_bytes(), &schema_nc()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{:?}", err);
    }

    #[test]
    fn ragged_row_is_parse_error_with_line() {
        let csv = "x,c,y\n1.0,b,yes\n2.0,a\n";
        let err = load_csv_reader(csv.as_bytes(), &schema_nc()).unwrap_err();
        let msg = format!("{}", err);
        assert!(msg.contains("line 3"), "{}", msg);
    }

    #[test]
    fn zscore_with_population_std() {
        let csv = "x,c,y\n1,b,yes\n2,a,no\n3,b,yes\n";
        let t = load_csv_reader(csv.as_bytes(), &schema_nc()).unwrap();
        let p = preprocess(&t, None, false).unwrap();
        let expect = (1.5f64).sqrt(); // (3-2)/sqrt(2/3)
        assert!((p.numerical.at(0, 0) + expect).abs() < 1e-12);
        assert!(p.numerical.at(1, 0).abs() < 1e-12);
        assert!((p.numerical.at(2, 0) - expect).abs() < 1e-12);
        // frozen five-decimal form
        assert!((p.numerical.at(2, 0) - 1.22474).abs() < 1e-5);
    }

    #[test]
    fn categorical_codes_lexicographic_with_reserved_zero() {
        let csv = "x,c,y\n1,b,yes\n2,a,no\n3,b,yes\n";
        let t = load_csv_reader(csv.as_bytes(), &schema_nc()).unwrap();
        let p = preprocess(&t, None, false).unwrap();
        assert_eq!(
            (0..3).map(|r| p.cat_code(r, 0)).collect::<Vec<_>>(),
            vec![2, 1, 2]
        );
        assert_eq!(p.cardinality(0), 3); // a, b + missing code
    }

    #[test]
    fn missing_numeric_becomes_zero_after_zscore() {
        let csv = "x,c,y\n1,b,yes\n,a,no\n3,b,yes\n";
        let t = load_csv_reader(csv.as_bytes(), &schema_nc()).unwrap();
        let p = preprocess(&t, None, false).unwrap();
        assert_eq!(p.numerical.at(1, 0), 0.0);
    }

    #[test]
    fn unknown_categorical_transform_behavior() {
        let fit_csv = "x,c,y\n1,a,yes\n2,b,no\n";
        let t = load_csv_reader(fit_csv.as_bytes(), &schema_nc()).unwrap();
        let stats = fit_statistics(&t).unwrap();
        let new_csv = "x,c,y\n1,zz,yes\n";
        let t2 = load_csv_reader(new_csv.as_bytes(), &schema_nc()).unwrap();
        let p = preprocess(&t2, Some(&stats), false).unwrap();
        assert_eq!(p.cat_code(0, 0), 0);
        let err = preprocess(&t2, Some(&stats), true).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn zero_variance_column_warns_and_uses_unit_std() {
        let csv = "x,c,y\n5,a,yes\n5,b,no\n";
        let t = load_csv_reader(csv.as_bytes(), &schema_nc()).unwrap();
        let p = preprocess(&t, None, false).unwrap();
        assert!(!p.warnings.is_empty());
        assert_eq!(p.numerical.at(0, 0), 0.0);
    }

    #[test]
    fn preprocess_idempotent_given_stats() {
        let csv = "x,c,y\n1,b,yes\n2,a,no\n3,b,yes\n";
        let t = load_csv_reader(csv.as_bytes(), &schema_nc()).unwrap();
        let p1 = preprocess(&t, None, false).unwrap();
        let p2 = preprocess(&t, Some(&p1.stats), false).unwrap();
        assert_eq!(p1.numerical, p2.numerical);
        assert_eq!(p1.categorical, p2.categorical);
        assert_eq!(p1.targets, p2.targets);
    }

    #[test]
    fn train_split_self_transform_is_standardized() {
        // invariant: mean ~ 0, std ~ 1 with fitted statistics
        let mut rows = String::from("x,c,y\n");
        for i in 0..50 {
            rows.push_str(&format!("{},a,yes\n", (i as f64 * 0.7).sin() * 3.0 + 1.0));
        }
        let t = load_csv_reader(rows.as_bytes(), &schema_nc()).unwrap();
        let p = preprocess(&t, None, false).unwrap();
        let col: Vec<f64> = (0..50).map(|r| p.numerical.at(r, 0)).collect();
        let mean = col.iter().sum::<f64>() / 50.0;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kfold_even_sizes_and_determinism() {
        let targets = Targets::Values((0..10).map(|x| x as f64).collect());
        let (f1, _) = split_kfold(&targets, 5, 42).unwrap();
        let (f2, _) = split_kfold(&targets, 5, 42).unwrap();
        assert_eq!(f1, f2);
        for fold in 0..5u32 {
            assert_eq!(f1.iter().filter(|&&x| x == fold).count(), 2);
        }
    }

    #[test]
    fn kfold_stratifies_binary() {
        // 6 positives, 4 negatives, K=2 -> each fold has 3 pos, 2 neg
        let classes = Targets::Classes(vec![1, 1, 1, 1, 1, 1, 0, 0, 0, 0]);
        let (folds, warnings) = split_kfold(&classes, 2, 7).unwrap();
        assert!(warnings.is_empty());
        for fold in 0..2u32 {
            let pos = (0..6).filter(|&i| folds[i] == fold).count();
            let neg = (6..10).filter(|&i| folds[i] == fold).count();
            assert_eq!(pos, 3);
            assert_eq!(neg, 2);
        }
    }

    #[test]
    fn kfold_small_class_falls_back() {
        let classes = Targets::Classes(vec![0, 0, 0, 0, 1]);
        let (folds, warnings) = split_kfold(&classes, 3, 7).unwrap();
        assert!(!warnings.is_empty());
        assert_eq!(folds.len(), 5);
    }

    #[test]
    fn folds_are_disjoint_partition() {
        let targets = Targets::Values((0..103).map(|x| x as f64).collect());
        let (folds, _) = split_kfold(&targets, 5, 9).unwrap();
        let mut sizes = [0usize; 5];
        for &f in &folds {
            sizes[f as usize] += 1;
        }
        assert_eq!(sizes.iter().sum::<usize>(), 103);
        let max = sizes.iter().max().unwrap();
        let min = sizes.iter().min().unwrap();
        assert!(max - min <= 1);
    }
}
