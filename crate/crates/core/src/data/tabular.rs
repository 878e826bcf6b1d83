//! CSV ingestion driven by a schema file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

/// Names the label column and declares the kind of every feature column.
/// CSV columns absent from the schema are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub label: String,
    pub columns: BTreeMap<String, FeatureKind>,
}

impl Schema {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            row: None,
            column: None,
            message: format!("invalid schema: {e}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub feature_kinds: Vec<FeatureKind>,
    pub feature_names: Vec<String>,
    pub class_count: usize,
    pub class_names: Vec<String>,
}

impl TabularDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        feature_kinds: Vec<FeatureKind>,
        class_count: usize,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::dim("dataset rows", features.nrows(), labels.len()));
        }
        if feature_kinds.len() != features.ncols() {
            return Err(Error::dim(
                "feature kinds",
                features.ncols(),
                feature_kinds.len(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::dim("label range", format!("< {class_count}"), bad));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::State("dataset contains non-finite features".into()));
        }
        let feature_names = (0..features.ncols()).map(|j| format!("f{j}")).collect();
        let class_names = (0..class_count).map(|c| c.to_string()).collect();
        Ok(Self {
            features,
            labels,
            feature_kinds,
            feature_names,
            class_count,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select(ndarray::Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            feature_kinds: self.feature_kinds.clone(),
            feature_names: self.feature_names.clone(),
            class_count: self.class_count,
            class_names: self.class_names.clone(),
        }
    }
}

#[derive(Debug, Clone)]
enum RawColumn {
    Numeric(Vec<Option<f64>>),
    /// Codes into the sorted category list; `None` marks a missing cell.
    Categorical(Vec<Option<usize>>, usize),
}

/// Parsed CSV before imputation.
#[derive(Debug, Clone)]
pub struct RawTable {
    names: Vec<String>,
    columns: Vec<RawColumn>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "?" | "NA" | "na" | "NaN" | "nan")
}

impl RawTable {
    pub fn read(path: &Path, schema: &Schema) -> Result<Self> {
        let ingest = |row: Option<usize>, column: Option<&str>, message: String| Error::Ingestion {
            path: path.to_path_buf(),
            row,
            column: column.map(str::to_string),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| ingest(None, None, format!("cannot open: {e}")))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| ingest(Some(1), None, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let find = |name: &str| header.iter().position(|h| h == name);
        let label_idx = find(&schema.label)
            .ok_or_else(|| ingest(None, Some(&schema.label), "unknown label column".into()))?;
        for name in schema.columns.keys() {
            if find(name).is_none() {
                return Err(ingest(None, Some(name), "unknown column".into()));
            }
            if *name == schema.label {
                return Err(ingest(
                    None,
                    Some(name),
                    "label column declared as a feature".into(),
                ));
            }
        }
        let selected: Vec<(usize, FeatureKind)> = header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| schema.columns.get(h).map(|&k| (i, k)))
            .collect();

        let mut numeric: Vec<Vec<Option<f64>>> = vec![Vec::new(); selected.len()];
        let mut text: Vec<Vec<Option<String>>> = vec![Vec::new(); selected.len()];
        let mut raw_labels = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                ingest(e.position().map(|p| p.line() as usize), None, e.to_string())
            })?;
            let line = record.position().map(|p| p.line() as usize);
            let label = record.get(label_idx).unwrap_or("");
            if is_missing(label) {
                return Err(ingest(line, Some(&schema.label), "missing label".into()));
            }
            raw_labels.push(label.to_string());
            for (c, &(idx, kind)) in selected.iter().enumerate() {
                let cell = record.get(idx).unwrap_or("");
                match kind {
                    FeatureKind::Numeric => {
                        let v = if is_missing(cell) {
                            None
                        } else {
                            Some(
                                cell.parse::<f64>()
                                    .ok()
                                    .filter(|v| v.is_finite())
                                    .ok_or_else(|| {
                                        ingest(
                                            line,
                                            Some(&header[idx]),
                                            format!("non-numeric value `{cell}`"),
                                        )
                                    })?,
                            )
                        };
                        numeric[c].push(v);
                    }
                    FeatureKind::Categorical => {
                        text[c].push((!is_missing(cell)).then(|| cell.to_string()));
                    }
                }
            }
        }
        if raw_labels.is_empty() {
            return Err(ingest(None, None, "no data rows".into()));
        }

        let columns = selected
            .iter()
            .enumerate()
            .map(|(c, &(_, kind))| match kind {
                FeatureKind::Numeric => RawColumn::Numeric(std::mem::take(&mut numeric[c])),
                FeatureKind::Categorical => {
                    let cats: BTreeSet<&String> = text[c].iter().flatten().collect();
                    let cats: Vec<&String> = cats.into_iter().collect();
                    let codes = text[c]
                        .iter()
                        .map(|v| {
                            v.as_ref()
                                .map(|s| cats.binary_search(&s).expect("collected"))
                        })
                        .collect();
                    RawColumn::Categorical(codes, cats.len())
                }
            })
            .collect();
        let class_names = sorted_labels(&raw_labels);
        let labels = raw_labels
            .iter()
            .map(|l| class_names.iter().position(|c| c == l).expect("collected"))
            .collect();
        Ok(Self {
            names: selected.iter().map(|&(i, _)| header[i].clone()).collect(),
            columns,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fills missing numeric cells with the median over `rows` and missing
    /// categorical cells with a dedicated extra category.
    pub fn impute(&self, rows: &[usize]) -> Result<TabularDataset> {
        let n = self.len();
        let mut features = Array2::zeros((n, self.columns.len()));
        let mut kinds = Vec::with_capacity(self.columns.len());
        for (j, col) in self.columns.iter().enumerate() {
            match col {
                RawColumn::Numeric(vals) => {
                    let observed: Vec<f64> = rows.iter().filter_map(|&r| vals[r]).collect();
                    let fill = median(&observed).unwrap_or(0.0);
                    for (i, v) in vals.iter().enumerate() {
                        features[[i, j]] = v.unwrap_or(fill);
                    }
                    kinds.push(FeatureKind::Numeric);
                }
                RawColumn::Categorical(codes, count) => {
                    for (i, v) in codes.iter().enumerate() {
                        features[[i, j]] = v.unwrap_or(*count) as f64;
                    }
                    kinds.push(FeatureKind::Categorical);
                }
            }
        }
        let mut ds =
            TabularDataset::new(features, self.labels.clone(), kinds, self.class_names.len())?;
        ds.feature_names = self.names.clone();
        ds.class_names = self.class_names.clone();
        Ok(ds)
    }
}

fn sorted_labels(raw: &[String]) -> Vec<String> {
    let unique: BTreeSet<&String> = raw.iter().collect();
    let mut names: Vec<String> = unique.into_iter().cloned().collect();
    if names.iter().all(|n| n.parse::<f64>().is_ok()) {
        names.sort_by(|a, b| {
            a.parse::<f64>()
                .unwrap()
                .total_cmp(&b.parse::<f64>().unwrap())
        });
    }
    names
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    })
}

/// Reads and imputes using every row as the statistics source. Pipelines
/// that split first should use [`RawTable::impute`] with the train indices.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<TabularDataset> {
    let raw = RawTable::read(path, schema)?;
    let all: Vec<usize> = (0..raw.len()).collect();
    raw.impute(&all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    fn schema(cols: &[(&str, FeatureKind)]) -> Schema {
        Schema {
            label: "y".into(),
            columns: cols.iter().map(|(n, k)| (n.to_string(), *k)).collect(),
        }
    }

    #[test]
    fn three_rows_one_feature() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,y\n1.5,0\n2.5,1\n3.5,0\n");
        let ds = load_csv(&p, &schema(&[("x", FeatureKind::Numeric)])).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_features(), 1);
        assert_eq!(ds.class_count, 2);
        assert_eq!(ds.labels, vec![0, 1, 0]);
    }

    #[test]
    fn missing_numeric_takes_median_of_imputation_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,y\n1,0\n,1\n4,0\n10,1\n100,0\n");
        let s = schema(&[("x", FeatureKind::Numeric)]);
        // all observed {1,4,10,100} -> (4 + 10) / 2
        let ds = load_csv(&p, &s).unwrap();
        assert_eq!(ds.features[[1, 0]], 7.0);
        // train rows {0,1,2} observe {1,4} -> 2.5
        let raw = RawTable::read(&p, &s).unwrap();
        let ds = raw.impute(&[0, 1, 2]).unwrap();
        assert_eq!(ds.features[[1, 0]], 2.5);
    }

    #[test]
    fn categorical_encoding_with_missing_category() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "c,y\nred,a\nblue,b\n,a\nred,b\n");
        let ds = load_csv(&p, &schema(&[("c", FeatureKind::Categorical)])).unwrap();
        let col: Vec<f64> = ds.features.column(0).to_vec();
        assert_eq!(col, vec![1.0, 0.0, 2.0, 1.0]);
        assert_eq!(ds.class_names, vec!["a", "b"]);
    }

    #[test]
    fn thirteen_labels_give_thirteen_classes() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("x,y\n");
        for i in 0..26 {
            body.push_str(&format!("{i},{}\n", (i % 13) + 1));
        }
        let p = write(&dir, "a.csv", &body);
        let ds = load_csv(&p, &schema(&[("x", FeatureKind::Numeric)])).unwrap();
        assert_eq!(ds.class_count, 13);
        // numeric labels sort numerically: "10" after "9"
        assert_eq!(ds.class_names[9], "10");
    }

    #[test]
    fn errors_carry_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,y\n1,0\nabc,1\n");
        let err = load_csv(&p, &schema(&[("x", FeatureKind::Numeric)])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3") && msg.contains("`x`"), "{msg}");

        let err = load_csv(&p, &schema(&[("z", FeatureKind::Numeric)])).unwrap_err();
        assert!(err.to_string().contains("unknown column"), "{err}");

        let err = load_csv(&dir.path().join("missing.csv"), &schema(&[])).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }));
    }
}
