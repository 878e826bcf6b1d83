//! Metrics, weight-magnitude histograms and metric files.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::augment::Augmenter;
use crate::data::eval_batches;
use crate::error::{Error, Result};
use crate::nn::ModelState;
use crate::objective::LossBreakdown;
use crate::scalar::Scalar;

/// Smallest magnitude resolved by the histogram; smaller values land in bin 0.
pub const HISTOGRAM_FLOOR: f64 = 1e-8;

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::dim("predictions", labels.len(), preds.len()));
    }
    if labels.is_empty() {
        return Err(Error::param("labels", "empty label set"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Mean per-class recall in percent over the classes present in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize], class_count: usize) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::dim("predictions", labels.len(), preds.len()));
    }
    let mut support = vec![0usize; class_count];
    let mut hits = vec![0usize; class_count];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= class_count {
            return Err(Error::param(
                "labels",
                format!("label {y} outside 0..{class_count}"),
            ));
        }
        support[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let recalls: Vec<f64> = support
        .iter()
        .zip(&hits)
        .filter(|(s, _)| **s > 0)
        .map(|(&s, &h)| h as f64 / s as f64)
        .collect();
    if recalls.is_empty() {
        return Err(Error::param("labels", "empty label set"));
    }
    Ok(100.0 * recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Share of (sample, draw) comparisons whose argmax did or did not change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Consistency {
    pub unchanged: f64,
    pub flipped: f64,
}

/// Compares the eval-mode prediction on each row with the prediction on `k`
/// independently transformed copies.
pub fn consistency<T: Scalar>(
    model: &ModelState<T>,
    x: ArrayView2<T>,
    aug: &Augmenter,
    k: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Consistency> {
    if k == 0 {
        return Err(Error::param("eval.consistency_draws", "must be at least 1"));
    }
    if x.nrows() == 0 {
        return Err(Error::param("dataset", "empty dataset"));
    }
    let mut same = 0usize;
    let mut total = 0usize;
    for range in eval_batches(x.nrows(), batch_size.max(1)) {
        let xb = x.slice(ndarray::s![range, ..]);
        let base = model.predict(xb)?;
        let xf = xb.mapv(|v| v.as_f64());
        for _ in 0..k {
            let views = aug.views(xf.view(), rng)?.mapv(T::of);
            let moved = model.predict(views.view())?;
            same += base.iter().zip(&moved).filter(|(a, b)| a == b).count();
            total += base.len();
        }
    }
    let unchanged = 100.0 * same as f64 / total as f64;
    Ok(Consistency {
        unchanged,
        flipped: 100.0 - unchanged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramDump {
    pub epoch: usize,
    /// `counts.len() + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl HistogramDump {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!(
                "{},{:e},{:e},{}\n",
                self.epoch,
                self.edges[i],
                self.edges[i + 1],
                c
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// `bins + 1` log-spaced edges from `lo` to `hi`.
pub fn log_edges(lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 || lo <= 0.0 || hi < lo {
        return Err(Error::param(
            "histogram",
            format!("need bins > 0 and 0 < lo <= hi, got {bins}, {lo}, {hi}"),
        ));
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut edges: Vec<f64> = (0..=bins)
        .map(|i| (a + (b - a) * i as f64 / bins as f64).exp())
        .collect();
    edges[0] = lo;
    edges[bins] = hi;
    Ok(edges)
}

/// Bins `values` by the given edges; values below the first edge go to
/// the first bin and values above the last edge to the last bin.
pub fn histogram_with_edges(values: impl Iterator<Item = f64>, edges: &[f64]) -> Vec<usize> {
    let bins = edges.len().saturating_sub(1).max(1);
    let mut counts = vec![0usize; bins];
    for v in values {
        // first edge strictly above v, minus one
        let idx = edges
            .partition_point(|&e| e <= v)
            .saturating_sub(1)
            .min(bins - 1);
        counts[idx] += 1;
    }
    counts
}

/// Histogram of `|w|` over all prunable weights, log-spaced from
/// [`HISTOGRAM_FLOOR`] to the largest magnitude.
pub fn weight_histogram<T: Scalar>(
    model: &ModelState<T>,
    bins: usize,
    epoch: usize,
) -> Result<HistogramDump> {
    let max = model
        .prunable_weights()
        .map(|w| w.as_f64().abs())
        .fold(0.0, f64::max);
    let hi = max.max(HISTOGRAM_FLOOR);
    let edges = log_edges(HISTOGRAM_FLOOR, hi, bins)?;
    let counts = histogram_with_edges(model.prunable_weights().map(|w| w.as_f64().abs()), &edges);
    Ok(HistogramDump {
        epoch,
        edges,
        counts,
    })
}

/// Median of `|w|` over all prunable weights.
pub fn magnitude_median<T: Scalar>(model: &ModelState<T>) -> f64 {
    let m: Vec<f64> = model.prunable_weights().map(|w| w.as_f64().abs()).collect();
    crate::data::tabular::median(&m).unwrap_or(0.0)
}

/// `|W|` of the first linear layer, shaped `(out, in)`.
pub fn first_layer_magnitudes<T: Scalar>(model: &ModelState<T>) -> Result<Array2<f64>> {
    let first = model
        .spec()
        .linear_layers()
        .next()
        .ok_or_else(|| Error::State("network has no linear layer".into()))?;
    let w = model.params()[first].weight().expect("linear layer");
    Ok(w.view2().mapv(|v| v.as_f64().abs()))
}

pub fn write_grid_csv(grid: &Array2<f64>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in grid.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One row of the metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub phase: String,
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub consistency: BTreeMap<String, Consistency>,
    pub loss: Option<LossBreakdown>,
}

/// Appends records to a CSV with a fixed column list. Floats are written
/// with six decimals so repeated runs give identical bytes.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    transforms: Vec<String>,
    file: File,
}

impl MetricsWriter {
    pub const BASE_COLUMNS: [&'static str; 9] = [
        "phase",
        "epoch",
        "split",
        "l_sup",
        "l_nce",
        "lambda",
        "total",
        "accuracy",
        "balanced_accuracy",
    ];

    pub fn create(path: &Path, transforms: &[String]) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut header: Vec<String> = Self::BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
        for t in transforms {
            header.push(format!("consistency_{t}"));
            header.push(format!("flip_{t}"));
        }
        writeln!(file, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            transforms: transforms.to_vec(),
            file,
        })
    }

    /// Reopens an existing file for appending.
    pub fn append(path: &Path, transforms: &[String]) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            transforms: transforms.to_vec(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<()> {
        let f = |v: f64| format!("{v:.6}");
        let mut cells = vec![r.phase.clone(), r.epoch.to_string(), r.split.clone()];
        match &r.loss {
            Some(l) => cells.extend([f(l.l_sup), f(l.l_nce), f(l.lambda), f(l.total)]),
            None => cells.extend(std::iter::repeat_n(String::new(), 4)),
        }
        cells.push(f(r.accuracy));
        cells.push(f(r.balanced_accuracy));
        for t in &self.transforms {
            match r.consistency.get(t) {
                Some(c) => cells.extend([f(c.unchanged), f(c.flipped)]),
                None => cells.extend([String::new(), String::new()]),
            }
        }
        writeln!(self.file, "{}", cells.join(",")).map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn balanced_accuracy_cases() {
        assert_eq!(balanced_accuracy(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 100.0);
        assert_eq!(
            balanced_accuracy(&[0, 0, 0, 0], &[0, 0, 0, 1], 2).unwrap(),
            50.0
        );
        let got = balanced_accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_abs_diff_eq!(got, (100.0 + 200.0 / 3.0) / 2.0, epsilon = 1e-12);
        // class 2 absent from the labels
        assert_eq!(balanced_accuracy(&[0, 1], &[0, 1], 3).unwrap(), 100.0);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 75.0);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn histogram_edges_and_mass() {
        let e = log_edges(1e-8, 1.0, 8).unwrap();
        assert_eq!(e.len(), 9);
        assert_abs_diff_eq!(e[4], 1e-4, epsilon = 1e-16);
        let c = histogram_with_edges([0.0, 1e-9, 0.5, 1.0, 2.0, 1e-4].into_iter(), &e);
        assert_eq!(c.iter().sum::<usize>(), 6);
        assert_eq!(c[0], 2);
        assert_eq!(c[7], 3);
        assert_eq!(c[4], 1);
    }

    #[test]
    fn metrics_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut w = MetricsWriter::create(&p, &["feature_corrupt".into()]).unwrap();
        let mut consistency = BTreeMap::new();
        consistency.insert(
            "feature_corrupt".to_string(),
            Consistency {
                unchanged: 90.0,
                flipped: 10.0,
            },
        );
        w.write(&MetricsRecord {
            phase: "finetune".into(),
            epoch: 3,
            split: "test".into(),
            accuracy: 80.0,
            balanced_accuracy: 75.5,
            consistency,
            loss: Some(LossBreakdown::supervised(0.25)),
        })
        .unwrap();
        drop(w);
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "phase,epoch,split,l_sup,l_nce,lambda,total,accuracy,balanced_accuracy,consistency_feature_corrupt,flip_feature_corrupt"
        );
        assert_eq!(
            lines[1],
            "finetune,3,test,0.250000,0.000000,0.000000,0.250000,80.000000,75.500000,90.000000,10.000000"
        );
    }
}
