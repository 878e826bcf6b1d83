//! Supervised and contrastive losses.
//!
//! `l_nce` follows the form with no temperature and the positive pair left
//! out of the denominator; [`ContrastiveForm::InfoNce`] adds the positive back.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Augmenter;
use crate::error::{Error, Result};
use crate::nn::{Mode, ModelState};
use crate::scalar::Scalar;

static DEGENERATE_EMBEDDINGS: AtomicU64 = AtomicU64::new(0);

/// Number of zero-norm embeddings seen by the cosine similarity so far.
pub fn degenerate_count() -> u64 {
    DEGENERATE_EMBEDDINGS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// Negatives only in the denominator.
    #[default]
    NegativesOnly,
    /// Positive and negatives in the denominator.
    InfoNce,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_nce: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_sup: f64, l_nce: f64, lambda: f64) -> Self {
        Self {
            l_sup,
            l_nce,
            lambda,
            total: l_sup + lambda * l_nce,
        }
    }

    pub fn supervised(l_sup: f64) -> Self {
        Self::new(l_sup, 0.0, 0.0)
    }
}

fn check_labels(rows: usize, labels: &[usize], classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim("label count", rows, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::param(
            "labels",
            format!("label {bad} outside 0..{classes}"),
        ));
    }
    Ok(())
}

/// Mean negative log-likelihood of the labels under softmax(logits).
pub fn l_sup<T: Scalar>(logits: ArrayView2<T>, labels: &[usize]) -> Result<f64> {
    Ok(l_sup_with_grad(logits, labels)?.0)
}

/// Loss together with its gradient with respect to the logits.
pub fn l_sup_with_grad<T: Scalar>(
    logits: ArrayView2<T>,
    labels: &[usize],
) -> Result<(f64, Array2<T>)> {
    let (rows, classes) = logits.dim();
    check_labels(rows, labels, classes)?;
    if rows == 0 {
        return Err(Error::param("batch", "empty batch"));
    }
    let n = rows as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((rows, classes));
    for (i, row) in logits.rows().into_iter().enumerate() {
        let z: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - z[labels[i]];
        for (j, &v) in z.iter().enumerate() {
            let p = (v - lse).exp();
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            grad[[i, j]] = T::of((p - target) / n);
        }
    }
    Ok((loss / n, grad))
}

/// `u.v / (|u||v|)`, defined as 0 when either vector is zero.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> f64 {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        DEGENERATE_EMBEDDINGS.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// Anchor embeddings, one positive view per anchor and, per anchor, the
/// indices of the views that serve as its negatives.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    anchors: Array2<f64>,
    views: Array2<f64>,
    negatives: Vec<Vec<usize>>,
    labels: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn new(
        anchors: Array2<f64>,
        views: Array2<f64>,
        negatives: Vec<Vec<usize>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let n = anchors.nrows();
        if views.dim() != anchors.dim() {
            return Err(Error::dim(
                "contrastive views",
                format!("{:?}", anchors.dim()),
                format!("{:?}", views.dim()),
            ));
        }
        if labels.len() != n || negatives.len() != n {
            return Err(Error::dim(
                "contrastive labels",
                n,
                labels.len().min(negatives.len()),
            ));
        }
        for (i, neg) in negatives.iter().enumerate() {
            if neg.is_empty() {
                return Err(Error::param(
                    "contrastive batch",
                    format!("anchor {i} has no negatives; batches need at least two classes (use stratified batching)"),
                ));
            }
            if let Some(&j) = neg.iter().find(|&&j| j >= n || labels[j] == labels[i]) {
                return Err(Error::param(
                    "contrastive batch",
                    format!("view {j} is not a valid negative for anchor {i}"),
                ));
            }
        }
        Ok(Self {
            anchors,
            views,
            negatives,
            labels,
        })
    }

    /// Negatives of anchor `i` are the views of every row with a different label.
    pub fn from_labels(
        anchors: Array2<f64>,
        views: Array2<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let negatives = labels
            .iter()
            .map(|&yi| (0..labels.len()).filter(|&j| labels[j] != yi).collect())
            .collect();
        Self::new(anchors, views, negatives, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn anchors(&self) -> &Array2<f64> {
        &self.anchors
    }

    pub fn views(&self) -> &Array2<f64> {
        &self.views
    }

    pub fn negatives(&self, anchor: usize) -> &[usize] {
        &self.negatives[anchor]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

fn normalize_rows(m: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let zero = norms.iter().filter(|&&n| n == 0.0).count();
    if zero > 0 {
        DEGENERATE_EMBEDDINGS.fetch_add(zero as u64, Ordering::Relaxed);
    }
    let mut u = m.clone();
    for (mut row, &n) in u.rows_mut().into_iter().zip(norms.iter()) {
        if n == 0.0 {
            row.fill(0.0);
        } else {
            row /= n;
        }
    }
    (u, norms)
}

/// Backpropagates through `u = x / |x|`.
fn normalize_backward(u: &Array2<f64>, norms: &Array1<f64>, du: Array2<f64>) -> Array2<f64> {
    let mut dx = du;
    for ((mut d, ur), &n) in dx.rows_mut().into_iter().zip(u.rows()).zip(norms.iter()) {
        if n == 0.0 {
            d.fill(0.0);
            continue;
        }
        let proj = ur.dot(&d);
        d.zip_mut_with(&ur, |g, &uu| *g = (*g - uu * proj) / n);
    }
    dx
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn l_nce(cb: &ContrastiveBatch, form: ContrastiveForm) -> f64 {
    l_nce_with_grad(cb, form).0
}

/// Loss and gradients with respect to the anchors and the views.
pub fn l_nce_with_grad(
    cb: &ContrastiveBatch,
    form: ContrastiveForm,
) -> (f64, Array2<f64>, Array2<f64>) {
    let n = cb.len();
    let (ua, na) = normalize_rows(&cb.anchors);
    let (uv, nv) = normalize_rows(&cb.views);
    let sims = ua.dot(&uv.t());
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut g = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let neg = &cb.negatives[i];
        let pos = sims[[i, i]];
        let denom_terms: Vec<usize> = match form {
            ContrastiveForm::NegativesOnly => neg.clone(),
            ContrastiveForm::InfoNce => std::iter::once(i).chain(neg.iter().copied()).collect(),
        };
        let lse = log_sum_exp(denom_terms.iter().map(|&j| sims[[i, j]]));
        loss += lse - pos;
        g[[i, i]] -= scale;
        for &j in &denom_terms {
            g[[i, j]] += (sims[[i, j]] - lse).exp() * scale;
        }
    }
    let dua = g.dot(&uv);
    let duv = g.t().dot(&ua);
    let da = normalize_backward(&ua, &na, dua);
    let dv = normalize_backward(&uv, &nv, duv);
    (loss * scale, da, dv)
}

fn to_f64<T: Scalar>(m: ArrayView2<T>) -> Array2<f64> {
    m.mapv(|v| v.as_f64())
}

fn from_f64<T: Scalar>(m: &Array2<f64>) -> Array2<T> {
    m.mapv(T::of)
}

fn distinct_labels(labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// One sampled view `g(x)` per row.
pub fn sample_views<T: Scalar>(
    aug: &Augmenter,
    x: ArrayView2<T>,
    rng: &mut impl Rng,
) -> Result<Array2<T>> {
    Ok(from_f64(&aug.views(to_f64(x).view(), rng)?))
}

/// Train-mode ILO evaluation on fixed views, leaving gradients on the model.
///
/// Anchors and views go through a single forward pass; the supervised term
/// only sees the anchors.
pub fn ilo_with_views<T: Scalar>(
    model: &mut ModelState<T>,
    x: ArrayView2<T>,
    labels: &[usize],
    views: ArrayView2<T>,
    lambda: f64,
    form: ContrastiveForm,
) -> Result<LossBreakdown> {
    let b = x.nrows();
    if distinct_labels(labels) < 2 {
        return Err(Error::param(
            "batch",
            "ILO needs at least two classes per batch for negatives; use stratified batching",
        ));
    }
    if views.dim() != x.dim() {
        return Err(Error::dim(
            "views",
            format!("{:?}", x.dim()),
            format!("{:?}", views.dim()),
        ));
    }
    let joint = ndarray::concatenate(Axis(0), &[x, views]).expect("same width");
    let out = model.forward(joint.view(), Mode::Train)?;
    let (sup, gsup) = l_sup_with_grad(out.logits.slice(ndarray::s![..b, ..]), labels)?;
    let hidden = to_f64(out.hidden.view());
    let cb = ContrastiveBatch::from_labels(
        hidden.slice(ndarray::s![..b, ..]).to_owned(),
        hidden.slice(ndarray::s![b.., ..]).to_owned(),
        labels.to_vec(),
    )?;
    let (nce, da, dv) = l_nce_with_grad(&cb, form);
    let mut glogits = Array2::<T>::zeros(out.logits.raw_dim());
    glogits.slice_mut(ndarray::s![..b, ..]).assign(&gsup);
    let mut ghidden = ndarray::concatenate(Axis(0), &[da.view(), dv.view()]).expect("same width");
    ghidden *= lambda;
    model.backward(glogits.view(), Some(from_f64::<T>(&ghidden).view()))?;
    Ok(LossBreakdown::new(sup, nce, lambda))
}

/// Samples one `g` per anchor and evaluates `l_sup + lambda * l_nce`,
/// leaving the gradients of the total on the model.
pub fn ilo_loss<T: Scalar>(
    model: &mut ModelState<T>,
    x: ArrayView2<T>,
    labels: &[usize],
    aug: &Augmenter,
    lambda: f64,
    form: ContrastiveForm,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    if distinct_labels(labels) < 2 {
        return Err(Error::param(
            "batch",
            "ILO needs at least two classes per batch for negatives; use stratified batching",
        ));
    }
    let views = sample_views(aug, x, rng)?;
    ilo_with_views(model, x, labels, views.view(), lambda, form)
}

/// Train-mode supervised loss, leaving gradients on the model.
pub fn sup_loss<T: Scalar>(
    model: &mut ModelState<T>,
    x: ArrayView2<T>,
    labels: &[usize],
) -> Result<f64> {
    let out = model.forward(x, Mode::Train)?;
    let (loss, g) = l_sup_with_grad(out.logits.view(), labels)?;
    model.backward(g.view(), None)?;
    Ok(loss)
}

fn eval_embeddings<T: Scalar>(
    model: &ModelState<T>,
    x: ArrayView2<T>,
    aug: &Augmenter,
    rng: &mut impl Rng,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let views = sample_views(aug, x, rng)?;
    let anchors = to_f64(model.infer(x)?.hidden.view());
    let positives = to_f64(model.infer(views.view())?.hidden.view());
    Ok((anchors, positives))
}

/// `l_nce` on eval-mode embeddings, drawing views exactly like
/// [`invariance_objective`] does.
pub fn contrastive_eval<T: Scalar>(
    model: &ModelState<T>,
    x: ArrayView2<T>,
    labels: &[usize],
    aug: &Augmenter,
    form: ContrastiveForm,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (anchors, views) = eval_embeddings(model, x, aug, rng)?;
    let cb = ContrastiveBatch::from_labels(anchors, views, labels.to_vec())?;
    Ok(l_nce(&cb, form))
}

/// Empirical invariance objective with `psi = exp(cos)`:
/// mean over anchors of `-ln(psi(a, g(a)) / sum psi(a, g(x')))` over `x'`
/// with a different label.
pub fn invariance_objective<T: Scalar>(
    model: &ModelState<T>,
    x: ArrayView2<T>,
    labels: &[usize],
    aug: &Augmenter,
    rng: &mut impl Rng,
) -> Result<f64> {
    check_labels(x.nrows(), labels, usize::MAX)?;
    if distinct_labels(labels) < 2 {
        return Err(Error::param("samples", "need at least two distinct labels"));
    }
    let (anchors, views) = eval_embeddings(model, x, aug, rng)?;
    let psi = |i: usize, j: usize| {
        cosine_sim(
            anchors.row(i).as_slice().expect("standard layout"),
            views.row(j).as_slice().expect("standard layout"),
        )
        .exp()
    };
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n)
            .filter(|&j| labels[j] != labels[i])
            .map(|j| psi(i, j))
            .sum();
        total += -(psi(i, i) / denom).ln();
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn l_sup_hand_values() {
        let two = std::f64::consts::LN_2;
        assert_abs_diff_eq!(
            l_sup(array![[0.0, 0.0]].view(), &[0]).unwrap(),
            two,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            l_sup(array![[0.0, 0.0]].view(), &[1]).unwrap(),
            two,
            epsilon = 1e-12
        );
        let big = l_sup(array![[1000.0, 0.0]].view(), &[0]).unwrap();
        assert!(big.is_finite() && big.abs() < 1e-12);
        let e = |v: f64| v.exp();
        let oracle = -(e(3.0) / (e(1.0) + e(2.0) + e(3.0))).ln();
        let got = l_sup(array![[1.0, 2.0, 3.0]].view(), &[2]).unwrap();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 0.407606, epsilon = 1e-6);
        assert!(l_sup(array![[0.0, 0.0]].view(), &[2]).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert_abs_diff_eq!(cosine_sim(&[3.0, 4.0], &[3.0, 4.0]), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[-1.0, 0.0]), -1.0);
        let before = degenerate_count();
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!(degenerate_count() > before);
    }

    #[test]
    fn batch_validation() {
        let same_label = ContrastiveBatch::new(
            array![[1.0, 0.0], [0.0, 1.0]],
            array![[1.0, 0.0], [0.0, 1.0]],
            vec![vec![1], vec![0]],
            vec![0, 0],
        );
        assert!(same_label.is_err());
        let none = ContrastiveBatch::new(
            array![[1.0, 0.0]],
            array![[1.0, 0.0]],
            vec![vec![]],
            vec![0],
        );
        assert!(none.is_err());
        assert!(ContrastiveBatch::from_labels(
            array![[1.0], [2.0]],
            array![[1.0], [2.0]],
            vec![1, 1]
        )
        .is_err());
    }

    #[test]
    fn l_nce_single_anchor_batches() {
        // Two anchors, each the other's only negative.
        let cb = ContrastiveBatch::from_labels(
            array![[1.0, 0.0], [1.0, 0.0]],
            array![[5.0, 0.0], [5.0, 0.0]],
            vec![0, 1],
        )
        .unwrap();
        assert_abs_diff_eq!(
            l_nce(&cb, ContrastiveForm::NegativesOnly),
            0.0,
            epsilon = 1e-15
        );
        let cb = ContrastiveBatch::from_labels(
            array![[1.0, 0.0], [-1.0, 0.0]],
            array![[1.0, 0.0], [-1.0, 0.0]],
            vec![0, 1],
        )
        .unwrap();
        assert_abs_diff_eq!(
            l_nce(&cb, ContrastiveForm::NegativesOnly),
            -2.0,
            epsilon = 1e-15
        );
        // with the positive in the denominator: ln(e + e^-1) - 1
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(
            l_nce(&cb, ContrastiveForm::InfoNce),
            (e + 1.0 / e).ln() - 1.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn l_nce_gradient_matches_differences() {
        let anchors = array![
            [0.3, -1.2, 0.5],
            [1.1, 0.4, -0.7],
            [-0.2, 0.9, 0.8],
            [0.6, 0.6, -0.1]
        ];
        let views = array![
            [0.1, -0.8, 0.9],
            [1.3, -0.2, -0.4],
            [-0.5, 1.0, 0.2],
            [0.2, 0.7, 0.3]
        ];
        let labels = vec![0, 1, 0, 2];
        for form in [ContrastiveForm::NegativesOnly, ContrastiveForm::InfoNce] {
            let cb = ContrastiveBatch::from_labels(anchors.clone(), views.clone(), labels.clone())
                .unwrap();
            let (_, da, dv) = l_nce_with_grad(&cb, form);
            let h = 1e-6;
            for (which, analytic) in [(0, &da), (1, &dv)] {
                for idx in 0..12 {
                    let (r, c) = (idx / 3, idx % 3);
                    let eval = |delta: f64| {
                        let mut a = anchors.clone();
                        let mut v = views.clone();
                        if which == 0 {
                            a[[r, c]] += delta;
                        } else {
                            v[[r, c]] += delta;
                        }
                        l_nce(
                            &ContrastiveBatch::from_labels(a, v, labels.clone()).unwrap(),
                            form,
                        )
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    assert_abs_diff_eq!(analytic[[r, c]], fd, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn l_nce_scale_invariant() {
        let a = array![[0.3, -1.2], [1.1, 0.4], [-0.2, 0.9]];
        let v = array![[0.1, -0.8], [1.3, -0.2], [-0.5, 1.0]];
        let y = vec![0, 1, 1];
        let base = l_nce(
            &ContrastiveBatch::from_labels(a.clone(), v.clone(), y.clone()).unwrap(),
            ContrastiveForm::NegativesOnly,
        );
        for c in [0.1, 2.0, 1e3] {
            let s = l_nce(
                &ContrastiveBatch::from_labels(&a * c, &v * c, y.clone()).unwrap(),
                ContrastiveForm::NegativesOnly,
            );
            assert_abs_diff_eq!(base, s, epsilon = 1e-12);
        }
    }

    #[test]
    fn breakdown_total() {
        let b = LossBreakdown::new(0.7, -0.3, 0.0);
        assert_eq!(b.total, 0.7);
        let b = LossBreakdown::new(0.7, -0.3, 1.0);
        assert_abs_diff_eq!(b.total, 0.4, epsilon = 1e-12);
    }
}
