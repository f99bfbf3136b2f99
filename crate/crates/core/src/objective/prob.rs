//! Probability vectors, divergences and their gradients.
//!
//! Every logarithm takes a probability floored at [`PROB_FLOOR`]; all
//! divergences are in nats. Batch functions return batch means together with
//! the gradient of that mean with respect to each input row.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const PROB_FLOOR: f64 = 1e-12;

#[inline]
fn floor<T: Real>() -> T {
    T::of(PROB_FLOOR)
}

#[inline]
fn ln_floored<T: Real>(p: T) -> T {
    p.max(floor()).ln()
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<T: Real = f64>(Vec<T>);

impl<T: Real> ProbVector<T> {
    pub fn new(p: Vec<T>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::invalid("probability vector must be non-empty"));
        }
        if p.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::invalid("probabilities must be finite and non-negative"));
        }
        let s: f64 = p.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("probabilities sum to {s}, expected 1")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Rows of temperature-scaled softmax outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch<T: Real = f32> {
    probs: Array2<T>,
    tau: T,
}

impl<T: Real> ProbBatch<T> {
    pub fn probs(&self) -> &Array2<T> {
        &self.probs
    }

    pub fn tau(&self) -> T {
        self.tau
    }

    pub fn row(&self, i: usize) -> ProbVector<T> {
        ProbVector(self.probs.row(i).to_vec())
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    /// Gradient with respect to the logits given the gradient with respect
    /// to the probabilities: `p * (g - <p, g>) / tau` row-wise.
    pub fn backward(&self, dprobs: &Array2<T>) -> Array2<T> {
        let mut out = Array2::<T>::zeros(self.probs.raw_dim());
        for ((mut o, p), g) in out
            .axis_iter_mut(Axis(0))
            .zip(self.probs.axis_iter(Axis(0)))
            .zip(dprobs.axis_iter(Axis(0)))
        {
            let dot: T = p.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
            for ((ov, &pv), &gv) in o.iter_mut().zip(p.iter()).zip(g.iter()) {
                *ov = pv * (gv - dot) / self.tau;
            }
        }
        out
    }
}

pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `Softmax(z / tau)` row-wise, computed with max-subtraction.
pub fn softmax_temperature<T: Real>(logits: ArrayView2<T>, tau: T) -> Result<ProbBatch<T>> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be > 0, got {tau}")));
    }
    let mut probs = logits.to_owned();
    for mut row in probs.axis_iter_mut(Axis(0)) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - m) / tau).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(ProbBatch { probs, tau })
}

pub fn softmax<T: Real>(logits: ArrayView2<T>) -> ProbBatch<T> {
    softmax_temperature(logits, T::one()).expect("unit temperature is valid")
}

/// `KL(p || q) = sum_k p_k (ln p_k - ln q_k)` with floored logarithms.
pub fn kl_divergence<T: Real>(p: &ProbVector<T>, q: &ProbVector<T>) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("length {}", p.len()),
            actual: format!("length {}", q.len()),
        });
    }
    Ok(kl_row(p.as_slice(), q.as_slice()).max(T::zero()))
}

fn kl_row<T: Real>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| a * (ln_floored(a) - ln_floored(b)))
        .sum()
}

/// `(1/n) sum_i KL(p_i || m)` with `m` the mean distribution.
pub fn js_divergence<T: Real>(dists: &[&ProbVector<T>]) -> Result<T> {
    if dists.len() < 2 {
        return Err(Error::invalid("JS divergence needs at least two distributions"));
    }
    let k = dists[0].len();
    if let Some(bad) = dists.iter().find(|d| d.len() != k) {
        return Err(Error::ShapeMismatch {
            expected: format!("length {k}"),
            actual: format!("length {}", bad.len()),
        });
    }
    let rows: Vec<&[T]> = dists.iter().map(|d| d.as_slice()).collect();
    Ok(js_row(&rows).max(T::zero()))
}

fn js_row<T: Real>(rows: &[&[T]]) -> T {
    let n = T::of(rows.len() as f64);
    let k = rows[0].len();
    let m: Vec<T> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<T>() / n).collect();
    rows.iter().map(|r| kl_row(r, &m)).sum::<T>() / n
}

/// Mean of `-ln p_y` with floored probabilities.
pub fn cross_entropy<T: Real>(probs: &ProbBatch<T>, labels: &[usize]) -> Result<T> {
    check_labels(probs.probs.view(), labels)?;
    let n = T::of(labels.len() as f64);
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -ln_floored(probs.probs[[i, y]]))
        .sum::<T>()
        / n)
}

pub fn check_labels<T: Real>(rows: ArrayView2<T>, labels: &[usize]) -> Result<()> {
    if rows.nrows() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", rows.nrows()),
            actual: format!("{} labels", labels.len()),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= rows.ncols()) {
        return Err(Error::invalid(format!("label {y} out of range for {} classes", rows.ncols())));
    }
    Ok(())
}

fn check_same_shape<T: Real>(a: &Array2<T>, b: &Array2<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.dim()),
            actual: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// Per-sample cross-entropy from logits and its gradient (of the batch mean).
///
/// Equals `-ln max(p_y, floor)`; the gradient vanishes where the floor binds.
pub fn ce_from_logits<T: Real>(logits: &Array2<T>, labels: &[usize]) -> Result<(Vec<T>, Array2<T>)> {
    check_labels(logits.view(), labels)?;
    let probs = softmax(logits.view());
    let n = T::of(labels.len() as f64);
    let cap = -T::of(PROB_FLOOR).ln();
    let mut per = Vec::with_capacity(labels.len());
    let mut grad = probs.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
        let ce = lse - row[y];
        let mut g = grad.row_mut(i);
        if ce >= cap {
            per.push(cap);
            g.fill(T::zero());
        } else {
            per.push(ce);
            g[y] -= T::one();
            g.mapv_inplace(|v| v / n);
        }
    }
    Ok((per, grad))
}

/// Row-wise `KL(p_i || q_i)`, returning per-sample values and the gradients
/// of the batch mean with respect to `p` and `q`.
#[allow(clippy::type_complexity)]
pub fn kl_rows<T: Real>(p: &Array2<T>, q: &Array2<T>) -> Result<(Vec<T>, Array2<T>, Array2<T>)> {
    check_same_shape(p, q)?;
    let n = T::of(p.nrows() as f64);
    let eps = floor::<T>();
    let mut per = Vec::with_capacity(p.nrows());
    let mut dp = Array2::<T>::zeros(p.raw_dim());
    let mut dq = Array2::<T>::zeros(p.raw_dim());
    for i in 0..p.nrows() {
        let (pr, qr) = (p.row(i), q.row(i));
        let mut kl = T::zero();
        for k in 0..p.ncols() {
            let (a, b) = (pr[k], qr[k]);
            kl += a * (ln_floored(a) - ln_floored(b));
            dp[[i, k]] = if a > eps {
                (a.ln() - ln_floored(b) + T::one()) / n
            } else {
                (eps.ln() - ln_floored(b)) / n
            };
            dq[[i, k]] = if b > eps { -a / b / n } else { T::zero() };
        }
        per.push(kl);
    }
    Ok((per, dp, dq))
}

/// Row-wise JS divergence across `rows.len()` distributions, with the
/// gradient of the batch mean for each input.
pub fn js_rows<T: Real>(rows: &[&Array2<T>]) -> Result<(Vec<T>, Vec<Array2<T>>)> {
    if rows.len() < 2 {
        return Err(Error::invalid("JS divergence needs at least two distributions"));
    }
    for r in &rows[1..] {
        check_same_shape(rows[0], r)?;
    }
    let nd = T::of(rows.len() as f64);
    let (b, k) = rows[0].dim();
    let nb = T::of(b as f64);
    let mut per = Vec::with_capacity(b);
    let mut grads: Vec<Array2<T>> = rows.iter().map(|_| Array2::zeros((b, k))).collect();
    for i in 0..b {
        let m: Vec<T> = (0..k).map(|j| rows.iter().map(|r| r[[i, j]]).sum::<T>() / nd).collect();
        let mut total = T::zero();
        for (r, g) in rows.iter().zip(grads.iter_mut()) {
            for j in 0..k {
                let p = r[[i, j]];
                total += p * (ln_floored(p) - ln_floored(m[j]));
                g[[i, j]] = (ln_floored(p) - ln_floored(m[j])) / nd / nb;
            }
        }
        per.push(total / nd);
    }
    Ok((per, grads))
}

/// Row-wise squared Euclidean distance and the gradient of its batch mean.
pub fn mse_rows<T: Real>(p: &Array2<T>, q: &Array2<T>) -> Result<(Vec<T>, Array2<T>, Array2<T>)> {
    check_same_shape(p, q)?;
    let nb = T::of(p.nrows() as f64);
    let diff = p - q;
    let per = diff
        .axis_iter(Axis(0))
        .map(|r| r.iter().map(|&d| d * d).sum())
        .collect();
    let dp = diff.mapv(|d| T::of(2.0) * d / nb);
    let dq = dp.mapv(|v| -v);
    Ok((per, dp, dq))
}

/// `max_{k != y} z_k - z_y` per sample and the gradient of its batch mean.
pub fn cw_margin_rows<T: Real>(logits: &Array2<T>, labels: &[usize]) -> Result<(Vec<T>, Array2<T>)> {
    check_labels(logits.view(), labels)?;
    if logits.ncols() < 2 {
        return Err(Error::invalid("CW margin requires at least two classes"));
    }
    let nb = T::of(labels.len() as f64);
    let mut per = Vec::with_capacity(labels.len());
    let mut grad = Array2::<T>::zeros(logits.raw_dim());
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best = usize::MAX;
        for k in 0..row.len() {
            if k != y && (best == usize::MAX || row[k] > row[best]) {
                best = k;
            }
        }
        per.push(row[best] - row[y]);
        grad[[i, best]] = T::one() / nb;
        grad[[i, y]] = -T::one() / nb;
    }
    Ok((per, grad))
}

/// Per-sample CW margin `max_{k != y} z_k - z_y`.
pub fn cw_margin_loss<T: Real>(logits: &Array2<T>, labels: &[usize]) -> Result<Vec<T>> {
    cw_margin_rows(logits, labels).map(|(v, _)| v)
}

/// Index of the most probable class other than `y`.
pub fn runner_up<T: Real>(row: &[T], y: usize) -> usize {
    let mut best = usize::MAX;
    for (k, &v) in row.iter().enumerate() {
        if k != y && (best == usize::MAX || v > row[best]) {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pv(v: &[f64]) -> ProbVector<f64> {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temperature(array![[0.0f64, 0.0]].view(), 0.3).unwrap();
        assert!((p.probs()[[0, 0]] - 0.5).abs() < 1e-12);
        let p = softmax_temperature(array![[1.0f64, 0.0]].view(), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p.probs()[[0, 0]] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.probs()[[0, 0]] - 0.7311).abs() < 1e-4);
        assert!(softmax_temperature(array![[1.0f64, 0.0]].view(), 0.0).is_err());
        assert!(softmax_temperature(array![[1.0f64, 0.0]].view(), -1.0).is_err());
    }

    #[test]
    fn sharpening_increases_max_probability() {
        let z = array![[0.3f64, -1.2, 2.0]];
        let p1 = softmax_temperature(z.view(), 1.0).unwrap();
        let p05 = softmax_temperature(z.view(), 0.5).unwrap();
        assert!(p05.probs()[[0, 2]] > p1.probs()[[0, 2]]);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&pv(&[0.3, 0.7]), &pv(&[0.3, 0.7])).unwrap(), 0.0);
        let v = kl_divergence(&pv(&[1.0, 0.0]), &pv(&[0.5, 0.5])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let a = kl_divergence(&pv(&[0.8, 0.2]), &pv(&[0.5, 0.5])).unwrap();
        let b = kl_divergence(&pv(&[0.5, 0.5]), &pv(&[0.8, 0.2])).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn js_examples() {
        let v = js_divergence(&[&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let p = pv(&[0.2, 0.3, 0.5]);
        assert_eq!(js_divergence(&[&p, &p]).unwrap(), 0.0);
        assert_eq!(js_divergence(&[&p, &p, &p]).unwrap(), 0.0);
        assert!(js_divergence(&[&p, &pv(&[0.5, 0.5])]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = softmax(array![[0.0f64; 10]].view());
        assert!((cross_entropy(&uniform, &[3]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let confident = softmax(array![[100.0f64, 0.0]].view());
        assert!(cross_entropy(&confident, &[0]).unwrap() < 1e-12);
        assert!(cross_entropy(&confident, &[2]).is_err());
    }

    #[test]
    fn cw_margin_examples() {
        let v = cw_margin_loss(&array![[5.0f64, 1.0]], &[0]).unwrap();
        assert_eq!(v, vec![-4.0]);
        assert_eq!(cw_margin_loss(&array![[2.0f64, 2.0, 2.0]], &[1]).unwrap(), vec![0.0]);
        assert!(cw_margin_loss(&array![[1.0f64]], &[0]).is_err());
    }

    #[test]
    fn mse_examples() {
        let (v, ..) = mse_rows(&array![[1.0f64, 0.0]], &array![[0.0, 1.0]]).unwrap();
        assert_eq!(v, vec![2.0]);
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5f64, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1f64, 1.1]).is_err());
        assert!(ProbVector::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn ce_floor_caps_value_and_zeroes_gradient() {
        let (v, g) = ce_from_logits(&array![[0.0f64, 200.0]], &[0]).unwrap();
        assert!((v[0] - (-(PROB_FLOOR.ln()))).abs() < 1e-9);
        assert!(g.iter().all(|&x| x == 0.0));
    }
}
