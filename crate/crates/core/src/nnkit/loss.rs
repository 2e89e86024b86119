//! Scalar losses with their gradients. Batched losses average over the batch.

use super::{NnError, Tensor};

/// Clamp bounds applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Mean squared error over every entry; gradient is w.r.t. `pred`.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor), NnError> {
    let diff = pred.sub(target)?;
    let n = diff.len() as f64;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

/// Binary cross-entropy averaged over entries; `pred` holds probabilities.
pub fn bce(pred: &Tensor, label: &Tensor) -> Result<(f64, Tensor), NnError> {
    if pred.shape() != label.shape() {
        return Err(NnError::Shape {
            layer: None,
            msg: format!("bce shapes {:?} vs {:?}", pred.shape(), label.shape()),
        });
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.data().iter().zip(label.data()) {
        let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        loss -= y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln();
        let g = if p != clamped {
            0.0
        } else {
            (clamped - y) / (clamped * (1.0 - clamped))
        };
        grad.push(g / n);
    }
    Ok((loss / n, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Output of [`triplet_hinge`]: per-triplet gradients for each role.
#[derive(Debug, Clone)]
pub struct TripletGrad {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
}

/// Batch-mean `max(0, ‖a−p‖² − ‖a−n‖² + margin)` over `[batch, d]` embeddings.
pub fn triplet_hinge(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    margin: f64,
) -> Result<(f64, TripletGrad), NnError> {
    if anchor.shape() != positive.shape() || anchor.shape() != negative.shape() {
        return Err(NnError::Shape {
            layer: None,
            msg: "triplet embeddings must share a shape".into(),
        });
    }
    let batch = anchor.rows();
    let mut ga = Tensor::zeros(anchor.shape().to_vec());
    let mut gp = ga.clone();
    let mut gn = ga.clone();
    let mut total = 0.0;
    for b in 0..batch {
        let (a, p, n) = (anchor.row(b), positive.row(b), negative.row(b));
        let dp: f64 = a.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum();
        let dn: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = dp - dn + margin;
        if value <= 0.0 {
            continue;
        }
        total += value;
        let scale = 2.0 / batch as f64;
        let (ra, rp, rn) = (ga.row_mut(b), gp.row_mut(b), gn.row_mut(b));
        for k in 0..a.len() {
            ra[k] = scale * (n[k] - p[k]);
            rp[k] = scale * (p[k] - a[k]);
            rn[k] = scale * (a[k] - n[k]);
        }
    }
    Ok((
        total / batch as f64,
        TripletGrad {
            anchor: ga,
            positive: gp,
            negative: gn,
        },
    ))
}

/// Numerically stable row-wise softmax of `[batch, k]` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.row_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.row_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Batch-mean categorical cross-entropy `−Σ_k target_k · log softmax(logits)_k`.
/// With `target = softmax(logits)` this is the policy entropy. The gradient is
/// w.r.t. the logits with `target` held fixed.
pub fn categorical_entropy(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor), NnError> {
    if logits.shape() != target.shape() {
        return Err(NnError::Shape {
            layer: None,
            msg: "categorical logits/target shape mismatch".into(),
        });
    }
    let batch = logits.rows() as f64;
    let logp = log_softmax_rows(logits);
    let probs = softmax_rows(logits);
    let loss = -logp
        .data()
        .iter()
        .zip(target.data())
        .map(|(l, t)| l * t)
        .sum::<f64>()
        / batch;
    let k = logits.row_len();
    let mut grad = probs;
    for (grow, trow) in grad.data_mut().chunks_mut(k).zip(target.data().chunks(k)) {
        let mass: f64 = trow.iter().sum();
        for (g, t) in grow.iter_mut().zip(trow) {
            *g = (*g * mass - t) / batch;
        }
    }
    Ok((loss, grad))
}
