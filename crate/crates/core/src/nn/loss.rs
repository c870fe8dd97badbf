use super::{Scalar, Tensor};
use crate::types::IGNORE;

/// Per-pixel softmax over the channel axis.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let (k, hw) = (logits.c, logits.plane());
    for i in 0..logits.n {
        let item = out.item_mut(i);
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(item[c * hw + p]);
            }
            let mut s = T::zero();
            for c in 0..k {
                let e = (item[c * hw + p] - m).exp();
                item[c * hw + p] = e;
                s += e;
            }
            for c in 0..k {
                item[c * hw + p] = item[c * hw + p] / s;
            }
        }
    }
    out
}

/// Result of [`masked_cross_entropy`].
#[derive(Debug, Clone)]
pub struct MaskedLoss<T> {
    /// Mean cross-entropy over supervised pixels (zero when there are none).
    pub loss: T,
    /// d loss / d logits; exactly zero at IGNORE pixels.
    pub grad: Tensor<T>,
    pub supervised: usize,
}

/// Softmax cross-entropy averaged over pixels whose label is not IGNORE.
///
/// `labels` is `N×H×W`, one byte per pixel.
pub fn masked_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> MaskedLoss<T> {
    let (k, hw) = (logits.c, logits.plane());
    assert_eq!(labels.len(), logits.n * hw, "label count");
    let supervised = labels.iter().filter(|&&l| l != IGNORE).count();
    let mut grad = Tensor::zeros(logits.n, k, logits.h, logits.w);
    if supervised == 0 {
        return MaskedLoss { loss: T::zero(), grad, supervised };
    }
    let norm = T::lit(supervised as f64);
    let mut total = T::zero();
    for i in 0..logits.n {
        let z = logits.item(i);
        let g = grad.item_mut(i);
        for p in 0..hw {
            let label = labels[i * hw + p];
            if label == IGNORE {
                continue;
            }
            let label = label as usize;
            assert!(label < k, "label {label} out of range for {k} classes");
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(z[c * hw + p]);
            }
            let mut s = T::zero();
            for c in 0..k {
                s += (z[c * hw + p] - m).exp();
            }
            let lse = m + s.ln();
            total += lse - z[label * hw + p];
            for c in 0..k {
                let prob = (z[c * hw + p] - lse).exp();
                let target = if c == label { T::one() } else { T::zero() };
                g[c * hw + p] = (prob - target) / norm;
            }
        }
    }
    MaskedLoss { loss: total / norm, grad, supervised }
}
