//! Softmax cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy of softmax(logits) against integer labels, plus the
/// gradient with respect to the logits: `(softmax - onehot) / B`. Stable for
/// large logits via max subtraction.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [batch, classes] = *logits.shape() else {
        return Err(Error::dim(format!(
            "expected [B, C] logits, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != batch {
        return Err(Error::dim(format!(
            "{} labels for batch of {batch}",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    let ld = logits.data();
    let mut grad = Tensor::zeros(&[batch, classes]);
    let gd = grad.data_mut();
    let mut loss = 0.0;
    for b in 0..batch {
        let label = labels[b];
        if label >= classes {
            return Err(Error::Input(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = &ld[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row {
            z += (v - max).exp();
        }
        loss += z.ln() - (row[label] - max);
        let grow = &mut gd[b * classes..(b + 1) * classes];
        for (g, &v) in grow.iter_mut().zip(row) {
            *g = (v - max).exp() / z;
        }
        grow[label] -= 1.0;
    }
    let scale = 1.0 / batch as f64;
    for g in gd.iter_mut() {
        *g *= scale;
    }
    Ok((loss * scale, grad))
}
