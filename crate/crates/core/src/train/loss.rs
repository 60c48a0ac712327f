//! Focal confidence loss, masked regression loss and their batch gradients.

use super::targets::TargetMaps;
use crate::error::{Error, Result};
use crate::net::model::{sigmoid, RawOutput, CONF_EPS};
use crate::net::tensor::{Scalar, Tensor};

/// Focal loss over one patch. `c` holds confidences in `(0, 1)`.
pub fn confidence_loss(c: &[f64], t: &TargetMaps, alpha: f64, gamma: f64) -> Result<f64> {
    check_len(c.len(), t.len())?;
    let mut e = 0.0;
    for (k, &ck) in c.iter().enumerate() {
        if !(ck > 0.0 && ck < 1.0) {
            return Err(Error::Domain(format!("confidence {ck} at origin {k} outside (0, 1)")));
        }
        if t.b[k] == 1 {
            e += focal_term(ck, t.c_hat[k] == 1, alpha, gamma);
        }
    }
    Ok(e)
}

/// Masked mean squared offset error over one patch; `r` interleaves `(dx, dy)`.
pub fn regression_loss(r: &[f64], t: &TargetMaps) -> Result<f64> {
    check_len(r.len(), 2 * t.len())?;
    let mut e = 0.0;
    for k in 0..t.len() {
        if t.b_star[k] == 1 {
            let dx = t.r_hat[2 * k] - r[2 * k];
            let dy = t.r_hat[2 * k + 1] - r[2 * k + 1];
            e += dx * dx + dy * dy;
        }
    }
    Ok(e / t.len() as f64)
}

pub fn total_loss(e_c: f64, e_r: f64, n_c: f64, n_r: f64) -> f64 {
    n_c * e_c + n_r * e_r
}

fn check_len(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        });
    }
    Ok(())
}

fn focal_term(c: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    if positive {
        -alpha * (1.0 - c).powf(gamma) * c.ln()
    } else {
        -c.powf(gamma) * (1.0 - c).ln()
    }
}

/// Derivative of the focal term with respect to the logit `z`, `c = sigmoid(z)`.
fn focal_logit_grad(c: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    if positive {
        alpha * (1.0 - c).powf(gamma) * (gamma * c * c.ln() - (1.0 - c))
    } else {
        c.powf(gamma) * (c - gamma * (1.0 - c) * (1.0 - c).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub n_c: f64,
    pub n_r: f64,
}

/// Batch loss and its gradients with respect to the raw network outputs.
#[derive(Debug, Clone)]
pub struct BatchLoss<S> {
    pub total: f64,
    pub confidence_sum: f64,
    pub regression_sum: f64,
    pub d_logits: Tensor<S>,
    pub d_offsets: Tensor<S>,
}

/// `E = n_c * sum_batch E_c + n_r * sum_batch E_r` over raw outputs.
pub fn batch_loss<S: Scalar>(raw: &RawOutput<S>, targets: &[&TargetMaps], w: &LossWeights) -> Result<BatchLoss<S>> {
    let (bn, m, n) = (raw.logits.n, raw.logits.h, raw.logits.w);
    if targets.len() != bn {
        return Err(Error::Shape {
            expected: format!("{bn} target maps"),
            got: targets.len().to_string(),
        });
    }
    let plane = m * n;
    let mut d_logits = raw.logits.zeros_like();
    let mut d_offsets = raw.offsets.zeros_like();
    let (mut ec_sum, mut er_sum) = (0.0, 0.0);
    for (s, t) in targets.iter().enumerate() {
        if t.grid_m != m || t.grid_n != n {
            return Err(Error::Shape {
                expected: format!("{m}x{n} targets"),
                got: format!("{}x{}", t.grid_m, t.grid_n),
            });
        }
        let logits = raw.logits.sample(s);
        let offsets = raw.offsets.sample(s);
        let dl = d_logits.sample_mut(s);
        for k in 0..plane {
            if t.b[k] == 0 {
                continue;
            }
            let c = sigmoid(logits[k].as_f64()).clamp(CONF_EPS, 1.0 - CONF_EPS);
            let pos = t.c_hat[k] == 1;
            ec_sum += focal_term(c, pos, w.alpha, w.gamma);
            dl[k] = S::of(w.n_c * focal_logit_grad(c, pos, w.alpha, w.gamma));
        }
        let dof = d_offsets.sample_mut(s);
        let scale = 1.0 / plane as f64;
        for k in 0..plane {
            if t.b_star[k] == 0 {
                continue;
            }
            for axis in 0..2 {
                let r = offsets[axis * plane + k].as_f64();
                let diff = r - t.r_hat[2 * k + axis];
                er_sum += diff * diff * scale;
                dof[axis * plane + k] = S::of(w.n_r * 2.0 * diff * scale);
            }
        }
    }
    Ok(BatchLoss {
        total: total_loss(ec_sum, er_sum, w.n_c, w.n_r),
        confidence_sum: ec_sum,
        regression_sum: er_sum,
        d_logits,
        d_offsets,
    })
}
