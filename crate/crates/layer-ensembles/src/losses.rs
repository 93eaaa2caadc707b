//! Training losses on probability maps.
//!
//! Both losses take a probability tensor [B,K',H,W] and flat integer labels
//! of length B*H*W. For K'=1 the single channel is the foreground
//! probability and the implied class pair is {background, foreground}.

use crate::error::{LeError, Result};
use crate::tensor::Tensor;

pub const GDL_SMOOTH: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

fn check_labels(probs: &Tensor, labels: &[u32]) -> Result<(usize, usize, usize, usize)> {
    let sh = probs.shape();
    if sh.len() != 4 {
        return Err(LeError::InvalidArgument("loss expects [B,K,H,W] probabilities".into()));
    }
    let (b, k, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if labels.len() != b * h * w {
        return Err(LeError::ShapeMismatch {
            context: "loss labels".into(),
            expected: vec![b * h * w],
            got: vec![labels.len()],
        });
    }
    let classes = if k == 1 { 2 } else { k };
    if labels.iter().any(|&l| l as usize >= classes) {
        return Err(LeError::InvalidArgument("label out of class range".into()));
    }
    Ok((b, k, h, w))
}

/// Per-image class weight 1/(sum t_k)^2; absent classes contribute nothing.
fn class_weight(count: f64) -> f64 {
    if count > 0.0 {
        1.0 / (count * count)
    } else {
        0.0
    }
}

/// Sudre-style generalized Dice loss, averaged over the batch.
pub fn gdl_forward(probs: &Tensor, labels: &[u32]) -> Result<f64> {
    let (b_n, k, h, w) = check_labels(probs, labels)?;
    let plane = h * w;
    let classes = if k == 1 { 2 } else { k };
    let mut total = 0.0;
    for b in 0..b_n {
        let lab = &labels[b * plane..(b + 1) * plane];
        let mut num = 0.0;
        let mut den = 0.0;
        for c in 0..classes {
            let count = lab.iter().filter(|&&l| l as usize == c).count() as f64;
            let wc = class_weight(count);
            if wc == 0.0 {
                continue;
            }
            let mut inter = 0.0;
            let mut psum = 0.0;
            for i in 0..plane {
                let p = class_prob(probs, b, c, i, k, plane);
                psum += p;
                if lab[i] as usize == c {
                    inter += p;
                }
            }
            num += wc * inter;
            den += wc * (psum + count);
        }
        total += 1.0 - 2.0 * (num + GDL_SMOOTH) / (den + GDL_SMOOTH);
    }
    Ok(total / b_n as f64)
}

#[inline]
fn class_prob(probs: &Tensor, b: usize, c: usize, i: usize, k: usize, plane: usize) -> f64 {
    if k == 1 {
        let p = probs.data()[b * plane + i];
        if c == 1 {
            p
        } else {
            1.0 - p
        }
    } else {
        probs.data()[(b * k + c) * plane + i]
    }
}

/// d(gdl_forward)/d(probs).
pub fn gdl_backward(probs: &Tensor, labels: &[u32]) -> Tensor {
    let sh = probs.shape();
    let (b_n, k, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let plane = h * w;
    let classes = if k == 1 { 2 } else { k };
    let mut grad = Tensor::zeros(sh);
    for b in 0..b_n {
        let lab = &labels[b * plane..(b + 1) * plane];
        let mut weights = vec![0.0f64; classes];
        let mut num = 0.0;
        let mut den = 0.0;
        for c in 0..classes {
            let count = lab.iter().filter(|&&l| l as usize == c).count() as f64;
            weights[c] = class_weight(count);
            if weights[c] == 0.0 {
                continue;
            }
            let mut inter = 0.0;
            let mut psum = 0.0;
            for i in 0..plane {
                let p = class_prob(probs, b, c, i, k, plane);
                psum += p;
                if lab[i] as usize == c {
                    inter += p;
                }
            }
            num += weights[c] * inter;
            den += weights[c] * (psum + count);
        }
        let num_s = num + GDL_SMOOTH;
        let den_s = den + GDL_SMOOTH;
        // loss_b = 1 - 2*num_s/den_s; d/dNum = -2/den_s; d/dDen = 2*num_s/den_s^2
        let dnum = -2.0 / den_s / b_n as f64;
        let dden = 2.0 * num_s / (den_s * den_s) / b_n as f64;
        for c in 0..classes {
            if weights[c] == 0.0 {
                continue;
            }
            for i in 0..plane {
                let t = (lab[i] as usize == c) as usize as f64;
                let d = dnum * weights[c] * t + dden * weights[c];
                if k == 1 {
                    // p_fg = p, p_bg = 1 - p
                    let sign = if c == 1 { 1.0 } else { -1.0 };
                    grad.data_mut()[b * plane + i] += sign * d;
                } else {
                    grad.data_mut()[(b * k + c) * plane + i] += d;
                }
            }
        }
    }
    grad
}

/// Mean over pixels of -w_{t} * ln(clamp(p_t)), averaged over the batch too.
pub fn wce_forward(probs: &Tensor, labels: &[u32], weights: &[f64]) -> Result<f64> {
    let (b_n, k, h, w) = check_labels(probs, labels)?;
    let classes = if k == 1 { 2 } else { k };
    if weights.len() != classes {
        return Err(LeError::ShapeMismatch {
            context: "cross-entropy class weights".into(),
            expected: vec![classes],
            got: vec![weights.len()],
        });
    }
    let plane = h * w;
    let n = (b_n * plane) as f64;
    let mut total = 0.0;
    for b in 0..b_n {
        let lab = &labels[b * plane..(b + 1) * plane];
        for i in 0..plane {
            let c = lab[i] as usize;
            let p = class_prob(probs, b, c, i, k, plane).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= weights[c] * p.ln();
        }
    }
    Ok(total / n)
}

pub fn wce_backward(probs: &Tensor, labels: &[u32], weights: &[f64]) -> Tensor {
    let sh = probs.shape();
    let (b_n, k, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let plane = h * w;
    let n = (b_n * plane) as f64;
    let mut grad = Tensor::zeros(sh);
    for b in 0..b_n {
        let lab = &labels[b * plane..(b + 1) * plane];
        for i in 0..plane {
            let c = lab[i] as usize;
            let p = class_prob(probs, b, c, i, k, plane);
            if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                continue; // clamped region: flat
            }
            let d = -weights[c] / p / n;
            if k == 1 {
                let sign = if c == 1 { 1.0 } else { -1.0 };
                grad.data_mut()[b * plane + i] += sign * d;
            } else {
                grad.data_mut()[(b * k + c) * plane + i] += d;
            }
        }
    }
    grad
}
