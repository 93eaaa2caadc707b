//! Combining head outputs into a final segmentation: arithmetic averaging
//! and STAPLE weighted voting (EM over per-rater sensitivity/specificity).

use crate::error::{LeError, Result};
use crate::mask::LabelMask;
use crate::model::HeadOutputs;
use crate::tensor::Tensor;

pub const STAPLE_TOL: f64 = 1e-6;
pub const STAPLE_MAX_ITER: usize = 100;
pub const STAPLE_INIT_PQ: f64 = 0.99999;

#[derive(Debug, Clone)]
pub struct FusedPrediction {
    /// Fused class-probability map [K',H,W] (averaging) or per-class
    /// posterior map (STAPLE).
    pub prob: Tensor,
    pub label: LabelMask,
    pub skip: usize,
}

#[derive(Debug, Clone)]
pub struct StapleResult {
    /// Per-rater sensitivity.
    pub p: Vec<f64>,
    /// Per-rater specificity.
    pub q: Vec<f64>,
    /// Per-pixel posterior probability of true foreground.
    pub posterior: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

fn check_skip(n: usize, skip: usize) -> Result<()> {
    if n < 2 || skip > n - 2 {
        return Err(LeError::InvalidArgument(format!(
            "skip {skip} leaves fewer than two of {n} heads"
        )));
    }
    Ok(())
}

/// Threshold/argmax a single head map [K',H,W] into integer labels.
pub fn binarize_head(map: &Tensor) -> LabelMask {
    let sh = map.shape();
    let (k, h, w) = (sh[0], sh[1], sh[2]);
    let plane = h * w;
    let mut labels = vec![0u32; plane];
    if k == 1 {
        for i in 0..plane {
            labels[i] = (map.data()[i] >= 0.5) as u32;
        }
        LabelMask::new(labels, h, w, 2).expect("binarize shape")
    } else {
        for i in 0..plane {
            let mut best = 0usize;
            let mut best_v = map.data()[i];
            for c in 1..k {
                let v = map.data()[c * plane + i];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            labels[i] = best as u32;
        }
        LabelMask::new(labels, h, w, k).expect("binarize shape")
    }
}

/// Arithmetic mean of the non-skipped head maps, then threshold/argmax.
pub fn average_fuse(outputs: &HeadOutputs, skip: usize) -> Result<FusedPrediction> {
    let n = outputs.num_heads();
    check_skip(n, skip)?;
    let shape = outputs.probs[skip].shape().to_vec();
    let mut acc = Tensor::zeros(&shape);
    let m = (n - skip) as f64;
    for map in &outputs.probs[skip..] {
        acc.axpy(1.0 / m, map);
    }
    let label = binarize_head(&acc);
    Ok(FusedPrediction {
        prob: acc,
        label,
        skip,
    })
}

/// Binary STAPLE on a set of rater masks (flattened, same length).
///
/// Spatially uniform prior set to the mean foreground fraction across
/// raters; raters initialized near-perfect. Unanimous all-empty or all-full
/// input is degenerate for EM and returns the consensus directly.
pub fn staple_fuse(masks: &[Vec<bool>], tol: f64, max_iter: usize) -> Result<StapleResult> {
    if masks.len() < 2 {
        return Err(LeError::InvalidArgument("staple_fuse needs at least two masks".into()));
    }
    let len = masks[0].len();
    if masks.iter().any(|m| m.len() != len) {
        return Err(LeError::ShapeMismatch {
            context: "staple_fuse masks".into(),
            expected: vec![len],
            got: vec![masks.iter().map(|m| m.len()).find(|&l| l != len).unwrap()],
        });
    }
    let j_n = masks.len();
    let total_fg: usize = masks.iter().map(|m| m.iter().filter(|&&d| d).count()).sum();
    if total_fg == 0 || total_fg == j_n * len {
        let unanimous = masks[0][0];
        return Ok(StapleResult {
            p: vec![1.0; j_n],
            q: vec![1.0; j_n],
            posterior: vec![if unanimous { 1.0 } else { 0.0 }; len],
            iterations_run: 0,
            converged: true,
        });
    }
    let prior = total_fg as f64 / (j_n * len) as f64;

    let mut p = vec![STAPLE_INIT_PQ; j_n];
    let mut q = vec![STAPLE_INIT_PQ; j_n];
    let mut posterior = vec![0.0f64; len];
    let mut iterations_run = 0;
    let mut converged = false;

    while iterations_run < max_iter {
        iterations_run += 1;
        // E-step
        for i in 0..len {
            let mut a = prior;
            let mut b = 1.0 - prior;
            for j in 0..j_n {
                if masks[j][i] {
                    a *= p[j];
                    b *= 1.0 - q[j];
                } else {
                    a *= 1.0 - p[j];
                    b *= q[j];
                }
            }
            posterior[i] = if a + b > 0.0 { a / (a + b) } else { prior };
        }
        // M-step
        let w_sum: f64 = posterior.iter().sum();
        let w_comp = len as f64 - w_sum;
        let mut delta: f64 = 0.0;
        for j in 0..j_n {
            let mut p_num = 0.0;
            let mut q_num = 0.0;
            for i in 0..len {
                if masks[j][i] {
                    p_num += posterior[i];
                } else {
                    q_num += 1.0 - posterior[i];
                }
            }
            let new_p = if w_sum > 0.0 { p_num / w_sum } else { p[j] };
            let new_q = if w_comp > 0.0 { q_num / w_comp } else { q[j] };
            delta = delta.max((new_p - p[j]).abs() + (new_q - q[j]).abs());
            p[j] = new_p;
            q[j] = new_q;
        }
        if delta < tol {
            converged = true;
            break;
        }
    }
    Ok(StapleResult {
        p,
        q,
        posterior,
        iterations_run,
        converged,
    })
}

/// STAPLE fusion of head outputs. Heads are binarized first; multi-class
/// runs one-vs-rest per foreground class, then per-pixel argmax with the
/// background posterior defined as 1 - max over classes.
pub fn staple_fuse_heads(outputs: &HeadOutputs, skip: usize) -> Result<FusedPrediction> {
    let n = outputs.num_heads();
    check_skip(n, skip)?;
    let (h, w) = outputs.spatial();
    let k = outputs.channels();
    let plane = h * w;
    let label_maps: Vec<LabelMask> = outputs.probs[skip..].iter().map(binarize_head).collect();

    if k == 1 {
        let masks: Vec<Vec<bool>> = label_maps
            .iter()
            .map(|m| m.labels().iter().map(|&l| l == 1).collect())
            .collect();
        let res = staple_fuse(&masks, STAPLE_TOL, STAPLE_MAX_ITER)?;
        let prob = Tensor::new(vec![1, h, w], res.posterior.clone())?;
        let labels: Vec<u32> = res.posterior.iter().map(|&v| (v >= 0.5) as u32).collect();
        Ok(FusedPrediction {
            prob,
            label: LabelMask::new(labels, h, w, 2)?,
            skip,
        })
    } else {
        // one-vs-rest per foreground class
        let mut class_post = vec![vec![0.0f64; plane]; k];
        for c in 1..k {
            let masks: Vec<Vec<bool>> = label_maps
                .iter()
                .map(|m| m.labels().iter().map(|&l| l as usize == c).collect())
                .collect();
            let res = staple_fuse(&masks, STAPLE_TOL, STAPLE_MAX_ITER)?;
            class_post[c] = res.posterior;
        }
        let mut prob = Tensor::zeros(&[k, h, w]);
        let mut labels = vec![0u32; plane];
        for i in 0..plane {
            let mut best_c = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (c, post) in class_post.iter().enumerate().skip(1) {
                if post[i] > best_v {
                    best_v = post[i];
                    best_c = c;
                }
            }
            let bg = 1.0 - best_v;
            class_post[0][i] = bg;
            if best_v >= bg {
                labels[i] = best_c as u32;
            }
            for c in 0..k {
                prob.data_mut()[c * plane + i] = class_post[c][i];
            }
        }
        Ok(FusedPrediction {
            prob,
            label: LabelMask::new(labels, h, w, k)?,
            skip,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head_outputs(maps: Vec<Tensor>) -> HeadOutputs {
        HeadOutputs { probs: maps }
    }

    fn binary_map(vals: &[f64], h: usize, w: usize) -> Tensor {
        Tensor::new(vec![1, h, w], vals.to_vec()).unwrap()
    }

    #[test]
    fn average_identical_heads_is_identity() {
        let m = binary_map(&[0.1, 0.8, 0.4, 0.9], 2, 2);
        let out = head_outputs(vec![m.clone(), m.clone(), m.clone()]);
        let fused = average_fuse(&out, 0).unwrap();
        for (a, b) in fused.prob.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn average_tie_rule_is_foreground() {
        let a = binary_map(&[0.2], 1, 1);
        let b = binary_map(&[0.8], 1, 1);
        let fused = average_fuse(&head_outputs(vec![a, b]), 0).unwrap();
        assert!((fused.prob.data()[0] - 0.5).abs() < 1e-12);
        assert_eq!(fused.label.labels(), &[1]);
    }

    #[test]
    fn average_respects_skip() {
        // heads 0-2 adversarial noise, heads 3-4 agree
        let noise = binary_map(&[1.0, 0.0, 1.0, 0.0], 2, 2);
        let signal = binary_map(&[0.0, 0.9, 0.9, 0.0], 2, 2);
        let out = head_outputs(vec![noise.clone(), noise.clone(), noise, signal.clone(), signal.clone()]);
        let fused = average_fuse(&out, 3).unwrap();
        for (a, b) in fused.prob.data().iter().zip(signal.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn skip_too_large_is_rejected() {
        let m = binary_map(&[0.5], 1, 1);
        let out = head_outputs(vec![m.clone(), m]);
        assert!(average_fuse(&out, 1).is_err());
    }

    #[test]
    fn staple_unanimous_nontrivial_mask_is_fixed_point() {
        let mask: Vec<bool> = vec![false, true, true, false, false, true, false, false];
        let res = staple_fuse(&[mask.clone(), mask.clone(), mask.clone()], STAPLE_TOL, STAPLE_MAX_ITER).unwrap();
        assert!(res.converged);
        for (post, &d) in res.posterior.iter().zip(&mask) {
            assert!((post - d as usize as f64).abs() < STAPLE_TOL);
        }
        for j in 0..3 {
            assert!(res.p[j] > 1.0 - 1e-3);
            assert!(res.q[j] > 1.0 - 1e-3);
        }
    }

    #[test]
    fn staple_duplicated_rater_returns_that_mask() {
        let mask: Vec<bool> = vec![true, false, true, true, false, false];
        let res = staple_fuse(&[mask.clone(), mask.clone()], STAPLE_TOL, STAPLE_MAX_ITER).unwrap();
        let fused: Vec<bool> = res.posterior.iter().map(|&v| v >= 0.5).collect();
        assert_eq!(fused, mask);
    }

    #[test]
    fn staple_degenerate_unanimous_inputs() {
        let empty = vec![false; 9];
        let res = staple_fuse(&[empty.clone(), empty.clone()], STAPLE_TOL, STAPLE_MAX_ITER).unwrap();
        assert!(res.converged);
        assert!(res.posterior.iter().all(|&v| v == 0.0));
        assert_eq!(res.p, vec![1.0, 1.0]);

        let full = vec![true; 9];
        let res = staple_fuse(&[full.clone(), full.clone()], STAPLE_TOL, STAPLE_MAX_ITER).unwrap();
        assert!(res.posterior.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn staple_rater_permutation_invariance() {
        let a: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
        let b: Vec<bool> = (0..64).map(|i| i % 3 != 2).collect();
        let c: Vec<bool> = (0..64).map(|i| i % 5 < 2).collect();
        let r1 = staple_fuse(&[a.clone(), b.clone(), c.clone()], STAPLE_TOL, STAPLE_MAX_ITER).unwrap();
        let r2 = staple_fuse(&[c, a, b], STAPLE_TOL, STAPLE_MAX_ITER).unwrap();
        for (x, y) in r1.posterior.iter().zip(&r2.posterior) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn multiclass_staple_fuses_argmax_labels() {
        // three heads agreeing on a 2-class layout
        let plane = 4;
        let mut m = Tensor::zeros(&[3, 2, 2]);
        // pixel 0,1 -> class 1; pixel 2 -> class 2; pixel 3 -> background
        let assignment = [1usize, 1, 2, 0];
        for (i, &c) in assignment.iter().enumerate() {
            for k in 0..3 {
                m.data_mut()[k * plane + i] = if k == c { 0.8 } else { 0.1 };
            }
        }
        let out = head_outputs(vec![m.clone(), m.clone(), m]);
        let fused = staple_fuse_heads(&out, 0).unwrap();
        let expect: Vec<u32> = assignment.iter().map(|&c| c as u32).collect();
        assert_eq!(fused.label.labels(), &expect[..]);
    }
}
