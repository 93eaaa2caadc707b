//! Segmentation and calibration metrics: Dice, modified Hausdorff distance,
//! negative log-likelihood, and Spearman rank correlation.

use crate::error::{LeError, Result};
use crate::losses::PROB_CLAMP;
use crate::mask::LabelMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MetricRecord {
    pub dsc: f64,
    pub mhd: Option<f64>,
    pub nll: f64,
    /// Per-foreground-class values when there is more than one class.
    pub per_class_dsc: Vec<f64>,
    pub per_class_mhd: Vec<Option<f64>>,
}

/// Dice overlap for one class: empty/empty -> 1, empty/nonempty -> 0.
pub fn dice(a: &LabelMask, b: &LabelMask, class: u32) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(LeError::ShapeMismatch {
            context: "dice".into(),
            expected: vec![a.height(), a.width()],
            got: vec![b.height(), b.width()],
        });
    }
    let mut inter = 0usize;
    let mut size_a = 0usize;
    let mut size_b = 0usize;
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let ia = x == class;
        let ib = y == class;
        size_a += ia as usize;
        size_b += ib as usize;
        inter += (ia && ib) as usize;
    }
    if size_a + size_b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (size_a + size_b) as f64)
}

/// Boundary pixels of a class region: foreground pixels 4-adjacent to
/// non-foreground (image border counts as non-foreground).
fn boundary_pixels(mask: &LabelMask, class: u32) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask.at(r, c) != class {
                continue;
            }
            let on_border = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            let exposed = on_border
                || mask.at(r - 1, c) != class
                || mask.at(r + 1, c) != class
                || mask.at(r, c - 1) != class
                || mask.at(r, c + 1) != class;
            if exposed {
                out.push((r, c));
            }
        }
    }
    out
}

fn mean_min_distance(from: &[(usize, usize)], to: &[(usize, usize)], spacing: (f64, f64)) -> f64 {
    let mut total = 0.0;
    for &(r1, c1) in from {
        let mut best = f64::INFINITY;
        for &(r2, c2) in to {
            let dr = (r1 as f64 - r2 as f64) * spacing.0;
            let dc = (c1 as f64 - c2 as f64) * spacing.1;
            let d2 = dr * dr + dc * dc;
            if d2 < best {
                best = d2;
            }
        }
        total += best.sqrt();
    }
    total / from.len() as f64
}

/// Dubuisson-Jain modified Hausdorff distance over class boundaries.
/// Returns None when either side has no pixels of the class (undefined).
pub fn mhd(a: &LabelMask, b: &LabelMask, class: u32, spacing: (f64, f64)) -> Result<Option<f64>> {
    if !a.same_shape(b) {
        return Err(LeError::ShapeMismatch {
            context: "mhd".into(),
            expected: vec![a.height(), a.width()],
            got: vec![b.height(), b.width()],
        });
    }
    let ba = boundary_pixels(a, class);
    let bb = boundary_pixels(b, class);
    if ba.is_empty() || bb.is_empty() {
        return Ok(None);
    }
    let fwd = mean_min_distance(&ba, &bb, spacing);
    let bwd = mean_min_distance(&bb, &ba, spacing);
    Ok(Some(fwd.max(bwd)))
}

/// Mean per-pixel negative log-likelihood of the target class under a fused
/// probability map [K',H,W].
pub fn nll(prob: &Tensor, target: &LabelMask) -> Result<f64> {
    let sh = prob.shape();
    if sh.len() != 3 || sh[1] != target.height() || sh[2] != target.width() {
        return Err(LeError::ShapeMismatch {
            context: "nll".into(),
            expected: vec![target.height(), target.width()],
            got: sh.to_vec(),
        });
    }
    let k = sh[0];
    let plane = sh[1] * sh[2];
    let mut total = 0.0;
    for (i, &t) in target.labels().iter().enumerate() {
        let p = if k == 1 {
            let fg = prob.data()[i];
            if t == 1 {
                fg
            } else {
                1.0 - fg
            }
        } else {
            prob.data()[t as usize * plane + i]
        };
        total -= p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln();
    }
    Ok(total / plane as f64)
}

/// Average ranks with ties sharing the mean of their rank range.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of the rank vectors.
/// Returns None when either rank vector has zero variance.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(LeError::InvalidArgument(
            "spearman needs two equal-length sequences of length >= 3".into(),
        ));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok(None);
    }
    Ok(Some(cov / (vx * vy).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(vals: &[u32], h: usize, w: usize) -> LabelMask {
        LabelMask::new(vals.to_vec(), h, w, (*vals.iter().max().unwrap() + 1) as usize).unwrap_or_else(|_| {
            LabelMask::new(vals.to_vec(), h, w, 2).unwrap()
        })
    }

    #[test]
    fn dice_basics() {
        let a = mask(&[0, 1, 1, 0], 2, 2);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let b = mask(&[1, 0, 0, 1], 2, 2);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
        // |A|=2, |B|=2, overlap 1 -> 0.5
        let c = mask(&[0, 1, 0, 1], 2, 2);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.5);
        // empty/empty -> 1, empty/nonempty -> 0
        let e = mask(&[0, 0, 0, 0], 2, 2);
        assert_eq!(dice(&e, &e, 1).unwrap(), 1.0);
        assert_eq!(dice(&e, &a, 1).unwrap(), 0.0);
        // symmetry
        assert_eq!(dice(&a, &c, 1).unwrap(), dice(&c, &a, 1).unwrap());
    }

    #[test]
    fn dice_rejects_shape_mismatch() {
        let a = mask(&[0, 1, 1, 0], 2, 2);
        let b = mask(&[0, 1], 1, 2);
        assert!(dice(&a, &b, 1).is_err());
    }

    #[test]
    fn mhd_basics() {
        let a = mask(&[0, 1, 1, 0], 2, 2);
        assert_eq!(mhd(&a, &a, 1, (1.0, 1.0)).unwrap(), Some(0.0));
        // two single-pixel masks 3 pixels apart
        let mut v1 = vec![0u32; 25];
        let mut v2 = vec![0u32; 25];
        v1[2 * 5 + 1] = 1;
        v2[2 * 5 + 4] = 1;
        let m1 = mask(&v1, 5, 5);
        let m2 = mask(&v2, 5, 5);
        assert_eq!(mhd(&m1, &m2, 1, (1.0, 1.0)).unwrap(), Some(3.0));
        // undefined when one side is empty
        let e = mask(&vec![0u32; 25], 5, 5);
        assert_eq!(mhd(&m1, &e, 1, (1.0, 1.0)).unwrap(), None);
        // spacing scales distances
        assert_eq!(mhd(&m1, &m2, 1, (1.0, 2.0)).unwrap(), Some(6.0));
    }

    /// O(|X||Y|) brute force over full masks with explicit boundary sets.
    fn mhd_brute(a: &LabelMask, b: &LabelMask, class: u32) -> Option<f64> {
        let pts = |m: &LabelMask| -> Vec<(f64, f64)> {
            let mut v = vec![];
            for r in 0..m.height() {
                for c in 0..m.width() {
                    if m.at(r, c) == class {
                        let mut edge = r == 0 || c == 0 || r == m.height() - 1 || c == m.width() - 1;
                        if !edge {
                            for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                                if m.at((r as i64 + dr) as usize, (c as i64 + dc) as usize) != class {
                                    edge = true;
                                }
                            }
                        }
                        if edge {
                            v.push((r as f64, c as f64));
                        }
                    }
                }
            }
            v
        };
        let (xa, xb) = (pts(a), pts(b));
        if xa.is_empty() || xb.is_empty() {
            return None;
        }
        let dir = |from: &[(f64, f64)], to: &[(f64, f64)]| {
            from.iter()
                .map(|&(r1, c1)| {
                    to.iter()
                        .map(|&(r2, c2)| ((r1 - r2).powi(2) + (c1 - c2).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / from.len() as f64
        };
        Some(dir(&xa, &xb).max(dir(&xb, &xa)))
    }

    #[test]
    fn mhd_matches_brute_force_on_random_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let vals_a: Vec<u32> = (0..64).map(|_| rng.gen_bool(0.4) as u32).collect();
            let vals_b: Vec<u32> = (0..64).map(|_| rng.gen_bool(0.4) as u32).collect();
            let a = mask(&vals_a, 8, 8);
            let b = mask(&vals_b, 8, 8);
            let fast = mhd(&a, &b, 1, (1.0, 1.0)).unwrap();
            let slow = mhd_brute(&a, &b, 1);
            match (fast, slow) {
                (Some(f), Some(s)) => assert!((f - s).abs() < 1e-9),
                (None, None) => {}
                _ => panic!("defined-ness disagrees"),
            }
        }
    }

    #[test]
    fn nll_closed_forms() {
        let t = mask(&[0, 1, 1, 0], 2, 2);
        let perfect = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(nll(&perfect, &t).unwrap() <= 1e-6);
        let half = Tensor::new(vec![1, 2, 2], vec![0.5; 4]).unwrap();
        assert!((nll(&half, &t).unwrap() - 2.0f64.ln()).abs() < 1e-12);
        // confidently wrong pixel contributes -ln(1e-7)
        let wrong = Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap();
        let t1 = LabelMask::new(vec![1], 1, 1, 2).unwrap();
        assert!((nll(&wrong, &t1).unwrap() + PROB_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn nll_is_monotone_in_target_mass() {
        let t = mask(&[1, 0, 0, 0], 2, 2);
        let lo = Tensor::new(vec![1, 2, 2], vec![0.6, 0.2, 0.2, 0.2]).unwrap();
        let hi = Tensor::new(vec![1, 2, 2], vec![0.7, 0.2, 0.2, 0.2]).unwrap();
        assert!(nll(&hi, &t).unwrap() < nll(&lo, &t).unwrap());
    }

    #[test]
    fn spearman_worked_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &x).unwrap(), Some(1.0));
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(spearman(&x, &neg).unwrap(), Some(-1.0));
        let y = [2.0, 1.0, 4.0, 3.0];
        let rho = spearman(&x, &y).unwrap().unwrap();
        assert!((rho - 0.6).abs() < 1e-12);
        // zero rank variance -> undefined
        let c = [5.0, 5.0, 5.0, 5.0];
        assert_eq!(spearman(&x, &c).unwrap(), None);
    }

    #[test]
    fn spearman_handles_ties_with_average_ranks() {
        let r = average_ranks(&[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(r, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn spearman_monotone_transform_invariance() {
        let x = [0.3, 1.1, 0.7, 2.0, 1.5, 0.1];
        let y = [4.0, 2.0, 9.0, 1.0, 5.0, 7.0];
        let base = spearman(&x, &y).unwrap().unwrap();
        let xt: Vec<f64> = x.iter().map(|v| (3.0 * v).exp()).collect();
        let yt: Vec<f64> = y.iter().map(|v| v.powi(3)).collect();
        let transformed = spearman(&xt, &yt).unwrap().unwrap();
        assert!((base - transformed).abs() < 1e-12);
    }
}
