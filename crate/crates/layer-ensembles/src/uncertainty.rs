//! Uncertainty from a single forward pass: pixel-wise variance, entropy and
//! mutual information over the head ensemble, plus the image-level layer
//! agreement curve, its area (AULA) and prediction depth.

use crate::error::{LeError, Result};
use crate::fusion::binarize_head;
use crate::losses::PROB_CLAMP;
use crate::mask::LabelMask;
use crate::metrics::dice;
use crate::model::HeadOutputs;
use crate::tensor::Tensor;

pub const DEFAULT_PD_THRESHOLD: f64 = 0.90;

#[derive(Debug, Clone)]
pub struct LayerAgreementCurve {
    /// Dice agreement between adjacent head labels, indices skip..N-2.
    pub agreements: Vec<f64>,
    pub skip: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct UncertaintyReport {
    pub variance_map: Tensor,
    pub entropy_map: Tensor,
    pub mi_map: Tensor,
    pub variance_sum: f64,
    pub entropy_sum: f64,
    pub mi_sum: f64,
    pub aula: f64,
    pub prediction_depth: usize,
}

fn check_skip(outputs: &HeadOutputs, skip: usize) -> Result<()> {
    let n = outputs.num_heads();
    if n < 2 || skip > n - 2 {
        return Err(LeError::InvalidArgument(format!(
            "skip {skip} leaves fewer than two of {n} heads"
        )));
    }
    Ok(())
}

/// Per-pixel population variance of head probabilities. For multi-class
/// maps this is the mean over classes of the per-class variance.
pub fn pixel_variance(outputs: &HeadOutputs, skip: usize) -> Result<Tensor> {
    check_skip(outputs, skip)?;
    let (h, w) = outputs.spatial();
    let k = outputs.channels();
    let plane = h * w;
    let heads = &outputs.probs[skip..];
    let m = heads.len() as f64;
    let mut out = Tensor::zeros(&[h, w]);
    for c in 0..k {
        for i in 0..plane {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for head in heads {
                let v = head.data()[c * plane + i];
                s += v;
                s2 += v * v;
            }
            let mean = s / m;
            out.data_mut()[i] += (s2 / m - mean * mean).max(0.0);
        }
    }
    if k > 1 {
        for v in out.data_mut() {
            *v /= k as f64;
        }
    }
    Ok(out)
}

fn entropy_of(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        let c = v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        h -= c * c.ln();
    }
    h
}

fn pixel_class_probs(map: &Tensor, i: usize, k: usize, plane: usize, buf: &mut Vec<f64>) {
    buf.clear();
    if k == 1 {
        let p = map.data()[i];
        buf.push(p);
        buf.push(1.0 - p);
    } else {
        for c in 0..k {
            buf.push(map.data()[c * plane + i]);
        }
    }
}

/// Entropy of the mean head probability, in nats.
pub fn pixel_entropy(outputs: &HeadOutputs, skip: usize) -> Result<Tensor> {
    check_skip(outputs, skip)?;
    let (h, w) = outputs.spatial();
    let k = outputs.channels();
    let plane = h * w;
    let heads = &outputs.probs[skip..];
    let m = heads.len() as f64;
    let mut out = Tensor::zeros(&[h, w]);
    let classes = if k == 1 { 2 } else { k };
    let mut mean = vec![0.0f64; classes];
    let mut buf = Vec::with_capacity(classes);
    for i in 0..plane {
        mean.iter_mut().for_each(|v| *v = 0.0);
        for head in heads {
            pixel_class_probs(head, i, k, plane, &mut buf);
            for (mv, &p) in mean.iter_mut().zip(&buf) {
                *mv += p / m;
            }
        }
        out.data_mut()[i] = entropy_of(&mean);
    }
    Ok(out)
}

/// BALD-style mutual information: H(mean over heads) minus the mean over
/// heads of H(head). Rounding-induced negatives are clipped to zero.
pub fn pixel_mutual_information(outputs: &HeadOutputs, skip: usize) -> Result<Tensor> {
    check_skip(outputs, skip)?;
    let (h, w) = outputs.spatial();
    let k = outputs.channels();
    let plane = h * w;
    let heads = &outputs.probs[skip..];
    let m = heads.len() as f64;
    let classes = if k == 1 { 2 } else { k };
    let mut out = Tensor::zeros(&[h, w]);
    let mut mean = vec![0.0f64; classes];
    let mut buf = Vec::with_capacity(classes);
    for i in 0..plane {
        mean.iter_mut().for_each(|v| *v = 0.0);
        let mut mean_entropy = 0.0;
        for head in heads {
            pixel_class_probs(head, i, k, plane, &mut buf);
            for (mv, &p) in mean.iter_mut().zip(&buf) {
                *mv += p / m;
            }
            mean_entropy += entropy_of(&buf) / m;
        }
        out.data_mut()[i] = (entropy_of(&mean) - mean_entropy).max(0.0);
    }
    Ok(out)
}

/// Dice agreement between two label masks for curve purposes:
/// empty/empty counts as perfect agreement. Multi-class agreement is the
/// mean Dice over foreground classes.
pub fn label_agreement(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    let classes = a.num_classes().max(b.num_classes());
    if classes == 2 {
        dice(a, b, 1)
    } else {
        let mut total = 0.0;
        for c in 1..classes {
            total += dice(a, b, c as u32)?;
        }
        Ok(total / (classes - 1) as f64)
    }
}

pub fn layer_agreement_curve(outputs: &HeadOutputs, skip: usize, threshold: f64) -> Result<LayerAgreementCurve> {
    check_skip(outputs, skip)?;
    let labels: Vec<LabelMask> = outputs.probs[skip..].iter().map(binarize_head).collect();
    let agreements = labels
        .windows(2)
        .map(|w| label_agreement(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerAgreementCurve {
        agreements,
        skip,
        threshold,
    })
}

/// Normalized trapezoidal area under the agreement curve; 1 means perfect
/// adjacent agreement everywhere (low uncertainty).
pub fn aula(curve: &LayerAgreementCurve) -> Result<f64> {
    let a = &curve.agreements;
    if a.len() < 2 {
        return Err(LeError::InvalidArgument(
            "aula needs an agreement curve of length >= 2".into(),
        ));
    }
    let area: f64 = a.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum();
    Ok(area / (a.len() - 1) as f64)
}

/// Prediction depth: 1 + the largest curve index with agreement below the
/// threshold, offset by skip into absolute head positions. Immediate
/// consensus (no sub-threshold agreement) gives PD = skip.
pub fn prediction_depth(curve: &LayerAgreementCurve) -> usize {
    match curve
        .agreements
        .iter()
        .rposition(|&a| a < curve.threshold)
    {
        Some(i) => curve.skip + i + 1,
        None => curve.skip,
    }
}

pub fn build_report(outputs: &HeadOutputs, skip: usize, threshold: f64) -> Result<UncertaintyReport> {
    let variance_map = pixel_variance(outputs, skip)?;
    let entropy_map = pixel_entropy(outputs, skip)?;
    let mi_map = pixel_mutual_information(outputs, skip)?;
    let curve = layer_agreement_curve(outputs, skip, threshold)?;
    let aula_v = aula(&curve)?;
    let pd = prediction_depth(&curve);
    Ok(UncertaintyReport {
        variance_sum: variance_map.sum(),
        entropy_sum: entropy_map.sum(),
        mi_sum: mi_map.sum(),
        variance_map,
        entropy_map,
        mi_map,
        aula: aula_v,
        prediction_depth: pd,
    })
}
