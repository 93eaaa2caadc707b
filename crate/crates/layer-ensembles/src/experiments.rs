//! Desk-scale analyses: per-image evaluation, quality-control curves,
//! uncertainty/metric correlation tables, the calibration-vs-skip sweep, and
//! prediction-depth histograms under corruption.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Sample};
use crate::error::{LeError, Result};
use crate::fusion::{self, FusedPrediction};
use crate::mask::LabelMask;
use crate::metrics::{self, MetricRecord};
use crate::model::{derive_seed, HeadOutputs, Network};
use crate::uncertainty::{self, UncertaintyReport};

pub const QC_GRID_POINTS: usize = 101;
pub const DEFAULT_POOR_THRESHOLD: f64 = 0.90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    Average,
    Staple,
}

/// Everything the analyses need about one evaluated image.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub id: String,
    pub metrics: MetricRecord,
    pub report: UncertaintyReport,
}

/// Forward pass for a single [1,H,W] image: batches it, runs all heads, and
/// unpacks the per-head [K',H,W] maps.
pub fn single_image_outputs(net: &Network, image: &crate::tensor::Tensor) -> Result<HeadOutputs> {
    let sh = image.shape().to_vec();
    if sh.len() != 3 {
        return Err(LeError::ShapeMismatch {
            context: "single_image_outputs".into(),
            expected: vec![1, 0, 0],
            got: sh,
        });
    }
    let batch = crate::tensor::Tensor::new(vec![1, sh[0], sh[1], sh[2]], image.data().to_vec())?;
    let maps = net.forward_all_heads(&batch)?;
    Ok(Network::split_outputs(&maps).remove(0))
}

/// Runs one normalized image through the network and scores the fused
/// prediction against the ground truth.
pub fn evaluate_image(
    net: &Network,
    image: &crate::tensor::Tensor,
    truth: &LabelMask,
    id: &str,
    skip: usize,
    pd_threshold: f64,
    fusion_kind: FusionKind,
) -> Result<ImageEval> {
    let outputs = single_image_outputs(net, image)?;
    let fused = match fusion_kind {
        FusionKind::Average => fusion::average_fuse(&outputs, skip)?,
        FusionKind::Staple => fusion::staple_fuse_heads(&outputs, skip)?,
    };
    let report = uncertainty::build_report(&outputs, skip, pd_threshold)?;
    let metrics = score_prediction(&fused, truth)?;
    Ok(ImageEval {
        id: id.to_string(),
        metrics,
        report,
    })
}

pub fn evaluate_sample(
    net: &Network,
    sample: &Sample,
    skip: usize,
    pd_threshold: f64,
    fusion_kind: FusionKind,
) -> Result<ImageEval> {
    let image = data::normalize(&sample.image)?;
    evaluate_image(net, &image, &sample.mask, &sample.id, skip, pd_threshold, fusion_kind)
}

/// Evaluates a whole split. Images are independent, so `threads > 1` fans
/// them out over scoped threads; results keep dataset order either way.
pub fn evaluate_split(
    net: &Network,
    samples: &[Sample],
    skip: usize,
    pd_threshold: f64,
    fusion_kind: FusionKind,
    threads: usize,
) -> Result<Vec<ImageEval>> {
    if threads <= 1 || samples.len() < 2 {
        return samples
            .iter()
            .map(|s| evaluate_sample(net, s, skip, pd_threshold, fusion_kind))
            .collect();
    }
    let chunk = samples.len().div_ceil(threads);
    let results: Vec<Result<Vec<ImageEval>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| evaluate_sample(net, s, skip, pd_threshold, fusion_kind))
                        .collect::<Result<Vec<ImageEval>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker")).collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// DSC/MHD/NLL of a fused prediction. The headline DSC and MHD average the
/// per-foreground-class values; MHD classes undefined on either side are
/// dropped from the average (and the headline is None if all are).
pub fn score_prediction(pred: &FusedPrediction, truth: &LabelMask) -> Result<MetricRecord> {
    let classes = truth.num_classes() as u32;
    let mut per_class_dsc = Vec::new();
    let mut per_class_mhd = Vec::new();
    for class in 1..classes {
        per_class_dsc.push(metrics::dice(&pred.label, truth, class)?);
        per_class_mhd.push(metrics::mhd(&pred.label, truth, class, (1.0, 1.0))?);
    }
    let dsc = per_class_dsc.iter().sum::<f64>() / per_class_dsc.len() as f64;
    let defined: Vec<f64> = per_class_mhd.iter().flatten().copied().collect();
    let mhd = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    let nll = metrics::nll(&pred.prob, truth)?;
    Ok(MetricRecord {
        dsc,
        mhd,
        nll,
        per_class_dsc,
        per_class_mhd,
    })
}

// ---------------------------------------------------------------------------
// Quality-control curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct QcCurve {
    pub flag_fractions: Vec<f64>,
    pub remaining_poor: Vec<f64>,
    pub auc: f64,
    pub random_baseline: Vec<f64>,
    pub ideal: Vec<f64>,
    pub ideal_auc: f64,
    pub poor_threshold: f64,
    /// Set when there are no poor cases; the curve is then all zeros.
    pub no_poor_cases: bool,
}

/// Flags the most-uncertain images first and tracks the fraction of poor
/// segmentations (DSC below the threshold) that remain unflagged. Ties in
/// uncertainty are broken by image id for reproducibility.
pub fn qc_curve(
    ids: &[String],
    uncertainties: &[f64],
    dscs: &[f64],
    poor_threshold: f64,
    grid_points: usize,
) -> Result<QcCurve> {
    let n = ids.len();
    if n == 0 || uncertainties.len() != n || dscs.len() != n {
        return Err(LeError::InvalidArgument(
            "qc_curve needs equal-length, non-empty id/uncertainty/DSC slices".into(),
        ));
    }
    if grid_points < 2 {
        return Err(LeError::InvalidArgument(
            "qc_curve grid needs at least 2 points".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        uncertainties[b]
            .partial_cmp(&uncertainties[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    let poor: Vec<bool> = dscs.iter().map(|&d| d < poor_threshold).collect();
    let poor_total = poor.iter().filter(|&&p| p).count();

    // poor_after_flagging[k] = poor cases left after flagging the k most
    // uncertain images.
    let mut poor_after = vec![0usize; n + 1];
    poor_after[0] = poor_total;
    for (k, &idx) in order.iter().enumerate() {
        poor_after[k + 1] = poor_after[k] - usize::from(poor[idx]);
    }

    let flag_fractions: Vec<f64> = (0..grid_points)
        .map(|i| i as f64 / (grid_points - 1) as f64)
        .collect();
    let no_poor_cases = poor_total == 0;
    let curve_at = |flagged: usize| -> f64 {
        if no_poor_cases {
            0.0
        } else {
            poor_after[flagged] as f64 / poor_total as f64
        }
    };
    let mut remaining_poor = Vec::with_capacity(grid_points);
    let mut ideal = Vec::with_capacity(grid_points);
    let mut random_baseline = Vec::with_capacity(grid_points);
    for &f in &flag_fractions {
        let flagged = ((f * n as f64).ceil() as usize).min(n);
        remaining_poor.push(curve_at(flagged));
        ideal.push(if no_poor_cases {
            0.0
        } else {
            (poor_total.saturating_sub(flagged)) as f64 / poor_total as f64
        });
        random_baseline.push(1.0 - f);
    }
    let auc = trapezoid(&flag_fractions, &remaining_poor);
    let ideal_auc = trapezoid(&flag_fractions, &ideal);
    Ok(QcCurve {
        flag_fractions,
        remaining_poor,
        auc,
        random_baseline,
        ideal,
        ideal_auc,
        poor_threshold,
        no_poor_cases,
    })
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (ys[0] + ys[1]) * (xs[1] - xs[0]))
        .sum()
}

// ---------------------------------------------------------------------------
// Correlation table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CorrelationRow {
    pub uncertainty_metric: String,
    pub segmentation_metric: String,
    /// None marks an undefined correlation (constant column or too few pairs).
    pub rho: Option<f64>,
    pub pairs: usize,
}

/// Spearman correlations for {entropy-sum, MI-sum, variance-sum, AULA} x
/// {DSC, MHD}. Images with undefined MHD are dropped from MHD pairs.
pub fn correlation_table(evals: &[ImageEval]) -> Result<Vec<CorrelationRow>> {
    if evals.len() < 3 {
        return Err(LeError::InvalidArgument(
            "correlation_table needs at least 3 images".into(),
        ));
    }
    let columns: [(&str, fn(&ImageEval) -> f64); 4] = [
        ("entropy-sum", |e| e.report.entropy_sum),
        ("mi-sum", |e| e.report.mi_sum),
        ("variance-sum", |e| e.report.variance_sum),
        ("aula", |e| e.report.aula),
    ];
    let mut rows = Vec::new();
    for (name, getter) in columns {
        let u: Vec<f64> = evals.iter().map(getter).collect();
        let d: Vec<f64> = evals.iter().map(|e| e.metrics.dsc).collect();
        let rho = spearman_or_none(&u, &d);
        rows.push(CorrelationRow {
            uncertainty_metric: name.to_string(),
            segmentation_metric: "dsc".to_string(),
            rho,
            pairs: evals.len(),
        });

        let pairs: Vec<(f64, f64)> = evals
            .iter()
            .filter_map(|e| e.metrics.mhd.map(|m| (getter(e), m)))
            .collect();
        let (mu, mm): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let rho = spearman_or_none(&mu, &mm);
        rows.push(CorrelationRow {
            uncertainty_metric: name.to_string(),
            segmentation_metric: "mhd".to_string(),
            rho,
            pairs: mu.len(),
        });
    }
    Ok(rows)
}

fn spearman_or_none(x: &[f64], y: &[f64]) -> Option<f64> {
    metrics::spearman(x, y).ok().flatten()
}

// ---------------------------------------------------------------------------
// Calibration sweep over skip values
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub skip: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub nll_mean: f64,
    pub nll_std: f64,
    /// True for skip = N-1: only the final head, i.e. the plain baseline.
    pub is_plain: bool,
}

/// Evaluates averaging-fused predictions at each skip value.
pub fn calibration_sweep(net: &Network, samples: &[Sample], skips: &[usize]) -> Result<Vec<SweepRow>> {
    let n_heads = net.num_heads();
    let mut rows = Vec::with_capacity(skips.len());

    // One forward pass per image, shared across skip values.
    let mut per_image_outputs = Vec::with_capacity(samples.len());
    for sample in samples {
        let image = data::normalize(&sample.image)?;
        per_image_outputs.push(single_image_outputs(net, &image)?);
    }

    for &skip in skips {
        if skip >= n_heads {
            return Err(LeError::InvalidArgument(format!(
                "sweep skip {skip} exceeds the last head index {}",
                n_heads - 1
            )));
        }
        let mut dscs = Vec::with_capacity(samples.len());
        let mut nlls = Vec::with_capacity(samples.len());
        for (sample, outputs) in samples.iter().zip(&per_image_outputs) {
            // skip = N-1 keeps only the final head: the plain baseline,
            // which needs no averaging.
            let fused = if skip == n_heads - 1 {
                let prob = outputs.probs[skip].clone();
                FusedPrediction {
                    label: fusion::binarize_head(&prob),
                    prob,
                    skip,
                }
            } else {
                fusion::average_fuse(outputs, skip)?
            };
            let rec = score_prediction(&fused, &sample.mask)?;
            dscs.push(rec.dsc);
            nlls.push(rec.nll);
        }
        let (dsc_mean, dsc_std) = mean_std(&dscs);
        let (nll_mean, nll_std) = mean_std(&nlls);
        rows.push(SweepRow {
            skip,
            dsc_mean,
            dsc_std,
            nll_mean,
            nll_std,
            is_plain: skip == n_heads - 1,
        });
    }
    Ok(rows)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Prediction-depth shift under corruption
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PdHistogram {
    pub corruption_fraction: f64,
    /// counts[pd] over pd = 0..num_heads-1; sums to the test-set size.
    pub counts: Vec<usize>,
    pub mean_pd: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GaussianCorruption {
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
}

/// PD histograms with the first ceil(f*n) test images corrupted by Gaussian
/// noise. Per-image noise streams depend only on (seed, image index), so the
/// images corrupted at 50% receive exactly the noise they receive at 100%.
pub fn pd_shift(
    net: &Network,
    samples: &[Sample],
    corruption: GaussianCorruption,
    fractions: &[f64],
    skip: usize,
    pd_threshold: f64,
) -> Result<Vec<PdHistogram>> {
    let n = samples.len();
    let n_heads = net.num_heads();
    let mut out = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(LeError::InvalidArgument(format!(
                "corruption fraction {fraction} outside [0, 1]"
            )));
        }
        let corrupted = (fraction * n as f64).ceil() as usize;
        let mut counts = vec![0usize; n_heads];
        let mut total = 0.0;
        for (i, sample) in samples.iter().enumerate() {
            let mut image = data::normalize(&sample.image)?;
            if i < corrupted {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(corruption.seed, 400 + i as u64));
                image = data::corrupt_gaussian(&image, corruption.mean, corruption.std, &mut rng)?;
            }
            let outputs = single_image_outputs(net, &image)?;
            let curve = uncertainty::layer_agreement_curve(&outputs, skip, pd_threshold)?;
            let pd = uncertainty::prediction_depth(&curve);
            counts[pd] += 1;
            total += pd as f64;
        }
        out.push(PdHistogram {
            corruption_fraction: fraction,
            counts,
            mean_pd: total / n as f64,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Summary table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SummaryTable {
    pub images: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    /// Over images with a defined MHD.
    pub mhd_mean: f64,
    pub mhd_std: f64,
    pub undefined_mhd: usize,
    pub nll_mean: f64,
    pub nll_std: f64,
    /// (class, dsc mean, dsc std, mhd mean, mhd std, undefined count).
    pub per_class: Vec<ClassSummary>,
}

#[derive(Debug, Clone)]
pub struct ClassSummary {
    pub class: u32,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub mhd_mean: f64,
    pub mhd_std: f64,
    pub undefined_mhd: usize,
}

pub fn summary_table(records: &[MetricRecord]) -> Result<SummaryTable> {
    if records.is_empty() {
        return Err(LeError::InvalidArgument("summary_table needs records".into()));
    }
    let dscs: Vec<f64> = records.iter().map(|r| r.dsc).collect();
    let nlls: Vec<f64> = records.iter().map(|r| r.nll).collect();
    let mhds: Vec<f64> = records.iter().filter_map(|r| r.mhd).collect();
    let (dsc_mean, dsc_std) = mean_std(&dscs);
    let (nll_mean, nll_std) = mean_std(&nlls);
    let (mhd_mean, mhd_std) = mean_std(&mhds);
    let num_classes = records[0].per_class_dsc.len();
    let mut per_class = Vec::new();
    if num_classes > 1 {
        for k in 0..num_classes {
            let d: Vec<f64> = records.iter().map(|r| r.per_class_dsc[k]).collect();
            let m: Vec<f64> = records.iter().filter_map(|r| r.per_class_mhd[k]).collect();
            let (dm, ds) = mean_std(&d);
            let (mm, ms) = mean_std(&m);
            per_class.push(ClassSummary {
                class: (k + 1) as u32,
                dsc_mean: dm,
                dsc_std: ds,
                mhd_mean: mm,
                mhd_std: ms,
                undefined_mhd: records.len() - m.len(),
            });
        }
    }
    Ok(SummaryTable {
        images: records.len(),
        dsc_mean,
        dsc_std,
        mhd_mean,
        mhd_std,
        undefined_mhd: records.len() - mhds.len(),
        nll_mean,
        nll_std,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("img-{i:02}")).collect()
    }

    #[test]
    fn qc_hand_example_matches_flagging_rule() {
        let dscs = [0.95, 0.80, 0.85, 0.99];
        let unc = [0.1, 0.9, 0.5, 0.0];
        let curve = qc_curve(&ids(4), &unc, &dscs, 0.9, 5).unwrap();
        assert_eq!(curve.flag_fractions, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let expect = [1.0, 0.5, 0.0, 0.0, 0.0];
        for (got, want) in curve.remaining_poor.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{:?}", curve.remaining_poor);
        }
    }

    #[test]
    fn qc_oracle_ordering_equals_ideal() {
        let dscs = [0.95, 0.80, 0.85, 0.99, 0.5, 0.91];
        let unc: Vec<f64> = dscs.iter().map(|d| -d).collect();
        let curve = qc_curve(&ids(6), &unc, &dscs, 0.9, QC_GRID_POINTS).unwrap();
        for (got, want) in curve.remaining_poor.iter().zip(&curve.ideal) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((curve.auc - curve.ideal_auc).abs() < 1e-12);
    }

    #[test]
    fn qc_curve_starts_at_one_and_ends_at_zero() {
        let dscs = [0.95, 0.80, 0.85];
        let unc = [0.3, 0.1, 0.9];
        let curve = qc_curve(&ids(3), &unc, &dscs, 0.9, QC_GRID_POINTS).unwrap();
        assert_eq!(curve.remaining_poor[0], 1.0);
        assert_eq!(*curve.remaining_poor.last().unwrap(), 0.0);
        assert_eq!(curve.random_baseline[0], 1.0);
        assert_eq!(*curve.random_baseline.last().unwrap(), 0.0);
    }

    #[test]
    fn qc_no_poor_cases_yields_zero_curve_with_flag() {
        let dscs = [0.95, 0.99, 0.92];
        let unc = [0.3, 0.1, 0.9];
        let curve = qc_curve(&ids(3), &unc, &dscs, 0.9, 11).unwrap();
        assert!(curve.no_poor_cases);
        assert!(curve.remaining_poor.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qc_ideal_reaches_zero_at_poor_fraction() {
        let dscs = [0.5, 0.6, 0.95, 0.99]; // 2 of 4 poor
        let unc = [0.0, 0.0, 0.0, 0.0];
        let curve = qc_curve(&ids(4), &unc, &dscs, 0.9, QC_GRID_POINTS).unwrap();
        for (f, v) in curve.flag_fractions.iter().zip(&curve.ideal) {
            if *f >= 0.5 {
                assert_eq!(*v, 0.0, "ideal must be 0 from f = poor fraction on");
            }
        }
    }

    #[test]
    fn qc_ties_break_by_id_order() {
        // Equal uncertainty everywhere: flagging follows id order, so the
        // poor image "img-00" is flagged first.
        let dscs = [0.5, 0.99, 0.99, 0.99];
        let unc = [0.7, 0.7, 0.7, 0.7];
        let curve = qc_curve(&ids(4), &unc, &dscs, 0.9, 5).unwrap();
        assert_eq!(curve.remaining_poor, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn trapezoid_of_straight_line_is_half() {
        let x: Vec<f64> = (0..QC_GRID_POINTS).map(|i| i as f64 / 100.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        assert!((trapezoid(&x, &y) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mean_std_matches_closed_form() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-12);
        assert!((s - (1.25f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn summary_of_perfect_predictions_is_degenerate() {
        let rec = MetricRecord {
            dsc: 1.0,
            mhd: Some(0.0),
            nll: 1e-7,
            per_class_dsc: vec![1.0],
            per_class_mhd: vec![Some(0.0)],
        };
        let table = summary_table(&vec![rec; 5]).unwrap();
        assert_eq!(table.dsc_mean, 1.0);
        assert_eq!(table.dsc_std, 0.0);
        assert_eq!(table.mhd_mean, 0.0);
        assert_eq!(table.undefined_mhd, 0);
        assert!(table.nll_mean < 1e-6);
    }
}
