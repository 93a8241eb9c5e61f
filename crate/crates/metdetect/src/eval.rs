//! Lesion-wise detection evaluation.
//!
//! The inferred mask is smoothed by dilation to fuse solitary, tightly
//! neighbored segmentations, then both masks are decomposed into connected
//! components. A ground-truth lesion counts as detected (TP) if it shares at
//! least one voxel with any predicted component; predicted components that
//! overlap nothing are false positives. Dilation is applied to the
//! prediction only; the annotation is left untouched.

use crate::error::{Error, Result};
use crate::volume::{connected_components, dilate, BinaryMask, Connectivity, Volume};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    /// Probability threshold; a voxel is foreground iff p > threshold.
    pub threshold: f64,
    /// Dilation radius in voxels applied to the predicted mask; 0 disables
    /// the fusion step.
    pub dilation_radius_voxels: f64,
    pub connectivity: Connectivity,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            dilation_radius_voxels: 6.0,
            connectivity: Connectivity::TwentySix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMatchResult {
    pub case_id: String,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Predicted component label -> ground-truth labels it overlaps.
    pub matched_pairs: Vec<(u32, Vec<u32>)>,
    pub pred_component_sizes: Vec<usize>,
    pub gt_component_sizes: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    /// TP / (TP + FN); undefined when the case has no ground-truth lesions.
    pub sensitivity: Option<f64>,
    /// TP / (TP + FP); undefined when nothing was predicted.
    pub ppv: Option<f64>,
    /// 2 TP / (2 TP + FN + FP); undefined when all three counts are zero.
    pub f1: Option<f64>,
}

/// Thresholds a probability heat map; strictly greater than `threshold`.
pub fn binarize(heatmap: &Volume, threshold: f64) -> Result<BinaryMask> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Parameter(format!(
            "threshold must lie in [0, 1), got {threshold}"
        )));
    }
    if heatmap.voxels().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Input(
            "heat map values must lie in [0, 1]".into(),
        ));
    }
    Ok(BinaryMask::from_volume_thresholded(heatmap, threshold as f32))
}

/// Matches predicted against ground-truth lesions by the one-voxel-overlap
/// rule after dilating the prediction.
pub fn match_lesions(
    pred: &BinaryMask,
    gt: &BinaryMask,
    params: &EvalParams,
) -> Result<LesionMatchResult> {
    if !pred.geometry().approx_eq(gt.geometry(), 1e-6) {
        return Err(Error::Geometry(
            "predicted and ground-truth masks live on different grids".into(),
        ));
    }
    let fused = if params.dilation_radius_voxels > 0.0 {
        dilate(pred, params.dilation_radius_voxels)?
    } else {
        pred.clone()
    };
    let pred_cc = connected_components(&fused, params.connectivity);
    let gt_cc = connected_components(gt, params.connectivity);

    let n_pred = pred_cc.count() as usize;
    let n_gt = gt_cc.count() as usize;

    // overlap incidence between component labels
    let mut overlap = vec![false; n_pred * n_gt.max(1)];
    for (&pl, &gl) in pred_cc.labels().iter().zip(gt_cc.labels()) {
        if pl > 0 && gl > 0 {
            overlap[(pl as usize - 1) * n_gt + (gl as usize - 1)] = true;
        }
    }

    let mut matched_pairs = Vec::new();
    let mut gt_hit = vec![false; n_gt];
    let mut fp = 0usize;
    for p in 0..n_pred {
        let hits: Vec<u32> = (0..n_gt)
            .filter(|&g| overlap[p * n_gt + g])
            .map(|g| g as u32 + 1)
            .collect();
        if hits.is_empty() {
            fp += 1;
        } else {
            for &g in &hits {
                gt_hit[g as usize - 1] = true;
            }
            matched_pairs.push((p as u32 + 1, hits));
        }
    }
    let tp = gt_hit.iter().filter(|&&h| h).count();

    Ok(LesionMatchResult {
        case_id: String::new(),
        true_positives: tp,
        false_positives: fp,
        false_negatives: n_gt - tp,
        matched_pairs,
        pred_component_sizes: pred_cc.component_sizes(),
        gt_component_sizes: gt_cc.component_sizes(),
    })
}

/// Case-wise detection metrics with undefined markers where denominators
/// vanish; such cases are excluded from summaries and reported separately.
pub fn case_metrics(r: &LesionMatchResult) -> CaseMetrics {
    let tp = r.true_positives as f64;
    let fp = r.false_positives as f64;
    let fn_ = r.false_negatives as f64;
    let sensitivity = if tp + fn_ > 0.0 { Some(tp / (tp + fn_)) } else { None };
    let ppv = if tp + fp > 0.0 { Some(tp / (tp + fp)) } else { None };
    let f1 = if 2.0 * tp + fn_ + fp > 0.0 {
        Some(2.0 * tp / (2.0 * tp + fn_ + fp))
    } else {
        None
    };
    CaseMetrics {
        sensitivity,
        ppv,
        f1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn mask_with(dims: [usize; 3], set: &[[usize; 3]]) -> BinaryMask {
        let g = Geometry::new(dims, [1.0; 3], [0.0; 3]);
        let mut v = vec![0u8; g.voxel_count()];
        for s in set {
            v[g.index(s[0], s[1], s[2])] = 1;
        }
        BinaryMask::new(g, v).unwrap()
    }

    fn no_dilation() -> EvalParams {
        EvalParams {
            dilation_radius_voxels: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn binarize_strict_threshold() {
        let g = Geometry::new([2, 1, 1], [1.0; 3], [0.0; 3]);
        let hm = Volume::new(g, vec![0.6, 0.4]).unwrap();
        let m = binarize(&hm, 0.5).unwrap();
        assert_eq!(m.voxels(), &[1, 0]);

        let g2 = Geometry::new([1, 1, 1], [1.0; 3], [0.0; 3]);
        let hm2 = Volume::new(g2, vec![0.5]).unwrap();
        assert_eq!(binarize(&hm2, 0.5).unwrap().voxels(), &[0]);
    }

    #[test]
    fn binarize_zero_threshold_is_positive_support() {
        let g = Geometry::new([3, 1, 1], [1.0; 3], [0.0; 3]);
        let hm = Volume::new(g, vec![0.0, 0.01, 1.0]).unwrap();
        assert_eq!(binarize(&hm, 0.0).unwrap().voxels(), &[0, 1, 1]);
    }

    #[test]
    fn binarize_rejects_bad_threshold() {
        let g = Geometry::new([1, 1, 1], [1.0; 3], [0.0; 3]);
        let hm = Volume::new(g, vec![0.5]).unwrap();
        assert!(binarize(&hm, 1.0).is_err());
        assert!(binarize(&hm, -0.1).is_err());
    }

    #[test]
    fn one_voxel_overlap_is_a_tp() {
        let pred = mask_with([8, 8, 1], &[[2, 2, 0]]);
        let gt = mask_with([8, 8, 1], &[[2, 2, 0], [3, 2, 0]]);
        let r = match_lesions(&pred, &gt, &no_dilation()).unwrap();
        assert_eq!(
            (r.true_positives, r.false_positives, r.false_negatives),
            (1, 0, 0)
        );
    }

    #[test]
    fn empty_prediction_all_fn() {
        let pred = mask_with([8, 8, 2], &[]);
        let gt = mask_with([8, 8, 2], &[[1, 1, 0], [4, 4, 0], [6, 6, 1]]);
        let r = match_lesions(&pred, &gt, &no_dilation()).unwrap();
        assert_eq!(
            (r.true_positives, r.false_positives, r.false_negatives),
            (0, 0, 3)
        );
    }

    #[test]
    fn one_pred_component_overlapping_two_lesions_counts_twice() {
        // pred spans two separated gt lesions
        let pred = mask_with([10, 3, 1], &[[2, 1, 0], [3, 1, 0], [4, 1, 0], [5, 1, 0], [6, 1, 0]]);
        let gt = mask_with([10, 3, 1], &[[2, 1, 0], [6, 1, 0]]);
        let r = match_lesions(&pred, &gt, &no_dilation()).unwrap();
        assert_eq!(
            (r.true_positives, r.false_positives, r.false_negatives),
            (2, 0, 0)
        );
        assert_eq!(r.matched_pairs, vec![(1, vec![1, 2])]);
    }

    #[test]
    fn dilation_fuses_neighboring_predictions() {
        // two pred voxels 4 apart: without dilation two components, with
    	// radius 2 they fuse into one component that hits the lesion between
        let pred = mask_with([12, 5, 1], &[[3, 2, 0], [7, 2, 0]]);
        let gt = mask_with([12, 5, 1], &[[5, 2, 0]]);
        let without = match_lesions(&pred, &gt, &no_dilation()).unwrap();
        assert_eq!(without.false_positives, 2);
        assert_eq!(without.true_positives, 0);
        let with = match_lesions(
            &pred,
            &gt,
            &EvalParams {
                dilation_radius_voxels: 2.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(with.false_positives, 0);
        assert_eq!(with.true_positives, 1);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let pred = mask_with([8, 8, 1], &[]);
        let gt = mask_with([8, 9, 1], &[]);
        assert!(matches!(
            match_lesions(&pred, &gt, &no_dilation()),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn tp_fn_sum_matches_gt_count() {
        let pred = mask_with([8, 8, 1], &[[1, 1, 0], [6, 6, 0]]);
        let gt = mask_with([8, 8, 1], &[[1, 1, 0], [3, 3, 0], [6, 6, 0]]);
        let r = match_lesions(&pred, &gt, &no_dilation()).unwrap();
        assert_eq!(
            r.true_positives + r.false_negatives,
            r.gt_component_sizes.len()
        );
    }

    #[test]
    fn metric_formulas() {
        let mk = |tp, fp, fn_| LesionMatchResult {
            case_id: String::new(),
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            matched_pairs: vec![],
            pred_component_sizes: vec![],
            gt_component_sizes: vec![],
        };
        let m = case_metrics(&mk(2, 5, 1));
        assert!((m.sensitivity.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.ppv.unwrap() - 2.0 / 7.0).abs() < 1e-12);
        assert!((m.f1.unwrap() - 0.4).abs() < 1e-12);

        let m = case_metrics(&mk(0, 3, 2));
        assert_eq!(m.sensitivity, Some(0.0));
        assert_eq!(m.ppv, Some(0.0));
        assert_eq!(m.f1, Some(0.0));

        let m = case_metrics(&mk(3, 0, 0));
        assert_eq!(m.sensitivity, Some(1.0));
        assert_eq!(m.ppv, Some(1.0));
        assert_eq!(m.f1, Some(1.0));

        // undefined markers
        let m = case_metrics(&mk(0, 0, 0));
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.ppv, None);
        assert_eq!(m.f1, None);
        let m = case_metrics(&mk(0, 0, 2));
        assert_eq!(m.sensitivity, Some(0.0));
        assert_eq!(m.ppv, None);

        // harmonic-mean identity whenever TP > 0
        let m = case_metrics(&mk(4, 3, 2));
        let (s, p) = (m.sensitivity.unwrap(), m.ppv.unwrap());
        assert!((m.f1.unwrap() - 2.0 * s * p / (s + p)).abs() < 1e-9);
    }

    #[test]
    fn growing_pred_inside_matched_components_never_hurts() {
        let gt = mask_with([10, 10, 1], &[[2, 2, 0], [2, 3, 0], [7, 7, 0]]);
        let pred_small = mask_with([10, 10, 1], &[[2, 2, 0]]);
        let pred_grown = mask_with([10, 10, 1], &[[2, 2, 0], [2, 3, 0]]);
        let a = match_lesions(&pred_small, &gt, &no_dilation()).unwrap();
        let b = match_lesions(&pred_grown, &gt, &no_dilation()).unwrap();
        assert!(b.true_positives >= a.true_positives);
        assert!(b.false_negatives <= a.false_negatives);
    }
}
