//! Occupancy IoU and semantic mIoU.

use serde::{Deserialize, Deserializer, Serialize};

use crate::csu::SparseGlobalMap;
use crate::error::{Error, Result};
use crate::sim::scene::{classes, Scene};

/// Which cells are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Cells observed at least once and inside the scene bounds.
    #[default]
    Visited,
    /// Every scene cell; unobserved cells count as empty predictions.
    SceneBbox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    pub miou: f64,
    /// IoU for classes `1..N_c`; NaN (JSON `null`) where a class is absent
    /// from both prediction and ground truth. `miou` averages the classes
    /// present in the ground truth.
    #[serde(deserialize_with = "nan_from_null")]
    pub per_class_iou: Vec<f64>,
    pub visited_voxel_count: usize,
    pub mask: MaskMode,
}

fn nan_from_null<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
    Ok(raw.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
}

fn check_aligned(pred: &[u8], gt: &[u8], mask: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "pred/gt/mask lengths {}/{}/{}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    Ok(())
}

/// Binary occupied-vs-empty IoU inside `mask`; 1.0 when the union is empty.
pub fn occupancy_iou(pred: &[u8], gt: &[u8], mask: &[bool]) -> Result<f64> {
    check_aligned(pred, gt, mask)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if !m {
            continue;
        }
        let (po, go) = (p != classes::EMPTY, g != classes::EMPTY);
        inter += (po && go) as usize;
        union += (po || go) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Per-class IoU over classes `1..num_classes` and their mean over classes
/// present in the ground truth. A class absent from both prediction and
/// ground truth has IoU NaN; one that is only predicted has IoU 0 but does
/// not enter the mean. With no ground-truth class present the mean is 1.0
/// when nothing is predicted either, else 0.0.
pub fn semantic_miou(pred: &[u8], gt: &[u8], mask: &[bool], num_classes: usize) -> Result<(f64, Vec<f64>)> {
    check_aligned(pred, gt, mask)?;
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    let mut in_gt = vec![false; num_classes];
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if !m {
            continue;
        }
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::invalid(format!("label outside [0, {num_classes})")));
        }
        in_gt[g] = true;
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let per_class: Vec<f64> = (1..num_classes)
        .map(|c| {
            if union[c] == 0 {
                f64::NAN
            } else {
                inter[c] as f64 / union[c] as f64
            }
        })
        .collect();
    let scored: Vec<f64> = (1..num_classes).filter(|&c| in_gt[c]).map(|c| per_class[c - 1]).collect();
    let miou = if scored.is_empty() {
        if per_class.iter().all(|v| v.is_nan()) {
            1.0
        } else {
            0.0
        }
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok((miou, per_class))
}

/// Scores a map's argmax labels against a scene.
pub fn evaluate_map(map: &SparseGlobalMap, scene: &Scene, mode: MaskMode) -> Result<EvalReport> {
    let (pred, gt) = match mode {
        MaskMode::Visited => map
            .entries_sorted()
            .into_iter()
            .filter(|s| scene.contains(&s.coord))
            .map(|s| (s.label(), scene.label_at(&s.coord)))
            .unzip::<u8, u8, Vec<u8>, Vec<u8>>(),
        MaskMode::SceneBbox => scene
            .labels()
            .indexed_iter()
            .map(|((i, j, k), &g)| {
                let c = scene.coord_of(i, j, k);
                (map.get(&c).map_or(classes::EMPTY, |s| s.label()), g)
            })
            .unzip(),
    };
    let mask = vec![true; pred.len()];
    let iou = occupancy_iou(&pred, &gt, &mask)?;
    let (miou, per_class_iou) = semantic_miou(&pred, &gt, &mask, scene.num_classes())?;
    let visited = map.values().filter(|s| scene.contains(&s.coord)).count();
    Ok(EvalReport {
        iou,
        miou,
        per_class_iou,
        visited_voxel_count: visited,
        mask: mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn occupancy_cases() {
        let all = [true; 4];
        assert_eq!(occupancy_iou(&[1, 0, 2, 0], &[1, 0, 2, 0], &all).unwrap(), 1.0);
        assert_eq!(occupancy_iou(&[1, 0, 0, 0], &[0, 2, 0, 0], &all).unwrap(), 0.0);
        // pred {a, b}, gt {b, c}
        assert_abs_diff_eq!(occupancy_iou(&[1, 1, 0, 0], &[0, 1, 1, 0], &all).unwrap(), 1.0 / 3.0);
        assert_eq!(occupancy_iou(&[0, 0], &[0, 0], &[true; 2]).unwrap(), 1.0);
        assert!(occupancy_iou(&[0], &[0, 0], &[true; 2]).is_err());
    }

    #[test]
    fn mask_excludes_cells() {
        let r = occupancy_iou(&[1, 1], &[1, 0], &[true, false]).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn miou_cases() {
        let m = [true; 6];
        let (mi, per) = semantic_miou(&[1, 2, 3, 0, 1, 2], &[1, 2, 3, 0, 1, 2], &m, 5).unwrap();
        assert_eq!(mi, 1.0);
        assert!(per[3].is_nan());
        // Class 2 entirely predicted as class 1 is impossible without hurting 1;
        // predict it as empty instead: class 1 perfect, class 2 zero.
        let (mi, per) = semantic_miou(&[1, 1, 0, 0], &[1, 1, 2, 2], &[true; 4], 4).unwrap();
        assert_eq!(per[0], 1.0);
        assert_eq!(per[1], 0.0);
        assert!(per[2].is_nan());
        assert_eq!(mi, 0.5);
        assert!(semantic_miou(&[1], &[1, 1], &[true], 3).is_err());
    }

    #[test]
    fn predicted_only_class_is_reported_not_averaged() {
        let (mi, per) = semantic_miou(&[1, 1, 3], &[1, 1, 0], &[true; 3], 4).unwrap();
        assert_eq!(per[2], 0.0);
        assert_eq!(mi, 1.0);
        let (mi, _) = semantic_miou(&[0, 2], &[0, 0], &[true; 2], 3).unwrap();
        assert_eq!(mi, 0.0);
        let (mi, _) = semantic_miou(&[0, 0], &[0, 0], &[true; 2], 3).unwrap();
        assert_eq!(mi, 1.0);
    }

    #[test]
    fn report_json_uses_null_for_absent() {
        let r = EvalReport {
            iou: 0.5,
            miou: 0.25,
            per_class_iou: vec![0.25, f64::NAN],
            visited_voxel_count: 3,
            mask: MaskMode::Visited,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("[0.25,null]"));
        let back: EvalReport = serde_json::from_str(&s).unwrap();
        assert!(back.per_class_iou[1].is_nan());
    }
}
