//! Intersection-over-union on voxel sets.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{LodeError, Result};
use crate::grid::{LabeledOccupancy, OccupancyVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub intersection: usize,
    pub union: usize,
    pub iou: f64,
    pub per_class_iou: Option<Vec<Option<f64>>>,
    pub miou: Option<f64>,
}

fn ratio(intersection: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

/// Occupancy IoU; two empty volumes score 1.0.
pub fn iou(pred: &OccupancyVolume, gt: &OccupancyVolume) -> Result<IoUReport> {
    pred.grid.check_same(&gt.grid)?;
    let intersection = pred.occupied.intersection(&gt.occupied).count();
    let union = pred.len() + gt.len() - intersection;
    Ok(IoUReport { intersection, union, iou: ratio(intersection, union), per_class_iou: None, miou: None })
}

/// Mean per-class IoU. Classes present in neither volume are excluded from
/// the mean (reported as `None`). The geometric IoU of the supports is
/// reported alongside.
pub fn miou(pred: &LabeledOccupancy, gt: &LabeledOccupancy, num_classes: usize) -> Result<IoUReport> {
    pred.grid.check_same(&gt.grid)?;
    for &l in pred.labels.values().chain(gt.labels.values()) {
        if l as usize >= num_classes {
            return Err(LodeError::LabelOutOfRange { label: l, classes: num_classes });
        }
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes as u16 {
        let p: BTreeSet<_> = pred.labels.iter().filter(|(_, &l)| l == c).map(|(k, _)| *k).collect();
        let g: BTreeSet<_> = gt.labels.iter().filter(|(_, &l)| l == c).map(|(k, _)| *k).collect();
        if p.is_empty() && g.is_empty() {
            per_class.push(None);
            continue;
        }
        let inter = p.intersection(&g).count();
        per_class.push(Some(ratio(inter, p.len() + g.len() - inter)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let m = if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    let geo = iou(&pred.occupancy(), &gt.occupancy())?;
    Ok(IoUReport { per_class_iou: Some(per_class), miou: Some(m), ..geo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridConfig;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn g() -> GridConfig {
        GridConfig::new([0.0; 3], 1.0, [8, 8, 8]).unwrap()
    }

    fn occ(v: &[[i32; 3]]) -> OccupancyVolume {
        OccupancyVolume::from_indices(g(), v.iter().copied()).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = occ(&[[0, 0, 0], [1, 2, 3]]);
        assert_eq!(iou(&a, &a).unwrap().iou, 1.0);
        let b = occ(&[[4, 4, 4]]);
        assert_eq!(iou(&a, &b).unwrap().iou, 0.0);
    }

    #[test]
    fn hand_counted_quarter() {
        let p = occ(&[[0, 0, 0], [1, 0, 0]]);
        let gt = occ(&[[1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        let r = iou(&p, &gt).unwrap();
        assert_eq!((r.intersection, r.union), (1, 4));
        assert_eq!(r.iou, 0.25);
    }

    #[test]
    fn both_empty_is_one() {
        assert_eq!(iou(&occ(&[]), &occ(&[])).unwrap().iou, 1.0);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let other = OccupancyVolume::empty(GridConfig::desk());
        assert!(matches!(iou(&occ(&[]), &other), Err(LodeError::GridMismatch(_))));
    }

    fn labeled(v: &[([i32; 3], u16)]) -> LabeledOccupancy {
        LabeledOccupancy { grid: g(), labels: v.iter().copied().collect::<BTreeMap<_, _>>() }
    }

    #[test]
    fn perfect_labeling() {
        let a = labeled(&[([0, 0, 0], 0), ([1, 0, 0], 1), ([2, 0, 0], 2)]);
        assert_eq!(miou(&a, &a, 3).unwrap().miou, Some(1.0));
    }

    #[test]
    fn single_class_prediction_on_two_class_gt() {
        // gt: two voxels of class 0, two of class 1; prediction labels all four class 0.
        let gt = labeled(&[([0, 0, 0], 0), ([1, 0, 0], 0), ([2, 0, 0], 1), ([3, 0, 0], 1)]);
        let pred = labeled(&[([0, 0, 0], 0), ([1, 0, 0], 0), ([2, 0, 0], 0), ([3, 0, 0], 0)]);
        let r = miou(&pred, &gt, 4).unwrap();
        let pc = r.per_class_iou.unwrap();
        assert_eq!(pc[0], Some(0.5));
        assert_eq!(pc[1], Some(0.0));
        assert_eq!(pc[2], None);
        assert_eq!(r.miou, Some(0.25));
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let gt = labeled(&[([0, 0, 0], 0), ([2, 0, 0], 3)]);
        let r = miou(&labeled(&[]), &gt, 4).unwrap();
        assert_eq!(r.miou, Some(0.0));
    }

    #[test]
    fn label_out_of_range() {
        let gt = labeled(&[([0, 0, 0], 5)]);
        assert!(matches!(miou(&gt, &gt, 4), Err(LodeError::LabelOutOfRange { label: 5, .. })));
    }

    fn arb_set() -> impl Strategy<Value = Vec<[i32; 3]>> {
        prop::collection::vec((0i32..4, 0i32..4, 0i32..4).prop_map(|(a, b, c)| [a, b, c]), 0..30)
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_set(), b in arb_set()) {
            let (pa, pb) = (occ(&a), occ(&b));
            let x = iou(&pa, &pb).unwrap();
            let y = iou(&pb, &pa).unwrap();
            prop_assert_eq!(x.iou, y.iou);
            prop_assert!((0.0..=1.0).contains(&x.iou));
        }
    }
}
