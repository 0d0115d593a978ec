//! PASCAL-style detection metrics at a single IoU threshold with
//! size-bucketed average precision.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::boxes::Bbox;
use crate::error::{invalid, Result};

pub const IOU_THRESHOLD: f64 = 0.5;
/// Areas below this are small.
pub const SMALL_AREA: f64 = 32.0 * 32.0;
/// Areas at or above [`SMALL_AREA`] and below this are medium.
pub const LARGE_AREA: f64 = 96.0 * 96.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];
}

/// Closed on the lower edge: exactly 32^2 is medium, exactly 96^2 is large.
pub fn size_bucket(b: &Bbox) -> SizeBucket {
    let a = b.area();
    if a < SMALL_AREA {
        SizeBucket::Small
    } else if a < LARGE_AREA {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: Bbox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub image: usize,
    pub class: usize,
    pub bbox: Bbox,
}

impl GroundTruthBox {
    pub fn bucket(&self) -> SizeBucket {
        size_bucket(&self.bbox)
    }
}

/// Indices of `dets` ordered by descending score, ties in input order.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching. Detections are processed by descending score; each
/// takes the still-unmatched same-class ground truth in its image with the
/// highest IoU at or above `thresh`. Returns, per detection in input order,
/// the index of its matched ground truth (`None` for false positives).
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], thresh: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    let mut matched = vec![None; dets.len()];
    for d in score_order(dets) {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.image != det.image || gt.class != det.class {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox);
            if v >= thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            matched[d] = Some(g);
        }
    }
    matched
}

/// All-point interpolated AP: area under the precision envelope, made
/// non-increasing from right to left, over recall steps.
pub fn average_precision(tp_flags: &[bool], scores: &[f64], num_gt: usize) -> f64 {
    assert_eq!(tp_flags.len(), scores.len());
    if num_gt == 0 || tp_flags.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &i in &order {
        if tp_flags[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// `(class, AP)` for every class with at least one ground truth.
    pub per_class: Vec<(usize, f64)>,
}

impl EvalReport {
    pub fn bucket(&self, b: SizeBucket) -> Option<f64> {
        match b {
            SizeBucket::Small => self.ap_small,
            SizeBucket::Medium => self.ap_medium,
            SizeBucket::Large => self.ap_large,
        }
    }
}

/// mAP at IoU 0.5 plus `AP_S`, `AP_M`, `AP_L`.
///
/// mAP averages per-class AP over classes with ground truth. For a size
/// bucket, only that bucket's ground truths count; a detection matched to a
/// ground truth of another bucket is dropped from the bucket's tally rather
/// than counted as a false positive. A bucket with no ground truth reports
/// `None`.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruthBox]) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(invalid("evaluate", "ground-truth set is empty"));
    }
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    let matched = match_detections(dets, gts, IOU_THRESHOLD);
    let tally = |class: usize, bucket: Option<SizeBucket>| -> Option<f64> {
        let in_scope = |g: &GroundTruthBox| g.class == class && bucket.is_none_or(|b| g.bucket() == b);
        let num_gt = gts.iter().filter(|g| in_scope(g)).count();
        if num_gt == 0 {
            return None;
        }
        let mut flags = Vec::new();
        let mut scores = Vec::new();
        for (d, det) in dets.iter().enumerate() {
            if det.class != class {
                continue;
            }
            let tp = match matched[d] {
                Some(g) if in_scope(&gts[g]) => true,
                Some(_) => continue,
                None => false,
            };
            flags.push(tp);
            scores.push(det.score);
        }
        Some(average_precision(&flags, &scores, num_gt))
    };
    let per_class: Vec<(usize, f64)> = classes
        .iter()
        .map(|&c| (c, tally(c, None).expect("class has ground truth")))
        .collect();
    let map = per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64;
    let bucket_mean = |b: SizeBucket| -> Option<f64> {
        let aps: Vec<f64> = classes.iter().filter_map(|&c| tally(c, Some(b))).collect();
        (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
    };
    Ok(EvalReport {
        map,
        ap_small: bucket_mean(SizeBucket::Small),
        ap_medium: bucket_mean(SizeBucket::Medium),
        ap_large: bucket_mean(SizeBucket::Large),
        per_class,
    })
}

/// Greedy non-maximum suppression over detections of one class and image;
/// returns kept indices in descending score order.
pub fn nms(dets: &[Detection], thresh: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(dets) {
        if keep.iter().all(|&k| {
            dets[k].image != dets[i].image
                || dets[k].class != dets[i].class
                || iou(&dets[k].bbox, &dets[i].bbox) <= thresh
        }) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> Bbox {
        Bbox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(class: usize, score: f64, b: Bbox) -> Detection {
        Detection {
            image: 0,
            class,
            score,
            bbox: b,
        }
    }

    fn gt(class: usize, b: Bbox) -> GroundTruthBox {
        GroundTruthBox {
            image: 0,
            class,
            bbox: b,
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &bx(1.0, 0.0, 3.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bucket_thresholds() {
        assert_eq!(size_bucket(&bx(0.0, 0.0, 30.0, 30.0)), SizeBucket::Small);
        assert_eq!(size_bucket(&bx(0.0, 0.0, 32.0, 32.0)), SizeBucket::Medium);
        assert_eq!(size_bucket(&bx(0.0, 0.0, 96.0, 96.0)), SizeBucket::Large);
        assert_eq!(size_bucket(&bx(0.0, 0.0, 100.0, 100.0)), SizeBucket::Large);
    }

    #[test]
    fn single_use_ground_truth() {
        let g = [gt(0, bx(0.0, 0.0, 10.0, 10.0))];
        let d = [det(0, 0.6, bx(1.0, 0.0, 11.0, 10.0)), det(0, 0.9, bx(0.0, 1.0, 10.0, 11.0))];
        let m = match_detections(&d, &g, 0.5);
        assert_eq!(m, [None, Some(0)]);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], &[0.9], 1), 1.0);
        assert_eq!(average_precision(&[false], &[0.9], 1), 0.0);
        assert_eq!(average_precision(&[], &[], 0), 0.0);
        // recall 0.5 @ p 1, recall 1 @ p 2/3
        let ap = average_precision(&[true, false, true], &[0.9, 0.8, 0.7], 2);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn evaluate_rejects_empty_ground_truth() {
        assert!(evaluate(&[], &[]).is_err());
    }

    #[test]
    fn no_detections_gives_zero() {
        let r = evaluate(&[], &[gt(1, bx(0.0, 0.0, 5.0, 5.0))]).unwrap();
        assert_eq!(r.map, 0.0);
        assert_eq!(r.ap_small, Some(0.0));
        assert_eq!(r.ap_medium, None);
    }

    #[test]
    fn out_of_bucket_match_is_ignored() {
        let g = [gt(0, bx(0.0, 0.0, 10.0, 10.0)), gt(0, bx(100.0, 100.0, 150.0, 150.0))];
        // the large box is matched by the top-scored detection; the small one by the second
        let d = [det(0, 0.9, bx(100.0, 100.0, 150.0, 150.0)), det(0, 0.5, bx(0.0, 0.0, 10.0, 10.0))];
        let r = evaluate(&d, &g).unwrap();
        assert_eq!(r.ap_small, Some(1.0));
        assert_eq!(r.ap_medium, Some(1.0));
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn nms_keeps_best_of_overlapping() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let d = [det(0, 0.3, b), det(0, 0.8, b), det(1, 0.5, b), det(0, 0.7, bx(20.0, 0.0, 30.0, 10.0))];
        assert_eq!(nms(&d, 0.5), [1, 3, 2]);
    }
}
