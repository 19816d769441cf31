//! Detection metrics: IoU, greedy matching, all-point AP, P/R/F1 and
//! confusion counts.

use std::io::Write;

use crate::diffusion::{Box4, BoxSet};
use crate::error::{Error, Result};

pub const DEFAULT_CONF: f64 = 0.5;

/// Intersection over union of two `(cx, cy, w, h)` boxes.
pub fn iou(a: Box4, b: Box4) -> f64 {
    let corners = |r: Box4| [r[0] - r[2] / 2.0, r[1] - r[3] / 2.0, r[0] + r[2] / 2.0, r[1] + r[3] / 2.0];
    let (a, b) = (corners(a), corners(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Descending score, ties by lower index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    /// Indexed like the detections.
    pub tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

/// Greedy same-class matching, visiting detections by descending score.
pub fn match_detections(dets: &BoxSet, gts: &BoxSet, iou_thresh: f64) -> Matching {
    let mut tp = vec![false; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for d in score_order(&dets.scores) {
        let mut best: Option<(usize, f64)> = None;
        for g in 0..gts.len() {
            if gt_matched[g] || gts.labels[g] != dets.labels[d] {
                continue;
            }
            let v = iou(dets.boxes[d], gts.boxes[g]);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            gt_matched[g] = true;
            tp[d] = true;
        }
    }
    Matching { tp, gt_matched }
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageEval {
    pub dets: BoxSet,
    pub gts: BoxSet,
}

fn class_subset(set: &BoxSet, class: usize, min_score: f64) -> BoxSet {
    let keep: Vec<usize> = (0..set.len())
        .filter(|&i| set.labels[i] == class && set.scores[i] >= min_score)
        .collect();
    set.select(&keep)
}

/// All-point interpolated area under a precision/recall curve given the
/// TP flags of score-ranked detections.
pub fn all_point_ap(ranked_tp: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut precision = Vec::with_capacity(ranked_tp.len());
    for (k, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // precision envelope, non-increasing in rank
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// AP of one class over a dataset, or `None` without ground truth.
pub fn class_ap(images: &[ImageEval], class: usize, iou_thresh: f64) -> Option<f64> {
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut positives = 0;
    for (img, e) in images.iter().enumerate() {
        let dets = class_subset(&e.dets, class, f64::NEG_INFINITY);
        let gts = class_subset(&e.gts, class, f64::NEG_INFINITY);
        positives += gts.len();
        let m = match_detections(&dets, &gts, iou_thresh);
        ranked.extend((0..dets.len()).map(|i| (dets.scores[i], img, i, m.tp[i])));
    }
    if positives == 0 {
        return None;
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let flags: Vec<bool> = ranked.iter().map(|r| r.3).collect();
    Some(all_point_ap(&flags, positives))
}

/// Mean AP over classes that have ground truth; classes without are
/// skipped with a warning.
pub fn mean_ap(images: &[ImageEval], classes: usize, iou_thresh: f64) -> f64 {
    let aps: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let ap = class_ap(images, c, iou_thresh);
            if ap.is_none() {
                log::warn!("class {c} has no ground truth; excluded from mAP");
            }
            ap
        })
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub fn ap50(images: &[ImageEval], classes: usize) -> f64 {
    mean_ap(images, classes, 0.5)
}

pub fn ap75(images: &[ImageEval], classes: usize) -> f64 {
    mean_ap(images, classes, 0.75)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl PrF1 {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1, tp, fp, fn_ }
    }
}

/// Precision, recall and F1 at IoU 0.5 over detections scoring at least
/// `conf`; `class = None` pools every class.
pub fn pr_f1(images: &[ImageEval], classes: usize, class: Option<usize>, conf: f64) -> PrF1 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for e in images {
        for c in (0..classes).filter(|&c| class.is_none_or(|k| k == c)) {
            let m = match_detections(&class_subset(&e.dets, c, conf), &class_subset(&e.gts, c, f64::NEG_INFINITY), 0.5);
            let hits = m.tp.iter().filter(|&&x| x).count();
            tp += hits;
            fp += m.tp.len() - hits;
            fn_ += m.gt_matched.iter().filter(|&&x| !x).count();
        }
    }
    PrF1::from_counts(tp, fp, fn_)
}

/// `counts[truth][predicted]` with index `classes` meaning background: a
/// GT row records the class of its best-overlapping confident detection
/// (IoU ≥ 0.5), and detections that cover no GT land in the background row.
pub fn confusion_matrix(images: &[ImageEval], classes: usize, conf: f64) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0usize; classes + 1]; classes + 1];
    for e in images {
        let mut covered = vec![false; e.dets.len()];
        for g in 0..e.gts.len() {
            let best = (0..e.dets.len())
                .filter(|&d| e.dets.scores[d] >= conf)
                .map(|d| (d, iou(e.dets.boxes[d], e.gts.boxes[g])))
                .filter(|&(_, v)| v >= 0.5)
                .fold(None, |acc: Option<(usize, f64)>, (d, v)| match acc {
                    Some((_, b)) if b >= v => acc,
                    _ => Some((d, v)),
                });
            let predicted = match best {
                Some((d, _)) => {
                    covered[d] = true;
                    e.dets.labels[d].min(classes)
                }
                None => classes,
            };
            counts[e.gts.labels[g].min(classes)][predicted] += 1;
        }
        for d in 0..e.dets.len() {
            if !covered[d] && e.dets.scores[d] >= conf && e.gts.boxes.iter().all(|&g| iou(e.dets.boxes[d], g) < 0.5) {
                counts[classes][e.dets.labels[d].min(classes)] += 1;
            }
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub class: String,
    pub ap50: f64,
    pub ap75: f64,
    pub pr: PrF1,
}

/// One row per class with ground truth, then an `all` row.
pub fn evaluate(images: &[ImageEval], class_names: &[&str], conf: f64) -> Vec<MetricsRow> {
    let k = class_names.len();
    let mut rows: Vec<MetricsRow> = (0..k)
        .filter_map(|c| {
            Some(MetricsRow {
                class: class_names[c].to_string(),
                ap50: class_ap(images, c, 0.5)?,
                ap75: class_ap(images, c, 0.75)?,
                pr: pr_f1(images, k, Some(c), conf),
            })
        })
        .collect();
    rows.push(MetricsRow {
        class: "all".into(),
        ap50: ap50(images, k),
        ap75: ap75(images, k),
        pr: pr_f1(images, k, None, conf),
    });
    rows
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> Result<()> {
    let io = |e| Error::io("metrics csv", e);
    writeln!(out, "class,AP50,AP75,P,R,F1").map_err(io)?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.class, r.ap50, r.ap75, r.pr.precision, r.pr.recall, r.pr.f1
        )
        .map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(boxes: &[Box4], labels: &[usize], scores: &[f64]) -> BoxSet {
        BoxSet::new(boxes.to_vec(), labels.to_vec(), scores.to_vec()).unwrap()
    }

    fn corner(x0: f64, y0: f64, x1: f64, y1: f64) -> Box4 {
        [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0]
    }

    #[test]
    fn iou_cases() {
        let a = [0.5, 0.5, 0.2, 0.3];
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, [0.9, 0.9, 0.1, 0.1]), 0.0);
        let v = iou(corner(0.0, 0.0, 2.0, 2.0), corner(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_translation_invariant(
            a in (0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.5, 0.01f64..0.5),
            b in (0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.5, 0.01f64..0.5),
            dx in -0.5f64..0.5, dy in -0.5f64..0.5,
        ) {
            let (a, b) = ([a.0, a.1, a.2, a.3], [b.0, b.1, b.2, b.3]);
            let v = iou(a, b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - iou(b, a)).abs() < 1e-15);
            let shift = |r: Box4| [r[0] + dx, r[1] + dy, r[2], r[3]];
            prop_assert!((v - iou(shift(a), shift(b))).abs() < 1e-9);
        }
    }

    #[test]
    fn matching_cases() {
        let g = set(&[[0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.2, 0.2]], &[0, 1], &[1.0, 1.0]);
        let m = match_detections(&g, &g, 0.5);
        assert_eq!(m, Matching { tp: vec![true, true], gt_matched: vec![true, true] });
        let m = match_detections(&BoxSet::default(), &g, 0.5);
        assert_eq!(m.gt_matched, vec![false, false]);
        let two = set(&[[0.2, 0.2, 0.1, 0.1], [0.21, 0.2, 0.1, 0.1]], &[0, 0], &[0.4, 0.9]);
        let m = match_detections(&two, &g, 0.5);
        assert_eq!(m.tp, vec![false, true]);
        // wrong class never matches
        let wrong = set(&[[0.2, 0.2, 0.1, 0.1]], &[1], &[1.0]);
        assert_eq!(match_detections(&wrong, &g, 0.5).tp, vec![false]);
    }

    #[test]
    fn ap_and_prf1_cases() {
        let gts = set(&[[0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.2, 0.2]], &[0, 0], &[1.0, 1.0]);
        let perfect = vec![ImageEval { dets: gts.clone(), gts: gts.clone() }];
        assert_eq!(ap50(&perfect, 1), 1.0);
        assert_eq!(pr_f1(&perfect, 1, None, 0.5).f1, 1.0);

        let none = vec![ImageEval { dets: BoxSet::default(), gts: gts.clone() }];
        assert_eq!(ap50(&none, 1), 0.0);
        let z = pr_f1(&none, 1, None, 0.5);
        assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));

        let tp_then_fp = set(&[[0.2, 0.2, 0.1, 0.1], [0.5, 0.1, 0.05, 0.05]], &[0, 0], &[0.9, 0.8]);
        let half = vec![ImageEval { dets: tp_then_fp, gts }];
        assert!((ap50(&half, 1) - 0.5).abs() < 1e-15);
        let p = pr_f1(&half, 1, None, 0.5);
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn class_without_ground_truth_is_excluded() {
        let gts = set(&[[0.2, 0.2, 0.1, 0.1]], &[0], &[1.0]);
        let images = vec![ImageEval { dets: gts.clone(), gts }];
        assert_eq!(class_ap(&images, 1, 0.5), None);
        assert_eq!(ap50(&images, 3), 1.0);
        let rows = evaluate(&images, &["a", "b", "c"], 0.5);
        assert_eq!(rows.iter().map(|r| r.class.as_str()).collect::<Vec<_>>(), vec!["a", "all"]);
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("class,AP50,AP75,P,R,F1\na,1.000000,"));
    }

    #[test]
    fn confusion_counts() {
        let gts = set(&[[0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.2, 0.2]], &[0, 1], &[1.0, 1.0]);
        let dets = set(&[[0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.2, 0.2], [0.4, 0.9, 0.1, 0.1]], &[1, 1, 0], &[0.9, 0.9, 0.9]);
        let m = confusion_matrix(&[ImageEval { dets, gts }], 2, 0.5);
        assert_eq!(m, vec![vec![0, 1, 0], vec![0, 1, 0], vec![1, 0, 0]]);
    }

    /// Brute force: enumerate every rank cut-off, then for each achieved
    /// recall level take the best precision at that recall or beyond.
    fn brute_ap(flags: &[bool], positives: usize) -> f64 {
        let points: Vec<(f64, f64)> = (1..=flags.len())
            .map(|k| {
                let tp = flags[..k].iter().filter(|&&x| x).count() as f64;
                (tp / positives as f64, tp / k as f64)
            })
            .collect();
        let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            if r > prev {
                let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
                ap += (r - prev) * best;
                prev = r;
            }
        }
        ap
    }

    proptest! {
        #[test]
        fn ap_matches_brute_force_and_is_monotone(
            flags in proptest::collection::vec(any::<bool>(), 0..12),
            extra in 0usize..3,
        ) {
            let positives = flags.iter().filter(|&&x| x).count() + extra + 1;
            let ap = all_point_ap(&flags, positives);
            prop_assert!((ap - brute_ap(&flags, positives)).abs() < 1e-12);
            // a lowest-ranked FP never helps
            let mut with_fp = flags.clone();
            with_fp.push(false);
            prop_assert!(all_point_ap(&with_fp, positives) <= ap + 1e-15);
            // a correct detection (for a still-unmatched GT) never hurts
            if extra > 0 {
                for pos in 0..=flags.len() {
                    let mut with_tp = flags.clone();
                    with_tp.insert(pos, true);
                    prop_assert!(all_point_ap(&with_tp, positives) >= ap - 1e-15);
                }
            }
        }
    }
}
