//! Segmentation metrics: pooled MeanIoU and object-level precision/recall against IoU
//! thresholds.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{Real, Tensor};

/// Mean over classes `{0, 1}` of `|pred ∩ gt| / |pred ∪ gt|`, pooled over all pixels given.
/// A class absent from both masks scores 1.
pub fn mean_iou(pred: &[u8], gt: &[u8]) -> f64 {
    class_ious(pred, gt, 2).iter().sum::<f64>() / 2.0
}

pub fn class_ious(pred: &[u8], gt: &[u8], classes: usize) -> Vec<f64> {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    (0..classes)
        .map(|c| if union[c] == 0 { 1.0 } else { inter[c] as f64 / union[c] as f64 })
        .collect()
}

/// Per-pixel argmax class of `(N, K, H, W)` logits in `(N, H, W)` order; ties go to the lower
/// class.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, k, h, w] = logits.dims4()?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(b * k + c) * hw + p] > d[(b * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// 4-connected foreground components of one `h x w` mask, as pixel index lists in raster
/// order of their first pixel.
pub fn components(mask: &[u8], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask[start] == 0 || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask[q] != 0 && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// IoUs of a greedy one-to-one matching between predicted and ground-truth components of a
/// single image: pairs are taken by descending IoU (ties by gt then pred index) while both
/// sides are free. Returns `(matched ious, #pred, #gt)`.
pub fn match_objects(pred: &[u8], gt: &[u8], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let pc = components(pred, h, w);
    let gc = components(gt, h, w);
    let mut owner = vec![usize::MAX; h * w];
    for (i, c) in gc.iter().enumerate() {
        for &p in c {
            owner[p] = i;
        }
    }
    let mut pairs = Vec::new();
    for (j, c) in pc.iter().enumerate() {
        let mut overlap = vec![0usize; gc.len()];
        for &p in c {
            if owner[p] != usize::MAX {
                overlap[owner[p]] += 1;
            }
        }
        for (i, &o) in overlap.iter().enumerate() {
            if o > 0 {
                let iou = o as f64 / (c.len() + gc[i].len() - o) as f64;
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gc.len()];
    let mut pred_used = vec![false; pc.len()];
    let mut matched = Vec::new();
    for (iou, i, j) in pairs {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            matched.push(iou);
        }
    }
    (matched, pc.len(), gc.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_iou: f64,
    pub points: Vec<PrPoint>,
}

pub const DEFAULT_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Object-level precision/recall for each IoU threshold over `n` images of `h x w`
/// (masks in `(N, H, W)` order). Precision is 1 when nothing was predicted and recall is 1
/// when there is nothing to find.
pub fn pr_curve(pred: &[u8], gt: &[u8], h: usize, w: usize, thresholds: &[f64]) -> Result<EvalReport> {
    if pred.len() != gt.len() || h * w == 0 || pred.len() % (h * w) != 0 {
        return Err(invalid("prediction and ground truth must hold the same whole images"));
    }
    for (i, &t) in thresholds.iter().enumerate() {
        if !(t > 0.0 && t <= 1.0) || (i > 0 && t <= thresholds[i - 1]) {
            return Err(invalid(format!("thresholds must be strictly increasing in (0, 1], got {t}")));
        }
    }
    let mut ious = Vec::new();
    let (mut n_pred, mut n_gt) = (0, 0);
    for (p, g) in pred.chunks(h * w).zip(gt.chunks(h * w)) {
        let (m, np, ng) = match_objects(p, g, h, w);
        ious.extend(m);
        n_pred += np;
        n_gt += ng;
    }
    let points = thresholds
        .iter()
        .map(|&t| {
            let tp = ious.iter().filter(|&&iou| iou >= t).count();
            let (fp, fn_) = (n_pred - tp, n_gt - tp);
            PrPoint {
                threshold: t,
                precision: if n_pred == 0 { 1.0 } else { tp as f64 / n_pred as f64 },
                recall: if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 },
                tp,
                fp,
                fn_,
            }
        })
        .collect();
    Ok(EvalReport {
        mean_iou: mean_iou(pred, gt),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = [0, 1, 1, 0, 1, 0];
        assert_eq!(mean_iou(&a, &a), 1.0);
        assert_eq!(mean_iou(&[0; 4], &[0; 4]), 1.0);
        let ious = class_ious(&[1, 1, 0, 0], &[0, 0, 1, 1], 2);
        assert_eq!(ious[1], 0.0);
        // pred covers half of gt with equal area
        let ious = class_ious(&[1, 1, 0, 0, 0, 0], &[0, 1, 1, 0, 0, 0], 2);
        assert!((ious[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn components_four_connected() {
        #[rustfmt::skip]
        let m = [
            1, 0, 1,
            0, 1, 1,
            1, 0, 0,
        ];
        let c = components(&m, 3, 3);
        assert_eq!(c, vec![vec![0], vec![2, 4, 5], vec![6]]);
    }

    #[test]
    fn pr_examples() {
        #[rustfmt::skip]
        let gt = [
            1, 1, 0, 0,
            1, 1, 0, 0,
            0, 0, 0, 1,
            0, 0, 0, 1,
        ];
        let r = pr_curve(&gt, &gt, 4, 4, &DEFAULT_THRESHOLDS).unwrap();
        assert!(r.points.iter().all(|p| p.precision == 1.0 && p.recall == 1.0));
        let r = pr_curve(&[0; 16], &gt, 4, 4, &DEFAULT_THRESHOLDS).unwrap();
        assert!(r.points.iter().all(|p| p.precision == 1.0 && p.recall == 0.0));
        let mut one = gt;
        one[11] = 0;
        one[15] = 0;
        let r = pr_curve(&one, &gt, 4, 4, &DEFAULT_THRESHOLDS).unwrap();
        assert!(r.points.iter().all(|p| p.precision == 1.0 && p.recall == 0.5 && p.tp == 1 && p.fn_ == 1));
        assert!(pr_curve(&gt, &gt, 4, 4, &[0.5, 0.5]).is_err());
        assert!(pr_curve(&gt, &gt, 4, 4, &[0.0]).is_err());
    }

    #[test]
    fn predict_ties_to_background() {
        let t = Tensor::<f32>::new(&[1, 2, 1, 3], vec![0.0, 1.0, 2.0, 0.0, 2.0, 1.0]).unwrap();
        assert_eq!(predict(&t).unwrap(), [0, 1, 0]);
    }
}
