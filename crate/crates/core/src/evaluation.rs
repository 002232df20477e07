//! HOI detection mAP with Full / Rare / Non-rare grouping.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::PredictionRecord;
use crate::grounding::NormBox;
use crate::{Error, Result};

pub const IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RARE_THRESHOLD: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtAnnotation {
    pub human_box: NormBox,
    pub object_box: NormBox,
    pub object_class: usize,
    pub action: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtImage {
    pub image_id: String,
    pub annotations: Vec<GtAnnotation>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub images: Vec<GtImage>,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for img in &self.images {
            if !seen.insert(img.image_id.as_str()) {
                return Err(Error::Argument(format!("duplicate image id {}", img.image_id)));
            }
            for a in &img.annotations {
                a.human_box.validate()?;
                a.object_box.validate()?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let gt: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Number of annotations per `(action, object_class)`.
    pub fn class_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for a in self.images.iter().flat_map(|i| &i.annotations) {
            *counts.entry((a.action, a.object_class)).or_insert(0) += 1;
        }
        counts
    }
}

/// True iff labels agree and both box pairs overlap with IoU >= 0.5.
pub fn match_pair(pred: &PredictionRecord, gt: &GtAnnotation) -> bool {
    pred.object_class == gt.object_class
        && pred.action == gt.action
        && pred.human_box.iou(&gt.human_box) >= IOU_THRESHOLD
        && pred.object_box.iou(&gt.object_box) >= IOU_THRESHOLD
}

/// All-point interpolated AP from true-positive flags in ranked order.
pub fn average_precision(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (n, &hit) in tp_flags.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (n + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Precision envelope: best precision at any equal or higher recall.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

/// Greedy matching of one class's predictions (already ranked) against its
/// ground truth; returns the true-positive flag of each prediction.
pub fn match_ranked(ranked: &[&PredictionRecord], gts: &HashMap<&str, Vec<&GtAnnotation>>) -> Vec<bool> {
    let mut used: HashMap<&str, Vec<bool>> = gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    ranked
        .iter()
        .map(|p| {
            let (Some(cands), Some(taken)) = (gts.get(p.image_id.as_str()), used.get_mut(p.image_id.as_str())) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in cands.iter().enumerate() {
                if taken[g] || !match_pair(p, gt) {
                    continue;
                }
                let overlap = p.human_box.iou(&gt.human_box) + p.object_box.iou(&gt.object_box);
                if best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((g, overlap));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub rare_threshold: usize,
    /// Restricts evaluation to these `(action, object_class)` classes.
    pub classes: Option<BTreeSet<(usize, usize)>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rare_threshold: DEFAULT_RARE_THRESHOLD,
            classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub action: usize,
    pub object_class: usize,
    pub num_gt: usize,
    pub num_predictions: usize,
    pub rare: bool,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassAp>,
    #[serde(rename = "mAP_full")]
    pub map_full: f64,
    /// `None` when no class is rare.
    #[serde(rename = "mAP_rare")]
    pub map_rare: Option<f64>,
    #[serde(rename = "mAP_nonrare")]
    pub map_nonrare: Option<f64>,
    pub rare_threshold: usize,
    /// Predictions whose class has no ground truth; all false positives.
    pub unmatched_class_predictions: usize,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = String::from("action  object  n_gt  n_pred  rare      AP\n");
        for c in &self.classes {
            out.push_str(&format!(
                "{:>6}  {:>6}  {:>4}  {:>6}  {:>4}  {:.4}\n",
                c.action,
                c.object_class,
                c.num_gt,
                c.num_predictions,
                if c.rare { "yes" } else { "no" },
                c.ap
            ));
        }
        let fmt = |m: Option<f64>| m.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "mAP full {:.4}  rare {}  non-rare {}\n",
            self.map_full,
            fmt(self.map_rare),
            fmt(self.map_nonrare)
        ));
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn evaluate(preds: &[PredictionRecord], gt: &GroundTruth, opts: &EvalOptions) -> Result<EvalReport> {
    gt.validate()?;
    if let Some(p) = preds.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::Argument(format!("non-finite prediction score in image {}", p.image_id)));
    }
    let counts: BTreeMap<(usize, usize), usize> = gt
        .class_counts()
        .into_iter()
        .filter(|(c, _)| opts.classes.as_ref().is_none_or(|s| s.contains(c)))
        .collect();

    let mut by_class: BTreeMap<(usize, usize), Vec<&PredictionRecord>> = BTreeMap::new();
    let mut unmatched = 0;
    for p in preds {
        let class = (p.action, p.object_class);
        if counts.contains_key(&class) {
            by_class.entry(class).or_default().push(p);
        } else if opts.classes.as_ref().is_none_or(|s| s.contains(&class)) {
            unmatched += 1;
        }
    }
    if unmatched > 0 {
        warn!("{unmatched} predictions belong to classes without ground truth; counted as false positives");
    }

    let classes: Vec<ClassAp> = counts
        .par_iter()
        .map(|(&(action, object_class), &num_gt)| {
            let mut ranked = by_class.get(&(action, object_class)).cloned().unwrap_or_default();
            ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
            let mut gts: HashMap<&str, Vec<&GtAnnotation>> = HashMap::new();
            for img in &gt.images {
                let hits: Vec<_> = img
                    .annotations
                    .iter()
                    .filter(|a| a.action == action && a.object_class == object_class)
                    .collect();
                if !hits.is_empty() {
                    gts.insert(img.image_id.as_str(), hits);
                }
            }
            let flags = match_ranked(&ranked, &gts);
            ClassAp {
                action,
                object_class,
                num_gt,
                num_predictions: ranked.len(),
                rare: num_gt < opts.rare_threshold,
                ap: average_precision(&flags, num_gt),
            }
        })
        .collect();

    Ok(EvalReport {
        map_full: mean(classes.iter().map(|c| c.ap)).unwrap_or(0.0),
        map_rare: mean(classes.iter().filter(|c| c.rare).map(|c| c.ap)),
        map_nonrare: mean(classes.iter().filter(|c| !c.rare).map(|c| c.ap)),
        classes,
        rare_threshold: opts.rare_threshold,
        unmatched_class_predictions: unmatched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::FactorRecord;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> NormBox {
        NormBox::new(x1, y1, x2, y2).unwrap()
    }

    fn pred(image: &str, hb: NormBox, ob: NormBox, class: usize, action: usize, score: f64) -> PredictionRecord {
        PredictionRecord {
            image_id: image.into(),
            human_box: hb,
            object_box: ob,
            object_class: class,
            action,
            score,
            factors: FactorRecord { s_a: score, r_ho: 1.0, det: 1.0 },
        }
    }

    fn ann(hb: NormBox, ob: NormBox, class: usize, action: usize) -> GtAnnotation {
        GtAnnotation { human_box: hb, object_box: ob, object_class: class, action }
    }

    /// Area under the interpolated PR curve, computed per recall level by
    /// scanning every cutoff.
    fn oracle_ap(flags: &[bool], num_gt: usize) -> f64 {
        let points: Vec<(f64, f64)> = (1..=flags.len())
            .map(|n| {
                let tp = flags[..n].iter().filter(|&&f| f).count();
                (tp as f64 / num_gt as f64, tp as f64 / n as f64)
            })
            .collect();
        let mut ap = 0.0;
        for k in 1..=num_gt {
            let r = k as f64 / num_gt as f64;
            let best = points
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            ap += best / num_gt as f64;
        }
        ap
    }

    #[test]
    fn match_rules() {
        let hb = b(0.0, 0.0, 0.5, 0.5);
        let ob = b(0.5, 0.5, 1.0, 1.0);
        let g = ann(hb, ob, 1, 2);
        assert!(match_pair(&pred("a", hb, ob, 1, 2, 0.9), &g));
        assert!(!match_pair(&pred("a", b(0.6, 0.0, 1.0, 0.4), ob, 1, 2, 0.9), &g));
        assert!(!match_pair(&pred("a", hb, ob, 1, 0, 0.9), &g));
        // Half-width box inside the GT box: IoU exactly 0.5.
        let half = b(0.0, 0.0, 0.25, 0.5);
        assert_eq!(half.iou(&hb), 0.5);
        assert!(match_pair(&pred("a", half, ob, 1, 2, 0.9), &g));
    }

    #[test]
    fn ap_reference_cases() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[], 3), 0.0);
        assert_eq!(average_precision(&[false, false], 2), 0.0);
    }

    #[test]
    fn ap_equals_oracle_on_all_small_instances() {
        for n in 0..=6usize {
            for bits in 0..(1u32 << n) {
                let flags: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
                let tp = flags.iter().filter(|&&f| f).count();
                for num_gt in tp.max(1)..=tp + 2 {
                    let ap = average_precision(&flags, num_gt);
                    assert!((ap - oracle_ap(&flags, num_gt)).abs() < 1e-12, "{flags:?} {num_gt}");
                }
            }
        }
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gt = GroundTruth {
            images: vec![
                GtImage { image_id: "a".into(), annotations: vec![ann(b(0.0, 0.0, 0.5, 0.5), b(0.5, 0.5, 1.0, 1.0), 1, 0)] },
                GtImage { image_id: "b".into(), annotations: vec![ann(b(0.1, 0.1, 0.4, 0.9), b(0.5, 0.0, 0.9, 0.3), 2, 1)] },
            ],
        };
        let preds: Vec<_> = gt
            .images
            .iter()
            .flat_map(|i| i.annotations.iter().map(|a| pred(&i.image_id, a.human_box, a.object_box, a.object_class, a.action, 1.0)))
            .collect();
        let r = evaluate(&preds, &gt, &EvalOptions::default()).unwrap();
        assert_eq!(r.map_full, 1.0);
        assert_eq!(r.map_rare, Some(1.0));
        assert_eq!(r.map_nonrare, None);
        let r = evaluate(&[], &gt, &EvalOptions::default()).unwrap();
        assert!(r.classes.iter().all(|c| c.ap == 0.0));
        assert_eq!(r.map_full, 0.0);
    }

    #[test]
    fn duplicates_match_once_and_unknown_classes_are_counted() {
        let hb = b(0.0, 0.0, 0.5, 0.5);
        let ob = b(0.5, 0.5, 1.0, 1.0);
        let gt = GroundTruth { images: vec![GtImage { image_id: "a".into(), annotations: vec![ann(hb, ob, 1, 0)] }] };
        let preds = vec![pred("a", hb, ob, 1, 0, 0.9), pred("a", hb, ob, 1, 0, 0.8), pred("a", hb, ob, 9, 9, 0.95)];
        let r = evaluate(&preds, &gt, &EvalOptions::default()).unwrap();
        assert_eq!(r.classes[0].ap, 1.0);
        assert_eq!(r.unmatched_class_predictions, 1);
        let preds = vec![pred("a", hb, ob, 1, 0, 0.7), pred("a", hb, ob, 1, 0, 0.9)];
        let gts: HashMap<&str, Vec<&GtAnnotation>> = [("a", gt.images[0].annotations.iter().collect())].into();
        let ranked: Vec<_> = [&preds[1], &preds[0]].into();
        assert_eq!(match_ranked(&ranked, &gts), vec![true, false]);
    }

    #[test]
    fn tie_prefers_highest_overlap() {
        let hb = b(0.0, 0.0, 0.5, 0.5);
        let g_far = ann(b(0.0, 0.0, 0.4, 0.5), b(0.5, 0.5, 1.0, 1.0), 1, 0);
        let g_near = ann(hb, b(0.5, 0.5, 1.0, 1.0), 1, 0);
        let p = pred("a", hb, b(0.5, 0.5, 1.0, 1.0), 1, 0, 0.9);
        let gts: HashMap<&str, Vec<&GtAnnotation>> = [("a", vec![&g_far, &g_near])].into();
        let p2 = pred("a", b(0.0, 0.0, 0.4, 0.5), b(0.5, 0.5, 1.0, 1.0), 1, 0, 0.8);
        // Greedy gives the exact match to the first prediction, leaving the
        // other GT for the second.
        assert_eq!(match_ranked(&[&p, &p2], &gts), vec![true, true]);
    }

    #[test]
    fn three_class_hand_computed_map() {
        let hb = b(0.0, 0.0, 0.5, 1.0);
        let o1 = b(0.5, 0.0, 1.0, 0.5);
        let o2 = b(0.5, 0.5, 1.0, 1.0);
        let miss = b(0.6, 0.6, 0.7, 0.7);
        let gt = GroundTruth {
            images: vec![
                GtImage { image_id: "x".into(), annotations: vec![ann(hb, o1, 1, 0), ann(hb, o2, 2, 1)] },
                GtImage { image_id: "y".into(), annotations: vec![ann(hb, o1, 1, 0), ann(hb, o2, 3, 2)] },
            ],
        };
        let preds = vec![
            // class (0, 1): hit, miss, hit -> precision 1 at r=0.5, 2/3 at r=1
            pred("x", hb, o1, 1, 0, 0.9),
            pred("y", hb, miss, 1, 0, 0.8),
            pred("y", hb, o1, 1, 0, 0.7),
            // class (1, 2): miss then hit -> 0.5
            pred("y", hb, o2, 2, 1, 0.6),
            pred("x", hb, o2, 2, 1, 0.5),
            // class (2, 3): no prediction -> 0
        ];
        let r = evaluate(&preds, &gt, &EvalOptions::default()).unwrap();
        let aps: Vec<f64> = r.classes.iter().map(|c| c.ap).collect();
        let first = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
        assert_eq!(aps, vec![first, 0.5, 0.0]);
        assert_eq!(r.map_full, (first + 0.5 + 0.0) / 3.0);
        assert!((r.map_full - 4.0 / 9.0).abs() < 1e-15);
        let subset = EvalOptions { classes: Some([(1, 2)].into()), ..Default::default() };
        assert_eq!(evaluate(&preds, &gt, &subset).unwrap().map_full, 0.5);
    }

    #[test]
    fn rare_split_uses_threshold() {
        let hb = b(0.0, 0.0, 0.5, 1.0);
        let ob = b(0.5, 0.0, 1.0, 1.0);
        let images = (0..3)
            .map(|i| GtImage {
                image_id: i.to_string(),
                annotations: if i == 0 { vec![ann(hb, ob, 1, 0), ann(hb, ob, 2, 0)] } else { vec![ann(hb, ob, 1, 0)] },
            })
            .collect();
        let gt = GroundTruth { images };
        let r = evaluate(&[], &gt, &EvalOptions { rare_threshold: 2, classes: None }).unwrap();
        let rare: Vec<bool> = r.classes.iter().map(|c| c.rare).collect();
        assert_eq!(rare, vec![false, true]);
        assert!(r.table().contains("mAP full"));
    }

    #[test]
    fn gt_file_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.json");
        let gt = GroundTruth { images: vec![GtImage { image_id: "a".into(), annotations: vec![ann(b(0.0, 0.0, 1.0, 1.0), b(0.0, 0.0, 1.0, 1.0), 0, 0)] }] };
        gt.save(&path).unwrap();
        assert_eq!(GroundTruth::load(&path).unwrap(), gt);
        let dup = GroundTruth { images: vec![gt.images[0].clone(), gt.images[0].clone()] };
        assert!(dup.validate().is_err());
    }

    proptest! {
        #[test]
        fn ap_is_rank_only(scores in prop::collection::vec(0.01f64..1.0, 1..8), hits in prop::collection::vec(any::<bool>(), 8)) {
            let hb = b(0.0, 0.0, 0.5, 1.0);
            let good = b(0.5, 0.0, 1.0, 1.0);
            let bad = b(0.9, 0.9, 1.0, 1.0);
            let n = scores.len();
            let gt = GroundTruth { images: (0..n).map(|i| GtImage { image_id: i.to_string(), annotations: vec![ann(hb, good, 1, 0)] }).collect() };
            let mk = |f: &dyn Fn(f64) -> f64| -> Vec<PredictionRecord> {
                (0..n).map(|i| pred(&i.to_string(), hb, if hits[i] { good } else { bad }, 1, 0, f(scores[i]))).collect()
            };
            let a = evaluate(&mk(&|s| s), &gt, &EvalOptions::default()).unwrap();
            let c = evaluate(&mk(&|s| (3.0 * s).exp() - 0.5), &gt, &EvalOptions::default()).unwrap();
            prop_assert!((a.map_full - c.map_full).abs() < 1e-12);
            prop_assert!(a.map_full >= 0.0 && a.map_full <= 1.0);
        }
    }
}
