//! Semantic and instance segmentation metrics.
//!
//! Semantic scores come from a confusion matrix accumulated over all scenes.
//! Instance scores are computed per semantic class: precision and recall from
//! one-to-one greedy matching at an IoU threshold, coverage from the best
//! predicted IoU of each ground-truth instance.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::cluster::majority_label;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    /// `counts[gt * classes + pred]`
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Contract(format!(
                "{} predicted labels against {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c >= self.classes) {
            return Err(Error::Contract(format!(
                "semantic label {bad} out of range for {} classes",
                self.classes
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> SemanticReport {
        let c = self.classes;
        let mut iou = vec![None; c];
        let mut acc = vec![None; c];
        let mut correct = 0u64;
        let mut total = 0u64;
        for k in 0..c {
            let tp = self.count(k, k);
            let gt_k: u64 = (0..c).map(|p| self.count(k, p)).sum();
            let pred_k: u64 = (0..c).map(|g| self.count(g, k)).sum();
            correct += tp;
            total += gt_k;
            let union = gt_k + pred_k - tp;
            if union > 0 {
                iou[k] = Some(tp as f64 / union as f64);
            }
            if gt_k > 0 {
                acc[k] = Some(tp as f64 / gt_k as f64);
            }
        }
        SemanticReport {
            miou: mean_present(&iou),
            macc: mean_present(&acc),
            oacc: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            iou,
            acc,
        }
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Per-class entries are `None` for classes that do not take part in the
/// corresponding mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticReport {
    pub iou: Vec<Option<f64>>,
    pub acc: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
    pub oacc: f64,
}

pub fn semantic_metrics(pred: &[usize], gt: &[usize], classes: usize) -> Result<SemanticReport> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt)?;
    Ok(cm.report())
}

pub fn instance_sem_label(ins: &[usize], sem: &[usize]) -> Vec<usize> {
    InstanceSet::new(ins, sem).map(|s| s.classes).unwrap_or_default()
}

/// A partition of a scene's points into instances, each with one class.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSet {
    /// Dense instance index per point, in order of sorted original id.
    pub point_instance: Vec<usize>,
    pub sizes: Vec<usize>,
    pub classes: Vec<usize>,
}

impl InstanceSet {
    /// Instance classes are the majority semantic label of their points.
    pub fn new(ins: &[usize], sem: &[usize]) -> Result<Self> {
        if ins.len() != sem.len() {
            return Err(Error::Contract(format!(
                "{} instance labels against {} semantic labels",
                ins.len(),
                sem.len()
            )));
        }
        let (point_instance, count) = crate::losses::dense_ids(ins);
        let mut sizes = vec![0; count];
        point_instance.iter().for_each(|&i| sizes[i] += 1);
        let classes = majority_label(&point_instance, sem, count);
        Ok(InstanceSet {
            point_instance,
            sizes,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.point_instance.len()
    }
}

/// Pairwise IoU between predicted and ground-truth instances with a
/// non-empty intersection, keyed by `(pred, gt)`.
pub fn pair_ious(pred: &InstanceSet, gt: &InstanceSet) -> Result<BTreeMap<(usize, usize), f64>> {
    if pred.num_points() != gt.num_points() {
        return Err(Error::Contract(format!(
            "prediction covers {} points, ground truth {}",
            pred.num_points(),
            gt.num_points()
        )));
    }
    let mut inter: HashMap<(usize, usize), usize> = HashMap::new();
    for (&p, &g) in pred.point_instance.iter().zip(&gt.point_instance) {
        *inter.entry((p, g)).or_default() += 1;
    }
    Ok(inter
        .into_iter()
        .map(|((p, g), n)| {
            let union = pred.sizes[p] + gt.sizes[g] - n;
            ((p, g), n as f64 / union as f64)
        })
        .collect())
}

/// Coverage of one class in one scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassCoverage {
    pub cov: f64,
    pub wcov: f64,
}

/// Coverage per class present in the ground truth. Predicted instances only
/// count for the class they were assigned.
pub fn coverage(pred: &InstanceSet, gt: &InstanceSet) -> Result<BTreeMap<usize, ClassCoverage>> {
    if gt.is_empty() {
        return Err(Error::Contract("coverage against an empty ground truth".into()));
    }
    let ious = pair_ious(pred, gt)?;
    let mut best = vec![0.0f64; gt.len()];
    for (&(p, g), &v) in &ious {
        if pred.classes[p] == gt.classes[g] {
            best[g] = best[g].max(v);
        }
    }
    let mut out = BTreeMap::new();
    let mut classes: Vec<usize> = gt.classes.clone();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let members: Vec<usize> = (0..gt.len()).filter(|&g| gt.classes[g] == c).collect();
        let total: usize = members.iter().map(|&g| gt.sizes[g]).sum();
        let cov = members.iter().map(|&g| best[g]).sum::<f64>() / members.len() as f64;
        let wcov = members
            .iter()
            .map(|&g| best[g] * gt.sizes[g] as f64 / total as f64)
            .sum();
        out.insert(c, ClassCoverage { cov, wcov });
    }
    Ok(out)
}

/// Matching counts of one class in one scene.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub pred: usize,
    pub gt: usize,
}

fn check_thresh(thresh: f64) -> Result<()> {
    if thresh > 0.0 && thresh <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("IoU threshold must lie in (0, 1], got {thresh}")))
    }
}

/// One-to-one greedy matching by descending IoU within each class; a pair
/// matches when its IoU is at least `thresh`. Equal IoUs are taken in
/// `(pred, gt)` order.
pub fn match_counts(
    pred: &InstanceSet,
    gt: &InstanceSet,
    thresh: f64,
) -> Result<BTreeMap<usize, MatchCounts>> {
    check_thresh(thresh)?;
    let ious = pair_ious(pred, gt)?;
    let mut out: BTreeMap<usize, MatchCounts> = BTreeMap::new();
    for &c in pred.classes.iter() {
        out.entry(c).or_default().pred += 1;
    }
    for &c in gt.classes.iter() {
        out.entry(c).or_default().gt += 1;
    }
    let mut cands: Vec<(f64, usize, usize)> = ious
        .iter()
        .filter(|(&(p, g), &v)| pred.classes[p] == gt.classes[g] && v >= thresh)
        .map(|(&(p, g), &v)| (v, p, g))
        .collect();
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    for (_, p, g) in cands {
        if !pred_used[p] && !gt_used[g] {
            pred_used[p] = true;
            gt_used[g] = true;
            out.get_mut(&pred.classes[p]).unwrap().tp += 1;
        }
    }
    Ok(out)
}

/// Mean precision and recall of a single scene.
pub fn precision_recall(pred: &InstanceSet, gt: &InstanceSet, thresh: f64) -> Result<(f64, f64)> {
    let mut acc = InstanceAccumulator::new(thresh)?;
    acc.add_scene(pred, gt)?;
    let r = acc.report();
    Ok((r.mprec, r.mrec))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassInstanceStats {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub cov: f64,
    pub wcov: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceReport {
    /// Classes present in the ground truth of at least one scene.
    pub per_class: Vec<ClassInstanceStats>,
    pub mprec: f64,
    pub mrec: f64,
    pub mcov: f64,
    pub mwcov: f64,
}

/// Accumulates instance statistics over scenes. Match counts are summed per
/// class before dividing; coverage is averaged per class over the scenes
/// whose ground truth contains the class.
#[derive(Clone, Debug)]
pub struct InstanceAccumulator {
    thresh: f64,
    counts: BTreeMap<usize, MatchCounts>,
    cov: BTreeMap<usize, (f64, f64, usize)>,
}

impl InstanceAccumulator {
    pub fn new(thresh: f64) -> Result<Self> {
        check_thresh(thresh)?;
        Ok(InstanceAccumulator {
            thresh,
            counts: BTreeMap::new(),
            cov: BTreeMap::new(),
        })
    }

    pub fn add_scene(&mut self, pred: &InstanceSet, gt: &InstanceSet) -> Result<()> {
        let cov = coverage(pred, gt)?;
        let counts = match_counts(pred, gt, self.thresh)?;
        for (c, m) in counts {
            let e = self.counts.entry(c).or_default();
            e.tp += m.tp;
            e.pred += m.pred;
            e.gt += m.gt;
        }
        for (c, v) in cov {
            let e = self.cov.entry(c).or_insert((0.0, 0.0, 0));
            e.0 += v.cov;
            e.1 += v.wcov;
            e.2 += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> InstanceReport {
        let per_class: Vec<ClassInstanceStats> = self
            .counts
            .iter()
            .filter(|(_, m)| m.gt > 0)
            .map(|(&class, m)| {
                let (cs, ws, n) = self.cov[&class];
                ClassInstanceStats {
                    class,
                    precision: if m.pred == 0 { 0.0 } else { m.tp as f64 / m.pred as f64 },
                    recall: m.tp as f64 / m.gt as f64,
                    cov: cs / n as f64,
                    wcov: ws / n as f64,
                }
            })
            .collect();
        let mean = |f: fn(&ClassInstanceStats) -> f64| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.iter().map(f).sum::<f64>() / per_class.len() as f64
            }
        };
        InstanceReport {
            mprec: mean(|s| s.precision),
            mrec: mean(|s| s.recall),
            mcov: mean(|s| s.cov),
            mwcov: mean(|s| s.wcov),
            per_class,
        }
    }
}

/// `key<TAB>value` lines: the seven headline metrics, then per-class
/// breakdowns named after `class_names` where available.
pub fn report_text(sem: &SemanticReport, ins: &InstanceReport, class_names: &[String]) -> String {
    let name = |c: usize| class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
    let mut s = String::new();
    for (k, v) in [
        ("mIoU", sem.miou),
        ("mAcc", sem.macc),
        ("oAcc", sem.oacc),
        ("mPrec", ins.mprec),
        ("mRec", ins.mrec),
        ("mCov", ins.mcov),
        ("mWCov", ins.mwcov),
    ] {
        let _ = writeln!(s, "{k}\t{v:.6}");
    }
    for (c, v) in sem.iou.iter().enumerate() {
        if let Some(v) = v {
            let _ = writeln!(s, "IoU.{}\t{v:.6}", name(c));
        }
    }
    for (c, v) in sem.acc.iter().enumerate() {
        if let Some(v) = v {
            let _ = writeln!(s, "Acc.{}\t{v:.6}", name(c));
        }
    }
    for st in &ins.per_class {
        let n = name(st.class);
        let _ = writeln!(s, "Prec.{n}\t{:.6}", st.precision);
        let _ = writeln!(s, "Rec.{n}\t{:.6}", st.recall);
        let _ = writeln!(s, "Cov.{n}\t{:.6}", st.cov);
        let _ = writeln!(s, "WCov.{n}\t{:.6}", st.wcov);
    }
    s
}

/// Reads the headline values back from [`report_text`] output.
pub fn parse_report(text: &str) -> BTreeMap<String, f64> {
    text.lines()
        .filter_map(|l| {
            let (k, v) = l.split_once('\t')?;
            Some((k.to_string(), v.trim().parse().ok()?))
        })
        .collect()
}
