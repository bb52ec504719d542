//! Pose and classification evaluation metrics.

use std::fmt::Write as _;

use crate::bvh::resample;
use crate::error::{Error, Result};
use crate::model::{PoseSequence, SkeletonTopology};

pub const DEFAULT_PCK_THRESHOLD_MM: f64 = 150.0;
pub const EVAL_RATE_HZ: f64 = 30.0;

/// Correspondence between predicted and ground-truth joints. Entry 0 is the
/// root used for alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMap {
    pub entries: Vec<JointPair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointPair {
    pub name: String,
    pub pred: usize,
    pub gt: usize,
}

impl JointMap {
    /// `pairs` lists (predicted name, ground-truth name); the first pair is
    /// the alignment root.
    pub fn from_names(pred: &SkeletonTopology, gt: &SkeletonTopology, pairs: &[(&str, &str)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid("joint map is empty"));
        }
        let entries = pairs
            .iter()
            .map(|(p, g)| {
                Ok(JointPair {
                    name: p.to_string(),
                    pred: pred.require(p)?,
                    gt: gt.require(g)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    /// Same-topology map rooted at the topology root.
    pub fn identity(t: &SkeletonTopology) -> Self {
        let root = t.root();
        let order = std::iter::once(root).chain((0..t.joints().len()).filter(|&j| j != root));
        Self {
            entries: order
                .map(|j| JointPair {
                    name: t.joints()[j].clone(),
                    pred: j,
                    gt: j,
                })
                .collect(),
        }
    }
}

/// Pairs every predicted frame with the nearest ground-truth frame, after
/// bringing both streams down to `rate_hz`. Pairs further apart than half a
/// period are dropped.
pub fn align_by_timestamp(pred: &PoseSequence, gt: &PoseSequence, rate_hz: f64) -> Result<(PoseSequence, PoseSequence)> {
    let down = |s: &PoseSequence| -> Result<PoseSequence> {
        if s.rate_hz() > rate_hz + 1e-9 && s.len() >= 2 {
            resample(s, rate_hz)
        } else {
            Ok(s.clone())
        }
    };
    let (pred, gt) = (down(pred)?, down(gt)?);
    let gt_ts: Vec<f64> = gt.frames().iter().map(|f| f.timestamp).collect();
    let half = 0.5 / rate_hz + 1e-9;
    let mut p_out = Vec::new();
    let mut g_out = Vec::new();
    for f in pred.frames() {
        let i = gt_ts.partition_point(|t| *t < f.timestamp);
        let best = [i.checked_sub(1), (i < gt_ts.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|a, b| (gt_ts[*a] - f.timestamp).abs().total_cmp(&(gt_ts[*b] - f.timestamp).abs()));
        if let Some(j) = best {
            if (gt_ts[j] - f.timestamp).abs() <= half {
                p_out.push(f.clone());
                g_out.push(gt.frames()[j].clone());
            }
        }
    }
    if p_out.is_empty() {
        return Err(Error::invalid("no overlapping timestamps between prediction and ground truth"));
    }
    Ok((
        PoseSequence::new(pred.topology_arc(), p_out, pred.rate_hz())?,
        PoseSequence::new(gt.topology_arc(), g_out, pred.rate_hz())?,
    ))
}

/// Root-aligned per-joint, per-frame Euclidean errors in millimeters,
/// indexed `[joint][frame]`. Inputs are in meters and already paired frame
/// by frame.
pub fn joint_errors_mm(pred: &PoseSequence, gt: &PoseSequence, map: &JointMap) -> Result<Vec<Vec<f64>>> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("no frames to evaluate"));
    }
    let root = &map.entries[0];
    let mut out = vec![Vec::with_capacity(pred.len()); map.entries.len()];
    for (p, g) in pred.frames().iter().zip(gt.frames()) {
        let (pr, gr) = (p.positions[root.pred], g.positions[root.gt]);
        for (k, e) in map.entries.iter().enumerate() {
            let d = (p.positions[e.pred] - pr) - (g.positions[e.gt] - gr);
            out[k].push(d.norm() * 1000.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointErrorTable {
    pub joints: Vec<String>,
    pub mpjpe_mm: Vec<f64>,
    pub pck: Vec<f64>,
    pub threshold_mm: f64,
    pub mean_mpjpe_mm: f64,
    pub mean_pck: f64,
}

pub fn mpjpe(errors: &[Vec<f64>]) -> Vec<f64> {
    errors.iter().map(|e| e.iter().sum::<f64>() / e.len() as f64).collect()
}

/// Fraction of joint-frame errors at or below the threshold.
pub fn pck(errors: &[Vec<f64>], threshold_mm: f64) -> Vec<f64> {
    errors
        .iter()
        .map(|e| e.iter().filter(|v| **v <= threshold_mm).count() as f64 / e.len() as f64)
        .collect()
}

impl JointErrorTable {
    /// The root joint is excluded: after alignment its error is zero.
    pub fn evaluate(pred: &PoseSequence, gt: &PoseSequence, map: &JointMap, threshold_mm: f64) -> Result<Self> {
        let errors = joint_errors_mm(pred, gt, map)?;
        let rest = &errors[1..];
        if rest.is_empty() {
            return Err(Error::invalid("joint map holds only the root"));
        }
        let m = mpjpe(rest);
        let p = pck(rest, threshold_mm);
        let n = m.len() as f64;
        Ok(Self {
            joints: map.entries[1..].iter().map(|e| e.name.clone()).collect(),
            mean_mpjpe_mm: m.iter().sum::<f64>() / n,
            mean_pck: p.iter().sum::<f64>() / n,
            mpjpe_mm: m,
            pck: p,
            threshold_mm,
        })
    }

    /// Left/right joints folded into one column each, in first-seen order.
    pub fn symmetric_pairs(&self) -> Vec<(String, f64, f64)> {
        let mut out: Vec<(String, f64, f64, usize)> = Vec::new();
        for (i, name) in self.joints.iter().enumerate() {
            let key = side_free(name);
            match out.iter_mut().find(|r| r.0 == key) {
                Some(r) => {
                    r.1 += self.mpjpe_mm[i];
                    r.2 += self.pck[i];
                    r.3 += 1;
                }
                None => out.push((key, self.mpjpe_mm[i], self.pck[i], 1)),
            }
        }
        out.into_iter().map(|(k, m, p, n)| (k, m / n as f64, p / n as f64)).collect()
    }

    /// Joints as columns, MPJPE and PCK as rows.
    pub fn to_text(&self) -> String {
        let cols = self.symmetric_pairs();
        let mut out = String::from("Metric");
        for (name, _, _) in &cols {
            let _ = write!(out, "\t{name}");
        }
        out.push_str("\tMean\n");
        out.push_str("MPJPE [mm]");
        for (_, m, _) in &cols {
            let _ = write!(out, "\t{m:.1}");
        }
        let _ = writeln!(out, "\t{:.1}", self.mean_mpjpe_mm);
        let _ = write!(out, "PCK@{} [%]", self.threshold_mm);
        for (_, _, p) in &cols {
            let _ = write!(out, "\t{:.1}", p * 100.0);
        }
        let _ = writeln!(out, "\t{:.1}", self.mean_pck * 100.0);
        out
    }
}

fn side_free(name: &str) -> String {
    for prefix in ["l_", "r_", "Left", "Right"] {
        if let Some(rest) = name.strip_prefix(prefix) {
            if !rest.is_empty() {
                return rest.to_string();
            }
        }
    }
    name.to_string()
}

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("true\\pred");
        for n in &self.names {
            let _ = write!(out, "\t{n}");
        }
        out.push('\n');
        for (n, row) in self.names.iter().zip(&self.counts) {
            out.push_str(n);
            for c in row {
                let _ = write!(out, "\t{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// One-vs-rest scores per class plus unweighted means. `mean_precision` is
/// the single-operating-point mAP.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationScores {
    pub accuracy: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub mean_accuracy: f64,
    pub mean_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Fraction of samples predicted correctly.
    pub overall_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn classification_scores(predictions: &[usize], labels: &[usize], names: &[String]) -> Result<ClassificationScores> {
    let k = names.len();
    if predictions.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        for v in [p, l] {
            if v >= k {
                return Err(Error::OutOfRange { index: v, len: k });
            }
        }
        counts[l][p] += 1;
    }
    let n = labels.len() as u64;
    let mut accuracy = Vec::with_capacity(k);
    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    for c in 0..k {
        let tp = counts[c][c];
        let fp: u64 = (0..k).filter(|&r| r != c).map(|r| counts[r][c]).sum();
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| counts[c][p]).sum();
        let tn = n - tp - fp - fn_;
        let (pr, rc) = (ratio(tp, tp + fp), ratio(tp, tp + fn_));
        accuracy.push(ratio(tp + tn, n));
        precision.push(pr);
        recall.push(rc);
        f1.push(if pr + rc > 0.0 { 2.0 * pr * rc / (pr + rc) } else { 0.0 });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / k as f64;
    Ok(ClassificationScores {
        mean_accuracy: mean(&accuracy),
        mean_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        overall_accuracy: ratio((0..k).map(|c| counts[c][c]).sum(), n),
        accuracy,
        precision,
        recall,
        f1,
        confusion: ConfusionMatrix {
            names: names.to_vec(),
            counts,
        },
    })
}

impl ClassificationScores {
    /// Classes as columns, accuracy and precision as rows.
    pub fn to_text(&self) -> String {
        let mut out = String::from("Metric");
        for n in &self.confusion.names {
            let _ = write!(out, "\t{n}");
        }
        out.push_str("\tMean\n");
        for (label, v, m) in [
            ("Accuracy", &self.accuracy, self.mean_accuracy),
            ("Precision", &self.precision, self.mean_precision),
        ] {
            out.push_str(label);
            for x in v.iter() {
                let _ = write!(out, "\t{:.2}", x * 100.0);
            }
            let _ = writeln!(out, "\t{:.2}", m * 100.0);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// (false positive rate, true positive rate), from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Threshold sweep over distinct scores; tied scores move together.
pub fn binary_roc(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(Error::Dimension {
            expected: positive.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite score"));
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("ROC needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocReport {
    /// `None` for classes without both positives and negatives.
    pub per_class: Vec<Option<RocCurve>>,
    pub macro_auc: f64,
}

impl RocReport {
    /// `class,fpr,tpr` rows for plotting.
    pub fn to_text(&self, names: &[String]) -> String {
        let mut out = String::from("class,fpr,tpr\n");
        for (name, c) in names.iter().zip(&self.per_class) {
            if let Some(c) = c {
                for (f, t) in &c.points {
                    let _ = writeln!(out, "{name},{f},{t}");
                }
            }
        }
        let _ = writeln!(out, "# macro_auc,{}", self.macro_auc);
        out
    }
}

/// One-vs-rest ROC per class and the unweighted mean AUC. `scores` is
/// indexed `[sample][class]`.
pub fn roc_auc_macro(scores: &[Vec<f64>], labels: &[usize]) -> Result<RocReport> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    let k = scores.first().map(Vec::len).ok_or_else(|| Error::invalid("no samples to score"))?;
    if let Some(bad) = scores.iter().find(|s| s.len() != k) {
        return Err(Error::Dimension { expected: k, got: bad.len() });
    }
    if let Some(&l) = labels.iter().find(|l| **l >= k) {
        return Err(Error::OutOfRange { index: l, len: k });
    }
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let positive: Vec<bool> = labels.iter().map(|l| *l == c).collect();
        if positive.iter().all(|p| *p) || !positive.iter().any(|p| *p) {
            log::warn!("class {c} lacks positives or negatives; excluded from macro AUC");
            per_class.push(None);
            continue;
        }
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        per_class.push(Some(binary_roc(&col, &positive)?));
    }
    let aucs: Vec<f64> = per_class.iter().flatten().map(|c| c.auc).collect();
    if aucs.is_empty() {
        return Err(Error::invalid("no class has both positives and negatives"));
    }
    Ok(RocReport {
        macro_auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
        per_class,
    })
}
