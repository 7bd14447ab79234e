//! Detection metrics, ROC export, localization scores and score/mask fusion.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, Plane};
use crate::error::{Error, Result};

/// Mask-to-score pooling percentile.
pub const MASK_POOL_PERCENTILE: f64 = 0.99;
pub const DEFAULT_FUSION_WEIGHT: f32 = 0.5;
pub const DEFAULT_FUSION_ALPHA: f32 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    /// 1 = attack (the positive class), 0 = bonafide.
    pub label: u8,
    pub score: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::format("record", format!("{}: label {} is not 0 or 1", self.id, self.label)));
        }
        if !(self.score.is_finite() && (0.0..=1.0).contains(&self.score)) {
            return Err(Error::format("record", format!("{}: score {} outside [0, 1]", self.id, self.score)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn non_empty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Degenerate("no records".into()));
    }
    Ok(())
}

/// A score at or above `threshold` is predicted as an attack.
pub fn confusion(records: &[EvalRecord], threshold: f32) -> Result<Confusion> {
    non_empty(records)?;
    let mut c = Confusion::default();
    for r in records {
        match (r.label == 1, r.score >= threshold) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1_weighted: f64,
    pub roc_auc: f64,
    pub mcc: f64,
    pub threshold: f32,
    pub confusion: Confusion,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn mcc(c: &Confusion) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if den == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / den.sqrt()
}

/// Support-weighted mean of the per-class F1 scores.
pub fn f1_weighted(c: &Confusion) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let (n_pos, n_neg) = (tp + fn_, tn + fp);
    let pos = ratio(n_pos * 2.0 * tp, 2.0 * tp + fp + fn_);
    let neg = ratio(n_neg * 2.0 * tn, 2.0 * tn + fn_ + fp);
    (pos + neg) / (n_pos + n_neg)
}

fn require_both_classes(records: &[EvalRecord]) -> Result<(usize, usize)> {
    non_empty(records)?;
    let pos = records.iter().filter(|r| r.label == 1).count();
    let neg = records.len() - pos;
    if pos == 0 {
        return Err(Error::Degenerate("no attack (label 1) records; ROC AUC is undefined".into()));
    }
    if neg == 0 {
        return Err(Error::Degenerate("no bonafide (label 0) records; ROC AUC is undefined".into()));
    }
    Ok((pos, neg))
}

pub fn metrics(records: &[EvalRecord], threshold: f32) -> Result<MetricsReport> {
    let c = confusion(records, threshold)?;
    let auc = roc_auc(records)?;
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    Ok(MetricsReport {
        accuracy: (tp + tn) / c.total() as f64,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1_weighted: f1_weighted(&c),
        roc_auc: auc,
        mcc: mcc(&c),
        threshold,
        confusion: c,
    })
}

/// Rank (Mann-Whitney) statistic; tied scores contribute one half.
pub fn roc_auc(records: &[EvalRecord]) -> Result<f64> {
    let (pos, neg) = require_both_classes(records)?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].score.total_cmp(&records[b].score));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && records[order[j + 1]].score == records[order[i]].score {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| records[k].label == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    pub threshold: f32,
    pub fpr: f64,
    pub tpr: f64,
}

/// One point per distinct score (descending), preceded by the origin at an
/// infinite threshold.
pub fn roc_curve(records: &[EvalRecord]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = require_both_classes(records)?;
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut curve = vec![RocPoint {
        threshold: f32::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(curve)
}

/// Trapezoid area under a curve from [`roc_curve`].
pub fn curve_auc(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn roc_csv(curve: &[RocPoint]) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    s
}

/// Pixel F1 and IoU of `pred >= threshold` against `gt >= 0.5`. Two empty
/// masks agree perfectly.
pub fn localization_metrics(pred: &Plane, gt: &Plane, threshold: f32) -> Result<(f64, f64)> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape(
            "localization_metrics",
            &[pred.height, pred.width],
            &[gt.height, gt.width],
        ));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p >= threshold, g >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok((1.0, 1.0));
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    Ok((2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_)))
}

/// Linear-interpolated percentile, `q` in [0, 1].
pub fn percentile(values: &[f32], q: f64) -> f32 {
    assert!(!values.is_empty(), "percentile of an empty slice");
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    (v[lo] as f64 * (1.0 - frac) + v[hi] as f64 * frac) as f32
}

/// A detector's output for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub id: String,
    pub label: u8,
    pub score: f32,
    /// Per-pixel forgery probabilities.
    pub mask: Option<Plane>,
}

impl Detection {
    /// `α·score + (1-α)·q99(mask)` when a mask is present, else the score.
    pub fn composite(&self, alpha: f32) -> f32 {
        match &self.mask {
            Some(m) => {
                let pooled = percentile(&m.data, MASK_POOL_PERCENTILE);
                (alpha as f64 * self.score as f64 + (1.0 - alpha as f64) * pooled as f64) as f32
            }
            None => self.score,
        }
    }
}

fn convex(w: f64, a: f32, b: f32) -> f32 {
    let v = (w * a as f64 + (1.0 - w) * b as f64) as f32;
    v.clamp(a.min(b), a.max(b))
}

pub fn check_same_ids<'a>(a: impl Iterator<Item = &'a str>, b: impl Iterator<Item = &'a str>) -> Result<()> {
    let sa: BTreeSet<&str> = a.collect();
    let sb: BTreeSet<&str> = b.collect();
    let diff: Vec<String> = sa.symmetric_difference(&sb).map(|s| s.to_string()).collect();
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::IdMismatch(diff))
    }
}

/// Weighted fusion of two detectors' composite scores, in `a`'s order.
/// Masks are averaged pixelwise with the same weight when both exist.
pub fn fuse(a: &[Detection], b: &[Detection], w: f32, alpha: f32) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&w) || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("fusion weights must lie in [0, 1], got w={w} alpha={alpha}")));
    }
    check_same_ids(a.iter().map(|d| d.id.as_str()), b.iter().map(|d| d.id.as_str()))?;
    if a.len() != b.len() {
        return Err(Error::Contract("duplicate ids in fusion inputs".into()));
    }
    let by_id: HashMap<&str, &Detection> = b.iter().map(|d| (d.id.as_str(), d)).collect();
    let w64 = w as f64;
    a.iter()
        .map(|da| {
            let db = by_id[da.id.as_str()];
            if da.label != db.label {
                return Err(Error::Contract(format!("{}: labels differ between inputs", da.id)));
            }
            let score = convex(w64, da.composite(alpha), db.composite(alpha));
            let mask = match (&da.mask, &db.mask) {
                (Some(ma), Some(mb)) => {
                    if (ma.height, ma.width) != (mb.height, mb.width) {
                        return Err(Error::shape("fuse", &[ma.height, ma.width], &[mb.height, mb.width]));
                    }
                    let data = ma.data.iter().zip(&mb.data).map(|(&x, &y)| convex(w64, x, y)).collect();
                    Some(Plane::new(ma.height, ma.width, data))
                }
                _ => None,
            };
            Ok(Detection {
                id: da.id.clone(),
                label: da.label,
                score,
                mask,
            })
        })
        .collect()
}

pub fn records_csv(records: &[EvalRecord]) -> Result<String> {
    let with_masks = records.iter().any(|r| r.mask_path.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::format("records csv", e.to_string());
    if with_masks {
        w.write_record(["id", "label", "score", "mask_path"]).map_err(csv_err)?;
    } else {
        w.write_record(["id", "label", "score"]).map_err(csv_err)?;
    }
    for r in records {
        let (label, score) = (r.label.to_string(), r.score.to_string());
        if with_masks {
            let mask = r.mask_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
            w.write_record([r.id.as_str(), &label, &score, &mask]).map_err(csv_err)?;
        } else {
            w.write_record([r.id.as_str(), &label, &score]).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::format("records csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_records(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<()> {
    write_atomic(path.as_ref(), records_csv(records)?.as_bytes())
}

pub fn parse_records(text: &str) -> Result<Vec<EvalRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for row in rdr.deserialize::<EvalRecord>() {
        let mut r = row.map_err(|e| Error::format("records csv", e.to_string()))?;
        if r.mask_path.as_ref().is_some_and(|p| p.as_os_str().is_empty()) {
            r.mask_path = None;
        }
        r.validate()?;
        if !seen.insert(r.id.clone()) {
            return Err(Error::format("records csv", format!("duplicate id {}", r.id)));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(&text)
}

/// Aligned text table with a single result row.
pub fn report_table(name: &str, m: &MetricsReport) -> String {
    let header = ["Method", "Accuracy", "Precision", "Recall", "F1w", "ROC AUC", "MCC"];
    let row = [
        name.to_string(),
        format!("{:.2}", m.accuracy),
        format!("{:.2}", m.precision),
        format!("{:.2}", m.recall),
        format!("{:.2}", m.f1_weighted),
        format!("{:.2}", m.roc_auc),
        format!("{:.2}", m.mcc),
    ];
    let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    format!("{}\n{}\n", line(header.to_vec()), line(row.iter().map(String::as_str).collect()))
}

pub fn report_kv(m: &MetricsReport) -> String {
    let c = &m.confusion;
    format!(
        "accuracy={}\nprecision={}\nrecall={}\nf1_weighted={}\nroc_auc={}\nmcc={}\nthreshold={}\ntp={}\nfp={}\ntn={}\nfn={}\n",
        m.accuracy, m.precision, m.recall, m.f1_weighted, m.roc_auc, m.mcc, m.threshold, c.tp, c.fp, c.tn, c.fn_
    )
}
