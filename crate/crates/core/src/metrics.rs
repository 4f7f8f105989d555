//! Per-target error rates, equality-difference fairness, and classification metrics.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::PostRecord;
use crate::error::{Error, Result};
use crate::heads::decide;

/// A scored record. `label` is the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    fn record(&mut self, label: u8, predicted: u8) {
        match (label, predicted) {
            (1, 1) => self.tp += 1,
            (0, 1) => self.fp += 1,
            (0, _) => self.tn += 1,
            _ => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn fpr(&self) -> Option<f64> {
        let neg = self.fp + self.tn;
        (neg > 0).then(|| self.fp as f64 / neg as f64)
    }

    pub fn fnr(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        (pos > 0).then(|| self.fn_ as f64 / pos as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionByTarget {
    pub global: Counts,
    pub per_target: BTreeMap<String, Counts>,
}

/// Tallies hard decisions globally and once for every target a post mentions.
pub fn confusion_per_target(
    predictions: &[Prediction],
    records: &[PostRecord],
    threshold: f64,
) -> Result<ConfusionByTarget> {
    let by_id: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut global = Counts::default();
    let mut per_target: BTreeMap<String, Counts> = BTreeMap::new();
    for r in records {
        let p = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::Data(format!("no prediction for record `{}`", r.id)))?;
        let decision = decide(p.score, threshold);
        global.record(r.label, decision);
        for t in &r.targets {
            per_target.entry(t.clone()).or_default().record(r.label, decision);
        }
    }
    Ok(ConfusionByTarget { global, per_target })
}

/// Normalized equality differences and the targets left out of each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualityDifferences {
    pub nfped: f64,
    pub nfned: f64,
    /// Targets with no negative posts; their FPR is undefined.
    pub fpr_excluded: Vec<String>,
    /// Targets with no positive posts; their FNR is undefined.
    pub fnr_excluded: Vec<String>,
}

fn mean_deviation<'a>(
    overall: Option<f64>,
    rates: impl Iterator<Item = (&'a String, Option<f64>)>,
    excluded: &mut Vec<String>,
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (name, rate) in rates {
        match (overall, rate) {
            (Some(o), Some(r)) => {
                sum += (o - r).abs();
                n += 1;
            }
            _ => excluded.push(name.clone()),
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `(1/|T|)·Σ_t |FPR − FPR(t)|` and the FNR analogue; undefined rates are skipped.
pub fn equality_differences(c: &ConfusionByTarget) -> EqualityDifferences {
    let mut fpr_excluded = Vec::new();
    let mut fnr_excluded = Vec::new();
    let nfped = mean_deviation(
        c.global.fpr(),
        c.per_target.iter().map(|(t, k)| (t, k.fpr())),
        &mut fpr_excluded,
    );
    let nfned = mean_deviation(
        c.global.fnr(),
        c.per_target.iter().map(|(t, k)| (t, k.fnr())),
        &mut fnr_excluded,
    );
    EqualityDifferences {
        nfped,
        nfned,
        fpr_excluded,
        fnr_excluded,
    }
}

/// Harmonic mean of the two equality differences; zero when both are zero.
pub fn harmonic_fairness(nfped: f64, nfned: f64) -> f64 {
    let s = nfped + nfned;
    if s == 0.0 {
        0.0
    } else {
        2.0 * nfped * nfned / s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
}

/// Area under the ROC curve via the rank statistic, ties sharing their mean rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie block i..=j shares their mean.
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

pub fn classification_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ClassificationMetrics> {
    if scores.is_empty() {
        return Err(Error::Data("classification metrics on an empty set".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let mut c = Counts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        c.record(l, decide(s, threshold));
    }
    let accuracy = (c.tp + c.tn) as f64 / c.total() as f64;
    let denom = 2 * c.tp + c.fp + c.fn_;
    let f1 = if denom == 0 { 0.0 } else { 2.0 * c.tp as f64 / denom as f64 };
    Ok(ClassificationMetrics {
        accuracy,
        f1,
        auc: auc(scores, labels),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub split: String,
    pub threshold: f64,
    pub seed: u64,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRates {
    pub target: String,
    pub posts: usize,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    /// `|FPR − FPR(t)|`, absent when either rate is undefined.
    pub fpr_deviation: Option<f64>,
    pub fnr_deviation: Option<f64>,
}

/// A record left out of evaluation, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub evaluated: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub nfped: f64,
    pub nfned: f64,
    pub hf: f64,
    pub overall_fpr: Option<f64>,
    pub overall_fnr: Option<f64>,
    pub per_target: Vec<TargetRates>,
    pub flags: Vec<String>,
    pub excluded: Vec<ExcludedRecord>,
}

impl EvalReport {
    pub fn warnings(&self) -> usize {
        self.excluded.len()
    }
}

/// Assembles every metric for the records that carry a prediction.
pub fn build_report(
    predictions: &[Prediction],
    records: &[PostRecord],
    excluded: Vec<ExcludedRecord>,
    metadata: ReportMetadata,
) -> Result<EvalReport> {
    let by_id: HashMap<&str, &PostRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut scored = Vec::with_capacity(predictions.len());
    for p in predictions {
        let r = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::Data(format!("prediction for unknown record `{}`", p.id)))?;
        if r.label != p.label {
            return Err(Error::Data(format!("label of `{}` disagrees with the corpus", p.id)));
        }
        scored.push((*r).clone());
    }
    let threshold = metadata.threshold;
    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    let labels: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    let cls = classification_metrics(&scores, &labels, threshold)?;
    let confusion = confusion_per_target(predictions, &scored, threshold)?;
    let eq = equality_differences(&confusion);
    let hf = harmonic_fairness(eq.nfped, eq.nfned);

    let overall_fpr = confusion.global.fpr();
    let overall_fnr = confusion.global.fnr();
    let dev = |o: Option<f64>, r: Option<f64>| o.zip(r).map(|(o, r)| (o - r).abs());
    let per_target = confusion
        .per_target
        .iter()
        .map(|(t, c)| TargetRates {
            target: t.clone(),
            posts: c.total(),
            fpr: c.fpr(),
            fnr: c.fnr(),
            fpr_deviation: dev(overall_fpr, c.fpr()),
            fnr_deviation: dev(overall_fnr, c.fnr()),
        })
        .collect();

    let mut flags = Vec::new();
    for t in &eq.fpr_excluded {
        flags.push(format!("target `{t}` has no negative posts; excluded from nFPED"));
    }
    for t in &eq.fnr_excluded {
        flags.push(format!("target `{t}` has no positive posts; excluded from nFNED"));
    }
    if eq.nfped == 0.0 && eq.nfned == 0.0 {
        flags.push("nFPED and nFNED are both zero; HF set to 0".into());
    }
    if cls.auc.is_none() {
        flags.push("single-class labels; AUC undefined".into());
    }
    if !excluded.is_empty() {
        flags.push(format!("{} record(s) excluded from evaluation", excluded.len()));
    }
    Ok(EvalReport {
        metadata,
        evaluated: predictions.len(),
        accuracy: cls.accuracy,
        f1: cls.f1,
        auc: cls.auc,
        nfped: eq.nfped,
        nfned: eq.nfned,
        hf,
        overall_fpr,
        overall_fnr,
        per_target,
        flags,
        excluded,
    })
}
