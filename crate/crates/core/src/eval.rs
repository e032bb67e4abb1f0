//! Inference, accuracy metrics, confusable-sign partitioning and reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tensornet::Precision;

use crate::error::{Error, Result};
use crate::glosslex::GlossLexicon;
use crate::heatmap::HeatmapConfig;
use crate::model::{ClipBatch, Model};
use crate::synthdata::{
    extract_clips, temporal_crop, three_crop_windows, ClassInfo, CropMode, CropRect, RawSample,
    TemporalWindow, VisignCategory,
};

/// Indices of the `k` largest entries, ties broken by lower index.
pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_preds(preds: &[Vec<f64>], labels: &[usize], k: usize) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Data("no predictions".into()));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    for (p, &l) in preds.iter().zip(labels) {
        if l >= p.len() {
            return Err(Error::Data(format!(
                "label {l} out of range for {} classes",
                p.len()
            )));
        }
    }
    Ok(())
}

/// Fraction of samples whose label is among the top `k` predictions.
pub fn per_instance_accuracy(preds: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    check_preds(preds, labels, k)?;
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| top_k(p, k).contains(l))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean over classes present in `labels` of their top-`k` accuracy.
pub fn per_class_accuracy(preds: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    check_preds(preds, labels, k)?;
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, &l) in preds.iter().zip(labels) {
        let e = per.entry(l).or_default();
        e.1 += 1;
        if top_k(p, k).contains(&l) {
            e.0 += 1;
        }
    }
    let sum: f64 = per.values().map(|&(h, n)| h as f64 / n as f64).sum();
    Ok(sum / per.len() as f64)
}

/// `counts[true][predicted]` for top-1 predictions.
pub fn confusion_matrix(
    preds: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (p, &l) in preds.iter().zip(labels) {
        m[l][top_k(p, 1)[0]] += 1;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Crops {
    /// Centered window.
    One,
    /// Mean over start, middle and end windows.
    Three,
}

impl Crops {
    pub fn count(self) -> usize {
        match self {
            Crops::One => 1,
            Crops::Three => 3,
        }
    }

    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            1 => Ok(Crops::One),
            3 => Ok(Crops::Three),
            _ => Err(Error::Config(format!("crop count must be 1 or 3, got {n}"))),
        }
    }
}

/// Inference settings that are not part of the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceSetup {
    pub heatmap: HeatmapConfig,
    pub long_len: usize,
    pub precision: Precision,
    pub batch_size: usize,
}

fn windows(sample: &RawSample, long_len: usize, crops: Crops) -> Result<Vec<TemporalWindow>> {
    match crops {
        Crops::One => {
            // Eval-mode crops ignore the generator.
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            Ok(vec![temporal_crop(
                sample.raw_len(),
                long_len,
                CropMode::Eval,
                &mut rng,
            )?])
        }
        Crops::Three => Ok(three_crop_windows(sample.raw_len(), long_len)?.to_vec()),
    }
}

/// Class probabilities for one sample.
pub fn predict(
    model: &Model,
    sample: &RawSample,
    crops: Crops,
    setup: &InferenceSetup,
) -> Result<Vec<f64>> {
    Ok(predict_many(model, std::slice::from_ref(sample), crops, setup)?.remove(0))
}

/// Class probabilities for every sample, averaging the softmax outputs of
/// the sample's temporal crops with equal weights.
pub fn predict_many(
    model: &Model,
    samples: &[RawSample],
    crops: Crops,
    setup: &InferenceSetup,
) -> Result<Vec<Vec<f64>>> {
    let mut jobs = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for w in windows(s, setup.long_len, crops)? {
            jobs.push((i, w));
        }
    }
    let mut out = vec![vec![0.0; model.config().num_classes]; samples.len()];
    let per = crops.count() as f64;
    for chunk in jobs.chunks(setup.batch_size.max(1)) {
        let clips = chunk
            .iter()
            .map(|(i, w)| extract_clips(&samples[*i], w, &setup.heatmap, &CropRect::FULL))
            .collect::<Result<Vec<_>>>()?;
        let probs = model.predict(&ClipBatch::from_clips(&clips)?, setup.precision)?;
        for ((i, _), p) in chunk.iter().zip(probs) {
            for (acc, x) in out[*i].iter_mut().zip(p) {
                *acc += x / per;
            }
        }
    }
    Ok(out)
}

/// The two highest-probability classes of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopTwo {
    pub first: usize,
    pub p1: f64,
    pub second: usize,
    pub p2: f64,
}

impl TopTwo {
    pub fn of(probs: &[f64]) -> Self {
        let t = top_k(probs, 2);
        let second = t.get(1).copied().unwrap_or(t[0]);
        Self {
            first: t[0],
            p1: probs[t[0]],
            second,
            p2: probs[second],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionThresholds {
    /// Maximum top-1/top-2 probability gap for a confusable instance.
    pub delta: f64,
    /// Minimum gloss similarity for the similar-meaning subset.
    pub similarity: f64,
}

impl Default for PartitionThresholds {
    fn default() -> Self {
        Self {
            delta: 0.1,
            similarity: 0.5,
        }
    }
}

/// Assigns each prediction to the similar-meaning, distinct-meaning or
/// non-confusable subset from its top-2 gap and the similarity of its two
/// top glosses.
pub fn visign_partition(
    preds: &[TopTwo],
    similarity: impl Fn(usize, usize) -> f64,
    thresholds: PartitionThresholds,
) -> Vec<VisignCategory> {
    preds
        .iter()
        .map(|t| {
            if t.p1 - t.p2 > thresholds.delta {
                VisignCategory::None
            } else if similarity(t.first, t.second) >= thresholds.similarity {
                VisignCategory::Similar
            } else {
                VisignCategory::Distinct
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub instances: usize,
    pub top1: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub similar: SubsetStats,
    pub distinct: SubsetStats,
    pub none: SubsetStats,
}

impl PartitionStats {
    pub fn compute(categories: &[VisignCategory], correct: &[bool]) -> Self {
        let subset = |c: VisignCategory| {
            let hits: Vec<bool> = categories
                .iter()
                .zip(correct)
                .filter(|(k, _)| **k == c)
                .map(|(_, &h)| h)
                .collect();
            SubsetStats {
                instances: hits.len(),
                top1: (!hits.is_empty())
                    .then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64),
            }
        };
        Self {
            similar: subset(VisignCategory::Similar),
            distinct: subset(VisignCategory::Distinct),
            none: subset(VisignCategory::None),
        }
    }

    pub fn get(&self, c: VisignCategory) -> &SubsetStats {
        match c {
            VisignCategory::Similar => &self.similar,
            VisignCategory::Distinct => &self.distinct,
            VisignCategory::None => &self.none,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub label: usize,
    pub probs: Vec<f64>,
    pub top2: TopTwo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub crops: usize,
    pub glosses: Vec<String>,
    pub per_instance_topk: BTreeMap<usize, f64>,
    pub per_class_topk: BTreeMap<usize, f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub thresholds: PartitionThresholds,
    /// Subsets from this report's own top-2 predictions.
    pub predicted_partition: PartitionStats,
    /// Subsets from the dataset's constructed class categories.
    pub constructed_partition: PartitionStats,
    pub instances: Vec<InstanceRecord>,
}

pub const REPORT_TOPK: [usize; 2] = [1, 5];

/// Scores `preds` against `samples`.
pub fn build_report(
    preds: Vec<Vec<f64>>,
    samples: &[RawSample],
    classes: &[ClassInfo],
    lexicon: &GlossLexicon,
    crops: Crops,
    thresholds: PartitionThresholds,
) -> Result<EvalReport> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let n = lexicon.len();
    let mut per_instance_topk = BTreeMap::new();
    let mut per_class_topk = BTreeMap::new();
    for k in REPORT_TOPK.into_iter().filter(|&k| k <= n) {
        per_instance_topk.insert(k, per_instance_accuracy(&preds, &labels, k)?);
        per_class_topk.insert(k, per_class_accuracy(&preds, &labels, k)?);
    }
    let tops: Vec<TopTwo> = preds.iter().map(|p| TopTwo::of(p)).collect();
    let correct: Vec<bool> = tops
        .iter()
        .zip(&labels)
        .map(|(t, &l)| t.first == l)
        .collect();
    let predicted = visign_partition(&tops, |a, b| lexicon.similarity(a, b), thresholds);
    let constructed: Vec<VisignCategory> = labels.iter().map(|&l| classes[l].category).collect();
    Ok(EvalReport {
        crops: crops.count(),
        glosses: lexicon.glosses().to_vec(),
        per_instance_topk,
        per_class_topk,
        confusion: confusion_matrix(&preds, &labels, n),
        thresholds,
        predicted_partition: PartitionStats::compute(&predicted, &correct),
        constructed_partition: PartitionStats::compute(&constructed, &correct),
        instances: samples
            .iter()
            .zip(preds)
            .zip(tops)
            .map(|((s, probs), top2)| InstanceRecord {
                id: s.id.clone(),
                label: s.label,
                probs,
                top2,
            })
            .collect(),
    })
}

/// Per-instance assignment produced from a baseline report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionEntry {
    pub id: String,
    pub label: usize,
    pub category: VisignCategory,
    pub top2: TopTwo,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub thresholds: PartitionThresholds,
    pub counts: BTreeMap<String, usize>,
    pub entries: Vec<PartitionEntry>,
}

/// Partitions the instances of a baseline report. Glosses are resolved by
/// name against `lexicon`.
pub fn partition_report(
    baseline: &EvalReport,
    lexicon: &GlossLexicon,
    thresholds: PartitionThresholds,
) -> Result<PartitionReport> {
    let index: Vec<usize> = baseline
        .glosses
        .iter()
        .map(|g| lexicon.index_of(g))
        .collect::<Result<_>>()?;
    let sim = |a: usize, b: usize| lexicon.similarity(index[a], index[b]);
    let tops: Vec<TopTwo> = baseline.instances.iter().map(|i| i.top2).collect();
    let cats = visign_partition(&tops, sim, thresholds);
    let mut counts = BTreeMap::new();
    for c in ["similar", "distinct", "none"] {
        counts.insert(c.to_string(), 0);
    }
    let entries = baseline
        .instances
        .iter()
        .zip(cats)
        .map(|(i, category)| {
            let key = serde_json::to_value(category)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            *counts.entry(key).or_insert(0) += 1;
            PartitionEntry {
                id: i.id.clone(),
                label: i.label,
                category,
                top2: i.top2,
                similarity: sim(i.top2.first, i.top2.second),
            }
        })
        .collect();
    Ok(PartitionReport {
        thresholds,
        counts,
        entries,
    })
}
