//! Detection and clustering metrics, embedding export and multi-run
//! statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::world::CellBox;

/// Matching threshold for AP50.
pub const AP_IOU: f64 = 0.5;

/// Intersection over union of two cell boxes.
pub fn iou(a: &CellBox, b: &CellBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(Error::Contract(format!("degenerate box {:?}", bx.rect())));
        }
    }
    Ok(a.iou(b))
}

/// One annotated instance in an evaluation scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene_id: u64,
    pub class_id: usize,
    pub cell_box: CellBox,
}

/// Per-class true/false positive flags in ranked order, plus the number of
/// ground-truth instances.
fn ranked_hits(dets: &[&Detection], gts: &[&GroundTruth]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .total_cmp(&dets[a].confidence)
            .then(dets[a].scene_id.cmp(&dets[b].scene_id))
            .then(a.cmp(&b))
    });
    let mut used = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let d = dets[i];
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, g)| !used[*j] && g.scene_id == d.scene_id)
                .map(|(j, g)| (j, g.cell_box.iou(&d.cell_box)))
                .filter(|(_, v)| *v >= AP_IOU)
                .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                    Some(a) if a.1 >= x.1 => Some(a),
                    _ => Some(x),
                });
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP of a ranked hit list against `n_gt` instances.
///
/// Each true positive raises recall by `1/n_gt`; its contribution is the
/// highest precision reached at that recall or beyond.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let precision: Vec<f64> = hits
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            tp += usize::from(h);
            tp as f64 / (i + 1) as f64
        })
        .collect();
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let sum = hits
        .iter()
        .zip(&envelope)
        .filter(|(h, _)| **h)
        .fold(0.0, |acc, (_, p)| acc + p);
    sum / n_gt as f64
}

/// AP at IoU 0.5 for every class with at least one ground-truth instance.
///
/// Detections are ranked by confidence, ties broken by scene id and then
/// input order; each is matched greedily to the highest-IoU unmatched
/// ground truth of its scene and class.
pub fn ap50(detections: &[Detection], ground_truth: &[GroundTruth]) -> BTreeMap<usize, f64> {
    let classes: BTreeSet<usize> = ground_truth.iter().map(|g| g.class_id).collect();
    classes
        .into_iter()
        .map(|c| {
            let dets: Vec<&Detection> = detections.iter().filter(|d| d.class_id == c).collect();
            let gts: Vec<&GroundTruth> = ground_truth.iter().filter(|g| g.class_id == c).collect();
            (c, average_precision(&ranked_hits(&dets, &gts), gts.len()))
        })
        .collect()
}

/// Fraction of rows whose own class mean is strictly the nearest in L1.
pub fn centroid_accuracy(features: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, d) = features.dims2()?;
    if n != labels.len() {
        return Err(Error::Contract(format!("{n} vectors with {} labels", labels.len())));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        let e = sums.entry(c).or_insert_with(|| (vec![0.0; d], 0));
        e.0.iter_mut().zip(features.row(i)).for_each(|(s, v)| *s += v);
        e.1 += 1;
    }
    if sums.len() < 2 {
        return Err(Error::Contract("centroid accuracy needs >= 2 classes".into()));
    }
    let means: Vec<(usize, Vec<f64>)> = sums
        .into_iter()
        .map(|(c, (s, k))| (c, s.into_iter().map(|v| v / k as f64).collect()))
        .collect();
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, &c)| {
            let row = features.row(*i);
            let own = means.iter().find(|(m, _)| *m == c).map(|(_, v)| l1(row, v)).unwrap_or(f64::INFINITY);
            means.iter().filter(|(m, _)| *m != c).all(|(_, v)| own < l1(row, v))
        })
        .count();
    Ok(correct as f64 / n as f64)
}

/// Feature stage of exported support embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Crop means of the support boxes, before the backbone.
    Raw,
    /// Backbone features.
    PreIsam,
    /// Intra-support refinement output.
    PostIsam,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Raw, Stage::PreIsam, Stage::PostIsam];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::PreIsam => "pre_isam",
            Stage::PostIsam => "post_isam",
        }
    }
}

/// CSV text: `class_id,stage,v0..v{d-1}` header, one row per vector in
/// input order, shortest round-trip decimal values.
pub fn embeddings_csv(features: &Tensor, labels: &[usize], stage: Stage) -> Result<String> {
    let (n, d) = features.dims2()?;
    if n != labels.len() {
        return Err(Error::Contract(format!("{n} vectors with {} labels", labels.len())));
    }
    let mut out = String::from("class_id,stage");
    for j in 0..d {
        let _ = write!(out, ",v{j}");
    }
    out.push('\n');
    for (i, c) in labels.iter().enumerate() {
        let _ = write!(out, "{c},{}", stage.as_str());
        for v in features.row(i) {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(features: &Tensor, labels: &[usize], stage: Stage, path: &Path) -> Result<()> {
    std::fs::write(path, embeddings_csv(features, labels, stage)?)?;
    Ok(())
}

/// Parses [`embeddings_csv`] output back into vectors, labels and stage
/// names.
pub fn parse_embeddings(text: &str) -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<String>)> {
    let bad = |line: usize, what: &str| Error::Contract(format!("embedding csv line {line}: {what}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    if !header.starts_with("class_id,stage") {
        return Err(bad(1, "unexpected header"));
    }
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    let mut stages = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut cells = line.split(',');
        let c = cells
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(i + 2, "bad class id"))?;
        let stage = cells.next().ok_or_else(|| bad(i + 2, "missing stage"))?;
        let v = cells
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(i + 2, "bad value"))?;
        labels.push(c);
        stages.push(stage.to_string());
        vectors.push(v);
    }
    Ok((vectors, labels, stages))
}

/// Detection quality of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub seed: u64,
    pub k: usize,
    pub per_class_ap50: BTreeMap<usize, f64>,
    pub novel_classes: Vec<usize>,
    pub mean_novel_ap50: f64,
    pub base_classes: Vec<usize>,
    pub mean_base_ap50: f64,
    pub style: String,
    pub prototype_mode: String,
    pub baseline_variant: String,
    pub isam: bool,
    pub qsam: bool,
}

impl MetricReport {
    /// Named scalar metrics used for multi-run aggregation.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m: BTreeMap<String, f64> = self
            .per_class_ap50
            .iter()
            .map(|(c, v)| (format!("ap50.class_{c}"), *v))
            .collect();
        m.insert("mean_novel_ap50".into(), self.mean_novel_ap50);
        m.insert("mean_base_ap50".into(), self.mean_base_ap50);
        m
    }
}

/// Arithmetic mean of the listed classes' AP; classes without ground truth
/// count as 0.
pub fn mean_ap(per_class: &BTreeMap<usize, f64>, classes: &[usize]) -> f64 {
    if classes.is_empty() {
        return 0.0;
    }
    classes.iter().fold(0.0, |acc, c| acc + per_class.get(c).copied().unwrap_or(0.0)) / classes.len() as f64
}

/// Nearest-centroid accuracies of the support vectors at three stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub seed: u64,
    pub k: usize,
    pub classes: Vec<usize>,
    pub n_vectors: usize,
    pub accuracy_raw: f64,
    pub accuracy_pre_isam: f64,
    pub accuracy_post_isam: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// Sample mean and standard deviation (`n−1`), plus median and range.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Contract(format!("need >= 2 values, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        mean,
        std: var.sqrt(),
        median: median_sorted(&sorted),
        min: sorted[0],
        max: sorted[n - 1],
    })
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return f64::NAN;
    }
    median_sorted(&sorted)
}

/// Per-metric statistics over runs.
pub fn multi_run_stats(reports: &[MetricReport]) -> Result<BTreeMap<String, Summary>> {
    if reports.len() < 2 {
        return Err(Error::Contract(format!("need >= 2 reports, got {}", reports.len())));
    }
    let first = reports[0].metrics();
    let keys: Vec<&String> = first.keys().collect();
    let all: Vec<BTreeMap<String, f64>> = reports.iter().map(MetricReport::metrics).collect();
    for (i, m) in all.iter().enumerate() {
        if m.keys().collect::<Vec<_>>() != keys {
            return Err(Error::Contract(format!("report {i} has different metrics than report 0")));
        }
    }
    keys.into_iter()
        .map(|k| {
            let values: Vec<f64> = all.iter().map(|m| m[k]).collect();
            summarize(&values).map(|s| (k.clone(), s))
        })
        .collect()
}
