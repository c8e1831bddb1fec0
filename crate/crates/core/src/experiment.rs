//! Single runs and multi-seed experiments: ablation arms, the per-sample
//! versus averaged A/B, base-K and shot sweeps, and support clustering.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::PrototypeMode;
use crate::config::RunConfig;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::eval::{ap50, centroid_accuracy, mean_ap, median, multi_run_stats, ClusterReport, GroundTruth, MetricReport, Stage, Summary};
use crate::tensor::Tensor;
use crate::trainer::{build_prototype_cache, finetune, frozen_supports, infer, train_phase, Phase, StepRecord};
use crate::world::{build_world, derive_seed, DatasetSplit, Pool};

/// One model variant of a multi-arm experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub isam: bool,
    pub qsam: bool,
    pub prototype_mode: PrototypeMode,
}

impl Arm {
    fn new(name: &str, isam: bool, qsam: bool, prototype_mode: PrototypeMode) -> Self {
        Arm {
            name: name.into(),
            isam,
            qsam,
            prototype_mode,
        }
    }

    pub fn full() -> Self {
        Arm::new("full", true, true, PrototypeMode::PerSample)
    }

    /// No refinement, no query-support attention, one averaged prototype.
    pub fn baseline() -> Self {
        Arm::new("baseline", false, false, PrototypeMode::Averaged)
    }

    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.model.isam = self.isam;
        c.model.qsam = self.qsam;
        c.model.prototype_mode = self.prototype_mode;
        c
    }
}

/// The 2×2 grid over the two attention modules.
pub fn ablation_arms() -> Vec<Arm> {
    vec![
        Arm::baseline(),
        Arm::new("isam_only", true, false, PrototypeMode::Averaged),
        Arm::new("qsam_only", false, true, PrototypeMode::PerSample),
        Arm::full(),
    ]
}

/// Per-sample prototypes against a single averaged prototype.
pub fn compare_arms() -> Vec<Arm> {
    let mut per_sample = Arm::full();
    per_sample.name = "per_sample".into();
    let mut averaged = Arm::baseline();
    averaged.name = "averaged".into();
    vec![per_sample, averaged]
}

pub fn world_for(cfg: &RunConfig, k: usize, seed: u64) -> Result<DatasetSplit> {
    build_world(&cfg.world, k, seed)
}

/// Fresh model and base training for `seed`. The result does not depend on
/// the evaluation shot count.
pub fn train_base(cfg: &RunConfig, seed: u64) -> Result<(Detector, Vec<StepRecord>)> {
    cfg.validate()?;
    let split = world_for(cfg, cfg.train.k_eval, seed)?;
    let model = Detector::init(cfg.model.clone(), derive_seed(seed, "model_init", 0))?;
    train_phase(&model, &split, &cfg.train_config(Phase::Base, seed))
}

/// Outcome of finetuning and scoring one model.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: Detector,
    pub report: MetricReport,
    pub base_trace: Vec<StepRecord>,
    pub finetune_trace: Vec<StepRecord>,
}

/// Finetunes `base` on the frozen `k`-shot sets of `seed`'s world and scores
/// it on the test pool.
pub fn finetune_and_eval(cfg: &RunConfig, base: &Detector, k: usize, seed: u64) -> Result<(Detector, Vec<StepRecord>, MetricReport)> {
    let split = world_for(cfg, k, seed)?;
    let mut tc = cfg.train_config(Phase::Finetune, seed);
    tc.k_eval = k;
    let (model, trace) = finetune(base, &split, &tc)?;
    let report = evaluate(&model, &split, cfg.eval.scenes)?;
    Ok((model, trace, report))
}

/// Base training, finetuning at `train.k_eval` and evaluation.
pub fn run_once(cfg: &RunConfig, seed: u64) -> Result<RunOutput> {
    let (base, base_trace) = train_base(cfg, seed)?;
    let (model, finetune_trace, report) = finetune_and_eval(cfg, &base, cfg.train.k_eval, seed)?;
    Ok(RunOutput {
        model,
        report,
        base_trace,
        finetune_trace,
    })
}

/// Instances of `scenes` test-pool scenes as ground truth.
pub fn test_ground_truth(split: &DatasetSplit, scenes: usize) -> Result<Vec<(crate::world::SceneSample, Vec<GroundTruth>)>> {
    (0..scenes as u64)
        .map(|i| {
            let scene = split.pool_scene(Pool::Test, i)?;
            let gt = scene
                .boxes
                .iter()
                .zip(&scene.labels)
                .map(|(b, &c)| GroundTruth {
                    scene_id: scene.seed,
                    class_id: c,
                    cell_box: *b,
                })
                .collect();
            Ok((scene, gt))
        })
        .collect()
}

/// Cached inference over the first `scenes` test scenes.
pub fn evaluate(model: &Detector, split: &DatasetSplit, scenes: usize) -> Result<MetricReport> {
    let cache = build_prototype_cache(model, split)?;
    let mut detections = Vec::new();
    let mut truth = Vec::new();
    for (scene, gt) in test_ground_truth(split, scenes)? {
        detections.extend(infer(model, &scene, &cache)?);
        truth.extend(gt);
    }
    let mut per_class = ap50(&detections, &truth);
    for c in split.all_classes() {
        per_class.entry(c).or_insert(0.0);
    }
    let m = &model.cfg;
    Ok(MetricReport {
        seed: split.seed,
        k: split.k,
        mean_novel_ap50: mean_ap(&per_class, &split.novel_classes),
        mean_base_ap50: mean_ap(&per_class, &split.base_classes),
        novel_classes: split.novel_classes.clone(),
        base_classes: split.base_classes.clone(),
        per_class_ap50: per_class,
        style: m.style.as_str().into(),
        prototype_mode: m.prototype_mode.as_str().into(),
        baseline_variant: m.baseline_variant.as_str().into(),
        isam: m.isam,
        qsam: m.qsam,
    })
}

/// Novel-class support vectors at the three stages, rows in class then
/// shot order.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportEmbeddings {
    pub labels: Vec<usize>,
    pub stages: BTreeMap<Stage, Tensor>,
}

pub fn support_embeddings(model: &Detector, split: &DatasetSplit) -> Result<SupportEmbeddings> {
    if model.isam_stack().is_none() {
        return Err(Error::Contract("clustering needs a model with intra-support refinement".into()));
    }
    let supports = frozen_supports(split)?;
    let mut labels = Vec::new();
    let mut rows: BTreeMap<Stage, Vec<Tensor>> = BTreeMap::new();
    for &c in &split.novel_classes {
        let raw = &supports[&c];
        let p = model.prototypes_eval(c, raw)?;
        labels.extend(std::iter::repeat(c).take(raw.rows()));
        rows.entry(Stage::Raw).or_default().push(raw.clone());
        rows.entry(Stage::PreIsam).or_default().push(p.features);
        rows.entry(Stage::PostIsam).or_default().push(p.refined);
    }
    let stages = rows
        .into_iter()
        .map(|(s, parts)| Tensor::concat_rows(&parts.iter().collect::<Vec<_>>()).map(|t| (s, t)))
        .collect::<Result<_>>()?;
    Ok(SupportEmbeddings { labels, stages })
}

pub fn cluster_report(model: &Detector, split: &DatasetSplit) -> Result<(ClusterReport, SupportEmbeddings)> {
    let emb = support_embeddings(model, split)?;
    let acc = |s: Stage| centroid_accuracy(&emb.stages[&s], &emb.labels);
    let report = ClusterReport {
        seed: split.seed,
        k: split.k,
        classes: split.novel_classes.clone(),
        n_vectors: emb.labels.len(),
        accuracy_raw: acc(Stage::Raw)?,
        accuracy_pre_isam: acc(Stage::PreIsam)?,
        accuracy_post_isam: acc(Stage::PostIsam)?,
    };
    Ok((report, emb))
}

/// Runs `f` for every seed on a pool of `threads` workers (0: all cores);
/// results come back in seed order.
pub fn par_seeds<T, F>(threads: usize, seeds: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config {
            field: "threads".into(),
            reason: e.to_string(),
        })?;
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
}

/// Per-seed reports of one arm with their aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub k: usize,
    pub k_train: usize,
    pub median_novel_ap50: f64,
    /// Sample statistics per metric; absent for a single run.
    pub stats: Option<BTreeMap<String, Summary>>,
    pub runs: Vec<MetricReport>,
}

impl ArmResult {
    pub fn new(name: &str, k: usize, k_train: usize, runs: Vec<MetricReport>) -> Result<Self> {
        let novel: Vec<f64> = runs.iter().map(|r| r.mean_novel_ap50).collect();
        let stats = if runs.len() >= 2 { Some(multi_run_stats(&runs)?) } else { None };
        Ok(ArmResult {
            name: name.into(),
            k,
            k_train,
            median_novel_ap50: median(&novel),
            stats,
            runs,
        })
    }
}

/// Each arm trained and scored on every seed of `cfg`.
pub fn run_arms(cfg: &RunConfig, arms: &[Arm]) -> Result<Vec<ArmResult>> {
    arms.iter()
        .map(|arm| {
            let c = arm.apply(cfg);
            c.validate()?;
            let runs = par_seeds(cfg.threads, &cfg.seeds(), |s| run_once(&c, s).map(|o| o.report))?;
            ArmResult::new(&arm.name, c.train.k_eval, c.train.k_train, runs)
        })
        .collect()
}

pub fn ablate(cfg: &RunConfig) -> Result<Vec<ArmResult>> {
    run_arms(cfg, &ablation_arms())
}

pub fn compare(cfg: &RunConfig) -> Result<Vec<ArmResult>> {
    run_arms(cfg, &compare_arms())
}

/// The configured model with base training at each `k_train`.
pub fn sweep_base_k(cfg: &RunConfig, base_ks: &[usize]) -> Result<Vec<ArmResult>> {
    base_ks
        .iter()
        .map(|&kt| {
            let mut c = cfg.clone();
            c.train.k_train = kt;
            c.validate()?;
            let runs = par_seeds(cfg.threads, &cfg.seeds(), |s| run_once(&c, s).map(|o| o.report))?;
            ArmResult::new(&format!("k_train_{kt}"), c.train.k_eval, kt, runs)
        })
        .collect()
}

/// One base model per seed, finetuned separately at each shot count.
pub fn sweep_shots(cfg: &RunConfig, ks: &[usize]) -> Result<Vec<ArmResult>> {
    cfg.validate()?;
    let per_seed = par_seeds(cfg.threads, &cfg.seeds(), |s| {
        let (base, _) = train_base(cfg, s)?;
        ks.iter()
            .map(|&k| finetune_and_eval(cfg, &base, k, s).map(|(_, _, r)| r))
            .collect::<Result<Vec<_>>>()
    })?;
    ks.iter()
        .enumerate()
        .map(|(i, &k)| {
            let runs = per_seed.iter().map(|r| r[i].clone()).collect();
            ArmResult::new(&format!("k_{k}"), k, cfg.train.k_train, runs)
        })
        .collect()
}

/// Clustering of `k` novel-class shots per seed after base training.
pub fn cluster_runs(cfg: &RunConfig, k: usize) -> Result<Vec<ClusterReport>> {
    cfg.validate()?;
    par_seeds(cfg.threads, &cfg.seeds(), |s| {
        let (base, _) = train_base(cfg, s)?;
        cluster_report(&base, &world_for(cfg, k, s)?).map(|(r, _)| r)
    })
}
