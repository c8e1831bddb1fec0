//! Episodic training in two phases, episode samplers, prototype caching and
//! cached inference.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{BaselineVariant, PrototypeMode};
use crate::detector::{ClassPrototypes, Detection, Detector, EpisodeStyle, LossBreakdown};
use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::tensor::{Mode, Tape, Tensor};
use crate::world::{derive_seed, rng_for, DatasetSplit, Pool, SceneSample};

/// Attempts at drawing supports disjoint from the query before giving up.
pub const MAX_RESAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Base => "base",
            Phase::Finetune => "finetune",
        }
    }

    /// Classes an episode of this phase may draw from.
    pub fn classes(self, split: &DatasetSplit) -> Vec<usize> {
        match self {
            Phase::Base => split.base_classes.clone(),
            Phase::Finetune => split.all_classes(),
        }
    }
}

/// One query scene with `K`-shot support sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub query: SceneSample,
    /// Raw support crops per class, `K×d`; in finetune episodes a class
    /// loses the shot cropped from the query scene when `K > 1`.
    pub supports: BTreeMap<usize, Tensor>,
    /// Seeds of the scenes each support shot was cropped from.
    pub support_scenes: BTreeMap<usize, Vec<u64>>,
    /// Support classes with at least one instance in the query.
    pub positive: Vec<usize>,
}

impl Episode {
    pub fn classes(&self) -> Vec<usize> {
        self.supports.keys().copied().collect()
    }

    pub fn support_list(&self) -> Vec<Tensor> {
        self.supports.values().cloned().collect()
    }

    pub fn shots(&self) -> usize {
        self.supports.values().next().map_or(0, Tensor::rows)
    }

    /// Class labels of every instance the episode exposes to the model:
    /// query instances and support shots.
    pub fn consumed_labels(&self) -> Vec<usize> {
        let mut out = self.query.labels.clone();
        for (c, t) in &self.supports {
            out.extend(std::iter::repeat(*c).take(t.rows()));
        }
        out
    }

    fn finish(query: SceneSample, supports: BTreeMap<usize, (Tensor, Vec<u64>)>) -> Result<Self> {
        let positive: Vec<usize> = supports
            .keys()
            .copied()
            .filter(|c| query.labels.contains(c))
            .collect();
        if positive.is_empty() {
            return Err(Error::Sampling("query holds none of the support classes".into()));
        }
        let (supports, support_scenes) = supports
            .into_iter()
            .map(|(c, (t, s))| ((c, t), (c, s)))
            .unzip();
        Ok(Episode {
            query,
            supports,
            support_scenes,
            positive,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub k_train: usize,
    pub k_eval: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub style: EpisodeStyle,
    pub prototype_mode: PrototypeMode,
    pub baseline_variant: BaselineVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Base,
            k_train: 3,
            k_eval: 5,
            iterations: 2000,
            lr: 0.01,
            seed: 0,
            style: EpisodeStyle::Allway,
            prototype_mode: PrototypeMode::PerSample,
            baseline_variant: BaselineVariant::MultSubId,
        }
    }
}

impl TrainConfig {
    /// Shots per support set in this phase.
    pub fn shots(&self) -> usize {
        match self.phase {
            Phase::Base => self.k_train,
            Phase::Finetune => self.k_eval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: format!("train.{field}"),
                reason,
            })
        };
        if self.k_train == 0 {
            return bad("k_train", "must be >= 1".into());
        }
        if self.k_eval == 0 {
            return bad("k_eval", "must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be a finite value > 0, got {}", self.lr));
        }
        Ok(())
    }

    /// Checks that the model and split were built for this configuration.
    pub fn check_against(&self, model: &Detector, split: &DatasetSplit) -> Result<()> {
        self.validate()?;
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: format!("train.{field}"),
                reason,
            })
        };
        let m = &model.cfg;
        if m.style != self.style {
            return bad("style", format!("model uses {}", m.style.as_str()));
        }
        if m.prototype_mode != self.prototype_mode {
            return bad("prototype_mode", format!("model uses {}", m.prototype_mode.as_str()));
        }
        if m.prototype_mode == PrototypeMode::Averaged
            && !m.qsam
            && m.baseline_variant != self.baseline_variant
        {
            return bad("baseline_variant", format!("model uses {}", m.baseline_variant.as_str()));
        }
        if m.dim != split.dim() {
            return bad("dim", format!("model width {} vs world width {}", m.dim, split.dim()));
        }
        if let Some(c) = split.all_classes().into_iter().find(|&c| c >= m.n_classes) {
            return bad("n_classes", format!("class {c} outside the model's {} classes", m.n_classes));
        }
        if self.phase == Phase::Finetune && split.k != self.k_eval {
            return bad("k_eval", format!("split freezes {} shots, not {}", split.k, self.k_eval));
        }
        let classes = self.phase.classes(split);
        if classes.is_empty() || (self.style == EpisodeStyle::Pairwise && classes.len() < 2) {
            return bad("style", format!("{} classes are too few for {}", classes.len(), self.style.as_str()));
        }
        Ok(())
    }
}

fn fresh_shots(
    split: &DatasetSplit,
    class_id: usize,
    k: usize,
    query_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<u64>)> {
    let mut rows = Vec::with_capacity(k);
    let mut seeds = Vec::with_capacity(k);
    while rows.len() < k {
        let mut attempts = 0;
        let scene = loop {
            let s = split.single_instance(class_id, "base_support", rng.gen())?;
            if s.seed != query_seed && !seeds.contains(&s.seed) {
                break s;
            }
            attempts += 1;
            if attempts >= MAX_RESAMPLES {
                return Err(Error::Sampling(format!(
                    "no support of class {class_id} disjoint from query {query_seed}"
                )));
            }
        };
        rows.push(crate::world::crop_support(&scene, &scene.boxes[0])?);
        seeds.push(scene.seed);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    Ok((Tensor::concat_rows(&refs)?, seeds))
}

fn frozen_set(split: &DatasetSplit, class_id: usize, k: usize) -> Result<(Tensor, Vec<u64>)> {
    let shots = split.frozen_shots(class_id)?;
    if shots.len() != k {
        return Err(Error::Sampling(format!(
            "class {class_id} has {} frozen shots, episode needs {k}",
            shots.len()
        )));
    }
    let d = shots[0].crop.len();
    let values: Vec<f64> = shots.iter().flat_map(|s| s.crop.iter().copied()).collect();
    Ok((Tensor::matrix(k, d, values)?, shots.iter().map(|s| s.scene.seed).collect()))
}

/// Frozen shots of `class_id` minus those cropped from `query_seed`, unless
/// that would leave no shot at all (K=1).
fn frozen_set_excluding(split: &DatasetSplit, class_id: usize, k: usize, query_seed: u64) -> Result<(Tensor, Vec<u64>)> {
    let (t, seeds) = frozen_set(split, class_id, k)?;
    let keep: Vec<usize> = (0..seeds.len()).filter(|&i| seeds[i] != query_seed).collect();
    if keep.is_empty() || keep.len() == seeds.len() {
        return Ok((t, seeds));
    }
    let rows: Vec<f64> = keep.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
    Ok((
        Tensor::matrix(keep.len(), t.cols(), rows)?,
        keep.iter().map(|&i| seeds[i]).collect(),
    ))
}

fn pick<T: Copy>(items: &[T], rng: &mut ChaCha8Rng) -> Result<T> {
    items
        .choose(rng)
        .copied()
        .ok_or_else(|| Error::Sampling("nothing to sample from".into()))
}

/// Query scene of a finetune episode: one of the frozen shot scenes of
/// `class_id`.
fn frozen_query(split: &DatasetSplit, class_id: usize, rng: &mut ChaCha8Rng) -> Result<SceneSample> {
    let shots = split.frozen_shots(class_id)?;
    let i = rng.gen_range(0..shots.len());
    Ok(shots[i].scene.clone())
}

/// Two-class episode: a query containing `c1` and `K` shots of `c1` and of
/// a different class `c2`.
pub fn sample_episode_pairwise(
    split: &DatasetSplit,
    phase: Phase,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let classes = phase.classes(split);
    if classes.len() < 2 {
        return Err(Error::Sampling(format!("pairwise episodes need 2 classes, have {}", classes.len())));
    }
    let c1 = pick(&classes, rng)?;
    let others: Vec<usize> = classes.iter().copied().filter(|&c| c != c1).collect();
    let c2 = pick(&others, rng)?;
    let mut supports = BTreeMap::new();
    let query = match phase {
        Phase::Base => {
            let q = split.scene_with(c1, &classes, "base_query", rng.gen())?;
            for c in [c1, c2] {
                supports.insert(c, fresh_shots(split, c, k, q.seed, rng)?);
            }
            q
        }
        Phase::Finetune => {
            let q = frozen_query(split, c1, rng)?;
            for c in [c1, c2] {
                supports.insert(c, frozen_set_excluding(split, c, k, q.seed)?);
            }
            q
        }
    };
    Episode::finish(query, supports)
}

/// All-class episode: one query and `K` shots of every phase class.
pub fn sample_episode_allway(
    split: &DatasetSplit,
    phase: Phase,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let classes = phase.classes(split);
    if classes.is_empty() {
        return Err(Error::Sampling("no classes in this phase".into()));
    }
    let mut supports = BTreeMap::new();
    let query = match phase {
        Phase::Base => {
            let q = split.pool_scene(Pool::Base, rng.gen())?;
            for &c in &classes {
                supports.insert(c, fresh_shots(split, c, k, q.seed, rng)?);
            }
            q
        }
        Phase::Finetune => {
            let c = pick(&classes, rng)?;
            let q = frozen_query(split, c, rng)?;
            for &c in &classes {
                supports.insert(c, frozen_set_excluding(split, c, k, q.seed)?);
            }
            q
        }
    };
    Episode::finish(query, supports)
}

pub fn sample_episode(
    split: &DatasetSplit,
    phase: Phase,
    style: EpisodeStyle,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    match style {
        EpisodeStyle::Pairwise => sample_episode_pairwise(split, phase, k, rng),
        EpisodeStyle::Allway => sample_episode_allway(split, phase, k, rng),
    }
}

/// Loss record of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Episode `step` of a run, drawn from its own seeded stream.
pub fn episode_for_step(split: &DatasetSplit, cfg: &TrainConfig, step: usize) -> Result<Episode> {
    let mut rng = rng_for(cfg.seed, &format!("episode.{}", cfg.phase.as_str()), step as u64);
    let ep = sample_episode(split, cfg.phase, cfg.style, cfg.shots(), &mut rng)?;
    if cfg.phase == Phase::Base {
        if let Some(c) = ep.consumed_labels().into_iter().find(|&c| split.is_novel(c)) {
            return Err(Error::Contract(format!("novel class {c} reached base training")));
        }
    }
    Ok(ep)
}

/// One SGD step on `ep`; returns the loss breakdown of the forward pass.
pub fn sgd_step(model: &mut Detector, ep: &Episode, lr: f64, dropout_seed: u64, step: usize) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let bindings = model.params.bind(&tape);
    let mut fwd = Forward::new(&tape, &bindings, Mode::Train, dropout_seed);
    let diverged = |e: Error| match e {
        Error::NonFinite(op) => Error::Diverged {
            step,
            reason: format!("non-finite value in `{op}`"),
        },
        other => other,
    };
    let loss = model
        .episode_loss(&mut fwd, &ep.query, &ep.classes(), &ep.support_list())
        .map_err(diverged)?;
    if !loss.parts.total.is_finite() {
        return Err(Error::Diverged {
            step,
            reason: format!("loss {}", loss.parts.total),
        });
    }
    let grads = tape.backward(loss.total).map_err(diverged)?;
    for name in bindings.names() {
        if let Some(g) = grads.get(bindings.get(name)?) {
            if !g.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: format!("non-finite gradient for `{name}`"),
                });
            }
        }
    }
    model.params.sgd_step(&bindings, &grads, lr);
    Ok(loss.parts)
}

/// Runs `cfg.iterations` SGD steps of the configured phase.
pub fn train_phase(model: &Detector, split: &DatasetSplit, cfg: &TrainConfig) -> Result<(Detector, Vec<StepRecord>)> {
    cfg.check_against(model, split)?;
    let mut model = model.clone();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let tag = format!("dropout.{}", cfg.phase.as_str());
    for step in 0..cfg.iterations {
        let ep = episode_for_step(split, cfg, step)?;
        let loss = sgd_step(&mut model, &ep, cfg.lr, derive_seed(cfg.seed, &tag, step as u64), step)?;
        trace.push(StepRecord {
            phase: cfg.phase,
            step,
            loss,
        });
    }
    Ok((model, trace))
}

/// Finetuning on the balanced `K`-shot set over base and novel classes.
pub fn finetune(model: &Detector, split: &DatasetSplit, cfg: &TrainConfig) -> Result<(Detector, Vec<StepRecord>)> {
    let cfg = TrainConfig {
        phase: Phase::Finetune,
        ..cfg.clone()
    };
    train_phase(model, split, &cfg)
}

/// Eval-mode prototypes of every class, computed once from the frozen shots.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeCache {
    pub seed: u64,
    pub classes: BTreeMap<usize, ClassPrototypes>,
}

impl PrototypeCache {
    /// Per-class rows handed to the RoI head: `K` per-sample or one
    /// averaged prototype.
    pub fn vectors(&self, class_id: usize) -> Option<&Tensor> {
        self.classes.get(&class_id).map(|p| &p.roi)
    }
}

/// Frozen shots of every class, as `K×d` raw crops.
pub fn frozen_supports(split: &DatasetSplit) -> Result<BTreeMap<usize, Tensor>> {
    split
        .all_classes()
        .into_iter()
        .map(|c| frozen_set(split, c, split.k).map(|(t, _)| (c, t)))
        .collect()
}

pub fn build_prototype_cache(model: &Detector, split: &DatasetSplit) -> Result<PrototypeCache> {
    let mut classes = BTreeMap::new();
    for (c, raw) in frozen_supports(split)? {
        if raw.rows() == 0 {
            return Err(Error::Contract(format!("class {c} has no support shots")));
        }
        classes.insert(c, model.prototypes_eval(c, &raw)?);
    }
    Ok(PrototypeCache {
        seed: split.seed,
        classes,
    })
}

/// Detections in `scene` against the cached prototypes.
pub fn infer(model: &Detector, scene: &SceneSample, cache: &PrototypeCache) -> Result<Vec<Detection>> {
    if cache.classes.is_empty() {
        return Err(Error::Contract("empty prototype cache".into()));
    }
    for (c, p) in &cache.classes {
        if *c != p.class_id || *c >= model.cfg.n_classes || p.roi.cols() != model.cfg.dim {
            return Err(Error::Contract(format!("cache entry for class {c} does not fit the model")));
        }
    }
    model.detect(scene, &cache.classes)
}

/// Detections recomputing prototypes from the frozen shots in the same pass.
pub fn infer_uncached(model: &Detector, scene: &SceneSample, split: &DatasetSplit) -> Result<Vec<Detection>> {
    model.detect_uncached(scene, &frozen_supports(split)?)
}

#[cfg(test)]
mod tests;
