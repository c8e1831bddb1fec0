//! Toy two-stage detector over feature grids.
//!
//! Pipeline: per-cell backbone, anchor-based proposal stage, mean-pooled RoI
//! features, and a head that scores each RoI against per-class prototypes.
//! Two styles are supported:
//!
//! * `allway`: proposals come from the raw backbone map; a multiclass head
//!   scores every episode class (plus background) per RoI.
//! * `pairwise`: each class first aggregates the whole map spatially, the
//!   proposal stage runs on that class-conditioned map, and a binary head
//!   decides match/no-match per class.

pub mod boxes;
mod loss;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    average_prototype, baseline_aggregate, fuse_rows, BaselineVariant, FeatureMap, PrototypeMode, RoIFeatures,
    StackPair,
};
use crate::attention::{qsam_aggregate, AttentionConfig, DecoderStack, EncoderStack};
use crate::error::{Error, Result};
use crate::nn::{Forward, Linear};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::world::{derive_seed, CellBox, SceneSample};

pub use boxes::{anchors, decode, encode, nms, top_k_anchors, Anchor, Detection, Proposal};
pub use loss::{assign_anchors, AnchorLabel, EpisodeLoss, LossBreakdown};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStyle {
    /// Two classes per episode, binary match head, spatial aggregation
    /// before proposals.
    Pairwise,
    /// Every phase class per episode, multiclass head.
    Allway,
}

impl EpisodeStyle {
    pub fn head_mode(self) -> HeadMode {
        match self {
            EpisodeStyle::Pairwise => HeadMode::BinaryMatch,
            EpisodeStyle::Allway => HeadMode::Multiclass,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EpisodeStyle::Pairwise => "pairwise",
            EpisodeStyle::Allway => "allway",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    BinaryMatch,
    Multiclass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    /// Width of the support classifier behind the meta loss.
    pub n_classes: usize,
    pub style: EpisodeStyle,
    pub isam: bool,
    pub qsam: bool,
    pub prototype_mode: PrototypeMode,
    pub baseline_variant: BaselineVariant,
    pub attention: AttentionConfig,
    /// Fuses each query with its decoder output the way the baseline fuses
    /// it with an averaged prototype, instead of scoring the output alone.
    pub qsam_fusion: bool,
    pub anchor_sizes: Vec<usize>,
    pub train_top_k: usize,
    pub eval_top_k: usize,
    pub positive_iou: f64,
    pub negative_iou: f64,
    /// Anchors sampled per proposal-loss evaluation.
    pub rpn_batch: usize,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 16,
            n_classes: 9,
            style: EpisodeStyle::Allway,
            isam: true,
            qsam: true,
            prototype_mode: PrototypeMode::PerSample,
            baseline_variant: BaselineVariant::MultSubId,
            attention: AttentionConfig {
                model_dim: 16,
                ..AttentionConfig::default()
            },
            qsam_fusion: true,
            anchor_sizes: vec![2, 4],
            train_top_k: 16,
            eval_top_k: 32,
            positive_iou: 0.5,
            negative_iou: 0.3,
            rpn_batch: 32,
            nms_iou: 0.3,
            score_threshold: 0.05,
            max_detections: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: format!("model.{field}"),
                reason,
            })
        };
        self.attention.validate()?;
        if self.dim == 0 {
            return bad("dim", "must be >= 1".into());
        }
        if self.attention.model_dim != self.dim {
            return bad(
                "attention.model_dim",
                format!("{} differs from model.dim {}", self.attention.model_dim, self.dim),
            );
        }
        if self.n_classes < 2 {
            return bad("n_classes", "need >= 2 classes".into());
        }
        if self.prototype_mode == PrototypeMode::PerSample && !self.qsam {
            return bad(
                "prototype_mode",
                "per-sample prototypes need the query-support attention module".into(),
            );
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.contains(&0) {
            return bad("anchor_sizes", "need positive sizes".into());
        }
        if self.train_top_k == 0 || self.eval_top_k == 0 {
            return bad("train_top_k", "top_k must be >= 1".into());
        }
        if !(0.0 < self.negative_iou && self.negative_iou <= self.positive_iou && self.positive_iou <= 1.0) {
            return bad("positive_iou", "need 0 < negative_iou <= positive_iou <= 1".into());
        }
        if self.rpn_batch < 2 {
            return bad("rpn_batch", "must be >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(0.0..=1.0).contains(&self.score_threshold) {
            return bad("nms_iou", "thresholds must lie in [0, 1]".into());
        }
        if self.max_detections == 0 {
            return bad("max_detections", "must be >= 1".into());
        }
        Ok(())
    }

    pub fn head_mode(&self) -> HeadMode {
        self.style.head_mode()
    }
}

/// Where query and support features meet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Point {
    /// Whole query map, before proposals.
    Spatial,
    /// Pooled RoI features.
    Roi,
}

#[derive(Clone, Debug, PartialEq)]
struct Aggregator {
    stacks: StackPair,
    /// `3d → d` projection after `mult_sub_id` fusion.
    proj: Option<Linear>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    backbone: Linear,
    rpn_cls: Linear,
    rpn_loc: Linear,
    spatial: Option<Aggregator>,
    roi: Aggregator,
    /// Multiclass: per-class match score `d → 1`. Binary: `d → 2`.
    head_cls: Linear,
    /// Multiclass background score from the raw RoI, `d → 1`.
    head_bg: Option<Linear>,
    head_loc: Linear,
    meta: Linear,
}

/// Prototype tensors of one class, ready for aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes<T = Tensor> {
    pub class_id: usize,
    /// Backbone features of the supports, `K×d`.
    pub features: T,
    /// RoI-point supports after refinement, `K×d`.
    pub refined: T,
    /// What the RoI head aggregates against: `refined` or its mean.
    pub roi: T,
    /// Spatial-point prototypes (pairwise style only).
    pub spatial: Option<T>,
}

impl<'t> ClassPrototypes<Var<'t>> {
    pub fn detach(&self) -> ClassPrototypes {
        let d = |v: &Var<'t>| v.value().as_ref().clone().with_grad(false);
        ClassPrototypes {
            class_id: self.class_id,
            features: d(&self.features),
            refined: d(&self.refined),
            roi: d(&self.roi),
            spatial: self.spatial.as_ref().map(d),
        }
    }
}

impl ClassPrototypes {
    fn on_tape<'t>(&self, fwd: &Forward<'t, '_>) -> ClassPrototypes<Var<'t>> {
        ClassPrototypes {
            class_id: self.class_id,
            features: fwd.constant(self.features.clone()),
            refined: fwd.constant(self.refined.clone()),
            roi: fwd.constant(self.roi.clone()),
            spatial: self.spatial.as_ref().map(|s| fwd.constant(s.clone())),
        }
    }
}

/// Head outputs for a set of RoIs.
pub struct HeadOutput<'t> {
    pub logits: Var<'t>,
    pub offsets: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

fn build_aggregator(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    point: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Aggregator> {
    let isam = if cfg.isam {
        Some(EncoderStack::init(store, &format!("isam.{point}"), &cfg.attention, rng)?)
    } else {
        None
    };
    let qsam = if cfg.qsam {
        Some(DecoderStack::init(store, &format!("qsam.{point}"), &cfg.attention, rng)?)
    } else {
        None
    };
    let proj = ((!cfg.qsam || cfg.qsam_fusion) && cfg.baseline_variant == BaselineVariant::MultSubId).then(|| {
        let name = if point == "roi" { "head.proj".to_string() } else { format!("agg.{point}.proj") };
        Linear::init(store, &name, 3 * cfg.dim, cfg.dim, true, rng)
    });
    Ok(Aggregator {
        stacks: StackPair { isam, qsam },
        proj,
    })
}

fn build_layout(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Layout> {
    let d = cfg.dim;
    let backbone = Linear::init(store, "backbone", d, d, true, rng);
    let rpn_cls = Linear::init(store, "rpn.cls", d, 2, true, rng);
    let rpn_loc = Linear::init(store, "rpn.loc", d, 4, true, rng);
    let spatial = match cfg.style {
        EpisodeStyle::Pairwise => Some(build_aggregator(cfg, store, "spatial", rng)?),
        EpisodeStyle::Allway => None,
    };
    let roi = build_aggregator(cfg, store, "roi", rng)?;
    let (head_cls, head_bg) = match cfg.head_mode() {
        HeadMode::Multiclass => (
            Linear::init(store, "head.match", d, 1, true, rng),
            Some(Linear::init(store, "head.bg", d, 1, true, rng)),
        ),
        HeadMode::BinaryMatch => (Linear::init(store, "head.cls", d, 2, true, rng), None),
    };
    let head_loc = Linear::init(store, "head.loc", d, 4, true, rng);
    let meta = Linear::init(store, "meta.cls", d, cfg.n_classes, true, rng);
    Ok(Layout {
        backbone,
        rpn_cls,
        rpn_loc,
        spatial,
        roi,
        head_cls,
        head_bg,
        head_loc,
        meta,
    })
}

fn zero<'t>(fwd: &Forward<'t, '_>) -> Var<'t> {
    fwd.constant(Tensor::scalar(0.0))
}

impl Detector {
    /// Fresh parameters drawn from `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", 0));
        let mut params = ParamStore::new();
        let layout = build_layout(&cfg, &mut params, &mut rng)?;
        Ok(Detector { cfg, params, layout })
    }

    /// Rebuilds a detector around stored parameters; names and shapes must
    /// match what `cfg` produces.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Detector::init(cfg, 0)?;
        let same = fresh.params.len() == params.len()
            && fresh
                .params
                .iter()
                .zip(params.iter())
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !same {
            return Err(Error::Contract(
                "stored parameters do not match the model configuration".into(),
            ));
        }
        Ok(Detector {
            cfg: fresh.cfg,
            params,
            layout: fresh.layout,
        })
    }

    /// Per-cell `relu(x·W + b)`.
    pub fn backbone<'t>(&self, fwd: &Forward<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.layout.backbone.forward(fwd, x)?.relu()
    }

    pub fn backbone_map(&self, fm: &FeatureMap) -> Result<FeatureMap> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let fwd = Forward::eval(&tape, &b);
        let out = self.backbone(&fwd, fwd.constant(fm.data.clone()))?;
        FeatureMap::new(fm.height, fm.width, out.value().as_ref().clone())
    }

    fn aggregator(&self, point: Point) -> Result<&Aggregator> {
        match point {
            Point::Roi => Ok(&self.layout.roi),
            Point::Spatial => self
                .layout
                .spatial
                .as_ref()
                .ok_or_else(|| Error::Contract("spatial aggregation needs the pairwise style".into())),
        }
    }

    fn reduce<'t>(&self, refined: Var<'t>) -> Result<Var<'t>> {
        match self.cfg.prototype_mode {
            PrototypeMode::PerSample => Ok(refined),
            PrototypeMode::Averaged => average_prototype(refined),
        }
    }

    /// Prototypes of one class from raw support crops (`K×d`).
    pub fn class_prototypes<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        class_id: usize,
        raw: &Tensor,
    ) -> Result<ClassPrototypes<Var<'t>>> {
        if raw.rows() == 0 {
            return Err(Error::EmptyInput(format!("class {class_id} has no supports")));
        }
        let features = self.backbone(fwd, fwd.constant(raw.clone()))?;
        let refined = self.layout.roi.stacks.refine(fwd, features)?;
        let roi = self.reduce(refined)?;
        let spatial = match &self.layout.spatial {
            Some(agg) => {
                let r = agg.stacks.refine(fwd, features)?;
                Some(self.reduce(r)?)
            }
            None => None,
        };
        Ok(ClassPrototypes {
            class_id,
            features,
            refined,
            roi,
            spatial,
        })
    }

    /// Refinement stack of the RoI aggregation point, if enabled.
    pub fn isam_stack(&self) -> Option<&EncoderStack> {
        self.layout.roi.stacks.isam.as_ref()
    }

    /// Eval-mode prototypes, detached.
    pub fn prototypes_eval(&self, class_id: usize, raw: &Tensor) -> Result<ClassPrototypes> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let mut fwd = Forward::eval(&tape, &b);
        Ok(self.class_prototypes(&mut fwd, class_id, raw)?.detach())
    }

    /// Aggregates query rows against one class prototype at `point`.
    pub fn aggregate<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        point: Point,
        queries: Var<'t>,
        proto: Var<'t>,
    ) -> Result<Var<'t>> {
        let agg = self.aggregator(point)?;
        let out = match &agg.stacks.qsam {
            Some(qsam) if self.cfg.qsam_fusion => {
                let a = qsam_aggregate(fwd, queries, proto, qsam)?;
                fuse_rows(queries, a, self.cfg.baseline_variant)?
            }
            Some(qsam) => return qsam_aggregate(fwd, queries, proto, qsam),
            None => baseline_aggregate(queries, proto, self.cfg.baseline_variant)?,
        };
        match &agg.proj {
            Some(p) => p.forward(fwd, out)?.relu(),
            None => Ok(out),
        }
    }

    /// Objectness logits (`A×2`) and offsets (`A×4`) for every anchor.
    pub fn rpn<'t>(
        &self,
        fwd: &Forward<'t, '_>,
        fm: Var<'t>,
        height: usize,
        width: usize,
        anchors: &[Anchor],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let rects: Vec<_> = anchors.iter().map(|a| a.cell_box().rect()).collect();
        let pooled = fm.box_mean_pool(height, width, &rects)?;
        Ok((
            self.layout.rpn_cls.forward(fwd, pooled)?,
            self.layout.rpn_loc.forward(fwd, pooled)?,
        ))
    }

    /// Top-scoring anchors, regressed by their offsets.
    pub fn proposals_from(
        &self,
        objectness: &Tensor,
        deltas: &Tensor,
        anchors: &[Anchor],
        top_k: usize,
        height: usize,
        width: usize,
    ) -> Result<Vec<Proposal>> {
        let probs = objectness.softmax_rows()?;
        let scores: Vec<f64> = (0..probs.rows()).map(|i| probs.get(i, 1)).collect();
        let idx = top_k_anchors(&scores, anchors, top_k)?;
        Ok(idx
            .into_iter()
            .map(|i| Proposal {
                cell_box: decode(&anchors[i].cell_box(), deltas.row(i), height, width),
                score: scores[i],
                anchor: i,
            })
            .collect())
    }

    /// Eval-mode proposal stage on a backbone (or aggregated) map.
    pub fn propose(&self, fm: &FeatureMap, top_k: usize) -> Result<Vec<Proposal>> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let fwd = Forward::eval(&tape, &b);
        let anchors = anchors(fm.height, fm.width, &self.cfg.anchor_sizes)?;
        let (obj, del) = self.rpn(&fwd, fwd.constant(fm.data.clone()), fm.height, fm.width, &anchors)?;
        self.proposals_from(&obj.value(), &del.value(), &anchors, top_k, fm.height, fm.width)
    }

    /// Mean-pools `boxes` out of `fm`.
    pub fn roi_extract<'t>(
        &self,
        fm: Var<'t>,
        height: usize,
        width: usize,
        boxes: &[CellBox],
    ) -> Result<RoIFeatures<Var<'t>>> {
        let rects: Vec<_> = boxes.iter().map(CellBox::rect).collect();
        Ok(RoIFeatures {
            boxes: boxes.to_vec(),
            data: fm.box_mean_pool(height, width, &rects)?,
        })
    }

    /// Class logits and box offsets. `aggregated` holds one aggregated RoI
    /// matrix per episode class (exactly one in binary mode).
    pub fn head_forward<'t>(
        &self,
        fwd: &Forward<'t, '_>,
        rois: &RoIFeatures<Var<'t>>,
        aggregated: &[Var<'t>],
    ) -> Result<HeadOutput<'t>> {
        if rois.count() == 0 {
            return Err(Error::EmptyInput("no RoIs for the head".into()));
        }
        let logits = match self.cfg.head_mode() {
            HeadMode::Multiclass => {
                let bg = self
                    .layout
                    .head_bg
                    .as_ref()
                    .ok_or_else(|| Error::Contract("multiclass head without background scorer".into()))?
                    .forward(fwd, rois.data)?;
                let mut cols = vec![bg];
                for a in aggregated {
                    cols.push(self.layout.head_cls.forward(fwd, *a)?);
                }
                Var::concat_cols(&cols)?
            }
            HeadMode::BinaryMatch => {
                if aggregated.len() != 1 {
                    return Err(Error::Contract(format!(
                        "binary head scores one class, got {}",
                        aggregated.len()
                    )));
                }
                self.layout.head_cls.forward(fwd, aggregated[0])?
            }
        };
        Ok(HeadOutput {
            logits,
            offsets: self.layout.head_loc.forward(fwd, rois.data)?,
        })
    }

    /// Support classifier logits for refined support rows.
    pub fn meta_logits<'t>(&self, fwd: &Forward<'t, '_>, refined: Var<'t>) -> Result<Var<'t>> {
        self.layout.meta.forward(fwd, refined)
    }

    /// Loss of one episode: query scene, episode classes and `K×d` raw
    /// support crops per class.
    pub fn episode_loss<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        query: &SceneSample,
        classes: &[usize],
        supports: &[Tensor],
    ) -> Result<EpisodeLoss<'t>> {
        loss::episode_loss(self, fwd, query, classes, supports)
    }

    /// Eval-mode detections for `scene` against prepared prototypes.
    pub fn detect(
        &self,
        scene: &SceneSample,
        prototypes: &BTreeMap<usize, ClassPrototypes>,
    ) -> Result<Vec<Detection>> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let mut fwd = Forward::eval(&tape, &b);
        let protos: Vec<ClassPrototypes<Var<'_>>> =
            prototypes.values().map(|p| p.on_tape(&fwd)).collect();
        self.detect_with(&mut fwd, scene, &protos)
    }

    /// Eval-mode detections, computing prototypes from raw supports within
    /// the same forward pass.
    pub fn detect_uncached(
        &self,
        scene: &SceneSample,
        supports: &BTreeMap<usize, Tensor>,
    ) -> Result<Vec<Detection>> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let mut fwd = Forward::eval(&tape, &b);
        let mut protos = Vec::with_capacity(supports.len());
        for (&c, raw) in supports {
            protos.push(self.class_prototypes(&mut fwd, c, raw)?);
        }
        self.detect_with(&mut fwd, scene, &protos)
    }

    fn detect_with<'t>(
        &self,
        fwd: &mut Forward<'t, '_>,
        scene: &SceneSample,
        protos: &[ClassPrototypes<Var<'t>>],
    ) -> Result<Vec<Detection>> {
        if protos.is_empty() {
            return Err(Error::Contract("no class prototypes for inference".into()));
        }
        let (h, w) = (scene.grid.height, scene.grid.width);
        let anchors = anchors(h, w, &self.cfg.anchor_sizes)?;
        let fm = self.backbone(fwd, fwd.constant(scene.grid.data.clone()))?;
        let mut per_class: Vec<(usize, Vec<(CellBox, f64)>)> = Vec::new();
        match self.cfg.head_mode() {
            HeadMode::Multiclass => {
                let (obj, del) = self.rpn(fwd, fm, h, w, &anchors)?;
                let props =
                    self.proposals_from(&obj.value(), &del.value(), &anchors, self.cfg.eval_top_k, h, w)?;
                let boxes: Vec<CellBox> = props.iter().map(|p| p.cell_box).collect();
                let rois = self.roi_extract(fm, h, w, &boxes)?;
                let mut aggs = Vec::with_capacity(protos.len());
                for p in protos {
                    aggs.push(self.aggregate(fwd, Point::Roi, rois.data, p.roi)?);
                }
                let out = self.head_forward(fwd, &rois, &aggs)?;
                let probs = out.logits.value().softmax_rows()?;
                let offsets = out.offsets.value();
                for (i, p) in protos.iter().enumerate() {
                    let items = boxes
                        .iter()
                        .enumerate()
                        .map(|(r, b)| (decode(b, offsets.row(r), h, w), probs.get(r, i + 1)))
                        .collect();
                    per_class.push((p.class_id, items));
                }
            }
            HeadMode::BinaryMatch => {
                for p in protos {
                    let sp = p
                        .spatial
                        .ok_or_else(|| Error::Contract("missing spatial prototypes".into()))?;
                    let agg_map = self.aggregate(fwd, Point::Spatial, fm, sp)?;
                    let (obj, del) = self.rpn(fwd, agg_map, h, w, &anchors)?;
                    let props = self.proposals_from(
                        &obj.value(),
                        &del.value(),
                        &anchors,
                        self.cfg.eval_top_k,
                        h,
                        w,
                    )?;
                    let boxes: Vec<CellBox> = props.iter().map(|p| p.cell_box).collect();
                    let rois = self.roi_extract(fm, h, w, &boxes)?;
                    let agg = self.aggregate(fwd, Point::Roi, rois.data, p.roi)?;
                    let out = self.head_forward(fwd, &rois, &[agg])?;
                    let probs = out.logits.value().softmax_rows()?;
                    let offsets = out.offsets.value();
                    let items = boxes
                        .iter()
                        .enumerate()
                        .map(|(r, b)| (decode(b, offsets.row(r), h, w), probs.get(r, 1)))
                        .collect();
                    per_class.push((p.class_id, items));
                }
            }
        }
        let mut dets = Vec::new();
        for (class_id, items) in per_class {
            let items: Vec<(CellBox, f64)> = items
                .into_iter()
                .filter(|(_, s)| *s >= self.cfg.score_threshold)
                .collect();
            for i in nms(&items, self.cfg.nms_iou).into_iter().take(self.cfg.max_detections) {
                dets.push(Detection {
                    scene_id: scene.seed,
                    class_id,
                    cell_box: items[i].0,
                    confidence: items[i].1.clamp(0.0, 1.0),
                });
            }
        }
        Ok(dets)
    }

    /// Parameter names grouped by their leading component.
    pub fn param_groups(&self) -> BTreeMap<String, Vec<String>> {
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for name in self.params.names() {
            let mut parts = name.split('.');
            let first = parts.next().unwrap_or(name);
            let key = match first {
                "isam" | "qsam" | "agg" => format!("{first}.{}", parts.next().unwrap_or("")),
                _ => first.to_string(),
            };
            groups.entry(key).or_default().push(name.to_string());
        }
        groups
    }
}
