//! Episode loss: proposal objectness and offsets, head classification and
//! offsets, and the support classifier term.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{encode, Anchor, Detector, EpisodeStyle, Point};
use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::tensor::{Tensor, Var};
use crate::world::{CellBox, SceneSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground-truth box with this index.
    Positive(usize),
    Negative,
    Ignore,
}

/// IoU-based assignment: `≥ positive` matches the best ground truth,
/// `< negative` is background, the rest is ignored. The best anchor of each
/// ground-truth box is positive as well, provided it overlaps at all.
pub fn assign_anchors(
    boxes: &[CellBox],
    gt: &[CellBox],
    positive: f64,
    negative: f64,
) -> Vec<AnchorLabel> {
    let best_gt = |b: &CellBox| {
        gt.iter()
            .enumerate()
            .map(|(j, g)| (j, b.iou(g)))
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc })
    };
    let mut labels: Vec<AnchorLabel> = boxes
        .iter()
        .map(|b| {
            let (j, v) = best_gt(b);
            if gt.is_empty() || v < negative {
                AnchorLabel::Negative
            } else if v >= positive {
                AnchorLabel::Positive(j)
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for (j, g) in gt.iter().enumerate() {
        let best = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| (i, b.iou(g)))
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best.1 > 0.0 && !matches!(labels[best.0], AnchorLabel::Positive(_)) {
            labels[best.0] = AnchorLabel::Positive(j);
        }
    }
    labels
}

/// The five loss terms of an episode and their sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_loc: f64,
    pub rpn_cls: f64,
    pub det_loc: f64,
    pub det_cls: f64,
    pub meta: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `rpn_loc + rpn_cls + det_loc + det_cls + meta`, left to right.
    pub fn component_sum(&self) -> f64 {
        self.rpn_loc + self.rpn_cls + self.det_loc + self.det_cls + self.meta
    }

    pub fn is_consistent(&self) -> bool {
        self.total.to_bits() == self.component_sum().to_bits()
    }

    pub fn components(&self) -> [f64; 5] {
        [self.rpn_loc, self.rpn_cls, self.det_loc, self.det_cls, self.meta]
    }
}

/// Loss terms on the tape plus their values.
pub struct EpisodeLoss<'t> {
    pub total: Var<'t>,
    pub parts: LossBreakdown,
}

struct BranchLoss<'t> {
    rpn_loc: Var<'t>,
    rpn_cls: Var<'t>,
    det_loc: Var<'t>,
    det_cls: Var<'t>,
}

fn zero<'t>(fwd: &Forward<'t, '_>) -> Var<'t> {
    super::zero(fwd)
}

fn offsets_target<'t>(fwd: &Forward<'t, '_>, pairs: &[(CellBox, CellBox)]) -> Result<Var<'t>> {
    let vals: Vec<f64> = pairs.iter().flat_map(|(r, g)| encode(r, g)).collect();
    Ok(fwd.constant(Tensor::matrix(pairs.len(), 4, vals)?))
}

/// Proposal-stage loss and training RoIs for one branch.
#[allow(clippy::too_many_arguments)]
fn rpn_branch<'t>(
    det: &Detector,
    fwd: &mut Forward<'t, '_>,
    map: Var<'t>,
    height: usize,
    width: usize,
    anchors: &[Anchor],
    gt: &[CellBox],
) -> Result<(Var<'t>, Var<'t>, Vec<CellBox>)> {
    let cfg = &det.cfg;
    let (obj, deltas) = det.rpn(fwd, map, height, width, anchors)?;
    let anchor_boxes: Vec<CellBox> = anchors.iter().map(Anchor::cell_box).collect();
    let labels = assign_anchors(&anchor_boxes, gt, cfg.positive_iou, cfg.negative_iou);
    let pos: Vec<usize> = (0..labels.len())
        .filter(|&i| matches!(labels[i], AnchorLabel::Positive(_)))
        .collect();
    let neg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Negative)
        .collect();
    let n_pos = pos.len().min(cfg.rpn_batch / 2);
    let pos_take: Vec<usize> = if n_pos < pos.len() {
        let mut s: Vec<usize> = sample(&mut fwd.rng, pos.len(), n_pos).into_iter().map(|i| pos[i]).collect();
        s.sort_unstable();
        s
    } else {
        pos.clone()
    };
    let n_neg = (cfg.rpn_batch - n_pos).min(neg.len());
    let mut neg_take: Vec<usize> = sample(&mut fwd.rng, neg.len(), n_neg).into_iter().map(|i| neg[i]).collect();
    neg_take.sort_unstable();

    let mut idx = pos_take.clone();
    idx.extend(&neg_take);
    let mut cls_labels = vec![1usize; pos_take.len()];
    cls_labels.extend(std::iter::repeat(0).take(neg_take.len()));
    let rpn_cls = if idx.is_empty() {
        zero(fwd)
    } else {
        obj.select_rows(&idx)?.cross_entropy(&cls_labels)?
    };
    let rpn_loc = if pos_take.is_empty() {
        zero(fwd)
    } else {
        let pairs: Vec<(CellBox, CellBox)> = pos_take
            .iter()
            .map(|&i| match labels[i] {
                AnchorLabel::Positive(j) => (anchor_boxes[i], gt[j]),
                _ => unreachable!(),
            })
            .collect();
        deltas.select_rows(&pos_take)?.smooth_l1(offsets_target(fwd, &pairs)?)?
    };
    let props = det.proposals_from(&obj.value(), &deltas.value(), anchors, cfg.train_top_k, height, width)?;
    let mut rois: Vec<CellBox> = props.into_iter().map(|p| p.cell_box).collect();
    rois.extend_from_slice(gt);
    Ok((rpn_loc, rpn_cls, rois))
}

/// Per-RoI class index (`0` background, `1 + j` for ground truth label `j`)
/// and matched box for RoIs overlapping a ground truth by `≥ positive`.
fn roi_targets(rois: &[CellBox], gt: &[(CellBox, usize)], positive: f64) -> Vec<Option<(usize, CellBox)>> {
    rois.iter()
        .map(|r| {
            let best = gt
                .iter()
                .map(|(g, l)| (r.iou(g), *l, *g))
                .fold((0.0, 0, CellBox::default()), |acc, x| if x.0 > acc.0 { x } else { acc });
            (best.0 >= positive).then_some((best.1, best.2))
        })
        .collect()
}

fn head_loss<'t>(
    fwd: &Forward<'t, '_>,
    logits: Var<'t>,
    offsets: Var<'t>,
    rois: &[CellBox],
    targets: &[Option<(usize, CellBox)>],
) -> Result<(Var<'t>, Var<'t>)> {
    let labels: Vec<usize> = targets.iter().map(|t| t.map_or(0, |(l, _)| l)).collect();
    let det_cls = logits.cross_entropy(&labels)?;
    let pos: Vec<usize> = (0..rois.len()).filter(|&i| targets[i].is_some()).collect();
    let det_loc = if pos.is_empty() {
        zero(fwd)
    } else {
        let pairs: Vec<(CellBox, CellBox)> = pos.iter().map(|&i| (rois[i], targets[i].unwrap().1)).collect();
        offsets.select_rows(&pos)?.smooth_l1(offsets_target(fwd, &pairs)?)?
    };
    Ok((det_loc, det_cls))
}

pub(super) fn episode_loss<'t>(
    det: &Detector,
    fwd: &mut Forward<'t, '_>,
    query: &SceneSample,
    classes: &[usize],
    supports: &[Tensor],
) -> Result<EpisodeLoss<'t>> {
    let cfg = &det.cfg;
    if classes.is_empty() || classes.len() != supports.len() {
        return Err(Error::Contract(format!(
            "{} classes with {} support sets",
            classes.len(),
            supports.len()
        )));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= cfg.n_classes) {
        return Err(Error::Contract(format!("class {c} outside the classifier's {} classes", cfg.n_classes)));
    }
    let gt: Vec<(CellBox, usize)> = query
        .boxes
        .iter()
        .zip(&query.labels)
        .filter_map(|(b, l)| classes.iter().position(|c| c == l).map(|j| (*b, j)))
        .collect();
    if gt.is_empty() {
        return Err(Error::Contract("query holds no instance of the episode classes".into()));
    }
    let (h, w) = (query.grid.height, query.grid.width);
    let anchors = super::anchors(h, w, &cfg.anchor_sizes)?;
    let fm = det.backbone(fwd, fwd.constant(query.grid.data.clone()))?;

    let mut protos = Vec::with_capacity(classes.len());
    for (&c, raw) in classes.iter().zip(supports) {
        protos.push(det.class_prototypes(fwd, c, raw)?);
    }

    let refined: Vec<Var<'t>> = protos.iter().map(|p| p.refined).collect();
    let meta_labels: Vec<usize> = protos
        .iter()
        .flat_map(|p| std::iter::repeat(p.class_id).take(p.refined.rows()))
        .collect();
    let meta = det
        .meta_logits(fwd, Var::concat_rows(&refined)?)?
        .cross_entropy(&meta_labels)?;

    let mut branches: Vec<BranchLoss<'t>> = Vec::new();
    match cfg.style {
        EpisodeStyle::Allway => {
            let gt_boxes: Vec<CellBox> = gt.iter().map(|(b, _)| *b).collect();
            let (rpn_loc, rpn_cls, rois) = rpn_branch(det, fwd, fm, h, w, &anchors, &gt_boxes)?;
            let feats = det.roi_extract(fm, h, w, &rois)?;
            let mut aggs = Vec::with_capacity(protos.len());
            for p in &protos {
                aggs.push(det.aggregate(fwd, Point::Roi, feats.data, p.roi)?);
            }
            let out = det.head_forward(fwd, &feats, &aggs)?;
            let labelled: Vec<(CellBox, usize)> = gt.iter().map(|(b, j)| (*b, j + 1)).collect();
            let targets = roi_targets(&rois, &labelled, cfg.positive_iou);
            let (det_loc, det_cls) = head_loss(fwd, out.logits, out.offsets, &rois, &targets)?;
            branches.push(BranchLoss {
                rpn_loc,
                rpn_cls,
                det_loc,
                det_cls,
            });
        }
        EpisodeStyle::Pairwise => {
            for (j, p) in protos.iter().enumerate() {
                let own: Vec<CellBox> = gt.iter().filter(|(_, l)| *l == j).map(|(b, _)| *b).collect();
                let sp = p
                    .spatial
                    .ok_or_else(|| Error::Contract("missing spatial prototypes".into()))?;
                let map = det.aggregate(fwd, Point::Spatial, fm, sp)?;
                let (rpn_loc, rpn_cls, rois) = rpn_branch(det, fwd, map, h, w, &anchors, &own)?;
                let feats = det.roi_extract(fm, h, w, &rois)?;
                let agg = det.aggregate(fwd, Point::Roi, feats.data, p.roi)?;
                let out = det.head_forward(fwd, &feats, &[agg])?;
                let labelled: Vec<(CellBox, usize)> = own.iter().map(|b| (*b, 1)).collect();
                let targets = roi_targets(&rois, &labelled, cfg.positive_iou);
                let (det_loc, det_cls) = head_loss(fwd, out.logits, out.offsets, &rois, &targets)?;
                branches.push(BranchLoss {
                    rpn_loc,
                    rpn_cls,
                    det_loc,
                    det_cls,
                });
            }
        }
    }

    let n = branches.len() as f64;
    let average = |pick: fn(&BranchLoss<'t>) -> Var<'t>| -> Result<Var<'t>> {
        let mut acc = pick(&branches[0]);
        for b in &branches[1..] {
            acc = acc.add(pick(b))?;
        }
        if branches.len() > 1 {
            acc = acc.scale(1.0 / n)?;
        }
        Ok(acc)
    };
    let rpn_loc = average(|b| b.rpn_loc)?;
    let rpn_cls = average(|b| b.rpn_cls)?;
    let det_loc = average(|b| b.det_loc)?;
    let det_cls = average(|b| b.det_cls)?;

    let total = rpn_loc.add(rpn_cls)?.add(det_loc)?.add(det_cls)?.add(meta)?;
    let item = |v: Var<'t>| v.value().item();
    let parts = LossBreakdown {
        rpn_loc: item(rpn_loc),
        rpn_cls: item(rpn_cls),
        det_loc: item(det_loc),
        det_cls: item(det_cls),
        meta: item(meta),
        total: item(total),
    };
    Ok(EpisodeLoss { total, parts })
}
