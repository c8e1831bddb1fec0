//! Query/support aggregation: the spatial (whole feature map) and RoI
//! procedures built from the attention stacks, and the single averaged
//! prototype baselines.

use serde::{Deserialize, Serialize};

use crate::attention::{isam_refine, qsam_aggregate, DecoderStack, EncoderStack};
use crate::error::{dim_err, Error, Result};
use crate::nn::Forward;
use crate::tensor::{Tensor, Var};
use crate::world::CellBox;

/// `H×W` grid of `d`-vectors stored as an `H·W × d` matrix in row-major
/// spatial order. `T` is a [`Tensor`] or a tape [`Var`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap<T = Tensor> {
    pub height: usize,
    pub width: usize,
    pub data: T,
}

impl FeatureMap<Tensor> {
    pub fn new(height: usize, width: usize, data: Tensor) -> Result<Self> {
        let (rows, _) = data.dims2()?;
        if rows != height * width || height == 0 || width == 0 {
            return dim_err(format!("{rows} rows for a {height}x{width} map"));
        }
        Ok(FeatureMap { height, width, data })
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        self.data.row(y * self.width + x)
    }

    pub fn on_tape<'t>(&self, fwd: &Forward<'t, '_>) -> FeatureMap<Var<'t>> {
        FeatureMap {
            height: self.height,
            width: self.width,
            data: fwd.constant(self.data.clone()),
        }
    }

    /// Swaps the spatial axes.
    pub fn transposed(&self) -> Result<Self> {
        let idx = transpose_index(self.height, self.width);
        FeatureMap::new(self.width, self.height, self.data.select_rows(&idx)?)
    }
}

/// Row permutation that transposes an `H×W` grid stored row-major.
pub fn transpose_index(height: usize, width: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(height * width);
    for x in 0..width {
        for y in 0..height {
            idx.push(y * width + x);
        }
    }
    idx
}

impl<'t> FeatureMap<Var<'t>> {
    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn detach(&self) -> FeatureMap<Tensor> {
        FeatureMap {
            height: self.height,
            width: self.width,
            data: self.data.value().as_ref().clone().with_grad(false),
        }
    }
}

/// Pooled RoI vectors with the boxes they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct RoIFeatures<T = Tensor> {
    pub boxes: Vec<CellBox>,
    pub data: T,
}

impl<T> RoIFeatures<T> {
    pub fn count(&self) -> usize {
        self.boxes.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    /// Every support vector is its own prototype.
    PerSample,
    /// One prototype per class: the mean of the supports.
    Averaged,
}

impl PrototypeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PrototypeMode::PerSample => "per_sample",
            PrototypeMode::Averaged => "averaged",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    /// `query ⊙ proto`.
    Mult,
    /// `[query ⊙ proto, query − proto, query]`.
    MultSubId,
}

impl BaselineVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineVariant::Mult => "mult",
            BaselineVariant::MultSubId => "mult_sub_id",
        }
    }

    /// Width of the aggregated feature for a `d`-wide query.
    pub fn output_width(self, d: usize) -> usize {
        match self {
            BaselineVariant::Mult => d,
            BaselineVariant::MultSubId => 3 * d,
        }
    }
}

/// Prototypes of one class: `K×d` (per-sample) or `1×d` (averaged).
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<T = Tensor> {
    pub class_id: usize,
    pub vectors: T,
    pub mode: PrototypeMode,
}

impl PrototypeSet<Tensor> {
    pub fn new(class_id: usize, vectors: Tensor, mode: PrototypeMode) -> Result<Self> {
        let (rows, _) = vectors.dims2()?;
        if rows == 0 {
            return Err(Error::EmptyInput(format!("class {class_id} has no prototypes")));
        }
        if mode == PrototypeMode::Averaged && rows != 1 {
            return Err(Error::Contract(format!(
                "averaged prototype set with {rows} rows"
            )));
        }
        Ok(PrototypeSet {
            class_id,
            vectors,
            mode,
        })
    }

    pub fn on_tape<'t>(&self, fwd: &Forward<'t, '_>) -> PrototypeSet<Var<'t>> {
        PrototypeSet {
            class_id: self.class_id,
            vectors: fwd.constant(self.vectors.clone()),
            mode: self.mode,
        }
    }
}

/// The attention modules attached to one aggregation point. Either may be
/// absent for ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct StackPair {
    pub isam: Option<EncoderStack>,
    pub qsam: Option<DecoderStack>,
}

impl StackPair {
    /// Applies the encoder (when present) to per-sample supports.
    pub fn refine<'t>(&self, fwd: &mut Forward<'t, '_>, supports: Var<'t>) -> Result<Var<'t>> {
        match &self.isam {
            Some(stack) => isam_refine(fwd, supports, stack),
            None => Ok(supports),
        }
    }

    fn qsam(&self) -> Result<&DecoderStack> {
        self.qsam
            .as_ref()
            .ok_or_else(|| Error::Contract("per-sample aggregation needs a decoder stack".into()))
    }
}

fn require_per_sample<T>(protos: &PrototypeSet<T>) -> Result<()> {
    if protos.mode != PrototypeMode::PerSample {
        return Err(Error::Contract(
            "attention aggregation expects per-sample prototypes".into(),
        ));
    }
    Ok(())
}

/// Spatial aggregation with already-refined supports: the map is flattened
/// to `H·W` queries, aggregated, and reshaped back.
pub fn aggregate_spatial_refined<'t>(
    fwd: &mut Forward<'t, '_>,
    fm: &FeatureMap<Var<'t>>,
    refined: &PrototypeSet<Var<'t>>,
    qsam: &DecoderStack,
) -> Result<FeatureMap<Var<'t>>> {
    require_per_sample(refined)?;
    if fm.dim() != refined.vectors.cols() {
        return dim_err(format!(
            "feature map width {} vs prototypes {}",
            fm.dim(),
            refined.vectors.cols()
        ));
    }
    let data = qsam_aggregate(fwd, fm.data, refined.vectors, qsam)?;
    Ok(FeatureMap {
        height: fm.height,
        width: fm.width,
        data,
    })
}

/// Query spatial aggregation: refine the supports, then aggregate every cell
/// of the query map against them.
pub fn query_spatial_aggregation<'t>(
    fwd: &mut Forward<'t, '_>,
    fm: &FeatureMap<Var<'t>>,
    protos: &PrototypeSet<Var<'t>>,
    stacks: &StackPair,
) -> Result<FeatureMap<Var<'t>>> {
    require_per_sample(protos)?;
    let refined = PrototypeSet {
        class_id: protos.class_id,
        vectors: stacks.refine(fwd, protos.vectors)?,
        mode: protos.mode,
    };
    aggregate_spatial_refined(fwd, fm, &refined, stacks.qsam()?)
}

/// RoI aggregation with already-refined supports.
pub fn aggregate_roi_refined<'t>(
    fwd: &mut Forward<'t, '_>,
    rois: &RoIFeatures<Var<'t>>,
    refined: &PrototypeSet<Var<'t>>,
    qsam: &DecoderStack,
) -> Result<RoIFeatures<Var<'t>>> {
    require_per_sample(refined)?;
    if rois.count() == 0 {
        return Err(Error::EmptyInput("no RoIs to aggregate".into()));
    }
    Ok(RoIFeatures {
        boxes: rois.boxes.clone(),
        data: qsam_aggregate(fwd, rois.data, refined.vectors, qsam)?,
    })
}

/// Query RoI aggregation: refine the supports, then aggregate each RoI
/// vector against them. Boxes pass through.
pub fn query_roi_aggregation<'t>(
    fwd: &mut Forward<'t, '_>,
    rois: &RoIFeatures<Var<'t>>,
    protos: &PrototypeSet<Var<'t>>,
    stacks: &StackPair,
) -> Result<RoIFeatures<Var<'t>>> {
    require_per_sample(protos)?;
    if rois.count() == 0 {
        return Err(Error::EmptyInput("no RoIs to aggregate".into()));
    }
    let refined = PrototypeSet {
        class_id: protos.class_id,
        vectors: stacks.refine(fwd, protos.vectors)?,
        mode: protos.mode,
    };
    aggregate_roi_refined(fwd, rois, &refined, stacks.qsam()?)
}

/// Mean of the support rows as a `1×d` prototype.
pub fn average_prototype<'t>(supports: Var<'t>) -> Result<Var<'t>> {
    if supports.rows() == 0 {
        return Err(Error::EmptyInput("no support vectors to average".into()));
    }
    supports.mean_rows()
}

/// Aggregates queries with one broadcast prototype.
pub fn baseline_aggregate<'t>(
    query: Var<'t>,
    proto: Var<'t>,
    variant: BaselineVariant,
) -> Result<Var<'t>> {
    let ps = proto.shape();
    if ps.len() != 2 || ps[0] != 1 || ps[1] != query.cols() {
        return dim_err(format!(
            "prototype {ps:?} against queries {:?}",
            query.shape()
        ));
    }
    let prod = query.mul(proto)?;
    match variant {
        BaselineVariant::Mult => Ok(prod),
        BaselineVariant::MultSubId => Var::concat_cols(&[prod, query.sub(proto)?, query]),
    }
}

/// Row-wise baseline fusion of each query with its own aggregated vector.
pub fn fuse_rows<'t>(query: Var<'t>, aggregated: Var<'t>, variant: BaselineVariant) -> Result<Var<'t>> {
    if query.shape() != aggregated.shape() {
        return dim_err(format!(
            "aggregated {:?} against queries {:?}",
            aggregated.shape(),
            query.shape()
        ));
    }
    let prod = query.mul(aggregated)?;
    match variant {
        BaselineVariant::Mult => Ok(prod),
        BaselineVariant::MultSubId => Var::concat_cols(&[prod, query.sub(aggregated)?, query]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;
    use crate::tensor::{ParamStore, Tape};
    use crate::testutil::{self as r, max_abs_diff, permutations};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[rows, cols], 1.5, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn stacks(d: usize, seed: u64) -> (ParamStore, StackPair) {
        let cfg = AttentionConfig {
            model_dim: d,
            mlp_hidden: 2 * d,
            ..AttentionConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let isam = EncoderStack::init(&mut store, "isam", &cfg, &mut rng).unwrap();
        let qsam = DecoderStack::init(&mut store, "qsam", &cfg, &mut rng).unwrap();
        (
            store,
            StackPair {
                isam: Some(isam),
                qsam: Some(qsam),
            },
        )
    }

    fn spatial(store: &ParamStore, st: &StackPair, fm: &FeatureMap, s: &Tensor) -> FeatureMap {
        let tape = Tape::new();
        let b = store.bind_frozen(&tape);
        let mut fwd = Forward::eval(&tape, &b);
        let protos = PrototypeSet::new(0, s.clone(), PrototypeMode::PerSample).unwrap();
        let (fm, protos) = (fm.on_tape(&fwd), protos.on_tape(&fwd));
        let out = query_spatial_aggregation(&mut fwd, &fm, &protos, st).unwrap();
        out.detach()
    }

    fn roi(store: &ParamStore, st: &StackPair, boxes: Vec<CellBox>, x: &Tensor, s: &Tensor) -> (Vec<CellBox>, Tensor) {
        let tape = Tape::new();
        let b = store.bind_frozen(&tape);
        let mut fwd = Forward::eval(&tape, &b);
        let protos = PrototypeSet::new(0, s.clone(), PrototypeMode::PerSample).unwrap();
        let rois = RoIFeatures {
            boxes,
            data: fwd.constant(x.clone()),
        };
        let protos = protos.on_tape(&fwd);
        let out = query_roi_aggregation(&mut fwd, &rois, &protos, st).unwrap();
        let v = out.data.value().as_ref().clone();
        (out.boxes, v)
    }

    #[test]
    fn spatial_preserves_shape_and_matches_module_composition() {
        let (store, st) = stacks(4, 1);
        let fm = FeatureMap::new(2, 2, rand_mat(4, 4, 2)).unwrap();
        let s = rand_mat(2, 4, 3);
        let out = spatial(&store, &st, &fm, &s);
        assert_eq!((out.height, out.width, out.dim()), (2, 2, 4));
        let refined = r::encoder(&store, st.isam.as_ref().unwrap(), &r::mat(&s));
        let want = r::decoder(&store, st.qsam.as_ref().unwrap(), &r::mat(&fm.data), &refined);
        assert!(max_abs_diff(&out.data, &r::tensor(&want)) <= 1e-12);
    }

    #[test]
    fn spatial_is_support_permutation_invariant() {
        let (store, st) = stacks(4, 4);
        let fm = FeatureMap::new(3, 2, rand_mat(6, 4, 5)).unwrap();
        let s = rand_mat(4, 4, 6);
        let base = spatial(&store, &st, &fm, &s);
        for perm in permutations(4) {
            let out = spatial(&store, &st, &fm, &s.select_rows(&perm).unwrap());
            assert!(max_abs_diff(&out.data, &base.data) <= 1e-9);
        }
    }

    #[test]
    fn spatial_commutes_with_transposition() {
        let (store, st) = stacks(4, 7);
        let fm = FeatureMap::new(3, 2, rand_mat(6, 4, 8)).unwrap();
        let s = rand_mat(3, 4, 9);
        let a = spatial(&store, &st, &fm, &s).transposed().unwrap();
        let b = spatial(&store, &st, &fm.transposed().unwrap(), &s);
        assert_eq!((a.height, a.width), (b.height, b.width));
        assert!(max_abs_diff(&a.data, &b.data) <= 1e-9);
    }

    #[test]
    fn roi_boxes_pass_through_and_rows_are_independent() {
        let (store, st) = stacks(4, 10);
        let boxes = vec![CellBox::new(0, 0, 2, 2), CellBox::new(1, 1, 3, 4)];
        let x = rand_mat(2, 4, 11);
        let s = rand_mat(3, 4, 12);
        let (out_boxes, out) = roi(&store, &st, boxes.clone(), &x, &s);
        assert_eq!(out_boxes, boxes);
        let refined = r::encoder(&store, st.isam.as_ref().unwrap(), &r::mat(&s));
        let want = r::decoder(&store, st.qsam.as_ref().unwrap(), &r::mat(&x), &refined);
        assert!(max_abs_diff(&out, &r::tensor(&want)) <= 1e-12);
        let (_, single) = roi(&store, &st, vec![boxes[1]], &x.select_rows(&[1]).unwrap(), &s);
        assert!(max_abs_diff(&single, &out.select_rows(&[1]).unwrap()) <= 1e-9);
    }

    #[test]
    fn roi_rejects_empty() {
        let (store, st) = stacks(4, 13);
        let tape = Tape::new();
        let b = store.bind_frozen(&tape);
        let mut fwd = Forward::eval(&tape, &b);
        let protos = PrototypeSet::new(0, rand_mat(2, 4, 1), PrototypeMode::PerSample).unwrap();
        let rois = RoIFeatures {
            boxes: vec![],
            data: fwd.constant(Tensor::zeros(&[0, 4])),
        };
        let protos = protos.on_tape(&fwd);
        assert!(matches!(
            query_roi_aggregation(&mut fwd, &rois, &protos, &st),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn spatial_rejects_dimension_mismatch_and_averaged_mode() {
        let (store, st) = stacks(4, 14);
        let tape = Tape::new();
        let b = store.bind_frozen(&tape);
        let mut fwd = Forward::eval(&tape, &b);
        let fm = FeatureMap::new(2, 2, rand_mat(4, 3, 1)).unwrap().on_tape(&fwd);
        let p = PrototypeSet::new(0, rand_mat(2, 4, 1), PrototypeMode::PerSample).unwrap();
        let p = p.on_tape(&fwd);
        assert!(query_spatial_aggregation(&mut fwd, &fm, &p, &st).is_err());
        let fm4 = FeatureMap::new(2, 2, rand_mat(4, 4, 1)).unwrap().on_tape(&fwd);
        let avg = PrototypeSet::new(0, rand_mat(1, 4, 1), PrototypeMode::Averaged).unwrap();
        let avg = avg.on_tape(&fwd);
        assert!(matches!(
            query_spatial_aggregation(&mut fwd, &fm4, &avg, &st),
            Err(Error::Contract(_))
        ));
    }

    fn avg(x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(average_prototype(tape.constant(x.clone()))?.value().as_ref().clone())
    }

    fn base(q: &Tensor, p: &Tensor, v: BaselineVariant) -> Result<Tensor> {
        let tape = Tape::new();
        let out = baseline_aggregate(tape.constant(q.clone()), tape.constant(p.clone()), v)?;
        Ok(out.value().as_ref().clone())
    }

    #[test]
    fn average_prototype_cases() {
        let v = Tensor::from_rows(&[[1.5, -2.0]]);
        assert_eq!(avg(&v).unwrap(), v);
        let pm = Tensor::from_rows(&[[1.5, -2.0], [-1.5, 2.0]]);
        assert_eq!(avg(&pm).unwrap().values(), &[0.0, 0.0]);
        let three = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let m = avg(&three).unwrap();
        assert!(m.values().iter().all(|x| (x - 2.0 / 3.0).abs() < 1e-15));
        assert!(matches!(avg(&Tensor::zeros(&[0, 2])), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn average_prototype_is_permutation_invariant_exactly() {
        let x = Tensor::from_rows(&[[0.25, 1.0], [0.5, -2.0], [4.0, 8.0]]);
        let base = avg(&x).unwrap();
        for perm in permutations(3) {
            assert_eq!(avg(&x.select_rows(&perm).unwrap()).unwrap(), base);
        }
    }

    #[test]
    fn baseline_variants() {
        let q = Tensor::from_rows(&[[2.0, 3.0], [-1.0, 0.5]]);
        let ones = Tensor::from_rows(&[[1.0, 1.0]]);
        assert_eq!(base(&q, &ones, BaselineVariant::Mult).unwrap(), q);
        let row = Tensor::from_rows(&[[2.0, 3.0]]);
        assert_eq!(
            base(&row, &row, BaselineVariant::MultSubId).unwrap().values(),
            &[4.0, 9.0, 0.0, 0.0, 2.0, 3.0]
        );
        let p = Tensor::from_rows(&[[4.0, 5.0]]);
        assert_eq!(
            base(&row, &p, BaselineVariant::MultSubId).unwrap().values(),
            &[8.0, 15.0, -2.0, -2.0, 2.0, 3.0]
        );
        assert!(matches!(
            base(&q, &Tensor::from_rows(&[[1.0, 1.0, 1.0]]), BaselineVariant::Mult),
            Err(Error::Dimension(_))
        ));
        assert_eq!(BaselineVariant::MultSubId.output_width(5), 15);
    }

    #[test]
    fn single_shot_paths_consume_the_same_prototype() {
        let s = rand_mat(1, 4, 3);
        let tape = Tape::new();
        let per_sample = tape.constant(s.clone());
        let averaged = average_prototype(tape.constant(s.clone())).unwrap();
        assert_eq!(per_sample.value(), averaged.value());
    }

    #[test]
    fn prototype_set_contracts() {
        assert!(PrototypeSet::new(1, Tensor::zeros(&[0, 3]), PrototypeMode::PerSample).is_err());
        assert!(PrototypeSet::new(1, Tensor::zeros(&[2, 3]), PrototypeMode::Averaged).is_err());
        assert!(PrototypeSet::new(1, Tensor::zeros(&[1, 3]), PrototypeMode::Averaged).is_ok());
    }
}
