//! Synthetic feature-grid scenes with multi-modal classes and base/novel
//! splits.
//!
//! Every class owns `M` signature vectors (appearance modes). An instance
//! picks one mode, jitters it once by `mode_spread`, and paints it into its
//! box; every painted or background cell then gets isotropic `noise`. Later
//! instances overwrite earlier ones where boxes overlap.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregation::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{CellRect, Tensor};

/// Axis-aligned box in grid cells, `[x1, x2) × [y1, y2)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl CellBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        CellBox { x1, y1, x2, y2 }
    }

    pub fn square(x: usize, y: usize, size: usize) -> Self {
        CellBox::new(x, y, x + size, y + size)
    }

    pub fn width(&self) -> usize {
        self.x2.saturating_sub(self.x1)
    }

    pub fn height(&self) -> usize {
        self.y2.saturating_sub(self.y1)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.is_valid() && self.x2 <= width && self.y2 <= height
    }

    pub fn intersection(&self, other: &CellBox) -> usize {
        let w = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let h = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        w * h
    }

    /// Intersection over union; 0 when either box is empty.
    pub fn iou(&self, other: &CellBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn rect(&self) -> CellRect {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x1 + self.x2) as f64 / 2.0,
            (self.y1 + self.y2) as f64 / 2.0,
        )
    }
}

/// Mixes a run seed with a tag and an index into an independent stream seed.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix(seed ^ 0x5EED_0F_5EED);
    for b in tag.bytes() {
        h = splitmix(h ^ b as u64);
    }
    splitmix(h ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    /// `M` signature vectors of length `d`.
    pub modes: Vec<Vec<f64>>,
    pub mode_spread: f64,
}

impl ClassSpec {
    pub fn dim(&self) -> usize {
        self.modes.first().map_or(0, Vec::len)
    }
}

/// Shape of the signature distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureParams {
    /// Std of each class center coordinate.
    pub center_scale: f64,
    /// Std of each mode's offset from its class center.
    pub mode_scale: f64,
    pub mode_spread: f64,
    /// Minimum L2 distance between signatures of different classes.
    pub min_separation: f64,
    pub max_retries: usize,
}

impl Default for SignatureParams {
    fn default() -> Self {
        SignatureParams {
            center_scale: 1.0,
            mode_scale: 1.6,
            mode_spread: 0.15,
            min_separation: 1.5,
            max_retries: 1000,
        }
    }
}

/// Class specs with default signature parameters.
pub fn generate_class_specs(
    n_classes: usize,
    d: usize,
    modes_per_class: usize,
    seed: u64,
) -> Result<Vec<ClassSpec>> {
    generate_class_specs_with(n_classes, d, modes_per_class, &SignatureParams::default(), seed)
}

/// Draws each class as a center plus `M` mode offsets, resampling a class
/// whose signatures fall within `min_separation` of an earlier class.
pub fn generate_class_specs_with(
    n_classes: usize,
    d: usize,
    modes_per_class: usize,
    params: &SignatureParams,
    seed: u64,
) -> Result<Vec<ClassSpec>> {
    if n_classes < 2 || d < 2 || modes_per_class < 1 {
        return Err(Error::Parameter(format!(
            "need n_classes >= 2, d >= 2, modes >= 1 (got {n_classes}, {d}, {modes_per_class})"
        )));
    }
    let mut rng = rng_for(seed, "class_specs", 0);
    let mut specs: Vec<ClassSpec> = Vec::with_capacity(n_classes);
    for class_id in 0..n_classes {
        let mut attempt = 0;
        let modes = loop {
            if attempt == params.max_retries {
                return Err(Error::Generation(format!(
                    "class {class_id}: no signatures {} apart after {attempt} draws",
                    params.min_separation
                )));
            }
            attempt += 1;
            let center: Vec<f64> = (0..d).map(|_| params.center_scale * normal(&mut rng)).collect();
            let modes: Vec<Vec<f64>> = (0..modes_per_class)
                .map(|_| center.iter().map(|c| c + params.mode_scale * normal(&mut rng)).collect())
                .collect();
            let separated = specs.iter().all(|s| {
                s.modes
                    .iter()
                    .all(|a| modes.iter().all(|b| l2(a, b) >= params.min_separation))
            });
            if separated {
                break modes;
            }
        };
        specs.push(ClassSpec {
            class_id,
            modes,
            mode_spread: params.mode_spread,
        });
    }
    Ok(specs)
}

pub(crate) fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Smallest L2 distance between signatures of different classes.
pub fn min_cross_class_distance(specs: &[ClassSpec]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            for x in &a.modes {
                for y in &b.modes {
                    best = best.min(l2(x, y));
                }
            }
        }
    }
    best
}

/// Grid layout and noise of rendered scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub min_box: usize,
    pub max_box: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 16,
            width: 16,
            noise: 0.2,
            min_box: 2,
            max_box: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub seed: u64,
    pub grid: FeatureMap,
    pub boxes: Vec<CellBox>,
    pub labels: Vec<usize>,
    /// Mode index of each instance.
    pub modes: Vec<usize>,
}

impl SceneSample {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn instances_of(&self, class_id: usize) -> impl Iterator<Item = &CellBox> + '_ {
        self.boxes
            .iter()
            .zip(&self.labels)
            .filter(move |(_, &l)| l == class_id)
            .map(|(b, _)| b)
    }
}

/// Renders `instances_per_scene` instances of classes drawn uniformly from
/// `specs`, with default box sizes.
pub fn render_scene(
    specs: &[ClassSpec],
    instances_per_scene: usize,
    height: usize,
    width: usize,
    noise: f64,
    seed: u64,
) -> Result<SceneSample> {
    if specs.is_empty() {
        return Err(Error::Parameter("no class specs to render".into()));
    }
    let params = SceneParams {
        height,
        width,
        noise,
        ..SceneParams::default()
    };
    let mut rng = rng_for(seed, "scene_labels", 0);
    let labels: Vec<usize> = (0..instances_per_scene)
        .map(|_| specs[rng.gen_range(0..specs.len())].class_id)
        .collect();
    render_labels(specs, &labels, &params, seed)
}

/// Renders one instance per entry of `labels`, in painter order.
pub fn render_labels(
    specs: &[ClassSpec],
    labels: &[usize],
    params: &SceneParams,
    seed: u64,
) -> Result<SceneSample> {
    if labels.is_empty() {
        return Err(Error::Parameter("a scene needs at least one instance".into()));
    }
    let (h, w) = (params.height, params.width);
    if params.min_box == 0 || params.min_box > params.max_box {
        return Err(Error::Parameter(format!(
            "box sizes {}..={} invalid",
            params.min_box, params.max_box
        )));
    }
    if params.max_box > h || params.max_box > w {
        return Err(Error::Placement(format!(
            "boxes up to {} cells cannot fit a {h}x{w} grid",
            params.max_box
        )));
    }
    let d = specs.first().map_or(0, ClassSpec::dim);
    let mut rng = rng_for(seed, "scene", 0);
    let mut grid = vec![0.0; h * w * d];
    let mut boxes = Vec::with_capacity(labels.len());
    let mut modes = Vec::with_capacity(labels.len());
    for &label in labels {
        let spec = specs
            .iter()
            .find(|s| s.class_id == label)
            .ok_or_else(|| Error::Parameter(format!("unknown class {label}")))?;
        let bw = rng.gen_range(params.min_box..=params.max_box);
        let bh = rng.gen_range(params.min_box..=params.max_box);
        let x1 = rng.gen_range(0..=w - bw);
        let y1 = rng.gen_range(0..=h - bh);
        let mode = rng.gen_range(0..spec.modes.len());
        let look: Vec<f64> = spec.modes[mode]
            .iter()
            .map(|v| v + spec.mode_spread * normal(&mut rng))
            .collect();
        for y in y1..y1 + bh {
            for x in x1..x1 + bw {
                let cell = (y * w + x) * d;
                grid[cell..cell + d].copy_from_slice(&look);
            }
        }
        boxes.push(CellBox::new(x1, y1, x1 + bw, y1 + bh));
        modes.push(mode);
    }
    if params.noise != 0.0 {
        for v in &mut grid {
            *v += params.noise * normal(&mut rng);
        }
    }
    Ok(SceneSample {
        seed,
        grid: FeatureMap::new(h, w, Tensor::matrix(h * w, d, grid)?)?,
        boxes,
        labels: labels.to_vec(),
        modes,
    })
}

/// Mean of the grid cells inside `b`, as a `1×d` row.
pub fn crop_support(scene: &SceneSample, b: &CellBox) -> Result<Tensor> {
    crop_mean(&scene.grid, b)
}

pub fn crop_mean(fm: &FeatureMap, b: &CellBox) -> Result<Tensor> {
    if !b.fits(fm.height, fm.width) {
        return Err(Error::Bounds(format!(
            "box {:?} outside {}x{} grid",
            b.rect(),
            fm.height,
            fm.width
        )));
    }
    let d = fm.dim();
    let mut acc = vec![0.0; d];
    for y in b.y1..b.y2 {
        for x in b.x1..b.x2 {
            for (a, v) in acc.iter_mut().zip(fm.cell(x, y)) {
                *a += v;
            }
        }
    }
    let n = b.area() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::matrix(1, d, acc)
}

/// One annotated support instance: a single-instance scene and its crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportShot {
    pub class_id: usize,
    pub scene: SceneSample,
    pub crop: Vec<f64>,
}

impl SupportShot {
    pub fn new(scene: SceneSample) -> Result<Self> {
        let crop = crop_support(&scene, &scene.boxes[0])?.into_values();
        Ok(SupportShot {
            class_id: scene.labels[0],
            scene,
            crop,
        })
    }
}

/// All generator knobs of a synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub dim: usize,
    pub n_base: usize,
    pub n_novel: usize,
    pub modes_per_class: usize,
    pub max_instances: usize,
    pub signature: SignatureParams,
    pub scene: SceneParams,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            dim: 16,
            n_base: 6,
            n_novel: 3,
            modes_per_class: 3,
            max_instances: 3,
            signature: SignatureParams::default(),
            scene: SceneParams::default(),
        }
    }
}

impl WorldConfig {
    pub fn n_classes(&self) -> usize {
        self.n_base + self.n_novel
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: format!("world.{field}"),
                reason,
            })
        };
        if self.dim < 2 {
            return bad("dim", "must be >= 2".into());
        }
        if self.n_base < 1 || self.n_novel < 1 || self.n_classes() < 2 {
            return bad("n_novel", "need >= 1 base and >= 1 novel class".into());
        }
        if self.modes_per_class < 1 {
            return bad("modes_per_class", "must be >= 1".into());
        }
        if self.max_instances < 1 {
            return bad("max_instances", "must be >= 1".into());
        }
        if self.scene.min_box < 1 || self.scene.min_box > self.scene.max_box {
            return bad("scene.min_box", "need 1 <= min_box <= max_box".into());
        }
        if self.scene.max_box > self.scene.height.min(self.scene.width) {
            return bad("scene.max_box", "boxes must fit the grid".into());
        }
        if !(self.scene.noise >= 0.0) || !(self.signature.mode_spread >= 0.0) {
            return bad("scene.noise", "noise scales must be >= 0".into());
        }
        if !(self.signature.min_separation >= 0.0) {
            return bad("signature.min_separation", "must be >= 0".into());
        }
        Ok(())
    }

    pub fn specs(&self, seed: u64) -> Result<Vec<ClassSpec>> {
        generate_class_specs_with(
            self.n_classes(),
            self.dim,
            self.modes_per_class,
            &self.signature,
            seed,
        )
    }
}

/// Which pool a scene comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    /// Base-class scenes for base training.
    Base,
    /// Held-out scenes over all classes.
    Test,
}

impl Pool {
    fn tag(self) -> &'static str {
        match self {
            Pool::Base => "pool_base",
            Pool::Test => "pool_test",
        }
    }
}

/// Disjoint base/novel classes, scene pools and frozen `K`-shot sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub k: usize,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub specs: Vec<ClassSpec>,
    pub scene: SceneParams,
    pub max_instances: usize,
    /// `K` single-instance shots per class, for base and novel classes.
    pub frozen: BTreeMap<usize, Vec<SupportShot>>,
}

/// Splits `specs` into base and novel classes and freezes `K` shots per
/// class. The class assignment depends on `seed` only, not on `K`.
pub fn make_split(
    specs: &[ClassSpec],
    n_base: usize,
    n_novel: usize,
    k: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    make_split_with(specs, n_base, n_novel, k, &SceneParams::default(), 3, seed)
}

pub fn make_split_with(
    specs: &[ClassSpec],
    n_base: usize,
    n_novel: usize,
    k: usize,
    scene: &SceneParams,
    max_instances: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if n_base + n_novel > specs.len() || n_base == 0 || n_novel == 0 {
        return Err(Error::Parameter(format!(
            "{n_base} base + {n_novel} novel classes from {} specs",
            specs.len()
        )));
    }
    if k == 0 {
        return Err(Error::Parameter("K must be >= 1".into()));
    }
    if max_instances == 0 {
        return Err(Error::Parameter("max_instances must be >= 1".into()));
    }
    let mut ids: Vec<usize> = specs.iter().map(|s| s.class_id).collect();
    ids.shuffle(&mut rng_for(seed, "class_split", 0));
    let mut base_classes = ids[..n_base].to_vec();
    let mut novel_classes = ids[n_base..n_base + n_novel].to_vec();
    base_classes.sort_unstable();
    novel_classes.sort_unstable();
    let mut split = DatasetSplit {
        seed,
        k,
        base_classes,
        novel_classes,
        specs: specs.to_vec(),
        scene: scene.clone(),
        max_instances,
        frozen: BTreeMap::new(),
    };
    for c in split.all_classes() {
        let shots = (0..k)
            .map(|i| split.single_instance(c, "shot", i as u64).and_then(SupportShot::new))
            .collect::<Result<Vec<_>>>()?;
        split.frozen.insert(c, shots);
    }
    Ok(split)
}

impl DatasetSplit {
    /// `C_b ∪ C_n`, ascending.
    pub fn all_classes(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .base_classes
            .iter()
            .chain(&self.novel_classes)
            .copied()
            .collect();
        all.sort_unstable();
        all
    }

    pub fn is_novel(&self, class_id: usize) -> bool {
        self.novel_classes.contains(&class_id)
    }

    pub fn dim(&self) -> usize {
        self.specs.first().map_or(0, ClassSpec::dim)
    }

    /// A scene holding exactly one instance of `class_id`.
    pub fn single_instance(&self, class_id: usize, tag: &str, index: u64) -> Result<SceneSample> {
        let seed = derive_seed(self.seed, tag, index.wrapping_mul(1 << 20) + class_id as u64);
        render_labels(&self.specs, &[class_id], &self.scene, seed)
    }

    /// Scene `index` of `pool`, with 1 to `max_instances` instances.
    pub fn pool_scene(&self, pool: Pool, index: u64) -> Result<SceneSample> {
        let classes = match pool {
            Pool::Base => self.base_classes.clone(),
            Pool::Test => self.all_classes(),
        };
        let seed = derive_seed(self.seed, pool.tag(), index);
        let mut rng = rng_for(seed, "labels", 0);
        let n = rng.gen_range(1..=self.max_instances);
        let labels: Vec<usize> = (0..n).map(|_| classes[rng.gen_range(0..classes.len())]).collect();
        render_labels(&self.specs, &labels, &self.scene, seed)
    }

    /// A scene from `classes` whose first instance is `class_id`.
    pub fn scene_with(
        &self,
        class_id: usize,
        classes: &[usize],
        tag: &str,
        index: u64,
    ) -> Result<SceneSample> {
        let seed = derive_seed(self.seed, tag, index);
        let mut rng = rng_for(seed, "labels", 0);
        let n = rng.gen_range(1..=self.max_instances);
        let mut labels = vec![class_id];
        labels.extend((1..n).map(|_| classes[rng.gen_range(0..classes.len())]));
        render_labels(&self.specs, &labels, &self.scene, seed)
    }

    pub fn frozen_shots(&self, class_id: usize) -> Result<&[SupportShot]> {
        self.frozen
            .get(&class_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("no frozen shots for class {class_id}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Builds specs and a split from a world config.
pub fn build_world(cfg: &WorldConfig, k: usize, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let specs = cfg.specs(seed)?;
    make_split_with(&specs, cfg.n_base, cfg.n_novel, k, &cfg.scene, cfg.max_instances, seed)
}
