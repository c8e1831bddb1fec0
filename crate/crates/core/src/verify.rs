//! Finite-difference suite over every differentiable tape operation, the
//! attention block, and the full episode loss of small fixture detectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{BaselineVariant, PrototypeMode};
use crate::attention::{scaled_dot_attention, AttentionConfig};
use crate::detector::{Detector, EpisodeStyle, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::tensor::{finite_diff_check, Bindings, GradCheckReport, Mode, Tape, Tensor, Var};
use crate::world::{generate_class_specs, render_labels, SceneParams, SceneSample};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Input magnitude bound for the per-op checks.
pub const INPUT_BOUND: f64 = 3.0;
/// Seed of the frozen end-to-end fixture. Its gradients stay clear of ReLU
/// kinks under `±EPS` and of magnitudes where rounding dominates.
pub const FIXTURE_SEED: u64 = 7;

/// Weighted sum with fixed random weights, so that every output coordinate
/// carries a distinct gradient.
fn probe<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = Tensor::uniform(&v.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37));
    v.mul(tape.constant(w))?.sum()
}

fn inputs(shapes: &[&[usize]], seed: u64) -> Vec<(String, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("x{i}"), Tensor::uniform(s, INPUT_BOUND, &mut rng)))
        .collect()
}

/// One report per operation, keyed by operation name.
pub fn op_reports(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, $shapes:expr, $f:expr) => {
            out.push((
                $name.to_string(),
                finite_diff_check($f, &inputs($shapes, seed), EPS, TOLERANCE)?,
            ));
        };
    }
    check!("matmul", &[&[3, 4], &[4, 2]], |t, x| probe(t, x[0].matmul(x[1])?, 1));
    check!("matmul_t", &[&[3, 4], &[2, 4]], |t, x| probe(t, x[0].matmul_t(x[1])?, 2));
    check!("transpose", &[&[3, 2]], |t, x| probe(t, x[0].transpose()?, 3));
    check!("add", &[&[3, 4], &[3, 4]], |t, x| probe(t, x[0].add(x[1])?, 4));
    check!("add_row", &[&[3, 4], &[4]], |t, x| probe(t, x[0].add(x[1])?, 5));
    check!("add_scalar", &[&[3, 4], &[]], |t, x| probe(t, x[0].add(x[1])?, 6));
    check!("sub", &[&[3, 4], &[3, 4]], |t, x| probe(t, x[0].sub(x[1])?, 7));
    check!("mul", &[&[3, 4], &[3, 4]], |t, x| probe(t, x[0].mul(x[1])?, 8));
    check!("mul_row", &[&[3, 4], &[4]], |t, x| probe(t, x[0].mul(x[1])?, 9));
    check!("scale", &[&[3, 4]], |t, x| probe(t, x[0].scale(-0.7)?, 10));
    check!("relu", &[&[4, 5]], |t, x| probe(t, x[0].relu()?, 11));
    check!("softmax_rows", &[&[3, 5]], |t, x| probe(t, x[0].softmax_rows()?, 12));
    check!("layer_norm", &[&[3, 5], &[5], &[5]], |t, x| {
        probe(t, x[0].layer_norm(x[1], x[2], 1e-5)?, 13)
    });
    check!("dropout_eval", &[&[3, 4]], |t, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        probe(t, x[0].dropout(0.1, Mode::Eval, &mut rng)?, 14)
    });
    check!("sum", &[&[3, 4]], |_, x| x[0].mul(x[0])?.sum());
    check!("mean", &[&[3, 4]], |_, x| x[0].mul(x[0])?.mean());
    check!("mean_rows", &[&[4, 3]], |t, x| probe(t, x[0].mean_rows()?, 15));
    check!("smooth_l1", &[&[3, 4], &[3, 4]], |_, x| x[0].smooth_l1(x[1]));
    check!("cross_entropy", &[&[4, 3]], |_, x| x[0].cross_entropy(&[0, 2, 1, 2]));
    check!("select_rows", &[&[4, 3]], |t, x| probe(t, x[0].select_rows(&[3, 0, 3])?, 16));
    check!("concat_cols", &[&[3, 2], &[3, 4]], |t, x| {
        probe(t, Var::concat_cols(&[x[0], x[1]])?, 17)
    });
    check!("concat_rows", &[&[2, 3], &[1, 3]], |t, x| {
        probe(t, Var::concat_rows(&[x[0], x[1]])?, 18)
    });
    check!("box_mean_pool", &[&[12, 3]], |t, x| {
        probe(t, x[0].box_mean_pool(3, 4, &[[0, 0, 2, 2], [1, 1, 4, 3], [3, 2, 4, 3]])?, 19)
    });
    check!("attention", &[&[3, 4], &[5, 4], &[5, 4]], |t, x| {
        probe(t, scaled_dot_attention(x[0], x[1], x[2])?, 20)
    });
    Ok(out)
}

/// Attention settings of the end-to-end fixture: full depth and head count,
/// narrow MLP, and uniform init for every projection so the check runs at a
/// generic point rather than at identity value/output weights.
pub fn fixture_attention(dim: usize) -> AttentionConfig {
    AttentionConfig {
        model_dim: dim,
        mlp_hidden: 16,
        identity_value_init: false,
        ..AttentionConfig::default()
    }
}

/// The detector variants covered by the end-to-end check.
pub fn fixture_models() -> Vec<(String, ModelConfig)> {
    let base = ModelConfig {
        dim: 8,
        n_classes: 3,
        attention: fixture_attention(8),
        train_top_k: 64,
        ..ModelConfig::default()
    };
    vec![
        ("allway_full".into(), base.clone()),
        (
            "pairwise_full".into(),
            ModelConfig {
                style: EpisodeStyle::Pairwise,
                ..base.clone()
            },
        ),
        (
            "allway_full_unfused".into(),
            ModelConfig {
                qsam_fusion: false,
                ..base.clone()
            },
        ),
        (
            "allway_baseline".into(),
            ModelConfig {
                isam: false,
                qsam: false,
                prototype_mode: PrototypeMode::Averaged,
                baseline_variant: BaselineVariant::MultSubId,
                ..base.clone()
            },
        ),
        (
            "pairwise_isam_only".into(),
            ModelConfig {
                style: EpisodeStyle::Pairwise,
                qsam: false,
                prototype_mode: PrototypeMode::Averaged,
                ..base
            },
        ),
    ]
}

/// 4×4 query holding one instance each of classes 0 and 1, with two support
/// crops per class.
pub fn fixture_episode(dim: usize, seed: u64) -> Result<(SceneSample, Vec<usize>, Vec<Tensor>)> {
    let specs = generate_class_specs(3, dim, 2, seed)?;
    let params = SceneParams {
        height: 4,
        width: 4,
        noise: 0.2,
        min_box: 2,
        max_box: 2,
    };
    let scene = render_labels(&specs, &[0, 1], &params, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let supports = vec![
        Tensor::uniform(&[2, dim], 1.0, &mut rng),
        Tensor::uniform(&[2, dim], 1.0, &mut rng),
    ];
    Ok((scene, vec![0, 1], supports))
}

/// Gradient of the eval-mode episode loss with respect to every parameter;
/// entries are named `group/parameter`.
pub fn end_to_end_report(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let det = Detector::init(cfg.clone(), seed)?;
    let (scene, classes, supports) = fixture_episode(cfg.dim, seed)?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (group, members) in det.param_groups() {
        for name in members {
            let t = det
                .params
                .get(&name)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            tensors.push((format!("{group}/{name}"), t.clone()));
            names.push(name);
        }
    }
    finite_diff_check(
        |tape, vars| {
            let b = Bindings::from_vars(&names, vars);
            let mut fwd = Forward::new(tape, &b, Mode::Eval, seed);
            Ok(det.episode_loss(&mut fwd, &scene, &classes, &supports)?.total)
        },
        &tensors,
        EPS,
        TOLERANCE,
    )
}

/// Every check merged into one report: per-op inputs drawn from `seed`,
/// end-to-end fixtures from [`FIXTURE_SEED`].
pub fn gradient_suite(seed: u64) -> Result<GradCheckReport> {
    let mut reports = op_reports(seed)?;
    for (name, cfg) in fixture_models() {
        reports.push((format!("end_to_end/{name}"), end_to_end_report(&cfg, FIXTURE_SEED)?));
    }
    Ok(GradCheckReport::merge(reports, TOLERANCE))
}
