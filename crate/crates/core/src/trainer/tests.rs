use super::*;
use crate::attention::AttentionConfig;
use crate::detector::ModelConfig;
use crate::tensor::{finite_diff_check, Bindings};
use crate::world::{build_world, SceneParams, WorldConfig};
use rand::SeedableRng;

fn world(k: usize, seed: u64) -> DatasetSplit {
    let cfg = WorldConfig {
        dim: 8,
        n_base: 3,
        n_novel: 2,
        scene: SceneParams {
            height: 8,
            width: 8,
            ..SceneParams::default()
        },
        ..WorldConfig::default()
    };
    build_world(&cfg, k, seed).unwrap()
}

fn model_cfg(style: EpisodeStyle) -> ModelConfig {
    ModelConfig {
        dim: 8,
        n_classes: 5,
        style,
        attention: AttentionConfig {
            model_dim: 8,
            mlp_hidden: 16,
            ..AttentionConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn train_cfg(phase: Phase, style: EpisodeStyle, iterations: usize) -> TrainConfig {
    TrainConfig {
        phase,
        k_train: 2,
        k_eval: 2,
        iterations,
        style,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn pairwise_episodes_keep_their_contract() {
    let split = world(2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for phase in [Phase::Base, Phase::Finetune] {
        for _ in 0..50 {
            let ep = sample_episode_pairwise(&split, phase, 2, &mut rng).unwrap();
            let classes = ep.classes();
            assert_eq!(classes.len(), 2);
            assert_ne!(classes[0], classes[1]);
            let full = if phase == Phase::Base { 2..=2 } else { 1..=2 };
            assert!(ep.supports.values().all(|t| full.contains(&t.rows()) && t.cols() == 8));
            assert!(!ep.positive.is_empty());
            assert!(ep.positive.iter().all(|c| ep.query.labels.contains(c)));
        }
    }
    let a = sample_episode_pairwise(&split, Phase::Base, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = sample_episode_pairwise(&split, Phase::Base, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn allway_episodes_cover_the_phase_classes() {
    let split = world(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let base = sample_episode_allway(&split, Phase::Base, 3, &mut rng).unwrap();
        assert_eq!(base.classes(), split.base_classes);
        assert_eq!(base.shots(), 3);
        let ft = sample_episode_allway(&split, Phase::Finetune, 2, &mut rng).unwrap();
        assert_eq!(ft.classes(), split.all_classes());
        assert!(ft.supports.values().all(|t| t.rows() == 2 || t.rows() == 1));
        assert_eq!(ft.supports.values().filter(|t| t.rows() == 1).count(), 1);
    }
}

#[test]
fn base_phase_never_consumes_novel_instances() {
    let split = world(2, 3);
    for style in [EpisodeStyle::Pairwise, EpisodeStyle::Allway] {
        let cfg = train_cfg(Phase::Base, style, 0);
        for step in 0..200 {
            let ep = episode_for_step(&split, &cfg, step).unwrap();
            assert!(ep.consumed_labels().iter().all(|&c| !split.is_novel(c)));
            for seeds in ep.support_scenes.values() {
                assert!(!seeds.contains(&ep.query.seed));
                let unique: std::collections::BTreeSet<_> = seeds.iter().collect();
                assert_eq!(unique.len(), seeds.len());
            }
        }
    }
}

#[test]
fn finetune_supports_are_frozen_shots_outside_the_query() {
    let split = world(2, 4);
    let frozen = frozen_supports(&split).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for style in [EpisodeStyle::Pairwise, EpisodeStyle::Allway] {
        for _ in 0..20 {
            let ep = sample_episode(&split, Phase::Finetune, style, 2, &mut rng).unwrap();
            for (c, t) in &ep.supports {
                let shots = split.frozen_shots(*c).unwrap();
                let kept: Vec<usize> = (0..shots.len()).filter(|&i| shots[i].scene.seed != ep.query.seed).collect();
                assert_eq!(kept.len() + usize::from(kept.len() < shots.len()), shots.len());
                assert_eq!(t.rows(), kept.len());
                for (r, &i) in kept.iter().enumerate() {
                    assert_eq!(t.row(r), frozen[c].row(i));
                    assert_eq!(ep.support_scenes[c][r], shots[i].scene.seed);
                }
            }
            let shot_scenes: Vec<u64> = split.frozen.values().flatten().map(|s| s.scene.seed).collect();
            assert!(shot_scenes.contains(&ep.query.seed));
        }
    }
    let single = world(1, 4);
    let ep = sample_episode(&single, Phase::Finetune, EpisodeStyle::Allway, 1, &mut rng).unwrap();
    for (c, t) in &ep.supports {
        assert_eq!(t, &frozen_supports(&single).unwrap()[c]);
    }
    assert!(matches!(
        sample_episode(&split, Phase::Finetune, EpisodeStyle::Allway, 3, &mut rng),
        Err(Error::Sampling(_))
    ));
}

#[test]
fn zero_iterations_leave_parameters_untouched() {
    let split = world(2, 5);
    let model = Detector::init(model_cfg(EpisodeStyle::Allway), 1).unwrap();
    let (out, trace) = train_phase(&model, &split, &train_cfg(Phase::Base, EpisodeStyle::Allway, 0)).unwrap();
    assert_eq!(out, model);
    assert!(trace.is_empty());
    let (out, _) = finetune(&model, &split, &train_cfg(Phase::Base, EpisodeStyle::Allway, 0)).unwrap();
    assert_eq!(out.params.to_json().unwrap(), model.params.to_json().unwrap());
}

#[test]
fn one_step_moves_along_the_verified_gradient() {
    let split = world(2, 6);
    let mut model = Detector::init(model_cfg(EpisodeStyle::Allway), 2).unwrap();
    let cfg = train_cfg(Phase::Base, EpisodeStyle::Allway, 1);
    let ep = episode_for_step(&split, &cfg, 0).unwrap();
    let names: Vec<String> = model.params.names().map(String::from).collect();
    let inputs: Vec<(String, Tensor)> = names
        .iter()
        .map(|n| (n.clone(), model.params.get(n).unwrap().clone()))
        .collect();
    let dropout_seed = 77;
    let loss_fn = crate::tensor::tape_fn(|tape, vars| {
        let b = Bindings::from_vars(&names, vars);
        let mut fwd = Forward::new(tape, &b, Mode::Train, dropout_seed);
        Ok(model.episode_loss(&mut fwd, &ep.query, &ep.classes(), &ep.support_list())?.total)
    });
    let probe = ["backbone.b", "head.loc.w", "meta.cls.b", "rpn.cls.w"];
    let subset: Vec<(String, Tensor)> = inputs.iter().filter(|(n, _)| probe.contains(&n.as_str())).cloned().collect();
    let fixed = inputs.clone();
    let report = finite_diff_check(
        |tape, vars| {
            let all: Vec<crate::Var<'_>> = fixed
                .iter()
                .map(|(n, t)| match subset.iter().position(|(s, _)| s == n) {
                    Some(i) => vars[i],
                    None => tape.constant(t.clone()),
                })
                .collect();
            loss_fn(tape, &all)
        },
        &subset,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");

    let grads = crate::tensor::gradcheck::analytic_gradients(
        &loss_fn,
        &inputs.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(),
    )
    .unwrap();
    let before = model.params.clone();
    sgd_step(&mut model, &ep, 0.01, dropout_seed, 0).unwrap();
    for ((name, _), g) in inputs.iter().zip(&grads) {
        let want: Vec<f64> = before.get(name).unwrap().values().iter().zip(g.values()).map(|(p, g)| p - 0.01 * g).collect();
        assert_eq!(model.params.get(name).unwrap().values(), &want[..], "{name}");
    }
}

#[test]
fn equal_seeds_give_identical_traces_and_consistent_losses() {
    let split = world(2, 7);
    for style in [EpisodeStyle::Allway, EpisodeStyle::Pairwise] {
        let model = Detector::init(model_cfg(style), 3).unwrap();
        let cfg = train_cfg(Phase::Base, style, 6);
        let (m1, t1) = train_phase(&model, &split, &cfg).unwrap();
        let (m2, t2) = train_phase(&model, &split, &cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(m1.params.to_json().unwrap(), m2.params.to_json().unwrap());
        assert!(t1.iter().all(|r| r.loss.is_consistent()));
        assert_ne!(m1, model);
        let (m3, t3) = finetune(&m1, &split, &cfg).unwrap();
        assert!(t3.iter().all(|r| r.phase == Phase::Finetune && r.loss.is_consistent()));
        assert_ne!(m3, m1);
    }
}

#[test]
fn non_finite_loss_reports_the_step() {
    let split = world(2, 8);
    let mut model = Detector::init(model_cfg(EpisodeStyle::Allway), 4).unwrap();
    model.params.get_mut("meta.cls.b").unwrap().values_mut()[0] = f64::NAN;
    match train_phase(&model, &split, &train_cfg(Phase::Base, EpisodeStyle::Allway, 3)) {
        Err(Error::Diverged { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
    }
}

#[test]
fn configuration_mismatches_are_rejected() {
    let split = world(2, 9);
    let model = Detector::init(model_cfg(EpisodeStyle::Allway), 5).unwrap();
    let field = |cfg: TrainConfig| match train_phase(&model, &split, &cfg) {
        Err(Error::Config { field, .. }) => field,
        other => panic!("expected config error, got {:?}", other.map(|r| r.1)),
    };
    let base = train_cfg(Phase::Base, EpisodeStyle::Allway, 1);
    assert_eq!(field(TrainConfig { lr: 0.0, ..base.clone() }), "train.lr");
    assert_eq!(field(TrainConfig { k_train: 0, ..base.clone() }), "train.k_train");
    assert_eq!(field(TrainConfig { style: EpisodeStyle::Pairwise, ..base.clone() }), "train.style");
    assert_eq!(
        field(TrainConfig { phase: Phase::Finetune, k_eval: 3, ..base.clone() }),
        "train.k_eval"
    );
    assert_eq!(
        field(TrainConfig { prototype_mode: PrototypeMode::Averaged, ..base }),
        "train.prototype_mode"
    );
}

#[test]
fn cache_matches_fresh_refinement() {
    let split = world(3, 10);
    for (qsam, mode) in [(true, PrototypeMode::PerSample), (false, PrototypeMode::Averaged)] {
        let cfg = ModelConfig {
            qsam,
            prototype_mode: mode,
            ..model_cfg(EpisodeStyle::Allway)
        };
        let model = Detector::init(cfg, 6).unwrap();
        let cache = build_prototype_cache(&model, &split).unwrap();
        assert_eq!(cache, build_prototype_cache(&model, &split).unwrap());
        assert_eq!(cache.classes.keys().copied().collect::<Vec<_>>(), split.all_classes());
        let frozen = frozen_supports(&split).unwrap();
        for (c, p) in &cache.classes {
            let tape = Tape::new();
            let b = model.params.bind_frozen(&tape);
            let mut fwd = Forward::eval(&tape, &b);
            let feats = model.backbone(&fwd, tape.constant(frozen[c].clone())).unwrap();
            let stack = model.isam_stack().unwrap();
            let refined = crate::attention::isam_refine(&mut fwd, feats, stack).unwrap();
            assert_eq!(refined.value().as_ref(), &p.refined);
            let expected_rows = if mode == PrototypeMode::PerSample { 3 } else { 1 };
            assert_eq!(cache.vectors(*c).unwrap().rows(), expected_rows);
        }
    }
}

#[test]
fn cached_inference_equals_uncached() {
    let split = world(2, 11);
    for style in [EpisodeStyle::Allway, EpisodeStyle::Pairwise] {
        let model = Detector::init(model_cfg(style), 7).unwrap();
        let cache = build_prototype_cache(&model, &split).unwrap();
        for i in 0..10 {
            let scene = split.pool_scene(Pool::Test, i).unwrap();
            let a = infer(&model, &scene, &cache).unwrap();
            assert_eq!(a, infer_uncached(&model, &scene, &split).unwrap());
            assert!(a.iter().all(Detection::is_valid));
        }
        let empty = PrototypeCache {
            seed: 0,
            classes: BTreeMap::new(),
        };
        assert!(matches!(infer(&model, &split.pool_scene(Pool::Test, 0).unwrap(), &empty), Err(Error::Contract(_))));
    }
}
