use std::collections::BTreeSet;

use ssc_core::config::PipelineConfig;
use ssc_core::depth::DepthStrategy;
use ssc_core::fusion::FusionStrategy;
use ssc_core::gradcheck::GradCheckConfig;
use ssc_core::metrics::random_baseline_miou;
use ssc_core::model::{check_compatible, prepare};
use ssc_core::scene::{synthesize, VoxelGrid};
use ssc_core::suite::{check_module, run_suite, MODULES, SUITE_THRESHOLD};
use ssc_core::train::{build_scenes, init_model, train, train_toy};
use ssc_core::{Error, Graph, Tensor};

fn small() -> PipelineConfig {
    PipelineConfig {
        dims: [16, 16, 4],
        channels: 8,
        train_scenes: 2,
        eval_scenes: 1,
        steps: 4,
        ..PipelineConfig::default()
    }
}

fn noiseless(mut cfg: PipelineConfig) -> PipelineConfig {
    cfg.feature_noise = 0.0;
    cfg.cost_noise = 0.0;
    cfg
}

#[test]
fn default_config_is_the_desk_setup() {
    let cfg = PipelineConfig::default();
    cfg.validate().unwrap();
    assert_eq!(cfg.dims, [32, 32, 8]);
    assert_eq!((cfg.channels, cfg.disp_bins, cfg.depth_bins.num_bins), (16, 12, 16));
    assert_eq!((cfg.rig.image_h, cfg.rig.image_w), (24, 48));
    assert_eq!(cfg.num_classes, 5);
    assert_eq!((cfg.loss.lambda_d, cfg.loss.lambda_seg), (0.001, 1.0));
    assert_eq!((cfg.train_scenes, cfg.steps, cfg.learning_rate), (8, 300, 1e-2));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = small();
    cfg.gca_heads = 3;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = small();
    cfg.channels = 4;
    assert!(cfg.validate().is_err());
    let mut cfg = small();
    cfg.dims = [2, 16, 4];
    assert!(cfg.validate().is_err());
    let mut cfg = small();
    cfg.learning_rate = f64::NAN;
    assert!(cfg.validate().is_err());
}

#[test]
fn incompatible_samples_are_described() {
    let cfg = small();
    let sample = synthesize(0, &cfg.synth_config().unwrap()).unwrap();
    check_compatible(&cfg, &sample).unwrap();

    let other = PipelineConfig { dims: [16, 16, 8], ..cfg };
    let msg = format!("{}", check_compatible(&other, &sample).unwrap_err());
    assert!(msg.contains("dims"), "{msg}");

    let other = PipelineConfig { disp_bins: 10, ..cfg };
    let msg = format!("{}", check_compatible(&other, &sample).unwrap_err());
    assert!(msg.contains("disparity bins"), "{msg}");

    let other = PipelineConfig { channels: 12, ..cfg };
    assert!(check_compatible(&other, &sample).is_err());
}

#[test]
fn forward_shapes() {
    for depth in [DepthStrategy::Ddvm, DepthStrategy::Ar, DepthStrategy::OneHot, DepthStrategy::RefineOff] {
        for fusion in [FusionStrategy::Aaf, FusionStrategy::Ca3d, FusionStrategy::None] {
            let cfg = PipelineConfig {
                depth_strategy: depth,
                fusion_strategy: fusion,
                ..small()
            };
            let scene = &build_scenes(&cfg, [3]).unwrap()[0];
            let (model, store) = init_model(&cfg).unwrap();
            let mut g = Graph::new();
            let out = model.forward(&mut g, &store, scene).unwrap();
            assert_eq!(g.shape(out.logits), &[5, 16, 16, 4]);
            assert_eq!(g.shape(out.seg_logits), &[5, 24, 48]);
            assert_eq!(g.shape(out.depth_probs), &[16, 24, 48]);
            assert_eq!(g.shape(out.f_lss), &[8, 16, 16, 4]);
            assert_eq!(g.shape(out.f_vt), &[8, 16, 16, 4]);
            let comps = model.losses(&mut g, &out, scene, &[1.0; 5]).unwrap();
            for v in [comps.depth, comps.seg, comps.ce, comps.scal_geo, comps.scal_sem] {
                let x = g.value(v).item();
                assert!(x.is_finite() && x >= 0.0);
            }
        }
    }
}

#[test]
fn onehot_lss_support_is_raycast_consistent() {
    let cfg = PipelineConfig {
        depth_strategy: DepthStrategy::OneHot,
        ..noiseless(small())
    };
    let sample = synthesize(5, &cfg.synth_config().unwrap()).unwrap();
    let pose = sample.pose();
    let centres = cfg.depth_bins.centers();
    let mut expected = BTreeSet::new();
    for r in 0..cfg.rig.image_h {
        for c in 0..cfg.rig.image_w {
            let z = sample.depth_map.get(&[r, c]);
            let bins: Vec<usize> = if z > 0.0 {
                vec![cfg.depth_bins.bin_of(z).0]
            } else {
                (0..centres.len()).collect()
            };
            for b in bins {
                if let Some(v) = sample.grid.locate(pose.unproject(&cfg.rig, r, c, centres[b])) {
                    expected.insert(sample.grid.index(v[0], v[1], v[2]));
                }
            }
        }
    }
    let scene = prepare(&cfg, sample).unwrap();
    let (model, store) = init_model(&cfg).unwrap();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &store, &scene).unwrap();
    let lss = g.value(out.f_lss);
    let n = scene.grid.num_voxels();
    let support: BTreeSet<usize> = (0..n)
        .filter(|&i| (0..cfg.channels).any(|ch| lss.data()[ch * n + i] != 0.0))
        .collect();
    assert!(!support.is_empty());
    assert_eq!(support, expected);
}

#[test]
fn passthrough_fusion_ignores_lss() {
    let cfg = PipelineConfig {
        fusion_strategy: FusionStrategy::None,
        ..small()
    };
    let scene = &build_scenes(&cfg, [1]).unwrap()[0];
    let (model, store) = init_model(&cfg).unwrap();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &store, scene).unwrap();
    assert_eq!(g.value(out.fused), g.value(out.f_vt));

    let mut h = Graph::new();
    let junk = h.constant(Tensor::full(&[8, 16, 16, 4], 123.0));
    let vt = h.constant(g.value(out.f_vt).clone());
    let fused = model.fusion.forward(&mut h, &store, junk, vt).unwrap();
    assert_eq!(h.value(fused), g.value(out.f_vt));
}

#[test]
fn zero_learning_rate_is_bit_stable() {
    let cfg = PipelineConfig {
        learning_rate: 0.0,
        train_scenes: 1,
        ..small()
    };
    let (_, init) = init_model(&cfg).unwrap();
    let out = train_toy(&cfg, |_| {}).unwrap();
    assert_eq!(out.store.iter().count(), init.iter().count());
    for ((_, a), (_, b)) in out.store.iter().zip(init.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let totals: Vec<u64> = out.log.iter().map(|s| s.total.to_bits()).collect();
    assert!(totals.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(out.initial_loss.to_bits(), out.final_loss.to_bits());
}

#[test]
fn training_is_deterministic_and_learns() {
    let cfg = PipelineConfig { steps: 12, ..small() };
    let a = train_toy(&cfg, |_| {}).unwrap();
    let b = train_toy(&cfg, |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.eval, b.eval);
    assert!(a.final_loss < a.initial_loss, "{} -> {}", a.initial_loss, a.final_loss);
    assert!(a.log.iter().all(|s| s.total.is_finite()));
}

#[test]
fn divergence_keeps_last_finite_parameters() {
    let cfg = PipelineConfig {
        learning_rate: 1e300,
        steps: 6,
        ..small()
    };
    let scenes = build_scenes(&cfg, [0, 1]).unwrap();
    let out = train(&cfg, &scenes, &scenes[..1], |_| {}).unwrap();
    assert!(out.diverged.is_some());
    assert!(out.log.len() < cfg.steps);
    assert!(out.store.iter().all(|(_, p)| p.value.all_finite()));
}

#[test]
fn random_baseline_matches_hand_value() {
    // Known labels: 4 empty, 2 of class 1, 2 of class 2. K = 3, N = 8.
    // Class c: (n_c/3) / (n_c + 8/3 - n_c/3) = (2/3) / (4) = 1/6.
    let g = VoxelGrid {
        dims: [3, 3, 1],
        origin_m: [0.0; 3],
        voxel_size_m: 1.0,
        labels: vec![0, 0, 0, 0, 1, 1, 2, 2, 255],
    };
    assert!((random_baseline_miou(&[&g], 3) - 1.0 / 6.0).abs() < 1e-15);
}

#[test]
fn suite_covers_every_module_and_catches_sign_flips() {
    let cfg = GradCheckConfig::default();
    let report = run_suite(None, &cfg).unwrap();
    assert_eq!(report.len(), MODULES.len());
    for m in &report {
        assert!(m.passed(), "{}: {}", m.module, m.max_rel_err());
        assert!(!m.ops.is_empty());
    }
    let flipped = check_module("losses", &GradCheckConfig { flip_sign: true, ..cfg }).unwrap();
    assert!(flipped.max_rel_err() > SUITE_THRESHOLD);
    assert!(check_module("nope", &cfg).is_err());
}
