use proptest::prelude::*;
use ssc_core::depth::{onehot_from_depthmap, DepthBinSpec};
use ssc_core::gradcheck::{gradcheck, random_tensor, GradCheckConfig};
use ssc_core::losses::{
    class_frequencies, class_weights, depth_loss, scal_loss, seg_loss_2d, total_loss, weighted_ce,
    LossComponents, LossValues, LossWeights, ScalMode,
};
use ssc_core::metrics::{argmax_labels, evaluate, ConfusionMatrix};
use ssc_core::scene::{VoxelGrid, UNKNOWN};
use ssc_core::{Graph, ParamStore, Tensor};

fn grid(dims: [usize; 3], labels: Vec<u8>) -> VoxelGrid {
    VoxelGrid {
        dims,
        origin_m: [0.0; 3],
        voxel_size_m: 1.0,
        labels,
    }
}

fn value(f: impl FnOnce(&mut Graph) -> ssc_core::losses::LossTerm) -> f64 {
    let mut g = Graph::new();
    let t = f(&mut g);
    g.value(t.value).item()
}

fn softmax0(logits: &Tensor) -> Tensor {
    let k = logits.shape()[0];
    let n = logits.len() / k;
    let mut out = logits.clone();
    for i in 0..n {
        let m = (0..k).map(|c| logits.data()[c * n + i]).fold(f64::MIN, f64::max);
        let z: f64 = (0..k).map(|c| (logits.data()[c * n + i] - m).exp()).sum();
        for c in 0..k {
            out.data_mut()[c * n + i] = (logits.data()[c * n + i] - m).exp() / z;
        }
    }
    out
}

#[test]
fn default_loss_weights() {
    let w = LossWeights::default();
    assert_eq!((w.lambda_d, w.lambda_seg), (0.001, 1.0));
    let v = LossValues {
        depth: 2.0,
        seg: 1.0,
        ..LossValues::default()
    };
    assert!((v.total(&w) - 1.002).abs() < 1e-15);
    assert_eq!(LossValues::default().total(&w), 0.0);
}

#[test]
fn total_loss_is_linear_in_components() {
    let mut g = Graph::new();
    let vals = [2.0, 1.0, 0.5, 0.25, 0.125];
    let vars: Vec<_> = vals.iter().map(|&v| g.input(Tensor::scalar(v))).collect();
    let c = LossComponents {
        depth: vars[0],
        seg: vars[1],
        ce: vars[2],
        scal_geo: vars[3],
        scal_sem: vars[4],
    };
    let w = LossWeights {
        lambda_d: 0.3,
        lambda_seg: 0.7,
    };
    let t = total_loss(&mut g, &c, &w).unwrap();
    assert!((g.value(t).item() - (0.6 + 0.7 + 0.5 + 0.25 + 0.125)).abs() < 1e-15);
    let grads = g.backward(t).unwrap();
    let expect = [0.3, 0.7, 1.0, 1.0, 1.0];
    for (v, e) in vars.iter().zip(expect) {
        assert_eq!(grads.get(*v).unwrap().item(), e);
    }
    assert!(total_loss(&mut g, &c, &LossWeights { lambda_d: -1.0, lambda_seg: 1.0 }).is_err());
}

#[test]
fn cross_entropy_limits() {
    let target = grid([1, 1, 4], vec![1, 0, 1, UNKNOWN]);
    let sharp = Tensor::from_fn(&[2, 1, 1, 4], |i| if i[0] as u8 == target.labels[i[3]] { 60.0 } else { -60.0 });
    let v = value(|g| {
        let l = g.constant(sharp);
        weighted_ce(g, l, &target, &[1.0, 1.0]).unwrap()
    });
    assert!(v < 1e-40);
    let uniform = value(|g| {
        let l = g.constant(Tensor::zeros(&[2, 1, 1, 4]));
        weighted_ce(g, l, &target, &[1.0, 1.0]).unwrap()
    });
    assert!((uniform - 2f64.ln()).abs() < 1e-15);
    let weighted = value(|g| {
        let l = g.constant(Tensor::zeros(&[2, 1, 1, 4]));
        weighted_ce(g, l, &target, &[3.0, 0.5]).unwrap()
    });
    assert!((weighted - (3.0 + 0.5 + 0.5) / 3.0 * 2f64.ln()).abs() < 1e-15);
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[2, 1, 1, 2]));
    let term = weighted_ce(&mut g, l, &grid([1, 1, 2], vec![UNKNOWN; 2]), &[1.0, 1.0]).unwrap();
    assert!(term.degenerate);
    assert_eq!(g.value(term.value).item(), 0.0);
}

#[test]
fn class_weight_formula() {
    let a = grid([1, 1, 4], vec![0, 0, 0, 1]);
    let b = grid([1, 1, 4], vec![0, 2, UNKNOWN, 1]);
    let f = class_frequencies(&[&a, &b], 3);
    assert_eq!(f, vec![4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]);
    let w = class_weights(&f);
    for (wi, fi) in w.iter().zip(&f) {
        let expect = 1.0 / (1.02 + fi).ln();
        assert!((wi - expect).abs() <= 1e-15 * expect, "{wi} vs {expect}");
    }
    assert!(w[2] > w[1] && w[1] > w[0]);
}

#[test]
fn seg_loss_limits() {
    let labels = Tensor::new(vec![2, 2], vec![0.0, 2.0, 1.0, 2.0]).unwrap();
    let perfect = Tensor::from_fn(&[3, 2, 2], |i| if i[0] as f64 == labels.get(&[i[1], i[2]]) { 50.0 } else { -50.0 });
    assert!(value(|g| {
        let l = g.constant(perfect);
        seg_loss_2d(g, l, &labels).unwrap()
    }) < 1e-40);
    let u = value(|g| {
        let l = g.constant(Tensor::zeros(&[3, 2, 2]));
        seg_loss_2d(g, l, &labels).unwrap()
    });
    assert!((u - 3f64.ln()).abs() < 1e-15);
}

#[test]
fn depth_loss_limits() {
    let bins = DepthBinSpec::uniform(8, 1.0, 9.0);
    let gt = Tensor::new(vec![2, 3], vec![1.5, 0.0, 4.2, 8.9, 0.0, 2.0]).unwrap();
    let perfect = onehot_from_depthmap(&gt, &bins).unwrap();
    assert_eq!(
        value(|g| {
            let p = g.constant(perfect);
            depth_loss(g, p, &gt, &bins).unwrap()
        }),
        0.0
    );
    let u = value(|g| {
        let p = g.constant(Tensor::full(&[8, 2, 3], 0.125));
        depth_loss(g, p, &gt, &bins).unwrap()
    });
    assert!((u - 8f64.ln()).abs() < 1e-15);
    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[8, 2, 3], 0.125));
    let t = depth_loss(&mut g, p, &Tensor::zeros(&[2, 3]), &bins).unwrap();
    assert!(t.degenerate && g.value(t.value).item() == 0.0);
}

#[test]
fn scal_hand_computed_fixture() {
    // Two voxels, target [1, 0], probabilities (empty, occupied):
    //   v0 = (0.2, 0.8), v1 = (0.6, 0.4)
    // class 0: P = 0.6/0.8, R = 0.6/1, S = 0.8/1
    // class 1: P = 0.8/1.2, R = 0.8/1, S = 0.6/1
    // sem = -(ln .75 + ln .6 + ln .8 + ln 2/3 + ln .8 + ln .6) / 2
    // geo = -(ln 2/3 + ln .8 + ln .6)
    const SEM: f64 = 1.0805427653601731;
    const GEO: f64 = 1.1394342831883648;
    let target = grid([1, 1, 2], vec![1, 0]);
    let probs = Tensor::new(vec![2, 1, 1, 2], vec![0.2, 0.6, 0.8, 0.4]).unwrap();
    for (mode, expect) in [(ScalMode::Sem, SEM), (ScalMode::Geo, GEO)] {
        let v = value(|g| {
            let p = g.constant(probs.clone());
            scal_loss(g, p, &target, mode).unwrap()
        });
        assert!((v - expect).abs() < 1e-14, "{mode:?}: {v}");
    }
}

#[test]
fn scal_perfect_and_degenerate() {
    let target = grid([1, 2, 2], vec![0, 1, 2, UNKNOWN]);
    let perfect = Tensor::from_fn(&[3, 1, 2, 2], |i| {
        let l = target.labels[i[2] * 2 + i[3]];
        if l == UNKNOWN {
            1.0 / 3.0
        } else {
            (i[0] as u8 == l) as u8 as f64
        }
    });
    for mode in [ScalMode::Geo, ScalMode::Sem] {
        let v = value(|g| {
            let p = g.constant(perfect.clone());
            scal_loss(g, p, &target, mode).unwrap()
        });
        assert!(v.abs() < 1e-15, "{mode:?}");
    }
    let empty = grid([1, 1, 3], vec![0, 0, 0]);
    let mut all_empty = Tensor::zeros(&[2, 1, 1, 3]);
    for i in 0..3 {
        all_empty.set(&[0, 0, 0, i], 1.0);
    }
    let mut g = Graph::new();
    let p = g.constant(all_empty);
    let t = scal_loss(&mut g, p, &empty, ScalMode::Geo).unwrap();
    assert_eq!(g.value(t.value).item(), 0.0);
    assert_eq!(t.skipped, 2);
}

fn check_grad(name: &str, f: impl Fn(&mut Graph, ssc_core::Var) -> ssc_core::Var, input: Tensor, tol: f64) {
    let report = gradcheck(
        |g, _, v| Ok(f(g, v[0])),
        &[(name, input)],
        &ParamStore::new(),
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_err() < tol, "{name}: {:?}", report.worst());
}

#[test]
fn loss_gradchecks() {
    let target = grid([2, 3, 2], vec![0, 1, 2, 0, UNKNOWN, 1, 2, 2, 0, 0, 1, UNKNOWN]);
    let w = class_weights(&[0.6, 0.3, 0.1]);
    check_grad(
        "ce",
        |g, l| weighted_ce(g, l, &target, &w).unwrap().value,
        random_tensor(&[3, 2, 3, 2], -2.0, 2.0, 1),
        1e-6,
    );
    let labels = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 2.0, 1.0, 0.0]).unwrap();
    check_grad(
        "seg",
        |g, l| seg_loss_2d(g, l, &labels).unwrap().value,
        random_tensor(&[3, 2, 3], -2.0, 2.0, 2),
        1e-6,
    );
    let bins = DepthBinSpec::uniform(4, 1.0, 5.0);
    let gt = Tensor::new(vec![2, 3], vec![1.2, 0.0, 3.7, 4.9, 2.5, 0.0]).unwrap();
    check_grad(
        "depth",
        |g, l| {
            let p = g.softmax(l, 0).unwrap();
            depth_loss(g, p, &gt, &bins).unwrap().value
        },
        random_tensor(&[4, 2, 3], -2.0, 2.0, 3),
        1e-6,
    );
    for (mode, seed) in [(ScalMode::Geo, 4), (ScalMode::Sem, 5)] {
        check_grad(
            "scal",
            |g, l| {
                let p = g.softmax(l, 0).unwrap();
                scal_loss(g, p, &target, mode).unwrap().value
            },
            random_tensor(&[3, 2, 3, 2], -2.0, 2.0, seed),
            1e-6,
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn losses_are_nonnegative(seed in 0u64..10_000, k in 2usize..5) {
        let n = 8;
        let labels: Vec<u8> = random_tensor(&[n], 0.0, k as f64 + 0.999, seed)
            .data()
            .iter()
            .map(|&x| if x as usize >= k { UNKNOWN } else { x as u8 })
            .collect();
        let target = grid([2, 2, 2], labels);
        let logits = random_tensor(&[k, 2, 2, 2], -3.0, 3.0, seed + 1);
        let probs = softmax0(&logits);
        let w = vec![1.0; k];
        let mut g = Graph::new();
        let (l, p) = (g.constant(logits), g.constant(probs));
        for t in [
            weighted_ce(&mut g, l, &target, &w).unwrap(),
            scal_loss(&mut g, p, &target, ScalMode::Geo).unwrap(),
            scal_loss(&mut g, p, &target, ScalMode::Sem).unwrap(),
        ] {
            prop_assert!(g.value(t.value).item() >= 0.0);
        }
    }
}

#[test]
fn identical_prediction_scores_one() {
    let gt = grid([2, 2, 2], vec![0, 1, 2, 3, 0, UNKNOWN, 2, 1]);
    let mut pred = gt.clone();
    pred.labels[5] = 3;
    let m = evaluate(&pred, &gt, 4).unwrap();
    assert_eq!((m.iou, m.miou), (1.0, 1.0));
    assert_eq!(m.per_class, vec![None, Some(1.0), Some(1.0), Some(1.0)]);
}

#[test]
fn hand_counted_class_iou() {
    let gt = grid([1, 1, 8], vec![1, 1, 1, 1, 0, 0, 0, 0]);
    let pred = grid([1, 1, 8], vec![1, 1, 0, 0, 1, 1, 0, 0]);
    let m = evaluate(&pred, &gt, 2).unwrap();
    assert!((m.per_class[1].unwrap() - 2.0 / 6.0).abs() < 1e-15);
    assert!((m.iou - 2.0 / 6.0).abs() < 1e-15);
    assert!((m.miou - 2.0 / 6.0).abs() < 1e-15);
}

#[test]
fn empty_prediction_and_errors() {
    let gt = grid([1, 2, 2], vec![0, 1, 2, 2]);
    let pred = grid([1, 2, 2], vec![0; 4]);
    let m = evaluate(&pred, &gt, 3).unwrap();
    assert_eq!(m.iou, 0.0);
    assert_eq!(m.miou, 0.0);
    assert!(evaluate(&grid([1, 1, 4], vec![0; 4]), &gt, 3).is_err());
    assert!(evaluate(&grid([1, 2, 2], vec![0, 0, 0, 7]), &gt, 3).is_err());
}

#[test]
fn confusion_total_counts_known_voxels() {
    let gt = grid([2, 2, 2], vec![0, UNKNOWN, 2, 1, UNKNOWN, 1, 0, 2]);
    let pred = grid([2, 2, 2], vec![1, 2, 2, 0, 0, 1, 0, 1]);
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &gt).unwrap();
    assert_eq!(cm.total(), 6);
    let mut twice = cm.clone();
    twice.merge(&cm).unwrap();
    assert_eq!(twice.total(), 12);
    assert_eq!(twice.metrics(), cm.metrics());
}

#[test]
fn relabelling_permutes_per_class_scores() {
    let gt = grid([2, 2, 3], vec![0, 1, 2, 3, 3, 1, 0, 2, UNKNOWN, 1, 3, 0]);
    let pred = grid([2, 2, 3], vec![0, 1, 3, 3, 2, 1, 1, 2, 0, 0, 3, 0]);
    let perm = [0u8, 3, 1, 2];
    let relabel = |g: &VoxelGrid| {
        let mut o = g.clone();
        for l in &mut o.labels {
            if *l != UNKNOWN {
                *l = perm[*l as usize];
            }
        }
        o
    };
    let a = evaluate(&pred, &gt, 4).unwrap();
    let b = evaluate(&relabel(&pred), &relabel(&gt), 4).unwrap();
    assert!((a.miou - b.miou).abs() < 1e-15);
    assert_eq!(a.iou, b.iou);
    for c in 1..4 {
        assert_eq!(a.per_class[c], b.per_class[perm[c] as usize]);
    }
}

#[test]
fn argmax_picks_highest_score() {
    let like = grid([1, 1, 3], vec![0; 3]);
    let scores = Tensor::new(vec![3, 1, 1, 3], vec![0.1, 0.5, 0.2, 0.7, 0.1, 0.2, 0.2, 0.4, 0.6]).unwrap();
    assert_eq!(argmax_labels(&scores, &like).unwrap().labels, vec![1, 0, 2]);
}
