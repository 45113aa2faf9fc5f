use proptest::prelude::*;
use ssc_core::gradcheck::{gradcheck, probe_loss, random_tensor, GradCheckConfig};
use ssc_core::{Error, Graph, ParamStore, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn check<F>(inputs: &[(&str, Tensor)], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> ssc_core::Result<Var>,
{
    gradcheck(
        |g, _, v| {
            let out = f(g, v)?;
            probe_loss(g, out, 99)
        },
        inputs,
        &ParamStore::new(),
        &GradCheckConfig::default(),
    )
    .unwrap()
    .max_rel_err()
}

#[test]
fn matmul_identity_and_analytic() {
    let mut g = Graph::new();
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let p = g.matmul(i, b).unwrap();
    assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let p = g.matmul(a, c).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn matmul_gradient_of_sum_matches_finite_differences() {
    let a = random_tensor(&[3, 4], -1.0, 1.0, 1);
    let b = random_tensor(&[4, 2], -1.0, 1.0, 2);
    let r = gradcheck(
        |g, _, v| {
            let p = g.matmul(v[0], v[1])?;
            g.sum(p)
        },
        &[("a", a), ("b", b)],
        &ParamStore::new(),
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.max_rel_err() < 1e-6, "{r:?}");
}

#[test]
fn batched_broadcast_matmul_gradcheck() {
    let a = random_tensor(&[2, 3, 3, 4], -1.0, 1.0, 3);
    let b = random_tensor(&[3, 4, 2], -1.0, 1.0, 4);
    let err = check(&[("a", a), ("b", b)], |g, v| g.matmul(v[0], v[1]));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn matmul_associative_with_identity() {
    let a = random_tensor(&[8, 8], -1.0, 1.0, 5);
    let b = random_tensor(&[8, 8], -1.0, 1.0, 6);
    let eye = Tensor::from_fn(&[8, 8], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (a, b, e) = (g.constant(a), g.constant(b), g.constant(eye));
    let ab = g.matmul(a, b).unwrap();
    let left = g.matmul(ab, e).unwrap();
    let be = g.matmul(b, e).unwrap();
    let right = g.matmul(a, be).unwrap();
    assert!(g.value(left).max_abs_diff(g.value(right)) < 1e-10);
    assert!(g.value(left).max_abs_diff(g.value(ab)) < 1e-10);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(t(&[2], &[1000.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    let v = g.value(s).data();
    assert!(v.iter().all(|x| x.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);

    let x = g.constant(random_tensor(&[5], -3.0, 3.0, 7));
    let s = g.softmax(x, 0).unwrap();
    assert!((g.value(s).sum() - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_cross_entropy_gradcheck() {
    let x = random_tensor(&[4, 5], -2.0, 2.0, 8);
    let target = Tensor::from_fn(&[4, 5], |i| if i[1] == (i[0] * 3) % 5 { 1.0 } else { 0.0 });
    let r = gradcheck(
        |g, _, v| {
            let ls = g.log_softmax(v[0], 1)?;
            let tv = g.constant(target.clone());
            let p = g.mul(ls, tv)?;
            let s = g.sum(p)?;
            g.scale(s, -0.25)
        },
        &[("logits", x)],
        &ParamStore::new(),
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.max_rel_err() < 1e-6, "{r:?}");
}

#[test]
fn conv3d_identity_and_bias() {
    let x = random_tensor(&[2, 3, 3, 2], -1.0, 1.0, 9);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::from_fn(&[2, 2, 1, 1, 1], |i| if i[0] == i[1] { 1.0 } else { 0.0 }));
    let b = g.constant(Tensor::zeros(&[2]));
    let y = g.conv3d(xv, w, b).unwrap();
    assert_eq!(g.value(y), &x);

    let w = g.constant(Tensor::zeros(&[3, 2, 3, 3, 3]));
    let b = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let y = g.conv3d(xv, w, b).unwrap();
    let yv = g.value(y);
    assert_eq!(yv.shape(), &[3, 3, 3, 2]);
    for c in 0..3 {
        for v in &yv.data()[c * 18..(c + 1) * 18] {
            assert_eq!(*v, [0.5, -1.0, 2.0][c]);
        }
    }
}

#[test]
fn conv3d_even_kernel_is_config_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 1, 2, 2, 2]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(matches!(g.conv3d(x, w, b), Err(Error::Config(_))));
}

#[test]
fn conv3d_matches_direct_sum() {
    let x = random_tensor(&[2, 4, 3, 5], -1.0, 1.0, 10);
    let w = random_tensor(&[3, 2, 3, 3, 3], -1.0, 1.0, 11);
    let b = random_tensor(&[3], -1.0, 1.0, 12);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv3d(xv, wv, bv).unwrap();
    let y = g.value(y);
    let s = x.shape();
    for o in 0..3 {
        for px in 0..s[1] {
            for py in 0..s[2] {
                for pz in 0..s[3] {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for i in 0..3 {
                            for j in 0..3 {
                                for l in 0..3 {
                                    let (qx, qy, qz) = (px + i, py + j, pz + l);
                                    if qx < 1 || qy < 1 || qz < 1 || qx > s[1] || qy > s[2] || qz > s[3] {
                                        continue;
                                    }
                                    acc += w.get(&[o, c, i, j, l]) * x.get(&[c, qx - 1, qy - 1, qz - 1]);
                                }
                            }
                        }
                    }
                    assert!((y.get(&[o, px, py, pz]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv3d_gradcheck() {
    let x = random_tensor(&[2, 4, 4, 4], -1.0, 1.0, 13);
    let w = random_tensor(&[2, 2, 3, 3, 3], -0.5, 0.5, 14);
    let b = random_tensor(&[2], -0.5, 0.5, 15);
    let err = check(&[("x", x), ("w", w), ("b", b)], |g, v| g.conv3d(v[0], v[1], v[2]));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn layernorm_examples_and_gradcheck() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::full(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(t(&[1, 3], &[2.0, 2.0, 2.0]));
    let y = g.layer_norm(x, 1, gain, bias).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let y = g.layer_norm(x, 1, gain, bias).unwrap();
    let v = g.value(y).data();
    let mean: f64 = v.iter().sum::<f64>() / 3.0;
    let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-4, "{var}");

    let x = random_tensor(&[4, 6], -2.0, 2.0, 16);
    let gain = random_tensor(&[6], 0.5, 1.5, 17);
    let bias = random_tensor(&[6], -0.5, 0.5, 18);
    let err = check(&[("x", x.clone()), ("gain", gain.clone()), ("bias", bias.clone())], |g, v| {
        g.layer_norm(v[0], 1, v[1], v[2])
    });
    assert!(err < 1e-5, "{err}");
    // normalising a non-trailing axis
    let gain4 = random_tensor(&[4], 0.5, 1.5, 19);
    let bias4 = random_tensor(&[4], -0.5, 0.5, 20);
    let err = check(&[("x", x), ("gain", gain4), ("bias", bias4)], |g, v| g.layer_norm(v[0], 0, v[1], v[2]));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let beta = g.constant(Tensor::scalar(0.37));
    let e = g.constant(Tensor::zeros(&[2, 2]));
    let p = g.pow_base(beta, e).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 1.0));

    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).item(), 0.5);

    let c = g.constant(Tensor::full(&[2, 3, 4], 1.25));
    let m = g.mean(c, &[0, 2]).unwrap();
    assert_eq!(g.shape(m), &[1, 3, 1]);
    assert!(g.value(m).data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    assert!(matches!(g.mean(c, &[3]), Err(Error::Dimension { .. })));
}

#[test]
fn pow_base_clamps_base() {
    let mut g = Graph::new();
    let b = g.constant(Tensor::scalar(1.5));
    let e = g.constant(Tensor::scalar(2.0));
    let p = g.pow_base(b, e).unwrap();
    assert!((g.value(p).item() - (1.0f64 - 1e-4).powi(2)).abs() < 1e-15);
}

#[test]
fn trilinear_lattice_and_midpoint() {
    let vol = random_tensor(&[2, 3, 4, 2], -1.0, 1.0, 21);
    let mut g = Graph::new();
    let v = g.constant(vol.clone());
    let c = g.constant(t(&[2, 3], &[1.0, 2.0, 1.0, 0.5, 3.0, 0.0]));
    let s = g.trilinear_sample(v, c).unwrap();
    let s = g.value(s);
    for ch in 0..2 {
        assert!((s.get(&[0, ch]) - vol.get(&[ch, 1, 2, 1])).abs() < 1e-15);
        let mid = 0.5 * (vol.get(&[ch, 0, 3, 0]) + vol.get(&[ch, 1, 3, 0]));
        assert!((s.get(&[1, ch]) - mid).abs() < 1e-15);
    }
}

#[test]
fn trilinear_gradcheck_volume_and_coords() {
    let vol = random_tensor(&[2, 3, 4, 3], -1.0, 1.0, 22);
    // keep coordinates away from lattice planes where the interpolant has kinks
    let coords = Tensor::from_fn(&[5, 3], |i| 0.13 + 0.37 * i[0] as f64 + 0.21 * i[1] as f64);
    let err = check(&[("volume", vol), ("coords", coords)], |g, v| g.trilinear_sample(v[0], v[1]));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn scatter_and_gather_gradcheck() {
    let x = random_tensor(&[3, 5], -1.0, 1.0, 23);
    let err = check(&[("x", x.clone())], |g, v| g.scatter_add(v[0], 1, &[Some(1), None, Some(1), Some(0), Some(3)], 4));
    assert!(err < 1e-6, "{err}");
    let err = check(&[("x", x)], |g, v| g.index_select(v[0], 1, &[4, 0, 4]));
    assert!(err < 1e-6, "{err}");
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..4, 1..=5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_and_binary_ops_match_finite_differences(shape in shape_strategy(), seed in 0u64..1000) {
        let a = random_tensor(&shape, -2.0, 2.0, seed);
        let b = random_tensor(&shape, 0.5, 2.0, seed + 1);
        let pos = random_tensor(&shape, 0.2, 3.0, seed + 2);
        let ops: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> ssc_core::Result<Var>>)> = vec![
            ("add", Box::new(|g, v| g.add(v[0], v[1]))),
            ("sub", Box::new(|g, v| g.sub(v[0], v[1]))),
            ("mul", Box::new(|g, v| g.mul(v[0], v[1]))),
            ("div", Box::new(|g, v| g.div(v[0], v[1]))),
            ("sigmoid", Box::new(|g, v| g.sigmoid(v[0]))),
            ("tanh", Box::new(|g, v| g.tanh(v[0]))),
            ("exp", Box::new(|g, v| g.exp(v[0]))),
            ("ln", Box::new(|g, v| g.ln(v[2]))),
            ("pow", Box::new(|g, v| { let s = g.scale(v[2], 0.25)?; g.pow_base(s, v[0]) })),
            ("softmax", Box::new(|g, v| { let ax = g.shape(v[0]).len() - 1; g.softmax(v[0], ax) })),
            ("log_softmax", Box::new(|g, v| g.log_softmax(v[0], 0))),
            ("mean", Box::new(|g, v| g.mean(v[0], &[0]))),
            ("permute", Box::new(|g, v| { let r = g.shape(v[0]).len(); let p: Vec<usize> = (0..r).rev().collect(); g.permute(v[0], &p) })),
        ];
        for (name, op) in &ops {
            let err = check(&[("a", a.clone()), ("b", b.clone()), ("pos", pos.clone())], |g, v| op(g, v));
            prop_assert!(err < 1e-5, "{} on {:?}: {}", name, shape, err);
        }
    }

    #[test]
    fn softmax_is_a_distribution(shape in shape_strategy(), seed in 0u64..1000, scale in 0.1f64..50.0) {
        let x = random_tensor(&shape, -scale, scale, seed);
        let axis = seed as usize % shape.len();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let s = g.softmax(xv, axis).unwrap();
        let s = g.value(s);
        prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        let summed = ssc_core::tensor::sum_along(s, axis);
        prop_assert!(summed.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }
}
