use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssc_core::depth::DepthBinSpec;
use ssc_core::gradcheck::{gradcheck, probe_loss, random_tensor, GradCheckConfig};
use ssc_core::scene::{generate_scene, raycast, CameraPose, CameraRig, GridSpec, SceneSpec, VoxelGrid};
use ssc_core::view::{
    default_query_cap, frustum_index, frustum_points, gather_queries, lift, propose_queries, query_geometry,
    voxel_pool, QueryProposals, RefineConfig, VoxelRefiner,
};
use ssc_core::{Graph, ParamStore, Tensor};

fn small_rig() -> CameraRig {
    CameraRig {
        fx: 6.0,
        fy: 6.0,
        cx: 4.0,
        cy: 3.0,
        baseline_m: 0.5,
        image_h: 6,
        image_w: 8,
    }
}

fn eval_lift(context: &Tensor, probs: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (c, p) = (g.constant(context.clone()), g.constant(probs.clone()));
    let y = lift(&mut g, c, p).unwrap();
    g.value(y).clone()
}

#[test]
fn lift_with_one_hot_depth_copies_context() {
    let context = random_tensor(&[3, 2, 4], -1.0, 1.0, 1);
    let mut probs = Tensor::zeros(&[5, 2, 4]);
    for h in 0..2 {
        for w in 0..4 {
            probs.set(&[2, h, w], 1.0);
        }
    }
    let gt = eval_lift(&context, &probs);
    for c in 0..3 {
        for d in 0..5 {
            for h in 0..2 {
                for w in 0..4 {
                    let expect = if d == 2 { context.get(&[c, h, w]) } else { 0.0 };
                    assert_eq!(gt.get(&[c, d, h, w]), expect);
                }
            }
        }
    }
}

#[test]
fn lift_marginal_over_depth_is_context() {
    let context = random_tensor(&[4, 3, 3], -1.0, 1.0, 2);
    let raw = random_tensor(&[6, 3, 3], 0.0, 1.0, 3);
    let sums = ssc_core::tensor::sum_along(&raw, 0);
    let probs = Tensor::from_fn(&[6, 3, 3], |i| raw.get(i) / sums.get(&[0, i[1], i[2]]));
    let marginal = ssc_core::tensor::sum_along(&eval_lift(&context, &probs), 1);
    assert!(marginal.reshape(&[4, 3, 3]).unwrap().max_abs_diff(&context) < 1e-9);
}

#[test]
fn lift_matches_loop_reference() {
    let context = random_tensor(&[2, 3, 4], -1.0, 1.0, 4);
    let probs = random_tensor(&[3, 3, 4], 0.0, 1.0, 5);
    let gt = eval_lift(&context, &probs);
    for c in 0..2 {
        for d in 0..3 {
            for h in 0..3 {
                for w in 0..4 {
                    assert_eq!(gt.get(&[c, d, h, w]), context.get(&[c, h, w]) * probs.get(&[d, h, w]));
                }
            }
        }
    }
    let mut g = Graph::new();
    let (c, p) = (g.constant(context), g.constant(Tensor::zeros(&[3, 2, 4])));
    assert!(lift(&mut g, c, p).is_err());
}

fn pool(frustum: &Tensor, points: &Tensor, grid: &GridSpec) -> (Tensor, usize) {
    let idx = frustum_index(points, grid).unwrap();
    let mut g = Graph::new();
    let f = g.constant(frustum.clone());
    let v = voxel_pool(&mut g, f, &idx, grid).unwrap();
    (g.value(v).clone(), idx.dropped)
}

#[test]
fn single_point_lands_in_one_voxel() {
    let grid = GridSpec {
        dims: [4, 4, 4],
        origin_m: [0.0; 3],
        voxel_size_m: 0.5,
    };
    let frustum = Tensor::full(&[1, 1, 1, 1], 3.0);
    let points = Tensor::new(vec![1, 1, 1, 3], vec![1.2, 0.3, 1.9]).unwrap();
    let (vol, dropped) = pool(&frustum, &points, &grid);
    assert_eq!(dropped, 0);
    assert_eq!(vol.get(&[0, 2, 0, 3]), 3.0);
    assert_eq!(vol.data().iter().filter(|&&x| x != 0.0).count(), 1);
}

#[test]
fn pooling_conserves_mass_and_counts_drops() {
    let grid = GridSpec {
        dims: [5, 4, 3],
        origin_m: [-1.0, 0.0, 0.5],
        voxel_size_m: 0.4,
    };
    let frustum = random_tensor(&[2, 4, 3, 5], -1.0, 1.0, 6);
    let points = random_tensor(&[4, 3, 5, 3], -1.5, 2.5, 7);
    let (vol, dropped) = pool(&frustum, &points, &grid);
    let mut reference = vec![0.0; 2 * grid.num_voxels()];
    let mut inside = [0.0; 2];
    let mut brute_dropped = 0;
    for cell in 0..60 {
        let p = &points.data()[cell * 3..cell * 3 + 3];
        let mut v = [0usize; 3];
        let mut ok = true;
        for a in 0..3 {
            let f = ((p[a] - grid.origin_m[a]) / grid.voxel_size_m).floor();
            if f < 0.0 || f >= grid.dims[a] as f64 {
                ok = false;
            } else {
                v[a] = f as usize;
            }
        }
        if !ok {
            brute_dropped += 1;
            continue;
        }
        let flat = (v[0] * 4 + v[1]) * 3 + v[2];
        for c in 0..2 {
            let x = frustum.data()[c * 60 + cell];
            reference[c * grid.num_voxels() + flat] += x;
            inside[c] += x;
        }
    }
    assert_eq!(dropped, brute_dropped);
    assert!(dropped > 0 && dropped < 60);
    for (a, b) in vol.data().iter().zip(&reference) {
        assert!((a - b).abs() < 1e-12);
    }
    for c in 0..2 {
        let total: f64 = vol.data()[c * grid.num_voxels()..(c + 1) * grid.num_voxels()].iter().sum();
        assert!((total - inside[c]).abs() < 1e-9);
    }
}

#[test]
fn shifting_origin_shifts_pattern() {
    let grid = GridSpec {
        dims: [6, 6, 4],
        origin_m: [0.0; 3],
        voxel_size_m: 0.25,
    };
    let shifted = GridSpec {
        origin_m: [0.25, 0.0, 0.0],
        ..grid
    };
    let frustum = random_tensor(&[1, 3, 2, 2], 0.5, 1.0, 8);
    let points = random_tensor(&[3, 2, 2, 3], 0.3, 1.0, 9);
    let (a, _) = pool(&frustum, &points, &grid);
    let (b, _) = pool(&frustum, &points, &shifted);
    for x in 1..6 {
        for y in 0..6 {
            for z in 0..4 {
                assert_eq!(a.get(&[0, x, y, z]), b.get(&[0, x - 1, y, z]));
            }
        }
    }
}

#[test]
fn lift_and_pool_match_direct_reference() {
    let rig = small_rig();
    for dims in [[4, 4, 4], [6, 5, 4], [8, 8, 4], [8, 4, 2]] {
        let grid = GridSpec {
            dims,
            origin_m: [0.0, 0.0, 0.0],
            voxel_size_m: 0.3,
        };
        let pose = CameraPose::look_along(
            [0.0, dims[1] as f64 * 0.15, dims[2] as f64 * 0.18],
            [1.0, 0.0, -0.1],
            [0.0, 0.0, 1.0],
        )
        .unwrap();
        let bins = DepthBinSpec::uniform(5, 0.3, 3.0);
        let context = random_tensor(&[2, 6, 8], -1.0, 1.0, dims[0] as u64);
        let probs = random_tensor(&[5, 6, 8], 0.0, 1.0, dims[1] as u64);
        let points = frustum_points(&rig, &pose, &bins);
        let gt = eval_lift(&context, &probs);
        let (vol, _) = pool(&gt, &points, &grid);
        let centers = bins.centers();
        let mut reference = Tensor::zeros(&[2, dims[0], dims[1], dims[2]]);
        for d in 0..5 {
            for h in 0..6 {
                for w in 0..8 {
                    let ray = rig.pixel_ray(h, w);
                    let cam = [ray[0] * centers[d], ray[1] * centers[d], centers[d]];
                    let p: Vec<f64> = (0..3)
                        .map(|r| pose.position[r] + (0..3).map(|c| pose.rotation[r][c] * cam[c]).sum::<f64>())
                        .collect();
                    let v: Vec<f64> = (0..3).map(|a| (p[a] / 0.3).floor()).collect();
                    if (0..3).any(|a| v[a] < 0.0 || v[a] >= dims[a] as f64) {
                        continue;
                    }
                    for c in 0..2 {
                        let idx = [c, v[0] as usize, v[1] as usize, v[2] as usize];
                        reference.set(&idx, reference.get(&idx) + context.get(&[c, h, w]) * probs.get(&[d, h, w]));
                    }
                }
            }
        }
        assert!(vol.max_abs_diff(&reference) < 1e-12, "dims {dims:?}");
    }
}

#[test]
fn empty_depth_gives_no_proposals() {
    let rig = small_rig();
    let grid = GridSpec {
        dims: [8, 8, 4],
        origin_m: [0.0; 3],
        voxel_size_m: 0.25,
    };
    let pose = CameraPose::look_along([0.0, 1.0, 0.5], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
    let p = propose_queries(&Tensor::zeros(&[6, 8]), &rig, &pose, &grid, 10).unwrap();
    assert!(p.is_empty());
    assert!(propose_queries(&Tensor::zeros(&[6, 8]), &rig, &pose, &grid, 1000).is_err());
}

#[test]
fn single_voxel_scene_proposes_its_surface() {
    let rig = small_rig();
    let mut vg = VoxelGrid::empty([8, 8, 4], [0.0; 3], 0.25).unwrap();
    vg.set(5, 4, 1, 2);
    let pose = CameraPose::look_along([0.0, 1.0, 0.6], [1.0, 0.0, -0.2], [0.0, 0.0, 1.0]).unwrap();
    let rc = raycast(&vg, &rig, &pose).unwrap();
    assert!(rc.hit_count() > 0);
    let p = propose_queries(&rc.depth, &rig, &pose, &vg.spec(), 64).unwrap();
    assert_eq!(p.voxels, vec![[5, 4, 1]]);
}

#[test]
fn proposals_match_raycast_hits_and_respect_cap() {
    let rig = CameraRig::default();
    for seed in 0..8 {
        let vg = generate_scene(seed, &SceneSpec::new([32, 32, 8], 5)).unwrap();
        let pose = CameraPose::canonical(&vg);
        let rc = raycast(&vg, &rig, &pose).unwrap();
        let spec = vg.spec();
        let p = propose_queries(&rc.depth, &rig, &pose, &spec, default_query_cap(&spec)).unwrap();
        let truth: HashSet<[usize; 3]> = rc.hits.iter().flatten().copied().collect();
        let got: HashSet<[usize; 3]> = p.voxels.iter().copied().collect();
        assert_eq!(got.len(), p.len(), "duplicates");
        assert_eq!(got, truth);
        assert!(p.voxels.iter().all(|v| (0..3).all(|a| v[a] < spec.dims[a])));
        assert!(p.depth.windows(2).all(|d| d[0] <= d[1]));

        let cap = p.len() / 3;
        let capped = propose_queries(&rc.depth, &rig, &pose, &spec, cap).unwrap();
        assert_eq!(capped.len(), cap);
        assert_eq!(capped.truncated, p.len() - cap);
        assert_eq!(capped.voxels[..], p.voxels[..cap]);
    }
}

fn refine_setup(seed: u64) -> (CameraRig, CameraPose, DepthBinSpec, GridSpec, QueryProposals) {
    let rig = small_rig();
    let grid = GridSpec {
        dims: [4, 4, 2],
        origin_m: [0.5, 0.0, 0.0],
        voxel_size_m: 0.5,
    };
    let pose = CameraPose::look_along([0.0, 1.0, 0.5], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
    let bins = DepthBinSpec::uniform(4, 0.5, 2.5);
    let voxels = vec![[0, 1, 0], [1, 2, 1], [2, 0, 0], [3, 3, 1], [1 + seed as usize % 2, 1, 1]];
    let flat = voxels.iter().map(|v| grid.index(*v)).collect();
    let proposals = QueryProposals {
        voxels,
        flat,
        depth: vec![1.0; 5],
        truncated: 0,
    };
    (rig, pose, bins, grid, proposals)
}

#[test]
fn jacobian_matches_finite_differences() {
    let (rig, pose, bins, grid, props) = refine_setup(0);
    let geom = query_geometry(&props, &rig, &pose, &bins, &grid).unwrap();
    let centers = bins.centers();
    let frustum_coords = |p: [f64; 3]| -> [f64; 3] {
        let c = pose.grid_to_camera(p);
        let (row, col) = rig.project(c).unwrap();
        let z = c[2];
        let seg = centers.windows(2).position(|w| z <= w[1]).unwrap_or(centers.len() - 2);
        let bin = seg as f64 + (z - centers[seg]) / (centers[seg + 1] - centers[seg]);
        [bin, row, col]
    };
    let eps = 1e-6;
    for (q, v) in props.voxels.iter().enumerate() {
        let c = grid.voxel_center(*v);
        let base = frustum_coords(c);
        for i in 0..3 {
            assert!((geom.frustum_base.get(&[q, 0, i]) - base[i]).abs() < 1e-12);
        }
        for r in 0..3 {
            let mut lo = c;
            let mut hi = c;
            lo[r] -= eps * grid.voxel_size_m;
            hi[r] += eps * grid.voxel_size_m;
            let (a, b) = (frustum_coords(lo), frustum_coords(hi));
            for i in 0..3 {
                let fd = (b[i] - a[i]) / (2.0 * eps);
                assert!((geom.frustum_jacobian_t.get(&[q, r, i]) - fd).abs() < 1e-6, "q{q} r{r} i{i}");
            }
        }
    }
}

fn build_refiner(k: usize, self_round: bool, seed: u64) -> (VoxelRefiner, ParamStore) {
    let mut cfg = RefineConfig::new(3);
    cfg.num_points = k;
    cfg.self_round = self_round;
    let mut store = ParamStore::new();
    let r = VoxelRefiner::new(&mut store, "vt", cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (r, store)
}

#[test]
fn zero_heads_sample_at_query_point() {
    let (rig, pose, bins, grid, props) = refine_setup(0);
    let geom = query_geometry(&props, &rig, &pose, &bins, &grid).unwrap();
    let (refiner, mut store) = build_refiner(4, false, 1);
    refiner.cross.zero_heads(&mut store);
    let frustum = random_tensor(&[3, 4, 6, 8], -1.0, 1.0, 2);
    let queries = random_tensor(&[5, 3], -1.0, 1.0, 3);

    let mut g = Graph::new();
    let (fv, qv) = (g.constant(frustum.clone()), g.constant(queries.clone()));
    let out = refiner.forward(&mut g, &store, qv, fv, &props, &geom, &grid).unwrap();
    let out = g.value(out).clone();

    let mut h = Graph::new();
    let fv = h.constant(frustum);
    let coords = h.constant(geom.frustum_base.reshape(&[5, 3]).unwrap());
    let sampled = h.trilinear_sample(fv, coords).unwrap();
    let sampled = h.value(sampled).clone();
    let w = &store.get(refiner.cross.output.w).value;
    let b = &store.get(refiner.cross.output.b).value;
    for (q, v) in props.voxels.iter().enumerate() {
        for c in 0..3 {
            let proj: f64 = (0..3).map(|j| sampled.get(&[q, j]) * w.get(&[j, c])).sum::<f64>() + b.data()[c];
            let expect = queries.get(&[q, c]) + proj;
            assert!((out.get(&[c, v[0], v[1], v[2]]) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn refined_volume_is_zero_off_proposals() {
    let (rig, pose, bins, grid, props) = refine_setup(1);
    let geom = query_geometry(&props, &rig, &pose, &bins, &grid).unwrap();
    let (refiner, store) = build_refiner(4, true, 4);
    let mut g = Graph::new();
    let fv = g.constant(random_tensor(&[3, 4, 6, 8], -1.0, 1.0, 5));
    let qv = g.constant(random_tensor(&[5, 3], -1.0, 1.0, 6));
    let out = refiner.forward(&mut g, &store, qv, fv, &props, &geom, &grid).unwrap();
    let out = g.value(out);
    let support: HashSet<usize> = props.flat.iter().copied().collect();
    for c in 0..3 {
        for i in 0..grid.num_voxels() {
            let v = out.data()[c * grid.num_voxels() + i];
            if !support.contains(&i) {
                assert_eq!(v, 0.0);
            }
        }
    }
    let empty = QueryProposals {
        voxels: vec![],
        flat: vec![],
        depth: vec![],
        truncated: 0,
    };
    let mut g = Graph::new();
    let fv = g.constant(random_tensor(&[3, 4, 6, 8], -1.0, 1.0, 5));
    let qv = g.constant(Tensor::zeros(&[1, 3]));
    let geom = query_geometry(&empty, &rig, &pose, &bins, &grid).unwrap();
    let z = refiner.forward(&mut g, &store, qv, fv, &empty, &geom, &grid).unwrap();
    assert!(g.value(z).data().iter().all(|&x| x == 0.0));
}

#[test]
fn refine_round_gradcheck() {
    let (rig, pose, bins, grid, props) = refine_setup(0);
    let geom = query_geometry(&props, &rig, &pose, &bins, &grid).unwrap();
    for self_round in [false, true] {
        let (refiner, store) = build_refiner(2, self_round, 7);
        let report = gradcheck(
            |g, s, v| {
                let y = refiner.forward(g, s, v[1], v[0], &props, &geom, &grid)?;
                probe_loss(g, y, 3)
            },
            &[
                ("frustum", random_tensor(&[3, 4, 6, 8], -1.0, 1.0, 8)),
                ("queries", random_tensor(&[5, 3], -1.0, 1.0, 9)),
            ],
            &store,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "self {self_round}: {:?}", report.worst());
    }
}

#[test]
fn view_transform_end_to_end_gradcheck() {
    let rig = small_rig();
    let vg = generate_scene(2, &SceneSpec::new([8, 8, 4], 3)).unwrap();
    let pose = CameraPose::canonical(&vg);
    let grid = vg.spec();
    let bins = DepthBinSpec::uniform(5, 0.3, 2.5);
    let depth = raycast(&vg, &rig, &pose).unwrap().depth;
    let props = propose_queries(&depth, &rig, &pose, &grid, default_query_cap(&grid)).unwrap();
    assert!(!props.is_empty());
    let geom = query_geometry(&props, &rig, &pose, &bins, &grid).unwrap();
    let index = frustum_index(&frustum_points(&rig, &pose, &bins), &grid).unwrap();
    let (refiner, store) = build_refiner(4, true, 11);
    let report = gradcheck(
        |g, s, v| {
            let frustum = lift(g, v[0], v[1])?;
            let lss = voxel_pool(g, frustum, &index, &grid)?;
            let q = gather_queries(g, lss, &props)?;
            let vt = refiner.forward(g, s, q, frustum, &props, &geom, &grid)?;
            let both = g.add(lss, vt)?;
            probe_loss(g, both, 5)
        },
        &[
            ("context", random_tensor(&[3, 6, 8], -1.0, 1.0, 12)),
            ("probs", random_tensor(&[5, 6, 8], 0.0, 1.0, 13)),
        ],
        &store,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
}
