use qdp::nn::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let mut t = Tensor::zeros(shape);
    t.data.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
    t
}

fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

#[test]
fn identity_graph_passes_input_through() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[2, 3, 3]);
    b.output(x);
    let g: Graph<f64> = b.build(&mut rng(0)).unwrap();
    let input = random_tensor(&[2, 2, 3, 3], 1);
    assert_eq!(g.infer(&[&input]).unwrap()[0], input);
}

#[test]
fn relu_forward() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[3]);
    let r = b.relu("relu", x).unwrap();
    b.output(r);
    let g: Graph<f64> = b.build(&mut rng(0)).unwrap();
    let out = g.infer(&[&t64(&[1, 3], &[-1.0, 0.0, 2.0])]).unwrap();
    assert_eq!(out[0].data, vec![0.0, 0.0, 2.0]);
}

#[test]
fn unit_1x1_conv_sums_channels() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[2, 3, 3]);
    let c = b.conv("mix", x, 1, 1, 1, 0).unwrap();
    b.output(c);
    let mut g: Graph<f64> = b.build(&mut rng(0)).unwrap();
    g.params[0].fill(1.0);
    g.params[1].fill(0.0);
    let a: Vec<f64> = (0..9).map(|v| v as f64).collect();
    let bch: Vec<f64> = (0..9).map(|v| 10.0 - 2.0 * v as f64).collect();
    let input = t64(&[1, 2, 3, 3], &[a.clone(), bch.clone()].concat());
    let out = g.infer(&[&input]).unwrap();
    let expected: Vec<f64> = a.iter().zip(&bch).map(|(x, y)| x + y).collect();
    assert_eq!(out[0].data, expected);
}

#[test]
fn conv_matches_direct_convolution() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[2, 5, 6]);
    let c = b.conv("c", x, 3, 3, 2, 1).unwrap();
    b.output(c);
    let g: Graph<f64> = b.build(&mut rng(3)).unwrap();
    let mut g = g;
    g.params[1] = random_tensor(&[3], 9);
    let input = random_tensor(&[2, 2, 5, 6], 4);
    let out = &g.infer(&[&input]).unwrap()[0];
    assert_eq!(out.shape, vec![2, 3, 3, 3]);
    let (w, bias) = (&g.params[0], &g.params[1]);
    for n in 0..2 {
        for o in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut acc = bias.data[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ih = (i * 2 + ki) as isize - 1;
                                let iw = (j * 2 + kj) as isize - 1;
                                if ih < 0 || iw < 0 || ih >= 5 || iw >= 6 {
                                    continue;
                                }
                                acc += w.data[((o * 2 + c) * 3 + ki) * 3 + kj]
                                    * input.data[((n * 2 + c) * 5 + ih as usize) * 6 + iw as usize];
                            }
                        }
                    }
                    let got = out.data[((n * 3 + o) * 3 + i) * 3 + j];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn dense_weight_gradient_is_outer_product() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[2]);
    let d = b.dense("fc", x, 2).unwrap();
    b.output(d);
    let mut g: Graph<f64> = b.build(&mut rng(0)).unwrap();
    g.params[0] = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let input = t64(&[1, 2], &[0.5, -1.5]);
    let (out, cache) = g.forward(&[&input]).unwrap();
    assert_eq!(out[0].data, vec![0.5 - 3.0, 1.5 - 6.0]);
    let dy = t64(&[1, 2], &[2.0, -1.0]);
    let grads = g.backward(&cache, &[Some(&dy)]).unwrap();
    // dL/dW = dy x^T
    assert_eq!(grads.params[0].data, vec![1.0, -3.0, -0.5, 1.5]);
    assert_eq!(grads.params[1].data, vec![2.0, -1.0]);
    // dL/dx = W^T dy
    assert_eq!(grads.inputs[0].data, vec![2.0 - 3.0, 4.0 - 4.0]);
}

#[test]
fn zero_output_grad_gives_zero_gradients() {
    let g = small_composed(0);
    let input = random_tensor(&[2, 1, 8, 8], 5);
    let (_, cache) = g.forward(&[&input]).unwrap();
    let zeros = Tensor::zeros(&[2, 3]);
    let grads = g.backward(&cache, &[Some(&zeros)]).unwrap();
    assert!(grads.params.iter().all(|p| p.data.iter().all(|&v| v == 0.0)));
    assert!(grads.inputs[0].data.iter().all(|&v| v == 0.0));
}

#[test]
fn maxpool_routes_gradient_to_first_maximum() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[1, 2, 2]);
    let p = b.maxpool("pool", x).unwrap();
    b.output(p);
    let g: Graph<f64> = b.build(&mut rng(0)).unwrap();
    let input = t64(&[1, 1, 2, 2], &[1.0, 3.0, 3.0, 2.0]);
    let (out, cache) = g.forward(&[&input]).unwrap();
    assert_eq!(out[0].data, vec![3.0]);
    let grads = g.backward(&cache, &[Some(&t64(&[1, 1, 1, 1], &[1.0]))]).unwrap();
    assert_eq!(grads.inputs[0].data, vec![0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn upsample_and_concat_shapes() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[2, 2, 2]);
    let y = b.input("y", &[1, 4, 4]);
    let u = b.upsample("up", x).unwrap();
    let c = b.concat("cat", &[u, y]).unwrap();
    b.output(c);
    let g: Graph<f64> = b.build(&mut rng(0)).unwrap();
    let xs = t64(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    let ys = random_tensor(&[1, 1, 4, 4], 2);
    let out = &g.infer(&[&xs, &ys]).unwrap()[0];
    assert_eq!(out.shape, vec![1, 3, 4, 4]);
    assert_eq!(&out.data[0..4], &[1.0, 1.0, 2.0, 2.0]);
    assert_eq!(&out.data[8..12], &[3.0, 3.0, 4.0, 4.0]);
    assert_eq!(&out.data[32..], &ys.data[..]);
}

#[test]
fn shape_errors_name_the_layer() {
    let mut b = GraphBuilder::new();
    let x = b.input("obs", &[1, 5, 5]);
    let err = b.maxpool("pool1", x).unwrap_err();
    assert!(err.to_string().contains("pool1"));

    let y = b.input("other", &[1, 4, 4]);
    let err = b.concat("fuse", &[x, y]).unwrap_err();
    assert!(err.to_string().contains("fuse"));

    let err = b.conv("even", x, 2, 2, 1, 0).unwrap_err();
    assert!(err.to_string().contains("even"));

    let c = b.conv("c", x, 2, 3, 1, 1).unwrap();
    b.output(c);
    let g: Graph<f32> = b.build(&mut rng(0)).unwrap();
    let wrong = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
    let right = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
    let err = g.forward(&[&wrong, &right]).unwrap_err();
    assert!(err.to_string().contains("obs"));
}

#[test]
fn stale_cache_rejected() {
    let a = small_composed(0);
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[3]);
    b.output(x);
    let other: Graph<f64> = b.build(&mut rng(0)).unwrap();
    let input = t64(&[1, 3], &[1.0, 2.0, 3.0]);
    let (_, cache) = other.forward(&[&input]).unwrap();
    let dy = Tensor::zeros(&[1, 3]);
    assert!(matches!(a.backward(&cache, &[Some(&dy)]), Err(NnError::StaleCache(_))));
}

#[test]
fn parameter_count_matches_formula() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[3, 16, 16]);
    let c1 = b.conv("c1", x, 8, 3, 1, 1).unwrap();
    let c2 = b.conv("c2", c1, 4, 5, 2, 2).unwrap();
    let p = b.maxpool("p", c2).unwrap();
    let d = b.dense("fc", p, 7).unwrap();
    b.output(d);
    let g: Graph<f32> = b.build(&mut rng(0)).unwrap();
    let expected = (8 * 3 * 9 + 8) + (4 * 8 * 25 + 4) + (7 * (4 * 4 * 4) + 7);
    assert_eq!(g.param_count(), expected);
    let from_specs: usize = g
        .nodes
        .iter()
        .filter_map(|n| match &n.op {
            NodeOp::Layer(s) => Some(s.param_count()),
            _ => None,
        })
        .sum();
    assert_eq!(from_specs, expected);
}

#[test]
fn kaiming_bounds_and_zero_bias() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[4, 8, 8]);
    let c = b.conv("c", x, 16, 3, 1, 1).unwrap();
    b.output(c);
    let g: Graph<f32> = b.build(&mut rng(1)).unwrap();
    let bound = (6.0f32 / 36.0).sqrt();
    assert!(g.params[0].data.iter().all(|v| v.abs() <= bound));
    assert!(g.params[0].data.iter().any(|v| v.abs() > 0.5 * bound));
    assert!(g.params[1].data.iter().all(|&v| v == 0.0));
}

fn linear_graph(seed: u64) -> Graph<f64> {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[2, 4, 4]);
    let c = b.conv("c", x, 3, 3, 1, 1).unwrap();
    let d = b.dense("fc", c, 4).unwrap();
    b.output(d);
    let mut g: Graph<f64> = b.build(&mut rng(seed)).unwrap();
    for (i, p) in g.params.iter_mut().enumerate() {
        *p = random_tensor(&p.shape.clone(), seed * 31 + i as u64);
    }
    g
}

fn small_composed(seed: u64) -> Graph<f64> {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[1, 8, 8]);
    let c1 = b.conv("c1", x, 3, 3, 1, 1).unwrap();
    let r1 = b.relu("r1", c1).unwrap();
    let p1 = b.maxpool("p1", r1).unwrap();
    let c2 = b.conv("c2", p1, 4, 3, 1, 1).unwrap();
    let r2 = b.relu("r2", c2).unwrap();
    let u = b.upsample("u", r2).unwrap();
    let cat = b.concat("cat", &[u, r1]).unwrap();
    let c3 = b.conv("c3", cat, 2, 3, 2, 1).unwrap();
    let d = b.dense("fc", c3, 3).unwrap();
    b.output(d);
    let mut g: Graph<f64> = b.build(&mut rng(seed)).unwrap();
    for (i, p) in g.params.iter_mut().enumerate() {
        if i % 2 == 1 {
            *p = random_tensor(&p.shape.clone(), 1000 + seed * 17 + i as u64);
            p.scale(0.1);
        }
    }
    g
}

#[test]
fn grad_check_exact_on_linear_graph() {
    let g = linear_graph(2);
    let input = random_tensor(&[2, 2, 4, 4], 7);
    let report = grad_check(&g, &[&input], 1e-4).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
    assert_eq!(report.checked, g.param_count() + input.len());
}

#[test]
fn grad_check_each_layer_type() {
    type Build = fn(&mut GraphBuilder, NodeId) -> NodeId;
    let cases: Vec<(&str, [usize; 3], Build)> = vec![
        ("conv", [2, 6, 6], |b, x| b.conv("c", x, 3, 3, 1, 1).unwrap()),
        ("conv_stride", [2, 7, 7], |b, x| b.conv("c", x, 2, 5, 2, 2).unwrap()),
        ("dense", [2, 3, 3], |b, x| b.dense("d", x, 5).unwrap()),
        ("relu", [2, 4, 4], |b, x| b.relu("r", x).unwrap()),
        ("maxpool", [2, 4, 4], |b, x| b.maxpool("p", x).unwrap()),
        ("upsample", [2, 3, 3], |b, x| b.upsample("u", x).unwrap()),
        ("concat", [2, 4, 4], |b, x| {
            let r = b.relu("r", x).unwrap();
            b.concat("cat", &[x, r, x]).unwrap()
        }),
    ];
    for seed in 0..3u64 {
        for (name, shape, build) in &cases {
            let mut b = GraphBuilder::new();
            let x = b.input("x", shape);
            let y = build(&mut b, x);
            b.output(y);
            let mut g: Graph<f64> = b.build(&mut rng(seed)).unwrap();
            for (i, p) in g.params.iter_mut().enumerate() {
                if i % 2 == 1 {
                    *p = random_tensor(&p.shape.clone(), seed + 50);
                }
            }
            let mut input_shape = vec![2];
            input_shape.extend_from_slice(shape);
            let input = random_tensor(&input_shape, seed + 100);
            let report = grad_check(&g, &[&input], 1e-4).unwrap();
            assert!(report.max_rel_error < 1e-4, "{name} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn grad_check_composed_graph_three_seeds() {
    for seed in 0..3 {
        let g = small_composed(seed);
        let input = random_tensor(&[2, 1, 8, 8], seed + 11);
        let report = grad_check(&g, &[&input], 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn grad_check_detects_corrupted_gradient() {
    let g = small_composed(4);
    let input = random_tensor(&[2, 1, 8, 8], 12);
    let mut analytic = head_gradients(&g, &[&input]).unwrap();
    analytic.params[2].data[5] *= 1.5;
    let report = compare_gradients(&g, &[&input], &analytic, 1e-4).unwrap();
    assert!(report.max_rel_error > 1e-2, "{report:?}");
    assert_eq!(report.worst, "param 2 [5]");
}

#[test]
fn forward_is_deterministic_in_f32() {
    let g: Graph<f32> = small_composed(1).cast();
    let input: Tensor<f32> = random_tensor(&[3, 1, 8, 8], 3).cast();
    let a = g.infer(&[&input]).unwrap();
    let b = g.infer(&[&input]).unwrap();
    assert_eq!(a, b);
    assert!(a[0].all_finite());
}

#[test]
fn batch_entries_are_independent() {
    let g = small_composed(2);
    let input = random_tensor(&[3, 1, 8, 8], 4);
    let full = &g.infer(&[&input]).unwrap()[0];
    for n in 0..3 {
        let single = Tensor::from_vec(&[1, 1, 8, 8], input.sample(n).to_vec()).unwrap();
        let out = &g.infer(&[&single]).unwrap()[0];
        for (a, b) in out.data.iter().zip(full.sample(n)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn serialization_round_trip() {
    let g: Graph<f32> = small_composed(5).cast();
    let bytes = encode_params(&g);
    assert_eq!(&bytes[..8], MAGIC);
    let mut fresh: Graph<f32> = small_composed(9).cast();
    assert_ne!(fresh.params, g.params);
    let used = decode_params_into(&mut fresh, &bytes).unwrap();
    assert_eq!(used, bytes.len());
    assert_eq!(fresh.params, g.params);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    save_params(&g, &path).unwrap();
    let mut again: Graph<f32> = small_composed(9).cast();
    load_params(&mut again, &path).unwrap();
    assert_eq!(again.params, g.params);
}

#[test]
fn corrupted_payload_detected() {
    let g: Graph<f32> = small_composed(5).cast();
    let mut bytes = encode_params(&g);
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    let mut target: Graph<f32> = small_composed(5).cast();
    assert!(matches!(decode_params_into(&mut target, &bytes), Err(NnError::Checksum { .. })));
    assert!(decode_params_into(&mut target, &bytes[..n - 10]).is_err());
    let mut bad_magic = encode_params(&g);
    bad_magic[0] = b'X';
    assert!(matches!(decode_params_into(&mut target, &bad_magic), Err(NnError::Format(_))));
}

#[test]
fn architecture_mismatch_detected() {
    let g: Graph<f32> = small_composed(5).cast();
    let mut other: Graph<f32> = linear_graph(1).cast();
    let err = decode_params_into(&mut other, &encode_params(&g)).unwrap_err();
    assert!(matches!(err, NnError::ArchitectureMismatch { .. }));
}

#[test]
fn adam_runs_are_reproducible() {
    let run = || {
        let mut g: Graph<f32> = small_composed(6).cast();
        let mut state = AdamState::new(&g.params, 1e-3);
        let input: Tensor<f32> = random_tensor(&[2, 1, 8, 8], 8).cast();
        let target = Tensor::<f32>::zeros(&[2, 3]);
        let mut losses = vec![];
        for _ in 0..20 {
            let (out, cache) = g.forward(&[&input]).unwrap();
            let (loss, dy) = huber_loss(&out[0], &target, 1.0).unwrap();
            losses.push(loss);
            let grads = g.backward(&cache, &[Some(&dy)]).unwrap();
            state.update(&mut g.params, &grads.params).unwrap();
        }
        (g.params, losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la.last().unwrap() < &la[0]);
}
