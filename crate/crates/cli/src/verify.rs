//! Fast self-checks of the numerical core, each against an independent oracle.

use nalgebra::{DMatrix, DVector};
use qdp::net::{composed_compare, NetConfig, QdpNetwork, TrainBatch};
use qdp::nn::{compare_gradients, head_gradients, Graph, GraphBuilder, NodeId, Tensor};
use qdp::perception::{coverage, render_topview, CameraModel, MASK_THRESHOLD, Pixel};
use qdp::primitives::{duration_for_mid_velocity, solve_quintic, V_MID_RANGE};
use qdp::sdqn::{tabular_sdqn_oracle, TabularConfig, TinyMdp};
use qdp::sim::{build_cloth, crumple, ClothConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Perturbs one analytic gradient so the gradient checks must fail.
    pub inject_grad_bug: bool,
}

pub fn run_checks(opts: VerifyOptions) -> Vec<Check> {
    vec![
        check_quintic(),
        check_mid_velocity(),
        check_layer_gradients(opts),
        check_composed_gradients(opts),
        check_tabular_sdqn(),
        check_coverage(),
    ]
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// Coefficients from a dense solve of the six boundary conditions.
pub fn quintic_by_linear_solve(duration: f64) -> Option<[f64; 6]> {
    let t = duration;
    let rows = [
        [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 2.0, 0.0, 0.0, 0.0],
        [1.0, t, t * t, t.powi(3), t.powi(4), t.powi(5)],
        [0.0, 1.0, 2.0 * t, 3.0 * t * t, 4.0 * t.powi(3), 5.0 * t.powi(4)],
        [0.0, 0.0, 2.0, 6.0 * t, 12.0 * t * t, 20.0 * t.powi(3)],
    ];
    let m = DMatrix::from_fn(6, 6, |r, c| rows[r][c]);
    let b = DVector::from_vec(vec![0.0, 0.0, 0.0, PI, 0.0, 0.0]);
    let x = m.lu().solve(&b)?;
    Some(std::array::from_fn(|i| x[i]))
}

fn check_quintic() -> Check {
    let mut worst_bc: f64 = 0.0;
    let mut worst_coeff: f64 = 0.0;
    for t in [0.5, 1.0, 2.0, 5.0, 10.0] {
        let q = match solve_quintic(t) {
            Ok(q) => q,
            Err(e) => return check("quintic", false, e.to_string()),
        };
        for r in [
            q.alpha(0.0),
            q.alpha_dot(0.0),
            q.alpha_ddot(0.0),
            q.alpha(t) - PI,
            q.alpha_dot(t),
            q.alpha_ddot(t),
        ] {
            worst_bc = worst_bc.max(r.abs());
        }
        match quintic_by_linear_solve(t) {
            Some(a) => {
                for i in 0..6 {
                    worst_coeff = worst_coeff.max((a[i] - q.a[i]).abs());
                }
            }
            None => return check("quintic", false, "oracle solve failed".into()),
        }
    }
    check(
        "quintic",
        worst_bc < 1e-9 && worst_coeff < 1e-9,
        format!("boundary residual {worst_bc:.2e}, coefficient gap {worst_coeff:.2e}"),
    )
}

/// Midpoint speed of the swept semicircle, by central differences of positions.
fn fd_mid_speed(radius: f64, duration: f64) -> Option<f64> {
    let q = solve_quintic(duration).ok()?;
    let pos = |t: f64| {
        let a = q.alpha(t);
        (radius * a.cos(), radius * a.sin())
    };
    let h = duration * 1e-6;
    let (p0, p1) = (pos(duration / 2.0 - h), pos(duration / 2.0 + h));
    Some(((p1.0 - p0.0).powi(2) + (p1.1 - p0.1).powi(2)).sqrt() / (2.0 * h))
}

/// Duration whose midpoint speed equals `v_mid`, by bisection (speed falls with duration).
pub fn duration_by_root_finding(radius: f64, v_mid: f64) -> Option<f64> {
    let (mut lo, mut hi): (f64, f64) = (1e-4, 1e4);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if fd_mid_speed(radius, mid)? > v_mid {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-12 {
            break;
        }
    }
    Some((lo * hi).sqrt())
}

fn check_mid_velocity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let radius = rng.gen_range(0.02..0.4);
        let v = rng.gen_range(V_MID_RANGE.0..=V_MID_RANGE.1);
        let (Ok(closed), Some(numeric)) = (duration_for_mid_velocity(radius, v), duration_by_root_finding(radius, v)) else {
            return check("mid-velocity", false, format!("failed at r={radius}, v={v}"));
        };
        worst = worst.max((closed - numeric).abs() / numeric);
    }
    check("mid-velocity", worst < 1e-6, format!("worst relative gap {worst:.2e}"))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

fn check_layer_gradients(opts: VerifyOptions) -> Check {
    type Build = fn(&mut GraphBuilder, NodeId) -> NodeId;
    let cases: Vec<(&str, [usize; 3], Build)> = vec![
        ("conv", [2, 6, 6], |b, x| b.conv("c", x, 3, 3, 1, 1).unwrap()),
        ("conv-stride2", [2, 7, 7], |b, x| b.conv("c", x, 2, 3, 2, 1).unwrap()),
        ("dense", [2, 3, 3], |b, x| b.dense("d", x, 4).unwrap()),
        ("relu", [2, 4, 4], |b, x| b.relu("r", x).unwrap()),
        ("maxpool", [2, 4, 4], |b, x| b.maxpool("p", x).unwrap()),
        ("upsample", [2, 3, 3], |b, x| b.upsample("u", x).unwrap()),
        ("concat", [2, 3, 3], |b, x| {
            let r = b.relu("r", x).unwrap();
            b.concat("cat", &[x, r]).unwrap()
        }),
    ];
    let mut worst = (0.0f64, "");
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shape, build) in &cases {
            let mut b = GraphBuilder::new();
            let x = b.input("x", shape);
            let y = build(&mut b, x);
            b.output(y);
            let mut g: Graph<f64> = match b.build(&mut rng) {
                Ok(g) => g,
                Err(e) => return check("layer gradients", false, e.to_string()),
            };
            for p in g.params.iter_mut() {
                *p = random_tensor(&p.shape.clone(), &mut rng);
            }
            let mut input_shape = vec![2];
            input_shape.extend_from_slice(shape);
            let input = random_tensor(&input_shape, &mut rng);
            let report = head_gradients(&g, &[&input]).and_then(|mut analytic| {
                if opts.inject_grad_bug {
                    if let Some(v) = analytic.inputs[0].data.first_mut() {
                        *v = *v * 1.5 + 0.1;
                    }
                }
                compare_gradients(&g, &[&input], &analytic, 1e-5)
            });
            match report {
                Ok(r) if r.max_rel_error > worst.0 => worst = (r.max_rel_error, name),
                Ok(_) => {}
                Err(e) => return check("layer gradients", false, format!("{name}: {e}")),
            }
        }
    }
    check(
        "layer gradients",
        worst.0 < 1e-4,
        format!("worst relative error {:.2e} ({})", worst.0, worst.1),
    )
}

fn check_composed_gradients(opts: VerifyOptions) -> Check {
    let config = NetConfig {
        image_size: 16,
        crop_size: 8,
        theta_bins: 3,
        unet_channels: [2, 3, 4],
        crop_channels: [2, 3],
        theta_channels: 3,
    };
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut net: QdpNetwork<f64> = match QdpNetwork::new(config.clone(), &mut rng) {
            Ok(n) => n,
            Err(e) => return check("composed gradients", false, e.to_string()),
        };
        for g in net.graphs_mut() {
            for (i, p) in g.params.iter_mut().enumerate() {
                if i % 2 == 1 {
                    p.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
                }
            }
        }
        let mut obs = Tensor::zeros(&[3, 1, 16, 16]);
        obs.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        let batch = TrainBatch {
            obs,
            picks: vec![Pixel::new(0, 15), Pixel::new(8, 8), Pixel::new(13, 2)],
            places: vec![Pixel::new(4, 4), Pixel::new(15, 0), Pixel::new(9, 11)],
            thetas: vec![0, 2, 1],
        };
        let y = [0.3, -0.7, 2.5];
        let err = net.loss_and_grads(&batch, &y, 1.0).and_then(|(_, mut grads)| {
            if opts.inject_grad_bug {
                grads.graphs[1][0].scale(0.5);
            }
            composed_compare(&net, &batch, &y, 1.0, 1e-4, &grads)
        });
        match err {
            Ok(e) => worst = worst.max(e),
            Err(e) => return check("composed gradients", false, e.to_string()),
        }
    }
    check(
        "composed gradients",
        worst < 1e-4,
        format!("worst relative error {worst:.2e} over 3 seeds"),
    )
}

/// Two states, three binary sub-actions, deterministic transitions.
pub fn two_state_mdp(gamma: f64) -> TinyMdp {
    let mut next = vec![vec![vec![]; 8]; 2];
    let mut reward = vec![vec![0.0; 8]; 2];
    for s in 0..2 {
        for a in 0..8 {
            let (a1, a2, a3) = (a >> 2, (a >> 1) & 1, a & 1);
            next[s][a] = vec![((s + a1 + a3) % 2, 1.0)];
            reward[s][a] = if s == 0 {
                0.3 * a1 as f64 + 0.5 * a2 as f64 - 0.2 * a3 as f64
            } else {
                1.0 - 0.4 * a1 as f64 + 0.25 * (a2 * a3) as f64
            };
        }
    }
    TinyMdp {
        n_states: 2,
        factors: [2, 2, 2],
        next,
        reward,
        gamma,
    }
}

fn check_tabular_sdqn() -> Check {
    let mdp = two_state_mdp(0.9);
    let exact = mdp.value_iteration(1e-12);
    let t = tabular_sdqn_oracle(&mdp, &TabularConfig::default());
    let mut q_gap: f64 = 0.0;
    let mut identity_gap: f64 = 0.0;
    for s in 0..2 {
        for a in 0..8 {
            q_gap = q_gap.max((t.q3[s][a] - exact[s][a]).abs());
        }
        let g = t.greedy(s);
        let best3 = (0..8).map(|a| t.q3[s][a]).fold(f64::MIN, f64::max);
        identity_gap = identity_gap.max((t.q1[s][g[0]] - best3).abs());
    }
    check(
        "tabular sdqn",
        q_gap < 1e-2 && identity_gap < 1e-2,
        format!("max |Q3 - Q*| {q_gap:.2e}, max |Q1(a1*) - max Q3| {identity_gap:.2e}"),
    )
}

fn check_coverage() -> Check {
    let cam = CameraModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..20u64 {
        let n = rng.gen_range(8..16);
        let cfg = ClothConfig {
            rows: n,
            cols: n,
            spacing: rng.gen_range(0.015..0.03),
            ..Default::default()
        };
        let state = match build_cloth(&cfg).and_then(|c| crumple(&c, i, rng.gen_range(0.0..1.0))) {
            Ok(s) => s,
            Err(e) => return check("coverage", false, e.to_string()),
        };
        let obs = render_topview(&state, &cam);
        let c_max = cam.flat_area_px(cfg.rows, cfg.cols, cfg.spacing);
        let count = obs.image.iter().filter(|&&v| v > MASK_THRESHOLD).count();
        let brute = (count as f64 / c_max).min(1.0);
        if coverage(&obs, c_max) != brute {
            return check("coverage", false, format!("state {i}: {} vs {brute}", coverage(&obs, c_max)));
        }
    }
    check("coverage", true, "20 rendered states match a direct pixel count".into())
}
