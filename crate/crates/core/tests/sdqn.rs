use qdp::net::{ComposedAction, NetConfig, NetOptimizer, QdpNetwork};
use qdp::perception::Pixel;
use qdp::sdqn::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_net(seed: u64) -> QdpNetwork<f32> {
    let cfg = NetConfig {
        image_size: 16,
        crop_size: 8,
        theta_bins: 3,
        unet_channels: [2, 3, 4],
        crop_channels: [2, 3],
        theta_channels: 3,
    };
    QdpNetwork::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn blob(seed: u64) -> Vec<u8> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (cr, cc) = (r.gen_range(4..12) as i32, r.gen_range(4..12) as i32);
    let v = r.gen_range(160u8..=255);
    (0..256)
        .map(|i| {
            let (row, col) = (i / 16, i % 16);
            if (row - cr).pow(2) + (col - cc).pow(2) <= 9 {
                v
            } else {
                0
            }
        })
        .collect()
}

fn transition(seed: u64, done: bool) -> Transition {
    let mut r = ChaCha8Rng::seed_from_u64(seed + 1000);
    Transition {
        obs: blob(seed),
        action: ComposedAction {
            pick: Pixel::new(r.gen_range(0..16), r.gen_range(0..16)),
            place: Pixel::new(r.gen_range(0..16), r.gen_range(0..16)),
            theta: r.gen_range(0..3),
            angle: 0.0,
            valid: true,
        },
        reward: r.gen_range(0.0..10.0),
        next_obs: blob(seed + 1),
        done,
    }
}

#[test]
fn epsilon_schedule_values() {
    assert_eq!(epsilon_schedule(0), 1.0);
    assert!((epsilon_schedule(500) - 0.5).abs() < 1e-12);
    assert_eq!(epsilon_schedule(1_000_000), 0.01);
    let per_step = TrainConfig {
        eps_mode: EpsilonMode::PerStep,
        eps_decay: 1e-4,
        ..TrainConfig::default()
    };
    assert!((per_step.epsilon(3, 2000) - 0.8).abs() < 1e-12);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { gamma: 1.5, ..Default::default() },
        TrainConfig { eps_floor: 0.5, eps_start: 0.2, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { lr: 0.0, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn buffer_is_fifo_and_bounded() {
    let mut buf = ReplayBuffer::new(5, 0);
    for i in 0..12 {
        let mut t = transition(i, false);
        t.reward = i as f64;
        buf.push(t);
        assert!(buf.len() <= 5);
    }
    let rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
    assert_eq!(rewards, vec![7.0, 8.0, 9.0, 10.0, 11.0]);
}

#[test]
fn sampling_is_without_replacement() {
    let mut buf = ReplayBuffer::new(100, 3);
    for i in 0..20 {
        let mut t = transition(i, false);
        t.reward = i as f64;
        buf.push(t);
    }
    for _ in 0..50 {
        let mut r: Vec<i64> = buf.sample(20).unwrap().iter().map(|t| t.reward as i64).collect();
        r.sort();
        assert_eq!(r, (0..20).collect::<Vec<_>>());
    }
    assert!(matches!(buf.sample(21), Err(SdqnError::BufferUnderfull { have: 20, need: 21 })));
}

#[test]
fn terminal_target_is_reward() {
    let net = small_net(0);
    let mut t = transition(1, true);
    t.reward = 8.0;
    assert_eq!(td_target(&net, &[&t], 0.9).unwrap(), vec![8.0]);
}

#[test]
fn bootstrapped_target_arithmetic() {
    // A network whose Q3 is the constant vector [2, 1, 0.5].
    let mut net = small_net(0);
    for g in net.graphs_mut() {
        g.params.iter_mut().for_each(|p| p.fill(0.0));
    }
    let bias = net.theta.params.len() - 1;
    net.theta.params[bias].data = vec![2.0, 1.0, 0.5];
    let mut t = transition(2, false);
    t.reward = 5.0;
    let y = td_target(&net, &[&t], 0.9).unwrap();
    assert!((y[0] - 6.8).abs() < 1e-6);
}

#[test]
fn myopic_target_is_reward() {
    let net = small_net(1);
    let ts: Vec<Transition> = (0..4).map(|i| transition(i, i % 2 == 0)).collect();
    let refs: Vec<&Transition> = ts.iter().collect();
    let y = td_target(&net, &refs, 0.0).unwrap();
    assert_eq!(y, ts.iter().map(|t| t.reward).collect::<Vec<_>>());
}

#[test]
fn target_ignores_online_network() {
    let online = small_net(3);
    let target = small_net(4);
    let ts: Vec<Transition> = (0..4).map(|i| transition(i, false)).collect();
    let refs: Vec<&Transition> = ts.iter().collect();
    let y1 = td_target(&target, &refs, 0.9).unwrap();
    let mut online = online;
    online.pick.params[0].data.iter_mut().for_each(|v| *v += 1.0);
    let y2 = td_target(&target, &refs, 0.9).unwrap();
    assert_eq!(y1, y2);

    let mut synced = target.clone();
    sync_target(&online, &mut synced);
    assert_eq!(synced.checksum(), online.checksum());
    assert_eq!(td_target(&synced, &refs, 0.9).unwrap(), td_target(&online, &refs, 0.9).unwrap());
}

#[test]
fn shared_target_loss_examples() {
    let mut net = small_net(0);
    for g in net.graphs_mut() {
        g.params.iter_mut().for_each(|p| p.fill(0.0));
    }
    let t = transition(0, false);
    let l = loss_all_heads(&net, &[&t], &[1.0], 1.0).unwrap();
    assert_eq!(l.total, 1.5);

    // Q1 is the q1 bias everywhere; a perfect prediction zeroes that head.
    let q1_bias = net.pick.params.len() - 1;
    net.pick.params[q1_bias].data[0] = 1.0;
    let l = loss_all_heads(&net, &[&t], &[1.0], 1.0).unwrap();
    assert_eq!(l.pick, 0.0);
}

#[test]
fn loss_only_reads_selected_entries() {
    let net = small_net(5);
    let t = transition(3, false);
    let y = 2.0;
    let loss = loss_all_heads(&net, &[&t], &[y], 1.0).unwrap();

    let x = qdp::nn::Tensor::from_vec(&[1, 1, 16, 16], t.obs.iter().map(|&b| b as f32 / 255.0).collect()).unwrap();
    let (g, q1) = net.pick_forward(&x).unwrap();
    let crops = net.crops(&x, &[t.action.pick]).unwrap();
    let (_, canvas, q2) = net.place_forward(&g, &crops, &[t.action.pick]).unwrap();
    let q3 = net.theta_forward(&g, &canvas, &q2).unwrap();
    let huber = |q: f32| {
        let e = (q as f64 - y).abs();
        if e <= 1.0 {
            0.5 * e * e
        } else {
            e - 0.5
        }
    };
    let expected = huber(q1.data[t.action.pick.index(16)])
        + huber(q2.data[t.action.place.index(16)])
        + huber(q3.data[t.action.theta]);
    assert!((loss.total - expected).abs() < 1e-5);
}

#[test]
fn corrupt_action_rejected() {
    let net = small_net(0);
    let mut t = transition(0, false);
    t.action.pick = Pixel::new(40, 2);
    assert!(loss_all_heads(&net, &[&t], &[1.0], 1.0).is_err());
}

fn run_training(seed: u64, steps: usize) -> (QdpNetwork<f32>, Vec<TrainMetrics>) {
    let cfg = TrainConfig {
        batch_size: 4,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let mut net = small_net(seed);
    let mut target = net.clone();
    let mut opt = NetOptimizer::new(&net, cfg.lr);
    let mut buf = ReplayBuffer::new(100, seed);
    for i in 0..12 {
        buf.push(transition(i, i % 5 == 4));
    }
    let mut metrics = vec![];
    for s in 0..steps {
        metrics.push(train_step(&mut net, &target, &mut buf, &mut opt, &cfg).unwrap());
        if s % 5 == 4 {
            sync_target(&net, &mut target);
        }
    }
    (net, metrics)
}

#[test]
fn training_is_deterministic() {
    let (a, ma) = run_training(7, 15);
    let (b, mb) = run_training(7, 15);
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    assert!(ma.iter().all(|m| m.grad_norm.is_finite() && m.loss.is_finite()));
}

#[test]
fn fixed_batch_overfits() {
    let cfg = TrainConfig {
        batch_size: 4,
        lr: 1e-3,
        gamma: 0.0,
        ..TrainConfig::default()
    };
    let mut net = small_net(2);
    let target = net.clone();
    let mut opt = NetOptimizer::new(&net, cfg.lr);
    let mut buf = ReplayBuffer::new(4, 0);
    for i in 0..4 {
        buf.push(transition(i, false));
    }
    let first = train_step(&mut net, &target, &mut buf, &mut opt, &cfg).unwrap().loss;
    let mut last = first;
    for _ in 0..99 {
        last = train_step(&mut net, &target, &mut buf, &mut opt, &cfg).unwrap().loss;
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn underfull_buffer_rejected() {
    let cfg = TrainConfig::default();
    let mut net = small_net(0);
    let target = net.clone();
    let mut opt = NetOptimizer::new(&net, cfg.lr);
    let mut buf = ReplayBuffer::new(100, 0);
    buf.push(transition(0, false));
    assert!(matches!(
        train_step(&mut net, &target, &mut buf, &mut opt, &cfg),
        Err(SdqnError::BufferUnderfull { .. })
    ));
}

fn two_state_mdp(gamma: f64) -> TinyMdp {
    let mut next = vec![vec![vec![]; 8]; 2];
    let mut reward = vec![vec![0.0; 8]; 2];
    for s in 0..2 {
        for a1 in 0..2 {
            for a2 in 0..2 {
                for a3 in 0..2 {
                    let a = (a1 * 2 + a2) * 2 + a3;
                    next[s][a] = vec![((s + a1 + a3) % 2, 1.0)];
                    reward[s][a] = if s == 0 {
                        0.3 * a1 as f64 + 0.5 * a2 as f64 - 0.2 * a3 as f64
                    } else {
                        1.0 - 0.4 * a1 as f64 + 0.25 * (a2 * a3) as f64
                    };
                }
            }
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

#[test]
fn tabular_sdqn_matches_value_iteration() {
    let mdp = two_state_mdp(0.9);
    let vi = mdp.value_iteration(1e-12);
    let t = tabular_sdqn_oracle(&mdp, &TabularConfig::default());
    for s in 0..2 {
        for a in 0..8 {
            let learned = t.q3[s][a];
            assert!((learned - vi[s][a]).abs() < 1e-2, "s{s} a{a}: {learned} vs {}", vi[s][a]);
        }
        let g = t.greedy(s);
        let best = vi[s].iter().cloned().fold(f64::MIN, f64::max);
        assert!((t.q1[s][g[0]] - best).abs() < 1e-2);
        assert!((t.q3_at(s, g) - t.q1[s][g[0]]).abs() < 1e-2);
        assert!((t.q2[s][g[0] * 2 + g[1]] - t.q1[s][g[0]]).abs() < 1e-2);
    }
}

#[test]
fn tabular_myopic_equals_immediate_reward() {
    let mdp = two_state_mdp(0.0);
    let t = tabular_sdqn_oracle(&mdp, &TabularConfig::default());
    for s in 0..2 {
        for a in 0..8 {
            assert!((t.q3[s][a] - mdp.reward[s][a]).abs() < 1e-9);
        }
    }
}
