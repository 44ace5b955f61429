mod common;

use ccl_core::optim::{dsgdm_step, gossip_mix, lr_at, qgm_step};
use ccl_core::{LrSchedule, OptState, OptimizerConfig};
use common::*;
use proptest::prelude::*;

fn cfg(beta: f64, nesterov: bool) -> OptimizerConfig {
    OptimizerConfig {
        lr: 0.1,
        beta,
        gamma: 1.0,
        weight_decay: 0.0,
        nesterov,
        schedule: LrSchedule::default(),
    }
}

#[test]
fn single_agent_qgm_matches_scalar_recursion() {
    for nesterov in [false, true] {
        let mut r = rng(11);
        let c = cfg(0.9, nesterov);
        let dim = 3;
        let mut x = uniform_vec(&mut r, dim, 1.0);
        let mut st = OptState::new(dim);
        // reference state, one coordinate at a time
        let mut rx = x.clone();
        let mut rm_hat = vec![0.0; dim];
        for k in 0..60 {
            let eta = 0.05 + 0.01 * (k % 4) as f64;
            let g = uniform_vec(&mut r, dim, 2.0);
            x = qgm_step(&x, &g, &mut st, &c, eta, 1.0, &[]).unwrap();
            for i in 0..dim {
                let m = 0.9 * rm_hat[i] + g[i];
                let step = if nesterov { g[i] + 0.9 * m } else { m };
                let next = rx[i] - eta * step;
                rm_hat[i] = 0.9 * rm_hat[i] + 0.1 * (rx[i] - next) / eta;
                rx[i] = next;
            }
            assert!(max_abs_diff(&x, &rx) < 1e-12, "step {k}");
        }
    }
}

#[test]
fn schedule_decays_at_half_and_three_quarters() {
    let s = LrSchedule::default();
    assert_eq!(lr_at(&s, 0, 200, 0.1), 0.1);
    assert!((lr_at(&s, 100, 200, 0.1) - 0.01).abs() < 1e-15);
    assert!((lr_at(&s, 150, 200, 0.1) - 0.001).abs() < 1e-15);
    assert!((lr_at(&s, 199, 200, 0.1) - 0.001).abs() < 1e-15);
}

#[test]
fn two_agents_agree_after_a_momentum_free_step() {
    let c = cfg(0.0, false);
    let x1 = vec![1.0, 2.0];
    let x2 = vec![3.0, -2.0];
    let (g1, g2) = (vec![0.5, 0.5], vec![-1.0, 1.5]);
    let mut s1 = OptState::new(2);
    let mut s2 = OptState::new(2);
    let h1: Vec<f64> = x1.iter().zip(&g1).map(|(x, g)| x - 0.1 * g).collect();
    let h2: Vec<f64> = x2.iter().zip(&g2).map(|(x, g)| x - 0.1 * g).collect();
    let a = dsgdm_step(&x1, &g1, &mut s1, &c, 0.1, 0.5, &[(0.5, &h2)]).unwrap();
    let b = dsgdm_step(&x2, &g2, &mut s2, &c, 0.1, 0.5, &[(0.5, &h1)]).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-15);
    assert!(max_abs_diff(&a, &[2.025, -0.1]) < 1e-15);
}

// The two orderings only meet when every agent sees the same gradient.
#[test]
fn qgm_and_dsgdm_meet_without_momentum_under_shared_gradients() {
    let c = cfg(0.0, false);
    let mut r = rng(21);
    let x1 = uniform_vec(&mut r, 4, 1.0);
    let x2 = uniform_vec(&mut r, 4, 1.0);
    let g = uniform_vec(&mut r, 4, 1.0);
    let h2: Vec<f64> = x2.iter().zip(&g).map(|(x, g)| x - 0.1 * g).collect();
    let d = dsgdm_step(&x1, &g, &mut OptState::new(4), &c, 0.1, 0.5, &[(0.5, &h2)]).unwrap();
    let q = qgm_step(&x1, &g, &mut OptState::new(4), &c, 0.1, 0.5, &[(0.5, &x2)]).unwrap();
    assert!(max_abs_diff(&d, &q) < 1e-15);
    // and on a single agent with any gradient sequence
    let mut xd = x1.clone();
    let mut xq = x1.clone();
    let (mut sd, mut sq) = (OptState::new(4), OptState::new(4));
    for _ in 0..10 {
        let g = uniform_vec(&mut r, 4, 1.0);
        xd = dsgdm_step(&xd, &g, &mut sd, &c, 0.1, 1.0, &[]).unwrap();
        xq = qgm_step(&xq, &g, &mut sq, &c, 0.1, 1.0, &[]).unwrap();
        assert_eq!(xd, xq);
    }
}

proptest! {
    #[test]
    fn gossip_preserves_the_sum(
        xs in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 5), 2..6),
        gamma in 0.05f64..1.0,
    ) {
        // fully connected, uniform weights, damped
        let n = xs.len();
        let w = 1.0 / n as f64;
        let next: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let terms: Vec<(f64, &[f64])> = (0..n)
                    .map(|j| {
                        let wij = if i == j { 1.0 - gamma + gamma * w } else { gamma * w };
                        (wij, xs[j].as_slice())
                    })
                    .collect();
                gossip_mix(&terms).unwrap()
            })
            .collect();
        for k in 0..5 {
            let a: f64 = xs.iter().map(|x| x[k]).sum();
            let b: f64 = next.iter().map(|x| x[k]).sum();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
