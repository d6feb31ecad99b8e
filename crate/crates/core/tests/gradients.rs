//! Analytic gradients against finite differences of independent reference
//! implementations.

use milrank::ranking_loss::{bag_pair_loss, order_desc, pair_loss_and_subgradient, LossConfig, LossVariant, SparsityTarget};
use milrank::scorer::{backprop_instance, init_params, score_bag, Activation, DropoutPlan, ScorerParams};
use milrank::seeding::stream;
use milrank::trainer::{batch_objective, ObjectiveSettings};
use milrank::dataset::{Bag, Polarity};
use rand::Rng;
use rand_distr::StandardNormal;

const DIMS: [usize; 4] = [8, 6, 4, 1];

fn naive_score(p: &ScorerParams<f64>, x: &[f64]) -> f64 {
    let l = p.stack.layers();
    let dense = |k: usize, input: &[f64]| -> Vec<f64> {
        (0..l[k].out_dim())
            .map(|r| l[k].biases[r] + l[k].row(r).iter().zip(input).map(|(w, v)| w * v).sum::<f64>())
            .collect::<Vec<f64>>()
    };
    let h1: Vec<f64> = dense(0, x).into_iter().map(|z| z.max(0.0)).collect();
    let h2: Vec<f64> = dense(1, &h1)
        .into_iter()
        .map(|z| match p.hidden_activation {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        })
        .collect();
    1.0 / (1.0 + (-dense(2, &h2)[0]).exp())
}

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn min_abs_preactivation(p: &ScorerParams<f64>, x: &[f64]) -> f64 {
    let c = p.forward(x, None, 0.0).unwrap();
    c.pre1.iter().chain(&c.pre2).fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn fd_param(p: &ScorerParams<f64>, idx: usize, h: f64, f: impl Fn(&ScorerParams<f64>) -> f64) -> f64 {
    let mut plus = p.clone();
    *plus.stack.get_mut(idx).unwrap() += h;
    let mut minus = p.clone();
    *minus.stack.get_mut(idx).unwrap() -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn forward_matches_naive_reference() {
    for act in [Activation::Relu, Activation::Sigmoid, Activation::Identity] {
        for seed in 0..10u64 {
            let mut p = init_params::<f64>(seed, &DIMS).unwrap();
            p.hidden_activation = act;
            let mut rng = stream(&[99, seed]);
            for b in p.stack.iter_mut().collect::<Vec<_>>() {
                *b += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
            let x = random_vec(&mut rng, 8);
            let got = p.forward(&x, None, 0.0).unwrap().score;
            assert!((got - naive_score(&p, &x)).abs() < 1e-12, "{act:?} seed {seed}");
        }
    }
}

#[test]
fn scorer_gradient_matches_finite_differences() {
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 20 {
        seed += 1;
        let mut p = init_params::<f64>(seed, &DIMS).unwrap();
        let mut rng = stream(&[7, seed]);
        for v in p.stack.iter_mut() {
            *v += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
        let x = random_vec(&mut rng, 8);
        if min_abs_preactivation(&p, &x) < 1e-3 {
            continue;
        }
        let cache = p.forward(&x, None, 0.0).unwrap();
        let (grad, d_input) = backprop_instance(&p, &cache, 1.0).unwrap();
        for (i, g) in grad.iter().enumerate() {
            let num = fd_param(&p, i, 1e-5, |q| naive_score(q, &x));
            assert!(rel_err(*g, num) <= 1e-4, "seed {seed} param {i}: {g} vs {num}");
        }
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp[j] += 1e-5;
            let mut xm = x.clone();
            xm[j] -= 1e-5;
            let num = (naive_score(&p, &xp) - naive_score(&p, &xm)) / 2e-5;
            assert!(rel_err(d_input[j], num) <= 1e-4, "seed {seed} input {j}");
        }
        checked += 1;
    }
}

fn reference_loss(pos: &[f64], neg: &[f64], cfg: &LossConfig) -> f64 {
    let sort = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(|a, b| b.partial_cmp(a).unwrap());
        v
    };
    let (p, q) = (sort(pos), sort(neg));
    let hinge = |z: f64| z.max(0.0);
    let l1 = hinge(1.0 - p[0] + q[0]);
    let l2 = hinge(1.0 - p[0] + p[p.len() - 1]);
    let l3 = hinge(1.0 - p[1] + q[0]);
    let l4 = hinge(1.0 - p[2] + q[0]);
    let temporal: f64 = pos.windows(2).map(|w| (w[0] - w[1]).powi(2)).sum::<f64>() * cfg.mu1;
    let sparse_src = match cfg.sparsity_target {
        SparsityTarget::Negative => neg,
        SparsityTarget::Positive => pos,
    };
    let sparsity = cfg.mu2 * sparse_src.iter().sum::<f64>();
    match cfg.variant {
        LossVariant::Proposed => l1 + l2 + l3 + l4 + temporal + sparsity,
        LossVariant::Baseline => l1 + temporal + sparsity,
    }
}

fn near_kink(pos: &[f64], neg: &[f64], margin: f64) -> bool {
    let gaps = |s: &[f64]| {
        let o = order_desc(s).unwrap().values;
        o.windows(2).any(|w| w[0] - w[1] < margin)
    };
    if gaps(pos) || gaps(neg) {
        return true;
    }
    let p = order_desc(pos).unwrap().values;
    let q = order_desc(neg).unwrap().values;
    let args = [
        1.0 - p[0] + q[0],
        1.0 - p[0] + p[p.len() - 1],
        1.0 - p[1] + q[0],
        1.0 - p[2] + q[0],
    ];
    args.iter().any(|a| a.abs() < margin)
}

#[test]
fn loss_matches_reference_and_subgradient_matches_finite_differences() {
    let variants = [
        (LossVariant::Proposed, SparsityTarget::Negative),
        (LossVariant::Proposed, SparsityTarget::Positive),
        (LossVariant::Baseline, SparsityTarget::Negative),
    ];
    for (variant, target) in variants {
        let cfg = LossConfig {
            mu1: 0.3,
            mu2: 0.2,
            variant,
            sparsity_target: target,
            ..LossConfig::default()
        };
        let mut rng = stream(&[11, variant as u64, target as u64]);
        let mut cases = 0;
        while cases < 20 {
            let pos: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
            let mut neg: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
            if cases % 2 == 0 {
                for v in &mut neg {
                    *v *= 0.2;
                }
            }
            if near_kink(&pos, &neg, 1e-4) {
                continue;
            }
            let total = bag_pair_loss(&pos, &neg, &cfg).unwrap().total;
            assert!((total - reference_loss(&pos, &neg, &cfg)).abs() < 1e-12);
            let (_, d_pos, d_neg) = pair_loss_and_subgradient(&pos, &neg, &cfg).unwrap();
            let h = 1e-6;
            for side in 0..2 {
                for i in 0..8 {
                    let (mut p1, mut n1, mut p2, mut n2) = (pos.clone(), neg.clone(), pos.clone(), neg.clone());
                    if side == 0 {
                        p1[i] += h;
                        p2[i] -= h;
                    } else {
                        n1[i] += h;
                        n2[i] -= h;
                    }
                    let num = (reference_loss(&p1, &n1, &cfg) - reference_loss(&p2, &n2, &cfg)) / (2.0 * h);
                    let ana = if side == 0 { d_pos[i] } else { d_neg[i] };
                    assert!((ana - num).abs() <= 1e-6, "{variant:?} side {side} index {i}: {ana} vs {num}");
                }
            }
            cases += 1;
        }
    }
}

fn random_bag(rng: &mut impl Rng, polarity: Polarity, n: usize, d: usize) -> Bag<f64> {
    Bag {
        polarity,
        instances: (0..n).map(|_| random_vec(rng, d)).collect(),
        video_id: String::new(),
    }
}

#[test]
fn objective_gradient_matches_finite_differences_of_reference_objective() {
    let cfg = LossConfig {
        mu1: 0.05,
        mu2: 0.05,
        mu3: 0.01,
        ..LossConfig::default()
    };
    let mut accepted = 0;
    let mut seed = 100u64;
    while accepted < 5 {
        seed += 1;
        let mut rng = stream(&[23, seed]);
        let mut p = init_params::<f64>(seed, &DIMS).unwrap();
        for v in p.stack.iter_mut() {
            *v *= 3.0;
        }
        let bags: Vec<(Bag<f64>, Bag<f64>)> = (0..2)
            .map(|_| {
                let mut pos = random_bag(&mut rng, Polarity::Positive, 4, 8);
                for x in &mut pos.instances[..2] {
                    x.iter_mut().for_each(|v| *v += 1.0);
                }
                (pos, random_bag(&mut rng, Polarity::Negative, 4, 8))
            })
            .collect();
        let objective = |q: &ScorerParams<f64>| -> f64 {
            let mean: f64 = bags
                .iter()
                .map(|(a, b)| {
                    let sa: Vec<f64> = a.instances.iter().map(|x| naive_score(q, x)).collect();
                    let sb: Vec<f64> = b.instances.iter().map(|x| naive_score(q, x)).collect();
                    reference_loss(&sa, &sb, &cfg)
                })
                .sum::<f64>()
                / bags.len() as f64;
            let w2: f64 = q.stack.layers().iter().flat_map(|l| l.weights.iter()).map(|w| w * w).sum();
            mean + cfg.mu3 * w2
        };
        let tie_free = bags.iter().all(|(a, b)| {
            let all = a.instances.iter().chain(&b.instances);
            let ok_pre = all.clone().all(|x| min_abs_preactivation(&p, x) > 1e-3);
            let (sa, _) = score_bag(&p, &a.instances, &DropoutPlan::eval()).unwrap();
            let (sb, _) = score_bag(&p, &b.instances, &DropoutPlan::eval()).unwrap();
            ok_pre && !near_kink(&sa, &sb, 1e-4)
        });
        if !tie_free {
            continue;
        }
        let pairs: Vec<(&Bag<f64>, &Bag<f64>)> = bags.iter().map(|(a, b)| (a, b)).collect();
        let settings = ObjectiveSettings {
            loss: cfg,
            dropout: 0.0,
            mask_seed: 0,
        };
        let obj = batch_objective(&p, &pairs, &settings).unwrap();
        assert!((obj.value() - objective(&p)).abs() < 1e-10);
        for (i, g) in obj.gradient.iter().enumerate() {
            let num = fd_param(&p, i, 1e-5, objective);
            assert!(rel_err(*g, num) <= 1e-4, "seed {seed} param {i}: {g} vs {num}");
        }
        accepted += 1;
    }
}
