//! Central finite-difference checks of every differentiable graph operator
//! in 64-bit, over random shapes and seeds.

use hipline::nnet::{build_network, head_loss, ArchConfig, HeadKind, Network, Target};
use hipline::rng;
use hipline::tensor::{Graph, Mode, NodeId, ParamId, ParamSet, RunningStats, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const SEEDS: u64 = 20;
const STEP: f64 = 1e-6;
const TOLERANCE: f64 = 1e-4;
/// Entries probed per input; large tensors are sampled.
const PROBES: usize = 24;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn random_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values kept away from zero so kinks are never straddled by the step.
fn away_from_zero(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Compare analytic and numeric gradients of `sum(build(inputs) * r)` for a
/// fixed random projection `r`. Returns the worst relative error.
fn check<F>(name: &str, seed: u64, inputs: Vec<Tensor<f64>>, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let project = |g: &mut Graph<f64>, out: NodeId, r: &Tensor<f64>| {
        let r = g.input(r.clone());
        let p = g.mul(out, r).unwrap();
        g.sum(p).unwrap()
    };
    let mut g = Graph::new();
    let vars: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let r = random_tensor(&mut rng, g.shape(out));
    let loss = project(&mut g, out, &r);
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.node(v).unwrap().to_vec())
        .collect();

    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<NodeId> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars);
        let l = project(&mut g, out, &r);
        g.value(l).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let n = t.len();
        let picks: Vec<usize> = if n <= PROBES {
            (0..n).collect()
        } else {
            (0..PROBES).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let e = rel_err(analytic[i][j], numeric);
            assert!(
                e < TOLERANCE,
                "{name} seed {seed}: input {i} entry {j}: analytic {} vs numeric {numeric} (rel {e:e})",
                analytic[i][j]
            );
            worst = worst.max(e);
        }
    }
    worst
}

fn for_seeds(mut f: impl FnMut(u64, &mut StdRng)) {
    for seed in 0..SEEDS {
        let mut rng = StdRng::seed_from_u64(seed);
        f(seed, &mut rng);
    }
}

pub fn conv2d_gradients() {
    for_seeds(|seed, rng| {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..4);
        let o = rng.random_range(1..4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..=k / 2);
        let h = rng.random_range(k.max(3)..8);
        let w = rng.random_range(k.max(3)..8);
        let bias = rng.random_bool(0.5);
        let mut inputs = vec![
            random_tensor(rng, &[n, c, h, w]),
            random_tensor(rng, &[o, c, k, k]),
        ];
        if bias {
            inputs.push(random_tensor(rng, &[o]));
        }
        check("conv2d", seed, inputs, |g, v| {
            g.conv2d(v[0], v[1], v.get(2).copied(), stride, padding)
                .unwrap()
        });
    });
}

pub fn batch_norm_gradients_in_both_modes() {
    for_seeds(|seed, rng| {
        let n = rng.random_range(2..5);
        let c = rng.random_range(1..4);
        let s = rng.random_range(1..4);
        let shape = [n, c, s, s];
        let inputs = vec![
            random_tensor(rng, &shape),
            random_tensor(rng, &[c]),
            random_tensor(rng, &[c]),
        ];
        for mode in [Mode::Train, Mode::Eval] {
            let mut running = RunningStats::<f64>::new(c);
            running.mean = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            running.var = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            check("batch_norm", seed, inputs.clone(), |g, v| {
                let mut stats = running.clone();
                g.batch_norm(v[0], v[1], v[2], 1e-5, mode, &mut stats)
                    .unwrap()
            });
        }
    });
}

pub fn activation_and_pooling_gradients() {
    for_seeds(|seed, rng| {
        let n = rng.random_range(1..3);
        let c = rng.random_range(1..3);
        let size = rng.random_range(1..3);
        let h = size * rng.random_range(1..4) + rng.random_range(0..2);
        let shape = [n, c, h.max(size), h.max(size)];
        let leak = rng.random_range(0.0..0.3);
        check(
            "leaky_relu",
            seed,
            vec![away_from_zero(rng, &shape)],
            |g, v| g.leaky_relu(v[0], leak).unwrap(),
        );
        check("sigmoid", seed, vec![random_tensor(rng, &shape)], |g, v| {
            g.sigmoid(v[0]).unwrap()
        });
        check("square", seed, vec![random_tensor(rng, &shape)], |g, v| {
            g.square(v[0]).unwrap()
        });
        check(
            "avg_pool2d",
            seed,
            vec![random_tensor(rng, &shape)],
            |g, v| g.avg_pool2d(v[0], size).unwrap(),
        );
        check(
            "global_avg_pool",
            seed,
            vec![random_tensor(rng, &shape)],
            |g, v| g.global_avg_pool(v[0]).unwrap(),
        );
        let rate = rng.random_range(0.1..0.6);
        let mask_seed = rng.random::<u64>();
        check("dropout", seed, vec![random_tensor(rng, &shape)], |g, v| {
            // same mask on every evaluation
            let mut r = rng::stream(mask_seed, &[]);
            g.dropout(v[0], rate, Mode::Train, &mut r).unwrap()
        });
    });
}

pub fn linear_and_shape_gradients() {
    for_seeds(|seed, rng| {
        let n = rng.random_range(1..4);
        let f = rng.random_range(1..6);
        let o = rng.random_range(1..4);
        let bias = rng.random_bool(0.5);
        let mut inputs = vec![random_tensor(rng, &[n, f]), random_tensor(rng, &[o, f])];
        if bias {
            inputs.push(random_tensor(rng, &[o]));
        }
        check("linear", seed, inputs, |g, v| {
            g.linear(v[0], v[1], v.get(2).copied()).unwrap()
        });

        let (c1, c2, s) = (
            rng.random_range(1..3),
            rng.random_range(1..4),
            rng.random_range(1..4),
        );
        let a = random_tensor(rng, &[n, c1, s, s]);
        let b = random_tensor(rng, &[n, c2, s, s]);
        check("concat", seed, vec![a.clone(), b], |g, v| {
            g.concat(&[v[0], v[1]]).unwrap()
        });
        check("reshape", seed, vec![a.clone()], |g, v| {
            g.reshape(v[0], &[n, c1 * s * s]).unwrap()
        });
        let b2 = random_tensor(rng, &[n, c1, s, s]);
        check("add", seed, vec![a.clone(), b2.clone()], |g, v| {
            g.add(v[0], v[1]).unwrap()
        });
        check("mul", seed, vec![a.clone(), b2], |g, v| {
            g.mul(v[0], v[1]).unwrap()
        });
        let factor = rng.random_range(-2.0..2.0);
        check("scale", seed, vec![a.clone()], |g, v| {
            g.scale(v[0], factor).unwrap()
        });
        check("sum", seed, vec![a.clone()], |g, v| g.sum(v[0]).unwrap());
        check("mean", seed, vec![a], |g, v| g.mean(v[0]).unwrap());
    });
}

pub fn loss_gradients() {
    for_seeds(|seed, rng| {
        let n = rng.random_range(1..6);
        let c = rng.random_range(2..5);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let z = random_tensor(rng, &[n, 1])
            .data()
            .iter()
            .map(|v| v * 4.0)
            .collect::<Vec<_>>();
        check(
            "bce_with_logits",
            seed,
            vec![Tensor::new(vec![n, 1], z).unwrap()],
            |g, v| g.bce_with_logits(v[0], &y).unwrap(),
        );
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        check(
            "softmax_cross_entropy",
            seed,
            vec![random_tensor(rng, &[n, c])],
            |g, v| g.softmax_cross_entropy(v[0], &classes).unwrap(),
        );
        let masked: Vec<Option<usize>> = classes
            .iter()
            .enumerate()
            .map(|(i, &k)| (i % 2 == 0).then_some(k))
            .collect();
        check(
            "softmax_cross_entropy_masked",
            seed,
            vec![random_tensor(rng, &[n, c])],
            |g, v| g.softmax_cross_entropy_masked(v[0], &masked).unwrap(),
        );
        let t: Vec<f64> = (0..n * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        check("mse", seed, vec![random_tensor(rng, &[n, 4])], |g, v| {
            g.mse(v[0], &t).unwrap()
        });
    });
}

pub fn parameter_leaves_receive_gradients() {
    for_seeds(|seed, rng| {
        let mut params = ParamSet::<f64>::new();
        let k = params.push("k", random_tensor(rng, &[2, 1, 3, 3]).with_grad());
        let x = random_tensor(rng, &[1, 1, 5, 5]);
        let loss_at = |p: &ParamSet<f64>| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let kn = g.param(p, k);
            let y = g.conv2d(xi, kn, None, 1, 1).unwrap();
            let s = g.square(y).unwrap();
            let l = g.sum(s).unwrap();
            (
                g.value(l).data()[0],
                g.backward(l).unwrap().param(k).unwrap(),
            )
        };
        let (_, analytic) = loss_at(&params);
        for j in 0..analytic.len() {
            let mut p = params.clone();
            p.get_mut(k).data_mut()[j] += STEP;
            let up = loss_at(&p).0;
            p.get_mut(k).data_mut()[j] -= 2.0 * STEP;
            let down = loss_at(&p).0;
            let numeric = (up - down) / (2.0 * STEP);
            assert!(
                rel_err(analytic[j], numeric) < TOLERANCE,
                "seed {seed} entry {j}"
            );
        }
    });
}

fn dual_net(seed: u64) -> Network<f64> {
    let spec = build_network(&ArchConfig {
        depth: 7,
        growth_rate: 2,
        stem_channels: 3,
        input_size: 8,
        dropout_rate: 0.0,
        head: HeadKind::BinaryPlus3Class,
        ..ArchConfig::desk_fracture()
    })
    .unwrap();
    Network::init(spec, seed)
}

fn dual_batch(rng: &mut StdRng) -> (Tensor<f64>, Vec<Target>) {
    let x = random_tensor(rng, &[4, 1, 8, 8]);
    let targets = vec![
        Target::PresenceLocation {
            presence: true,
            location: Some(1),
        },
        Target::PresenceLocation {
            presence: false,
            location: Some(0),
        },
        Target::PresenceLocation {
            presence: true,
            location: None,
        },
        Target::PresenceLocation {
            presence: true,
            location: Some(2),
        },
    ];
    (x, targets)
}

/// Loss and parameter gradients of the dual-head network in train mode.
fn dual_loss(
    net: &Network<f64>,
    x: &Tensor<f64>,
    targets: &[Target],
    weight: f64,
) -> (f64, Vec<Vec<f64>>) {
    let mut net = net.clone();
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let mut r = rng::stream(0, &[]);
    let heads = net.forward(&mut g, xi, Mode::Train, &mut r).unwrap();
    let refs: Vec<&Target> = targets.iter().collect();
    let l = head_loss(&mut g, &heads, &refs, weight).unwrap();
    let grads = g.backward(l).unwrap();
    let per_param = (0..net.params().len())
        .map(|i| {
            grads
                .param(ParamId(i))
                .unwrap_or_else(|| vec![0.0; net.params().get(ParamId(i)).len()])
        })
        .collect();
    (g.value(l).data()[0], per_param)
}

pub fn dual_loss_gradient_is_additive_and_matches_differences() {
    for seed in 0..SEEDS {
        let mut rng = StdRng::seed_from_u64(seed);
        let net = dual_net(seed);
        let (x, targets) = dual_batch(&mut rng);
        let w = rng.random_range(0.1..2.0);
        let presence_only: Vec<Target> = targets
            .iter()
            .map(|t| match t {
                Target::PresenceLocation { presence, .. } => Target::PresenceLocation {
                    presence: *presence,
                    location: None,
                },
                other => other.clone(),
            })
            .collect();
        let (l_full, g_full) = dual_loss(&net, &x, &targets, w);
        let (l_primary, g_primary) = dual_loss(&net, &x, &presence_only, w);
        let (l_unit, g_unit) = dual_loss(&net, &x, &targets, 1.0);
        // secondary alone = (primary + 1·secondary) − primary
        let l_secondary = l_unit - l_primary;
        assert!((l_full - (l_primary + w * l_secondary)).abs() < 1e-12);
        for p in 0..g_full.len() {
            for j in 0..g_full[p].len() {
                let combined = g_primary[p][j] + w * (g_unit[p][j] - g_primary[p][j]);
                assert!(
                    (g_full[p][j] - combined).abs() <= 1e-10 * (1.0 + combined.abs()),
                    "seed {seed} param {p} entry {j}"
                );
            }
        }
        // finite differences on a sample of parameters
        for _ in 0..6 {
            let p = rng.random_range(0..g_full.len());
            let j = rng.random_range(0..g_full[p].len());
            let mut up = net.clone();
            up.params_mut().get_mut(ParamId(p)).data_mut()[j] += STEP;
            let mut down = net.clone();
            down.params_mut().get_mut(ParamId(p)).data_mut()[j] -= STEP;
            let numeric = (dual_loss(&up, &x, &targets, w).0 - dual_loss(&down, &x, &targets, w).0)
                / (2.0 * STEP);
            let e = rel_err(g_full[p][j], numeric);
            assert!(
                e < TOLERANCE,
                "seed {seed} param {p} entry {j}: {} vs {numeric}",
                g_full[p][j]
            );
        }
    }
}

/// Every check above, by name.
#[allow(dead_code)]
pub const SUITES: &[(&str, fn())] = &[
    ("conv2d_gradients", conv2d_gradients),
    (
        "batch_norm_gradients_in_both_modes",
        batch_norm_gradients_in_both_modes,
    ),
    (
        "activation_and_pooling_gradients",
        activation_and_pooling_gradients,
    ),
    ("linear_and_shape_gradients", linear_and_shape_gradients),
    ("loss_gradients", loss_gradients),
    (
        "parameter_leaves_receive_gradients",
        parameter_leaves_receive_gradients,
    ),
    (
        "dual_loss_gradient_is_additive_and_matches_differences",
        dual_loss_gradient_is_additive_and_matches_differences,
    ),
];

#[cfg(test)]
mod tests {
    #[test]
    fn conv2d_gradients() {
        super::conv2d_gradients();
    }

    #[test]
    fn batch_norm_gradients_in_both_modes() {
        super::batch_norm_gradients_in_both_modes();
    }

    #[test]
    fn activation_and_pooling_gradients() {
        super::activation_and_pooling_gradients();
    }

    #[test]
    fn linear_and_shape_gradients() {
        super::linear_and_shape_gradients();
    }

    #[test]
    fn loss_gradients() {
        super::loss_gradients();
    }

    #[test]
    fn parameter_leaves_receive_gradients() {
        super::parameter_leaves_receive_gradients();
    }

    #[test]
    fn dual_loss_gradient_is_additive_and_matches_differences() {
        super::dual_loss_gradient_is_additive_and_matches_differences();
    }
}
