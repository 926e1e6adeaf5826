use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn set_values(params: &mut ParamSet, i: usize, values: &[f64]) {
    params.tensor_mut(i).data_mut().copy_from_slice(values);
}

fn loss_of(net: &Network, params: &ParamSet, x: &Tensor, weights: &Tensor) -> f64 {
    let y = net.predict(params, x).unwrap();
    y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Largest relative discrepancy between analytic and central-difference
/// gradients over every parameter scalar and every input scalar.
fn max_fd_error(net: &Network, params: &ParamSet, x: &Tensor, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (y, tape) = net.forward(params, x).unwrap();
    let weights = Tensor::new(
        y.shape().to_vec(),
        (0..y.len()).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let grads = net.backward(params, &tape, &weights).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
    let mut p = params.clone();
    for i in 0..params.len() {
        for j in 0..params.tensor(i).len() {
            let orig = params.tensor(i).data()[j];
            p.tensor_mut(i).data_mut()[j] = orig + h;
            let up = loss_of(net, &p, x, &weights);
            p.tensor_mut(i).data_mut()[j] = orig - h;
            let down = loss_of(net, &p, x, &weights);
            p.tensor_mut(i).data_mut()[j] = orig;
            worst = worst.max(rel(grads.params[i].data()[j], (up - down) / (2.0 * h)));
        }
    }
    let mut xp = x.clone();
    for j in 0..x.len() {
        let orig = x.data()[j];
        xp.data_mut()[j] = orig + h;
        let up = loss_of(net, params, &xp, &weights);
        xp.data_mut()[j] = orig - h;
        let down = loss_of(net, params, &xp, &weights);
        xp.data_mut()[j] = orig;
        worst = worst.max(rel(grads.input.data()[j], (up - down) / (2.0 * h)));
    }
    worst
}

fn jitter(params: &mut ParamSet, r: &mut ChaCha8Rng) {
    for i in 0..params.len() {
        for v in params.tensor_mut(i).data_mut() {
            *v += r.gen_range(-0.3..0.3);
        }
    }
}

#[test]
fn zero_dense_gives_zero_output() {
    let net = Network::flat(3, vec![LayerSpec::Dense { fan_in: 3, fan_out: 2 }]).unwrap();
    let mut p = init_weights(&net, InitScheme::Xavier, &mut rng(1));
    set_values(&mut p, 0, &[0.0; 6]);
    let y = net.predict(&p, &Tensor::row(&[1.0, -2.0, 3.0])).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0]);
}

#[test]
fn identity_dense_passes_input_through() {
    let net = Network::flat(3, vec![LayerSpec::Dense { fan_in: 3, fan_out: 3 }]).unwrap();
    let mut p = init_weights(&net, InitScheme::Xavier, &mut rng(1));
    set_values(&mut p, 0, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let v = [0.3, -1.5, 2.25];
    assert_eq!(net.predict(&p, &Tensor::row(&v)).unwrap().data(), &v);
}

#[test]
fn two_layer_tanh_matches_scalar_reevaluation() {
    let net = Network::flat(
        3,
        vec![
            LayerSpec::Dense { fan_in: 3, fan_out: 4 },
            LayerSpec::Activation(Activation::Tanh),
            LayerSpec::Dense { fan_in: 4, fan_out: 2 },
        ],
    )
    .unwrap();
    let mut p = init_weights(&net, InitScheme::Xavier, &mut rng(42));
    jitter(&mut p, &mut rng(43));
    let y = net.predict(&p, &Tensor::row(&[1.0; 3])).unwrap();

    let w1 = p.get("l0.weight").unwrap().data();
    let b1 = p.get("l0.bias").unwrap().data();
    let w2 = p.get("l2.weight").unwrap().data();
    let b2 = p.get("l2.bias").unwrap().data();
    let mut hidden = [0.0; 4];
    for (o, h) in hidden.iter_mut().enumerate() {
        let mut acc = b1[o];
        for i in 0..3 {
            acc += w1[o * 3 + i] * 1.0;
        }
        *h = acc.tanh();
    }
    for o in 0..2 {
        let mut acc = b2[o];
        for (i, h) in hidden.iter().enumerate() {
            acc += w2[o * 4 + i] * h;
        }
        assert!((acc - y.data()[o]).abs() < 1e-14);
    }
}

#[test]
fn identity_network_input_gradient_is_one() {
    let net = Network::flat(1, vec![LayerSpec::Dense { fan_in: 1, fan_out: 1 }]).unwrap();
    let mut p = init_weights(&net, InitScheme::Xavier, &mut rng(0));
    set_values(&mut p, 0, &[1.0]);
    let (_, tape) = net.forward(&p, &Tensor::row(&[0.7])).unwrap();
    let g = net.backward(&p, &tape, &Tensor::row(&[1.0])).unwrap();
    assert_eq!(g.input.data(), &[1.0]);
}

#[test]
fn dense_weight_gradient_is_outer_product() {
    let net = Network::flat(3, vec![LayerSpec::Dense { fan_in: 3, fan_out: 2 }]).unwrap();
    let p = init_weights(&net, InitScheme::Xavier, &mut rng(5));
    let x = [0.5, -1.0, 2.0];
    let g = [3.0, -0.25];
    let (_, tape) = net.forward(&p, &Tensor::row(&x)).unwrap();
    let grads = net.backward(&p, &tape, &Tensor::row(&g)).unwrap();
    let expected: Vec<f64> = g.iter().flat_map(|gi| x.iter().map(move |xi| gi * xi)).collect();
    assert_eq!(grads.params[0].data(), expected.as_slice());
    assert_eq!(grads.params[1].data(), &g);
}

#[test]
fn random_three_layer_net_matches_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let acts = [Activation::Tanh, Activation::Gelu, Activation::Sin];
        let (a, b) = (r.gen_range(2..10), r.gen_range(2..10));
        let net = Network::flat(
            4,
            vec![
                LayerSpec::Dense { fan_in: 4, fan_out: a },
                LayerSpec::Activation(acts[seed as usize % 3]),
                LayerSpec::Dense { fan_in: a, fan_out: b },
                LayerSpec::Activation(acts[(seed as usize + 1) % 3]),
                LayerSpec::Dense { fan_in: b, fan_out: 2 },
            ],
        )
        .unwrap();
        let mut p = init_weights(&net, InitScheme::He, &mut r);
        jitter(&mut p, &mut r);
        let x = Tensor::new(vec![3, 4], (0..12).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let err = max_fd_error(&net, &p, &x, seed);
        assert!(err < 1e-4, "seed {seed}: rel err {err}");
    }
}

#[test]
fn attention_norm_and_branches_match_finite_differences() {
    let mut r = rng(7);
    let net = Network::flat(
        6,
        vec![
            LayerSpec::Dense { fan_in: 6, fan_out: 24 },
            LayerSpec::ToTokens { tokens: 3, width: 8 },
            LayerSpec::PositionEmbedding { tokens: 3, width: 8 },
            LayerSpec::SelfAttention { heads: 2, head_dim: 4 },
            LayerSpec::LayerNorm { width: 8 },
            LayerSpec::MeanPool,
            LayerSpec::Branches {
                split: true,
                branches: vec![
                    vec![
                        LayerSpec::Dense { fan_in: 4, fan_out: 3 },
                        LayerSpec::Activation(Activation::Gelu),
                    ],
                    vec![
                        LayerSpec::Broadcast { tokens: 2 },
                        LayerSpec::Dense { fan_in: 4, fan_out: 2 },
                        LayerSpec::Flatten,
                    ],
                ],
            },
            LayerSpec::Dense { fan_in: 7, fan_out: 2 },
            LayerSpec::Boundary(BoundaryLayer {
                kind: BoundaryKind::Sin,
                lower: vec![-1.0, 0.0],
                upper: vec![1.0, 3.0],
            }),
        ],
    )
    .unwrap();
    let mut p = init_weights(&net, InitScheme::Xavier, &mut r);
    jitter(&mut p, &mut r);
    let x = Tensor::new(vec![2, 6], (0..12).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let err = max_fd_error(&net, &p, &x, 9);
    assert!(err < 1e-4, "rel err {err}");
    let (_, tape) = net.forward(&p, &x).unwrap();
    let g = Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
    let full = net.backward(&p, &tape, &g).unwrap().input;
    assert_eq!(net.input_gradient(&p, &tape, &g).unwrap(), full);
}

#[test]
fn backward_rejects_stale_tape() {
    let net = Network::flat(2, vec![LayerSpec::Dense { fan_in: 2, fan_out: 1 }]).unwrap();
    let mut p = init_weights(&net, InitScheme::Xavier, &mut rng(0));
    let (_, tape) = net.forward(&p, &Tensor::row(&[1.0, 2.0])).unwrap();
    let g = net.backward(&p, &tape, &Tensor::row(&[1.0])).unwrap();
    adam_step(&mut p, &g.params, 1e-2).unwrap();
    assert!(matches!(
        net.backward(&p, &tape, &Tensor::row(&[1.0])),
        Err(Error::StaleTape)
    ));
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let net = Network::flat(3, vec![LayerSpec::Dense { fan_in: 3, fan_out: 1 }]).unwrap();
    let p = init_weights(&net, InitScheme::Xavier, &mut rng(0));
    assert!(matches!(
        net.forward(&p, &Tensor::row(&[1.0, 2.0])),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn forward_reports_non_finite_activation() {
    let net = Network::flat(1, vec![LayerSpec::Dense { fan_in: 1, fan_out: 1 }]).unwrap();
    let mut p = init_weights(&net, InitScheme::Xavier, &mut rng(0));
    set_values(&mut p, 0, &[f64::MAX]);
    assert!(matches!(
        net.forward(&p, &Tensor::row(&[10.0])),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(Network::flat(3, vec![LayerSpec::Dense { fan_in: 2, fan_out: 1 }]).is_err());
    assert!(Network::flat(
        8,
        vec![
            LayerSpec::ToTokens { tokens: 2, width: 4 },
            LayerSpec::SelfAttention { heads: 3, head_dim: 1 },
        ]
    )
    .is_err());
    let branches = vec![vec![], vec![], vec![]];
    assert!(Network::flat(8, vec![LayerSpec::Branches { split: true, branches }]).is_err());
}

#[test]
fn adam_zero_gradient_leaves_values_and_counts_step() {
    let net = Network::flat(2, vec![LayerSpec::Dense { fan_in: 2, fan_out: 2 }]).unwrap();
    let mut p = init_weights(&net, InitScheme::Xavier, &mut rng(3));
    let before = p.clone();
    let zeros: Vec<Tensor> = p.params().iter().map(|q| Tensor::zeros(q.value.shape())).collect();
    adam_step(&mut p, &zeros, 0.1).unwrap();
    assert!(p.same_values(&before));
    assert_eq!(p.step(), 1);
}

#[test]
fn adam_first_step_moves_by_learning_rate_against_sign() {
    let net = Network::flat(1, vec![LayerSpec::Dense { fan_in: 1, fan_out: 2 }]).unwrap();
    let mut p = init_weights(&net, InitScheme::Xavier, &mut rng(3));
    let before = p.clone();
    let lr = 0.01;
    let g = vec![
        Tensor::new(vec![2, 1], vec![0.5, -3.0]).unwrap(),
        Tensor::new(vec![2], vec![1e-3, -2.0]).unwrap(),
    ];
    adam_step(&mut p, &g, lr).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let gi = g[i].data()[j];
            // m̂ = g, v̂ = g² after bias correction
            let expected = -lr * gi / (gi.abs() + ADAM_EPS);
            let delta = p.tensor(i).data()[j] - before.tensor(i).data()[j];
            assert!((delta - expected).abs() < 1e-15);
            assert!((delta.abs() - lr).abs() < lr * 1e-4);
        }
    }
}

#[test]
fn adam_two_steps_differ_from_one_double_step() {
    let net = Network::flat(1, vec![LayerSpec::Dense { fan_in: 1, fan_out: 1 }]).unwrap();
    let base = init_weights(&net, InitScheme::Xavier, &mut rng(3));
    let g1 = vec![Tensor::filled(&[1, 1], 1.0), Tensor::filled(&[1], -1.0)];
    let g2 = vec![Tensor::filled(&[1, 1], 0.2), Tensor::filled(&[1], 0.4)];
    let mut twice = base.clone();
    adam_step(&mut twice, &g1, 0.1).unwrap();
    adam_step(&mut twice, &g2, 0.1).unwrap();
    let mut once = base.clone();
    adam_step(&mut once, &g2, 0.2).unwrap();
    assert!(!twice.same_values(&once));
    assert_eq!(twice.step(), 2);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let net = Network::flat(1, vec![LayerSpec::Dense { fan_in: 1, fan_out: 1 }]).unwrap();
    let mut p = init_weights(&net, InitScheme::Xavier, &mut rng(3));
    let before = p.clone();
    let g = vec![Tensor::filled(&[1, 1], f64::NAN), Tensor::filled(&[1], 0.0)];
    assert!(matches!(adam_step(&mut p, &g, 0.1), Err(Error::NonFinite(_))));
    assert!(p.same_values(&before));
    assert_eq!(p.step(), 0);
}

#[test]
fn init_is_deterministic_per_seed() {
    let net = Network::flat(
        4,
        vec![
            LayerSpec::Dense { fan_in: 4, fan_out: 8 },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::Dense { fan_in: 8, fan_out: 1 },
        ],
    )
    .unwrap();
    let a = init_weights(&net, InitScheme::He, &mut rng(11));
    let b = init_weights(&net, InitScheme::He, &mut rng(11));
    assert!(a.same_values(&b));
    assert!(a.params()[1].value.data().iter().all(|&v| v == 0.0));
}

fn empirical_variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64
}

#[test]
fn xavier_variance_matches_two_over_fan_sum() {
    let net = Network::flat(
        1000,
        vec![LayerSpec::Dense {
            fan_in: 1000,
            fan_out: 1000,
        }],
    )
    .unwrap();
    let p = init_weights(&net, InitScheme::Xavier, &mut rng(0));
    let var = empirical_variance(p.tensor(0).data());
    let target = 2.0 / 2000.0;
    assert!((var - target).abs() < 0.1 * target, "var {var}");
}

#[test]
fn he_variance_with_fan_in_two_is_one() {
    let net = Network::flat(
        2,
        vec![LayerSpec::Dense {
            fan_in: 2,
            fan_out: 50_000,
        }],
    )
    .unwrap();
    let p = init_weights(&net, InitScheme::He, &mut rng(0));
    let var = empirical_variance(p.tensor(0).data());
    assert!((var - 1.0).abs() < 0.1, "var {var}");
}

#[test]
fn attention_cost_grows_quadratically_in_sequence_length() {
    let cost = |s: usize| {
        let net = Network::new(
            Signature::Seq { tokens: s, width: 8 },
            vec![LayerSpec::SelfAttention { heads: 2, head_dim: 4 }],
        )
        .unwrap();
        let p = init_weights(&net, InitScheme::Xavier, &mut rng(0));
        let x = Tensor::filled(&[1, s, 8], 0.1);
        net.forward(&p, &x).unwrap().1.macs().attention
    };
    let (c8, c16, c32) = (cost(8), cost(16), cost(32));
    assert_eq!(c16, 4 * c8);
    assert_eq!(c32, 4 * c16);
}

#[test]
fn boundary_map_edges_and_periodicity() {
    let lo = [0.0, 0.0];
    let hi = [1.0, 1.0];
    for kind in [BoundaryKind::Tanh, BoundaryKind::Sin] {
        assert_eq!(boundary_map(&[0.0, 0.0], &lo, &hi, kind), vec![0.5, 0.5]);
    }
    let y = [0.3, -2.0];
    let shifted: Vec<f64> = y.iter().map(|v| v + 2.0 * std::f64::consts::PI).collect();
    let a = boundary_map(&y, &lo, &hi, BoundaryKind::Sin);
    let b = boundary_map(&shifted, &lo, &hi, BoundaryKind::Sin);
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-12);
    }
    let sat = boundary_map(&[10.0, -10.0], &lo, &hi, BoundaryKind::Tanh);
    assert!((sat[0] - 1.0).abs() < 1e-4 && sat[1].abs() < 1e-4);
}

#[test]
fn fast_tanh_matches_libm() {
    let mut x = -20.0;
    while x < 20.0 {
        assert!((super::layers::tanh(x) - x.tanh()).abs() < 1e-15, "{x}");
        x += 0.001_37;
    }
    assert_eq!(super::layers::tanh(0.0), 0.0);
    assert_eq!(super::layers::tanh(1e300), 1.0);
}
