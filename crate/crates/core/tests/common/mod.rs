#![allow(dead_code)]

pub mod oracles;

use ndarray::Array2;
use rand::Rng;
use tsenet::expansion::{CoreEdge, EdgeOrigin, PgmCore};
use tsenet::nn::{Grads, Mode, Net};
use tsenet::rng;

/// Layers 10 -> 5 -> 2 with fan-in 3 and one expansion edge per unit.
pub fn small_core() -> PgmCore {
    let wire = |lowers: &[usize], n_skel: usize| {
        let mut es: Vec<CoreEdge> = lowers
            .iter()
            .enumerate()
            .map(|(k, &lower)| CoreEdge {
                lower,
                origin: if k < n_skel {
                    EdgeOrigin::Skeleton
                } else {
                    EdgeOrigin::Expansion
                },
            })
            .collect();
        es.sort_by_key(|e| e.lower);
        es
    };
    let first = (0..5).map(|u| wire(&[2 * u, 2 * u + 1, (2 * u + 4) % 10], 2)).collect();
    let second = vec![wire(&[0, 1, 3], 2), wire(&[2, 3, 4], 2)];
    PgmCore {
        layer_sizes: vec![10, 5, 2],
        names: vec![
            (0..10).map(|i| format!("x{i}")).collect(),
            (0..5).map(|i| format!("a{i}")).collect(),
            (0..2).map(|i| format!("b{i}")).collect(),
        ],
        adjacency: vec![first, second],
    }
}

pub fn random_batch(rows: usize, cols: usize, n_classes: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut g = rng::stream(seed, &[0xBA7C]);
    let x = Array2::from_shape_simple_fn((rows, cols), || g.gen_range(-1.5..1.5));
    let y = (0..rows).map(|_| g.gen_range(0..n_classes)).collect();
    (x, y)
}

/// Five-point central difference, step 1e-4.
fn stencil(mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = 1e-4;
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// Worst relative error between analytic gradients of `net` (any precision)
/// and float64 five-point differences. Relative error is
/// |a - n| / max(|a|, |n|, floor).
pub fn worst_gradient_error(
    analytic: &Grads<f64>,
    net: &Net<f64>,
    x: &Array2<f64>,
    y: &[usize],
    mode: Mode,
    floor: f64,
) -> f64 {
    let loss = |n: &Net<f64>| n.loss(&n.forward(x.view(), mode).unwrap(), y).unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    let n_layers = net.layers().len();
    let cmp = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);
    for li in 0..n_layers {
        let (rows, cols) = net.layers()[li].weights.dim();
        for o in 0..rows {
            for i in 0..cols {
                if !net.layers()[li].is_on(o, i) {
                    assert_eq!(analytic.weights[li][[o, i]], 0.0);
                    continue;
                }
                let w0 = net.layers()[li].weights[[o, i]];
                let numeric = stencil(|d| {
                    probe.layers_mut()[li].weights[[o, i]] = w0 + d;
                    loss(&probe)
                });
                probe.layers_mut()[li].weights[[o, i]] = w0;
                worst = worst.max(cmp(analytic.weights[li][[o, i]], numeric));
            }
            let b0 = net.layers()[li].bias[o];
            let numeric = stencil(|d| {
                probe.layers_mut()[li].bias[o] = b0 + d;
                loss(&probe)
            });
            probe.layers_mut()[li].bias[o] = b0;
            worst = worst.max(cmp(analytic.bias[li][o], numeric));
        }
    }
    worst
}

pub fn grads_to_f64(g: &Grads<f32>) -> Grads<f64> {
    Grads {
        weights: g.weights.iter().map(|w| w.mapv(f64::from)).collect(),
        bias: g.bias.iter().map(|b| b.mapv(f64::from)).collect(),
    }
}

/// Zero biases put units fed only by dead ReLUs exactly on the kink, where
/// central differences are meaningless; small random biases move them off it.
pub fn jitter_biases(net: &mut Net<f64>, seed: u64) {
    let mut g = rng::stream(seed, &[0xB1A5]);
    for l in net.layers_mut() {
        l.bias.mapv_inplace(|_| g.gen_range(-0.2..0.2));
    }
}
