//! Analytic gradients against central finite differences.

use compdetect::models::Architecture;
use compdetect::nn::{bce_grad, bce_loss, Layer, LayerSpec, Network, Tensor, Trace};
use compdetect::rng::stage_rng;
use rand::Rng;
use rand_distr::{Distribution, Normal};

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 50;

/// Symmetric relative error, with a small floor on the denominator.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

fn random_input(shape: &[usize], seed: u64, unit: bool) -> Tensor {
    let mut rng = stage_rng(seed, "input");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if unit {
                rng.gen_range(0..256) as f64 / 255.0
            } else {
                Normal::new(0.0, 1.0).unwrap().sample(&mut rng)
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Branches = (Vec<Vec<bool>>, Vec<Vec<usize>>);

/// Output plus the ReLU masks and max-pool choices of one forward pass.
fn branch_pattern(net: &Network, x: &Tensor) -> (f64, Branches) {
    let mut trace = Trace::new();
    let out = net.forward_traced(x, &mut trace).unwrap();
    let masks = trace
        .activations()
        .iter()
        .zip(net.layers())
        .filter(|(_, layer)| matches!(layer, Layer::Relu))
        .map(|(a, _)| a.data().iter().map(|&v| v > 0.0).collect())
        .collect();
    (out.data()[0], (masks, trace.argmax().to_vec()))
}

/// Straightforward reference forward pass with every ReLU mask and max-pool
/// choice fixed to `branches`, so it is smooth in parameters and input.
fn frozen_forward(net: &Network, x: &Tensor, branches: &Branches) -> f64 {
    let (masks, argmax) = branches;
    let mut a = x.data().to_vec();
    let mut shape = x.shape().to_vec();
    let (mut relu, mut pool) = (0, 0);
    for layer in net.layers() {
        match layer {
            Layer::Dense { weight, bias } => {
                let (units, inputs) = (weight.shape()[0], weight.shape()[1]);
                a = (0..units)
                    .map(|u| {
                        bias.data()[u]
                            + (0..inputs)
                                .map(|i| weight.data()[u * inputs + i] * a[i])
                                .sum::<f64>()
                    })
                    .collect();
                shape = vec![units];
            }
            Layer::Conv1d { weight, bias } => {
                let (filters, channels, k) =
                    (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                let len = shape[1];
                let out_len = len - k + 1;
                let mut y = vec![0.0; filters * out_len];
                for f in 0..filters {
                    for t in 0..out_len {
                        let mut acc = bias.data()[f];
                        for c in 0..channels {
                            for j in 0..k {
                                acc +=
                                    weight.data()[(f * channels + c) * k + j] * a[c * len + t + j];
                            }
                        }
                        y[f * out_len + t] = acc;
                    }
                }
                a = y;
                shape = vec![filters, out_len];
            }
            Layer::MaxPool1d { pool_size } => {
                a = argmax[pool].iter().map(|&src| a[src]).collect();
                shape = vec![shape[0], shape[1] / pool_size];
                pool += 1;
            }
            Layer::Relu => {
                for (v, &on) in a.iter_mut().zip(&masks[relu]) {
                    if !on {
                        *v = 0.0;
                    }
                }
                relu += 1;
            }
            Layer::Sigmoid => a.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
            Layer::Flatten => shape = vec![a.len()],
        }
    }
    a[0]
}

/// Central difference of the loss along one coordinate. When either
/// evaluation leaves the unperturbed ReLU/max-pool branch, both are redone
/// with the reference forward pass on the original branch. The flag reports
/// whether that happened.
fn central_difference(
    net: &mut Network,
    x: &Tensor,
    target: f64,
    base: &Branches,
    coord: Coord,
) -> (f64, bool) {
    let eval = |net: &mut Network, delta: f64| {
        let mut xp = x.clone();
        match coord {
            Coord::Param(t, i) => net.params_mut()[t].data_mut()[i] += delta,
            Coord::Input(i) => xp.data_mut()[i] += delta,
        }
        let (p, branches) = branch_pattern(net, &xp);
        if let Coord::Param(t, i) = coord {
            net.params_mut()[t].data_mut()[i] -= delta;
        }
        (p, &branches != base)
    };
    let orig = match coord {
        Coord::Param(t, i) => net.params()[t].data()[i],
        Coord::Input(i) => x.data()[i],
    };
    let (mut up, ku) = eval(net, STEP);
    let (mut down, kd) = eval(net, -STEP);
    if let Coord::Param(t, i) = coord {
        net.params_mut()[t].data_mut()[i] = orig;
    }
    let kink = ku || kd;
    if kink {
        let set = |net: &mut Network, delta: f64| {
            let mut xp = x.clone();
            match coord {
                Coord::Param(t, i) => net.params_mut()[t].data_mut()[i] = orig + delta,
                Coord::Input(i) => xp.data_mut()[i] += delta,
            }
            let p = frozen_forward(net, &xp, base);
            if let Coord::Param(t, i) = coord {
                net.params_mut()[t].data_mut()[i] = orig;
            }
            p
        };
        up = set(net, STEP);
        down = set(net, -STEP);
    }
    (
        (bce_loss(up, target) - bce_loss(down, target)) / (2.0 * STEP),
        kink,
    )
}

#[derive(Clone, Copy, Debug)]
enum Coord {
    Param(usize, usize),
    Input(usize),
}

/// Checks `per_tensor` random coordinates of every parameter tensor and of
/// the input. The target is the label opposite the current prediction so
/// gradients are not vanishingly small. Returns the worst relative error and
/// how many coordinates straddled a kink.
fn check(net: &mut Network, x: &Tensor, per_tensor: usize, seed: u64) -> (f64, usize) {
    let p = net.forward(x).unwrap().data()[0];
    let target = if p > 0.5 { 0.0 } else { 1.0 };
    let mut trace = Trace::new();
    let out = net.forward_traced(x, &mut trace).unwrap();
    let g = Tensor::new(out.shape().to_vec(), vec![bce_grad(out.data()[0], target)]).unwrap();
    let (grads, gx) = net.backward_with_input(&trace, &g).unwrap();
    let (_, _, via_bce) = net.bce_gradients(x, target).unwrap();
    assert_eq!(grads, via_bce);

    let mut rng = stage_rng(seed, "coords");
    let (_, base) = branch_pattern(net, x);
    assert!(
        (frozen_forward(net, x, &base) - p).abs() < 1e-12,
        "reference forward disagrees"
    );
    let (mut worst, mut kinks) = (0.0f64, 0usize);
    let mut coords: Vec<Coord> = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        for _ in 0..per_tensor.min(g.len()) {
            coords.push(Coord::Param(t, rng.gen_range(0..g.len())));
        }
    }
    for _ in 0..per_tensor.min(x.len()) {
        coords.push(Coord::Input(rng.gen_range(0..x.len())));
    }
    for coord in coords {
        let (numeric, kink) = central_difference(net, x, target, &base, coord);
        kinks += kink as usize;
        let analytic = match coord {
            Coord::Param(t, i) => grads[t].data()[i],
            Coord::Input(i) => gx.data()[i],
        };
        let e = rel_err(analytic, numeric);
        assert!(
            e < TOLERANCE,
            "seed {seed} {coord:?}: analytic {analytic} numeric {numeric} rel {e} (kink {kink})"
        );
        worst = worst.max(e);
    }
    (worst, kinks)
}

fn head() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 1 },
        LayerSpec::Sigmoid,
    ]
}

/// Worst relative error over all seeds and the number of coordinates that
/// needed the frozen-branch reference.
#[derive(Debug, Default, Clone, Copy)]
pub struct Summary {
    pub worst: f64,
    pub kinks: usize,
    pub coords: usize,
}

impl Summary {
    fn absorb(&mut self, (worst, kinks): (f64, usize), coords: usize) {
        self.worst = self.worst.max(worst);
        self.kinks += kinks;
        self.coords += coords;
    }
}

fn layer_case(input: &[usize], body: Vec<LayerSpec>) -> Summary {
    let mut specs = body;
    specs.extend(head());
    let mut summary = Summary::default();
    for seed in 0..SEEDS {
        let mut net = Network::build(input, &specs, seed).unwrap();
        // Larger weights than the default init so every layer carries
        // sizable gradients without saturating the output.
        for p in net.params_mut() {
            for v in p.data_mut() {
                *v *= 3.0;
            }
        }
        let x = random_input(input, seed, false);
        let coords = net.params().iter().map(|p| p.len().min(64)).sum::<usize>() + x.len().min(64);
        summary.absorb(check(&mut net, &x, 64, seed), coords);
    }
    summary
}

/// One entry per layer kind, each wrapped in a dense sigmoid head.
pub fn layer_kinds() -> Vec<(&'static str, Summary)> {
    vec![
        (
            "dense",
            layer_case(&[12], vec![LayerSpec::Dense { units: 5 }]),
        ),
        (
            "conv1d",
            layer_case(
                &[3, 20],
                vec![LayerSpec::Conv1d {
                    filters: 4,
                    kernel_size: 5,
                }],
            ),
        ),
        (
            "maxpool/2",
            layer_case(&[2, 16], vec![LayerSpec::MaxPool1d { pool_size: 2 }]),
        ),
        (
            "maxpool/3",
            layer_case(&[2, 17], vec![LayerSpec::MaxPool1d { pool_size: 3 }]),
        ),
        (
            "relu",
            layer_case(&[10], vec![LayerSpec::Dense { units: 6 }, LayerSpec::Relu]),
        ),
        (
            "sigmoid",
            layer_case(
                &[8],
                vec![LayerSpec::Dense { units: 4 }, LayerSpec::Sigmoid],
            ),
        ),
        (
            "flatten",
            layer_case(&[3, 4], vec![LayerSpec::Flatten, LayerSpec::Flatten]),
        ),
    ]
}

/// The full network graph with 6 coordinates per tensor plus 6 inputs.
pub fn full_graph(arch: Architecture) -> Summary {
    let mut summary = Summary::default();
    for seed in 0..SEEDS {
        let mut net = Network::build(&arch.input_shape(), &arch.layers(), seed).unwrap();
        let x = random_input(&arch.input_shape(), seed, true);
        let coords = 6 * (net.params().len() + 1);
        summary.absorb(check(&mut net, &x, 6, seed), coords);
    }
    summary
}
