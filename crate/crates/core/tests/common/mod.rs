#![allow(dead_code)]

use pbmr::model::{ArchConfig, ArchKind, RegressionNet};
use pbmr::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely; relative error is
/// meaningless when both sides are rounding noise.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdStats {
    pub checked: usize,
    /// Coordinates whose ±step perturbation changed a relu, max-pool or L1
    /// branch; central differences are undefined there.
    pub skipped: usize,
    pub max_rel: f64,
}

impl FdStats {
    pub fn merge(&mut self, o: FdStats) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.max_rel = self.max_rel.max(o.max_rel);
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.max_rel <= FD_TOLERANCE && self.skipped * 10 <= self.checked
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Compares `analytic[i][j]` with central differences of `eval` along
/// coordinate `j` of tensor `i`. `eval` returns the loss and the branch
/// signature; `coords(i)` picks which coordinates to probe.
pub fn finite_difference(
    point: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    mut coords: impl FnMut(usize, usize) -> Vec<usize>,
    eval: impl Fn(&[Tensor<f64>]) -> (f64, Vec<usize>),
) -> FdStats {
    let (_, base_sig) = eval(point);
    let mut stats = FdStats::default();
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        for j in coords(i, point[i].numel()) {
            let orig = point[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let (up, sig_up) = eval(&probe);
            probe[i].data_mut()[j] = orig - FD_STEP;
            let (down, sig_down) = eval(&probe);
            probe[i].data_mut()[j] = orig;
            if sig_up != base_sig || sig_down != base_sig {
                stats.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            stats.checked += 1;
            stats.max_rel = stats.max_rel.max(rel_error(analytic[i][j], numeric));
        }
    }
    stats
}

/// Checks every coordinate of every input of a graph-built scalar loss.
pub fn check_op(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Var) -> FdStats {
    let mut bound: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = bound.iter_mut().map(|t| g.param(t)).collect();
        let loss = build(&mut g, &vars);
        g.backward(loss).unwrap();
    }
    let analytic: Vec<Vec<f64>> = bound.iter().map(|t| t.grad().unwrap().to_vec()).collect();
    finite_difference(
        inputs,
        &analytic,
        |_, n| (0..n).collect(),
        |point| {
            let mut g = Graph::new();
            let vars: Vec<Var> = point.iter().map(|t| g.constant(t)).collect();
            let loss = build(&mut g, &vars);
            (g.value(loss)[0], g.branch_signature())
        },
    )
}

/// MSE against a fixed random target, so every output coordinate gets a
/// distinct upstream gradient.
pub fn mse_against(g: &mut Graph<'_, f64>, out: Var, target: &Tensor<f64>) -> Var {
    let t = g.constant(target);
    g.mse_loss(out, t).unwrap()
}

/// Gradient check of the whole tiny network on one input, probing up to
/// `per_tensor` coordinates of each parameter tensor.
pub fn check_network(seed: u64, shape: [usize; 4], per_tensor: usize) -> FdStats {
    let mut r = rng(seed);
    let net = RegressionNet::<f64>::build(ArchConfig::preset(ArchKind::Tiny, shape[1]), seed).unwrap();
    // small nonzero biases so no unit sits exactly on a kink
    let mut net = net;
    for p in net.params_mut() {
        if p.name.ends_with(".bias") {
            p.tensor.data_mut().iter_mut().for_each(|b| *b = r.gen_range(-0.1..0.1));
        }
    }
    let x = random_tensor(&mut r, &shape);
    let target = random_tensor(&mut r, &[shape[0], 1]);

    let mut trained = net.clone();
    {
        let mut g = Graph::new();
        let xv = g.constant(&x);
        let out = trained.forward_train(&mut g, xv).unwrap();
        let loss = mse_against(&mut g, out, &target);
        g.backward(loss).unwrap();
    }
    let analytic: Vec<Vec<f64>> = trained.params().iter().map(|p| p.tensor.grad().unwrap().to_vec()).collect();
    let point: Vec<Tensor<f64>> = net.params().iter().map(|p| p.tensor.clone()).collect();
    let config = net.config().clone();
    let mut pick = rng(seed ^ 0x5eed);
    finite_difference(
        &point,
        &analytic,
        |_, n| {
            if n <= per_tensor {
                (0..n).collect()
            } else {
                (0..per_tensor).map(|_| pick.gen_range(0..n)).collect()
            }
        },
        |params| {
            let named = net
                .params()
                .iter()
                .zip(params)
                .map(|(p, t)| pbmr::model::NamedParam {
                    name: p.name.clone(),
                    tensor: t.clone(),
                })
                .collect();
            let probe = RegressionNet::from_params(config.clone(), named).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let out = probe.forward_graph(&mut g, xv).unwrap();
            let loss = mse_against(&mut g, out, &target);
            (g.value(loss)[0], g.branch_signature())
        },
    )
}

#[derive(Debug, Clone, Copy)]
pub struct ConvCase {
    pub x: [usize; 4],
    pub w: [usize; 4],
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

pub fn random_conv_case(r: &mut ChaCha8Rng) -> ConvCase {
    loop {
        let (kh, kw) = (r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(1..7), r.gen_range(1..8));
        let padding = (r.gen_range(0..3), r.gen_range(0..3));
        if kh > h + 2 * padding.0 || kw > w + 2 * padding.1 {
            continue;
        }
        let c = r.gen_range(1..4);
        return ConvCase {
            x: [r.gen_range(1..3), c, h, w],
            w: [r.gen_range(1..4), c, kh, kw],
            stride: (r.gen_range(1..3), r.gen_range(1..3)),
            padding,
        };
    }
}

pub fn conv_output_shape(c: &ConvCase) -> [usize; 4] {
    [
        c.x[0],
        c.w[0],
        (c.x[2] + 2 * c.padding.0 - c.w[2]) / c.stride.0 + 1,
        (c.x[3] + 2 * c.padding.1 - c.w[3]) / c.stride.1 + 1,
    ]
}

pub fn random_shape4(r: &mut ChaCha8Rng) -> [usize; 4] {
    [r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..6), r.gen_range(1..6)]
}

/// Per-op gradient checks over `cases` random shapes each.
pub fn op_checks(seed: u64, cases: usize) -> Vec<(&'static str, FdStats)> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let mut s = FdStats::default();
    for _ in 0..cases {
        let c = random_conv_case(&mut r);
        let x = random_tensor(&mut r, &c.x);
        let w = random_tensor(&mut r, &c.w);
        let b = random_tensor(&mut r, &[c.w[0]]);
        let target = random_tensor(&mut r, &conv_output_shape(&c));
        s.merge(check_op(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], c.stride, c.padding).unwrap();
            mse_against(g, y, &target)
        }));
    }
    out.push(("conv2d", s));

    let mut s = FdStats::default();
    for _ in 0..cases {
        let (n, f, gdim) = (r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..5));
        let x = random_tensor(&mut r, &[n, f]);
        let w = random_tensor(&mut r, &[gdim, f]);
        let b = random_tensor(&mut r, &[gdim]);
        let target = random_tensor(&mut r, &[n, gdim]);
        s.merge(check_op(&[x, w, b], |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            mse_against(g, y, &target)
        }));
    }
    out.push(("linear", s));

    let mut s = FdStats::default();
    for _ in 0..cases {
        let shape = random_shape4(&mut r);
        let x = random_tensor(&mut r, &shape);
        let target = random_tensor(&mut r, &shape);
        s.merge(check_op(&[x], |g, v| {
            let y = g.relu(v[0]);
            mse_against(g, y, &target)
        }));
    }
    out.push(("relu", s));

    for (name, max) in [("adaptive_avg_pool", false), ("adaptive_max_pool", true)] {
        let mut s = FdStats::default();
        for _ in 0..cases {
            let shape = random_shape4(&mut r);
            let x = random_tensor(&mut r, &shape);
            let target = random_tensor(&mut r, &[shape[0], shape[1], 1, 1]);
            s.merge(check_op(&[x], |g, v| {
                let y = if max {
                    g.adaptive_max_pool(v[0]).unwrap()
                } else {
                    g.adaptive_avg_pool(v[0]).unwrap()
                };
                mse_against(g, y, &target)
            }));
        }
        out.push((name, s));
    }

    for (name, l1) in [("mse_loss", false), ("l1_loss", true)] {
        let mut s = FdStats::default();
        for _ in 0..cases {
            let n = r.gen_range(1..9);
            let pred = random_tensor(&mut r, &[n, 1]);
            let target = random_tensor(&mut r, &[n, 1]);
            s.merge(check_op(&[pred, target], |g, v| {
                if l1 {
                    g.l1_loss(v[0], v[1]).unwrap()
                } else {
                    g.mse_loss(v[0], v[1]).unwrap()
                }
            }));
        }
        out.push((name, s));
    }
    out
}

/// The tiny network on its smallest documented input, then random shapes.
pub fn network_checks(seed: u64, cases: usize, per_tensor: usize) -> FdStats {
    let mut r = rng(seed);
    let mut s = FdStats::default();
    for i in 0..cases {
        let shape = if i == 0 {
            [1, 1, 4, 6]
        } else {
            [r.gen_range(1..3), 1, r.gen_range(4..7), r.gen_range(4..10)]
        };
        s.merge(check_network(seed + i as u64, shape, per_tensor));
    }
    s
}
