//! Central-difference gradient checking in double precision.
//!
//! A graph is reduced to the scalar `<f(x), r>` for a fixed random `r`.
//! Each input is then checked along a random direction (a Jacobian-vector
//! product) and at a handful of individual elements.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::conv::ConvGeometry;
use super::tape::{Tape, Var};
use super::warp::SamplingGrid;
use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Single elements probed per input, on top of the directional check.
    pub elements_per_input: usize,
    pub seed: u64,
    /// Comparisons worse than `retry_above` are repeated with the step cut
    /// tenfold, up to this many times, keeping the best. A ReLU or max-pool
    /// kink inside `x +- h` spoils the central difference by O(h); a wrong
    /// backward rule does not improve as `h` shrinks.
    pub retries: usize,
    pub retry_above: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-6,
            elements_per_input: 4,
            seed: 0x5eed,
            retries: 0,
            retry_above: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub comparisons: usize,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `graph` with respect to every input flagged in `wants`.
///
/// `graph` must rebuild the computation from the supplied leaves each time
/// it is called; it is evaluated twice per comparison.
pub fn check_graph<F>(name: &str, inputs: &[Tensor<f64>], wants: &[bool], cfg: &GradCheckConfig, graph: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if inputs.len() != wants.len() {
        return Err(Error::config("check_graph: one flag per input"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs
        .iter()
        .zip(wants)
        .map(|(t, &w)| tape.leaf(t.clone(), w))
        .collect();
    let out = graph(&mut tape, &leaves)?;
    let probe: Vec<f64> = (0..tape.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = tape.backward_with(out, probe.clone())?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = graph(&mut t, &vs)?;
        Ok(t.value(o).data().iter().zip(&probe).map(|(a, b)| a * b).sum())
    };

    let mut report = CheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        comparisons: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &want) in wants.iter().enumerate() {
        if !want {
            continue;
        }
        let analytic = grads.get(leaves[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);

        let dir: Vec<f64> = (0..inputs[i].numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: f64 = analytic.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let err = compare(cfg, a, |h| {
            central(&mut work, i, &inputs[i], h, &eval, |x, s| {
                x.iter_mut().zip(&dir).for_each(|(v, d)| *v += s * d)
            })
        })?;
        report.record(err);

        let count = cfg.elements_per_input.min(inputs[i].numel());
        for e in sample(&mut rng, inputs[i].numel(), count) {
            let err = compare(cfg, analytic[e], |h| central(&mut work, i, &inputs[i], h, &eval, |x, s| x[e] += s))?;
            report.record(err);
        }
    }
    Ok(report)
}

fn compare<N>(cfg: &GradCheckConfig, analytic: f64, mut numeric: N) -> Result<f64>
where
    N: FnMut(f64) -> Result<f64>,
{
    let mut h = cfg.step;
    let mut best = relative_error(analytic, numeric(h)?, cfg.floor);
    for _ in 0..cfg.retries {
        if best <= cfg.retry_above || best.is_nan() {
            break;
        }
        h /= 10.0;
        best = best.min(relative_error(analytic, numeric(h)?, cfg.floor));
    }
    Ok(best)
}

fn central<E, P>(work: &mut [Tensor<f64>], i: usize, base: &Tensor<f64>, h: f64, eval: &E, perturb: P) -> Result<f64>
where
    E: Fn(&[Tensor<f64>]) -> Result<f64>,
    P: Fn(&mut [f64], f64),
{
    work[i] = base.clone();
    perturb(work[i].data_mut(), h);
    let plus = eval(work)?;
    work[i] = base.clone();
    perturb(work[i].data_mut(), -h);
    let minus = eval(work)?;
    work[i] = base.clone();
    Ok((plus - minus) / (2.0 * h))
}

impl CheckReport {
    fn record(&mut self, err: f64) {
        self.comparisons += 1;
        if err > self.max_rel_error || err.is_nan() {
            self.max_rel_error = err;
        }
    }
}

/// Names accepted by [`check_op`].
pub const OP_NAMES: &[&str] = &[
    "conv2d",
    "conv2d_strided",
    "depthwise_separable_conv",
    "deformable_conv2d",
    "max_pool2d",
    "upsample_nearest2x",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "sigmoid",
    "add",
    "sub",
    "scale",
    "concat_channels",
    "replicate_channels",
    "warp",
    "sq_diff_sum",
    "bce_logits_sum",
    "sum",
];

fn rand_tensor(rng: &mut ChaCha8Rng, s: Shape) -> Tensor<f64> {
    Tensor::uniform(s, -1.0, 1.0, rng)
}

/// Runs the canned check for one engine op on small random inputs.
pub fn check_op(name: &str, cfg: &GradCheckConfig) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa11);
    let r = &mut rng;
    let x = |r: &mut ChaCha8Rng, n, c, h, w| rand_tensor(r, Shape::new(n, c, h, w));
    match name {
        "conv2d" => {
            let ins = [x(r, 2, 3, 8, 8), x(r, 4, 3, 3, 3), x(r, 1, 4, 1, 1)];
            check_graph(name, &ins, &[true; 3], cfg, |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), ConvGeometry::same(3, 1))
            })
        }
        "conv2d_strided" => {
            let ins = [x(r, 1, 4, 7, 6), x(r, 6, 2, 3, 3), x(r, 1, 6, 1, 1)];
            let g = ConvGeometry {
                stride: 2,
                padding: 1,
                groups: 2,
            };
            check_graph(name, &ins, &[true; 3], cfg, |t, v| t.conv2d(v[0], v[1], Some(v[2]), g))
        }
        "depthwise_separable_conv" => {
            let ins = [
                x(r, 2, 3, 6, 6),
                x(r, 3, 1, 3, 3),
                x(r, 1, 3, 1, 1),
                x(r, 5, 3, 1, 1),
                x(r, 1, 5, 1, 1),
            ];
            check_graph(name, &ins, &[true; 5], cfg, |t, v| {
                t.depthwise_separable_conv(v[0], (v[1], Some(v[2])), (v[3], Some(v[4])), 1)
            })
        }
        "deformable_conv2d" => {
            let mut off = x(r, 1, 18, 5, 5);
            off.data_mut().iter_mut().for_each(|v| *v *= 1.7);
            let ins = [x(r, 1, 1, 5, 5), off, x(r, 2, 1, 3, 3), x(r, 1, 2, 1, 1)];
            check_graph(name, &ins, &[true; 4], cfg, |t, v| {
                t.deformable_conv2d(v[0], v[1], v[2], Some(v[3]), ConvGeometry::same(3, 1))
            })
        }
        "max_pool2d" => check_graph(name, &[x(r, 1, 2, 8, 8)], &[true], cfg, |t, v| t.max_pool2d(v[0])),
        "upsample_nearest2x" => {
            check_graph(name, &[x(r, 1, 2, 3, 4)], &[true], cfg, |t, v| t.upsample_nearest2x(v[0]))
        }
        "batch_norm_train" => {
            let ins = [x(r, 3, 2, 4, 4), x(r, 1, 2, 1, 1), x(r, 1, 2, 1, 1)];
            check_graph(name, &ins, &[true; 3], cfg, |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2])?.0))
        }
        "batch_norm_eval" => {
            let ins = [x(r, 2, 2, 3, 3), x(r, 1, 2, 1, 1), x(r, 1, 2, 1, 1)];
            check_graph(name, &ins, &[true; 3], cfg, |t, v| {
                t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.3], &[0.5, 2.0])
            })
        }
        "relu" => check_graph(name, &[x(r, 2, 3, 4, 4)], &[true], cfg, |t, v| t.relu(v[0])),
        "sigmoid" => check_graph(name, &[x(r, 2, 3, 4, 4)], &[true], cfg, |t, v| t.sigmoid(v[0])),
        "add" => check_graph(name, &[x(r, 1, 2, 3, 3), x(r, 1, 2, 3, 3)], &[true; 2], cfg, |t, v| t.add(v[0], v[1])),
        "sub" => check_graph(name, &[x(r, 1, 2, 3, 3), x(r, 1, 2, 3, 3)], &[true; 2], cfg, |t, v| t.sub(v[0], v[1])),
        "scale" => check_graph(name, &[x(r, 1, 2, 3, 3)], &[true], cfg, |t, v| t.scale(v[0], -1.75)),
        "concat_channels" => {
            let ins = [x(r, 2, 1, 3, 3), x(r, 2, 3, 3, 3)];
            check_graph(name, &ins, &[true; 2], cfg, |t, v| t.concat_channels(v))
        }
        "replicate_channels" => {
            check_graph(name, &[x(r, 2, 3, 2, 2)], &[true], cfg, |t, v| t.replicate_channels(v[0], 2))
        }
        "warp" => {
            let mut grid = SamplingGrid::identity(2, 3, 6, 6);
            grid.source_channel[1] = vec![2, 1, 0];
            for coords in grid.coords.iter_mut() {
                for c in coords.iter_mut() {
                    c.0 = c.0 * 0.9 + r.random_range(-0.6..0.6);
                    c.1 = c.1 * 1.1 + r.random_range(-0.6..0.6);
                }
            }
            check_graph(name, &[x(r, 2, 3, 6, 6)], &[true], cfg, |t, v| t.warp(v[0], &grid))
        }
        "sq_diff_sum" => {
            let ins = [x(r, 1, 2, 8, 8), x(r, 1, 2, 8, 8)];
            check_graph(name, &ins, &[true; 2], cfg, |t, v| t.sq_diff_sum(v[0], v[1]))
        }
        "bce_logits_sum" => {
            let mut tgt = x(r, 1, 2, 8, 8);
            tgt.data_mut().iter_mut().for_each(|v| *v = 0.5 * (*v + 1.0));
            let ins = [x(r, 1, 2, 8, 8), tgt];
            check_graph(name, &ins, &[true; 2], cfg, |t, v| t.bce_logits_sum(v[0], v[1]))
        }
        "sum" => check_graph(name, &[x(r, 2, 2, 3, 3)], &[true], cfg, |t, v| t.sum(v[0])),
        other => Err(Error::config(format!("unknown op `{other}` for gradcheck"))),
    }
}

pub fn check_all_ops(cfg: &GradCheckConfig) -> Result<Vec<CheckReport>> {
    OP_NAMES.iter().map(|n| check_op(n, cfg)).collect()
}
