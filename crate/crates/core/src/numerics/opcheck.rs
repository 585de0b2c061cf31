//! Finite-difference sweep over every differentiable graph op:
//! random trials per op, reporting the worst relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::numerics::gradcheck::grad_check;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{BoundParams, ParamSet};

#[derive(Debug, Clone, Serialize)]
pub struct OpReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OpReport {
    pub fn line(&self) -> String {
        format!(
            "{:<22} {:>3} trials  max rel err {:.3e}  {}",
            self.op,
            self.trials,
            self.max_rel_err,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// All checked op names, in report order.
pub const CHECKED_OPS: &[&str] = &[
    "add", "sub", "mul", "div", "neg", "scale", "add_const", "scale_by", "exp", "ln", "tanh",
    "sqrt", "sqr", "matmul", "transpose", "add_row", "mul_row", "mul_col", "softmax_rows",
    "layer_norm_rows", "sum_all", "mean_all", "mean_rows", "stack_rows", "concat_rows",
    "slice_rows", "row", "reshape", "reindex", "moving_average_rows", "dot", "cosine",
];

const M: usize = 3;
const N: usize = 4;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

/// Weighted sum through a fixed random direction keeps the scalar loss
/// sensitive to every output element.
fn weighted(g: &mut Graph, out: Var, w: &[f64]) -> Var {
    let wl = g.leaf(g.dims(out).to_vec(), w.to_vec());
    let p = g.mul(out, wl);
    g.sum_all(p)
}

fn apply_op(op: &str, g: &mut Graph, b: &BoundParams, rng: &mut ChaCha8Rng) -> Var {
    let x = b.var("x");
    match op {
        "add" => g.add(x, b.var("y")),
        "sub" => g.sub(x, b.var("y")),
        "mul" => g.mul(x, b.var("y")),
        "div" => g.div(x, b.var("y")),
        "neg" => g.neg(x),
        "scale" => g.scale(x, 1.7),
        "add_const" => g.add_const(x, -0.4),
        "scale_by" => {
            let s = b.var("s");
            g.scale_by(x, s)
        }
        "exp" => g.exp(x),
        "ln" => g.ln(x),
        "tanh" => g.tanh(x),
        "sqrt" => g.sqrt(x),
        "sqr" => g.sqr(x),
        "matmul" => g.matmul(x, b.var("y")),
        "transpose" => g.transpose(x),
        "add_row" => g.add_row(x, b.var("r")),
        "mul_row" => g.mul_row(x, b.var("r")),
        "mul_col" => g.mul_col(x, b.var("c")),
        "softmax_rows" => g.softmax_rows(x),
        "layer_norm_rows" => g.layer_norm_rows(x, 1e-6),
        "sum_all" => g.sum_all(x),
        "mean_all" => g.mean_all(x),
        "mean_rows" => g.mean_rows(x),
        "stack_rows" => {
            let rows: Vec<Var> = (0..M).map(|i| g.row(x, i)).collect();
            g.stack_rows(&rows)
        }
        "concat_rows" => g.concat_rows(x, b.var("y2")),
        "slice_rows" => g.slice_rows(x, 1, M),
        "row" => g.row(x, 1),
        "reshape" => g.reshape(x, vec![N, M]),
        "reindex" => {
            let map: Vec<usize> = (0..M * N).map(|_| rng.random_range(0..M * N)).collect();
            g.reindex(x, vec![M * N], std::sync::Arc::new(map))
        }
        "moving_average_rows" => g.moving_average_rows(x, 3),
        "dot" => g.dot(x, b.var("y")),
        "cosine" => g.cosine(b.var("v"), b.var("w")),
        other => panic!("unknown op '{other}'"),
    }
}

/// One op, `trials` random instances, inputs bounded by |x| <= 3.
pub fn check_op(op: &str, seed: u64, trials: usize, tolerance: f64) -> Result<OpReport> {
    let mut max_rel_err = 0.0_f64;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (trial as u64).wrapping_mul(0x9e3779b97f4a7c15),
        );
        let mut ps = ParamSet::new();
        // positive-domain ops stay away from their singularities
        let x_vals = match op {
            "ln" | "sqrt" => uniform(&mut rng, 0.2, 3.0, M * N),
            _ => uniform(&mut rng, -3.0, 3.0, M * N),
        };
        ps.add("x", vec![M, N], x_vals);
        match op {
            "add" | "sub" | "mul" | "dot" => {
                ps.add("y", vec![M, N], uniform(&mut rng, -3.0, 3.0, M * N));
            }
            "div" => {
                let denom: Vec<f64> = uniform(&mut rng, 0.3, 3.0, M * N)
                    .into_iter()
                    .map(|v| if rng.random::<bool>() { v } else { -v })
                    .collect();
                ps.add("y", vec![M, N], denom);
            }
            "matmul" => {
                ps.add("y", vec![N, M], uniform(&mut rng, -3.0, 3.0, N * M));
            }
            "concat_rows" => {
                ps.add("y2", vec![2, N], uniform(&mut rng, -3.0, 3.0, 2 * N));
            }
            "scale_by" => {
                ps.add("s", vec![1], uniform(&mut rng, -3.0, 3.0, 1));
            }
            "add_row" | "mul_row" => {
                ps.add("r", vec![N], uniform(&mut rng, -3.0, 3.0, N));
            }
            "mul_col" => {
                ps.add("c", vec![M], uniform(&mut rng, -3.0, 3.0, M));
            }
            "cosine" => {
                ps.add("v", vec![N], uniform(&mut rng, 0.5, 3.0, N));
                ps.add("w", vec![N], uniform(&mut rng, -3.0, -0.5, N));
            }
            _ => {}
        }
        let out_weights = uniform(&mut rng, -1.0, 1.0, 4 * M * N);
        let mut op_rng = rng.clone();
        let report = grad_check(&mut ps, 1e-5, tolerance, |p| {
            let mut g = Graph::new();
            let b = BoundParams::bind(&mut g, p);
            // the op must see identical structure on every call
            let mut r = op_rng.clone();
            let out = apply_op(op, &mut g, &b, &mut r);
            let n_out = g.dims(out).iter().product::<usize>();
            let loss = weighted(&mut g, out, &out_weights[..n_out]);
            let gs = g.backward(loss);
            (g.data(loss)[0], Some(b.grads(p, &gs)))
        })?;
        let _ = &mut op_rng;
        if report.max_rel_err > max_rel_err {
            max_rel_err = report.max_rel_err;
        }
    }
    Ok(OpReport {
        op: op.to_string(),
        trials,
        max_rel_err,
        tolerance,
        pass: max_rel_err <= tolerance,
    })
}

/// Sweep every op; the suite passes only if each op passes.
pub fn check_all_ops(seed: u64, trials: usize, tolerance: f64) -> Result<Vec<OpReport>> {
    CHECKED_OPS
        .iter()
        .map(|op| check_op(op, seed, trials, tolerance))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_twenty_trials() {
        let reports = check_all_ops(1234, 20, 1e-3).unwrap();
        assert_eq!(reports.len(), CHECKED_OPS.len());
        for r in &reports {
            assert!(r.pass, "{}", r.line());
        }
    }

    #[test]
    fn unknown_op_panics() {
        let caught = std::panic::catch_unwind(|| {
            let mut g = Graph::new();
            let mut ps = ParamSet::new();
            ps.add("x", vec![M, N], vec![1.0; M * N]);
            let b = BoundParams::bind(&mut g, &ps);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            apply_op("nonsense", &mut g, &b, &mut rng)
        });
        assert!(caught.is_err());
    }
}
