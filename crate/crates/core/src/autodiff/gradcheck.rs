//! Finite-difference verification of analytic gradients.

use crate::error::Result;

use super::params::ModelParams;
use super::{Graph, Var};

/// Outcome of a finite-difference sweep over every parameter element.
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Worst offenders as "name[r,c]: analytic A vs numeric N".
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares backward-pass gradients against central differences with step
/// `h` for every element of every parameter.
///
/// `build` constructs the loss on a fresh graph and returns the loss node
/// together with the parameter nodes in `params` order; it is re-invoked
/// once per perturbed evaluation, so it must be a pure function of the
/// parameter values.
///
/// An element passes when |analytic - numeric| <= rtol * max(|analytic|,
/// |numeric|), with an absolute floor of 1e-7 for gradients near zero
/// where central differences are pure rounding noise.
pub fn finite_diff_check<F>(
    params: &ModelParams,
    h: f64,
    rtol: f64,
    build: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ModelParams) -> Result<(Var, Vec<Var>)>,
{
    let mut g = Graph::new();
    let (loss, pvars) = build(&mut g, params)?;
    g.backward(loss)?;
    let analytic: Vec<ndarray::Array2<f64>> = pvars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = &params.entry(i).value;
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| ndarray::Array2::zeros((p.nrows(), p.ncols())))
        })
        .collect();
    drop(g);

    let eval = |p: &ModelParams| -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = build(&mut g, p)?;
        Ok(g.value(loss)[[0, 0]])
    };

    let mut report = GradReport { checked: 0, max_rel_err: 0.0, failures: Vec::new() };
    for i in 0..params.len() {
        let (rows, cols) = {
            let v = &params.entry(i).value;
            (v.nrows(), v.ncols())
        };
        for r in 0..rows {
            for c in 0..cols {
                let plus = eval(&params.perturbed(i, r, c, h))?;
                let minus = eval(&params.perturbed(i, r, c, -h))?;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[i][[r, c]];
                let diff = (a - numeric).abs();
                let denom = a.abs().max(numeric.abs());
                let rel = if denom > 0.0 { diff / denom } else { 0.0 };
                report.checked += 1;
                if diff > 1e-7 && rel > rtol {
                    if report.failures.len() < 16 {
                        report.failures.push(format!(
                            "{}[{r},{c}]: analytic {a:.9e} vs numeric {numeric:.9e}",
                            params.entry(i).name
                        ));
                    }
                    report.max_rel_err = report.max_rel_err.max(rel);
                } else if diff > 1e-7 {
                    report.max_rel_err = report.max_rel_err.max(rel);
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    const H: f64 = 1e-5;
    const RTOL: f64 = 1e-4;

    fn assert_ok(report: GradReport) {
        assert!(
            report.ok(),
            "{} of {} gradient elements disagree, worst rel err {:.3e}:\n{}",
            report.failures.len(),
            report.checked,
            report.max_rel_err,
            report.failures.join("\n")
        );
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ModelParams::new();
        params.add_init("a", 3, 4, 0.5, true, &mut rng).unwrap();
        params.add_init("b", 4, 2, 0.5, true, &mut rng).unwrap();
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let a = g.param(&p.entry(0).value);
            let b = g.param(&p.entry(1).value);
            let y = g.matmul(a, b)?;
            let s = g.sum_all(y)?;
            Ok((s, vec![a, b]))
        })
        .unwrap();
        assert_eq!(report.checked, 20);
        assert_ok(report);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ModelParams::new();
        params.add_init("x", 3, 5, 1.0, true, &mut rng).unwrap();
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let x = g.param(&p.entry(0).value);
            let ge = g.gelu(x)?;
            let si = g.sigmoid(ge)?;
            let af = g.affine(si, 2.5, -0.75)?;
            let s = g.sum_all(af)?;
            Ok((s, vec![x]))
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn softmax_rows_and_cols_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ModelParams::new();
        params.add_init("x", 4, 4, 1.0, true, &mut rng).unwrap();
        let weights = Arc::new(Array2::from_shape_fn((4, 4), |(i, j)| {
            0.1 * (i as f64) - 0.3 * (j as f64) + 0.71
        }));
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let x = g.param(&p.entry(0).value);
            let rows = g.softmax_rows(x)?;
            let cols = g.softmax_cols(x)?;
            let sum = g.add(rows, cols)?;
            let weighted = g.mul_const(sum, Arc::clone(&weights))?;
            let s = g.sum_all(weighted)?;
            Ok((s, vec![x]))
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = ModelParams::new();
        params.add_init("x", 3, 6, 1.0, true, &mut rng).unwrap();
        params.add_init("gain", 1, 6, 0.5, false, &mut rng).unwrap();
        params.add_init("bias", 1, 6, 0.5, false, &mut rng).unwrap();
        let weights = Arc::new(Array2::from_shape_fn((3, 6), |(i, j)| {
            ((i * 7 + j * 3) % 5) as f64 * 0.2 - 0.4
        }));
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let x = g.param(&p.entry(0).value);
            let gain = g.param(&p.entry(1).value);
            let bias = g.param(&p.entry(2).value);
            let y = g.layer_norm(x, gain, bias)?;
            let w = g.mul_const(y, Arc::clone(&weights))?;
            let s = g.sum_all(w)?;
            Ok((s, vec![x, gain, bias]))
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn masked_attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ModelParams::new();
        params.add_init("x", 4, 6, 0.8, true, &mut rng).unwrap();
        params.add_init("wq", 6, 3, 0.5, true, &mut rng).unwrap();
        params.add_init("wk", 6, 3, 0.5, true, &mut rng).unwrap();
        params.add_init("wv", 6, 3, 0.5, true, &mut rng).unwrap();
        let mask = Arc::new(Array2::from_shape_fn((4, 4), |(i, j)| {
            if (i + j) % 2 == 0 {
                0.0
            } else {
                -1e30
            }
        }));
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let x = g.param(&p.entry(0).value);
            let wq = g.param(&p.entry(1).value);
            let wk = g.param(&p.entry(2).value);
            let wv = g.param(&p.entry(3).value);
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scaled = g.scale(scores, 1.0 / (3.0f64).sqrt())?;
            let masked = g.add_const(scaled, Arc::clone(&mask))?;
            let probs = g.softmax_rows(masked)?;
            let out = g.matmul(probs, v)?;
            let s = g.sum_all(out)?;
            Ok((s, vec![x, wq, wk, wv]))
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn three_layer_mlp_with_bce_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = ModelParams::new();
        params.add_init("w1", 5, 8, 0.5, true, &mut rng).unwrap();
        params.add_init("b1", 1, 8, 0.2, false, &mut rng).unwrap();
        params.add_init("w2", 8, 8, 0.5, true, &mut rng).unwrap();
        params.add_init("b2", 1, 8, 0.2, false, &mut rng).unwrap();
        params.add_init("w3", 8, 4, 0.5, true, &mut rng).unwrap();
        params.add_init("b3", 1, 4, 0.2, false, &mut rng).unwrap();
        let input = Array2::from_shape_fn((2, 5), |(i, j)| ((i + 2 * j) % 3) as f64 - 1.0);
        let targets = Arc::new(Array2::from_shape_fn((2, 4), |(i, j)| ((i + j) % 2) as f64));
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let x = g.constant(input.clone());
            let mut vars = Vec::new();
            let mut h = x;
            for layer in 0..3 {
                let w = g.param(&p.entry(2 * layer).value);
                let b = g.param(&p.entry(2 * layer + 1).value);
                vars.push(w);
                vars.push(b);
                let lin = g.matmul(h, w)?;
                h = g.add_row(lin, b)?;
                if layer < 2 {
                    h = g.gelu(h)?;
                }
            }
            let loss = g.bce_with_logits(h, Arc::clone(&targets))?;
            let reordered = vec![vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]];
            Ok((loss, reordered))
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ModelParams::new();
        params.add_init("x", 1, 6, 1.0, true, &mut rng).unwrap();
        let table = Arc::new(vec![0usize, 2, 4, 1, 3, 5, 0, 5]);
        let index = Arc::new(vec![1usize, 1, 4]);
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let x = g.param(&p.entry(0).value);
            let gathered = g.gather_table(x, Arc::clone(&table), 2)?;
            let t = g.transpose(gathered)?;
            let m = g.mean_rows(t)?;
            let picked = g.gather_cols(x, Arc::clone(&index))?;
            let left = g.slice_cols(picked, 0, 2)?;
            let sig = g.sigmoid(left)?;
            let prod = g.row_prod(sig)?;
            let msum = g.sum_all(m)?;
            let loss = g.add(prod, msum)?;
            let loss = g.sum_all(loss)?;
            Ok((loss, vec![x]))
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn stacking_and_products_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ModelParams::new();
        params.add_init("a", 2, 3, 0.7, true, &mut rng).unwrap();
        params.add_init("b", 2, 3, 0.7, true, &mut rng).unwrap();
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let a = g.param(&p.entry(0).value);
            let b = g.param(&p.entry(1).value);
            let h = g.hstack(&[a, b])?;
            let v = g.vstack(&[a, b])?;
            let vt = g.transpose(v)?;
            let prodr = g.matmul(vt, v)?;
            let hsum = g.sum_all(h)?;
            let psum = g.sum_all(prodr)?;
            let both = g.add_n(&[hsum, psum])?;
            Ok((both, vec![a, b]))
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn bce_probs_and_soft_parity_match_finite_differences() {
        // The soft-parity construction used for logical losses: map logits
        // through sigmoid, form (1 - prod(1 - 2q)) / 2 over a support, and
        // take BCE against a binary target.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ModelParams::new();
        params.add_init("z", 2, 5, 1.2, true, &mut rng).unwrap();
        let support = Arc::new(vec![0usize, 2, 3]);
        let target = Arc::new(ndarray::array![[1.0], [0.0]]);
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let z = g.param(&p.entry(0).value);
            let q = g.sigmoid(z)?;
            let picked = g.gather_cols(q, Arc::clone(&support))?;
            let flipped = g.affine(picked, -2.0, 1.0)?;
            let prod = g.row_prod(flipped)?;
            let parity = g.affine(prod, -0.5, 0.5)?;
            let loss = g.bce_with_probs(parity, Arc::clone(&target))?;
            Ok((loss, vec![z]))
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn cosine_sim_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut params = ModelParams::new();
        params.add_init("x", 4, 3, 0.9, true, &mut rng).unwrap();
        let weights = Arc::new(Array2::from_shape_fn((4, 4), |(i, j)| {
            if i == j {
                0.0
            } else {
                1.0 + 0.1 * (i as f64) - 0.05 * (j as f64)
            }
        }));
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let x = g.param(&p.entry(0).value);
            let s = g.cosine_sim(x)?;
            let w = g.mul_const(s, Arc::clone(&weights))?;
            let loss = g.sum_all(w)?;
            Ok((loss, vec![x]))
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn gradient_check_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ModelParams::new();
        params.add_init("x", 2, 2, 1.0, true, &mut rng).unwrap();
        let run = || {
            let report = finite_diff_check(&params, H, RTOL, |g, p| {
                let x = g.param(&p.entry(0).value);
                let y = g.gelu(x)?;
                let s = g.sum_all(y)?;
                Ok((s, vec![x]))
            })
            .unwrap();
            (report.checked, report.max_rel_err.to_bits())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // Sanity-check the harness itself: a deliberately broken backward
        // rule (sum of x but gradient taken from 2x) must fail.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = ModelParams::new();
        params.add_init("x", 2, 2, 1.0, true, &mut rng).unwrap();
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let x = g.param(&p.entry(0).value);
            let doubled = g.scale(x, 2.0)?;
            let s = g.sum_all(doubled)?;
            // Claim the gradient belongs to x while the loss is sum(2x).
            Ok((s, vec![doubled]))
        })
        .unwrap();
        assert!(!report.ok(), "harness failed to flag a doubled gradient");
    }

    #[test]
    fn fused_attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = ModelParams::new();
        params.add_init("q", 4, 6, 0.8, true, &mut rng).unwrap();
        params.add_init("k", 4, 6, 0.8, true, &mut rng).unwrap();
        params.add_init("v", 4, 6, 0.8, true, &mut rng).unwrap();
        let mask = Arc::new(Array2::from_shape_fn((4, 4), |(i, j)| {
            if (i + j) % 3 == 0 {
                -1e30
            } else {
                0.0
            }
        }));
        let weights = Arc::new(Array2::from_shape_fn((4, 6), |(i, j)| {
            0.2 * (i as f64) - 0.15 * (j as f64) + 0.4
        }));
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let q = g.param(&p.entry(0).value);
            let k = g.param(&p.entry(1).value);
            let v = g.param(&p.entry(2).value);
            let out = g.multi_head_attention(q, k, v, Arc::clone(&mask), 3)?;
            let weighted = g.mul_const(out, Arc::clone(&weights))?;
            let s = g.sum_all(weighted)?;
            Ok((s, vec![q, k, v]))
        })
        .unwrap();
        assert_eq!(report.checked, 72);
        assert_ok(report);
    }

    #[test]
    fn fused_grouped_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut params = ModelParams::new();
        params.add_init("x", 6, 4, 0.8, true, &mut rng).unwrap();
        for e in 0..2 {
            params.add_init(&format!("w1.{e}"), 4, 3, 0.8, true, &mut rng).unwrap();
            params.add_init(&format!("b1.{e}"), 1, 3, 0.8, true, &mut rng).unwrap();
            params.add_init(&format!("w2.{e}"), 3, 4, 0.8, true, &mut rng).unwrap();
            params.add_init(&format!("b2.{e}"), 1, 4, 0.8, true, &mut rng).unwrap();
        }
        let weights = Arc::new(Array2::from_shape_fn((6, 4), |(i, j)| {
            0.3 * (i as f64) + 0.1 * (j as f64) - 0.9
        }));
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let vars: Vec<Var> = (0..p.len()).map(|i| g.param(&p.entry(i).value)).collect();
            let quads = [[vars[1], vars[2], vars[3], vars[4]], [vars[5], vars[6], vars[7], vars[8]]];
            let out = g.grouped_mlp(vars[0], &quads, 3)?;
            let weighted = g.mul_const(out, Arc::clone(&weights))?;
            let s = g.sum_all(weighted)?;
            Ok((s, vars))
        })
        .unwrap();
        assert_ok(report);
    }

    #[test]
    fn row_gather_and_block_products_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut params = ModelParams::new();
        params.add_init("a", 6, 3, 0.8, true, &mut rng).unwrap();
        params.add_init("b", 6, 2, 0.8, true, &mut rng).unwrap();
        let index = Arc::new(vec![2usize, 0, 1, 1, 5, 3, 4, 0]);
        let weights = Arc::new(Array2::from_shape_fn((6, 2), |(i, j)| {
            0.7 * (i as f64) - 0.3 * (j as f64) + 0.2
        }));
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let a = g.param(&p.entry(0).value);
            let b = g.param(&p.entry(1).value);
            let tiled = g.gather_rows(a, Arc::clone(&index))?;
            let gram = g.block_matmul_t(tiled, tiled, 2)?;
            let mixed = g.block_matmul(gram, b, 2)?;
            let weighted = g.mul_const(mixed, Arc::clone(&weights))?;
            let s = g.sum_all(weighted)?;
            Ok((s, vec![a, b]))
        })
        .unwrap();
        assert_eq!(report.checked, 30);
        assert_ok(report);
    }

    #[test]
    fn grouped_softmax_and_mean_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut params = ModelParams::new();
        params.add_init("x", 9, 4, 0.8, true, &mut rng).unwrap();
        let weights = Arc::new(Array2::from_shape_fn((3, 4), |(i, j)| {
            1.1 * (i as f64) - 0.4 * (j as f64) - 0.6
        }));
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let x = g.param(&p.entry(0).value);
            let d = g.group_softmax_cols(x, 3)?;
            let m = g.group_mean_rows(d, 3)?;
            let weighted = g.mul_const(m, Arc::clone(&weights))?;
            let s = g.sum_all(weighted)?;
            Ok((s, vec![x]))
        })
        .unwrap();
        assert_eq!(report.checked, 36);
        assert_ok(report);
    }

    #[test]
    fn grouped_cosine_penalty_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = ModelParams::new();
        params.add_init("x", 8, 5, 0.8, true, &mut rng).unwrap();
        let weights = Arc::new(Array2::from_shape_fn((4, 4), |(i, j)| {
            if i == j {
                0.0
            } else {
                1.0 + 0.1 * (i as f64) - 0.05 * (j as f64)
            }
        }));
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let x = g.param(&p.entry(0).value);
            let s = g.group_cosine_penalty(x, 4, Arc::clone(&weights), 0.25)?;
            Ok((s, vec![x]))
        })
        .unwrap();
        assert_eq!(report.checked, 40);
        assert_ok(report);
    }

    #[test]
    fn grouped_attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut params = ModelParams::new();
        params.add_init("q", 6, 4, 0.8, true, &mut rng).unwrap();
        params.add_init("k", 6, 4, 0.8, true, &mut rng).unwrap();
        params.add_init("v", 6, 4, 0.8, true, &mut rng).unwrap();
        let mask = Arc::new(Array2::from_shape_fn((3, 3), |(i, j)| {
            if i == 2 && j == 0 {
                -1e30
            } else {
                0.0
            }
        }));
        let weights = Arc::new(Array2::from_shape_fn((6, 4), |(i, j)| {
            0.5 * (i as f64) - 0.25 * (j as f64) + 0.3
        }));
        let report = finite_diff_check(&params, H, RTOL, |g, p| {
            let q = g.param(&p.entry(0).value);
            let k = g.param(&p.entry(1).value);
            let v = g.param(&p.entry(2).value);
            let out = g.multi_head_attention(q, k, v, Arc::clone(&mask), 2)?;
            let weighted = g.mul_const(out, Arc::clone(&weights))?;
            let s = g.sum_all(weighted)?;
            Ok((s, vec![q, k, v]))
        })
        .unwrap();
        assert_eq!(report.checked, 72);
        assert_ok(report);
    }
}
