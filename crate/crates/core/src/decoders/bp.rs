//! Sum-product belief propagation on the code's Tanner graph.
//!
//! In the symplectic picture the graph splits into two independent
//! components: star checks constrain the Z half of the error, plaquette
//! checks the X half. Every check touches 4 variables and every variable
//! exactly 2 checks. Messages are log-likelihood ratios with a parallel
//! (flooding) schedule; after iteration 10 new check messages are damped
//! 50/50 against the previous ones to break the oscillations the short
//! 4-cycles of this graph like to produce.

use serde_json::json;

use crate::bits::BitVec;
use crate::decoders::Decoder;
use crate::error::{Error, Result};
use crate::lattice::{PauliError, Syndrome, ToricCode};

const DAMP_AFTER: usize = 10;
const DAMP: f64 = 0.5;
const LLR_CLAMP: f64 = 50.0;
const ATANH_CLAMP: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone)]
pub struct BpOutcome {
    pub correction: PauliError,
    pub converged: bool,
    pub iterations: usize,
}

pub fn bp_decode(
    code: &ToricCode,
    syndrome: &Syndrome,
    p: f64,
    max_iters: usize,
) -> Result<BpOutcome> {
    if !p.is_finite() || p <= 0.0 || p >= 1.0 {
        return Err(Error::config(format!(
            "belief propagation needs a prior rate in (0, 1), got {p}"
        )));
    }
    if max_iters == 0 {
        return Err(Error::config("belief propagation needs at least one iteration"));
    }
    if syndrome.len() != code.m() {
        return Err(Error::config(format!(
            "syndrome has {} bits but the code has {} checks",
            syndrome.len(),
            code.m()
        )));
    }

    let n = code.n();
    let m = code.m();
    let half = code.l() * code.l();
    // Per-bit marginal of the depolarizing channel: each of the two
    // symplectic bits is set with probability 2p/3.
    let q = 2.0 * p / 3.0;
    let prior = ((1.0 - q) / q).ln();

    // check_vars[j] lists the 4 variable ids of check j; var ids 0..n are the
    // Z half (constrained by stars), n..2n the X half (plaquettes).
    let check_vars: Vec<[usize; 4]> = (0..m)
        .map(|j| {
            let mut vars = code.check_edges(j);
            if j >= half {
                for v in vars.iter_mut() {
                    *v += n;
                }
            }
            vars
        })
        .collect();
    // var_checks[v] lists the (check, slot) pairs referencing variable v.
    let mut var_checks: Vec<[(usize, usize); 2]> = vec![[(usize::MAX, 0); 2]; 2 * n];
    let mut fill: Vec<usize> = vec![0; 2 * n];
    for (j, vars) in check_vars.iter().enumerate() {
        for (slot, &v) in vars.iter().enumerate() {
            var_checks[v][fill[v]] = (j, slot);
            fill[v] += 1;
        }
    }
    debug_assert!(fill.iter().all(|&f| f == 2));

    // var_to_chk[j][slot]: message into check j from its slot-th variable.
    let mut var_to_chk = vec![[prior; 4]; m];
    let mut chk_to_var = vec![[0.0f64; 4]; m];
    let mut hard = BitVec::zeros(2 * n);

    for it in 1..=max_iters {
        for j in 0..m {
            let sign = if syndrome.bits().get(j) { -1.0 } else { 1.0 };
            let t: [f64; 4] = std::array::from_fn(|s| (var_to_chk[j][s] / 2.0).tanh());
            for s in 0..4 {
                let mut prod = sign;
                for (s2, tv) in t.iter().enumerate() {
                    if s2 != s {
                        prod *= tv;
                    }
                }
                let fresh = 2.0 * prod.clamp(-ATANH_CLAMP, ATANH_CLAMP).atanh();
                let msg = if it > DAMP_AFTER {
                    DAMP * fresh + (1.0 - DAMP) * chk_to_var[j][s]
                } else {
                    fresh
                };
                chk_to_var[j][s] = msg.clamp(-LLR_CLAMP, LLR_CLAMP);
            }
        }

        for v in 0..2 * n {
            let [(j0, s0), (j1, s1)] = var_checks[v];
            // Each variable sits in exactly two checks: the message to one is
            // the prior plus the other's output.
            var_to_chk[j0][s0] = (prior + chk_to_var[j1][s1]).clamp(-LLR_CLAMP, LLR_CLAMP);
            var_to_chk[j1][s1] = (prior + chk_to_var[j0][s0]).clamp(-LLR_CLAMP, LLR_CLAMP);
            let belief = prior + chk_to_var[j0][s0] + chk_to_var[j1][s1];
            hard.set(v, belief < 0.0);
        }

        let correction = PauliError::from_bits(hard.clone())?;
        if &code.syndrome_of(&correction) == syndrome {
            return Ok(BpOutcome { correction, converged: true, iterations: it });
        }
    }

    Ok(BpOutcome {
        correction: PauliError::from_bits(hard)?,
        converged: false,
        iterations: max_iters,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BpDecoder {
    pub p: f64,
    pub max_iters: usize,
}

impl BpDecoder {
    pub fn new(p: f64, max_iters: usize) -> Self {
        BpDecoder { p, max_iters }
    }
}

impl Decoder for BpDecoder {
    fn name(&self) -> String {
        "bp".into()
    }

    /// Non-convergence is not an error: the last hard decision is returned
    /// and the trial is judged by its residual like any other.
    fn decode(&self, code: &ToricCode, syndrome: &Syndrome) -> Result<PauliError> {
        Ok(bp_decode(code, syndrome, self.p, self.max_iters)?.correction)
    }

    fn metadata(&self) -> serde_json::Value {
        json!({
            "algorithm": "sum-product belief propagation",
            "schedule": "parallel flooding",
            "damping": format!("{DAMP} after iteration {DAMP_AFTER}"),
            "prior_rate": self.p,
            "max_iterations": self.max_iters,
            "llr_clamp": LLR_CLAMP,
        })
    }
}
