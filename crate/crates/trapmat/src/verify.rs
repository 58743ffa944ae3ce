//! Probabilistic verification of delegated products.
//!
//! Every check here reduces to the same trick: hit both sides of a claimed
//! identity with a thin uniform probe and compare. Over 32-bit words a
//! single probe column catches any fixed wrong matrix with probability at
//! least 1 - 2^-32, and `lambda_prime` independent columns push that to
//! 1 - 2^-lambda. False rejection is impossible: an honest product passes
//! every probe.

use crate::error::Error;
use crate::lpn::{lambda_prime, sample_uniform, Ratio, SeededRng};
use crate::ring_matrix::{mat_mul, DenseMatrix, OpCounter, RING_BITS};

/// Probe width and randomness for a batch of checks.
pub struct CheckConfig {
    pub lambda_prime: usize,
    pub rng: SeededRng,
}

impl CheckConfig {
    pub fn new(lambda_prime: usize, rng: SeededRng) -> Self {
        CheckConfig { lambda_prime, rng }
    }
}

/// Probe width for `checks` simultaneous probes to leave a combined forgery
/// bound of 2^-lambda: the extra `ceil(lg checks)` bits absorb the sum over
/// all of them.
pub fn joint_probe_width(lambda: u32, checks: usize) -> usize {
    let extra = if checks <= 1 {
        0
    } else {
        u64::BITS - ((checks - 1) as u64).leading_zeros()
    };
    lambda_prime(lambda + extra, RING_BITS)
}

/// Checks `P == A B` by probing: draws X with `lambda_prime` columns and
/// compares `A (B X)` against `P X`. Costs `(m n + n l + m l) lambda_prime`
/// multiplications, far below the `m n l` of recomputing the product.
pub fn freivalds_check(
    a: &DenseMatrix,
    b: &DenseMatrix,
    p: &DenseMatrix,
    cfg: &mut CheckConfig,
    counter: &mut OpCounter,
) -> Result<bool, Error> {
    if cfg.lambda_prime == 0 {
        return Err(Error::Parameter("probe width must be positive".into()));
    }
    if a.cols() != b.rows() || p.shape() != (a.rows(), b.cols()) {
        return Err(Error::ShapeMismatch {
            op: "freivalds_check",
            left: a.shape(),
            right: p.shape(),
        });
    }
    let x = sample_uniform(b.cols(), cfg.lambda_prime, &mut cfg.rng);
    let bx = mat_mul(b, &x, counter)?;
    let lhs = mat_mul(a, &bx, counter)?;
    let rhs = mat_mul(p, &x, counter)?;
    Ok(lhs == rhs)
}

/// Checks a ladder of running products `P_i = M_1 M_2 ... M_i` against the
/// factors. `partials` holds `P_2 ..= P_k`; `P_1` is `M_1` itself and needs
/// no check. Each rung gets a fresh probe X and verifies
/// `P_i X == P_(i-1) (M_i X)`, so a lie at any level is caught at the first
/// rung it touches without ever forming a full product.
pub fn check_partial_products(
    factors: &[DenseMatrix],
    partials: &[DenseMatrix],
    cfg: &mut CheckConfig,
    counter: &mut OpCounter,
) -> Result<bool, Error> {
    if cfg.lambda_prime == 0 {
        return Err(Error::Parameter("probe width must be positive".into()));
    }
    if factors.is_empty() {
        return Err(Error::Parameter("no factors to check".into()));
    }
    if partials.len() != factors.len() - 1 {
        return Err(Error::Parameter(format!(
            "{} partial products for {} factors",
            partials.len(),
            factors.len()
        )));
    }
    let lead_rows = factors[0].rows();
    for (idx, w) in factors.windows(2).enumerate() {
        if w[0].cols() != w[1].rows() {
            return Err(Error::ShapeMismatch {
                op: "check_partial_products",
                left: w[0].shape(),
                right: w[1].shape(),
            });
        }
        let want = (lead_rows, w[1].cols());
        if partials[idx].shape() != want {
            return Err(Error::ShapeMismatch {
                op: "check_partial_products",
                left: partials[idx].shape(),
                right: want,
            });
        }
    }

    let mut prev = &factors[0];
    for (i, p) in partials.iter().enumerate() {
        let m = &factors[i + 1];
        let x = sample_uniform(m.cols(), cfg.lambda_prime, &mut cfg.rng);
        let mx = mat_mul(m, &x, counter)?;
        let lhs = mat_mul(prev, &mx, counter)?;
        let rhs = mat_mul(p, &x, counter)?;
        if lhs != rhs {
            return Ok(false);
        }
        prev = p;
    }
    Ok(true)
}

/// Outcome of an audit run. Absence of evidence is not a proof of honesty,
/// just a bound: a server lying on an `alpha` fraction of replies survives
/// `ceil(c / alpha)` audits with probability at most `e^-c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuditVerdict {
    /// An all-zero query came back nonzero; `query` is its 0-based index.
    Dishonest { query: usize },
    NoEvidence,
}

/// How many zero queries `zero_query_auditor` will issue.
pub fn audit_query_count(alpha: Ratio, c: u32) -> Result<usize, Error> {
    if alpha.num() == 0 || alpha.num() > alpha.den() {
        return Err(Error::Parameter(format!(
            "audit rate must be in (0, 1], got {alpha}"
        )));
    }
    if c == 0 {
        return Err(Error::Parameter("audit confidence must be positive".into()));
    }
    // ceil(c / alpha)
    Ok(Ratio::new(alpha.den(), alpha.num())?.ceil_mul(c as usize))
}

/// Audits a delegation session with all-zero inputs: a zero operand has an
/// unmasked product of exactly zero, and a masked zero query is
/// indistinguishable from a real one, so deviations land on audits at the
/// server's overall deviation rate. `run_zero_query` must delegate an
/// all-zero operand through the session under test and return the unmasked
/// result; the caller decides how the audits interleave with real traffic.
pub fn zero_query_auditor<F>(alpha: Ratio, c: u32, mut run_zero_query: F) -> Result<AuditVerdict, Error>
where
    F: FnMut(usize) -> Result<DenseMatrix, Error>,
{
    let queries = audit_query_count(alpha, c)?;
    for k in 0..queries {
        let result = run_zero_query(k)?;
        if !result.is_zero() {
            return Ok(AuditVerdict::Dishonest { query: k });
        }
    }
    Ok(AuditVerdict::NoEvidence)
}
