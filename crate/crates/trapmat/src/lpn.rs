//! Learning-parity-style sampling over 32-bit words, plus the recursion
//! schedule that drives every trapdoored matrix.
//!
//! A schedule starts from the outer dimension `n` and repeatedly shrinks it
//! by the rate `delta` until it reaches the floor `nu`, the smallest
//! dimension at which the sparse-noise assumption still holds for the chosen
//! security level. Noise rates per level follow `mu_i = n_{i-1}^(epsilon-1)`,
//! snapped up onto a fixed dyadic grid so a rate is always an exact rational
//! and sampling never depends on float comparisons.

use crate::error::Error;
use crate::ring_matrix::{DenseMatrix, SparseEntry, SparseMatrix, RING_BITS, RingWord};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::path::Path;
use std::sync::OnceLock;

/// log2 of the noise-rate grid denominator. Rates are k / 2^20 with k >= 1.
pub const MU_GRID_LOG2: u32 = 20;
pub const MU_GRID_DEN: u64 = 1 << MU_GRID_LOG2;

/// Deterministic stream cipher RNG. Every random object in the crate comes
/// from one of these so whole protocol runs replay from a single seed.
pub struct SeededRng(ChaCha20Rng);

impl SeededRng {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        SeededRng(ChaCha20Rng::from_seed(seed))
    }

    pub fn from_u64(x: u64) -> Self {
        SeededRng(ChaCha20Rng::seed_from_u64(x))
    }

    pub fn next_word(&mut self) -> RingWord {
        self.0.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn fill_words(&mut self, out: &mut [RingWord]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let x = self.0.next_u64();
            pair[0] = x as u32;
            pair[1] = (x >> 32) as u32;
        }
        for w in chunks.into_remainder() {
            *w = self.0.next_u32();
        }
    }

    /// Uniform draw from `[0, bound)` by rejection; exact, no modulo bias.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below(0)");
        let usable = (u64::MAX / bound) * bound;
        loop {
            let x = self.0.next_u64();
            if x < usable {
                return x % bound;
            }
        }
    }

    /// Bernoulli trial with exact rational probability.
    pub fn bernoulli(&mut self, rate: NoiseRate) -> bool {
        let r = rate.ratio();
        self.below(r.den()) < r.num()
    }

    /// Derive an independent child generator and advance this one.
    pub fn fork(&mut self) -> SeededRng {
        let mut seed = [0u8; 32];
        self.0.fill_bytes(&mut seed);
        SeededRng::from_seed(seed)
    }
}

pub fn sample_uniform(rows: usize, cols: usize, rng: &mut SeededRng) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(rows, cols);
    rng.fill_words(m.data_mut());
    m
}

/// Sparse noise: each entry is occupied with probability `mu`, and an
/// occupied entry holds a uniform word (a drawn zero is simply not stored,
/// which is the same distribution).
pub fn sample_noise(
    rows: usize,
    cols: usize,
    mu: NoiseRate,
    rng: &mut SeededRng,
) -> SparseMatrix {
    let mut entries = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if rng.bernoulli(mu) {
                entries.push(SparseEntry {
                    row: r as u32,
                    col: c as u32,
                    value: rng.next_word(),
                });
            }
        }
    }
    SparseMatrix::from_entries(rows, cols, entries)
        .expect("noise entries are in range by construction")
}

/// Exact nonnegative rational, kept reduced.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Ratio {
    num: u64,
    den: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Result<Self, Error> {
        if den == 0 {
            return Err(Error::Parameter("ratio with zero denominator".into()));
        }
        let g = gcd(num.max(1), den);
        let g = if num == 0 { den } else { g };
        Ok(Ratio {
            num: num / g,
            den: den / g,
        })
    }

    /// Accepts `p/q` or a bare integer `p`.
    pub fn parse(s: &str) -> Result<Self, Error> {
        let bad = |detail: &str| Error::Parameter(format!("bad ratio {s:?}: {detail}"));
        match s.split_once('/') {
            Some((p, q)) => {
                let num: u64 = p.trim().parse().map_err(|_| bad("numerator"))?;
                let den: u64 = q.trim().parse().map_err(|_| bad("denominator"))?;
                Ratio::new(num, den)
            }
            None => {
                let num: u64 = s.trim().parse().map_err(|_| bad("not an integer"))?;
                Ratio::new(num, 1)
            }
        }
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `ceil(x * self)` in exact integer arithmetic.
    pub fn ceil_mul(&self, x: usize) -> usize {
        let prod = x as u128 * self.num as u128;
        let den = self.den as u128;
        ((prod + den - 1) / den) as usize
    }

    pub fn is_proper_fraction(&self) -> bool {
        self.num > 0 && self.num < self.den
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// Occupancy rate for sparse noise: an exact rational in [0, 1].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NoiseRate(Ratio);

impl NoiseRate {
    pub fn new(r: Ratio) -> Result<Self, Error> {
        if r.num() > r.den() {
            return Err(Error::Parameter(format!("noise rate {r} exceeds 1")));
        }
        Ok(NoiseRate(r))
    }

    pub fn from_parts(num: u64, den: u64) -> Result<Self, Error> {
        NoiseRate::new(Ratio::new(num, den)?)
    }

    pub fn ratio(&self) -> Ratio {
        self.0
    }

    pub fn as_f64(&self) -> f64 {
        self.0.as_f64()
    }

    pub fn is_zero(&self) -> bool {
        self.0.num() == 0
    }
}

impl std::fmt::Display for NoiseRate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// A shrink rate below 1/2 makes every ladder step strictly smaller, so the
/// recursion always terminates; rates at or above 1/2 can stall on small
/// dimensions and are rejected outright.
fn check_delta(delta: Ratio) -> Result<(), Error> {
    if delta.num() == 0 || delta.num() as u128 * 2 >= delta.den() as u128 {
        return Err(Error::Parameter(format!(
            "delta must be in (0, 1/2), got {delta}"
        )));
    }
    Ok(())
}

/// Knobs that pick a schedule: shrink rate, noise exponent, security bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LpnParams {
    pub delta: Ratio,
    pub epsilon: Ratio,
    pub lambda: u32,
}

impl LpnParams {
    pub fn new(delta: Ratio, epsilon: Ratio, lambda: u32) -> Result<Self, Error> {
        check_delta(delta)?;
        if !epsilon.is_proper_fraction() {
            return Err(Error::Parameter(format!(
                "epsilon must be in (0, 1), got {epsilon}"
            )));
        }
        if lambda == 0 {
            return Err(Error::Parameter("lambda must be positive".into()));
        }
        Ok(LpnParams {
            delta,
            epsilon,
            lambda,
        })
    }

    /// Benchmarking defaults: quarter shrink, square-root noise, 40 bits.
    pub fn desk() -> Self {
        LpnParams {
            delta: Ratio::new(1, 4).unwrap(),
            epsilon: Ratio::new(1, 2).unwrap(),
            lambda: 40,
        }
    }
}

#[derive(Clone)]
struct TableRow {
    delta: Ratio,
    epsilon: Ratio,
    lambda: u32,
    iota: usize,
}

/// Lookup table mapping (delta, epsilon, lambda) to the minimum secure
/// dimension. The builtin copy ships placeholder values; see the data file
/// header for the caveat.
#[derive(Clone)]
pub struct SecurityTable {
    rows: Vec<TableRow>,
}

static BUILTIN_TABLE: &str = include_str!("../data/security_table.txt");

impl SecurityTable {
    pub fn parse(text: &str) -> Result<SecurityTable, Error> {
        let mut rows: Vec<TableRow> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 4 {
                return Err(Error::Config(format!(
                    "security table line {lineno}: expected 4 fields, got {}",
                    toks.len()
                )));
            }
            let delta = Ratio::parse(toks[0])
                .map_err(|e| Error::Config(format!("security table line {lineno}: {e}")))?;
            let epsilon = Ratio::parse(toks[1])
                .map_err(|e| Error::Config(format!("security table line {lineno}: {e}")))?;
            let lambda: u32 = toks[2].parse().map_err(|_| {
                Error::Config(format!("security table line {lineno}: bad lambda"))
            })?;
            let iota: usize = toks[3].parse().map_err(|_| {
                Error::Config(format!("security table line {lineno}: bad iota"))
            })?;
            if iota == 0 {
                return Err(Error::Config(format!(
                    "security table line {lineno}: iota must be positive"
                )));
            }
            if rows
                .iter()
                .any(|r| r.delta == delta && r.epsilon == epsilon && r.lambda == lambda)
            {
                return Err(Error::Config(format!(
                    "security table line {lineno}: duplicate row for ({delta}, {epsilon}, {lambda})"
                )));
            }
            rows.push(TableRow {
                delta,
                epsilon,
                lambda,
                iota,
            });
        }
        Ok(SecurityTable { rows })
    }

    pub fn load(path: &Path) -> Result<SecurityTable, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read security table {}: {e}", path.display()))
        })?;
        SecurityTable::parse(&text)
    }

    pub fn builtin() -> &'static SecurityTable {
        static TABLE: OnceLock<SecurityTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            SecurityTable::parse(BUILTIN_TABLE).expect("builtin table parses")
        })
    }

    /// Honors `TRAPMAT_SECURITY_TABLE` when set, else the builtin rows.
    pub fn from_env_or_builtin() -> Result<SecurityTable, Error> {
        match std::env::var_os("TRAPMAT_SECURITY_TABLE") {
            Some(path) => SecurityTable::load(Path::new(&path)),
            None => Ok(SecurityTable::builtin().clone()),
        }
    }

    pub fn iota(&self, delta: Ratio, epsilon: Ratio, lambda: u32) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.delta == delta && r.epsilon == epsilon && r.lambda == lambda)
            .map(|r| r.iota)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Probe width (in ring words) giving a forgery bound of `2^-lambda` for a
/// single product check over a ring of `ring_bits`-bit words.
pub fn lambda_prime(lambda: u32, ring_bits: u32) -> usize {
    (lambda as usize).div_ceil(ring_bits as usize)
}

/// Smallest dimension the recursion may shrink to: the table's minimum
/// secure dimension for these parameters, but never below the probe width.
pub fn nu(
    delta: Ratio,
    epsilon: Ratio,
    lambda: u32,
    ring_bits: u32,
    table: &SecurityTable,
) -> Result<usize, Error> {
    let iota = table.iota(delta, epsilon, lambda).ok_or_else(|| {
        Error::Config(format!(
            "no security table row for delta {delta} epsilon {epsilon} lambda {lambda}"
        ))
    })?;
    Ok(iota.max(lambda_prime(lambda, ring_bits)))
}

/// Per-level replacement for the default shrink rate or noise rate. A `None`
/// field keeps the formula value. Noise overrides are clamped up to the
/// formula floor: thinner noise than `n^(epsilon-1)` would void the hardness
/// assumption, so a low request quietly becomes the floor.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerOverride {
    pub delta: Option<Ratio>,
    pub mu: Option<Ratio>,
}

pub fn build_schedule(
    n: usize,
    params: &LpnParams,
    table: &SecurityTable,
) -> Result<LpnSchedule, Error> {
    build_schedule_with_overrides(n, params, table, &[])
}

pub fn build_schedule_with_overrides(
    n: usize,
    params: &LpnParams,
    table: &SecurityTable,
    overrides: &[LayerOverride],
) -> Result<LpnSchedule, Error> {
    let nu = nu(
        params.delta,
        params.epsilon,
        params.lambda,
        RING_BITS,
        table,
    )?;
    if n <= nu {
        return Err(Error::LocalComputeAdvised { n, nu });
    }

    let mut dims = vec![n];
    let mut mus = Vec::new();
    loop {
        let prev = *dims.last().unwrap();
        if prev == nu {
            break;
        }
        let level = dims.len(); // 1-based level about to be added
        let over = overrides.get(level - 1).copied().unwrap_or_default();
        let delta = match over.delta {
            Some(d) => {
                check_delta(d)?;
                d
            }
            None => params.delta,
        };
        let next = delta.ceil_mul(prev).max(nu);
        debug_assert!(next < prev, "shrink below 1/2 always makes progress");
        let floor = grid_rate(prev, params.epsilon);
        let k = match over.mu {
            Some(r) => snap_rate_up(r)?.max(floor),
            None => floor,
        };
        mus.push(NoiseRate::from_parts(k, MU_GRID_DEN)?);
        dims.push(next);
    }
    if overrides.len() > dims.len() - 1 {
        return Err(Error::Parameter(format!(
            "{} layer overrides for a depth-{} schedule",
            overrides.len(),
            dims.len() - 1
        )));
    }
    Ok(LpnSchedule {
        dims,
        mus,
        nu,
        lambda_prime: lambda_prime(params.lambda, RING_BITS),
        params: *params,
    })
}

/// The dimension chain `n_0 > n_1 > ... > n_d = nu` plus the per-level
/// noise rates. Level indices are 1-based to match the chain factors: level
/// `i` maps dimension `n_{i-1}` down to `n_i`.
#[derive(Clone, Debug)]
pub struct LpnSchedule {
    dims: Vec<usize>,
    mus: Vec<NoiseRate>,
    nu: usize,
    lambda_prime: usize,
    params: LpnParams,
}

impl LpnSchedule {
    pub fn new(n: usize, params: &LpnParams, table: &SecurityTable) -> Result<Self, Error> {
        build_schedule(n, params, table)
    }

    /// Number of levels `d`.
    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    /// `n_i` for `i` in `0..=depth`.
    pub fn dim(&self, i: usize) -> usize {
        self.dims[i]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn params(&self) -> &LpnParams {
        &self.params
    }

    pub fn lambda(&self) -> u32 {
        self.params.lambda
    }

    /// Level-`i` noise rate, `i` in `1..=depth`.
    pub fn mu(&self, i: usize) -> NoiseRate {
        self.mus[i - 1]
    }

    /// Grid numerator of the level-`i` noise rate: the rate is this over 2^20.
    pub fn mu_num(&self, i: usize) -> u64 {
        let r = self.mu(i).ratio();
        r.num() * (MU_GRID_DEN / r.den())
    }

    pub fn mu_f64(&self, i: usize) -> f64 {
        self.mu(i).as_f64()
    }

    /// Probe width giving a forgery bound of 2^-lambda per check.
    pub fn lambda_prime(&self) -> usize {
        self.lambda_prime
    }
}

/// Smallest grid rate at or above the requested rational.
fn snap_rate_up(r: Ratio) -> Result<u64, Error> {
    let rate = NoiseRate::new(r)?; // rejects values above 1
    let r = rate.ratio();
    let k = (r.num() as u128 * MU_GRID_DEN as u128).div_ceil(r.den() as u128) as u64;
    Ok(k.clamp(1, MU_GRID_DEN))
}

/// `n^(epsilon-1)` rounded up onto the 2^-20 grid. The tiny slack subtracted
/// before ceiling keeps exact grid points (powers of two under epsilon=1/2,
/// say) from being bumped a notch by float dust.
fn grid_rate(n: usize, epsilon: Ratio) -> u64 {
    let x = (n as f64).powf(epsilon.as_f64() - 1.0);
    let scaled = x * MU_GRID_DEN as f64;
    let k = (scaled - 1e-9).ceil() as u64;
    k.clamp(1, MU_GRID_DEN)
}
