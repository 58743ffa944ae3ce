//! Trapdoored pseudorandom masks built over a public chain of shrinking
//! random matrices.
//!
//! The chain `L_1, ..., L_d` steps the working dimension down a schedule
//! `n_0 > n_1 > ... > n_d`. A mask is expanded from a short dense secret at
//! the narrow end plus one sparse noise block per level:
//!
//! * left mask: `H L_d^T ... L_1^T` with noise mixed in at every level,
//! * right mask: `L_1 ... L_d G` with noise mixed in at every level.
//!
//! Whoever holds the short secrets can multiply anything by a mask in time
//! near the size of the operands, because the dense core only ever touches
//! the innermost dimension and everything else rides the sparse noise. To
//! anyone else the mask is indistinguishable from uniform under the sparse
//! learning assumption, even given the chain.
//!
//! The running products `fwd(i) = L_1 ... L_i` and the table
//! `gram(j, i) = fwd(j)^T fwd(i)` are what make the fast paths work; they
//! are public values a server can compute once per chain.

use crate::error::Error;
use crate::lpn::{sample_noise, sample_uniform, LpnSchedule, SeededRng};
use crate::ring_matrix::{
    add_sparse_into, dense_sparse_mul, mat_add, mat_mul, sparse_dense_mul, transpose, DenseMatrix,
    OpCounter, SparseMatrix,
};

/// The public chain. Level `i` (1-based) is an `n_(i-1) x n_i` uniform
/// matrix; the chain as a whole is safe to publish.
pub struct SubspaceChain {
    schedule: LpnSchedule,
    levels: Vec<DenseMatrix>,
}

pub fn gen_chain(schedule: &LpnSchedule, rng: &mut SeededRng) -> SubspaceChain {
    let levels = (1..=schedule.depth())
        .map(|i| sample_uniform(schedule.dim(i - 1), schedule.dim(i), rng))
        .collect();
    SubspaceChain {
        schedule: schedule.clone(),
        levels,
    }
}

impl SubspaceChain {
    pub fn schedule(&self) -> &LpnSchedule {
        &self.schedule
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Level `i` for `i` in `1..=depth`.
    pub fn level(&self, i: usize) -> &DenseMatrix {
        &self.levels[i - 1]
    }

    pub fn levels(&self) -> &[DenseMatrix] {
        &self.levels
    }
}

fn upper_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Index of `gram(j, i)` in row-major upper-triangular order, `1 <= j <= i <= d`.
fn upper_idx(d: usize, j: usize, i: usize) -> usize {
    debug_assert!(1 <= j && j <= i && i <= d);
    let r = j - 1; // rows above have lengths d, d-1, ..., d-r+1
    r * d - r * r.saturating_sub(1) / 2 + (i - j)
}

/// Running products of the chain plus their pairwise gram table.
///
/// `fwd(i) = L_1 ... L_i` and `gram(j, i) = fwd(j)^T fwd(i)`, with the
/// conventions `fwd(0) = I`, so `gram(0, i) = fwd(i)` and `gram(j, 0) =
/// fwd(j)^T`. Only the upper triangle `1 <= j <= i` is stored; mirrors are
/// materialized on demand by transposition.
pub struct ChainProducts {
    dims: Vec<usize>,
    fwd: Vec<DenseMatrix>,
    upper: Vec<DenseMatrix>,
}

impl ChainProducts {
    /// Builds the full table in one pass over the chain. Each round `i`
    /// extends every existing row by one factor (`gram(j, i) =
    /// gram(j, i-1) L_i`, with row 0 being the forward chain itself) and
    /// then closes the new diagonal entry as `gram(i-1, i)^T L_i`, so no
    /// product is ever recomputed from scratch.
    pub fn compute(levels: &[DenseMatrix], counter: &mut OpCounter) -> Result<Self, Error> {
        if levels.is_empty() {
            return Err(Error::InvalidMatrix("empty subspace chain".into()));
        }
        for (k, w) in levels.windows(2).enumerate() {
            if w[0].cols() != w[1].rows() {
                return Err(Error::InvalidMatrix(format!(
                    "chain level {} is {}x{} but level {} is {}x{}",
                    k + 1,
                    w[0].rows(),
                    w[0].cols(),
                    k + 2,
                    w[1].rows(),
                    w[1].cols()
                )));
            }
        }
        let d = levels.len();
        let mut dims = Vec::with_capacity(d + 1);
        dims.push(levels[0].rows());
        dims.extend(levels.iter().map(|l| l.cols()));

        let mut fwd: Vec<DenseMatrix> = Vec::with_capacity(d);
        let mut upper: Vec<Option<DenseMatrix>> = (0..upper_len(d)).map(|_| None).collect();
        for i in 1..=d {
            let li = &levels[i - 1];
            let f = if i == 1 {
                li.clone()
            } else {
                mat_mul(&fwd[i - 2], li, counter)?
            };
            fwd.push(f);
            for j in 1..i {
                let prev = upper[upper_idx(d, j, i - 1)].as_ref().unwrap();
                let g = mat_mul(prev, li, counter)?;
                upper[upper_idx(d, j, i)] = Some(g);
            }
            let above = if i == 1 {
                &fwd[0]
            } else {
                upper[upper_idx(d, i - 1, i)].as_ref().unwrap()
            };
            let g = mat_mul(&transpose(above), li, counter)?;
            upper[upper_idx(d, i, i)] = Some(g);
        }
        Ok(ChainProducts {
            dims,
            fwd,
            upper: upper.into_iter().map(|m| m.unwrap()).collect(),
        })
    }

    /// Reassembles a table from received pieces, checking every shape
    /// against the expected dimension chain. `upper` must hold the upper
    /// triangle in row-major order, `fwd` the forward products for levels
    /// `1..=d`.
    pub fn from_parts(
        dims: &[usize],
        fwd: Vec<DenseMatrix>,
        upper: Vec<DenseMatrix>,
    ) -> Result<Self, Error> {
        let d = dims.len().saturating_sub(1);
        if d == 0 {
            return Err(Error::MalformedMessage("empty dimension chain".into()));
        }
        if fwd.len() != d {
            return Err(Error::MalformedMessage(format!(
                "expected {d} forward products, got {}",
                fwd.len()
            )));
        }
        if upper.len() != upper_len(d) {
            return Err(Error::MalformedMessage(format!(
                "expected {} gram blocks, got {}",
                upper_len(d),
                upper.len()
            )));
        }
        for i in 1..=d {
            if fwd[i - 1].shape() != (dims[0], dims[i]) {
                return Err(Error::MalformedMessage(format!(
                    "forward product {i} has shape {:?}, expected {:?}",
                    fwd[i - 1].shape(),
                    (dims[0], dims[i])
                )));
            }
        }
        for j in 1..=d {
            for i in j..=d {
                let got = upper[upper_idx(d, j, i)].shape();
                if got != (dims[j], dims[i]) {
                    return Err(Error::MalformedMessage(format!(
                        "gram block ({j}, {i}) has shape {got:?}, expected {:?}",
                        (dims[j], dims[i])
                    )));
                }
            }
        }
        Ok(ChainProducts {
            dims: dims.to_vec(),
            fwd,
            upper,
        })
    }

    pub fn depth(&self) -> usize {
        self.fwd.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// `fwd(i)` for `i` in `1..=depth`.
    pub fn fwd(&self, i: usize) -> &DenseMatrix {
        &self.fwd[i - 1]
    }

    pub fn fwd_all(&self) -> &[DenseMatrix] {
        &self.fwd
    }

    /// Upper-triangle gram blocks in wire order.
    pub fn upper(&self) -> &[DenseMatrix] {
        &self.upper
    }

    /// Keeps only the forward products, releasing the gram table.
    pub fn into_fwd(self) -> Vec<DenseMatrix> {
        self.fwd
    }

    /// `gram(j, i)` for any `j, i` in `0..=depth` except `(0, 0)`, with
    /// mirrors and the identity row resolved. Returns an owned matrix since
    /// half the entries only exist transposed.
    pub fn gram(&self, j: usize, i: usize) -> DenseMatrix {
        let d = self.depth();
        assert!(j <= d && i <= d && j + i > 0, "gram({j}, {i}) out of range");
        if j == 0 {
            self.fwd[i - 1].clone()
        } else if i == 0 {
            transpose(&self.fwd[j - 1])
        } else if j <= i {
            self.upper[upper_idx(d, j, i)].clone()
        } else {
            transpose(&self.upper[upper_idx(d, i, j)])
        }
    }
}

pub fn chain_products_local(
    chain: &SubspaceChain,
    counter: &mut OpCounter,
) -> Result<ChainProducts, Error> {
    ChainProducts::compute(chain.levels(), counter)
}

fn scrub_dense(m: &mut DenseMatrix) {
    for w in m.data_mut() {
        *w = 0;
    }
}

fn scrub_sparse(s: &mut SparseMatrix) {
    let entries = s.entries_mut();
    for e in entries.iter_mut() {
        e.value = 0;
    }
    entries.clear();
}

/// Left-mask trapdoor: a dense core on the innermost dimension plus one
/// sparse noise block per level. `S_i` is `m x n_(i-1)` at the level-`i`
/// noise rate; `H` is `m x n_d`.
pub struct LeftMaskSecret {
    h: DenseMatrix,
    s: Vec<SparseMatrix>,
}

impl LeftMaskSecret {
    pub fn sample(m: usize, schedule: &LpnSchedule, rng: &mut SeededRng) -> Self {
        let d = schedule.depth();
        let h = sample_uniform(m, schedule.dim(d), rng);
        let s = (1..=d)
            .map(|i| sample_noise(m, schedule.dim(i - 1), schedule.mu(i), rng))
            .collect();
        LeftMaskSecret { h, s }
    }

    pub fn rows(&self) -> usize {
        self.h.rows()
    }

    pub fn depth(&self) -> usize {
        self.s.len()
    }

    pub fn h(&self) -> &DenseMatrix {
        &self.h
    }

    /// `S_i` for `i` in `1..=depth`.
    pub fn s(&self, i: usize) -> &SparseMatrix {
        &self.s[i - 1]
    }
}

impl Drop for LeftMaskSecret {
    // best-effort scrub; the trapdoor is the only secret key material
    fn drop(&mut self) {
        scrub_dense(&mut self.h);
        for s in &mut self.s {
            scrub_sparse(s);
        }
    }
}

/// Right-mask trapdoor, mirror image of the left one: `G` is `n_d x l`,
/// `T_i` is `n_(i-1) x l` at the level-`i` noise rate.
pub struct RightMaskSecret {
    g: DenseMatrix,
    t: Vec<SparseMatrix>,
}

impl RightMaskSecret {
    pub fn sample(l: usize, schedule: &LpnSchedule, rng: &mut SeededRng) -> Self {
        let d = schedule.depth();
        let g = sample_uniform(schedule.dim(d), l, rng);
        let t = (1..=d)
            .map(|i| sample_noise(schedule.dim(i - 1), l, schedule.mu(i), rng))
            .collect();
        RightMaskSecret { g, t }
    }

    pub fn cols(&self) -> usize {
        self.g.cols()
    }

    pub fn depth(&self) -> usize {
        self.t.len()
    }

    pub fn g(&self) -> &DenseMatrix {
        &self.g
    }

    /// `T_i` for `i` in `1..=depth`.
    pub fn t(&self, i: usize) -> &SparseMatrix {
        &self.t[i - 1]
    }
}

impl Drop for RightMaskSecret {
    fn drop(&mut self) {
        scrub_dense(&mut self.g);
        for t in &mut self.t {
            scrub_sparse(t);
        }
    }
}

/// Expands the left trapdoor into its full `m x n_0` mask by evaluating
/// level by level from the inside out: `W_d = H`, then `W_(i-1) = W_i L_i^T
/// + S_i`. Costs `m * sum(n_i n_(i-1))` multiplications; prefer
/// [`expand_left_mask_from_table`] when the forward products are at hand.
pub fn expand_left_mask(
    chain: &SubspaceChain,
    secret: &LeftMaskSecret,
    counter: &mut OpCounter,
) -> Result<DenseMatrix, Error> {
    let d = chain.depth();
    if secret.depth() != d {
        return Err(Error::Parameter(format!(
            "secret depth {} does not match chain depth {d}",
            secret.depth()
        )));
    }
    let mut w = secret.h().clone();
    for i in (1..=d).rev() {
        w = mat_mul(&w, &transpose(chain.level(i)), counter)?;
        w = add_sparse_into(w, secret.s(i))?;
    }
    Ok(w)
}

/// Same mask as [`expand_left_mask`], assembled from the forward products:
/// one thin dense product plus one sparse product per level. This is the
/// form whose cost stays near the size of the output.
pub fn expand_left_mask_from_table(
    fwd: &[DenseMatrix],
    secret: &LeftMaskSecret,
    counter: &mut OpCounter,
) -> Result<DenseMatrix, Error> {
    let d = secret.depth();
    if fwd.len() != d || d == 0 {
        return Err(Error::Parameter(format!(
            "{} forward products for a depth-{d} secret",
            fwd.len()
        )));
    }
    let mut acc = mat_mul(secret.h(), &transpose(&fwd[d - 1]), counter)?;
    // the level-1 noise block lands on the identity, so it is a plain add
    acc = add_sparse_into(acc, secret.s(1))?;
    for i in 1..d {
        let piece = sparse_dense_mul(secret.s(i + 1), &transpose(&fwd[i - 1]), counter)?;
        acc = mat_add(&acc, &piece)?;
    }
    Ok(acc)
}

/// Expands the right trapdoor into its full `n_0 x l` mask, inside out:
/// `W_d = G`, then `W_(i-1) = L_i W_i + T_i`.
pub fn expand_right_mask(
    chain: &SubspaceChain,
    secret: &RightMaskSecret,
    counter: &mut OpCounter,
) -> Result<DenseMatrix, Error> {
    let d = chain.depth();
    if secret.depth() != d {
        return Err(Error::Parameter(format!(
            "secret depth {} does not match chain depth {d}",
            secret.depth()
        )));
    }
    let mut w = secret.g().clone();
    for i in (1..=d).rev() {
        w = mat_mul(chain.level(i), &w, counter)?;
        w = add_sparse_into(w, secret.t(i))?;
    }
    Ok(w)
}

/// Same mask as [`expand_right_mask`], from the forward products.
pub fn expand_right_mask_from_table(
    fwd: &[DenseMatrix],
    secret: &RightMaskSecret,
    counter: &mut OpCounter,
) -> Result<DenseMatrix, Error> {
    let d = secret.depth();
    if fwd.len() != d || d == 0 {
        return Err(Error::Parameter(format!(
            "{} forward products for a depth-{d} secret",
            fwd.len()
        )));
    }
    let mut acc = mat_mul(&fwd[d - 1], secret.g(), counter)?;
    acc = add_sparse_into(acc, secret.t(1))?;
    for i in 1..d {
        let piece = dense_sparse_mul(&fwd[i - 1], secret.t(i + 1), counter)?;
        acc = mat_add(&acc, &piece)?;
    }
    Ok(acc)
}

/// The products of the left mask with every forward product,
/// `out[i-1] = A' fwd(i)`, straight from the trapdoor and the gram table.
/// Never touches the full-width mask: the heaviest dense factor is
/// `m x n_d`.
pub fn left_partials_from_secret(
    products: &ChainProducts,
    secret: &LeftMaskSecret,
    counter: &mut OpCounter,
) -> Result<Vec<DenseMatrix>, Error> {
    let d = products.depth();
    if secret.depth() != d {
        return Err(Error::Parameter(format!(
            "secret depth {} does not match table depth {d}",
            secret.depth()
        )));
    }
    let mut out = Vec::with_capacity(d);
    for i in 1..=d {
        let mut acc = mat_mul(secret.h(), &products.gram(d, i), counter)?;
        for j in 0..d {
            let piece = sparse_dense_mul(secret.s(j + 1), &products.gram(j, i), counter)?;
            acc = mat_add(&acc, &piece)?;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Per-level products `al(i) = A fwd(i)` retained after initialization.
/// The level-0 entry is `A` itself and is passed alongside where needed
/// rather than stored twice.
pub struct PrecomputedLeft {
    al: Vec<DenseMatrix>,
}

impl PrecomputedLeft {
    pub fn new(al: Vec<DenseMatrix>) -> Self {
        PrecomputedLeft { al }
    }

    pub fn depth(&self) -> usize {
        self.al.len()
    }

    /// `A fwd(i)` for `i` in `1..=depth`.
    pub fn get(&self, i: usize) -> &DenseMatrix {
        &self.al[i - 1]
    }
}

/// `A B'` for a right mask given only the retained products: the dense core
/// `G` meets `A fwd(d)` (width `n_d`), and each noise block meets the
/// matching retained product sparsely. `a` supplies the level-0 term.
pub fn fast_ab_prime(
    a: &DenseMatrix,
    al: &PrecomputedLeft,
    secret: &RightMaskSecret,
    counter: &mut OpCounter,
) -> Result<DenseMatrix, Error> {
    let d = secret.depth();
    if al.depth() != d || d == 0 {
        return Err(Error::Parameter(format!(
            "{} retained products for a depth-{d} secret",
            al.depth()
        )));
    }
    let mut acc = mat_mul(al.get(d), secret.g(), counter)?;
    let piece = dense_sparse_mul(a, secret.t(1), counter)?;
    acc = mat_add(&acc, &piece)?;
    for i in 1..d {
        let piece = dense_sparse_mul(al.get(i), secret.t(i + 1), counter)?;
        acc = mat_add(&acc, &piece)?;
    }
    Ok(acc)
}

/// `A' B` for a left mask given the probe ladder `probes[i-1] = fwd(i)^T B`;
/// `b` itself is the level-0 probe. Costs `m` times the probe area plus the
/// sparse terms, with no dependence on `n_0` beyond `nnz(S_1)`.
pub fn fast_aprime_benc(
    secret: &LeftMaskSecret,
    b: &DenseMatrix,
    probes: &[DenseMatrix],
    counter: &mut OpCounter,
) -> Result<DenseMatrix, Error> {
    let d = secret.depth();
    if probes.len() != d || d == 0 {
        return Err(Error::Parameter(format!(
            "{} probes for a depth-{d} secret",
            probes.len()
        )));
    }
    let mut acc = mat_mul(secret.h(), &probes[d - 1], counter)?;
    let piece = sparse_dense_mul(secret.s(1), b, counter)?;
    acc = mat_add(&acc, &piece)?;
    for i in 1..d {
        let piece = sparse_dense_mul(secret.s(i + 1), &probes[i - 1], counter)?;
        acc = mat_add(&acc, &piece)?;
    }
    Ok(acc)
}

/// A stock of `t` mask pairs `(B'_k, A B'_k)` of width `l`, carved as
/// column blocks out of one wide precomputed pair. Pulling a pair makes a
/// later multiplication by `A` almost free: mask with the block, then
/// unmask with its precomputed product.
pub struct TargetedGenerator {
    mask: DenseMatrix,
    product: DenseMatrix,
    block: usize,
    next: usize,
}

/// Wraps a wide mask and its product with the hidden left operand. `mask`
/// must be `n x (t*l)` and `product` `m x (t*l)`.
pub fn targeted_generator(
    mask: DenseMatrix,
    product: DenseMatrix,
    t: usize,
    l: usize,
) -> Result<TargetedGenerator, Error> {
    if t == 0 || l == 0 {
        return Err(Error::Parameter("generator needs t >= 1 and l >= 1".into()));
    }
    if mask.cols() != t * l || product.cols() != t * l {
        return Err(Error::Parameter(format!(
            "generator over {} mask and {} product columns, expected {}",
            mask.cols(),
            product.cols(),
            t * l
        )));
    }
    Ok(TargetedGenerator {
        mask,
        product,
        block: l,
        next: 0,
    })
}

impl TargetedGenerator {
    pub fn capacity(&self) -> usize {
        self.mask.cols() / self.block
    }

    pub fn remaining(&self) -> usize {
        self.capacity() - self.next
    }

    pub fn block_width(&self) -> usize {
        self.block
    }

    /// The next `(B'_k, A B'_k)` pair. Each pair comes out exactly once;
    /// after `t` pulls the generator is spent and must be replaced.
    pub fn pull(&mut self) -> Result<(DenseMatrix, DenseMatrix), Error> {
        if self.next == self.capacity() {
            return Err(Error::GeneratorExhausted);
        }
        let at = self.next * self.block;
        let b = self.mask.columns(at, self.block)?;
        let ab = self.product.columns(at, self.block)?;
        self.next += 1;
        Ok((b, ab))
    }
}

impl Drop for TargetedGenerator {
    // unpulled blocks are future masks, so they get the same scrub as keys
    fn drop(&mut self) {
        scrub_dense(&mut self.mask);
        scrub_dense(&mut self.product);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lpn::{build_schedule, LpnParams, LpnSchedule, SecurityTable};
    use crate::ring_matrix::mat_sub;

    fn desk_schedule(n: usize) -> LpnSchedule {
        build_schedule(n, &LpnParams::desk(), SecurityTable::builtin()).unwrap()
    }

    /// Independent forward products: right-associated evaluation, so the
    /// multiplication order differs from the production left-folding.
    fn fwd_oracle(levels: &[DenseMatrix]) -> Vec<DenseMatrix> {
        let mut c = OpCounter::new();
        (1..=levels.len())
            .map(|i| {
                let mut acc = levels[i - 1].clone();
                for k in (0..i - 1).rev() {
                    acc = mat_mul(&levels[k], &acc, &mut c).unwrap();
                }
                acc
            })
            .collect()
    }

    /// Definitional mask: densify the noise and follow the sum formula.
    fn left_mask_oracle(fwd: &[DenseMatrix], secret: &LeftMaskSecret) -> DenseMatrix {
        let mut c = OpCounter::new();
        let d = secret.depth();
        let mut acc = mat_mul(secret.h(), &transpose(&fwd[d - 1]), &mut c).unwrap();
        acc = mat_add(&acc, &secret.s(1).to_dense()).unwrap();
        for i in 1..d {
            let piece = mat_mul(&secret.s(i + 1).to_dense(), &transpose(&fwd[i - 1]), &mut c)
                .unwrap();
            acc = mat_add(&acc, &piece).unwrap();
        }
        acc
    }

    fn right_mask_oracle(fwd: &[DenseMatrix], secret: &RightMaskSecret) -> DenseMatrix {
        let mut c = OpCounter::new();
        let d = secret.depth();
        let mut acc = mat_mul(&fwd[d - 1], secret.g(), &mut c).unwrap();
        acc = mat_add(&acc, &secret.t(1).to_dense()).unwrap();
        for i in 1..d {
            let piece = mat_mul(&fwd[i - 1], &secret.t(i + 1).to_dense(), &mut c).unwrap();
            acc = mat_add(&acc, &piece).unwrap();
        }
        acc
    }

    #[test]
    fn products_match_oracles() {
        let mut rng = SeededRng::from_u64(0x7710);
        for n in [64usize, 256] {
            let schedule = desk_schedule(n);
            let chain = gen_chain(&schedule, &mut rng);
            let d = chain.depth();
            assert!(d >= 2);
            for i in 1..=d {
                assert_eq!(
                    chain.level(i).shape(),
                    (schedule.dim(i - 1), schedule.dim(i))
                );
            }

            let mut c = OpCounter::new();
            let table = chain_products_local(&chain, &mut c).unwrap();
            assert_eq!(table.depth(), d);
            assert_eq!(table.dims(), schedule.dims());

            let fwd = fwd_oracle(chain.levels());
            let mut oc = OpCounter::new();
            for i in 1..=d {
                assert_eq!(table.fwd(i), &fwd[i - 1], "fwd({i}) at n={n}");
                for j in 0..=d {
                    if j == 0 && i == 0 {
                        continue;
                    }
                    let want = if j == 0 {
                        fwd[i - 1].clone()
                    } else {
                        mat_mul(&transpose(&fwd[j - 1]), &fwd[i - 1], &mut oc).unwrap()
                    };
                    assert_eq!(table.gram(j, i), want, "gram({j}, {i}) at n={n}");
                }
            }
        }
    }

    #[test]
    fn gram_accessor_resolves_mirrors() {
        let mut rng = SeededRng::from_u64(0x7711);
        let schedule = desk_schedule(64);
        let chain = gen_chain(&schedule, &mut rng);
        let mut c = OpCounter::new();
        let table = chain_products_local(&chain, &mut c).unwrap();
        let d = table.depth();
        for j in 0..=d {
            for i in 0..=d {
                if i + j == 0 {
                    continue;
                }
                assert_eq!(table.gram(j, i), transpose(&table.gram(i, j)));
                assert_eq!(
                    table.gram(j, i).shape(),
                    (schedule.dim(j), schedule.dim(i))
                );
            }
        }
        assert_eq!(table.gram(0, 1), *table.fwd(1));
        assert_eq!(table.gram(1, 0), transpose(table.fwd(1)));
    }

    #[test]
    fn compute_rejects_bad_chains() {
        let mut c = OpCounter::new();
        assert!(matches!(
            ChainProducts::compute(&[], &mut c),
            Err(Error::InvalidMatrix(_))
        ));
        let a = DenseMatrix::zeros(8, 4);
        let b = DenseMatrix::zeros(3, 2); // should be 4 rows
        assert!(matches!(
            ChainProducts::compute(&[a, b], &mut c),
            Err(Error::InvalidMatrix(_))
        ));
    }

    #[test]
    fn from_parts_validates_shapes() {
        let mut rng = SeededRng::from_u64(0x7712);
        let schedule = desk_schedule(64);
        let chain = gen_chain(&schedule, &mut rng);
        let mut c = OpCounter::new();
        let table = chain_products_local(&chain, &mut c).unwrap();
        let dims = table.dims().to_vec();
        let fwd = table.fwd_all().to_vec();
        let upper = table.upper().to_vec();

        let rebuilt = ChainProducts::from_parts(&dims, fwd.clone(), upper.clone()).unwrap();
        assert_eq!(rebuilt.gram(1, 2), table.gram(1, 2));

        assert!(matches!(
            ChainProducts::from_parts(&dims, fwd[..1].to_vec(), upper.clone()),
            Err(Error::MalformedMessage(_))
        ));
        assert!(matches!(
            ChainProducts::from_parts(&dims, fwd.clone(), upper[..1].to_vec()),
            Err(Error::MalformedMessage(_))
        ));
        let mut wrong = upper.clone();
        wrong[0] = DenseMatrix::zeros(1, 1);
        assert!(matches!(
            ChainProducts::from_parts(&dims, fwd.clone(), wrong),
            Err(Error::MalformedMessage(_))
        ));
        assert!(matches!(
            ChainProducts::from_parts(&dims[..1], Vec::new(), Vec::new()),
            Err(Error::MalformedMessage(_))
        ));
    }

    #[test]
    fn mask_expansions_agree_with_oracle() {
        let mut rng = SeededRng::from_u64(0x7713);
        for (n, m, l) in [(64usize, 40usize, 9usize), (256, 17, 1)] {
            let schedule = desk_schedule(n);
            let chain = gen_chain(&schedule, &mut rng);
            let fwd = fwd_oracle(chain.levels());
            let mut c = OpCounter::new();

            let left = LeftMaskSecret::sample(m, &schedule, &mut rng);
            let want = left_mask_oracle(&fwd, &left);
            assert_eq!(expand_left_mask(&chain, &left, &mut c).unwrap(), want);
            assert_eq!(
                expand_left_mask_from_table(&fwd, &left, &mut c).unwrap(),
                want
            );
            assert_eq!(want.shape(), (m, n));

            let right = RightMaskSecret::sample(l, &schedule, &mut rng);
            let want = right_mask_oracle(&fwd, &right);
            assert_eq!(expand_right_mask(&chain, &right, &mut c).unwrap(), want);
            assert_eq!(
                expand_right_mask_from_table(&fwd, &right, &mut c).unwrap(),
                want
            );
            assert_eq!(want.shape(), (n, l));
        }
    }

    #[test]
    fn expansion_costs_are_the_closed_forms() {
        let mut rng = SeededRng::from_u64(0x7714);
        let n = 256;
        let m = 33;
        let schedule = desk_schedule(n);
        let chain = gen_chain(&schedule, &mut rng);
        let mut c = OpCounter::new();
        let table = chain_products_local(&chain, &mut c).unwrap();
        let left = LeftMaskSecret::sample(m, &schedule, &mut rng);
        let d = schedule.depth();
        let dims = schedule.dims();

        let mut horner = OpCounter::new();
        expand_left_mask(&chain, &left, &mut horner).unwrap();
        let want: u64 = (1..=d)
            .map(|i| (m * dims[i] * dims[i - 1]) as u64)
            .sum();
        assert_eq!(horner.ring_muls, want);

        let mut tabled = OpCounter::new();
        expand_left_mask_from_table(table.fwd_all(), &left, &mut tabled).unwrap();
        let sparse_nnz: u64 = (2..=d).map(|i| left.s(i).nnz() as u64).sum();
        let want = (m * dims[d] * dims[0]) as u64 + sparse_nnz * dims[0] as u64;
        assert_eq!(tabled.ring_muls, want);
        assert!(tabled.ring_muls < horner.ring_muls);

        // partials never touch an m x n_0-by-n_0 x n_i scale product
        let mut pc = OpCounter::new();
        let partials = left_partials_from_secret(&table, &left, &mut pc).unwrap();
        assert_eq!(partials.len(), d);
        let all_nnz: u64 = (1..=d).map(|i| left.s(i).nnz() as u64).sum();
        let inner: u64 = (1..=d).map(|i| dims[i] as u64).sum();
        let want = ((m * dims[d]) as u64 + all_nnz) * inner;
        assert_eq!(pc.ring_muls, want);
        assert!(pc.ring_muls < (m * dims[0] * dims[1]) as u64);
    }

    #[test]
    fn left_partials_match_direct_products() {
        let mut rng = SeededRng::from_u64(0x7715);
        let schedule = desk_schedule(64);
        let chain = gen_chain(&schedule, &mut rng);
        let mut c = OpCounter::new();
        let table = chain_products_local(&chain, &mut c).unwrap();
        let left = LeftMaskSecret::sample(21, &schedule, &mut rng);
        let mask = expand_left_mask(&chain, &left, &mut c).unwrap();

        let partials = left_partials_from_secret(&table, &left, &mut c).unwrap();
        for i in 1..=schedule.depth() {
            let want = mat_mul(&mask, table.fwd(i), &mut c).unwrap();
            assert_eq!(partials[i - 1], want, "partial {i}");
        }
    }

    #[test]
    fn fast_paths_match_direct_products() {
        let mut rng = SeededRng::from_u64(0x7716);
        for (n, m, l) in [(64usize, 30usize, 7usize), (256, 12, 3)] {
            let schedule = desk_schedule(n);
            let d = schedule.depth();
            let chain = gen_chain(&schedule, &mut rng);
            let mut c = OpCounter::new();
            let table = chain_products_local(&chain, &mut c).unwrap();

            let a = sample_uniform(m, n, &mut rng);
            let al = PrecomputedLeft::new(
                (1..=d)
                    .map(|i| mat_mul(&a, table.fwd(i), &mut c).unwrap())
                    .collect(),
            );
            let right = RightMaskSecret::sample(l, &schedule, &mut rng);
            let b_prime = expand_right_mask(&chain, &right, &mut c).unwrap();
            let want = mat_mul(&a, &b_prime, &mut c).unwrap();
            assert_eq!(fast_ab_prime(&a, &al, &right, &mut c).unwrap(), want);

            let left = LeftMaskSecret::sample(m, &schedule, &mut rng);
            let a_prime = expand_left_mask(&chain, &left, &mut c).unwrap();
            let b = sample_uniform(n, l, &mut rng);
            let probes: Vec<DenseMatrix> = (1..=d)
                .map(|i| mat_mul(&transpose(table.fwd(i)), &b, &mut c).unwrap())
                .collect();
            let want = mat_mul(&a_prime, &b, &mut c).unwrap();
            assert_eq!(fast_aprime_benc(&left, &b, &probes, &mut c).unwrap(), want);
        }
    }

    /// The whole unmasking identity at once: with `A_enc = A + A'` and
    /// `B_enc = B + B'`, the three correction terms recover `A B` exactly.
    #[test]
    fn masks_cancel_in_unmasking_identity() {
        let mut rng = SeededRng::from_u64(0x7717);
        for (n, m, l) in [(64usize, 19usize, 5usize), (64, 1, 1), (256, 40, 2)] {
            let schedule = desk_schedule(n);
            let d = schedule.depth();
            let chain = gen_chain(&schedule, &mut rng);
            let mut c = OpCounter::new();
            let table = chain_products_local(&chain, &mut c).unwrap();

            let a = sample_uniform(m, n, &mut rng);
            let b = sample_uniform(n, l, &mut rng);
            let left = LeftMaskSecret::sample(m, &schedule, &mut rng);
            let right = RightMaskSecret::sample(l, &schedule, &mut rng);

            let a_prime = expand_left_mask_from_table(table.fwd_all(), &left, &mut c).unwrap();
            let b_prime = expand_right_mask_from_table(table.fwd_all(), &right, &mut c).unwrap();
            let a_enc = mat_add(&a, &a_prime).unwrap();
            let b_enc = mat_add(&b, &b_prime).unwrap();

            let al = PrecomputedLeft::new(
                (1..=d)
                    .map(|i| mat_mul(&a, table.fwd(i), &mut c).unwrap())
                    .collect(),
            );
            let probes: Vec<DenseMatrix> = (1..=d)
                .map(|i| mat_mul(&transpose(table.fwd(i)), &b_enc, &mut c).unwrap())
                .collect();

            let y0 = mat_mul(&a_enc, &b_enc, &mut c).unwrap();
            let ab_prime = fast_ab_prime(&a, &al, &right, &mut c).unwrap();
            let aprime_benc = fast_aprime_benc(&left, &b_enc, &probes, &mut c).unwrap();
            let got = mat_sub(&mat_sub(&y0, &ab_prime).unwrap(), &aprime_benc).unwrap();

            let want = mat_mul(&a, &b, &mut c).unwrap();
            assert_eq!(got, want, "n={n} m={m} l={l}");
        }
    }

    #[test]
    fn generator_blocks_reconstruct_the_pair() {
        let mut rng = SeededRng::from_u64(0x7718);
        let (n, m, t, l) = (10usize, 6usize, 4usize, 3usize);
        let mask = sample_uniform(n, t * l, &mut rng);
        let product = sample_uniform(m, t * l, &mut rng);
        let mut g = targeted_generator(mask.clone(), product.clone(), t, l).unwrap();
        assert_eq!(g.capacity(), t);
        for k in 0..t {
            assert_eq!(g.remaining(), t - k);
            let (b, ab) = g.pull().unwrap();
            assert_eq!(b, mask.columns(k * l, l).unwrap(), "mask block {k}");
            assert_eq!(ab, product.columns(k * l, l).unwrap(), "product block {k}");
        }
        assert!(matches!(g.pull(), Err(Error::GeneratorExhausted)));

        // a single-block generator is just the pair itself
        let mut one = targeted_generator(mask.clone(), product.clone(), 1, t * l).unwrap();
        let (b, ab) = one.pull().unwrap();
        assert_eq!(b, mask);
        assert_eq!(ab, product);

        assert!(targeted_generator(mask.clone(), product.clone(), t, 1).is_err());
        assert!(targeted_generator(mask.clone(), product.clone(), 0, l).is_err());
        let short = sample_uniform(m, t * l - 1, &mut rng);
        assert!(targeted_generator(mask.clone(), short, t, l).is_err());
    }

    #[test]
    fn secrets_have_scheduled_shapes_and_density() {
        let mut rng = SeededRng::from_u64(0x7719);
        let schedule = desk_schedule(256);
        let d = schedule.depth();
        let left = LeftMaskSecret::sample(100, &schedule, &mut rng);
        assert_eq!(left.depth(), d);
        assert_eq!(left.h().shape(), (100, schedule.dim(d)));
        for i in 1..=d {
            assert_eq!(left.s(i).shape(), (100, schedule.dim(i - 1)));
        }
        // level-1 noise occupies about mu_1 of the 100 x 256 block
        let expect = 100.0 * 256.0 * schedule.mu_f64(1);
        let got = left.s(1).nnz() as f64;
        assert!((got - expect).abs() < 6.0 * expect.sqrt() + 8.0, "nnz {got}");

        let right = RightMaskSecret::sample(33, &schedule, &mut rng);
        assert_eq!(right.cols(), 33);
        assert_eq!(right.g().shape(), (schedule.dim(d), 33));
        for i in 1..=d {
            assert_eq!(right.t(i).shape(), (schedule.dim(i - 1), 33));
        }
    }

    #[test]
    fn chain_generation_is_seed_deterministic() {
        let schedule = desk_schedule(64);
        let a = gen_chain(&schedule, &mut SeededRng::from_u64(5));
        let b = gen_chain(&schedule, &mut SeededRng::from_u64(5));
        let c = gen_chain(&schedule, &mut SeededRng::from_u64(6));
        for i in 1..=schedule.depth() {
            assert_eq!(a.level(i), b.level(i));
        }
        assert_ne!(a.level(1), c.level(1));
    }
}
