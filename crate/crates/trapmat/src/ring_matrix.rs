//! Dense and sparse matrix kernels over the ring of 32-bit words.
//!
//! All arithmetic wraps mod 2^32: overflow is the ring reduction, never an
//! error. Because wrapping addition is associative and commutative, every
//! summation order yields the same bits, which is what lets the blocked
//! multiply promise bit-identical results to the schoolbook loop.
//!
//! Multiplication kernels charge their work to an [`OpCounter`] so protocol
//! code can certify which party paid for which product. Elementwise helpers
//! (add, sub, transpose) are not charged; multiplication counts drive every
//! cost certification.

use crate::error::Error;
use std::fmt;
use std::sync::OnceLock;

/// Ring element. Products and sums wrap mod 2^32.
pub type RingWord = u32;

/// Bits per ring word; soundness and schedule arithmetic key off this.
pub const RING_BITS: u32 = 32;

/// Running tally of ring multiplications and additions.
///
/// Monotone within a counting scope; reset only at scope boundaries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub ring_muls: u64,
    pub ring_adds: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count_muls(&mut self, n: u64) {
        self.ring_muls += n;
    }

    pub fn count_adds(&mut self, n: u64) {
        self.ring_adds += n;
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// Row-major dense matrix. Zero rows or columns are legal; `data` length is
/// always exactly `rows * cols`.
#[derive(Clone, PartialEq, Eq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<RingWord>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseMatrix({}x{})", self.rows, self.cols)
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<RingWord>) -> Result<Self, Error> {
        if data.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "{}x{} matrix needs {} words, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> RingWord {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: RingWord) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[RingWord] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [RingWord] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[RingWord] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [RingWord] {
        &mut self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&w| w == 0)
    }

    /// Copy of the column block `[start, start + width)`.
    pub fn columns(&self, start: usize, width: usize) -> Result<DenseMatrix, Error> {
        if start + width > self.cols {
            return Err(Error::Parameter(format!(
                "column block [{start}, {}) exceeds {} columns",
                start + width,
                self.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, width);
        for r in 0..self.rows {
            let src = &self.row(r)[start..start + width];
            out.row_mut(r).copy_from_slice(src);
        }
        Ok(out)
    }
}

/// One explicit entry of a sparse matrix.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SparseEntry {
    pub row: u32,
    pub col: u32,
    pub value: RingWord,
}

/// Coordinate-form sparse matrix in canonical shape: entries sorted by
/// (row, col), no duplicates, no explicit zeros.
#[derive(Clone, PartialEq, Eq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<SparseEntry>,
}

impl fmt::Debug for SparseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "SparseMatrix({}x{}, nnz {})",
            self.rows,
            self.cols,
            self.entries.len()
        )
    }
}

impl SparseMatrix {
    /// Canonicalize and validate: zero values are dropped, entries are
    /// sorted, out-of-range indices and duplicates are errors.
    pub fn from_entries(
        rows: usize,
        cols: usize,
        mut entries: Vec<SparseEntry>,
    ) -> Result<Self, Error> {
        entries.retain(|e| e.value != 0);
        for e in &entries {
            if (e.row as usize) >= rows || (e.col as usize) >= cols {
                return Err(Error::InvalidMatrix(format!(
                    "sparse entry ({}, {}) outside {}x{}",
                    e.row, e.col, rows, cols
                )));
            }
        }
        entries.sort_unstable_by_key(|e| (e.row, e.col));
        for w in entries.windows(2) {
            if w[0].row == w[1].row && w[0].col == w[1].col {
                return Err(Error::InvalidMatrix(format!(
                    "duplicate sparse entry at ({}, {})",
                    w[0].row, w[0].col
                )));
            }
        }
        Ok(SparseMatrix {
            rows,
            cols,
            entries,
        })
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        SparseMatrix {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[SparseEntry] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut Vec<SparseEntry> {
        &mut self.entries
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for e in &self.entries {
            out.set(e.row as usize, e.col as usize, e.value);
        }
        out
    }
}

fn shape_err(op: &'static str, a: &DenseMatrix, b: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b,
    }
}

/// Tile edge for the blocked multiply. Picked once per process by timing a
/// small probe multiply; results never depend on the choice, only speed does.
fn tile_size() -> usize {
    static TILE: OnceLock<usize> = OnceLock::new();
    *TILE.get_or_init(|| {
        const PROBE: usize = 192;
        let mut a = DenseMatrix::zeros(PROBE, PROBE);
        let mut b = DenseMatrix::zeros(PROBE, PROBE);
        for (i, w) in a.data_mut().iter_mut().enumerate() {
            *w = (i as u32).wrapping_mul(0x9e3779b9);
        }
        for (i, w) in b.data_mut().iter_mut().enumerate() {
            *w = (i as u32).wrapping_mul(0x85ebca77).wrapping_add(1);
        }
        let mut best = (f64::INFINITY, 128);
        for &cand in &[32usize, 64, 128, 256] {
            let start = std::time::Instant::now();
            for _ in 0..2 {
                let c = mul_blocked(&a, &b, cand);
                std::hint::black_box(&c);
            }
            let t = start.elapsed().as_secs_f64();
            if t < best.0 {
                best = (t, cand);
            }
        }
        best.1
    })
}

fn mul_blocked(a: &DenseMatrix, b: &DenseMatrix, tile: usize) -> DenseMatrix {
    let (m, n, l) = (a.rows, a.cols, b.cols);
    let mut c = DenseMatrix::zeros(m, l);
    if m == 0 || n == 0 || l == 0 {
        return c;
    }
    // Per output entry the k order is ascending exactly as in the schoolbook
    // loop, so the result is bit-identical by construction.
    for ib in (0..m).step_by(tile) {
        let ie = (ib + tile).min(m);
        for jb in (0..l).step_by(tile) {
            let je = (jb + tile).min(l);
            for kb in (0..n).step_by(tile) {
                let ke = (kb + tile).min(n);
                for i in ib..ie {
                    let arow = &a.data[i * n..(i + 1) * n];
                    let crow = &mut c.data[i * l + jb..i * l + je];
                    for k in kb..ke {
                        let aik = arow[k];
                        let brow = &b.data[k * l + jb..k * l + je];
                        for (cv, &bv) in crow.iter_mut().zip(brow) {
                            *cv = cv.wrapping_add(aik.wrapping_mul(bv));
                        }
                    }
                }
            }
        }
    }
    c
}

/// Dense product `A * B`, cache-blocked, bit-identical to the schoolbook
/// triple loop. Charges `m * n * l` multiplications (and as many additions).
pub fn mat_mul(a: &DenseMatrix, b: &DenseMatrix, counter: &mut OpCounter) -> Result<DenseMatrix, Error> {
    if a.cols != b.rows {
        return Err(shape_err("mat_mul", a, b.shape()));
    }
    let work = (a.rows as u64) * (a.cols as u64) * (b.cols as u64);
    counter.count_muls(work);
    counter.count_adds(work);
    Ok(mul_blocked(a, b, tile_size()))
}

pub fn mat_add(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, Error> {
    if a.shape() != b.shape() {
        return Err(shape_err("mat_add", a, b.shape()));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x.wrapping_add(y))
        .collect();
    DenseMatrix::from_vec(a.rows, a.cols, data)
}

pub fn mat_sub(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, Error> {
    if a.shape() != b.shape() {
        return Err(shape_err("mat_sub", a, b.shape()));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x.wrapping_sub(y))
        .collect();
    DenseMatrix::from_vec(a.rows, a.cols, data)
}

pub fn transpose(a: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            out.data[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    out
}

/// `A + S` with `S` sparse; consumes and returns the dense operand so the
/// sum is formed in place.
pub fn add_sparse_into(mut a: DenseMatrix, s: &SparseMatrix) -> Result<DenseMatrix, Error> {
    if a.shape() != s.shape() {
        return Err(shape_err("add_sparse_into", &a, s.shape()));
    }
    let cols = a.cols;
    for e in s.entries() {
        let idx = e.row as usize * cols + e.col as usize;
        a.data[idx] = a.data[idx].wrapping_add(e.value);
    }
    Ok(a)
}

/// `S * B` with `S` sparse. Charges `nnz(S) * B.cols()` multiplications.
pub fn sparse_dense_mul(
    s: &SparseMatrix,
    b: &DenseMatrix,
    counter: &mut OpCounter,
) -> Result<DenseMatrix, Error> {
    if s.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "sparse_dense_mul",
            left: s.shape(),
            right: b.shape(),
        });
    }
    let l = b.cols;
    let work = (s.nnz() as u64) * (l as u64);
    counter.count_muls(work);
    counter.count_adds(work);
    let mut out = DenseMatrix::zeros(s.rows, l);
    for e in s.entries() {
        let brow = b.row(e.col as usize);
        let orow = out.row_mut(e.row as usize);
        for (ov, &bv) in orow.iter_mut().zip(brow) {
            *ov = ov.wrapping_add(e.value.wrapping_mul(bv));
        }
    }
    Ok(out)
}

/// `A * S` with `S` sparse. Charges `nnz(S) * A.rows()` multiplications.
pub fn dense_sparse_mul(
    a: &DenseMatrix,
    s: &SparseMatrix,
    counter: &mut OpCounter,
) -> Result<DenseMatrix, Error> {
    if a.cols != s.rows {
        return Err(Error::ShapeMismatch {
            op: "dense_sparse_mul",
            left: a.shape(),
            right: s.shape(),
        });
    }
    let work = (s.nnz() as u64) * (a.rows as u64);
    counter.count_muls(work);
    counter.count_adds(work);
    let mut out = DenseMatrix::zeros(a.rows, s.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * s.cols..(i + 1) * s.cols];
        for e in s.entries() {
            let cell = &mut orow[e.col as usize];
            *cell = cell.wrapping_add(arow[e.row as usize].wrapping_mul(e.value));
        }
    }
    Ok(out)
}
