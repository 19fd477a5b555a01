//! Triplet accumulation and compressed sparse column storage.

use std::io::Write;

use faer::sparse::{SparseColMat, SymbolicSparseColMat, Triplet};

/// Sparse matrix type produced by the assemblers.
pub type CscMatrix = SparseColMat<usize, f64>;

/// Coordinate-format accumulator; duplicate entries are summed on conversion.
#[derive(Debug, Clone, Default)]
pub struct Coo {
    nrows: usize,
    ncols: usize,
    rows: Vec<u32>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Coo {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        assert!(nrows <= u32::MAX as usize && ncols <= u32::MAX as usize);
        Self { nrows, ncols, ..Default::default() }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.rows.push(row as u32);
        self.cols.push(col as u32);
        self.vals.push(val);
    }

    /// Adds the row-major dense block `vals` at global indices `rows x cols`.
    pub fn add_block(&mut self, rows: &[usize], cols: &[usize], vals: &[f64]) {
        debug_assert_eq!(vals.len(), rows.len() * cols.len());
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                self.push(r, c, vals[i * cols.len() + j]);
            }
        }
    }

    /// Appends `other` shifted by `(row_offset, col_offset)` and scaled by `scale`.
    pub fn append(&mut self, other: &Coo, row_offset: usize, col_offset: usize, scale: f64) {
        assert!(row_offset + other.nrows <= self.nrows && col_offset + other.ncols <= self.ncols);
        self.rows.extend(other.rows.iter().map(|&r| r + row_offset as u32));
        self.cols.extend(other.cols.iter().map(|&c| c + col_offset as u32));
        self.vals.extend(other.vals.iter().map(|&v| v * scale));
    }

    /// Appends the transpose of `other` shifted and scaled.
    pub fn append_transpose(&mut self, other: &Coo, row_offset: usize, col_offset: usize, scale: f64) {
        assert!(row_offset + other.ncols <= self.nrows && col_offset + other.nrows <= self.ncols);
        self.rows.extend(other.cols.iter().map(|&c| c + row_offset as u32));
        self.cols.extend(other.rows.iter().map(|&r| r + col_offset as u32));
        self.vals.extend(other.vals.iter().map(|&v| v * scale));
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .zip(&self.cols)
            .zip(&self.vals)
            .map(|((&r, &c), &v)| (r as usize, c as usize, v))
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn to_csc(&self) -> CscMatrix {
        let trips: Vec<Triplet<usize, usize, f64>> = self.entries().map(|(r, c, v)| Triplet::new(r, c, v)).collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &trips).expect("indices within bounds")
    }

    /// Copy with duplicate entries summed, in column-major order.
    pub fn compressed(&self) -> Coo {
        let m = self.to_csc();
        let mut out = Coo::new(self.nrows, self.ncols);
        let (cp, ri) = (m.symbolic().col_ptr(), m.symbolic().row_idx());
        for j in 0..self.ncols {
            for k in cp[j]..cp[j + 1] {
                out.push(ri[k], j, m.val()[k]);
            }
        }
        out
    }

    /// Row-major dense copy; intended for small test problems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, c, v) in self.entries() {
            d[r][c] += v;
        }
        d
    }

    /// `x^T A y` evaluated directly from the triplets.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        self.entries().map(|(r, c, v)| x[r] * v * y[c]).sum()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for (r, c, v) in self.entries() {
            y[r] += v * x[c];
        }
        y
    }
}

/// `y = A x` for a CSC matrix.
pub fn csc_matvec(a: &CscMatrix, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.nrows()];
    let cp = a.symbolic().col_ptr();
    let ri = a.symbolic().row_idx();
    let vals = a.val();
    for j in 0..a.ncols() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for k in cp[j]..cp[j + 1] {
            y[ri[k]] += vals[k] * xj;
        }
    }
    y
}

/// Residual `b - A x` accumulated with error-free transformations, as accurate
/// as a computation in twice the working precision followed by one rounding.
pub fn residual_compensated(a: &CscMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut hi = b.to_vec();
    let mut lo = vec![0.0; b.len()];
    let cp = a.symbolic().col_ptr();
    let ri = a.symbolic().row_idx();
    let vals = a.val();
    for j in 0..a.ncols() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for k in cp[j]..cp[j + 1] {
            let i = ri[k];
            let prod = vals[k] * xj;
            let prod_err = vals[k].mul_add(xj, -prod);
            // two-sum of hi[i] and -prod
            let s = hi[i] - prod;
            let bb = s - hi[i];
            let err = (hi[i] - (s - bb)) + (-prod - bb);
            hi[i] = s;
            lo[i] += err - prod_err;
        }
    }
    hi.iter().zip(&lo).map(|(h, l)| h + l).collect()
}

/// Largest absolute entry of `A - A^T` (dense comparison through a row map).
pub fn asymmetry(a: &CscMatrix) -> f64 {
    let t = a.as_ref().transpose().to_col_major().expect("transpose");
    let mut worst: f64 = 0.0;
    let dense_diff = |m: &CscMatrix, n: &CscMatrix| {
        let mut w: f64 = 0.0;
        for j in 0..m.ncols() {
            let (rm, vm) = (m.symbolic().row_idx_of_col_raw(j), m.val_of_col(j));
            let (rn, vn) = (n.symbolic().row_idx_of_col_raw(j), n.val_of_col(j));
            let (mut p, mut q) = (0, 0);
            while p < rm.len() || q < rn.len() {
                let (a_row, b_row) = (rm.get(p).copied().unwrap_or(usize::MAX), rn.get(q).copied().unwrap_or(usize::MAX));
                if a_row == b_row {
                    w = w.max((vm[p] - vn[q]).abs());
                    p += 1;
                    q += 1;
                } else if a_row < b_row {
                    w = w.max(vm[p].abs());
                    p += 1;
                } else {
                    w = w.max(vn[q].abs());
                    q += 1;
                }
            }
        }
        w
    };
    worst = worst.max(dense_diff(a, &t));
    worst
}

/// Sparsity pattern with the positions of a second triplet set inside it.
///
/// Used to add a varying operator to a fixed one without rebuilding the
/// pattern: `values()` of the fixed part are copied, then each varying
/// triplet is added at its precomputed slot.
#[derive(Debug, Clone)]
pub struct MergedPattern {
    symbolic: SymbolicSparseColMat<usize>,
    base_values: Vec<f64>,
    slots: Vec<usize>,
}

impl MergedPattern {
    pub fn new(base: &Coo, varying: &Coo) -> Self {
        assert_eq!((base.nrows, base.ncols), (varying.nrows, varying.ncols));
        let mut all = base.clone();
        all.append(&Coo { vals: vec![0.0; varying.len()], ..varying.clone() }, 0, 0, 1.0);
        let merged = all.to_csc();
        let symbolic = merged.symbolic().to_owned().expect("pattern copy");
        let base_values = merged.val().to_vec();
        let cp = symbolic.col_ptr();
        let ri = symbolic.row_idx();
        let slots = varying
            .entries()
            .map(|(r, c, _)| {
                let col = &ri[cp[c]..cp[c + 1]];
                cp[c] + col.binary_search(&r).expect("entry present in merged pattern")
            })
            .collect();
        Self { symbolic, base_values, slots }
    }

    pub fn symbolic(&self) -> &SymbolicSparseColMat<usize> {
        &self.symbolic
    }

    /// The fixed part alone, on the merged pattern.
    pub fn base(&self) -> CscMatrix {
        SparseColMat::new(self.symbolic.clone(), self.base_values.clone())
    }

    /// Fixed part plus `varying`, whose triplets must come in the same order
    /// as the ones used to build the pattern.
    pub fn combine(&self, varying: &Coo) -> CscMatrix {
        assert_eq!(varying.len(), self.slots.len(), "varying operator changed structure");
        let mut vals = self.base_values.clone();
        for (&slot, &v) in self.slots.iter().zip(varying.values()) {
            vals[slot] += v;
        }
        SparseColMat::new(self.symbolic.clone(), vals)
    }
}

/// Writes a matrix in MatrixMarket coordinate format.
pub fn write_matrix_market(a: &CscMatrix, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(out, "{} {} {}", a.nrows(), a.ncols(), a.compute_nnz())?;
    let cp = a.symbolic().col_ptr();
    let ri = a.symbolic().row_idx();
    for j in 0..a.ncols() {
        for k in cp[j]..cp[j + 1] {
            writeln!(out, "{} {} {:.17e}", ri[k] + 1, j + 1, a.val()[k])?;
        }
    }
    Ok(())
}
