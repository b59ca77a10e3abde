//! Sparse real linear systems for the Newton iterations.
//!
//! Matrices are assembled from triplets (duplicates summed) into compressed
//! column form. Factorization is a sparse LU with partial pivoting and a
//! COLAMD fill-reducing column ordering (faer). The symbolic analysis is kept
//! while the sparsity pattern is unchanged, so Newton loops pay for ordering
//! once.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::lu::{factorize_symbolic_lu, LuRef, NumericLu, SymbolicLu};
use faer::sparse::linalg::LuError;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, MatMut, Par};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("triplet ({row}, {col}) outside a {dim}x{dim} system")]
    IndexOutOfRange { row: usize, col: usize, dim: usize },
    #[error("system dimension must be positive")]
    Empty,
    #[error("singular pivot at row {row}")]
    SingularPivot { row: usize },
    #[error("right-hand side has length {got}, expected {dim}")]
    RhsLength { got: usize, dim: usize },
    #[error("factorization failed: {0}")]
    Backend(String),
}

/// A square sparse system together with its cached factorization.
pub struct SparseSystem {
    dim: usize,
    matrix: SparseColMat<usize, f64>,
    fingerprint: u64,
    symbolic: Option<(u64, Arc<SymbolicLu<usize>>)>,
    lu: Option<NumericLu<usize, f64>>,
    refinement_steps: usize,
}

fn pattern_fingerprint(m: &SparseColMat<usize, f64>) -> u64 {
    let mut h = DefaultHasher::new();
    let s = m.symbolic();
    s.nrows().hash(&mut h);
    s.col_ptr().hash(&mut h);
    s.row_idx().hash(&mut h);
    h.finish()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl SparseSystem {
    pub fn assemble(dim: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, LinalgError> {
        let matrix = Self::compress(dim, triplets)?;
        let fingerprint = pattern_fingerprint(&matrix);
        Ok(Self {
            dim,
            matrix,
            fingerprint,
            symbolic: None,
            lu: None,
            refinement_steps: 0,
        })
    }

    fn compress(
        dim: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<SparseColMat<usize, f64>, LinalgError> {
        if dim == 0 {
            return Err(LinalgError::Empty);
        }
        let mut entries = Vec::with_capacity(triplets.len());
        for &(row, col, val) in triplets {
            if row >= dim || col >= dim {
                return Err(LinalgError::IndexOutOfRange { row, col, dim });
            }
            entries.push(Triplet::new(row, col, val));
        }
        SparseColMat::try_new_from_triplets(dim, dim, &entries)
            .map_err(|e| LinalgError::Backend(format!("{e:?}")))
    }

    /// Replace the numeric values. The symbolic factorization survives when
    /// the new triplets produce the same compressed pattern.
    pub fn update(&mut self, triplets: &[(usize, usize, f64)]) -> Result<(), LinalgError> {
        self.matrix = Self::compress(self.dim, triplets)?;
        self.fingerprint = pattern_fingerprint(&self.matrix);
        self.lu = None;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.matrix.compute_nnz()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Dense copy, row-major. Meant for tests and small systems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.dim]; self.dim];
        for (row, col, v) in self.entries() {
            out[row][col] += v;
        }
        out
    }

    /// Compressed entries in column-major order.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        let s = self.matrix.symbolic();
        let vals = self.matrix.val();
        let mut out = Vec::with_capacity(vals.len());
        for col in 0..self.dim {
            for p in s.col_ptr()[col]..s.col_ptr()[col + 1] {
                out.push((s.row_idx()[p], col, vals[p]));
            }
        }
        out
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let s = self.matrix.symbolic();
        let vals = self.matrix.val();
        let mut y = vec![0.0; self.dim];
        for col in 0..self.dim {
            let xc = x[col];
            if xc == 0.0 {
                continue;
            }
            for p in s.col_ptr()[col]..s.col_ptr()[col + 1] {
                y[s.row_idx()[p]] += vals[p] * xc;
            }
        }
        y
    }

    /// ‖A‖∞ (max absolute row sum).
    pub fn inf_norm(&self) -> f64 {
        let mut rows = vec![0.0; self.dim];
        for (r, _, v) in self.entries() {
            rows[r] += v.abs();
        }
        inf_norm(&rows)
    }

    /// Fill-reducing column ordering of the current symbolic analysis.
    pub fn column_ordering(&mut self) -> Result<Vec<usize>, LinalgError> {
        let sym = self.symbolic()?;
        Ok(sym.col_perm().arrays().0.to_vec())
    }

    /// Number of iterative-refinement corrections applied by the last solve.
    pub fn last_refinement_steps(&self) -> usize {
        self.refinement_steps
    }

    fn check_structure(&self) -> Result<(), LinalgError> {
        let s = self.matrix.symbolic();
        let vals = self.matrix.val();
        let mut row_live = vec![false; self.dim];
        for col in 0..self.dim {
            let mut col_live = false;
            for p in s.col_ptr()[col]..s.col_ptr()[col + 1] {
                if vals[p] != 0.0 {
                    row_live[s.row_idx()[p]] = true;
                    col_live = true;
                }
            }
            if !col_live {
                return Err(LinalgError::SingularPivot { row: col });
            }
        }
        match row_live.iter().position(|&live| !live) {
            Some(row) => Err(LinalgError::SingularPivot { row }),
            None => Ok(()),
        }
    }

    fn symbolic(&mut self) -> Result<Arc<SymbolicLu<usize>>, LinalgError> {
        if let Some((fp, sym)) = &self.symbolic {
            if *fp == self.fingerprint {
                return Ok(sym.clone());
            }
        }
        let sym = Arc::new(
            factorize_symbolic_lu(self.matrix.symbolic(), Default::default())
                .map_err(|e| LinalgError::Backend(format!("{e:?}")))?,
        );
        self.symbolic = Some((self.fingerprint, sym.clone()));
        Ok(sym)
    }

    fn factor(&mut self) -> Result<(), LinalgError> {
        if self.lu.is_some() {
            return Ok(());
        }
        self.check_structure()?;
        let sym = self.symbolic()?;
        let mut numeric = NumericLu::new();
        let mut buf =
            MemBuffer::new(sym.factorize_numeric_lu_scratch::<f64>(Par::Seq, Default::default()));
        sym.factorize_numeric_lu(
            &mut numeric,
            self.matrix.as_ref(),
            Par::Seq,
            MemStack::new(&mut buf),
            Default::default(),
        )
        .map_err(|e| match e {
            LuError::SymbolicSingular { index } => LinalgError::SingularPivot { row: index },
            LuError::Generic(e) => LinalgError::Backend(format!("{e:?}")),
        })?;
        self.lu = Some(numeric);
        Ok(())
    }

    fn raw_solve(&self, rhs: &[f64]) -> Vec<f64> {
        let numeric = self.lu.as_ref().expect("factor() before raw_solve()");
        let (_, sym) = self.symbolic.as_ref().expect("symbolic analysis present");
        let mut x = rhs.to_vec();
        let view = MatMut::from_column_major_slice_mut(&mut x, self.dim, 1);
        let mut buf = MemBuffer::new(sym.solve_in_place_scratch::<f64>(1, Par::Seq));
        LuRef::new_unchecked(sym, numeric).solve_in_place_with_conj(
            Conj::No,
            view,
            Par::Seq,
            MemStack::new(&mut buf),
        );
        x
    }

    /// Solve `A x = rhs`, applying up to two refinement steps while the
    /// residual exceeds `1e-9·‖rhs‖∞`.
    pub fn factor_and_solve(&mut self, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if rhs.len() != self.dim {
            return Err(LinalgError::RhsLength {
                got: rhs.len(),
                dim: self.dim,
            });
        }
        self.factor()?;
        let mut x = self.raw_solve(rhs);
        if let Some(row) = x.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::SingularPivot { row });
        }
        self.refinement_steps = 0;
        let target = 1e-9 * inf_norm(rhs);
        for _ in 0..2 {
            let ax = self.mul_vec(&x);
            let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
            if inf_norm(&r) <= target {
                break;
            }
            let dx = self.raw_solve(&r);
            if dx.iter().any(|v| !v.is_finite()) {
                break;
            }
            for (xi, d) in x.iter_mut().zip(&dx) {
                *xi += d;
            }
            self.refinement_steps += 1;
        }
        Ok(x)
    }
}
