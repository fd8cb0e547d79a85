//! Prefactorized Poisson solve from face Jacobians to vertex positions.
//!
//! `L V = ∇ᵀ𝒜 J` has a one-dimensional null space (translations) on a
//! connected mesh. One vertex is pinned, its row and column are eliminated,
//! and the remaining SPD block is Cholesky-factorized once. The map
//! `J ↦ V` is affine, so the adjoint reuses the same factor.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::diffgeo::{DiffGeoError, DiffOperators, JacobianField};
use crate::mesh::{TriMesh, Vec3};
use crate::sparse::{CscMatrix, EnvelopeCholesky, SparseError};

#[derive(Debug, Error)]
pub enum PoissonError {
    #[error("mesh has {components} connected components; the Poisson solve needs exactly one")]
    Disconnected { components: usize },
    #[error("pin index {index} out of range for {count} vertices")]
    PinOutOfRange { index: usize, count: usize },
    #[error("factorization failed: {0}")]
    Factorization(#[from] SparseError),
    #[error(transparent)]
    Dimension(#[from] DiffGeoError),
}

#[derive(Debug)]
pub struct PoissonSystem {
    ops: Arc<DiffOperators>,
    pin: usize,
    pin_position: Vec3,
    /// `∇ᵀ𝒜`, `V × 3F`
    rhs_operator: CscMatrix,
    /// column `pin` of `L` without the diagonal, reduced indices
    pin_coupling: Vec<(usize, f64)>,
    factor: EnvelopeCholesky,
    factorizations: AtomicUsize,
}

impl PoissonSystem {
    pub fn build(mesh: &TriMesh, pin: usize, pin_position: Vec3) -> Result<Self, PoissonError> {
        Self::with_operators(mesh, Arc::new(DiffOperators::new(mesh)), pin, pin_position)
    }

    /// Pins vertex 0 at its template position.
    pub fn for_template(mesh: &TriMesh) -> Result<Self, PoissonError> {
        Self::build(mesh, 0, mesh.vertices()[0])
    }

    pub fn with_operators(
        mesh: &TriMesh,
        ops: Arc<DiffOperators>,
        pin: usize,
        pin_position: Vec3,
    ) -> Result<Self, PoissonError> {
        let components = mesh.component_count();
        if components != 1 {
            return Err(PoissonError::Disconnected { components });
        }
        let n = mesh.vertex_count();
        if pin >= n {
            return Err(PoissonError::PinOutOfRange {
                index: pin,
                count: n,
            });
        }
        let reduce = |i: usize| if i > pin { i - 1 } else { i };
        let pin_coupling = ops
            .laplacian
            .column(pin)
            .filter(|&(r, _)| r != pin)
            .map(|(r, v)| (reduce(r), v))
            .collect();
        let pinned = ops.laplacian.without_row_col(pin);
        let factor = EnvelopeCholesky::factorize(&pinned)?;

        let grad = &ops.gradient.matrix;
        let mut t = Vec::with_capacity(grad.nnz());
        for c in 0..grad.cols() {
            for (r, v) in grad.column(c) {
                t.push((c, r, v * ops.mass.diagonal[r]));
            }
        }
        let rhs_operator = CscMatrix::from_triplets(grad.cols(), grad.rows(), t);
        Ok(Self {
            ops,
            pin,
            pin_position,
            rhs_operator,
            pin_coupling,
            factor,
            factorizations: AtomicUsize::new(1),
        })
    }

    pub fn operators(&self) -> &Arc<DiffOperators> {
        &self.ops
    }

    pub fn pin(&self) -> (usize, Vec3) {
        (self.pin, self.pin_position)
    }

    pub fn vertex_count(&self) -> usize {
        self.factor.dim() + 1
    }

    pub fn face_count(&self) -> usize {
        self.ops.gradient.face_count()
    }

    /// How many times the pinned Laplacian has been factorized.
    pub fn factorization_count(&self) -> usize {
        self.factorizations.load(Ordering::Relaxed)
    }

    /// Same system, different pinned position. Reuses the factorization.
    pub fn with_pin_position(&self, pin_position: Vec3) -> Self {
        Self {
            ops: Arc::clone(&self.ops),
            pin: self.pin,
            pin_position,
            rhs_operator: self.rhs_operator.clone(),
            pin_coupling: self.pin_coupling.clone(),
            factor: self.factor.clone(),
            factorizations: AtomicUsize::new(self.factorization_count()),
        }
    }

    /// Solves the pinned system for a row-major `V × 3` right-hand side and a
    /// pinned position; returns row-major `V × 3`.
    fn solve_rhs(&self, rhs: &[f64], pin_position: Vec3) -> Vec<f64> {
        let n = self.vertex_count();
        let mut reduced: Vec<f64> = (0..n)
            .filter(|&i| i != self.pin)
            .flat_map(|i| rhs[3 * i..3 * i + 3].iter().copied())
            .collect();
        for &(r, l) in &self.pin_coupling {
            for k in 0..3 {
                reduced[3 * r + k] -= l * pin_position[k];
            }
        }
        let x = self
            .factor
            .solve_dense(&reduced, 3)
            .expect("sized by construction");
        self.reinsert(&x, pin_position)
    }

    fn reinsert(&self, reduced: &[f64], pin_value: Vec3) -> Vec<f64> {
        let n = self.vertex_count();
        let mut out = Vec::with_capacity(3 * n);
        out.extend_from_slice(&reduced[..3 * self.pin]);
        out.extend_from_slice(&pin_value);
        out.extend_from_slice(&reduced[3 * self.pin..]);
        out
    }

    fn rhs(&self, jac_flat: &[f64]) -> Result<Vec<f64>, PoissonError> {
        let faces = self.face_count();
        if jac_flat.len() != 9 * faces {
            return Err(DiffGeoError::FaceCount {
                expected: faces,
                actual: jac_flat.len() / 9,
            }
            .into());
        }
        // (3F × 3) block with row 3f+c, column r = J_f[r][c]
        let mut block = vec![0.0; 9 * faces];
        for f in 0..faces {
            for r in 0..3 {
                for c in 0..3 {
                    block[(3 * f + c) * 3 + r] = jac_flat[9 * f + 3 * r + c];
                }
            }
        }
        Ok(self.rhs_operator.mul_dense(&block, 3).expect("sized above"))
    }

    /// Solves for vertex positions from a flat `F × 9` Jacobian field.
    pub fn solve_flat(&self, jac_flat: &[f64]) -> Result<Vec<f64>, PoissonError> {
        let rhs = self.rhs(jac_flat)?;
        Ok(self.solve_rhs(&rhs, self.pin_position))
    }

    /// The linear part of the solve (pinned vertex held at the origin).
    pub fn solve_linear_flat(&self, jac_flat: &[f64]) -> Result<Vec<f64>, PoissonError> {
        let rhs = self.rhs(jac_flat)?;
        Ok(self.solve_rhs(&rhs, [0.0; 3]))
    }

    pub fn solve(&self, jac: &JacobianField) -> Result<Vec<Vec3>, PoissonError> {
        Ok(to_points(&self.solve_flat(&jac.to_flat())?))
    }

    /// Gradient of a scalar loss with respect to the flat `F × 9` Jacobian,
    /// given its gradient with respect to the solved positions (row-major
    /// `V × 3`).
    pub fn solve_adjoint_flat(&self, grad_vertices: &[f64]) -> Result<Vec<f64>, PoissonError> {
        let n = self.vertex_count();
        if grad_vertices.len() != 3 * n {
            return Err(DiffGeoError::VertexCount {
                expected: n,
                actual: grad_vertices.len() / 3,
            }
            .into());
        }
        let reduced: Vec<f64> = (0..n)
            .filter(|&i| i != self.pin)
            .flat_map(|i| grad_vertices[3 * i..3 * i + 3].iter().copied())
            .collect();
        let x = self
            .factor
            .solve_dense(&reduced, 3)
            .expect("sized by construction");
        let y = self.reinsert(&x, [0.0; 3]);
        let block = self
            .rhs_operator
            .tmul_dense(&y, 3)
            .expect("sized by construction");
        let faces = self.face_count();
        let mut out = vec![0.0; 9 * faces];
        for f in 0..faces {
            for r in 0..3 {
                for c in 0..3 {
                    out[9 * f + 3 * r + c] = block[(3 * f + c) * 3 + r];
                }
            }
        }
        Ok(out)
    }

    pub fn solve_adjoint(&self, grad_vertices: &[Vec3]) -> Result<JacobianField, PoissonError> {
        let flat: Vec<f64> = grad_vertices.iter().flatten().copied().collect();
        Ok(JacobianField::from_flat(&self.solve_adjoint_flat(&flat)?))
    }

    /// Residual check of the factorization against the pinned Laplacian.
    pub fn factor_residual(&self, b: &[f64]) -> Result<f64, PoissonError> {
        let pinned = self.ops.laplacian.without_row_col(self.pin);
        let mut x = b.to_vec();
        self.factor.solve_in_place(&mut x)?;
        let r = pinned.mul_dense(&x, 1)?;
        let num: f64 = r
            .iter()
            .zip(b)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(num / den.max(f64::MIN_POSITIVE))
    }
}

pub fn to_points(flat: &[f64]) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub fn to_flat(points: &[Vec3]) -> Vec<f64> {
    points.iter().flatten().copied().collect()
}
