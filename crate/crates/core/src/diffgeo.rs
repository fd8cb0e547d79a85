//! Per-face gradient, cotangent Laplacian and face mass matrix, plus
//! Jacobian-field extraction.
//!
//! The three operators satisfy `L = ∇ᵀ 𝒜 ∇` exactly (up to rounding), with
//! `L` positive semi-definite.

use thiserror::Error;

use crate::mesh::{cross, dot, norm, sub, TriMesh, Vec3};
use crate::sparse::CscMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum DiffGeoError {
    #[error("expected {expected} vertex positions, got {actual}")]
    VertexCount { expected: usize, actual: usize },
    #[error("expected {expected} face Jacobians, got {actual}")]
    FaceCount { expected: usize, actual: usize },
}

pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// One 3×3 matrix per face. Row `r` of `J_f` is the spatial gradient of
/// coordinate channel `r` over face `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField(pub Vec<Mat3>);

impl JacobianField {
    pub fn identity(face_count: usize) -> Self {
        Self(vec![IDENTITY3; face_count])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Row-major `F × 9` flattening (`J_f[r][c]` at `9f + 3r + c`).
    pub fn to_flat(&self) -> Vec<f64> {
        self.0
            .iter()
            .flat_map(|m| m.iter().flatten().copied())
            .collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self(
            flat.chunks_exact(9)
                .map(|c| [[c[0], c[1], c[2]], [c[3], c[4], c[5]], [c[6], c[7], c[8]]])
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().flatten().all(|x| x.is_finite())
    }
}

/// Sparse `(3F) × V` operator; row `3f + c` is the `c`-th spatial component of
/// the gradient over face `f`.
#[derive(Debug, Clone)]
pub struct FaceGradientOperator {
    pub matrix: CscMatrix,
    faces: usize,
    vertices: usize,
}

impl FaceGradientOperator {
    pub fn face_count(&self) -> usize {
        self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices
    }

    /// Gradient of a per-vertex scalar, one 3-vector per face.
    pub fn apply_scalar(&self, phi: &[f64]) -> Result<Vec<Vec3>, DiffGeoError> {
        if phi.len() != self.vertices {
            return Err(DiffGeoError::VertexCount {
                expected: self.vertices,
                actual: phi.len(),
            });
        }
        let g = self.matrix.mul_dense(phi, 1).expect("checked length");
        Ok(g.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }
}

/// Per-face unit normal, area and hat-function gradients of the three corners.
pub(crate) fn face_frame(a: Vec3, b: Vec3, c: Vec3) -> (Vec3, f64, [Vec3; 3]) {
    let n2 = cross(sub(b, a), sub(c, a));
    let twice_area = norm(n2);
    let n = n2.map(|x| x / twice_area);
    let opposite = [sub(c, b), sub(a, c), sub(b, a)];
    let grads = opposite.map(|e| cross(n, e).map(|x| x / twice_area));
    (n, 0.5 * twice_area, grads)
}

pub fn build_gradient(mesh: &TriMesh) -> FaceGradientOperator {
    let v = mesh.vertices();
    let mut t = Vec::with_capacity(9 * mesh.face_count());
    for (f, face) in mesh.faces().iter().enumerate() {
        let (_, _, grads) = face_frame(v[face[0]], v[face[1]], v[face[2]]);
        for (corner, g) in face.iter().zip(grads) {
            for c in 0..3 {
                t.push((3 * f + c, *corner, g[c]));
            }
        }
    }
    FaceGradientOperator {
        matrix: CscMatrix::from_triplets(3 * mesh.face_count(), mesh.vertex_count(), t),
        faces: mesh.face_count(),
        vertices: mesh.vertex_count(),
    }
}

/// Cotangent Laplacian, positive semi-definite convention:
/// `L_ij = -½ Σ cot(opposite angle)` over the (one or two) faces sharing edge
/// `ij`, `L_ii = -Σ_j L_ij`.
pub fn build_cotan_laplacian(mesh: &TriMesh) -> CscMatrix {
    let v = mesh.vertices();
    let mut t = Vec::with_capacity(12 * mesh.face_count());
    for face in mesh.faces() {
        for k in 0..3 {
            let (o, i, j) = (face[k], face[(k + 1) % 3], face[(k + 2) % 3]);
            let (u, w) = (sub(v[i], v[o]), sub(v[j], v[o]));
            let cot = dot(u, w) / norm(cross(u, w));
            let half = 0.5 * cot;
            t.push((i, j, -half));
            t.push((j, i, -half));
            t.push((i, i, half));
            t.push((j, j, half));
        }
    }
    CscMatrix::from_triplets(mesh.vertex_count(), mesh.vertex_count(), t)
}

/// Diagonal `(3F) × (3F)` mass matrix, stored as its diagonal: each face's
/// area three times in face order.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMatrix {
    pub diagonal: Vec<f64>,
}

impl MassMatrix {
    pub fn face_areas(&self) -> impl Iterator<Item = f64> + '_ {
        self.diagonal.iter().step_by(3).copied()
    }

    pub fn total_area(&self) -> f64 {
        self.face_areas().sum()
    }
}

pub fn build_mass(mesh: &TriMesh) -> MassMatrix {
    let diagonal = (0..mesh.face_count())
        .flat_map(|f| std::iter::repeat_n(mesh.face_area(f), 3))
        .collect();
    MassMatrix { diagonal }
}

/// `J_f = ∇_f X` for per-vertex positions `X`.
pub fn jacobian_from_vertices(
    op: &FaceGradientOperator,
    positions: &[Vec3],
) -> Result<JacobianField, DiffGeoError> {
    if positions.len() != op.vertices {
        return Err(DiffGeoError::VertexCount {
            expected: op.vertices,
            actual: positions.len(),
        });
    }
    let flat: Vec<f64> = positions.iter().flatten().copied().collect();
    // (3F × 3): row 3f+c, column r = ∂_c x_r
    let g = op.matrix.mul_dense(&flat, 3).expect("checked length");
    Ok(JacobianField(
        g.chunks_exact(9)
            .map(|b| [[b[0], b[3], b[6]], [b[1], b[4], b[7]], [b[2], b[5], b[8]]])
            .collect(),
    ))
}

/// All differential operators of one mesh.
#[derive(Debug, Clone)]
pub struct DiffOperators {
    pub gradient: FaceGradientOperator,
    pub mass: MassMatrix,
    pub laplacian: CscMatrix,
}

impl DiffOperators {
    pub fn new(mesh: &TriMesh) -> Self {
        Self {
            gradient: build_gradient(mesh),
            mass: build_mass(mesh),
            laplacian: build_cotan_laplacian(mesh),
        }
    }

    /// `∇ᵀ 𝒜 J` as a row-major `V × 3` block.
    pub fn divergence(&self, jac: &JacobianField) -> Result<Vec<f64>, DiffGeoError> {
        let faces = self.gradient.face_count();
        if jac.len() != faces {
            return Err(DiffGeoError::FaceCount {
                expected: faces,
                actual: jac.len(),
            });
        }
        // (3F × 3) block with row 3f+c, column r = J_f[r][c], weighted by area
        let mut weighted = vec![0.0; 9 * faces];
        for (f, m) in jac.0.iter().enumerate() {
            let a = self.mass.diagonal[3 * f];
            for c in 0..3 {
                for r in 0..3 {
                    weighted[(3 * f + c) * 3 + r] = a * m[r][c];
                }
            }
        }
        Ok(self
            .gradient
            .matrix
            .tmul_dense(&weighted, 3)
            .expect("sized above"))
    }

    /// Adjoint of [`DiffOperators::divergence`]: `𝒜 ∇ Y` for a row-major
    /// `V × 3` block, returned as a Jacobian field.
    pub fn divergence_adjoint(&self, y: &[f64]) -> Result<JacobianField, DiffGeoError> {
        let verts = self.gradient.vertex_count();
        if y.len() != 3 * verts {
            return Err(DiffGeoError::VertexCount {
                expected: verts,
                actual: y.len() / 3,
            });
        }
        let g = self
            .gradient
            .matrix
            .mul_dense(y, 3)
            .expect("checked length");
        Ok(JacobianField(
            g.chunks_exact(9)
                .enumerate()
                .map(|(f, b)| {
                    let a = self.mass.diagonal[3 * f];
                    [
                        [a * b[0], a * b[3], a * b[6]],
                        [a * b[1], a * b[4], a * b[7]],
                        [a * b[2], a * b[5], a * b[8]],
                    ]
                })
                .collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosahedron;

    fn right_triangle() -> TriMesh {
        TriMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    fn unit_square() -> TriMesh {
        TriMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn hat_and_linear_gradients() {
        let g = build_gradient(&right_triangle());
        assert_eq!(
            g.apply_scalar(&[0.0, 1.0, 0.0]).unwrap(),
            vec![[1.0, 0.0, 0.0]]
        );
        assert_eq!(
            g.apply_scalar(&[0.0, 0.0, 1.0]).unwrap(),
            vec![[0.0, 1.0, 0.0]]
        );
        let c = g.apply_scalar(&[5.0, 5.0, 5.0]).unwrap()[0];
        assert!(c.iter().all(|x| x.abs() < 1e-12));
        // φ = 2x + 3y sampled at the corners
        let lin = g.apply_scalar(&[0.0, 2.0, 3.0]).unwrap()[0];
        assert!(
            (lin[0] - 2.0).abs() < 1e-14 && (lin[1] - 3.0).abs() < 1e-14 && lin[2].abs() < 1e-14
        );
        assert!(g.apply_scalar(&[1.0]).is_err());
    }

    #[test]
    fn square_cotangent_weights() {
        let l = build_cotan_laplacian(&unit_square());
        // diagonal edge 0-2: both opposite angles are 90° -> cot 0
        assert!(l.get(0, 2).abs() < 1e-15);
        // boundary edges: one opposite angle of 45°, cot = 1 -> -1/2
        for (i, j) in [(0, 1), (1, 2), (2, 3), (0, 3)] {
            assert!(
                (l.get(i, j) + 0.5).abs() < 1e-15,
                "{i}-{j}: {}",
                l.get(i, j)
            );
        }
        // the other diagonal split makes 1-3 the interior edge with two right angles
        let flipped = TriMesh::new(
            unit_square().vertices().to_vec(),
            vec![[0, 1, 3], [1, 2, 3]],
        )
        .unwrap();
        let lf = build_cotan_laplacian(&flipped);
        assert!(lf.get(1, 3).abs() < 1e-15);
        assert!(lf.get(0, 2).abs() == 0.0);
    }

    #[test]
    fn square_with_interior_weight() {
        // Diamond of two equilateral-ish right isoceles triangles hinged at the
        // diagonal: vertices chosen so the diagonal sees two 45° angles.
        let m = TriMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, -1.0, 0.0],
                [2.0, 0.0, 0.0],
                [1.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let l = build_cotan_laplacian(&m);
        // edge 0-2 is opposite the 90° corners at 1 and 3: weight 0
        assert!(l.get(0, 2).abs() < 1e-15);
        // edge 1-3 does not exist
        assert_eq!(l.get(1, 3), 0.0);
        // edge 0-1 is opposite a 45° corner at 2: -1/2
        assert!((l.get(0, 1) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn equilateral_weights() {
        let h = 3f64.sqrt() / 2.0;
        let m = TriMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, h, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let l = build_cotan_laplacian(&m);
        let expected = -1.0 / (2.0 * 3f64.sqrt());
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            assert!((l.get(i, j) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn mass_entries() {
        let m = build_mass(&right_triangle());
        assert_eq!(m.diagonal, vec![0.5; 3]);
        assert!((build_mass(&unit_square()).total_area() - 1.0).abs() < 1e-15);
        let edge = 4.0 / (10.0 + 2.0 * 5f64.sqrt()).sqrt();
        let expected = 20.0 * edge * edge * 3f64.sqrt() / 4.0;
        assert!((build_mass(&icosahedron()).total_area() - expected).abs() < 1e-12);
    }

    #[test]
    fn planar_jacobians() {
        let sq = unit_square();
        let g = build_gradient(&sq);
        let j = jacobian_from_vertices(&g, sq.vertices()).unwrap();
        let proj = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
        for m in &j.0 {
            for r in 0..3 {
                for c in 0..3 {
                    assert!((m[r][c] - proj[r][c]).abs() < 1e-14);
                }
            }
        }
        let doubled: Vec<Vec3> = sq.vertices().iter().map(|v| v.map(|x| 2.0 * x)).collect();
        let j2 = jacobian_from_vertices(&g, &doubled).unwrap();
        for (a, b) in j.0.iter().zip(&j2.0) {
            for r in 0..3 {
                for c in 0..3 {
                    assert!((2.0 * a[r][c] - b[r][c]).abs() < 1e-14);
                }
            }
        }
        // rotation about the axis (1,1,1)/√3 by 0.7 rad: J_f = R · diag(1,1,0)
        let (s, co) = (0.7f64.sin(), 0.7f64.cos());
        let u = [1.0 / 3f64.sqrt(); 3];
        let mut rot = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let kron = if r == c { 1.0 } else { 0.0 };
                let skew = match (r, c) {
                    (0, 1) => -u[2],
                    (0, 2) => u[1],
                    (1, 0) => u[2],
                    (1, 2) => -u[0],
                    (2, 0) => -u[1],
                    (2, 1) => u[0],
                    _ => 0.0,
                };
                rot[r][c] = co * kron + s * skew + (1.0 - co) * u[r] * u[c];
            }
        }
        let rotated: Vec<Vec3> = sq
            .vertices()
            .iter()
            .map(|v| [0, 1, 2].map(|r| dot(rot[r], *v)))
            .collect();
        let jr = jacobian_from_vertices(&g, &rotated).unwrap();
        for m in &jr.0 {
            for r in 0..3 {
                for c in 0..3 {
                    let expected = if c < 2 { rot[r][c] } else { 0.0 };
                    assert!((m[r][c] - expected).abs() < 1e-14);
                }
            }
        }
        assert!(jacobian_from_vertices(&g, &rotated[..2]).is_err());
    }

    #[test]
    fn divergence_pair_is_adjoint() {
        let ico = icosahedron();
        let ops = DiffOperators::new(&ico);
        let jac = JacobianField(
            (0..20)
                .map(|f| {
                    let x = f as f64;
                    [
                        [x.sin(), 0.3, x.cos()],
                        [0.1 * x, -1.0, 0.2],
                        [0.0, x.sqrt(), 1.0],
                    ]
                })
                .collect(),
        );
        let y: Vec<f64> = (0..36).map(|i| (i as f64 * 0.71).cos()).collect();
        let lhs: f64 = ops
            .divergence(&jac)
            .unwrap()
            .iter()
            .zip(&y)
            .map(|(a, b)| a * b)
            .sum();
        let adj = ops.divergence_adjoint(&y).unwrap();
        let rhs: f64 = jac
            .to_flat()
            .iter()
            .zip(adj.to_flat())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }
}
