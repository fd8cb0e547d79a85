use std::sync::Arc;

use crate::poisson::PoissonSystem;
use crate::sparse::CscMatrix;
use crate::tensor::{CustomOp, Tensor, TensorError};

/// `[F, 9]` Jacobians to `[V, 3]` positions through a prefactorized Poisson
/// system. The backward pass is the solver adjoint.
pub struct PoissonSolveOp(pub Arc<PoissonSystem>);

impl CustomOp for PoissonSolveOp {
    fn name(&self) -> &str {
        "poisson_solve"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        let faces = self.0.face_count();
        if inputs.len() != 1 || inputs[0].shape() != [faces, 9] {
            return Err(TensorError::Shape {
                op: "poisson_solve",
                lhs: inputs
                    .first()
                    .map(|t| t.shape().to_vec())
                    .unwrap_or_default(),
                rhs: vec![faces, 9],
            });
        }
        let v = self
            .0
            .solve_flat(inputs[0].data())
            .map_err(|e| TensorError::Custom(e.to_string()))?;
        Tensor::new(vec![self.0.vertex_count(), 3], v)
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>, TensorError> {
        let gj = self
            .0
            .solve_adjoint_flat(grad_output.data())
            .map_err(|e| TensorError::Custom(e.to_string()))?;
        Ok(vec![Some(Tensor::new(vec![self.0.face_count(), 9], gj)?)])
    }
}

/// `A·X` for a constant sparse `A` and a dense `[n, k]` input.
pub struct SparseMatMulOp(pub Arc<CscMatrix>);

impl CustomOp for SparseMatMulOp {
    fn name(&self) -> &str {
        "sparse_matmul"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        let a = &self.0;
        let x = inputs[0];
        if inputs.len() != 1 || x.rank() != 2 || x.shape()[0] != a.cols() {
            return Err(TensorError::Shape {
                op: "sparse_matmul",
                lhs: vec![a.rows(), a.cols()],
                rhs: x.shape().to_vec(),
            });
        }
        let k = x.shape()[1];
        let y = a
            .mul_dense(x.data(), k)
            .map_err(|e| TensorError::Custom(e.to_string()))?;
        Tensor::new(vec![a.rows(), k], y)
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>, TensorError> {
        let a = &self.0;
        let k = grad_output.shape()[1];
        let gx = a
            .tmul_dense(grad_output.data(), k)
            .map_err(|e| TensorError::Custom(e.to_string()))?;
        Ok(vec![Some(Tensor::new(vec![a.cols(), k], gx)?)])
    }
}
