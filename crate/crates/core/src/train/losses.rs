use std::sync::Arc;

use crate::diffgeo::build_cotan_laplacian;
use crate::mesh::{norm, sub, TriMesh, Vec3};
use crate::nets::{ApplierHead, PoseApplier, PoseExtractor, PoseLatent};
use crate::poisson::PoissonSystem;
use crate::sparse::CscMatrix;
use crate::tensor::{Bindings, Graph, Tensor, TensorError, Var};

use super::ops::{PoissonSolveOp, SparseMatMulOp};
use super::TrainError;

pub fn points_tensor(points: &[Vec3]) -> Tensor {
    Tensor::new(
        vec![points.len(), 3],
        points.iter().flatten().copied().collect(),
    )
    .expect("3 per row")
}

/// Mean squared vertex distance after moving both point sets to a common
/// centroid.
pub fn centered_mse(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var, TensorError> {
    let t = g.constant(target.clone());
    let diff = g.sub(pred, t)?;
    let mu = g.mean(diff, 0)?;
    let c = g.sub(diff, mu)?;
    let sq = g.squared_norm(c, 1)?;
    g.mean_all(sq)
}

pub fn loss_vertex(predicted: &[Vec3], target: &[Vec3]) -> Result<f64, TrainError> {
    if predicted.len() != target.len() {
        return Err(TrainError::Shape(format!(
            "{} predicted vs {} target vertices",
            predicted.len(),
            target.len()
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(points_tensor(predicted));
    let l = centered_mse(&mut g, p, &points_tensor(target))?;
    Ok(g.value(l).item())
}

/// Everything about a template that the losses reuse across steps.
#[derive(Clone)]
pub struct TemplateContext {
    pub template: TriMesh,
    pub system: Arc<PoissonSystem>,
    centroids: Vec<Vec3>,
}

impl TemplateContext {
    pub fn new(template: &TriMesh) -> Result<Self, TrainError> {
        let system = PoissonSystem::for_template(template)?;
        Ok(Self {
            template: template.clone(),
            system: Arc::new(system),
            centroids: template.face_centroids(),
        })
    }

    pub fn queries(&self, head: ApplierHead) -> &[Vec3] {
        match head {
            ApplierHead::Jacobian => &self.centroids,
            ApplierHead::Vertex => self.template.vertices(),
        }
    }

    /// Decodes applier outputs to vertex positions: a Poisson solve for the
    /// Jacobian head, the identity for the vertex head.
    pub fn decode(&self, g: &mut Graph, head: ApplierHead, out: Var) -> Result<Var, TensorError> {
        match head {
            ApplierHead::Jacobian => {
                g.custom(Arc::new(PoissonSolveOp(self.system.clone())), &[out])
            }
            ApplierHead::Vertex => Ok(out),
        }
    }

    pub fn check(&self, mesh: &TriMesh) -> Result<(), TrainError> {
        if mesh.same_connectivity(&self.template) {
            Ok(())
        } else {
            Err(TrainError::Connectivity(format!(
                "mesh with {} vertices / {} faces does not share the template's connectivity",
                mesh.vertex_count(),
                mesh.face_count()
            )))
        }
    }
}

/// Reconstruction loss of one sample: extract, apply on the template, decode,
/// compare with the sample after centroid alignment.
pub fn reconstruction_graph(
    g: &mut Graph,
    extractor: (&PoseExtractor, &Bindings),
    applier: (&PoseApplier, &Bindings),
    sample: &TriMesh,
    ctx: &TemplateContext,
) -> Result<Var, TrainError> {
    ctx.check(sample)?;
    let lat = extractor.0.forward(g, extractor.1, sample.vertices())?;
    let head = applier.0.head;
    let out = applier
        .0
        .forward(g, applier.1, ctx.queries(head), lat.keypoints, lat.features)?;
    let v = ctx.decode(g, head, out)?;
    Ok(centered_mse(g, v, &points_tensor(sample.vertices()))?)
}

/// Reconstruction loss through the Poisson solve for a Jacobian-head applier.
pub fn loss_jacobian_route(
    extractor: &PoseExtractor,
    applier: &PoseApplier,
    sample: &TriMesh,
    ctx: &TemplateContext,
) -> Result<f64, TrainError> {
    if applier.head != ApplierHead::Jacobian {
        return Err(TrainError::Config(
            "the Jacobian route needs a Jacobian-head applier".into(),
        ));
    }
    let mut g = Graph::new();
    let pe = extractor.params.bind(&mut g, false);
    let pa = applier.params.bind(&mut g, false);
    let l = reconstruction_graph(&mut g, (extractor, &pe), (applier, &pa), sample, ctx)?;
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementWeights {
    pub lap: f64,
    pub edge: f64,
    pub reg: f64,
}

impl Default for RefinementWeights {
    fn default() -> Self {
        Self {
            lap: 1.0,
            edge: 1.0,
            reg: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementTerms {
    pub total: f64,
    pub lap: f64,
    pub edge: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct RefinementVars {
    pub total: Var,
    pub lap: Var,
    pub edge: Var,
    pub reg: Var,
}

impl RefinementVars {
    pub fn values(&self, g: &Graph) -> RefinementTerms {
        RefinementTerms {
            total: g.value(self.total).item(),
            lap: g.value(self.lap).item(),
            edge: g.value(self.edge).item(),
            reg: g.value(self.reg).item(),
        }
    }
}

/// Target-template quantities for the refinement regularizers.
#[derive(Clone)]
pub struct RefinementTarget {
    laplacian: Arc<CscMatrix>,
    rest: Tensor,
    edge_a: Arc<[usize]>,
    edge_b: Arc<[usize]>,
    rest_lengths: Tensor,
}

impl RefinementTarget {
    pub fn new(template: &TriMesh) -> Self {
        let edges = template.edge_set().edges;
        let v = template.vertices();
        let lengths = edges.iter().map(|&(a, b)| norm(sub(v[a], v[b]))).collect();
        Self {
            laplacian: Arc::new(build_cotan_laplacian(template)),
            rest: points_tensor(v),
            edge_a: edges.iter().map(|e| e.0).collect(),
            edge_b: edges.iter().map(|e| e.1).collect(),
            rest_lengths: Tensor::new(vec![edges.len()], lengths).expect("one length per edge"),
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edge_a.len()
    }

    /// Weighted Laplacian, edge-length and latent-offset terms for one
    /// transferred mesh `[V, 3]` and the refiner's `[K, 3 + d]` offsets.
    pub fn graph(
        &self,
        g: &mut Graph,
        weights: RefinementWeights,
        transferred: Var,
        delta: Var,
    ) -> Result<RefinementVars, TensorError> {
        let rest = g.constant(self.rest.clone());
        let disp = g.sub(transferred, rest)?;
        let ld = g.custom(Arc::new(SparseMatMulOp(self.laplacian.clone())), &[disp])?;
        let ld = g.squared_norm(ld, 1)?;
        let lap = g.mean_all(ld)?;

        let a = g.gather(transferred, self.edge_a.clone())?;
        let b = g.gather(transferred, self.edge_b.clone())?;
        let e = g.sub(a, b)?;
        let e = g.squared_norm(e, 1)?;
        let e = g.sqrt(e)?;
        let rest_len = g.constant(self.rest_lengths.clone());
        let e = g.sub(e, rest_len)?;
        let e = g.abs(e)?;
        let edge = g.mean_all(e)?;

        let r = g.squared_norm(delta, 1)?;
        let reg = g.sum_all(r)?;

        let t1 = g.scale(lap, weights.lap)?;
        let t2 = g.scale(edge, weights.edge)?;
        let t3 = g.scale(reg, weights.reg)?;
        let total = g.add(t1, t2)?;
        let total = g.add(total, t3)?;
        Ok(RefinementVars {
            total,
            lap,
            edge,
            reg,
        })
    }
}

/// Unweighted terms are reported alongside the weighted total.
pub fn loss_refinement(
    latent_in: &PoseLatent,
    latent_out: &PoseLatent,
    transferred: &[Vec3],
    template: &TriMesh,
    weights: RefinementWeights,
) -> Result<RefinementTerms, TrainError> {
    if transferred.len() != template.vertex_count() {
        return Err(TrainError::Shape(format!(
            "{} transferred vertices for a {}-vertex template",
            transferred.len(),
            template.vertex_count()
        )));
    }
    if latent_in.keypoints.shape() != latent_out.keypoints.shape()
        || latent_in.features.shape() != latent_out.features.shape()
    {
        return Err(TrainError::Shape(
            "refined latent shape differs from its input".into(),
        ));
    }
    let k = latent_in.len();
    let mut delta = Vec::with_capacity(k * (3 + latent_in.width()));
    for i in 0..k {
        let dz = latent_out
            .keypoints
            .row(i)
            .iter()
            .zip(latent_in.keypoints.row(i))
            .map(|(a, b)| a - b);
        let dh = latent_out
            .features
            .row(i)
            .iter()
            .zip(latent_in.features.row(i))
            .map(|(a, b)| a - b);
        delta.extend(dz.chain(dh));
    }
    let mut g = Graph::new();
    let v = g.constant(points_tensor(transferred));
    let d = g.constant(Tensor::new(vec![k, 3 + latent_in.width()], delta)?);
    let vars = RefinementTarget::new(template).graph(&mut g, weights, v, d)?;
    Ok(vars.values(&g))
}
