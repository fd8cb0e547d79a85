//! Randomized finite-difference checks of every graph primitive, shared by
//! the core integration tests and the acceptance suite.

use std::sync::Arc;

use posefield::diffgeo::build_cotan_laplacian;
use posefield::nets::{ApplierHead, NetConfig};
use posefield::poisson::PoissonSystem;
use posefield::synth::{gen_pose, gen_template, PoseParams, WormSpec};
use posefield::tensor::{gradcheck, Bindings, Graph, Tensor, TensorError, Var};
use posefield::train::{
    reconstruction_graph, Autoencoder, PoissonSolveOp, SparseMatMulOp, TemplateContext, TrainError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: u64 = 10;

#[derive(Clone, Copy)]
pub enum Domain {
    Any,
    /// Magnitudes in [0.1, 1]: keeps kinks at 0 out of the difference stencil.
    AwayFromZero,
    Positive,
}

type Build = Arc<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + Send + Sync>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub domain: Domain,
    pub build: Build,
}

fn random(shape: &[usize], domain: Domain, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match domain {
            Domain::Any => rng.random_range(-1.0..1.0),
            Domain::AwayFromZero => {
                let m: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
            Domain::Positive => rng.random_range(0.5..2.0),
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ w ⊙ y` with fixed pseudo-random weights, so every output entry matters.
fn readout(g: &mut Graph, y: Var) -> Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let w = random(&shape, Domain::Any, &mut ChaCha8Rng::seed_from_u64(99));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    domain: Domain,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + Send + Sync + 'static,
) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        domain,
        build: Arc::new(move |g, v| {
            let y = f(g, v)?;
            readout(g, y)
        }),
    }
}

pub fn primitive_cases() -> Vec<Case> {
    use Domain::*;
    let spec = WormSpec::uniform(3, 6, 1.5, 0.3);
    let mesh = gen_template(&spec).unwrap();
    let system = Arc::new(PoissonSystem::for_template(&mesh).unwrap());
    let lap = Arc::new(build_cotan_laplacian(&mesh));
    let (f, v) = (mesh.face_count(), mesh.vertex_count());
    vec![
        case("add", &[&[3, 4], &[3, 4]], Any, |g, v| g.add(v[0], v[1])),
        case("add_broadcast", &[&[2, 3, 4], &[4]], Any, |g, v| {
            g.add(v[0], v[1])
        }),
        case("sub", &[&[3, 4], &[4]], Any, |g, v| g.sub(v[0], v[1])),
        case("mul", &[&[5, 2], &[5, 2]], Any, |g, v| g.mul(v[0], v[1])),
        case("mul_broadcast", &[&[4, 3], &[3]], Any, |g, v| {
            g.mul(v[0], v[1])
        }),
        case("scale", &[&[6]], Any, |g, v| g.scale(v[0], -1.7)),
        case("add_scalar", &[&[2, 2]], Any, |g, v| {
            g.add_scalar(v[0], 0.3)
        }),
        case("matmul", &[&[3, 4], &[4, 5]], Any, |g, v| {
            g.matmul(v[0], v[1])
        }),
        case("transpose", &[&[3, 5]], Any, |g, v| g.transpose(v[0])),
        case("reshape", &[&[2, 6]], Any, |g, v| g.reshape(v[0], &[3, 4])),
        case("concat_rows", &[&[2, 3], &[4, 3]], Any, |g, v| {
            g.concat(&[v[0], v[1]], 0)
        }),
        case("concat_cols", &[&[3, 2], &[3, 1], &[3, 4]], Any, |g, v| {
            g.concat(&[v[0], v[1], v[2]], 1)
        }),
        case("narrow", &[&[4, 6]], Any, |g, v| g.narrow(v[0], 1, 2, 3)),
        case("gather", &[&[5, 3]], Any, |g, v| {
            g.gather(v[0], vec![4, 0, 4, 2, 1, 4].into())
        }),
        case("scatter_add", &[&[6, 2]], Any, |g, v| {
            g.scatter_add(v[0], vec![1, 3, 1, 0, 3, 3].into(), 4)
        }),
        case("sum_axis0", &[&[4, 3]], Any, |g, v| g.sum(v[0], 0)),
        case("sum_axis1", &[&[2, 4, 3]], Any, |g, v| g.sum(v[0], 1)),
        case("mean_axis", &[&[4, 5]], Any, |g, v| g.mean(v[0], 1)),
        case("sum_all", &[&[3, 3]], Any, |g, v| g.sum_all(v[0])),
        case("mean_all", &[&[3, 3]], Any, |g, v| g.mean_all(v[0])),
        case("relu", &[&[4, 4]], AwayFromZero, |g, v| g.relu(v[0])),
        case("gelu", &[&[4, 4]], Any, |g, v| g.gelu(v[0])),
        case("sqrt", &[&[4, 3]], Positive, |g, v| g.sqrt(v[0])),
        case("exp", &[&[4, 3]], Any, |g, v| g.exp(v[0])),
        case("abs", &[&[4, 3]], AwayFromZero, |g, v| g.abs(v[0])),
        case("softmax_rows", &[&[3, 5]], Any, |g, v| g.softmax(v[0], 1)),
        case("softmax_mid", &[&[2, 4, 3]], Any, |g, v| g.softmax(v[0], 1)),
        case("layer_norm", &[&[4, 6]], Any, |g, v| g.layer_norm(v[0], 1)),
        case("squared_norm", &[&[5, 3]], Any, |g, v| {
            g.squared_norm(v[0], 1)
        }),
        case("poisson_solve", &[&[f, 9]], Any, move |g, v| {
            g.custom(Arc::new(PoissonSolveOp(system.clone())), &[v[0]])
        }),
        case("sparse_matmul", &[&[v, 3]], Any, move |g, v| {
            g.custom(Arc::new(SparseMatMulOp(lap.clone())), &[v[0]])
        }),
        case(
            "mlp_3_layer",
            &[&[6, 4], &[4, 8], &[8], &[8, 8], &[8], &[8, 1], &[1]],
            Any,
            |g, v| {
                let mut h = v[0];
                for layer in 0..3 {
                    let (w, b) = (v[1 + 2 * layer], v[2 + 2 * layer]);
                    h = g.matmul(h, w)?;
                    h = g.add(h, b)?;
                    if layer < 2 {
                        h = g.gelu(h)?;
                    }
                }
                g.sum_all(h)
            },
        ),
    ]
}

/// Worst relative error of `case` over [`INSTANCES`] random inputs.
pub fn check_case(case: &Case) -> f64 {
    (0..INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .map(|s| random(s, case.domain, &mut rng))
                .collect();
            gradcheck(&inputs, STEP, |g, v| (case.build)(g, v)).unwrap()
        })
        .fold(0.0, f64::max)
}

/// End-to-end Jacobian-route reconstruction loss on a 50-vertex worm, checked
/// with respect to every extractor and applier parameter.
pub fn check_jacobian_route(seed: u64) -> f64 {
    let spec = WormSpec::uniform(4, 12, 2.0, 0.3);
    let template = gen_template(&spec).unwrap();
    assert_eq!(template.vertex_count(), 50);
    let ctx = TemplateContext::new(&template).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = PoseParams {
        bend: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
        twist: (0..2).map(|_| rng.random_range(-0.5..0.5)).collect(),
    };
    let sample = gen_pose(&spec, &pose).unwrap();
    let net = NetConfig {
        keypoints: 6,
        width: 6,
        stages: 1,
        neighbors: 4,
    };
    let mut model = Autoencoder::new(net, ApplierHead::Jacobian, seed).unwrap();
    // a zero output layer would hide the extractor from the loss
    for t in model.applier.params.tensors_mut() {
        for x in t.data_mut() {
            if *x == 0.0 {
                *x = rng.random_range(-0.2..0.2);
            }
        }
    }
    let n_ext = model.extractor.params.len();
    let inputs: Vec<Tensor> = model
        .extractor
        .params
        .tensors()
        .iter()
        .chain(model.applier.params.tensors())
        .cloned()
        .collect();
    gradcheck(&inputs, STEP, |g, v| -> Result<Var, TrainError> {
        let pe = Bindings::from_vars(v[..n_ext].to_vec());
        let pa = Bindings::from_vars(v[n_ext..].to_vec());
        reconstruction_graph(
            g,
            (&model.extractor, &pe),
            (&model.applier, &pa),
            &sample,
            &ctx,
        )
    })
    .unwrap()
}
