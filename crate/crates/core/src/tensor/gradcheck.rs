use super::{Graph, Tensor, TensorError, Var};

/// Norms below this are compared absolutely: a gradient that vanishes
/// analytically (e.g. a shift in front of a softmax) differs from its finite
/// difference only by round-off.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Largest relative error between backward gradients and central finite
/// differences over all `inputs`, measured per input as
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, GRADCHECK_FLOOR)`.
///
/// `loss` receives one tracked variable per input and must return a scalar.
pub fn gradcheck<E: From<TensorError>>(
    inputs: &[Tensor],
    step: f64,
    loss: impl Fn(&mut Graph, &[Var]) -> Result<Var, E>,
) -> Result<f64, E> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let l = loss(&mut g, &vars)?;
    g.backward(l)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(v)))
        })
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let l = loss(&mut g, &vars)?;
        Ok(g.value(l).item())
    };
    let mut values = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.numel());
        for j in 0..a.numel() {
            let x = values[i].data()[j];
            values[i].data_mut()[j] = x + step;
            let up = eval(&values)?;
            values[i].data_mut()[j] = x - step;
            let down = eval(&values)?;
            values[i].data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * step));
        }
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut a.data().iter().zip(&numeric).map(|(p, q)| p - q));
        let scale = norm(&mut a.data().iter().copied())
            .max(norm(&mut numeric.iter().copied()))
            .max(GRADCHECK_FLOOR);
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}
