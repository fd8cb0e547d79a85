use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;

use crate::tensor::{Bindings, Graph, ParamId, ParamSet, Tensor, Var};

use super::layers::{Init, LayerNorm, Linear};
use super::NetError;

fn row_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Row indices of a `[n, c]` tensor in lexicographic row order (ties by
/// index). Running a set network in this order makes it exactly
/// permutation-equivariant: every reduction then visits its terms in the
/// same sequence whatever the input order.
pub fn canonical_order(t: &Tensor) -> Vec<usize> {
    let n = t.shape()[0];
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| row_cmp(t.row(a), t.row(b)).then(a.cmp(&b)));
    idx
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    inv
}

/// For each query, the `m` nearest keys ordered by squared distance, then by
/// key position and features, then by index.
pub fn nearest_keys(queries: &Tensor, keys: &Tensor, key_feat: &Tensor, m: usize) -> Vec<usize> {
    let (nq, nk) = (queries.shape()[0], keys.shape()[0]);
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0)
            .then_with(|| row_cmp(keys.row(a.1), keys.row(b.1)))
            .then_with(|| row_cmp(key_feat.row(a.1), key_feat.row(b.1)))
            .then(a.1.cmp(&b.1))
    };
    let mut out = Vec::with_capacity(nq * m);
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(m + 1);
    for q in 0..nq {
        let qp = queries.row(q);
        best.clear();
        for k in 0..nk {
            let kp = keys.row(k);
            let c = (
                (qp[0] - kp[0]).powi(2) + (qp[1] - kp[1]).powi(2) + (qp[2] - kp[2]).powi(2),
                k,
            );
            if best.len() == m && cmp(&c, &best[m - 1]).is_ge() {
                continue;
            }
            let at = best.partition_point(|b| cmp(b, &c).is_lt());
            best.insert(at, c);
            best.truncate(m);
        }
        out.extend(best.iter().map(|c| c.1));
    }
    out
}

/// Vector attention from queries to their nearest keys: per-channel weights
/// from the projected feature difference and the relative position, softmaxed
/// over the neighbors, then a residual connection and layer norm.
#[derive(Debug, Clone)]
pub struct VectorAttention {
    pub width: usize,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    /// First weight MLP layer over `[feature difference, relative position]`.
    mix_w: ParamId,
    mix_b: ParamId,
    weight_out: Linear,
    norm: LayerNorm,
}

impl VectorAttention {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        let wq = Linear::new(ps, &format!("{name}.q"), width, width, Init::Uniform, rng);
        let wk = Linear::new(ps, &format!("{name}.k"), width, width, Init::Uniform, rng);
        let wv = Linear::new(ps, &format!("{name}.v"), width, width, Init::Uniform, rng);
        let mix = Linear::new(
            ps,
            &format!("{name}.mix"),
            width + 3,
            width,
            Init::Uniform,
            rng,
        );
        let weight_out = Linear::new(
            ps,
            &format!("{name}.weight"),
            width,
            width,
            Init::Uniform,
            rng,
        );
        let norm = LayerNorm::new(ps, &format!("{name}.norm"), width);
        Self {
            width,
            wq,
            wk,
            wv,
            mix_w: mix.w,
            mix_b: mix.b,
            weight_out,
            norm,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bindings,
        q_pos: Var,
        q_feat: Var,
        k_pos: Var,
        k_feat: Var,
        m: usize,
    ) -> Result<Var, NetError> {
        let d = self.width;
        let (nq, nk) = (g.shape(q_pos)[0], g.shape(k_pos)[0]);
        let shapes_ok = g.shape(q_pos) == [nq, 3]
            && g.shape(q_feat) == [nq, d]
            && g.shape(k_pos) == [nk, 3]
            && g.shape(k_feat) == [nk, d];
        if !shapes_ok {
            return Err(NetError::Shape(format!(
                "vector attention: queries {:?}/{:?}, keys {:?}/{:?}, width {d}",
                g.shape(q_pos),
                g.shape(q_feat),
                g.shape(k_pos),
                g.shape(k_feat)
            )));
        }
        if m == 0 || m > nk {
            return Err(NetError::Shape(format!(
                "{m} neighbors requested from {nk} keys"
            )));
        }
        let nbr: Arc<[usize]> =
            nearest_keys(g.value(q_pos), g.value(k_pos), g.value(k_feat), m).into();
        let rep: Arc<[usize]> = (0..nq).flat_map(|i| std::iter::repeat_n(i, m)).collect();

        let qf = self.wq.forward(g, p, q_feat)?;
        let kf = self.wk.forward(g, p, k_feat)?;
        let v = self.wv.forward(g, p, k_feat)?;
        // The first weight layer is linear, so it is applied to queries and
        // keys separately and then gathered, instead of on every pair.
        let w_feat = g.narrow(p[self.mix_w], 0, 0, d)?;
        let w_pos = g.narrow(p[self.mix_w], 0, d, 3)?;
        let qa = g.matmul(qf, w_feat)?;
        let ka = g.matmul(kf, w_feat)?;
        let qa = g.gather(qa, rep.clone())?;
        let ka = g.gather(ka, nbr.clone())?;
        let qp = g.gather(q_pos, rep)?;
        let kp = g.gather(k_pos, nbr.clone())?;
        let rel = g.sub(qp, kp)?;
        let rel = g.matmul(rel, w_pos)?;
        let h = g.sub(qa, ka)?;
        let h = g.add(h, rel)?;
        let h = g.add(h, p[self.mix_b])?;
        let h = g.relu(h)?;
        let logits = self.weight_out.forward(g, p, h)?;
        let logits = g.reshape(logits, &[nq, m, d])?;
        let w = g.softmax(logits, 1)?;
        let vg = g.gather(v, nbr)?;
        let vg = g.reshape(vg, &[nq, m, d])?;
        let weighted = g.mul(w, vg)?;
        let agg = g.sum(weighted, 1)?;
        let out = g.add(q_feat, agg)?;
        Ok(self.norm.forward(g, p, out)?)
    }
}

/// Pre-norm single-head self-attention block with a GELU feed-forward.
#[derive(Debug, Clone)]
struct SetBlock {
    norm1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    width: usize,
}

impl SetBlock {
    fn new(ps: &mut ParamSet, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        let lin = |ps: &mut ParamSet, n: &str, i, o, rng: &mut _| {
            Linear::new(ps, &format!("{name}.{n}"), i, o, Init::Uniform, rng)
        };
        Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), width),
            wq: lin(ps, "q", width, width, rng),
            wk: lin(ps, "k", width, width, rng),
            wv: lin(ps, "v", width, width, rng),
            wo: lin(ps, "o", width, width, rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), width),
            ff1: lin(ps, "ff1", width, 2 * width, rng),
            ff2: lin(ps, "ff2", 2 * width, width, rng),
            width,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var, NetError> {
        let h = self.norm1.forward(g, p, x)?;
        let q = self.wq.forward(g, p, h)?;
        let k = self.wk.forward(g, p, h)?;
        let v = self.wv.forward(g, p, h)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (self.width as f64).sqrt())?;
        let a = g.softmax(s, 1)?;
        let o = g.matmul(a, v)?;
        let o = self.wo.forward(g, p, o)?;
        let x = g.add(x, o)?;
        let h = self.norm2.forward(g, p, x)?;
        let h = self.ff1.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = self.ff2.forward(g, p, h)?;
        Ok(g.add(x, h)?)
    }
}

/// Token-wise input projection, self-attention blocks without any positional
/// encoding, and an output projection. Exactly permutation-equivariant.
#[derive(Debug, Clone)]
pub struct SetTransformer {
    pub in_dim: usize,
    pub out_dim: usize,
    input: Linear,
    blocks: Vec<SetBlock>,
    out_norm: LayerNorm,
    output: Linear,
}

impl SetTransformer {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dims: [usize; 3],
        blocks: usize,
        output_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let [in_dim, width, out_dim] = dims;
        let input = Linear::new(ps, &format!("{name}.in"), in_dim, width, Init::Uniform, rng);
        let blocks = (0..blocks)
            .map(|i| SetBlock::new(ps, &format!("{name}.block{i}"), width, rng))
            .collect();
        let out_norm = LayerNorm::new(ps, &format!("{name}.out_norm"), width);
        let output = Linear::new(ps, &format!("{name}.out"), width, out_dim, output_init, rng);
        Self {
            in_dim,
            out_dim,
            input,
            blocks,
            out_norm,
            output,
        }
    }

    pub fn width(&self) -> usize {
        self.input.out_dim
    }

    /// `[k, in_dim]` tokens to `[k, out_dim]`, row `i` of the output
    /// belonging to row `i` of the input.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, tokens: Var) -> Result<Var, NetError> {
        self.forward_shared(g, p, tokens, None)
    }

    /// As [`Self::forward`], with an optional `[width]` vector added to every
    /// token after the input projection. Projecting a per-set input once and
    /// broadcasting it equals appending it to every token.
    pub fn forward_shared(
        &self,
        g: &mut Graph,
        p: &Bindings,
        tokens: Var,
        shared: Option<Var>,
    ) -> Result<Var, NetError> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(NetError::Shape(format!(
                "set transformer expects [k, {}] tokens, got {shape:?}",
                self.in_dim
            )));
        }
        let order = canonical_order(g.value(tokens));
        let inverse: Arc<[usize]> = inverse_permutation(&order).into();
        let x = g.gather(tokens, order.into())?;
        let mut x = self.input.forward(g, p, x)?;
        if let Some(v) = shared {
            x = g.add(x, v)?;
        }
        for b in &self.blocks {
            x = b.forward(g, p, x)?;
        }
        let x = self.out_norm.forward(g, p, x)?;
        let x = self.output.forward(g, p, x)?;
        Ok(g.gather(x, inverse)?)
    }
}
