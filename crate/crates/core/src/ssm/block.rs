use std::sync::Arc;

use rand::Rng;

use super::scan::SelectiveScanOp;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Binding, Graph, LayerNormLayer, Linear, NodeId, ParamId, ParamStore, Tensor};

/// Widths of one gated selective-SSM block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
}

impl MambaConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            d_state: 8,
            expand: 2,
            conv_width: 4,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.d_model
    }

    /// Parameter count of one block, layer by layer.
    pub fn param_count(&self) -> usize {
        let (c, e, n, k) = (self.d_model, self.inner(), self.d_state, self.conv_width);
        2 * c // norm
            + Linear::param_count(c, 2 * e, true)
            + e * k + e // depthwise conv
            + Linear::param_count(e, e, true) // delta
            + 2 * Linear::param_count(e, n, false) // B, C
            + e * n // A (log magnitude)
            + e // D
            + Linear::param_count(e, c, true)
    }
}

/// Pre-norm residual block:
/// `x + out_proj(scan(silu(conv(main))) ⊙ silu(gate))` with `[main, gate] = in_proj(norm(x))`.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub config: MambaConfig,
    norm: LayerNormLayer,
    in_proj: Linear,
    conv_weight: ParamId,
    conv_bias: ParamId,
    delta_proj: Linear,
    b_proj: Linear,
    c_proj: Linear,
    /// `A = -exp(a_log)`, so the realized state matrix is strictly negative.
    a_log: ParamId,
    d_skip: ParamId,
    out_proj: Linear,
}

impl MambaBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: MambaConfig,
        rng: &mut R,
    ) -> Self {
        let (c, e, n, k) = (config.d_model, config.inner(), config.d_state, config.conv_width);
        let norm = LayerNormLayer::new(store, &format!("{name}.norm"), c);
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), c, 2 * e, true, rng);
        let cb = 1.0 / (k as f64).sqrt();
        let conv_weight = store.add(format!("{name}.conv.weight"), Tensor::rand_uniform(vec![e, k], -cb, cb, rng));
        let conv_bias = store.add(format!("{name}.conv.bias"), Tensor::rand_uniform(vec![e], -cb, cb, rng));
        let delta_proj = Linear::new(store, &format!("{name}.delta_proj"), e, e, true, rng);
        // step sizes start log-uniform in [1e-3, 1e-1]
        let dt_bias: Vec<T> = (0..e)
            .map(|_| {
                let dt = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                T::from_f64(dt + (-(-dt).exp_m1()).ln()).unwrap()
            })
            .collect();
        *store.get_mut(delta_proj.bias.unwrap()) = Tensor::new(vec![e], dt_bias).unwrap();
        let b_proj = Linear::new(store, &format!("{name}.b_proj"), e, n, false, rng);
        let c_proj = Linear::new(store, &format!("{name}.c_proj"), e, n, false, rng);
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::from_fn(vec![e, n], |i| T::from_f64(((i[1] + 1) as f64).ln()).unwrap()),
        );
        let d_skip = store.add(format!("{name}.d"), Tensor::ones(vec![e]));
        let out_proj = Linear::new(store, &format!("{name}.out_proj"), e, c, true, rng);
        Self {
            config,
            norm,
            in_proj,
            conv_weight,
            conv_bias,
            delta_proj,
            b_proj,
            c_proj,
            a_log,
            d_skip,
            out_proj,
        }
    }

    pub fn out_proj(&self) -> &Linear {
        &self.out_proj
    }

    /// `x: [B, L, C]` to `[B, L, C]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.config.d_model {
            return Err(Error::shape(
                "mamba_block",
                format!("expected [B, L, {}], got {shape:?}", self.config.d_model),
            ));
        }
        let e = self.config.inner();
        let xn = self.norm.forward(g, p, x)?;
        let xz = self.in_proj.forward(g, p, xn)?;
        let main = g.slice(xz, 2, 0, e)?;
        let gate = g.slice(xz, 2, e, e)?;
        let xc = g.conv1d_depthwise(main, p[self.conv_weight])?;
        let xc = g.add_broadcast(xc, p[self.conv_bias], 2)?;
        let xc = g.silu(xc)?;
        let delta = self.delta_proj.forward(g, p, xc)?;
        let delta = g.softplus(delta)?;
        let bt = self.b_proj.forward(g, p, xc)?;
        let ct = self.c_proj.forward(g, p, xc)?;
        let a = g.exp(p[self.a_log])?;
        let a = g.scale(a, -T::one())?;
        let y = g.custom(Arc::new(SelectiveScanOp), &[xc, delta, a, bt, ct, p[self.d_skip]])?;
        let gate = g.silu(gate)?;
        let y = g.mul(y, gate)?;
        let out = self.out_proj.forward(g, p, y)?;
        g.add(x, out)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn param_count_matches_store() {
        let mut store = ParamStore::<f64>::new();
        let cfg = MambaConfig::new(6);
        MambaBlock::new(&mut store, "blk", cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.num_elements(), cfg.param_count());
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let blk = MambaBlock::new(&mut store, "blk", MambaConfig::new(8), &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::randn(vec![2, 16, 8], 1.0, &mut rng));
        let y = blk.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[2, 16, 8]);
        let bad = g.constant(Tensor::zeros(vec![2, 16, 5]));
        assert!(blk.forward(&mut g, &p, bad).is_err());
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let blk = MambaBlock::new(&mut store, "blk", MambaConfig::new(4), &mut rng);
        store.zero_prefix("blk.out_proj");
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xt = Tensor::randn(vec![1, 5, 4], 1.0, &mut rng);
        let x = g.constant(xt.clone());
        let y = blk.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y), &xt);
    }
}
