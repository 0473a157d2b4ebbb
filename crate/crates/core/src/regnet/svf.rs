//! Scaling and squaring: `exp(v)` by halving `v` `T` times and composing the
//! resulting small displacement with itself `T` times.

use super::volume::{DisplacementField, VelocityField};
use super::warp::{warp_node, warp_tensor};
use crate::error::Result;
use crate::scalar::{lit, Real};
use crate::tensor::{Graph, NodeId};

pub const DEFAULT_INTEGRATION_STEPS: usize = 7;

/// `u <- v / 2^T`, then `T` times `u <- u + u∘(id + u)`; returns the displacement of `φ = id + u`.
pub fn integrate_svf<T: Real>(v: &VelocityField<T>, steps: usize) -> Result<DisplacementField<T>> {
    let mut u = v.tensor().scale(lit(0.5f64.powi(steps as i32)));
    for _ in 0..steps {
        let composed = warp_tensor(&u, &u)?;
        u.add_assign(&composed);
    }
    DisplacementField::new(u)
}

/// Differentiable counterpart of [`integrate_svf`] on a `[3, H, W, D]` node.
pub fn integrate_svf_node<T: Real>(g: &mut Graph<T>, v: NodeId, steps: usize) -> Result<NodeId> {
    let mut u = g.scale(v, lit(0.5f64.powi(steps as i32)))?;
    for _ in 0..steps {
        let composed = warp_node(g, u, u)?;
        u = g.add(u, composed)?;
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_velocity_is_identity() {
        let v = VelocityField::<f64>::zeros([4, 4, 4]);
        let u = integrate_svf(&v, 7).unwrap();
        assert_eq!(u.tensor().max_abs(), 0.0);
    }

    #[test]
    fn constant_field_is_a_translation() {
        let t = Tensor::<f64>::from_fn(vec![3, 6, 6, 6], |i| if i[0] == 0 { 1.25 } else { 0.0 });
        let u = integrate_svf(&VelocityField::new(t.clone()).unwrap(), 7).unwrap();
        assert!(u.tensor().max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn graph_and_plain_paths_agree() {
        let t = Tensor::<f64>::from_fn(vec![3, 5, 5, 5], |i| 0.3 * ((i[0] + i[1]) as f64 * 0.7 + i[3] as f64 * 0.2).sin());
        let plain = integrate_svf(&VelocityField::new(t.clone()).unwrap(), 5).unwrap();
        let mut g = Graph::new();
        let v = g.constant(t);
        let u = integrate_svf_node(&mut g, v, 5).unwrap();
        assert_eq!(g.value(u), plain.tensor());
    }
}
