use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId};
use crate::error::Result;
use crate::scalar::{lit, Real};

/// Max over the entries of `leaf` of
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
///
/// The graph is re-evaluated for every perturbation and restored afterwards.
pub fn finite_difference_check<T: Real>(
    graph: &mut Graph<T>,
    output: NodeId,
    leaf: NodeId,
    eps: T,
) -> Result<T> {
    let n = graph.value(leaf).numel();
    let all: Vec<usize> = (0..n).collect();
    check_entries(graph, output, leaf, eps, &all)
}

/// Same as [`finite_difference_check`] over at most `max_entries` entries drawn with `seed`.
pub fn finite_difference_check_sampled<T: Real>(
    graph: &mut Graph<T>,
    output: NodeId,
    leaf: NodeId,
    eps: T,
    max_entries: usize,
    seed: u64,
) -> Result<T> {
    let n = graph.value(leaf).numel();
    let entries: Vec<usize> = if n <= max_entries {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, n, max_entries).into_vec();
        v.sort_unstable();
        v
    };
    check_entries(graph, output, leaf, eps, &entries)
}

fn check_entries<T: Real>(
    graph: &mut Graph<T>,
    output: NodeId,
    leaf: NodeId,
    eps: T,
    entries: &[usize],
) -> Result<T> {
    let analytic = graph
        .backward(output)?
        .get_or_zeros(leaf, graph.value(leaf).shape());
    let floor: T = lit(1e-12);
    let two = T::one() + T::one();
    let mut worst = T::zero();
    for &i in entries {
        let orig = graph.value(leaf).data()[i];
        graph.leaf_value_mut(leaf).data_mut()[i] = orig + eps;
        graph.forward()?;
        let plus = graph.value(output).item();
        graph.leaf_value_mut(leaf).data_mut()[i] = orig - eps;
        graph.forward()?;
        let minus = graph.value(output).item();
        graph.leaf_value_mut(leaf).data_mut()[i] = orig;
        let central = (plus - minus) / (two * eps);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / (a.abs() + central.abs() + floor);
        if rel > worst || rel.is_nan() {
            worst = rel;
        }
    }
    graph.forward()?;
    Ok(worst)
}
