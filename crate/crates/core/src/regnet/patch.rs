//! Volume <-> token sequence conversions.
//!
//! Token order is a raster scan over the patch grid with the last (z) axis
//! fastest. Within a patch the flattened feature is `[C, P, P, P]`
//! channel-major. Patch merging gathers the eight tokens of each 2x2x2 cell in
//! corner order `(dx, dy, dz)` with `dz` fastest, each contributing its `C`
//! channels contiguously.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Binding, Graph, Linear, NodeId, ParamStore};

/// Patch grid extents for a `dims` volume cut into `p`-sided patches.
pub fn patch_grid(dims: [usize; 3], p: usize) -> Result<[usize; 3]> {
    if p == 0 || dims.iter().any(|&n| n % p != 0) {
        return Err(Error::shape("patch_embed", format!("extents {dims:?} not divisible by patch size {p}")));
    }
    Ok(dims.map(|n| n / p))
}

pub fn patch_token_count(dims: [usize; 3], p: usize) -> Result<usize> {
    Ok(patch_grid(dims, p)?.iter().product())
}

/// `[C, H, W, D]` to `[1, L, C·P³]` raw patch vectors.
pub fn volume_to_patches<T: Real>(g: &mut Graph<T>, x: NodeId, p: usize) -> Result<NodeId> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("patch_embed", format!("expected [C, H, W, D], got {s:?}")));
    }
    let [h, w, d] = patch_grid([s[1], s[2], s[3]], p)?;
    let c = s[0];
    let split = g.reshape(x, &[c, h, p, w, p, d, p])?;
    let moved = g.permute(split, &[1, 3, 5, 0, 2, 4, 6])?;
    g.reshape(moved, &[1, h * w * d, c * p * p * p])
}

/// `[1, L, C]` tokens on `grid` back to a `[C, h, w, d]` volume.
pub fn tokens_to_volume<T: Real>(g: &mut Graph<T>, tokens: NodeId, grid: [usize; 3]) -> Result<NodeId> {
    let s = g.shape(tokens).to_vec();
    let l: usize = grid.iter().product();
    if s.len() != 3 || s[0] != 1 || s[1] != l {
        return Err(Error::shape("tokens_to_volume", format!("{s:?} on grid {grid:?}")));
    }
    let c = s[2];
    let v = g.reshape(tokens, &[grid[0], grid[1], grid[2], c])?;
    g.permute(v, &[3, 0, 1, 2])
}

/// Split into patches and project each to `embed_dim`.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        patch: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), in_channels * patch.pow(3), embed_dim, true, rng);
        Self { patch, proj }
    }

    /// `[C, H, W, D]` to `[1, L, embed_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: NodeId) -> Result<NodeId> {
        let patches = volume_to_patches(g, x, self.patch)?;
        self.proj.forward(g, p, patches)
    }
}

/// 2x2x2 token downsampling: concatenate the cell (8C) and project to 2C.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub channels: usize,
    pub proj: Linear,
}

impl PatchMerge {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), 8 * channels, 2 * channels, false, rng);
        Self { channels, proj }
    }

    /// `[B, h·w·d, C]` on `grid` to `[B, h·w·d/8, 2C]` on the halved grid.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        tokens: NodeId,
        grid: [usize; 3],
    ) -> Result<(NodeId, [usize; 3])> {
        let cells = gather_cells(g, tokens, grid, self.channels)?;
        let out = self.proj.forward(g, p, cells)?;
        Ok((out, grid.map(|n| n / 2)))
    }
}

/// `[B, L, C]` to `[B, L/8, 8C]` in the documented corner order.
pub fn gather_cells<T: Real>(g: &mut Graph<T>, tokens: NodeId, grid: [usize; 3], c: usize) -> Result<NodeId> {
    let s = g.shape(tokens).to_vec();
    let l: usize = grid.iter().product();
    if s.len() != 3 || s[1] != l || s[2] != c {
        return Err(Error::shape("patch_merge", format!("tokens {s:?} on grid {grid:?} with C={c}")));
    }
    if grid.iter().any(|&n| n % 2 != 0) {
        return Err(Error::shape("patch_merge", format!("grid {grid:?} has an odd extent")));
    }
    let b = s[0];
    let [h, w, d] = grid;
    let split = g.reshape(tokens, &[b, h / 2, 2, w / 2, 2, d / 2, 2, c])?;
    let moved = g.permute(split, &[0, 1, 3, 5, 2, 4, 6, 7])?;
    g.reshape(moved, &[b, l / 8, 8 * c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn token_counts() {
        assert_eq!(patch_token_count([192, 208, 176], 4).unwrap(), 109_824);
        assert_eq!(patch_token_count([8, 8, 8], 8).unwrap(), 1);
        assert!(patch_token_count([8, 8, 6], 4).is_err());
    }

    #[test]
    fn unit_patches_are_reordered_voxels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 2, 3, 2], |i| (i[0] * 100 + i[1] * 10 + i[2] * 3 + i[3]) as f64));
        let t = volume_to_patches(&mut g, x, 1).unwrap();
        assert_eq!(g.shape(t), &[1, 12, 2]);
        let v = g.value(t).clone();
        // token (1, 2, 1) has raster index (1*3 + 2)*2 + 1 = 11
        assert_eq!(v.at(&[0, 11, 0]), 10.0 + 6.0 + 1.0);
        assert_eq!(v.at(&[0, 11, 1]), 117.0);
        let back = tokens_to_volume(&mut g, t, [2, 3, 2]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn odd_grid_rejected() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::zeros(vec![1, 12, 3]));
        assert!(gather_cells(&mut g, t, [2, 3, 2], 3).is_err());
    }
}
