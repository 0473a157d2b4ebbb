use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Binding, Conv3dLayer, Graph, NodeId, ParamStore};

/// Two-level UNet with a single stride-2 downsampling; output keeps full resolution.
///
/// ```text
/// e0 = silu(conv3(x))            full res
/// d  = silu(conv3/2(e0))         half res
/// m  = silu(conv3(d))            half res
/// f  = conv1([up2(m), e0])       full res, `width` channels
/// ```
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub width: usize,
    enc: Conv3dLayer,
    down: Conv3dLayer,
    mid: Conv3dLayer,
    fuse: Conv3dLayer,
}

impl FeatureExtractor {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            width,
            enc: Conv3dLayer::new(store, &format!("{name}.enc"), in_channels, width, 3, 1, rng),
            down: Conv3dLayer::new(store, &format!("{name}.down"), width, width, 3, 2, rng),
            mid: Conv3dLayer::new(store, &format!("{name}.mid"), width, width, 3, 1, rng),
            fuse: Conv3dLayer::new(store, &format!("{name}.fuse"), 2 * width, width, 1, 1, rng),
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(in_channels: usize, width: usize) -> usize {
        Conv3dLayer::param_count(in_channels, width, 3)
            + 2 * Conv3dLayer::param_count(width, width, 3)
            + Conv3dLayer::param_count(2 * width, width, 1)
    }

    /// `[C_in, H, W, D]` to `[width, H, W, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1..].iter().any(|&n| n % 2 != 0) {
            return Err(Error::shape("feature_extract", format!("extents of {s:?} must be even")));
        }
        let e0 = self.enc.forward(g, p, x)?;
        let e0 = g.silu(e0)?;
        let d = self.down.forward(g, p, e0)?;
        let d = g.silu(d)?;
        let m = self.mid.forward(g, p, d)?;
        let m = g.silu(m)?;
        let up = g.upsample_nearest(m, 2)?;
        let cat = g.concat(&[up, e0], 0)?;
        self.fuse.forward(g, p, cat)
    }
}
