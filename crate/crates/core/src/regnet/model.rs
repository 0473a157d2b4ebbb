use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::extractor::FeatureExtractor;
use super::patch::{tokens_to_volume, PatchEmbed, PatchMerge};
use super::svf::{integrate_svf_node, DEFAULT_INTEGRATION_STEPS};
use super::volume::{DisplacementField, VelocityField, Volume};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::ssm::{sinusoidal_pe, MambaBlock, MambaConfig};
use crate::tensor::{Binding, Conv3dLayer, Graph, NodeId, ParamStore};

/// Parameter-name prefix of the feature extractor.
pub const EXTRACTOR_PREFIX: &str = "extractor.";
/// Parameter-name prefix of the registration module.
pub const REGISTRATION_PREFIX: &str = "reg.";

/// Architecture of the full network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegNetConfig {
    /// Shared feature extractor in front of the registration module.
    pub feature_extractor: bool,
    pub extractor_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Encoder stages; every stage but the last ends in a patch merge.
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    /// Channels of the full-resolution convolutional branch.
    pub horizontal_width: usize,
    /// Channels the decoder hands back at full resolution.
    pub decoder_width: usize,
    pub fusion_width: usize,
    /// Integrate the network output as a stationary velocity field.
    pub integrate: bool,
    pub integration_steps: usize,
}

impl Default for RegNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RegNetConfig {
    /// Small widths for CPU-scale volumes (32³).
    pub fn desk() -> Self {
        Self {
            feature_extractor: true,
            extractor_width: 16,
            patch_size: 2,
            embed_dim: 16,
            stages: 3,
            blocks_per_stage: 2,
            d_state: 8,
            expand: 2,
            conv_width: 4,
            horizontal_width: 8,
            decoder_width: 8,
            fusion_width: 8,
            integrate: true,
            integration_steps: DEFAULT_INTEGRATION_STEPS,
        }
    }

    /// Widths for full-size 192×208×176 volumes.
    pub fn full_scale() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 96,
            horizontal_width: 16,
            decoder_width: 16,
            fusion_width: 16,
            ..Self::desk()
        }
    }

    /// Registration module alone on raw intensities, without integration.
    pub fn registration_only(mut self) -> Self {
        self.feature_extractor = false;
        self.integrate = false;
        self
    }

    /// Smallest sensible network, for gradient checks.
    pub fn minimal() -> Self {
        Self {
            feature_extractor: true,
            extractor_width: 2,
            patch_size: 2,
            embed_dim: 4,
            stages: 2,
            blocks_per_stage: 1,
            d_state: 2,
            expand: 2,
            conv_width: 2,
            horizontal_width: 2,
            decoder_width: 2,
            fusion_width: 2,
            integrate: true,
            integration_steps: 3,
        }
    }

    pub fn registration_input_channels(&self) -> usize {
        if self.feature_extractor {
            2 * self.extractor_width
        } else {
            2
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn mamba(&self, stage: usize) -> MambaConfig {
        MambaConfig {
            d_model: self.stage_channels(stage),
            d_state: self.d_state,
            expand: self.expand,
            conv_width: self.conv_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::Config { field: name.into(), message: msg.into() });
        if self.stages == 0 {
            return field("stages", "must be >= 1");
        }
        if self.patch_size == 0 {
            return field("patch_size", "must be >= 1");
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return field("embed_dim", "must be even and >= 2 (sinusoidal embedding)");
        }
        for (name, v) in [
            ("blocks_per_stage", self.blocks_per_stage),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("conv_width", self.conv_width),
            ("horizontal_width", self.horizontal_width),
            ("decoder_width", self.decoder_width),
            ("fusion_width", self.fusion_width),
        ] {
            if v == 0 {
                return field(name, "must be >= 1");
            }
        }
        if self.feature_extractor && self.extractor_width == 0 {
            return field("extractor_width", "must be >= 1");
        }
        Ok(())
    }

    /// Extents must be divisible by `P·2^(stages-1)` (and even for the extractor).
    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let unit = self.patch_size << (self.stages - 1);
        if dims.iter().any(|&n| n % unit != 0) {
            return Err(Error::shape(
                "registration_forward",
                format!("extents {dims:?} must be divisible by patch_size·2^(stages-1) = {unit}"),
            ));
        }
        if self.feature_extractor && dims.iter().any(|&n| n % 2 != 0) {
            return Err(Error::shape("feature_extract", format!("extents {dims:?} must be even")));
        }
        Ok(())
    }
}

/// Dual-branch registration module: a full-resolution convolutional branch and
/// a patch-token encoder of selective-SSM stages with a convolutional decoder,
/// fused by concatenation and a pointwise convolution before the flow head.
#[derive(Clone, Debug)]
pub struct RegistrationModule {
    config: RegNetConfig,
    horizontal: [Conv3dLayer; 2],
    embed: PatchEmbed,
    stages: Vec<Vec<MambaBlock>>,
    merges: Vec<PatchMerge>,
    decoder: Vec<Conv3dLayer>,
    decoder_out: Conv3dLayer,
    fuse: Conv3dLayer,
    pub(crate) head: Conv3dLayer,
}

impl RegistrationModule {
    fn new<T: Real>(store: &mut ParamStore<T>, config: &RegNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let cin = config.registration_input_channels();
        let hw = config.horizontal_width;
        let pre = REGISTRATION_PREFIX;
        let horizontal = [
            Conv3dLayer::new(store, &format!("{pre}horizontal.0"), cin, hw, 3, 1, rng),
            Conv3dLayer::new(store, &format!("{pre}horizontal.1"), hw, hw, 3, 1, rng),
        ];
        let embed = PatchEmbed::new(store, &format!("{pre}embed"), cin, config.patch_size, config.embed_dim, rng);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for s in 0..config.stages {
            let blocks = (0..config.blocks_per_stage)
                .map(|b| MambaBlock::new(store, &format!("{pre}stage{s}.block{b}"), config.mamba(s), rng))
                .collect();
            stages.push(blocks);
            if s + 1 < config.stages {
                merges.push(PatchMerge::new(store, &format!("{pre}merge{s}"), config.stage_channels(s), rng));
            }
        }
        let decoder = (0..config.stages.saturating_sub(1))
            .map(|s| {
                let (lo, hi) = (config.stage_channels(s), config.stage_channels(s + 1));
                Conv3dLayer::new(store, &format!("{pre}decoder{s}"), hi + lo, lo, 3, 1, rng)
            })
            .collect();
        let decoder_out = Conv3dLayer::new(
            store,
            &format!("{pre}decoder_out"),
            config.stage_channels(0),
            config.decoder_width,
            3,
            1,
            rng,
        );
        let fuse = Conv3dLayer::new(store, &format!("{pre}fuse"), hw + config.decoder_width, config.fusion_width, 1, 1, rng);
        let head = Conv3dLayer::new(store, &format!("{pre}head"), config.fusion_width, 3, 3, 1, rng);
        head.init_small(store, 1e-5, rng);
        Self {
            config: config.clone(),
            horizontal,
            embed,
            stages,
            merges,
            decoder,
            decoder_out,
            fuse,
            head,
        }
    }

    /// `[C_in, H, W, D]` concatenated features to a `[3, H, W, D]` velocity.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, input: NodeId) -> Result<NodeId> {
        let cfg = &self.config;
        let s = g.shape(input).to_vec();
        if s.len() != 4 || s[0] != cfg.registration_input_channels() {
            return Err(Error::shape(
                "registration_forward",
                format!("expected [{}, H, W, D], got {s:?}", cfg.registration_input_channels()),
            ));
        }
        cfg.check_dims([s[1], s[2], s[3]])?;

        let mut h = input;
        for conv in &self.horizontal {
            h = conv.forward(g, p, h)?;
            h = g.silu(h)?;
        }

        let mut grid = [s[1], s[2], s[3]].map(|n| n / cfg.patch_size);
        let mut tokens = self.embed.forward(g, p, input)?;
        let l: usize = grid.iter().product();
        let pe = sinusoidal_pe::<T>(l, cfg.embed_dim)?.into_reshape(vec![1, l, cfg.embed_dim])?;
        let pe = g.constant(pe);
        tokens = g.add(tokens, pe)?;

        let mut skips = Vec::with_capacity(cfg.stages);
        for (st, blocks) in self.stages.iter().enumerate() {
            for blk in blocks {
                tokens = blk.forward(g, p, tokens)?;
            }
            skips.push((tokens, grid));
            if let Some(merge) = self.merges.get(st) {
                let (t, gr) = merge.forward(g, p, tokens, grid)?;
                tokens = t;
                grid = gr;
            }
        }

        let (deep, deep_grid) = skips.pop().expect("at least one stage");
        let mut dec = tokens_to_volume(g, deep, deep_grid)?;
        for (st, conv) in self.decoder.iter().enumerate().rev() {
            let (skip, skip_grid) = skips[st];
            let up = g.upsample_nearest(dec, 2)?;
            let skip = tokens_to_volume(g, skip, skip_grid)?;
            let cat = g.concat(&[up, skip], 0)?;
            dec = conv.forward(g, p, cat)?;
            dec = g.silu(dec)?;
        }
        dec = self.decoder_out.forward(g, p, dec)?;
        dec = g.silu(dec)?;
        if cfg.patch_size > 1 {
            dec = g.upsample_nearest(dec, cfg.patch_size)?;
        }

        let cat = g.concat(&[h, dec], 0)?;
        let fused = self.fuse.forward(g, p, cat)?;
        let fused = g.silu(fused)?;
        self.head.forward(g, p, fused)
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct RegOutputs {
    pub moving_features: Option<NodeId>,
    pub fixed_features: Option<NodeId>,
    /// Raw network output (a velocity when integration is on).
    pub velocity: NodeId,
    pub displacement: NodeId,
}

/// Result of registering one pair outside of training.
#[derive(Clone, Debug)]
pub struct Registration<T> {
    pub velocity: VelocityField<T>,
    pub displacement: DisplacementField<T>,
}

/// Feature extractor + registration module + integration layer, with parameters.
#[derive(Clone, Debug)]
pub struct RegNet<T> {
    pub config: RegNetConfig,
    pub params: ParamStore<T>,
    extractor: Option<FeatureExtractor>,
    registration: RegistrationModule,
}

impl<T: Real> RegNet<T> {
    pub fn new(config: RegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let extractor = config
            .feature_extractor
            .then(|| FeatureExtractor::new(&mut params, "extractor", 1, config.extractor_width, &mut rng));
        let registration = RegistrationModule::new(&mut params, &config, &mut rng);
        Ok(Self {
            config,
            params,
            extractor,
            registration,
        })
    }

    pub fn extractor(&self) -> Option<&FeatureExtractor> {
        self.extractor.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.params.num_elements()
    }

    /// Zero the flow head so the network predicts the identity map.
    pub fn zero_head(&mut self) {
        self.params.zero_prefix(&format!("{REGISTRATION_PREFIX}head"));
    }

    /// Apply the shared extractor to one `[1, H, W, D]` volume.
    pub fn extract_features(&self, g: &mut Graph<T>, p: &Binding, x: NodeId) -> Result<NodeId> {
        match &self.extractor {
            Some(e) => e.forward(g, p, x),
            None => Err(Error::InvalidArgument("model has no feature extractor".into())),
        }
    }

    pub fn registration_forward(&self, g: &mut Graph<T>, p: &Binding, f_m: NodeId, f_f: NodeId) -> Result<NodeId> {
        if g.shape(f_m) != g.shape(f_f) {
            return Err(Error::shape(
                "registration_forward",
                format!("moving {:?} vs fixed {:?}", g.shape(f_m), g.shape(f_f)),
            ));
        }
        let cat = g.concat(&[f_m, f_f], 0)?;
        self.registration.forward(g, p, cat)
    }

    /// `moving`, `fixed`: `[1, H, W, D]` intensity nodes.
    pub fn forward(&self, g: &mut Graph<T>, p: &Binding, moving: NodeId, fixed: NodeId) -> Result<RegOutputs> {
        let (mf, ff) = if self.extractor.is_some() {
            (Some(self.extract_features(g, p, moving)?), Some(self.extract_features(g, p, fixed)?))
        } else {
            (None, None)
        };
        let velocity = self.registration_forward(g, p, mf.unwrap_or(moving), ff.unwrap_or(fixed))?;
        let displacement = if self.config.integrate {
            integrate_svf_node(g, velocity, self.config.integration_steps)?
        } else {
            velocity
        };
        Ok(RegOutputs {
            moving_features: mf,
            fixed_features: ff,
            velocity,
            displacement,
        })
    }

    /// Inference on one pair.
    pub fn register(&self, moving: &Volume<T>, fixed: &Volume<T>) -> Result<Registration<T>> {
        if moving.dims() != fixed.dims() {
            return Err(Error::shape("register", format!("moving {:?} vs fixed {:?}", moving.dims(), fixed.dims())));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let m = g.constant(moving.as_channels());
        let f = g.constant(fixed.as_channels());
        let out = self.forward(&mut g, &p, m, f)?;
        Ok(Registration {
            velocity: VelocityField::new(g.value(out.velocity).clone())?,
            displacement: DisplacementField::new(g.value(out.displacement).clone())?,
        })
    }
}
