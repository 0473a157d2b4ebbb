//! Networks and spatial operators of the registration pipeline.

mod checkpoint;
mod extractor;
mod model;
mod patch;
mod svf;
mod volume;
mod warp;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use extractor::FeatureExtractor;
pub use model::{RegNet, RegNetConfig, RegOutputs, Registration, RegistrationModule, EXTRACTOR_PREFIX, REGISTRATION_PREFIX};
pub use patch::{gather_cells, patch_grid, patch_token_count, tokens_to_volume, volume_to_patches, PatchEmbed, PatchMerge};
pub use svf::{integrate_svf, integrate_svf_node, DEFAULT_INTEGRATION_STEPS};
pub use volume::{DisplacementField, LabelVolume, VelocityField, Volume};
pub use warp::{warp_labels, warp_node, warp_tensor, warp_volume, WarpOp};
