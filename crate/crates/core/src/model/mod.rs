//! Network assembly: mirror attention, region pooling, the detection
//! network and the Siamese comparison heads.

pub mod attention;
pub mod dnet;
pub mod pooling;
pub mod siamese;

pub use attention::{mirror_attention, AttentionMode, MirrorAttentionParams};
pub use dnet::{
    dnet_forward, dnet_loss, line_feature, regress_line, CandidateLabel, DNetParams, DNetTopology,
    ImageFeatures, LineGeometry, LineOffset,
};
pub use pooling::{region_pool, PoolRegions};
pub use siamese::{mnet_forward, rnet_forward, SiameseHeadParams};
