//! Seeded stand-ins for the cloud model, device model, codebook and
//! Inter-Head.
//!
//! Ground truth comes from a Voronoi "scene". Both models see the true
//! token as a strong logit; the device sees extra noise, much more of it on
//! region boundaries. A small context term makes logits depend on the
//! decoded history.

mod head;
mod model;
mod scene;

pub use head::{inter_head_forward, AnalyticHeadConfig, InterHeadParams, HEAD_MAGIC};
pub(crate) use head::head_preactivations;
pub use model::{
    cloud_decoder_step, context_summary, device_hidden, embed, DeviceState, ModelParams, ToyWorld,
    CONTEXT_MIX, CONTEXT_WINDOW, SUMMARY_LEN, SUMMARY_TOP_WIDTHS,
};
pub use scene::{generate_scene, SceneSpec, TokenGrid};
