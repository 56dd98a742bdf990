//! Training-free image emotion editing driven by a typed multimodal
//! sentiment knowledge graph.
//!
//! The pipeline runs in four stages. [`region`] localizes the affective
//! region of the source image from backbone attention. [`kg`] stores the
//! scene/object/attribute/emotion graph and retrieves reasoning paths
//! toward a target emotion, with nearest-neighbor completion when no
//! direct path exists. [`cues`] scores and filters the retrieved
//! attribute cues and compiles them into an editing instruction. [`dsee`]
//! performs the edit in latent space: deterministic DDIM inversion, dual
//! reconstruction/editing trajectories with classifier-free guidance,
//! hard mask fusion, attention injection, and final harmonization.
//!
//! [`metrics`] provides the evaluation side (CLIP-I proximity, target
//! emotion activation, SSIM, emotion accuracy), [`pipeline`] orchestrates
//! batch runs, and [`clients`] implements the line-JSON and HTTP wire
//! protocols used to plug in external models. Everything ships with
//! deterministic in-process test backends so the whole system runs
//! offline.

pub mod clients;
pub mod cues;
pub mod dsee;
pub mod kg;
pub mod metrics;
pub mod pipeline;
pub mod providers;
pub mod region;
pub mod vecmath;
