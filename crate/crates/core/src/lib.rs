//! Relational neural machines: neural networks coupled with weighted
//! first-order logic constraints.

pub mod data;
pub mod experiment;
pub mod fuzzy;
pub mod grounding;
pub mod infer;
pub mod kb;
pub mod net;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod train;
