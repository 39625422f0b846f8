//! Neuro-symbolic referring-expression grounding on synthetic 3D scenes.
//!
//! Programs like `relate(filter(scene(), chair), filter(scene(), shelf),
//! beside)` execute differentiably over learned concept score tensors;
//! training uses only (scene, query, answer) supervision plus constraint
//! regularizers (symmetry, exclusivity, sparsity) and synonym augmentation
//! distilled from language rules.
//!
//! Module map:
//! - [`scene`]: synthetic scenes, detector noise, IoU matching, geometric oracle
//! - [`dsl`]: program AST, parser/printer, utterance templates, query generation
//! - [`concepts`]: parameter store, feature encoders, score tensors
//! - [`exec`]: differentiable executor with trace recording, one-hot oracle mode
//! - [`learn`]: losses, reverse-mode gradients, synonym augmentation, training
//! - [`rules`]: constraint distillation (remote/replay/fixture), antonyms, composition
//! - [`eval`]: accuracy metrics, zero-shot/transfer evaluation, sweeps
//! - [`data`]: dataset assembly and line-delimited serialization
//! - [`tape`]: the small autodiff engine everything records onto

pub mod concepts;
pub mod data;
pub mod dsl;
pub mod eval;
pub mod exec;
pub mod learn;
pub mod rules;
pub mod scene;
pub mod tape;
