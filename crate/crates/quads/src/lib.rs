//! Training engine for compact speech-intent classifiers.
//!
//! A small student network learns from a frozen teacher while its weights
//! are simultaneously compressed into per-layer k-means codebooks. The two
//! concerns alternate: distillation phases pull the student's latent
//! features toward the teacher's under a blended L1/cross-entropy
//! objective, quantization phases re-fit the codebooks and train the
//! shared centroids directly through the task loss, and a final
//! quantization pass produces the deployable bit-packed model.
//!
//! The crate is self-contained: a dense autodiff engine over `f32`/`f64`
//! tensors, a log-mel frontend, the models, losses, the alternating
//! trainer, evaluation and efficiency metrics, a bit-exact packed model
//! format, and a deterministic synthetic corpus for end-to-end runs.
//! Everything is seeded; identical seeds give identical runs, bit for bit.
//!
//! The `book/` directory of the repository walks through each concept
//! with runnable snippets; the same chapters compile as doc-tests via the
//! [`guide`] module.

pub mod autodiff;
pub mod dsp;
pub mod guide;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod rng;
pub mod train;
