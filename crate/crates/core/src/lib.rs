#![allow(clippy::needless_range_loop)] // index loops mirror the math throughout

//! Toolkit for permuting, perturbing and re-synchronizing the neurons of
//! small sequential neural networks.
//!
//! Neuron order inside a layer is a free symmetry: permuting a layer's
//! neurons and compensating on the next layer's input channels preserves the
//! model function while scrambling parameter locations, which defeats any
//! reader that relies on those locations. This crate implements that attack,
//! the cosine-similarity matching that undoes it (even under noise,
//! fine-tuning, quantization and pruning), the scalar-multiple attack that
//! cosine matching cannot see together with its norm-verification
//! counter-measure and closed-form KL impact, and a projection watermark
//! that demonstrates the full attack/counter-attack cycle.
//!
//! ```
//! use nwrs_core::attack::permute_layer;
//! use nwrs_core::model::{init_weights, reference_mlp_layers};
//! use nwrs_core::resync::{resync_model, MatchMethod};
//! use nwrs_core::rng::{streams, CounterRng};
//! use nwrs_core::Permutation;
//!
//! let model = init_weights(&reference_mlp_layers(), &[8], 7)?;
//! let mut rng = CounterRng::new(7, streams::PERMUTE);
//! let pi = Permutation::random(32, &mut rng);
//!
//! // scramble the hidden layer, then recover the ordering by similarity
//! let suspect = permute_layer(&model, 1, &pi)?;
//! let (restored, report) =
//!     resync_model(&model, &suspect, MatchMethod::GreedyGlobal, &[(1, pi)])?;
//! assert_eq!(report.overall_psi, Some(100.0));
//! assert_eq!(restored, model);
//! # Ok::<(), nwrs_core::Error>(())
//! ```

pub mod assignment;
pub mod attack;
pub mod container;
pub mod error;
pub mod integrity;
pub mod model;
pub mod resync;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod watermark;

pub use error::{Error, Result};
pub use model::{Dataset, LayerSpec, ModelBundle};
pub use resync::{MatchMethod, ResyncReport};
pub use tensor::{Permutation, Tensor};
