//! Few-shot domain adaptation by transferring a shared invertible mechanism.
//!
//! All domains are assumed to share one invertible map `f` from independent
//! latent components (ICs) to observed rows `z = (x, y)`. The pipeline
//! estimates `f` from source domains by contrastive nonlinear ICA, extracts
//! the ICs of the few target rows, recombines them dimension-wise,
//! synthesizes new target-like rows through `f`, filters them with a
//! one-class SVM fitted on the sources, and fits kernel ridge regression on
//! the result.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod ica;
pub mod linalg;
pub mod novelty;
pub mod optim;
pub mod ridge;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod ustat;

pub use augment::AugmentedSet;
pub use data::{DomainDataset, PanelSchema};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, Method, ResultTable};
pub use flow::{FlowConfig, FlowParams};
pub use ica::{GclModel, GclTrainConfig};
pub use novelty::OcsvmModel;
pub use ridge::KrrModel;
pub use synth::{GroundTruthMixing, IcFamily, SynthConfig};
pub use tensor::Tensor;
