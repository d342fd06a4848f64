//! Maximum-likelihood identification of jump Markov linear systems.
//!
//! The E-step is a Gaussian-sum forward filter and backward information
//! filter fused into pairwise joint smoothed mixtures; the M-step works
//! entirely on square-root factors.

pub mod backward;
pub mod dynamics;
pub mod em;
pub mod error;
pub mod filter;
pub mod io;
pub mod mixture;
pub mod model;
pub mod numkit;
pub mod simulate;
pub mod smoother;

pub use backward::BifOutput;
pub use em::{run_em, EmConfig, EmIterate, EmResult, Freeze, SuffStats};
pub use error::{JmlsError, Result};
pub use filter::{run_filter, FilterOutput};
pub use mixture::{GaussianComponent, HybridMixture, LikelihoodComponent, UNBOUNDED};
pub use model::{Convention, JmlsModel, ModeParams, TransformedMode};
pub use numkit::UtFactor;
pub use simulate::{simulate, Dataset, InputLaw};
pub use smoother::JointSmoothedMixture;
