//! End-to-end spectral estimators.

pub mod hdp;
pub mod ibp;

pub use hdp::{fit_hdp, fit_hdp_moments, heldout_perword_nll, HdpConfig, HdpFit};
pub use ibp::{fit_ibp_linear_gaussian, fit_isfa, invert_f3, invert_f4, Branch, IbpConfig, IbpFit, MomentSource};
