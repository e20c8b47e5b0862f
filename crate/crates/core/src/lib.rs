//! Quickest change-point detection in linear structural equation models with
//! adaptive do-interventions.
//!
//! The crate is organised bottom-up:
//!
//! - [`sem`]: linear SEMs, do-interventions, moments and sampling.
//! - [`centralization`]: the centering transform and post-change moments.
//! - [`divergence`]: Gaussian KL divergences and the per-arm KL table.
//! - [`design`]: intervention values that make the change origin the KL argmax.
//! - [`detector`]: MULTI and MAX window-limited CUSUM with adaptive arms.
//! - [`experiment`]: scenario generation, presets and Monte-Carlo sweeps.
//! - [`cli`]: the `causal-qcd` command-line front end.

pub mod centralization;
pub mod cli;
pub mod design;
pub mod detector;
pub mod divergence;
pub mod error;
pub mod experiment;
pub mod rng;
pub mod sem;

pub use centralization::{CenteredObservation, Centralizer, GaussianMoments};
pub use design::{compute_plan, verify_plan, InterventionPlan, PlanRule};
pub use detector::{DetectorConfig, Policy, Variant};
pub use divergence::{gaussian_kl, kl_full, kl_marginal, kl_table, KlTable};
pub use error::{Error, Result};
pub use sem::{CausalModel, ChangeSpec, Intervention};
