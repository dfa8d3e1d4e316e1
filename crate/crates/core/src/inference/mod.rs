//! Posterior sampling and summaries for the VP model.

pub mod ess;
pub mod mcmc;
pub mod summary;

pub use ess::{ess_latent_update, EssStep};
pub use mcmc::{run_mcmc, ChainDraws, HyperName, McmcConfig, PosteriorDraws};
pub use summary::{dic_waic, ks_statistic, quantile_type7, split_rhat, vp_table, InformationCriteria, VpTable};
