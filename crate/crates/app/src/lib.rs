//! HTTP service and analysis command line for the click-point login.
//!
//! `authd` serves [`http::router`]; `authcli` wraps the renderers in [`cli`].

pub mod cli;
pub mod config;
pub mod http;
pub mod metrics;

pub use config::{AppState, Config, RngSource};
pub use metrics::export_timings_csv;
