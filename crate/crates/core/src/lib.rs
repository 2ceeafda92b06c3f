//! Core of the reproducible research platform.
//!
//! A project is a Git repository carrying an environment definition
//! (`.binder/`, `binder/` or the repository root) and a dataset manifest
//! (`.rrp/datasets.yaml`). The modules here turn such a repository into a
//! planned and built container image, run it as a session with datasets
//! mounted read-only from a research data management server, and export the
//! result as shareable, archivable, replayable artifacts.
//!
//! - [`project`]: clone, parse and validate project repositories.
//! - [`planner`]: deterministic build plans, container recipes and image references.
//! - [`runtime`]: container runtime adapter with simulated and daemon backends.
//! - [`rdms`]: dataset server client and the reference server.
//! - [`orchestrator`]: project lifecycle, workspaces, journals, shares and archives.
//! - [`bundler`]: player bundles and player scripts.

pub mod bundler;
pub mod config;
pub mod demo;
pub mod digest;
pub mod fuzz;
pub mod orchestrator;
pub mod planner;
pub mod project;
pub mod rdms;
pub mod runtime;
pub mod tarutil;

pub use config::PlatformConfig;

/// Version string recorded in generated artifacts.
pub const GENERATOR: &str = concat!("rrp ", env!("CARGO_PKG_VERSION"));
