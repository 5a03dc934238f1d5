//! Core logic for `toolplane`, a control plane that agents reach through a
//! single tool binding.
//!
//! Instead of wiring every tool into every agent, an agent binds one
//! manifest — the control plane itself — and submits plain-language intents.
//! The control plane keeps the real tool inventory in a [`registry`],
//! resolves each intent to a concrete tool with the [`resolver`], expands
//! dependencies into an ordered plan with the [`router`], enforces schema
//! and policy with [`schema`] and [`rules`], runs the plan with retry,
//! fallback, and default-response recovery in the [`executor`], appends an
//! audit record per request in the [`tracker`], and folds agent ratings
//! back into routing through [`feedback`]. The [`service`] module ties the
//! pipeline together behind one `handle_invoke` entry point.
//!
//! Everything here is transport-agnostic; the `toolplane` binary crate puts
//! an HTTP server and a CLI in front of [`service::ControlPlane`].

pub mod config;
pub mod executor;
pub mod feedback;
pub mod payload;
pub mod registry;
pub mod resolver;
pub mod router;
pub mod rules;
pub mod schema;
pub mod service;
pub mod tracker;

pub use config::Config;
pub use payload::Payload;
pub use service::{ControlPlane, InvocationRequest, InvocationResponse};
