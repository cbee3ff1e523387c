//! Core of fedforge: turns a structured federated-learning task query into a
//! validated multi-file FL codebase.
//!
//! The pipeline has three phases, each in its own module:
//!
//! - [`planning`]: a planning agent drafts a research plan (with retrieval
//!   tools), a reflection agent critiques it, and a human approves or revises.
//! - [`codegen`]: a supervisor splits the plan into a per-module blueprint and
//!   coder/tester pairs build the modules in dependency order.
//! - [`eval`]: the integrated codebase runs in a sandbox, logs are diagnosed in
//!   two layers, and a debugger patches the code until it is certified or the
//!   correction budget runs out.
//!
//! [`orchestrator`] persists runs as an append-only event log and drives the
//! phases. Every model call goes through [`llm`], whose scripted backend makes
//! the whole pipeline reproducible offline.

pub mod clock;
pub mod codebase;
pub mod codegen;
pub mod eval;
pub mod fence;
pub mod fixtures;
pub mod llm;
pub mod orchestrator;
pub mod planning;
pub mod prompts;
pub mod retrieval;
pub mod task_spec;
pub mod template;

pub use codebase::{CodebaseVersion, ModuleKind};
pub use task_spec::{BenchmarkRegistry, ExperimentConfig, TaskQuery};
