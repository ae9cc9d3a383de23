//! Governed time-series task harness.
//!
//! The crate is organized around a task tuple: a parseable task file
//! ([`task_model`]), a workspace of reconstructed data files
//! ([`data_interface`]), and a validation interface ([`validation_gate`])
//! that gates scoring behind explicit validity checks. On top of that sit a
//! local competition-style HTTP service ([`task_server`]), the runtime
//! protocol records and event log ([`protocol_engine`]), a file-backed
//! memory directory ([`memory_store`]), and the governed execution loop with
//! deterministic scripted roles ([`orchestration`]).

pub mod data_interface;
pub mod memory_store;
pub mod orchestration;
pub mod protocol_engine;
pub mod task_model;
pub mod task_server;
pub mod util;
pub mod validation_gate;
