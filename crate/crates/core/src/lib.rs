//! Multi-LLM finite automata.
//!
//! States are message-to-message functions (language models, writer modules,
//! or points where the user speaks), edges carry prioritised triggers, and
//! conversation histories are shared through an explicit attachment graph.
//!
//! ```
//! use std::sync::Arc;
//! use mfa_core::{dsl, runner};
//!
//! let text = r#"
//! automaton "echo" {
//!   state q_0 user
//!   state l_1 dialer pattern = "You said: {msg}"
//!   edge q_0 -> l_1
//!   edge l_1 -> q_0
//!   initial q_0
//! }"#;
//! let mut automaton = dsl::parse(text).unwrap();
//! assert!(automaton.validate().is_ok());
//! let events = runner::run_scripted(Arc::new(automaton), &["hi", "/quit"], 0).unwrap();
//! assert_eq!(runner::displayed(&events), ["You said: hi"]);
//! ```

pub mod backends;
pub mod dsl;
pub mod eval;
pub mod history;
pub mod ids;
pub mod model;
pub mod runner;
pub mod select;
pub mod triggers;
pub mod validate;
pub mod workload;

pub use ids::{ArchiveId, StateId, TriggerId};
pub use model::{
    AccessMode, Automaton, CasePolicy, DisplayPolicy, HistoryBinding, ModelError, Params,
    StateKind, StateNode, TriggerDef, TriggerEdge, TriggerKind,
};
pub use runner::{Event, EventBody, RunError, Session, Status};
pub use select::{effective_value, select_next, Decision, EdgeEvaluation};
pub use validate::{Code, Issue, ValidationReport};
pub use workload::{estimate_workload, ChainBound, WorkloadEstimate};
