//! The automaton data model: states, triggers, edges and history bindings.
//!
//! An [`Automaton`] is built either programmatically (`add_state`, `add_edge`, ...)
//! or by the DSL parser. It starts out unvalidated; [`Automaton::validate`] runs
//! the structural checks and flips the `validated` flag when no error is found.
//! Any later mutation clears the flag again.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ArchiveId, StateId, TriggerId};
use crate::validate::{self, ValidationReport};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("duplicate {kind} id `{id}`")]
    Duplicate { kind: &'static str, id: String },
    #[error("priority {0} is reserved or out of range (must be >= 1)")]
    BadPriority(u32),
    #[error("unknown trigger `{0}`")]
    UnknownTrigger(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateKind {
    User,
    Dialer,
    Writer,
}

impl StateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StateKind::User => "user",
            StateKind::Dialer => "dialer",
            StateKind::Writer => "writer",
        }
    }
}

impl fmt::Display for StateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether a machine state's output is shown to the user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisplayPolicy {
    Always,
    Never,
    /// Shown only when the selected successor is a user state.
    Auto,
}

impl DisplayPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            DisplayPolicy::Always => "always",
            DisplayPolicy::Never => "never",
            DisplayPolicy::Auto => "auto",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "always" => Some(DisplayPolicy::Always),
            "never" => Some(DisplayPolicy::Never),
            "auto" => Some(DisplayPolicy::Auto),
            _ => None,
        }
    }
}

/// Access mode of a history attachment: the `E_r`, `E_w` and `E_rw` edge sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessMode {
    #[serde(rename = "r")]
    Read,
    #[serde(rename = "w")]
    Write,
    #[serde(rename = "rw")]
    ReadWrite,
}

impl AccessMode {
    pub fn can_read(self) -> bool {
        matches!(self, AccessMode::Read | AccessMode::ReadWrite)
    }

    pub fn can_write(self) -> bool {
        matches!(self, AccessMode::Write | AccessMode::ReadWrite)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AccessMode::Read => "r",
            AccessMode::Write => "w",
            AccessMode::ReadWrite => "rw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "r" => Some(AccessMode::Read),
            "w" => Some(AccessMode::Write),
            "rw" => Some(AccessMode::ReadWrite),
            _ => None,
        }
    }
}

impl fmt::Display for AccessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HistoryBinding {
    pub archive: ArchiveId,
    pub mode: AccessMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CasePolicy {
    #[default]
    Insensitive,
    Sensitive,
}

impl CasePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            CasePolicy::Insensitive => "insensitive",
            CasePolicy::Sensitive => "sensitive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "insensitive" => Some(CasePolicy::Insensitive),
            "sensitive" => Some(CasePolicy::Sensitive),
            _ => None,
        }
    }
}

/// Kind-specific configuration shared by states and triggers.
///
/// Which fields are meaningful depends on the owner: a scripted dialer uses
/// `script`/`script_file`, an HTTP dialer `endpoint`/`model`/`temperature`,
/// a writer `sink`/`field` and optionally `pattern` to extract the recorded
/// value, a template dialer `pattern`, a keyword trigger `keywords`/`case`.
/// Relative paths resolve against the definition file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timeout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub case: Option<CasePolicy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sink: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl Params {
    pub fn is_empty(&self) -> bool {
        *self == Params::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateNode {
    pub id: StateId,
    pub kind: StateKind,
    pub is_final: bool,
    /// Explicit display policy; `None` falls back to the kind's default.
    pub display: Option<DisplayPolicy>,
    /// At most one entry in a valid automaton; kept as a list so that the
    /// validator can report multiple attachments.
    pub history: Vec<HistoryBinding>,
    pub params: Params,
}

impl StateNode {
    pub fn new(id: impl Into<StateId>, kind: StateKind) -> Self {
        Self {
            id: id.into(),
            kind,
            // user states are inherently final
            is_final: kind == StateKind::User,
            display: None,
            history: Vec::new(),
            params: Params::default(),
        }
    }

    pub fn user(id: impl Into<StateId>) -> Self {
        Self::new(id, StateKind::User)
    }

    pub fn dialer(id: impl Into<StateId>) -> Self {
        Self::new(id, StateKind::Dialer)
    }

    pub fn writer(id: impl Into<StateId>) -> Self {
        Self::new(id, StateKind::Writer)
    }

    pub fn final_state(mut self) -> Self {
        self.is_final = true;
        self
    }

    pub fn with_display(mut self, display: DisplayPolicy) -> Self {
        self.display = Some(display);
        self
    }

    pub fn with_history(mut self, archive: impl Into<ArchiveId>, mode: AccessMode) -> Self {
        self.history.push(HistoryBinding {
            archive: archive.into(),
            mode,
        });
        self
    }

    pub fn with_params(mut self, params: Params) -> Self {
        self.params = params;
        self
    }

    pub fn with_script<I, S>(mut self, lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.params.script = Some(lines.into_iter().map(Into::into).collect());
        self
    }

    pub fn is_user(&self) -> bool {
        self.kind == StateKind::User
    }

    pub fn is_machine(&self) -> bool {
        !self.is_user()
    }

    pub fn display_policy(&self) -> DisplayPolicy {
        self.display.unwrap_or(match self.kind {
            StateKind::Writer => DisplayPolicy::Never,
            StateKind::User | StateKind::Dialer => DisplayPolicy::Always,
        })
    }

    pub fn attachment(&self) -> Option<&HistoryBinding> {
        self.history.first()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerKind {
    Always,
    Keyword,
    Pattern,
    Llm,
}

impl TriggerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TriggerKind::Always => "always",
            TriggerKind::Keyword => "keyword",
            TriggerKind::Pattern => "pattern",
            TriggerKind::Llm => "llm",
        }
    }
}

/// Default temperature of LLM-backed triggers.
pub const CLASSIFIER_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TriggerDef {
    pub id: TriggerId,
    pub kind: TriggerKind,
    default_priority: u32,
    pub history: Vec<HistoryBinding>,
    pub params: Params,
}

impl TriggerDef {
    pub fn new(id: impl Into<TriggerId>, kind: TriggerKind) -> Self {
        Self {
            id: id.into(),
            kind,
            default_priority: 1,
            history: Vec::new(),
            params: Params::default(),
        }
    }

    pub fn always(id: impl Into<TriggerId>) -> Self {
        Self::new(id, TriggerKind::Always)
    }

    pub fn keyword<I, S>(id: impl Into<TriggerId>, keywords: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut def = Self::new(id, TriggerKind::Keyword);
        def.params.keywords = Some(keywords.into_iter().map(Into::into).collect());
        def
    }

    pub fn pattern(id: impl Into<TriggerId>, pattern: impl Into<String>) -> Self {
        let mut def = Self::new(id, TriggerKind::Pattern);
        def.params.pattern = Some(pattern.into());
        def
    }

    pub fn get_priority(&self) -> u32 {
        self.default_priority
    }

    pub fn set_priority(&mut self, priority: u32) -> Result<(), ModelError> {
        if priority < 1 {
            return Err(ModelError::BadPriority(priority));
        }
        self.default_priority = priority;
        Ok(())
    }

    pub fn with_priority(mut self, priority: u32) -> Result<Self, ModelError> {
        self.set_priority(priority)?;
        Ok(self)
    }

    pub fn with_history(mut self, archive: impl Into<ArchiveId>, mode: AccessMode) -> Self {
        self.history.push(HistoryBinding {
            archive: archive.into(),
            mode,
        });
        self
    }

    pub fn attachment(&self) -> Option<&HistoryBinding> {
        self.history.first()
    }

    /// Temperature used for classifier calls.
    pub fn temperature(&self) -> f64 {
        self.params.temperature.unwrap_or(CLASSIFIER_TEMPERATURE)
    }
}

/// A directed, trigger-labelled arc between two states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerEdge {
    id: String,
    pub from: StateId,
    pub to: StateId,
    /// Conjunctive guard; empty means the edge always fires.
    pub triggers: Vec<TriggerId>,
    /// Explicit priority. `None` inherits the first trigger's default, else 1.
    pub priority: Option<u32>,
}

impl TriggerEdge {
    pub fn new(from: impl Into<StateId>, to: impl Into<StateId>) -> Self {
        let from = from.into();
        let to = to.into();
        Self {
            id: format!("{from}->{to}"),
            from,
            to,
            triggers: Vec::new(),
            priority: None,
        }
    }

    pub fn on(mut self, trigger: impl Into<TriggerId>) -> Self {
        self.triggers.push(trigger.into());
        self
    }

    pub fn with_priority(mut self, priority: u32) -> Self {
        self.priority = Some(priority);
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }
}

/// A Multi-LLM Finite Automaton definition.
#[derive(Debug, Clone)]
pub struct Automaton {
    name: String,
    states: BTreeMap<StateId, StateNode>,
    triggers: BTreeMap<TriggerId, TriggerDef>,
    archives: BTreeSet<ArchiveId>,
    edges: Vec<TriggerEdge>,
    initial: Option<StateId>,
    validated: bool,
    base_dir: Option<PathBuf>,
}

impl PartialEq for Automaton {
    /// Structural equality; ignores validation status and source location.
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.states == other.states
            && self.triggers == other.triggers
            && self.archives == other.archives
            && self.edges == other.edges
            && self.initial == other.initial
    }
}

impl Automaton {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            states: BTreeMap::new(),
            triggers: BTreeMap::new(),
            archives: BTreeSet::new(),
            edges: Vec::new(),
            initial: None,
            validated: false,
            base_dir: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn add_state(&mut self, state: StateNode) -> Result<(), ModelError> {
        if self.states.contains_key(&state.id) {
            return Err(ModelError::Duplicate {
                kind: "state",
                id: state.id.to_string(),
            });
        }
        self.validated = false;
        self.states.insert(state.id.clone(), state);
        Ok(())
    }

    pub fn add_trigger(&mut self, trigger: TriggerDef) -> Result<(), ModelError> {
        if self.triggers.contains_key(&trigger.id) {
            return Err(ModelError::Duplicate {
                kind: "trigger",
                id: trigger.id.to_string(),
            });
        }
        self.validated = false;
        self.triggers.insert(trigger.id.clone(), trigger);
        Ok(())
    }

    pub fn add_archive(&mut self, archive: impl Into<ArchiveId>) -> Result<(), ModelError> {
        let archive = archive.into();
        if self.archives.contains(&archive) {
            return Err(ModelError::Duplicate {
                kind: "history",
                id: archive.to_string(),
            });
        }
        self.validated = false;
        self.archives.insert(archive);
        Ok(())
    }

    /// Inserts an edge, keeping edges grouped by `(from, to)` in insertion order.
    pub fn add_edge(&mut self, edge: TriggerEdge) {
        self.validated = false;
        let at = self
            .edges
            .partition_point(|e| (&e.from, &e.to) <= (&edge.from, &edge.to));
        self.edges.insert(at, edge);
        self.renumber_edges();
    }

    pub fn set_initial(&mut self, initial: impl Into<StateId>) {
        self.validated = false;
        self.initial = Some(initial.into());
    }

    fn renumber_edges(&mut self) {
        let mut seen: BTreeMap<(StateId, StateId), usize> = BTreeMap::new();
        for edge in &mut self.edges {
            let n = seen
                .entry((edge.from.clone(), edge.to.clone()))
                .or_default();
            *n += 1;
            edge.id = if *n == 1 {
                format!("{}->{}", edge.from, edge.to)
            } else {
                format!("{}->{}#{}", edge.from, edge.to, n)
            };
        }
    }

    pub fn initial(&self) -> Option<&StateId> {
        self.initial.as_ref()
    }

    pub fn states(&self) -> impl Iterator<Item = &StateNode> {
        self.states.values()
    }

    pub fn state(&self, id: &str) -> Option<&StateNode> {
        self.states.get(id)
    }

    pub fn state_mut(&mut self, id: &str) -> Option<&mut StateNode> {
        self.validated = false;
        self.states.get_mut(id)
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn triggers(&self) -> impl Iterator<Item = &TriggerDef> {
        self.triggers.values()
    }

    pub fn trigger(&self, id: &str) -> Option<&TriggerDef> {
        self.triggers.get(id)
    }

    /// Priority updates go through here so that edges inheriting the default follow along.
    pub fn set_trigger_priority(&mut self, id: &str, priority: u32) -> Result<(), ModelError> {
        let trigger = self
            .triggers
            .get_mut(id)
            .ok_or_else(|| ModelError::UnknownTrigger(id.to_owned()))?;
        trigger.set_priority(priority)?;
        self.validated = false;
        Ok(())
    }

    pub fn archives(&self) -> impl Iterator<Item = &ArchiveId> {
        self.archives.iter()
    }

    pub fn has_archive(&self, id: &str) -> bool {
        self.archives.contains(id)
    }

    pub fn edges(&self) -> &[TriggerEdge] {
        &self.edges
    }

    pub fn outgoing<'a>(&'a self, from: &'a str) -> impl Iterator<Item = &'a TriggerEdge> + 'a {
        self.edges.iter().filter(move |e| e.from == from)
    }

    /// Final state set `F`.
    pub fn final_states(&self) -> impl Iterator<Item = &StateId> {
        self.states.values().filter(|s| s.is_final).map(|s| &s.id)
    }

    /// Explicit edge priority, else the first trigger's default, else 1.
    pub fn effective_priority(&self, edge: &TriggerEdge) -> u32 {
        edge.priority
            .or_else(|| {
                edge.triggers
                    .first()
                    .and_then(|t| self.triggers.get(t))
                    .map(TriggerDef::get_priority)
            })
            .unwrap_or(1)
    }

    /// Runs the structural checks and records whether the automaton passed.
    pub fn validate(&mut self) -> ValidationReport {
        let report = validate::check(self);
        self.validated = report.is_ok();
        report
    }

    pub fn is_validated(&self) -> bool {
        self.validated
    }

    /// Directory used to resolve relative file references (prompts, scripts, sinks).
    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = Some(dir.into());
    }
}
