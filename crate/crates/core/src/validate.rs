//! Structural validation of an [`Automaton`].

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backends::BackendKind;
use crate::model::{Automaton, HistoryBinding, TriggerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Code {
    NoInitial,
    UnknownState,
    UnknownTrigger,
    UnknownArchive,
    BadPriority,
    UserNotFinal,
    UserBackend,
    UserAttached,
    MultiAttach,
    TriggerWrite,
    StateReadOnly,
    DeadEnd,
    BadBackend,
    BadTrigger,
    TiedPriority,
}

impl Code {
    pub fn as_str(self) -> &'static str {
        match self {
            Code::NoInitial => "NO_INITIAL",
            Code::UnknownState => "UNKNOWN_STATE",
            Code::UnknownTrigger => "UNKNOWN_TRIGGER",
            Code::UnknownArchive => "UNKNOWN_ARCHIVE",
            Code::BadPriority => "BAD_PRIORITY",
            Code::UserNotFinal => "USER_NOT_FINAL",
            Code::UserBackend => "USER_BACKEND",
            Code::UserAttached => "USER_ATTACHED",
            Code::MultiAttach => "MULTI_ATTACH",
            Code::TriggerWrite => "TRIGGER_WRITE",
            Code::StateReadOnly => "STATE_READ_ONLY",
            Code::DeadEnd => "DEAD_END",
            Code::BadBackend => "BAD_BACKEND",
            Code::BadTrigger => "BAD_TRIGGER",
            Code::TiedPriority => "TIED_PRIORITY",
        }
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: Code,
    pub location: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}: {}", self.code, self.location, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn has_error(&self, code: Code) -> bool {
        self.errors.iter().any(|i| i.code == code)
    }

    pub fn has_warning(&self, code: Code) -> bool {
        self.warnings.iter().any(|i| i.code == code)
    }

    fn error(&mut self, code: Code, location: impl Into<String>, message: impl Into<String>) {
        self.errors.push(Issue {
            code,
            location: location.into(),
            message: message.into(),
        });
    }

    fn warn(&mut self, code: Code, location: impl Into<String>, message: impl Into<String>) {
        self.warnings.push(Issue {
            code,
            location: location.into(),
            message: message.into(),
        });
    }
}

/// Checks every structural rule and collects all violations.
pub fn check(automaton: &Automaton) -> ValidationReport {
    let mut report = ValidationReport::default();
    let state_count = automaton.state_count() as u32;

    match automaton.initial() {
        None => report.error(Code::NoInitial, "automaton", "no initial state declared"),
        Some(init) if automaton.state(init.as_str()).is_none() => report.error(
            Code::NoInitial,
            "automaton",
            format!("initial state `{init}` is not declared"),
        ),
        Some(_) => {}
    }

    for state in automaton.states() {
        let loc = format!("state {}", state.id);
        check_bindings(&mut report, automaton, &loc, &state.history);
        if state.is_user() {
            if !state.is_final {
                report.error(Code::UserNotFinal, &loc, "user states are always final");
            }
            if !state.params.is_empty() {
                report.error(
                    Code::UserBackend,
                    &loc,
                    "user states take no backend configuration",
                );
            }
            if !state.history.is_empty() {
                report.error(
                    Code::UserAttached,
                    &loc,
                    "user states cannot be attached to a history",
                );
            }
            continue;
        }
        if let Some(binding) = state.attachment() {
            if !binding.mode.can_write() {
                report.error(
                    Code::StateReadOnly,
                    &loc,
                    format!(
                        "machine state attached read-only to `{}` cannot record its exchanges",
                        binding.archive
                    ),
                );
            }
        }
        if let Err(msg) = BackendKind::resolve(state) {
            report.error(Code::BadBackend, &loc, msg);
        }
    }

    for trigger in automaton.triggers() {
        let loc = format!("trigger {}", trigger.id);
        check_bindings(&mut report, automaton, &loc, &trigger.history);
        for binding in &trigger.history {
            if binding.mode.can_write() {
                report.error(
                    Code::TriggerWrite,
                    &loc,
                    format!("triggers may only read history `{}`", binding.archive),
                );
            }
        }
        if let Err(msg) = check_trigger_params(trigger) {
            report.error(Code::BadTrigger, &loc, msg);
        }
    }

    for edge in automaton.edges() {
        let loc = format!("edge {}", edge.id());
        for end in [&edge.from, &edge.to] {
            if automaton.state(end.as_str()).is_none() {
                report.error(
                    Code::UnknownState,
                    &loc,
                    format!("state `{end}` is not declared"),
                );
            }
        }
        for t in &edge.triggers {
            if automaton.trigger(t.as_str()).is_none() {
                report.error(
                    Code::UnknownTrigger,
                    &loc,
                    format!("trigger `{t}` is not declared"),
                );
            }
        }
        let p = automaton.effective_priority(edge);
        if p < 1 || p > state_count {
            report.error(
                Code::BadPriority,
                &loc,
                format!("priority {p} outside 1..={state_count}"),
            );
        }
    }

    for state in automaton.states() {
        let mut by_priority: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
        for edge in automaton.outgoing(state.id.as_str()) {
            by_priority
                .entry(automaton.effective_priority(edge))
                .or_default()
                .push(edge.id());
        }
        if by_priority.is_empty() && !state.is_final {
            report.error(
                Code::DeadEnd,
                format!("state {}", state.id),
                "non-final state has no outgoing edge",
            );
        }
        for (p, ids) in by_priority {
            if ids.len() > 1 {
                report.warn(
                    Code::TiedPriority,
                    format!("state {}", state.id),
                    format!(
                        "edges {} share priority {p}; ties break at random",
                        ids.join(", ")
                    ),
                );
            }
        }
    }

    report
}

fn check_bindings(
    report: &mut ValidationReport,
    automaton: &Automaton,
    loc: &str,
    bindings: &[HistoryBinding],
) {
    if bindings.len() > 1 {
        let names: Vec<&str> = bindings.iter().map(|b| b.archive.as_str()).collect();
        report.error(
            Code::MultiAttach,
            loc,
            format!(
                "attached to {} histories ({})",
                bindings.len(),
                names.join(", ")
            ),
        );
    }
    for b in bindings {
        if !automaton.has_archive(b.archive.as_str()) {
            report.error(
                Code::UnknownArchive,
                loc,
                format!("history `{}` is not declared", b.archive),
            );
        }
    }
}

fn check_trigger_params(trigger: &crate::model::TriggerDef) -> Result<(), String> {
    let p = &trigger.params;
    match trigger.kind {
        TriggerKind::Always => {
            if !p.is_empty() {
                return Err("always triggers take no parameters".into());
            }
        }
        TriggerKind::Keyword => match &p.keywords {
            Some(k) if !k.is_empty() && k.iter().all(|w| !w.trim().is_empty()) => {}
            _ => return Err("keyword triggers need a non-empty `keywords` list".into()),
        },
        TriggerKind::Pattern => match &p.pattern {
            Some(pat) => {
                regex::Regex::new(pat).map_err(|e| format!("invalid pattern: {e}"))?;
            }
            None => return Err("pattern triggers need a `pattern`".into()),
        },
        TriggerKind::Llm => {
            crate::backends::check_dialer_params(p)?;
        }
    }
    Ok(())
}
