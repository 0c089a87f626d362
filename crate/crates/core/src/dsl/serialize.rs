use std::fmt::Write;

use crate::model::{Automaton, HistoryBinding, Params};

const INDENT: &str = "  ";

/// Canonical text form: states, triggers, histories and edges each sorted,
/// `initial` last. Parsing the output yields an equal automaton.
pub fn serialize(automaton: &Automaton) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "automaton {} {{", quote(automaton.name()));

    for state in automaton.states() {
        let mut line = format!("{INDENT}state {} {}", state.id, state.kind.as_str());
        if state.is_final && state.is_machine() {
            line.push_str(" final");
        }
        if let Some(display) = state.display {
            let _ = write!(line, " display = {}", display.as_str());
        }
        push_bindings(&mut line, &state.history);
        push_params(&mut line, &state.params);
        let _ = writeln!(out, "{line}");
    }

    for trigger in automaton.triggers() {
        let mut line = format!(
            "{INDENT}trigger {} {} priority = {}",
            trigger.id,
            trigger.kind.as_str(),
            trigger.get_priority()
        );
        push_bindings(&mut line, &trigger.history);
        push_params(&mut line, &trigger.params);
        let _ = writeln!(out, "{line}");
    }

    for archive in automaton.archives() {
        let _ = writeln!(out, "{INDENT}history {archive}");
    }

    for edge in automaton.edges() {
        let mut line = format!("{INDENT}edge {} -> {}", edge.from, edge.to);
        if !edge.triggers.is_empty() {
            let ids: Vec<&str> = edge.triggers.iter().map(|t| t.as_str()).collect();
            let _ = write!(line, " on {}", ids.join(", "));
        }
        if let Some(p) = edge.priority {
            let _ = write!(line, " priority {p}");
        }
        let _ = writeln!(out, "{line}");
    }

    if let Some(initial) = automaton.initial() {
        let _ = writeln!(out, "{INDENT}initial {initial}");
    }
    out.push_str("}\n");
    out
}

fn push_bindings(line: &mut String, bindings: &[HistoryBinding]) {
    for b in bindings {
        let _ = write!(line, " history = {}:{}", b.archive, b.mode.as_str());
    }
}

fn push_params(line: &mut String, p: &Params) {
    let mut string = |key: &str, v: &Option<String>| {
        if let Some(v) = v {
            let _ = write!(line, " {key} = {}", quote(v));
        }
    };
    string("prompt", &p.prompt);
    string("prompt_file", &p.prompt_file);
    string("script_file", &p.script_file);
    string("endpoint", &p.endpoint);
    string("model", &p.model);
    string("api_key_env", &p.api_key_env);
    string("pattern", &p.pattern);
    string("sink", &p.sink);
    string("field", &p.field);
    if let Some(t) = p.temperature {
        let _ = write!(line, " temperature = {t:?}");
    }
    if let Some(t) = p.timeout {
        let _ = write!(line, " timeout = {t:?}");
    }
    if let Some(items) = &p.script {
        let _ = write!(line, " script = {}", list(items));
    }
    if let Some(items) = &p.keywords {
        let _ = write!(line, " keywords = {}", list(items));
    }
    if let Some(case) = p.case {
        let _ = write!(line, " case = {}", case.as_str());
    }
}

fn list(items: &[String]) -> String {
    let quoted: Vec<String> = items.iter().map(|s| quote(s)).collect();
    format!("[{}]", quoted.join(", "))
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}
