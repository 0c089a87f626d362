//! Benchmark fixtures.

use std::path::PathBuf;
use std::sync::Arc;

use mfa_core::{dsl, Automaton, Params, StateNode, TriggerDef, TriggerEdge};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn case_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../case-studies")
}

pub fn arps_text() -> String {
    std::fs::read_to_string(case_dir().join("arps/arps.mfa")).expect("shipped arps.mfa")
}

/// A validated case-study definition.
pub fn case_study(path: &str) -> Arc<Automaton> {
    let mut a = dsl::parse_file(case_dir().join(path)).expect("shipped definition");
    assert!(a.validate().is_ok(), "{path} is invalid");
    Arc::new(a)
}

pub fn user_script(path: &str) -> Vec<String> {
    std::fs::read_to_string(case_dir().join(path))
        .expect("shipped script")
        .lines()
        .map(str::to_owned)
        .collect()
}

/// One user state with `fanout` guarded edges to template dialers that
/// answer back. Priorities repeat so that ties occur.
pub fn wide_automaton(fanout: usize, seed: u64) -> Automaton {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Automaton::new("wide");
    a.add_state(StateNode::user("q")).unwrap();
    let top = (fanout as u32 + 1).min(4);
    for i in 0..fanout {
        let id = format!("l_{i}");
        let p = Params {
            pattern: Some(format!("{i}: {{msg}}")),
            ..Params::default()
        };
        a.add_state(StateNode::dialer(id.as_str()).with_params(p))
            .unwrap();
        let t = format!("t_{i}");
        let def = if rng.random_bool(0.5) {
            TriggerDef::always(t.as_str())
        } else {
            TriggerDef::keyword(t.as_str(), ["alpha", "beta"])
        };
        a.add_trigger(def.with_priority(rng.random_range(1..=top)).unwrap())
            .unwrap();
        a.add_edge(TriggerEdge::new("q", id.as_str()).on(t.as_str()));
        a.add_edge(TriggerEdge::new(id.as_str(), "q"));
    }
    a.set_initial("q");
    a
}
