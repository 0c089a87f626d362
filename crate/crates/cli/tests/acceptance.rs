//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p mfa-cli --test acceptance -- --nocapture` to see
//! the report.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use mfa_core::backends::{BackendEnv, BackendError, Dialer};
use mfa_core::eval::{self, EvalReport, LabeledSentence, Source};
use mfa_core::history::{
    ArchiveEvent, ArchiveObserver, ExchangePair, HistoryError, HistoryGraph, Owner,
};
use mfa_core::runner::{displayed, transcript_jsonl, Event, EventBody, Session};
use mfa_core::{
    dsl, effective_value, estimate_workload, AccessMode, ArchiveId, Automaton, CasePolicy,
    ChainBound, DisplayPolicy, Params, StateId, StateKind, StateNode, Status, TriggerDef,
    TriggerEdge, TriggerKind,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn case(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../case-studies")
        .join(path)
}

fn load(path: &str) -> Result<Automaton, String> {
    let mut a = dsl::parse_file(case(path)).map_err(|e| e.to_string())?;
    let report = a.validate();
    ensure!(report.is_ok(), "{path}: {:?}", report.errors);
    Ok(a)
}

fn script(path: &str) -> Vec<String> {
    std::fs::read_to_string(case(path))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect()
}

/// Initial state followed by every transition target.
fn visits(initial: &StateId, events: &[Event]) -> Vec<String> {
    let mut out = vec![initial.to_string()];
    out.extend(events.iter().filter_map(|e| match &e.body {
        EventBody::Transition { to, .. } => Some(to.to_string()),
        _ => None,
    }));
    out
}

// ---------------------------------------------------------------- triggers

fn trigger_semantics() -> Outcome {
    let mut checked = 0;
    for f in [0u32, 1] {
        for p in 0..=10u32 {
            // min(p·f, p) by cases on the binary f
            let expected = if f == 1 { p } else { 0 };
            ensure!(
                effective_value(p, f == 1) == expected,
                "p={p} f={f}: got {}",
                effective_value(p, f == 1)
            );
            ensure!(
                expected == (p * f).min(p),
                "oracle disagrees at p={p} f={f}"
            );
            checked += 1;
        }
    }
    Ok(format!("{checked} (f, p) combinations"))
}

// ------------------------------------------------------------ case studies

const TABLE2: [&str; 3] = [
    "Hello! How are you today?",
    "I understand that you are frustrated with the long wait time for your sandwich. Can you tell me more about this issue?",
    "We will suggest implementing a pre-made sandwich option to reduce wait time for customers in a hurry.",
];

fn arps_golden() -> Outcome {
    let a = Arc::new(load("arps/arps.mfa")?);
    let init = a.initial().unwrap().clone();
    let mut s = Session::start(a, 0).map_err(|e| e.to_string())?;
    s.run_script(&script("arps/user_table2.txt"))
        .map_err(|e| e.to_string())?;
    let v = visits(&init, s.transcript());
    ensure!(
        v[..6] == ["q_0", "l_1", "q_0", "l_2", "q_3", "l_4"],
        "visited {v:?}"
    );
    let shown = displayed(s.transcript());
    ensure!(shown == TABLE2, "displayed {shown:?}");
    Ok(format!("visited {}", v.join(",")))
}

fn baseline_contrast() -> Outcome {
    let a = Arc::new(load("arps/arps_baseline.mfa")?);
    let init = a.initial().unwrap().clone();
    let mut s = Session::start(a, 0).map_err(|e| e.to_string())?;
    s.run_script(&script("arps/user_table1.txt"))
        .map_err(|e| e.to_string())?;
    let v = visits(&init, s.transcript());
    ensure!(
        !v.iter().any(|x| x == "l_2" || x == "l_4"),
        "baseline reached an ARPS state: {v:?}"
    );
    ensure!(s.status() == Status::Ended, "status {:?}", s.status());
    Ok(format!("{} states visited, none of l_2/l_4", v.len()))
}

fn ethics_display() -> Outcome {
    let a = Arc::new(load("ethics/ethics.mfa")?);
    let mut s = Session::start(a, 0).map_err(|e| e.to_string())?;
    let expected: [(&str, &str); 4] = [
        ("l_2", "Tunisians eat different meals."),
        (
            "l_2",
            "The man is in the main room, his wife is in another room.",
        ),
        (
            "l_1",
            "The woman is in the main room, her husband is in the garage.",
        ),
        (
            "l_2",
            "The champion's nationality could be from any country.",
        ),
    ];
    let lines = script("ethics/user_table5.txt");
    for (i, (line, (state, text))) in lines.iter().zip(expected).enumerate() {
        let events = s.step(Some(line)).map_err(|e| e.to_string())?;
        let shown: Vec<(String, String)> = events
            .iter()
            .filter_map(|e| match &e.body {
                EventBody::Display { text } => Some((e.state.as_ref()?.to_string(), text.clone())),
                _ => None,
            })
            .collect();
        ensure!(
            shown == [(state.to_owned(), text.to_owned())],
            "row {}: displayed {shown:?}",
            i + 1
        );
    }
    Ok("rows 1, 2, 4 via l_2; row 3 via l_1".into())
}

fn train_booking() -> Outcome {
    let a = Arc::new(load("trains/trains.mfa")?);
    let rows = |dir: &Path| -> Vec<Vec<String>> {
        let text = std::fs::read_to_string(dir.join("booking.csv")).unwrap_or_default();
        text.lines()
            .skip(1)
            .map(|l| l.split(',').map(str::to_owned).collect())
            .collect()
    };
    let dir = tempfile::tempdir().unwrap();
    let env = BackendEnv {
        sink_dir: Some(dir.path().to_path_buf()),
        ..BackendEnv::default()
    };
    let mut s = Session::builder(a.clone())
        .env(env.clone())
        .id("b1")
        .start()
        .map_err(|e| e.to_string())?;
    s.run_script(&script("trains/user_booking.txt"))
        .map_err(|e| e.to_string())?;
    let got: Vec<(String, String)> = rows(dir.path())
        .into_iter()
        .map(|r| (r[0].clone(), r[1].clone()))
        .collect();
    let want = [
        ("departure_city", "Paris"),
        ("destination_city", "Lyon"),
        ("departure_time", "09:00"),
    ]
    .map(|(a, b)| (a.to_owned(), b.to_owned()));
    ensure!(got == want, "sink records {got:?}");

    let dir2 = tempfile::tempdir().unwrap();
    let env2 = BackendEnv {
        sink_dir: Some(dir2.path().to_path_buf()),
        ..env
    };
    let init = a.initial().unwrap().clone();
    let mut s = Session::builder(a)
        .env(env2)
        .id("b2")
        .start()
        .map_err(|e| e.to_string())?;
    s.run_script(&script("trains/user_booking_retry.txt"))
        .map_err(|e| e.to_string())?;
    let v = visits(&init, s.transcript());
    let l3 = v.iter().filter(|x| *x == "l_3").count();
    ensure!(
        l3 == 2,
        "expected the destination question twice, visited {v:?}"
    );
    ensure!(
        rows(dir2.path()).len() == 3,
        "retry run wrote {:?}",
        rows(dir2.path())
    );
    Ok("3 records; non-city reply re-asked".into())
}

// ------------------------------------------------------ brute-force runner

const ALPHABET: [&str; 3] = ["a", "b", "c"];

/// Random automaton whose triggers and dialers are lookup tables.
struct TableCase {
    automaton: Arc<Automaton>,
    /// (trigger, state, message) -> bit
    fires: Arc<HashMap<(String, String, String), bool>>,
    /// (state, message) -> reply
    replies: Arc<HashMap<(String, String), String>>,
    script: Vec<String>,
    seed: u64,
}

fn table_case(rng: &mut ChaCha8Rng) -> TableCase {
    loop {
        let n = rng.random_range(2..=6usize);
        let mut a = Automaton::new("random");
        let mut ids = Vec::new();
        for i in 0..n {
            let id = format!("s{i}");
            let node = if rng.random_bool(0.4) {
                StateNode::user(&*id)
            } else {
                let p = Params {
                    pattern: Some("{msg}".into()),
                    ..Params::default()
                };
                let node = StateNode::dialer(&*id).with_params(p);
                if rng.random_bool(0.3) {
                    node.final_state()
                } else {
                    node
                }
            };
            a.add_state(node).unwrap();
            ids.push(id);
        }
        let k = rng.random_range(1..=4usize);
        let triggers: Vec<String> = (0..k).map(|i| format!("t{i}")).collect();
        for t in &triggers {
            let def = TriggerDef::always(t.as_str())
                .with_priority(rng.random_range(1..=n as u32))
                .unwrap();
            a.add_trigger(def).unwrap();
        }
        for _ in 0..rng.random_range(1..=2 * n) {
            let mut e = TriggerEdge::new(
                ids.choose(rng).unwrap().as_str(),
                ids.choose(rng).unwrap().as_str(),
            );
            for _ in 0..rng.random_range(0..=2) {
                e = e.on(triggers.choose(rng).unwrap().as_str());
            }
            if rng.random_bool(0.3) {
                e = e.with_priority(rng.random_range(1..=n as u32));
            }
            a.add_edge(e);
        }
        a.set_initial(ids.choose(rng).unwrap().as_str());
        if !a.validate().is_ok() {
            continue;
        }
        let mut fires = HashMap::new();
        let mut replies = HashMap::new();
        for s in &ids {
            for m in ALPHABET {
                replies.insert(
                    (s.clone(), m.to_owned()),
                    ALPHABET.choose(rng).unwrap().to_string(),
                );
                for t in &triggers {
                    fires.insert((t.clone(), s.clone(), m.to_owned()), rng.random_bool(0.6));
                }
            }
            // the empty message reaches machine states that start a session
            replies.insert(
                (s.clone(), String::new()),
                ALPHABET.choose(rng).unwrap().to_string(),
            );
            for t in &triggers {
                fires.insert((t.clone(), s.clone(), String::new()), rng.random_bool(0.6));
            }
        }
        let script = (0..rng.random_range(0..8))
            .map(|_| {
                if rng.random_bool(0.05) {
                    "/quit".to_owned()
                } else {
                    ALPHABET.choose(rng).unwrap().to_string()
                }
            })
            .collect();
        return TableCase {
            automaton: Arc::new(a),
            fires: Arc::new(fires),
            replies: Arc::new(replies),
            script,
            seed: rng.random(),
        };
    }
}

struct TableDialer {
    state: String,
    replies: Arc<HashMap<(String, String), String>>,
}

impl Dialer for TableDialer {
    fn predict(&mut self, message: &str, _: &[ExchangePair]) -> Result<String, BackendError> {
        Ok(self.replies[&(self.state.clone(), message.to_owned())].clone())
    }
}

fn run_engine(c: &TableCase) -> Vec<String> {
    let a = &c.automaton;
    let mut b = Session::builder(a.clone()).seed(c.seed);
    for s in a.states().filter(|s| s.is_machine()) {
        b = b.with_dialer(
            s.id.clone(),
            Box::new(TableDialer {
                state: s.id.to_string(),
                replies: c.replies.clone(),
            }),
        );
    }
    for t in a.triggers() {
        let fires = c.fires.clone();
        let tid = t.id.to_string();
        b = b.with_trigger(
            t.id.clone(),
            Box::new(move |q: &StateId, m: &str| {
                fires[&(tid.clone(), q.to_string(), m.to_owned())]
            }),
        );
    }
    let mut s = b.start().unwrap();
    // underrun, dead ends and the step budget all stop the run
    let _ = s.run_script(&c.script);
    visits(a.initial().unwrap(), s.transcript())
}

/// Literal reading of the dialogue loop: read or compute the message, collect
/// the firing triggers, follow a maximum-priority edge.
fn run_reference(c: &TableCase) -> Vec<String> {
    let a = &c.automaton;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut inputs = c.script.iter();
    let mut cur = a.initial().unwrap().to_string();
    let mut s = String::new();
    let mut visited = vec![cur.clone()];
    let mut machine_run = 0;
    loop {
        let node = a.state(&cur).unwrap();
        if node.kind == StateKind::User {
            match inputs.next() {
                None => break,
                Some(x) if x == "/quit" => break,
                Some(x) => s = x.clone(),
            }
            machine_run = 0;
        } else {
            if machine_run == 64 {
                break;
            }
            machine_run += 1;
            let r = c.replies[&(cur.clone(), s.clone())].clone();
            s = r;
        }
        let mut candidates: Vec<(u32, String)> = Vec::new();
        for e in a.edges().iter().filter(|e| e.from.as_str() == cur) {
            let all = e
                .triggers
                .iter()
                .all(|t| c.fires[&(t.to_string(), cur.clone(), s.clone())]);
            if !all {
                continue;
            }
            let p = match (e.priority, e.triggers.first()) {
                (Some(p), _) => p,
                (None, Some(t)) => a.trigger(t.as_str()).unwrap().get_priority(),
                (None, None) => 1,
            };
            candidates.push((p, e.to.to_string()));
        }
        let Some(best) = candidates.iter().map(|c| c.0).max() else {
            break;
        };
        let top: Vec<&String> = candidates
            .iter()
            .filter(|c| c.0 == best)
            .map(|c| &c.1)
            .collect();
        let pick = if top.len() > 1 {
            rng.random_range(0..top.len())
        } else {
            0
        };
        cur = top[pick].clone();
        visited.push(cur.clone());
    }
    visited
}

fn brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
    let mut moved = 0;
    for i in 0..500 {
        let c = table_case(&mut rng);
        let engine = run_engine(&c);
        let reference = run_reference(&c);
        ensure!(
            engine == reference,
            "automaton {i}: engine {engine:?} vs reference {reference:?}\n{}",
            dsl::serialize(&c.automaton)
        );
        if engine.len() > 1 {
            moved += 1;
        }
    }
    Ok(format!(
        "500 automata agree ({moved} with at least one transition)"
    ))
}

// ------------------------------------------------------------ tie-breaking

fn tie_breaking() -> Outcome {
    let text = r#"automaton "tie" {
      state q user
      state a dialer pattern = "A"
      state b dialer pattern = "B"
      trigger t always priority = 2
      edge q -> a on t
      edge q -> b on t
      edge a -> q
      edge b -> q
      initial q
    }"#;
    let mut a = dsl::parse(text).map_err(|e| format!("{e:?}"))?;
    ensure!(a.validate().is_ok(), "tie automaton invalid");
    let a = Arc::new(a);
    let mut to_a = 0;
    for seed in 0..1000u64 {
        let mut s = Session::start(a.clone(), seed).map_err(|e| e.to_string())?;
        let shown = displayed(&s.step(Some("x")).map_err(|e| e.to_string())?);
        if shown == ["A"] {
            to_a += 1;
        }
    }
    let to_b = 1000 - to_a;
    ensure!(
        (450..=550).contains(&to_a),
        "a chosen {to_a} times, b {to_b} times"
    );
    Ok(format!("a {to_a}, b {to_b}"))
}

// ---------------------------------------------------------------- workload

/// Longest machine run between user turns by enumerating simple paths; a
/// machine-only cycle makes it unbounded (`None`).
fn chain_by_enumeration(a: &Automaton) -> Option<usize> {
    fn walk(a: &Automaton, at: &str, path: &mut Vec<String>) -> Option<usize> {
        if path.iter().any(|p| p == at) {
            return None;
        }
        path.push(at.to_owned());
        let mut best = 1;
        for e in a.edges().iter().filter(|e| e.from.as_str() == at) {
            let to = a.state(e.to.as_str()).unwrap();
            if to.kind != StateKind::User {
                match walk(a, e.to.as_str(), path) {
                    Some(n) => best = best.max(n + 1),
                    None => {
                        path.pop();
                        return None;
                    }
                }
            }
        }
        path.pop();
        Some(best)
    }
    let mut best = 0;
    let mut starts: Vec<&str> = Vec::new();
    for u in a.states().filter(|s| s.kind == StateKind::User) {
        for e in a.edges().iter().filter(|e| e.from == u.id) {
            if a.state(e.to.as_str()).unwrap().kind != StateKind::User {
                starts.push(e.to.as_str());
            }
        }
    }
    let init = a.initial().unwrap();
    if a.state(init.as_str()).unwrap().kind != StateKind::User {
        starts.push(init.as_str());
    }
    for s in starts {
        best = best.max(walk(a, s, &mut Vec::new())?);
    }
    Some(best)
}

fn workload() -> Outcome {
    let costs = HashMap::new();
    let mut notes = Vec::new();
    for (path, expected) in [("arps/arps.mfa", 1), ("trains/trains.mfa", 2)] {
        let a = load(path)?;
        let est = estimate_workload(&a, &costs).map_err(|e| e.to_string())?;
        let oracle = chain_by_enumeration(&a);
        ensure!(
            oracle == Some(expected),
            "{path}: enumeration gives {oracle:?}"
        );
        ensure!(
            est.max_machine_chain == ChainBound::Finite(expected),
            "{path}: estimator gives {}",
            est.max_machine_chain
        );
        notes.push(format!("{path}={expected}"));
    }

    let mut cyc = dsl::parse(
        r#"automaton "loop" {
          state q user
          state l_1 dialer pattern = "x"
          state l_2 dialer pattern = "y"
          trigger t always priority = 2
          edge q -> l_1
          edge l_1 -> l_2
          edge l_2 -> l_1 on t
          edge l_2 -> q
          initial q
        }"#,
    )
    .map_err(|e| format!("{e:?}"))?;
    ensure!(cyc.validate().is_ok(), "cycle automaton invalid");
    let est = estimate_workload(&cyc, &costs).map_err(|e| e.to_string())?;
    ensure!(
        chain_by_enumeration(&cyc).is_none(),
        "enumeration missed the cycle"
    );
    ensure!(
        est.max_machine_chain == ChainBound::Unbounded,
        "machine cycle gave {}",
        est.max_machine_chain
    );

    let mut rng = ChaCha8Rng::seed_from_u64(0xB2);
    for i in 0..300 {
        let c = table_case(&mut rng);
        let est = estimate_workload(&c.automaton, &costs).map_err(|e| e.to_string())?;
        let oracle = chain_by_enumeration(&c.automaton);
        ensure!(
            est.max_machine_chain.finite() == oracle,
            "random automaton {i}: estimator {} vs enumeration {oracle:?}\n{}",
            est.max_machine_chain,
            dsl::serialize(&c.automaton)
        );
    }
    Ok(format!(
        "{}, machine cycle unbounded, 300 random graphs agree",
        notes.join(", ")
    ))
}

// ----------------------------------------------------------------- history

struct Counter(Arc<AtomicU64>);

impl ArchiveObserver for Counter {
    fn update(&mut self, _: &ArchiveId, _: &ArchiveEvent) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

fn history_one(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let mut g = HistoryGraph::new();
    let archives: Vec<String> = (0..rng.random_range(1..=3))
        .map(|i| format!("h{i}"))
        .collect();
    for h in &archives {
        g.add_archive(h.as_str());
    }
    let mut owners: Vec<(Owner, String, AccessMode)> = Vec::new();
    for i in 0..rng.random_range(0..=4) {
        let h = archives.choose(rng).unwrap().clone();
        let mode = *[AccessMode::Read, AccessMode::Write, AccessMode::ReadWrite]
            .choose(rng)
            .unwrap();
        let owner = Owner::state(format!("l{i}"));
        g.attach(owner.clone(), h.as_str(), mode)
            .map_err(|e| e.to_string())?;
        owners.push((owner, h, mode));
    }
    for i in 0..rng.random_range(0..=3) {
        let h = archives.choose(rng).unwrap().clone();
        let owner = Owner::trigger(format!("t{i}"));
        for bad in [AccessMode::Write, AccessMode::ReadWrite] {
            ensure!(
                matches!(
                    g.attach(owner.clone(), h.as_str(), bad),
                    Err(HistoryError::TriggerWrite(_))
                ),
                "trigger attached with {bad:?}"
            );
        }
        g.attach(owner.clone(), h.as_str(), AccessMode::Read)
            .map_err(|e| e.to_string())?;
        owners.push((owner, h, AccessMode::Read));
    }
    let mut external: HashMap<String, Arc<AtomicU64>> = HashMap::new();
    for h in &archives {
        let c = Arc::new(AtomicU64::new(0));
        g.archive_mut(h)
            .unwrap()
            .subscribe(Box::new(Counter(c.clone())));
        external.insert(h.clone(), c);
    }

    // model of each archive
    let mut model: HashMap<String, Vec<ExchangePair>> =
        archives.iter().map(|h| (h.clone(), Vec::new())).collect();
    let mut events: HashMap<String, u64> = HashMap::new();
    let mut last_seq: HashMap<String, u64> = HashMap::new();
    let mut snapshots: Vec<(Owner, Vec<ExchangePair>, Vec<ExchangePair>)> = Vec::new();
    for _ in 0..rng.random_range(0..40) {
        let h = archives.choose(rng).unwrap().clone();
        if rng.random_bool(0.65) || model[&h].is_empty() {
            let input = format!("in{}", rng.random_range(0..100));
            let pair = g.archive_mut(&h).unwrap().add("l0", input.as_str(), "out");
            ensure!(
                pair.seq > *last_seq.get(&h).unwrap_or(&0),
                "seq reused: {}",
                pair.seq
            );
            last_seq.insert(h.clone(), pair.seq);
            model.get_mut(&h).unwrap().push(pair);
            *events.entry(h).or_default() += 1;
        } else if rng.random_bool(0.1) {
            // unknown seq: rejected, nobody notified
            ensure!(g.remove_pair(&h, 10_000).is_err(), "removed a missing pair");
        } else {
            let at = rng.random_range(0..model[&h].len());
            let seq = model[&h][at].seq;
            let removed = g.remove_pair(&h, seq).map_err(|e| e.to_string())?;
            ensure!(removed == model[&h][at], "removed the wrong pair");
            model.get_mut(&h).unwrap().remove(at);
            *events.entry(h).or_default() += 1;
        }
        if let Some((owner, h, mode)) = owners.choose(rng) {
            let snap = g.readable(owner);
            let expected = if mode.can_read() {
                model[h].clone()
            } else {
                Vec::new()
            };
            ensure!(
                snap == expected,
                "{owner} read {snap:?}, expected {expected:?}"
            );
            snapshots.push((owner.clone(), snap.clone(), snap));
        }
    }
    for (owner, h, _) in &owners {
        let n = g.notifications_for(owner).unwrap_or(0);
        let want = *events.get(h).unwrap_or(&0);
        ensure!(n == want, "{owner} saw {n} notifications for {want} events");
    }
    for (h, c) in &external {
        let want = *events.get(h).unwrap_or(&0);
        ensure!(
            c.load(Ordering::SeqCst) == want,
            "external observer on {h} miscounted"
        );
    }
    for (owner, snap, copy) in snapshots {
        ensure!(snap == copy, "snapshot of {owner} changed");
    }
    Ok(())
}

fn history_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    for i in 0..1000 {
        history_one(&mut rng).map_err(|e| format!("sequence {i}: {e}"))?;
    }
    Ok("1000 random sequences".into())
}

// --------------------------------------------------------------------- DSL

const WORDS: [&str; 6] = [
    "alpha",
    "Quote \"me\"",
    "back\\slash",
    "two\nlines",
    "tab\there",
    "café",
];

fn random_params(rng: &mut ChaCha8Rng, trigger: bool) -> Params {
    let mut p = Params::default();
    let word = |rng: &mut ChaCha8Rng| WORDS.choose(rng).unwrap().to_string();
    if rng.random_bool(0.4) {
        p.prompt = Some(word(rng));
    }
    if rng.random_bool(0.3) {
        p.prompt_file = Some(format!("prompts/{}.txt", rng.random_range(0..9)));
    }
    if rng.random_bool(0.3) {
        p.script = Some((0..rng.random_range(0..3)).map(|_| word(rng)).collect());
    }
    if rng.random_bool(0.3) {
        p.endpoint = Some("http://localhost:8000/v1/chat/completions".into());
        p.model = Some("m".into());
    }
    if rng.random_bool(0.3) {
        p.temperature = Some(rng.random_range(0..20) as f64 / 10.0);
    }
    if rng.random_bool(0.2) {
        p.timeout = Some(rng.random_range(1..120) as f64 / 4.0);
    }
    if rng.random_bool(0.2) {
        p.api_key_env = Some("KEY".into());
    }
    if rng.random_bool(0.3) {
        p.pattern = Some("^(a|b)$".into());
    }
    if !trigger && rng.random_bool(0.2) {
        p.sink = Some("out.csv".into());
        p.field = Some("f".into());
    }
    if trigger && rng.random_bool(0.4) {
        p.keywords = Some((0..rng.random_range(1..4)).map(|_| word(rng)).collect());
        if rng.random_bool(0.5) {
            p.case = Some(
                *[CasePolicy::Insensitive, CasePolicy::Sensitive]
                    .choose(rng)
                    .unwrap(),
            );
        }
    }
    p
}

fn random_definition(rng: &mut ChaCha8Rng, name: &str) -> Automaton {
    let mut a = Automaton::new(name);
    let archives: Vec<String> = (0..rng.random_range(0..3))
        .map(|i| format!("h_{i}"))
        .collect();
    for h in &archives {
        a.add_archive(h.as_str()).unwrap();
    }
    let modes = [AccessMode::Read, AccessMode::Write, AccessMode::ReadWrite];
    let n = rng.random_range(1..8);
    let ids: Vec<String> = (0..n).map(|i| format!("q_{i}")).collect();
    for id in &ids {
        let kind = *[StateKind::User, StateKind::Dialer, StateKind::Writer]
            .choose(rng)
            .unwrap();
        let mut s = StateNode::new(id.as_str(), kind);
        if kind != StateKind::User {
            s.is_final = rng.random_bool(0.3);
            s.params = random_params(rng, false);
            if rng.random_bool(0.4) {
                s.display = Some(
                    *[
                        DisplayPolicy::Always,
                        DisplayPolicy::Auto,
                        DisplayPolicy::Never,
                    ]
                    .choose(rng)
                    .unwrap(),
                );
            }
        }
        for _ in 0..rng.random_range(0..=2) {
            if let Some(h) = archives.choose(rng) {
                s = s.with_history(h.as_str(), *modes.choose(rng).unwrap());
            }
        }
        a.add_state(s).unwrap();
    }
    let kinds = [
        TriggerKind::Always,
        TriggerKind::Keyword,
        TriggerKind::Pattern,
        TriggerKind::Llm,
    ];
    let triggers: Vec<String> = (0..rng.random_range(0..4))
        .map(|i| format!("t_{i}"))
        .collect();
    for t in &triggers {
        let mut def = TriggerDef::new(t.as_str(), *kinds.choose(rng).unwrap())
            .with_priority(rng.random_range(1..=9))
            .unwrap();
        def.params = random_params(rng, true);
        if let Some(h) = archives.choose(rng) {
            if rng.random_bool(0.5) {
                def = def.with_history(h.as_str(), AccessMode::Read);
            }
        }
        a.add_trigger(def).unwrap();
    }
    for _ in 0..rng.random_range(0..10) {
        let mut e = TriggerEdge::new(
            ids.choose(rng).unwrap().as_str(),
            ids.choose(rng).unwrap().as_str(),
        );
        for _ in 0..rng.random_range(0..3) {
            if let Some(t) = triggers.choose(rng) {
                e = e.on(t.as_str());
            }
        }
        if rng.random_bool(0.3) {
            e = e.with_priority(rng.random_range(1..=9));
        }
        a.add_edge(e);
    }
    if rng.random_bool(0.9) {
        a.set_initial(ids.choose(rng).unwrap().as_str());
    }
    a
}

/// Applies one local edit to a line holding an item; returns the edited
/// text and the edited line (1-based).
fn mutate(text: &str, rng: &mut ChaCha8Rng) -> Option<(String, usize)> {
    let lines: Vec<&str> = text.lines().collect();
    let candidates: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim_start();
            ["state ", "trigger ", "edge ", "history ", "initial "]
                .iter()
                .any(|k| t.starts_with(k))
        })
        .map(|(i, _)| i)
        .collect();
    let at = *candidates.choose(rng)?;
    let line = lines[at];
    let edited = match rng.random_range(0..4) {
        // stray character between tokens
        0 => {
            let spaces: Vec<usize> = line
                .char_indices()
                .filter(|&(i, c)| {
                    c == ' '
                        && line[..i].matches('"').count().is_multiple_of(2)
                        && !line[..i].contains('#')
                })
                .map(|(i, _)| i)
                .collect();
            let &i = spaces.choose(rng)?;
            format!("{} @{}", &line[..i], &line[i..])
        }
        1 if line.contains(" = ") => line.replacen(" = ", " ", 1),
        2 if line.contains("->") => line.replacen("->", "", 1),
        3 if line.contains('"') => {
            let last = line.rfind('"')?;
            format!("{}{}", &line[..last], &line[last + 1..])
        }
        _ => format!("{line} @"),
    };
    let mut out: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
    out[at] = edited;
    Some((out.join("\n"), at + 1))
}

fn dsl_round_trip() -> Outcome {
    let shipped = [
        "arps/arps.mfa",
        "trains/trains.mfa",
        "nvc/nvc.mfa",
        "ethics/ethics.mfa",
    ];
    let mut texts = Vec::new();
    for path in shipped {
        let a = dsl::parse_file(case(path)).map_err(|e| e.to_string())?;
        let back = dsl::parse(&dsl::serialize(&a)).map_err(|e| format!("{path}: {e:?}"))?;
        ensure!(
            back.states().eq(a.states())
                && back.edges() == a.edges()
                && back.triggers().eq(a.triggers()),
            "{path}: round trip changed the structure"
        );
        ensure!(
            back.initial() == a.initial() && back.archives().eq(a.archives()),
            "{path}: header changed"
        );
        texts.push(std::fs::read_to_string(case(path)).unwrap());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xD4);
    for i in 0..200 {
        let a = random_definition(&mut rng, &format!("gen {i}"));
        let text = dsl::serialize(&a);
        let back = dsl::parse(&text).map_err(|e| format!("generated {i}: {e:?}\n{text}"))?;
        ensure!(back == a, "generated {i} differs after round trip\n{text}");
        texts.push(text);
    }
    let mut mutants = 0;
    for _ in 0..400 {
        let base = texts.choose(&mut rng).unwrap();
        let Some((text, line)) = mutate(base, &mut rng) else {
            continue;
        };
        mutants += 1;
        match dsl::parse(&text) {
            Ok(_) => return Err(format!("mutant accepted (line {line}):\n{text}")),
            Err(errs) => {
                let first = errs[0].line;
                ensure!(
                    first.abs_diff(line) <= 1,
                    "edit on line {line} reported at {}:\n{text}",
                    errs[0]
                );
            }
        }
    }
    Ok(format!(
        "4 shipped + 200 generated round-trip; {mutants} mutants located"
    ))
}

// -------------------------------------------------------------------- eval

fn eval_harness() -> Outcome {
    let data = eval::load_dataset(case("datasets/anger.csv")).map_err(|e| e.to_string())?;
    let pool =
        eval::load_distractors(case("datasets/distractors.csv")).map_err(|e| e.to_string())?;
    ensure!(data.len() == 100, "dataset has {} rows", data.len());
    let labels: HashMap<String, bool> = data.iter().map(|s| (s.text.clone(), s.label)).collect();

    let l = labels.clone();
    let mut oracle = move |_: &StateId, m: &str| l[m];
    let perfect = eval::evaluate(&mut oracle, "t_0", "oracle", &data).map_err(|e| e.to_string())?;
    ensure!(
        perfect.accuracy == 100.0,
        "oracle accuracy {}",
        perfect.accuracy
    );

    let wrong: BTreeSet<String> = data.iter().step_by(10).map(|s| s.text.clone()).collect();
    ensure!(wrong.len() == 10, "expected 10 corrupted sentences");
    let l = labels.clone();
    let w = wrong.clone();
    let mut noisy = move |_: &StateId, m: &str| l[m] != w.contains(m);
    let ninety = eval::evaluate(&mut noisy, "t_0", "noisy", &data).map_err(|e| e.to_string())?;
    ensure!(ninety.correct() == 90, "{} correct", ninety.correct());
    ensure!(
        format!("{:.2}", ninety.accuracy) == "90.00",
        "accuracy {}",
        ninety.accuracy
    );

    let grid = eval::render_grid(&[
        EvalReport {
            backend: "gpt-3".into(),
            ..ninety.clone()
        },
        EvalReport {
            backend: "gpt-4".into(),
            ..perfect.clone()
        },
    ]);
    let rows: Vec<&str> = grid.lines().collect();
    let cells = |r: &str| -> Vec<String> { r.split('|').map(|c| c.trim().to_owned()).collect() };
    let h1 = cells(rows[0]);
    let h2 = cells(rows[1]);
    ensure!(
        h1 == [
            "Trigger",
            "% of random",
            "Nb. of",
            "% good eval.",
            "",
            "Avg. time (s)",
            ""
        ] || h1
            == [
                "Trigger",
                "% of random",
                "Nb. of",
                "% good eval.",
                "Avg. time (s)"
            ],
        "header {h1:?}"
    );
    ensure!(
        h2[1..] == ["sentences", "sentences", "gpt-3", "gpt-4", "gpt-3", "gpt-4"],
        "sub-header {h2:?}"
    );
    let body = cells(rows[3]);
    ensure!(
        body[..5] == ["t_0", "0%", "100", "90.00%", "100.00%"],
        "row {body:?}"
    );

    // Table 3 keeps 100 sentences per row while the random share grows
    for pct in [0.0, 30.0, 60.0] {
        let curated: Vec<LabeledSentence> = data[..(100 - pct as usize)].to_vec();
        let out = eval::augment(&curated, &pool, pct, 7).map_err(|e| e.to_string())?;
        let d = out
            .iter()
            .filter(|s| s.source == Source::Distractor)
            .count();
        ensure!(
            out.len() == 100 && d == pct as usize,
            "pct {pct}: {} total, {d} distractors",
            out.len()
        );
        ensure!(
            out.iter()
                .filter(|s| s.source == Source::Distractor)
                .all(|s| !s.label),
            "labelled distractor"
        );
        let again = eval::augment(&curated, &pool, pct, 7).map_err(|e| e.to_string())?;
        ensure!(again == out, "augment not reproducible");
    }
    // fixed curated set: the distractor count is solved from the share
    let seventy = &data[..70];
    for (pct, total) in [(0.0, 70usize), (30.0, 100), (60.0, 175)] {
        let out = eval::augment(seventy, &pool, pct, 1).map_err(|e| e.to_string())?;
        let d = out
            .iter()
            .filter(|s| s.source == Source::Distractor)
            .count();
        ensure!(
            out.len() == total,
            "70 curated at {pct}%: {} total",
            out.len()
        );
        ensure!(
            (d * 100) as f64 == pct * total as f64,
            "70 curated at {pct}%: {d} distractors"
        );
    }
    Ok("oracle 100%, 10 errors 90.00%, grid layout, pct 0/30/60".into())
}

// ------------------------------------------------------------------ replay

fn start_service() -> (String, Arc<mfa_service::AppState>) {
    let app = mfa_service::AppState::new(mfa_service::ServiceConfig::default());
    let served = app.clone();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            mfa_service::serve_on(listener, served).await.unwrap();
        });
    });
    (format!("http://{}", rx.recv().unwrap()), app)
}

fn service_transcript(
    base: &str,
    automaton_id: &str,
    seed: u64,
    lines: &[String],
) -> Result<String, String> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let post = |path: &str, body: Value| -> Result<Value, String> {
        let mut r = agent
            .post(format!("{base}{path}"))
            .header("Content-Type", "application/json")
            .send(body.to_string())
            .map_err(|e| e.to_string())?;
        let text = r.body_mut().read_to_string().map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| format!("{e}: {text}"))
    };
    let created = post(
        "/sessions",
        json!({ "automaton_id": automaton_id, "seed": seed }),
    )?;
    let sid = created["handle"]["session_id"]
        .as_str()
        .ok_or("no session id")?
        .to_owned();
    for line in lines {
        let r = post(&format!("/sessions/{sid}/message"), json!({ "text": line }))?;
        if r["handle"]["status"] != "awaiting_user" {
            break;
        }
    }
    let mut r = agent
        .get(format!("{base}/sessions/{sid}/transcript"))
        .call()
        .map_err(|e| e.to_string())?;
    r.body_mut().read_to_string().map_err(|e| e.to_string())
}

fn replay_determinism() -> Outcome {
    let (base, app) = start_service();
    app.load_dir(&case("")).map_err(|e| e.to_string())?;
    let ids: HashMap<String, String> = app
        .automata()
        .into_iter()
        .map(|i| (i.name.clone(), i.automaton_id.clone()))
        .collect();
    let runs = [
        ("arps", "arps/arps.mfa", "arps/user_table2.txt", 3u64),
        ("ethics", "ethics/ethics.mfa", "ethics/user_table5.txt", 11),
        ("nvc", "nvc/nvc.mfa", "nvc/user_demo.txt", 42),
    ];
    let dir = tempfile::tempdir().unwrap();
    for (name, def, user, seed) in runs {
        let out = dir.path().join(format!("{name}.jsonl"));
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_mfa"))
            .args([
                "run",
                case(def).to_str().unwrap(),
                "--seed",
                &seed.to_string(),
            ])
            .args(["--script", case(user).to_str().unwrap()])
            .args(["--transcript", out.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(
            status.status.success(),
            "cli run {name} failed: {}",
            String::from_utf8_lossy(&status.stderr)
        );
        let cli = std::fs::read_to_string(&out).map_err(|e| e.to_string())?;
        let id = ids.get(name).ok_or(format!("{name} not registered"))?;
        let svc = service_transcript(&base, id, seed, &script(user))?;
        ensure!(
            !cli.is_empty() && cli == svc,
            "{name}: transcripts differ\ncli:\n{cli}\nservice:\n{svc}"
        );
    }
    // the in-process runner agrees too
    let a = Arc::new(load("arps/arps.mfa")?);
    let mut s = Session::start(a, 3).map_err(|e| e.to_string())?;
    s.run_script(&script("arps/user_table2.txt"))
        .map_err(|e| e.to_string())?;
    let direct = transcript_jsonl(s.transcript());
    let cli = std::fs::read_to_string(dir.path().join("arps.jsonl")).unwrap();
    ensure!(direct == cli, "library transcript differs from the cli");
    Ok("arps, ethics, nvc byte-identical".into())
}

// ------------------------------------------------------------------ driver

fn main() {
    type Criterion = (&'static str, fn() -> Outcome, Duration);
    let secs = Duration::from_secs;
    let criteria: [Criterion; 12] = [
        ("trigger semantics", trigger_semantics, secs(1)),
        ("ARPS golden transcript", arps_golden, secs(1)),
        ("baseline contrast", baseline_contrast, secs(1)),
        ("ethics display", ethics_display, secs(1)),
        ("train booking", train_booking, secs(1)),
        ("brute-force equivalence", brute_force, secs(30)),
        ("tie-breaking", tie_breaking, secs(5)),
        ("workload estimator", workload, secs(1)),
        ("history semantics", history_semantics, secs(10)),
        ("DSL round-trip", dsl_round_trip, secs(10)),
        ("eval harness", eval_harness, secs(5)),
        ("replay determinism", replay_determinism, secs(5)),
    ];
    let mut failed = Vec::new();
    for (name, run, budget) in &criteria {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let took = t0.elapsed();
        let line = match outcome {
            Ok(note) if took <= *budget => {
                format!("PASS {name} ({:.2}s): {note}", took.as_secs_f64())
            }
            Ok(note) => {
                failed.push(*name);
                format!(
                    "FAIL {name}: took {:.2}s, budget {}s ({note})",
                    took.as_secs_f64(),
                    budget.as_secs()
                )
            }
            Err(why) => {
                failed.push(*name);
                format!("FAIL {name}: {why}")
            }
        };
        println!("{line}");
    }
    println!(
        "{}/{} criteria passed",
        criteria.len() - failed.len(),
        criteria.len()
    );
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
}
