//! Dialogue execution.
//!
//! A [`Session`] walks a validated automaton: at a user state it waits for
//! input, at a machine state it calls the backend, archives the exchange,
//! applies the display policy and feeds the output on as the next message.
//! Successors come from [`select_next`]. Everything observable is recorded
//! as an [`Event`].

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{self, BackendEnv, BackendError, Dialer};
use crate::history::{HistoryError, HistoryGraph, Owner};
use crate::ids::{StateId, TriggerId};
use crate::model::{Automaton, DisplayPolicy};
use crate::select::{select_next, Decision, EdgeEvaluation};
use crate::triggers::{build_trigger, Trigger, TriggerError};

/// User input that ends a session at a final user state.
pub const QUIT_COMMAND: &str = "/quit";

/// Default number of machine states one `step` may visit.
pub const DEFAULT_STEP_BUDGET: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error("UNVALIDATED: automaton has not passed validation")]
    Unvalidated,
    #[error("DEAD_END: no edge fires from non-final state `{0}`")]
    DeadEnd(StateId),
    #[error("STEP_BUDGET: {0} machine steps without reaching a user state")]
    StepBudget(usize),
    #[error("backend of `{state}` failed: {source}")]
    Backend {
        state: StateId,
        source: BackendError,
    },
    #[error("trigger `{trigger}` failed: {source}")]
    Trigger {
        trigger: TriggerId,
        source: TriggerError,
    },
    #[error("history: {0}")]
    History(#[from] HistoryError),
    #[error("NOT_FINAL: cannot end at non-final state `{0}`")]
    NotFinal(StateId),
    #[error("SCRIPT_UNDERRUN: input awaited after {0} scripted lines")]
    ScriptUnderrun(usize),
    #[error("NOT_AWAITING_USER: session is running machine states, no input expected")]
    NotAwaitingUser,
    #[error("AWAITING_USER: session waits for user input")]
    AwaitingUser,
    #[error("ENDED: session is over")]
    Ended,
}

impl RunError {
    pub fn code(&self) -> &'static str {
        match self {
            RunError::Unvalidated => "UNVALIDATED",
            RunError::DeadEnd(_) => "DEAD_END",
            RunError::StepBudget(_) => "STEP_BUDGET",
            RunError::Backend { .. } => "BACKEND",
            RunError::Trigger { .. } => "TRIGGER",
            RunError::History(_) => "HISTORY",
            RunError::NotFinal(_) => "NOT_FINAL",
            RunError::ScriptUnderrun(_) => "SCRIPT_UNDERRUN",
            RunError::NotAwaitingUser => "NOT_AWAITING_USER",
            RunError::AwaitingUser => "AWAITING_USER",
            RunError::Ended => "ENDED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AwaitingUser,
    Running,
    Ended,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    /// The user sent the quit command.
    Quit,
    /// No edge fired at a final state.
    Concluded,
    /// `end` was called explicitly.
    Requested,
    DeadEnd,
    StepBudget,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventBody {
    UserInput {
        text: String,
    },
    StateOutput {
        input: String,
        output: String,
    },
    TriggerEval(EdgeEvaluation),
    Transition {
        edge: String,
        to: StateId,
    },
    Display {
        text: String,
    },
    Terminated {
        reason: EndReason,
        status: Status,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
    Warning {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<StateId>,
    #[serde(flatten)]
    pub body: EventBody,
}

impl Event {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

/// Texts of the `Display` events, in order.
pub fn displayed(events: &[Event]) -> Vec<String> {
    events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::Display { text } => Some(text.clone()),
            _ => None,
        })
        .collect()
}

/// States entered, in order: the initial state, then every transition target.
pub fn visited_states(events: &[Event]) -> Vec<StateId> {
    let mut out = Vec::new();
    for e in events {
        if let EventBody::Transition { to, .. } = &e.body {
            if out.is_empty() {
                out.extend(e.state.clone());
            }
            out.push(to.clone());
        }
    }
    out
}

/// One JSON record per line.
pub fn transcript_jsonl(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_json());
        out.push('\n');
    }
    out
}

type EventSink = Box<dyn FnMut(&Event) + Send>;

pub struct SessionBuilder {
    automaton: Arc<Automaton>,
    id: Option<String>,
    seed: u64,
    env: Option<BackendEnv>,
    step_budget: usize,
    dialers: HashMap<StateId, Box<dyn Dialer>>,
    triggers: HashMap<TriggerId, Box<dyn Trigger>>,
}

impl SessionBuilder {
    pub fn id(mut self, id: impl Into<String>) -> Self {
        self.id = Some(id.into());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn env(mut self, env: BackendEnv) -> Self {
        self.env = Some(env);
        self
    }

    pub fn step_budget(mut self, budget: usize) -> Self {
        self.step_budget = budget;
        self
    }

    /// Replaces the backend configured for `state`.
    pub fn with_dialer(mut self, state: impl Into<StateId>, dialer: Box<dyn Dialer>) -> Self {
        self.dialers.insert(state.into(), dialer);
        self
    }

    /// Replaces the runtime implementation of `trigger`.
    pub fn with_trigger(mut self, trigger: impl Into<TriggerId>, imp: Box<dyn Trigger>) -> Self {
        self.triggers.insert(trigger.into(), imp);
        self
    }

    pub fn start(self) -> Result<Session, RunError> {
        let automaton = self.automaton;
        if !automaton.is_validated() {
            return Err(RunError::Unvalidated);
        }
        let initial = automaton.initial().cloned().ok_or(RunError::Unvalidated)?;
        let mut env = self.env.unwrap_or_default();
        if env.base_dir.is_none() {
            env.base_dir = automaton.base_dir().map(|p| p.to_path_buf());
        }
        let id = self.id.unwrap_or_else(|| env.session_id.clone());
        env.session_id = id.clone();

        let mut dialers = self.dialers;
        for state in automaton.states().filter(|s| s.is_machine()) {
            if !dialers.contains_key(&state.id) {
                let d = env.build_state(state).map_err(|source| RunError::Backend {
                    state: state.id.clone(),
                    source,
                })?;
                dialers.insert(state.id.clone(), d);
            }
        }
        let mut triggers = self.triggers;
        for def in automaton.triggers() {
            if !triggers.contains_key(&def.id) {
                let t = build_trigger(def, &env).map_err(|source| RunError::Trigger {
                    trigger: def.id.clone(),
                    source,
                })?;
                triggers.insert(def.id.clone(), t);
            }
        }
        let history = HistoryGraph::from_automaton(&automaton)?;
        let status = if automaton
            .state(initial.as_str())
            .is_some_and(|s| s.is_user())
        {
            Status::AwaitingUser
        } else {
            Status::Running
        };
        Ok(Session {
            id,
            automaton,
            current: initial,
            last_message: String::new(),
            seed: self.seed,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            status,
            step_budget: self.step_budget,
            transcript: Vec::new(),
            history,
            dialers,
            triggers,
            sinks: Vec::new(),
        })
    }
}

pub struct Session {
    id: String,
    automaton: Arc<Automaton>,
    current: StateId,
    last_message: String,
    seed: u64,
    rng: ChaCha8Rng,
    status: Status,
    step_budget: usize,
    transcript: Vec<Event>,
    history: HistoryGraph,
    dialers: HashMap<StateId, Box<dyn Dialer>>,
    triggers: HashMap<TriggerId, Box<dyn Trigger>>,
    sinks: Vec<EventSink>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("automaton", &self.automaton.name())
            .field("current", &self.current)
            .field("status", &self.status)
            .field("seed", &self.seed)
            .field("events", &self.transcript.len())
            .finish_non_exhaustive()
    }
}

impl Session {
    pub fn builder(automaton: Arc<Automaton>) -> SessionBuilder {
        SessionBuilder {
            automaton,
            id: None,
            seed: 0,
            env: None,
            step_budget: DEFAULT_STEP_BUDGET,
            dialers: HashMap::new(),
            triggers: HashMap::new(),
        }
    }

    /// Starts a session with the backends configured in the definition.
    pub fn start(automaton: Arc<Automaton>, seed: u64) -> Result<Self, RunError> {
        Self::builder(automaton).seed(seed).start()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn automaton(&self) -> &Arc<Automaton> {
        &self.automaton
    }

    pub fn current(&self) -> &StateId {
        &self.current
    }

    pub fn last_message(&self) -> &str {
        &self.last_message
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn awaiting_user(&self) -> bool {
        self.status == Status::AwaitingUser
    }

    pub fn transcript(&self) -> &[Event] {
        &self.transcript
    }

    pub fn history(&self) -> &HistoryGraph {
        &self.history
    }

    /// Registers a callback invoked for every new event, as it happens.
    pub fn subscribe(&mut self, sink: impl FnMut(&Event) + Send + 'static) {
        self.sinks.push(Box::new(sink));
    }

    fn emit(&mut self, state: Option<StateId>, body: EventBody) {
        let event = Event {
            seq: self.transcript.len() as u64,
            state,
            body,
        };
        for sink in &mut self.sinks {
            sink(&event);
        }
        self.transcript.push(event);
    }

    /// Advances the dialogue until the next user state or the end.
    ///
    /// `input` must be present exactly when the session awaits the user.
    /// Returns the events produced by this call.
    pub fn step(&mut self, input: Option<&str>) -> Result<Vec<Event>, RunError> {
        let first = self.transcript.len();
        match (self.status, input) {
            (Status::Ended | Status::Error, _) => return Err(RunError::Ended),
            (Status::AwaitingUser, None) => return Err(RunError::AwaitingUser),
            (Status::Running, Some(_)) => return Err(RunError::NotAwaitingUser),
            (Status::AwaitingUser, Some(text)) => {
                let here = self.current.clone();
                if text == QUIT_COMMAND {
                    self.emit(
                        Some(here),
                        EventBody::UserInput {
                            text: text.to_owned(),
                        },
                    );
                    self.finish(EndReason::Quit, Status::Ended, None);
                    return Ok(self.transcript[first..].to_vec());
                }
                self.emit(
                    Some(here),
                    EventBody::UserInput {
                        text: text.to_owned(),
                    },
                );
                self.last_message = text.to_owned();
                self.status = Status::Running;
                if !self.advance(None)? {
                    return Ok(self.transcript[first..].to_vec());
                }
            }
            (Status::Running, None) => {}
        }
        let result = self.run_machine();
        result.map(|()| self.transcript[first..].to_vec())
    }

    fn run_machine(&mut self) -> Result<(), RunError> {
        let mut steps = 0;
        loop {
            let state = self
                .automaton
                .state(self.current.as_str())
                .cloned()
                .expect("current state is declared");
            if state.is_user() {
                self.status = Status::AwaitingUser;
                return Ok(());
            }
            if steps == self.step_budget {
                let err = RunError::StepBudget(steps);
                self.finish(EndReason::StepBudget, Status::Error, Some(err.to_string()));
                return Err(err);
            }
            steps += 1;

            let input = std::mem::take(&mut self.last_message);
            let owner = Owner::State(state.id.clone());
            let readable = self.history.readable(&owner);
            let dialer = self
                .dialers
                .get_mut(&state.id)
                .expect("backend per machine state");
            let output =
                match backends::predict(state.id.as_str(), dialer.as_mut(), &input, &readable) {
                    Ok(out) => out,
                    Err(source) => {
                        let err = RunError::Backend {
                            state: state.id.clone(),
                            source,
                        };
                        self.finish(EndReason::Failure, Status::Error, Some(err.to_string()));
                        return Err(err);
                    }
                };
            self.emit(
                Some(state.id.clone()),
                EventBody::StateOutput {
                    input: input.clone(),
                    output: output.clone(),
                },
            );
            self.history.add_pair_if_attached(&owner, &input, &output);
            let policy = state.display_policy();
            if policy == DisplayPolicy::Always {
                self.emit(
                    Some(state.id.clone()),
                    EventBody::Display {
                        text: output.clone(),
                    },
                );
            }
            self.last_message = output.clone();
            let auto = (policy == DisplayPolicy::Auto).then_some(output);
            if !self.advance(auto)? {
                return Ok(());
            }
        }
    }

    /// Selects and takes the next edge from the current state. Returns
    /// `false` when the session ended instead.
    fn advance(&mut self, auto_display: Option<String>) -> Result<bool, RunError> {
        let from = self.current.clone();
        let decision = match self.decide(&from) {
            Ok(d) => d,
            Err(err) => {
                self.finish(EndReason::Failure, Status::Error, Some(err.to_string()));
                return Err(err);
            }
        };
        for evaluation in &decision.evaluations {
            self.emit(
                Some(from.clone()),
                EventBody::TriggerEval(evaluation.clone()),
            );
        }
        let Some(chosen) = decision.chosen_edge() else {
            let is_final = self
                .automaton
                .state(from.as_str())
                .is_some_and(|s| s.is_final);
            if is_final {
                if let Some(text) = auto_display {
                    // nothing follows a concluding state but the user
                    self.emit(Some(from.clone()), EventBody::Display { text });
                }
                self.finish(EndReason::Concluded, Status::Ended, None);
                return Ok(false);
            }
            let err = RunError::DeadEnd(from);
            self.finish(EndReason::DeadEnd, Status::Error, Some(err.to_string()));
            return Err(err);
        };
        let to = chosen.to.clone();
        let edge = chosen.edge.clone();
        if let Some(text) = auto_display {
            if self
                .automaton
                .state(to.as_str())
                .is_some_and(|s| s.is_user())
            {
                self.emit(Some(from.clone()), EventBody::Display { text });
            }
        }
        self.emit(
            Some(from),
            EventBody::Transition {
                edge,
                to: to.clone(),
            },
        );
        self.current = to;
        Ok(true)
    }

    fn decide(&mut self, from: &StateId) -> Result<Decision, RunError> {
        let mut warnings = Vec::new();
        let triggers = &mut self.triggers;
        let history = &self.history;
        let decision = select_next(
            &self.automaton,
            from.as_str(),
            &self.last_message,
            |trigger: &TriggerId, state: &StateId, message: &str| {
                let imp = triggers.get_mut(trigger).expect("validated trigger");
                let readable = history.readable(&Owner::Trigger(trigger.clone()));
                match imp.fire(state, message, &readable) {
                    Ok(bit) => Ok(bit),
                    Err(TriggerError::ClassifierParse(raw)) => {
                        warnings.push(format!(
                            "trigger `{trigger}`: unreadable classifier output {raw:?}, counted as 0"
                        ));
                        Ok(false)
                    }
                    Err(source) => Err(RunError::Trigger {
                        trigger: trigger.clone(),
                        source,
                    }),
                }
            },
            &mut self.rng,
        )?;
        for message in warnings {
            log::warn!("{message}");
            self.emit(Some(from.clone()), EventBody::Warning { message });
        }
        Ok(decision)
    }

    fn finish(&mut self, reason: EndReason, status: Status, detail: Option<String>) {
        self.status = status;
        let here = self.current.clone();
        self.emit(
            Some(here),
            EventBody::Terminated {
                reason,
                status,
                detail,
            },
        );
    }

    /// Ends the session normally; only allowed at a final state.
    pub fn end(&mut self) -> Result<Vec<Event>, RunError> {
        if matches!(self.status, Status::Ended | Status::Error) {
            return Err(RunError::Ended);
        }
        let is_final = self
            .automaton
            .state(self.current.as_str())
            .is_some_and(|s| s.is_final);
        if !is_final {
            return Err(RunError::NotFinal(self.current.clone()));
        }
        let first = self.transcript.len();
        self.finish(EndReason::Requested, Status::Ended, None);
        Ok(self.transcript[first..].to_vec())
    }

    /// Drives the session with scripted user turns until it ends.
    pub fn run_script<S: AsRef<str>>(&mut self, script: &[S]) -> Result<(), RunError> {
        let mut lines = script.iter();
        let mut used = 0;
        loop {
            match self.status {
                Status::Running => {
                    self.step(None)?;
                }
                Status::AwaitingUser => match lines.next() {
                    Some(line) => {
                        used += 1;
                        self.step(Some(line.as_ref()))?;
                    }
                    None => return Err(RunError::ScriptUnderrun(used)),
                },
                Status::Ended | Status::Error => return Ok(()),
            }
        }
    }
}

/// Runs `automaton` on a user script with the configured backends and
/// returns the full transcript.
pub fn run_scripted<S: AsRef<str>>(
    automaton: Arc<Automaton>,
    script: &[S],
    seed: u64,
) -> Result<Vec<Event>, RunError> {
    let mut session = Session::start(automaton, seed)?;
    session.run_script(script)?;
    Ok(session.transcript.clone())
}
