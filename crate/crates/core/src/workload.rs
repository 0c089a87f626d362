//! Structural latency bound: the longest run of machine states between two
//! user turns.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::StateId;
use crate::model::{Automaton, StateKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("UNVALIDATED: the automaton must pass validation before estimating its workload")]
    Unvalidated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainBound {
    Finite(usize),
    Unbounded,
}

impl ChainBound {
    fn max(self, other: ChainBound) -> ChainBound {
        match (self, other) {
            (ChainBound::Finite(a), ChainBound::Finite(b)) => ChainBound::Finite(a.max(b)),
            _ => ChainBound::Unbounded,
        }
    }

    fn plus_one(self) -> ChainBound {
        match self {
            ChainBound::Finite(n) => ChainBound::Finite(n + 1),
            ChainBound::Unbounded => ChainBound::Unbounded,
        }
    }

    pub fn finite(self) -> Option<usize> {
        match self {
            ChainBound::Finite(n) => Some(n),
            ChainBound::Unbounded => None,
        }
    }
}

impl fmt::Display for ChainBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainBound::Finite(n) => write!(f, "{n}"),
            ChainBound::Unbounded => f.write_str("unbounded"),
        }
    }
}

/// Where a machine chain starts or stops.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    /// Session start, when the initial state is a machine state.
    Start,
    User(StateId),
    /// The dialogue can conclude at a final machine state.
    Terminal,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Start => f.write_str("<start>"),
            Endpoint::User(id) => write!(f, "{id}"),
            Endpoint::Terminal => f.write_str("<end>"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadEstimate {
    pub max_machine_chain: ChainBound,
    pub per_pair: BTreeMap<(Endpoint, Endpoint), ChainBound>,
    /// `max_machine_chain` times the mean per-state cost, when both are known.
    pub estimated_latency: Option<f64>,
}

type Reach = BTreeMap<Endpoint, ChainBound>;

struct Estimator<'a> {
    automaton: &'a Automaton,
    cyclic: BTreeSet<&'a str>,
    memo: HashMap<&'a str, Reach>,
}

impl<'a> Estimator<'a> {
    fn new(automaton: &'a Automaton) -> Self {
        Self {
            automaton,
            cyclic: machine_cycle_nodes(automaton),
            memo: HashMap::new(),
        }
    }

    fn is_machine(&self, id: &str) -> bool {
        self.automaton.state(id).is_some_and(|s| s.is_machine())
    }

    /// Longest machine chain from `id` (counted inclusively) to each reachable endpoint.
    fn reach(&mut self, id: &'a str) -> Reach {
        if let Some(r) = self.memo.get(id) {
            return r.clone();
        }
        let reach = if self.reaches_cycle(id) {
            self.endpoints_from(id)
                .into_iter()
                .map(|e| (e, ChainBound::Unbounded))
                .collect()
        } else {
            let mut reach = Reach::new();
            let state = self.automaton.state(id).expect("validated automaton");
            let succ: Vec<&'a StateId> = self.automaton.outgoing(id).map(|e| &e.to).collect();
            if state.is_final || succ.is_empty() {
                merge(&mut reach, Endpoint::Terminal, ChainBound::Finite(1));
            }
            for to in succ {
                if self.is_machine(to.as_str()) {
                    for (end, bound) in self.reach(to.as_str()) {
                        merge(&mut reach, end, bound.plus_one());
                    }
                } else {
                    merge(
                        &mut reach,
                        Endpoint::User(to.clone()),
                        ChainBound::Finite(1),
                    );
                }
            }
            reach
        };
        self.memo.insert(id, reach.clone());
        reach
    }

    fn machine_closure(&self, id: &'a str) -> BTreeSet<&'a str> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                continue;
            }
            for e in self.automaton.outgoing(n) {
                if self.is_machine(e.to.as_str()) {
                    stack.push(e.to.as_str());
                }
            }
        }
        seen
    }

    fn reaches_cycle(&self, id: &'a str) -> bool {
        self.machine_closure(id)
            .iter()
            .any(|n| self.cyclic.contains(n))
    }

    fn endpoints_from(&self, id: &'a str) -> BTreeSet<Endpoint> {
        let mut ends = BTreeSet::new();
        for n in self.machine_closure(id) {
            let state = self.automaton.state(n).expect("validated automaton");
            let mut any = false;
            for e in self.automaton.outgoing(n) {
                any = true;
                if !self.is_machine(e.to.as_str()) {
                    ends.insert(Endpoint::User(e.to.clone()));
                }
            }
            if state.is_final || !any {
                ends.insert(Endpoint::Terminal);
            }
        }
        if ends.is_empty() {
            // a closed machine loop only stops at the step budget
            ends.insert(Endpoint::Terminal);
        }
        ends
    }
}

fn merge(reach: &mut Reach, end: Endpoint, bound: ChainBound) {
    reach
        .entry(end)
        .and_modify(|b| *b = b.max(bound))
        .or_insert(bound);
}

/// Machine states lying on a cycle of the machine-only subgraph.
fn machine_cycle_nodes(automaton: &Automaton) -> BTreeSet<&str> {
    let machine: Vec<&str> = automaton
        .states()
        .filter(|s| s.is_machine())
        .map(|s| s.id.as_str())
        .collect();
    let machine_set: BTreeSet<&str> = machine.iter().copied().collect();
    let succ = |n: &str| -> Vec<&str> {
        automaton
            .edges()
            .iter()
            .filter(|e| e.from == n && machine_set.contains(e.to.as_str()))
            .map(|e| e.to.as_str())
            .collect()
    };
    // a node is cyclic iff it can reach itself through at least one edge
    let mut cyclic = BTreeSet::new();
    for &start in &machine {
        let mut seen = BTreeSet::new();
        let mut stack = succ(start);
        while let Some(n) = stack.pop() {
            if n == start {
                cyclic.insert(start);
                break;
            }
            if seen.insert(n) {
                stack.extend(succ(n));
            }
        }
    }
    cyclic
}

/// Bounds the number of machine states visited between consecutive user turns.
///
/// Cycles passing through a user state do not make the bound unbounded; a
/// reachable cycle made only of machine states does.
pub fn estimate_workload(
    automaton: &Automaton,
    per_state_cost: &HashMap<StateKind, f64>,
) -> Result<WorkloadEstimate, WorkloadError> {
    if !automaton.is_validated() {
        return Err(WorkloadError::Unvalidated);
    }
    let mut est = Estimator::new(automaton);
    let mut per_pair: BTreeMap<(Endpoint, Endpoint), ChainBound> = BTreeMap::new();
    let mut record = |from: &Endpoint, reach: Reach| {
        for (to, bound) in reach {
            per_pair
                .entry((from.clone(), to))
                .and_modify(|b| *b = b.max(bound))
                .or_insert(bound);
        }
    };

    if let Some(init) = automaton.initial() {
        if est.is_machine(init.as_str()) {
            let r = est.reach(init.as_str());
            record(&Endpoint::Start, r);
        }
    }
    for user in automaton.states().filter(|s| s.is_user()) {
        let from = Endpoint::User(user.id.clone());
        for edge in automaton.outgoing(user.id.as_str()) {
            let reach = if est.is_machine(edge.to.as_str()) {
                est.reach(edge.to.as_str())
            } else {
                Reach::from([(Endpoint::User(edge.to.clone()), ChainBound::Finite(0))])
            };
            record(&from, reach);
        }
    }

    let max_machine_chain = per_pair
        .values()
        .fold(ChainBound::Finite(0), |acc, b| acc.max(*b));

    let costs: Vec<f64> = automaton
        .states()
        .filter(|s| s.is_machine())
        .filter_map(|s| per_state_cost.get(&s.kind).copied())
        .collect();
    let estimated_latency = match (max_machine_chain, costs.is_empty()) {
        (ChainBound::Finite(n), false) => {
            Some(n as f64 * costs.iter().sum::<f64>() / costs.len() as f64)
        }
        _ => None,
    };

    Ok(WorkloadEstimate {
        max_machine_chain,
        per_pair,
        estimated_latency,
    })
}
