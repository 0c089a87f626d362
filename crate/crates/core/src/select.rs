//! Successor selection: the operational transition function.
//!
//! Every outgoing edge of the current state is scored with
//! `min(priority * fired, priority)`; the highest-scoring firing edge wins and
//! ties are broken uniformly at random with the caller's RNG.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{StateId, TriggerId};
use crate::model::Automaton;

/// Value of a trigger with output `fired` at priority `priority`.
pub fn effective_value(priority: u32, fired: bool) -> u32 {
    (priority * u32::from(fired)).min(priority)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerOutput {
    pub trigger: TriggerId,
    pub fired: bool,
}

/// Outcome of evaluating one outgoing edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeEvaluation {
    pub edge: String,
    pub to: StateId,
    pub priority: u32,
    /// Outputs of the triggers that were consulted, in edge order. The
    /// conjunction stops at the first trigger returning 0.
    pub outputs: Vec<TriggerOutput>,
    pub fired: bool,
    pub value: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub evaluations: Vec<EdgeEvaluation>,
    /// Index into `evaluations` of the selected edge.
    pub chosen: Option<usize>,
}

impl Decision {
    pub fn target(&self) -> Option<&StateId> {
        self.chosen.map(|i| &self.evaluations[i].to)
    }

    pub fn chosen_edge(&self) -> Option<&EdgeEvaluation> {
        self.chosen.map(|i| &self.evaluations[i])
    }
}

/// Picks the successor of `current` for `message`.
///
/// `eval(trigger, state, message)` supplies trigger outputs; each distinct
/// trigger is evaluated at most once per call. The RNG is consulted only when
/// several firing edges share the maximal value.
pub fn select_next<R, E, F>(
    automaton: &Automaton,
    current: &str,
    message: &str,
    mut eval: F,
    rng: &mut R,
) -> Result<Decision, E>
where
    R: Rng + ?Sized,
    F: FnMut(&TriggerId, &StateId, &str) -> Result<bool, E>,
{
    let current_id = StateId::new(current);
    let mut cache: HashMap<&TriggerId, bool> = HashMap::new();
    let mut evaluations = Vec::new();

    for edge in automaton.outgoing(current) {
        let priority = automaton.effective_priority(edge);
        let mut outputs = Vec::with_capacity(edge.triggers.len());
        let mut fired = true;
        for trigger in &edge.triggers {
            let bit = match cache.get(trigger) {
                Some(&bit) => bit,
                None => {
                    let bit = eval(trigger, &current_id, message)?;
                    cache.insert(trigger, bit);
                    bit
                }
            };
            outputs.push(TriggerOutput {
                trigger: trigger.clone(),
                fired: bit,
            });
            if !bit {
                fired = false;
                break;
            }
        }
        evaluations.push(EdgeEvaluation {
            edge: edge.id().to_owned(),
            to: edge.to.clone(),
            priority,
            outputs,
            fired,
            value: effective_value(priority, fired),
        });
    }

    let best = evaluations.iter().map(|e| e.value).max().unwrap_or(0);
    let chosen = if best == 0 {
        None
    } else {
        let candidates: Vec<usize> = evaluations
            .iter()
            .enumerate()
            .filter(|(_, e)| e.value == best)
            .map(|(i, _)| i)
            .collect();
        Some(if candidates.len() == 1 {
            candidates[0]
        } else {
            candidates[rng.random_range(0..candidates.len())]
        })
    };

    Ok(Decision {
        evaluations,
        chosen,
    })
}
