//! Shared conversation histories.
//!
//! An [`Archive`] is an observable, append-mostly log of `(message, response)`
//! pairs. States and triggers are bound to archives through a
//! [`HistoryAttachment`] carrying an access mode; the set of attachments is the
//! bipartite history graph. Every mutation of an archive notifies all of its
//! observers synchronously, before the mutating call returns.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{ArchiveId, StateId, TriggerId};
use crate::model::{AccessMode, Automaton};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HistoryError {
    #[error("MULTI_ATTACH: {0} is already attached to a history")]
    MultiAttach(Owner),
    #[error("TRIGGER_WRITE: trigger {0} may only attach read-only")]
    TriggerWrite(Owner),
    #[error("READ_ONLY: {0} cannot write to history `{1}`")]
    ReadOnly(Owner, ArchiveId),
    #[error("WRITE_ONLY: {0} cannot read history `{1}`")]
    WriteOnly(Owner, ArchiveId),
    #[error("NOT_FOUND: no pair with seq {seq} in history `{archive}`")]
    NotFound { archive: ArchiveId, seq: u64 },
    #[error("unknown history `{0}`")]
    UnknownArchive(ArchiveId),
    #[error("{0} is not attached to any history")]
    NotAttached(Owner),
}

/// A vertex on the state/trigger side of the history graph.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "lowercase")]
pub enum Owner {
    State(StateId),
    Trigger(TriggerId),
}

impl Owner {
    pub fn state(id: impl Into<StateId>) -> Self {
        Owner::State(id.into())
    }

    pub fn trigger(id: impl Into<TriggerId>) -> Self {
        Owner::Trigger(id.into())
    }
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::State(id) => write!(f, "state {id}"),
            Owner::Trigger(id) => write!(f, "trigger {id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangePair {
    pub seq: u64,
    pub origin: StateId,
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum ArchiveEvent {
    Added(ExchangePair),
    Removed(ExchangePair),
}

impl ArchiveEvent {
    pub fn seq(&self) -> u64 {
        match self {
            ArchiveEvent::Added(p) | ArchiveEvent::Removed(p) => p.seq,
        }
    }
}

pub trait ArchiveObserver: Send {
    fn update(&mut self, archive: &ArchiveId, event: &ArchiveEvent);
}

enum Observer {
    Attached { owner: Owner, seen: u64 },
    External(Box<dyn ArchiveObserver>),
}

pub struct Archive {
    id: ArchiveId,
    entries: Vec<ExchangePair>,
    last_seq: u64,
    observers: Vec<Observer>,
}

impl fmt::Debug for Archive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Archive")
            .field("id", &self.id)
            .field("entries", &self.entries)
            .field("last_seq", &self.last_seq)
            .field("observers", &self.observers.len())
            .finish()
    }
}

impl Archive {
    pub fn new(id: impl Into<ArchiveId>) -> Self {
        Self {
            id: id.into(),
            entries: Vec::new(),
            last_seq: 0,
            observers: Vec::new(),
        }
    }

    pub fn id(&self) -> &ArchiveId {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn subscribe(&mut self, observer: Box<dyn ArchiveObserver>) {
        self.observers.push(Observer::External(observer));
    }

    /// Appends a pair with the next sequence number. Sequence numbers are never reused.
    pub fn add(
        &mut self,
        origin: impl Into<StateId>,
        input: impl Into<String>,
        output: impl Into<String>,
    ) -> ExchangePair {
        self.last_seq += 1;
        let pair = ExchangePair {
            seq: self.last_seq,
            origin: origin.into(),
            input: input.into(),
            output: output.into(),
        };
        self.entries.push(pair.clone());
        self.notify(&ArchiveEvent::Added(pair.clone()));
        pair
    }

    pub fn remove(&mut self, seq: u64) -> Result<ExchangePair, HistoryError> {
        let at = self
            .entries
            .iter()
            .position(|p| p.seq == seq)
            .ok_or_else(|| HistoryError::NotFound {
                archive: self.id.clone(),
                seq,
            })?;
        let pair = self.entries.remove(at);
        self.notify(&ArchiveEvent::Removed(pair.clone()));
        Ok(pair)
    }

    pub fn get(&self, seq: u64) -> Option<&ExchangePair> {
        self.entries.iter().find(|p| p.seq == seq)
    }

    /// Snapshot copy in sequence order.
    pub fn pairs(&self) -> Vec<ExchangePair> {
        self.entries.clone()
    }

    /// Notifications received so far by an attached owner.
    pub fn notifications_for(&self, owner: &Owner) -> Option<u64> {
        self.observers.iter().find_map(|o| match o {
            Observer::Attached { owner: o, seen } if o == owner => Some(*seen),
            _ => None,
        })
    }

    fn notify(&mut self, event: &ArchiveEvent) {
        for observer in &mut self.observers {
            match observer {
                Observer::Attached { seen, .. } => *seen += 1,
                Observer::External(o) => o.update(&self.id, event),
            }
        }
    }

    /// One JSON record per line: `{"seq", "origin", "input", "output"}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for pair in &self.entries {
            out.push_str(&serde_json::to_string(pair).expect("pairs serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryAttachment {
    pub owner: Owner,
    pub archive: ArchiveId,
    pub mode: AccessMode,
}

/// Archives plus the attachments binding states and triggers to them.
#[derive(Debug, Default)]
pub struct HistoryGraph {
    archives: BTreeMap<ArchiveId, Archive>,
    attachments: BTreeMap<Owner, HistoryAttachment>,
}

impl HistoryGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds fresh archives and attachments for one session of `automaton`.
    pub fn from_automaton(automaton: &Automaton) -> Result<Self, HistoryError> {
        let mut graph = Self::new();
        for id in automaton.archives() {
            graph.add_archive(id.clone());
        }
        for state in automaton.states() {
            for b in &state.history {
                graph.attach(Owner::State(state.id.clone()), b.archive.clone(), b.mode)?;
            }
        }
        for trigger in automaton.triggers() {
            for b in &trigger.history {
                graph.attach(
                    Owner::Trigger(trigger.id.clone()),
                    b.archive.clone(),
                    b.mode,
                )?;
            }
        }
        Ok(graph)
    }

    pub fn add_archive(&mut self, id: impl Into<ArchiveId>) {
        let id = id.into();
        self.archives
            .entry(id.clone())
            .or_insert_with(|| Archive::new(id));
    }

    pub fn archive(&self, id: &str) -> Option<&Archive> {
        self.archives.get(id)
    }

    pub fn archive_mut(&mut self, id: &str) -> Option<&mut Archive> {
        self.archives.get_mut(id)
    }

    pub fn archives(&self) -> impl Iterator<Item = &Archive> {
        self.archives.values()
    }

    pub fn attachment(&self, owner: &Owner) -> Option<&HistoryAttachment> {
        self.attachments.get(owner)
    }

    pub fn attachments(&self) -> impl Iterator<Item = &HistoryAttachment> {
        self.attachments.values()
    }

    /// Binds `owner` to `archive`; the owner becomes an observer of the archive.
    pub fn attach(
        &mut self,
        owner: Owner,
        archive: impl Into<ArchiveId>,
        mode: AccessMode,
    ) -> Result<HistoryAttachment, HistoryError> {
        let archive = archive.into();
        if self.attachments.contains_key(&owner) {
            return Err(HistoryError::MultiAttach(owner));
        }
        if matches!(owner, Owner::Trigger(_)) && mode != AccessMode::Read {
            return Err(HistoryError::TriggerWrite(owner));
        }
        let target = self
            .archives
            .get_mut(&archive)
            .ok_or_else(|| HistoryError::UnknownArchive(archive.clone()))?;
        target.observers.push(Observer::Attached {
            owner: owner.clone(),
            seen: 0,
        });
        let attachment = HistoryAttachment {
            owner: owner.clone(),
            archive,
            mode,
        };
        self.attachments.insert(owner, attachment.clone());
        Ok(attachment)
    }

    /// Appends through an attachment; requires write access.
    pub fn add_pair(
        &mut self,
        attachment: &HistoryAttachment,
        input: impl Into<String>,
        output: impl Into<String>,
    ) -> Result<ExchangePair, HistoryError> {
        if !attachment.mode.can_write() {
            return Err(HistoryError::ReadOnly(
                attachment.owner.clone(),
                attachment.archive.clone(),
            ));
        }
        let origin = match &attachment.owner {
            Owner::State(id) => id.clone(),
            // unreachable for attachments created by `attach`
            Owner::Trigger(_) => {
                return Err(HistoryError::TriggerWrite(attachment.owner.clone()));
            }
        };
        let archive = self
            .archives
            .get_mut(&attachment.archive)
            .ok_or_else(|| HistoryError::UnknownArchive(attachment.archive.clone()))?;
        Ok(archive.add(origin, input, output))
    }

    /// Snapshot of the archive behind an attachment; requires read access.
    pub fn read_pairs(
        &self,
        attachment: &HistoryAttachment,
    ) -> Result<Vec<ExchangePair>, HistoryError> {
        if !attachment.mode.can_read() {
            return Err(HistoryError::WriteOnly(
                attachment.owner.clone(),
                attachment.archive.clone(),
            ));
        }
        self.archives
            .get(&attachment.archive)
            .map(Archive::pairs)
            .ok_or_else(|| HistoryError::UnknownArchive(attachment.archive.clone()))
    }

    pub fn remove_pair(&mut self, archive: &str, seq: u64) -> Result<ExchangePair, HistoryError> {
        self.archives
            .get_mut(archive)
            .ok_or_else(|| HistoryError::UnknownArchive(archive.into()))?
            .remove(seq)
    }

    /// Records a pair when `owner` holds a writable attachment; no effect otherwise.
    pub fn add_pair_if_attached(
        &mut self,
        owner: &Owner,
        input: &str,
        output: &str,
    ) -> Option<ExchangePair> {
        let attachment = self.attachments.get(owner)?.clone();
        self.add_pair(&attachment, input, output).ok()
    }

    /// What `owner` may read: the attached archive's pairs, or nothing.
    pub fn readable(&self, owner: &Owner) -> Vec<ExchangePair> {
        self.attachments
            .get(owner)
            .and_then(|a| self.read_pairs(a).ok())
            .unwrap_or_default()
    }

    pub fn notifications_for(&self, owner: &Owner) -> Option<u64> {
        let a = self.attachments.get(owner)?;
        self.archives.get(&a.archive)?.notifications_for(owner)
    }
}
