//! Transition guards.
//!
//! A trigger maps `(state, message)` to a bit. Built-ins: always-true,
//! keyword, regex pattern and an LLM-backed binary classifier. Triggers get
//! the readable part of their attached history but never write to it.

use regex::{Regex, RegexBuilder};
use thiserror::Error;

use crate::backends::{self, BackendEnv, BackendError, Dialer};
use crate::history::ExchangePair;
use crate::ids::StateId;
use crate::model::{CasePolicy, TriggerDef, TriggerKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriggerError {
    #[error("CLASSIFIER_PARSE: cannot read a bit from {0:?}")]
    ClassifierParse(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("trigger configuration: {0}")]
    Config(String),
}

pub trait Trigger: Send {
    /// `f(state, message)`; the built-ins ignore `state`.
    fn fire(
        &mut self,
        state: &StateId,
        message: &str,
        history: &[ExchangePair],
    ) -> Result<bool, TriggerError>;
}

impl<F> Trigger for F
where
    F: FnMut(&StateId, &str) -> bool + Send,
{
    fn fire(
        &mut self,
        state: &StateId,
        message: &str,
        _: &[ExchangePair],
    ) -> Result<bool, TriggerError> {
        Ok(self(state, message))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysTrigger;

impl Trigger for AlwaysTrigger {
    fn fire(&mut self, _: &StateId, _: &str, _: &[ExchangePair]) -> Result<bool, TriggerError> {
        Ok(true)
    }
}

/// Fires when any keyword occurs as a whole word.
#[derive(Debug, Clone)]
pub struct KeywordTrigger {
    re: Regex,
}

impl KeywordTrigger {
    pub fn new<S: AsRef<str>>(keywords: &[S], case: CasePolicy) -> Result<Self, TriggerError> {
        if keywords.is_empty() {
            return Err(TriggerError::Config("empty keyword list".into()));
        }
        let alternatives: Vec<String> = keywords
            .iter()
            .map(|k| regex::escape(k.as_ref().trim()))
            .collect();
        let source = format!(r"(?:^|[^\w])(?:{})(?:$|[^\w])", alternatives.join("|"));
        let re = RegexBuilder::new(&source)
            .case_insensitive(case == CasePolicy::Insensitive)
            .build()
            .map_err(|e| TriggerError::Config(e.to_string()))?;
        Ok(Self { re })
    }
}

impl Trigger for KeywordTrigger {
    fn fire(
        &mut self,
        _: &StateId,
        message: &str,
        _: &[ExchangePair],
    ) -> Result<bool, TriggerError> {
        Ok(self.re.is_match(message))
    }
}

#[derive(Debug, Clone)]
pub struct PatternTrigger {
    re: Regex,
}

impl PatternTrigger {
    pub fn new(pattern: &str) -> Result<Self, TriggerError> {
        Regex::new(pattern)
            .map(|re| Self { re })
            .map_err(|e| TriggerError::Config(e.to_string()))
    }
}

impl Trigger for PatternTrigger {
    fn fire(
        &mut self,
        _: &StateId,
        message: &str,
        _: &[ExchangePair],
    ) -> Result<bool, TriggerError> {
        Ok(self.re.is_match(message))
    }
}

/// Binary classifier backed by a chat model.
pub struct LlmClassifier {
    name: String,
    dialer: Box<dyn Dialer>,
}

impl LlmClassifier {
    pub fn new(name: impl Into<String>, dialer: Box<dyn Dialer>) -> Self {
        Self {
            name: name.into(),
            dialer,
        }
    }
}

impl Trigger for LlmClassifier {
    fn fire(
        &mut self,
        _: &StateId,
        message: &str,
        history: &[ExchangePair],
    ) -> Result<bool, TriggerError> {
        let reply = backends::predict(&self.name, self.dialer.as_mut(), message, history)?;
        parse_classifier_output(&reply)
    }
}

/// Reads a bit from a classifier completion: a leading `1`/`0`, or a first
/// word `yes`/`no` in any case.
pub fn parse_classifier_output(completion: &str) -> Result<bool, TriggerError> {
    let text = completion.trim();
    match text.chars().next() {
        Some('1') => return Ok(true),
        Some('0') => return Ok(false),
        _ => {}
    }
    let first = text
        .split(|c: char| !c.is_alphanumeric())
        .next()
        .unwrap_or_default()
        .to_lowercase();
    match first.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(TriggerError::ClassifierParse(completion.to_owned())),
    }
}

/// Instantiates the runtime trigger described by `def`.
pub fn build_trigger(def: &TriggerDef, env: &BackendEnv) -> Result<Box<dyn Trigger>, TriggerError> {
    let p = &def.params;
    Ok(match def.kind {
        TriggerKind::Always => Box::new(AlwaysTrigger),
        TriggerKind::Keyword => Box::new(KeywordTrigger::new(
            p.keywords.as_deref().unwrap_or_default(),
            p.case.unwrap_or_default(),
        )?),
        TriggerKind::Pattern => {
            Box::new(PatternTrigger::new(p.pattern.as_deref().ok_or_else(
                || TriggerError::Config("missing pattern".into()),
            )?)?)
        }
        TriggerKind::Llm => Box::new(LlmClassifier::new(
            def.id.as_str(),
            env.build_dialer(def.id.as_str(), p, def.temperature())?,
        )),
    })
}
