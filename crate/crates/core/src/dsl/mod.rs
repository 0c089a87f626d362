//! The `.mfa` definition language.
//!
//! ```text
//! automaton "arps" {
//!   state q_0 user
//!   state l_1 dialer prompt_file = "prompts/l_1.txt" history = h:rw
//!   trigger t_0 keyword keywords = ["outrageous", "unacceptable"] priority = 2
//!   history h
//!   edge q_0 -> l_2 on t_0
//!   edge q_0 -> l_1
//!   initial q_0
//! }
//! ```
//!
//! Parsing only checks syntax and id uniqueness; name resolution and the
//! structural rules are left to validation.

mod lexer;
mod parser;
mod serialize;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Automaton;

pub use serialize::serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub expected: String,
    pub found: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}: expected {}, found {}",
            self.line, self.column, self.expected, self.found
        )
    }
}

impl std::error::Error for ParseError {}

/// Definition text together with where it came from.
#[derive(Debug, Clone)]
pub struct DefinitionSource {
    pub path: Option<PathBuf>,
    pub text: String,
    line_starts: Vec<usize>,
}

impl DefinitionSource {
    pub fn new(path: Option<PathBuf>, text: impl Into<String>) -> Self {
        let text = text.into();
        let line_starts = std::iter::once(0)
            .chain(text.match_indices('\n').map(|(i, _)| i + 1))
            .collect();
        Self {
            path,
            text,
            line_starts,
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, LoadError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LoadError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::new(Some(path.to_path_buf()), text))
    }

    /// The 1-based line `n`, without its terminator.
    pub fn line(&self, n: usize) -> Option<&str> {
        let start = *self.line_starts.get(n.checked_sub(1)?)?;
        let end = self
            .line_starts
            .get(n)
            .map_or(self.text.len(), |&next| next - 1);
        Some(self.text[start..end].trim_end_matches('\r'))
    }

    pub fn parse(&self) -> Result<Automaton, Vec<ParseError>> {
        let mut automaton = parse(&self.text)?;
        if let Some(dir) = self.path.as_deref().and_then(Path::parent) {
            automaton.set_base_dir(dir);
        }
        Ok(automaton)
    }

    /// Renders an error with the offending source line and a caret.
    pub fn render(&self, error: &ParseError) -> String {
        let name = self
            .path
            .as_deref()
            .map_or("<input>".to_owned(), |p| p.display().to_string());
        let mut out = format!("{name}:{error}");
        if let Some(line) = self.line(error.line) {
            let pad = " ".repeat(error.column.saturating_sub(1));
            out.push_str(&format!("\n  | {line}\n  | {pad}^"));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("IO: {path}: {message}")]
    Io { path: String, message: String },
    #[error("{}", render_all(.0))]
    Parse(Vec<String>),
}

fn render_all(lines: &[String]) -> String {
    lines.join("\n")
}

pub fn parse(text: &str) -> Result<Automaton, Vec<ParseError>> {
    parser::parse_text(text)
}

/// Reads and parses a definition file; relative paths inside it resolve
/// against the file's directory.
pub fn parse_file(path: impl AsRef<Path>) -> Result<Automaton, LoadError> {
    let source = DefinitionSource::read(path)?;
    source
        .parse()
        .map_err(|errs| LoadError::Parse(errs.iter().map(|e| source.render(e)).collect()))
}
