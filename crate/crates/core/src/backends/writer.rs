use std::fs::OpenOptions;
use std::path::PathBuf;

use regex::Regex;

use super::{BackendError, Dialer};
use crate::history::ExchangePair;

pub const SINK_HEADER: [&str; 4] = ["field", "value", "timestamp", "session_id"];

/// Appends one CSV record per call and passes its input through unchanged.
///
/// With an extraction pattern, the recorded value is the first capture group
/// (or the whole match) of the pattern in the message; without a match the
/// full message is recorded.
#[derive(Debug)]
pub struct WriterModule {
    sink: PathBuf,
    field: String,
    extract: Option<Regex>,
    session_id: String,
}

impl WriterModule {
    pub fn new(
        sink: PathBuf,
        field: impl Into<String>,
        pattern: Option<&str>,
        session_id: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let extract = pattern
            .map(Regex::new)
            .transpose()
            .map_err(|e| BackendError::Config(format!("invalid extraction pattern: {e}")))?;
        Ok(Self {
            sink,
            field: field.into(),
            extract,
            session_id: session_id.into(),
        })
    }

    fn value<'m>(&self, message: &'m str) -> &'m str {
        let Some(re) = &self.extract else {
            return message;
        };
        match re.captures(message) {
            Some(c) => c
                .get(1)
                .or_else(|| c.get(0))
                .map_or(message, |m| m.as_str()),
            None => message,
        }
    }

    fn append(&self, value: &str) -> Result<(), BackendError> {
        let io = |e: &dyn std::fmt::Display| BackendError::SinkIo {
            path: self.sink.display().to_string(),
            message: e.to_string(),
        };
        if let Some(dir) = self.sink.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io(&e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.sink)
            .map_err(|e| io(&e))?;
        let fresh = file.metadata().map_err(|e| io(&e))?.len() == 0;
        let mut out = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        if fresh {
            out.write_record(SINK_HEADER).map_err(|e| io(&e))?;
        }
        let timestamp = chrono::Utc::now().to_rfc3339();
        out.write_record([self.field.as_str(), value, &timestamp, &self.session_id])
            .map_err(|e| io(&e))?;
        out.flush().map_err(|e| io(&e))
    }
}

impl Dialer for WriterModule {
    fn predict(
        &mut self,
        message: &str,
        _history: &[ExchangePair],
    ) -> Result<String, BackendError> {
        self.append(self.value(message))?;
        Ok(message.to_owned())
    }
}
