//! Append-only persistence.
//!
//! `events.jsonl` holds every accepted state change in order; replaying it
//! through the engine rebuilds sessions and the survey-status table.
//! `surveys.json` is the assembled survey list. `behavior.jsonl` and
//! `quarantine.jsonl` hold raw records of accepted and rejected sessions and
//! are rewritten from the replayed state on open.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use psych_core::behavior::{BehavioralRecord, TrailEvent};
use psych_core::geometry::CircleSelection;
use psych_core::jsonl::{self, JsonlError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::review::ReviewResult;
use crate::session::{AnswerInput, Page};
use crate::survey::Survey;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SURVEYS_FILE: &str = "surveys.json";
pub const BEHAVIOR_FILE: &str = "behavior.jsonl";
pub const QUARANTINE_FILE: &str = "quarantine.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("bad survey file {path}: {source}")]
    Surveys {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    SessionCreated {
        session_id: String,
        worker_id: String,
        survey_id: String,
    },
    Acknowledged {
        session_id: String,
        page: Page,
    },
    PracticeSubmitted {
        session_id: String,
        selections: Vec<CircleSelection>,
    },
    TrailFlushed {
        session_id: String,
        question_idx: usize,
        batch: u32,
        events: Vec<TrailEvent>,
    },
    AnswerSubmitted {
        session_id: String,
        answer: AnswerInput,
    },
    Reviewed {
        session_id: String,
        result: ReviewResult,
    },
    Requeued {
        survey_id: String,
    },
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    events: BufWriter<File>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Store {
    /// Opens (creating if needed) a store directory and returns the logged entries.
    pub fn open(dir: &Path) -> Result<(Self, Vec<LogEntry>), StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(EVENTS_FILE);
        let entries = if path.exists() {
            jsonl::read_strict(&path)?
        } else {
            Vec::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok((
            Self {
                dir: dir.to_path_buf(),
                events: BufWriter::new(file),
            },
            entries,
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append(&mut self, entry: &LogEntry) -> Result<(), StoreError> {
        let path = self.dir.join(EVENTS_FILE);
        let line = serde_json::to_string(entry).map_err(JsonlError::from)?;
        writeln!(self.events, "{line}").map_err(io_err(&path))?;
        self.events.flush().map_err(io_err(&path))?;
        self.events.get_ref().sync_data().map_err(io_err(&path))
    }

    pub fn load_surveys(&self) -> Result<Option<Vec<Survey>>, StoreError> {
        let path = self.dir.join(SURVEYS_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|source| StoreError::Surveys { path, source })
    }

    pub fn save_surveys(&self, surveys: &[Survey]) -> Result<(), StoreError> {
        let path = self.dir.join(SURVEYS_FILE);
        let text = serde_json::to_string_pretty(surveys).map_err(JsonlError::from)?;
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn append_records(&self, accepted: bool, records: &[BehavioralRecord]) -> Result<(), StoreError> {
        let path = self.records_path(accepted);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut out = BufWriter::new(file);
        for r in records {
            let line = serde_json::to_string(&r.to_raw()).map_err(JsonlError::from)?;
            writeln!(out, "{line}").map_err(io_err(&path))?;
        }
        out.flush().map_err(io_err(&path))
    }

    pub fn rewrite_records(&self, accepted: bool, records: &[BehavioralRecord]) -> Result<(), StoreError> {
        let raw: Vec<_> = records.iter().map(BehavioralRecord::to_raw).collect();
        Ok(jsonl::write_all(&self.records_path(accepted), &raw)?)
    }

    pub fn records_path(&self, accepted: bool) -> PathBuf {
        self.dir.join(if accepted { BEHAVIOR_FILE } else { QUARANTINE_FILE })
    }
}
