//! Per-worker session: consent, instructions, samples, practice, then the
//! 13 survey questions.

use psych_core::annotation::Annotation;
use psych_core::behavior::{score_record, BehavioralRecord, RawRecord, TrailEvent};
use psych_core::geometry::{circle_box_iou, BBox, CircleSelection};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::survey::{Question, QUESTIONS};

pub const PRACTICE_IMAGES: usize = 3;
/// Answers after which the running score is shown (half of 13, rounded up).
pub const MIDPOINT: usize = QUESTIONS.div_ceil(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Consent,
    Instructions,
    Samples,
    Practice,
    Experiment,
    Done,
}

/// Informational pages that are passed by acknowledging them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Page {
    Consent,
    Instructions,
    Samples,
}

impl Page {
    fn phase(self) -> Phase {
        match self {
            Page::Consent => Phase::Consent,
            Page::Instructions => Phase::Instructions,
            Page::Samples => Phase::Samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Acknowledge { page: Page },
    SubmitPractice { selections: Vec<CircleSelection> },
}

impl SessionEvent {
    fn name(&self) -> String {
        match self {
            SessionEvent::Acknowledge { page } => format!("acknowledge {page:?}").to_lowercase(),
            SessionEvent::SubmitPractice { .. } => "submit practice".into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("{event} is not allowed during {phase:?}")]
    IllegalTransition { phase: Phase, event: String },
    #[error("expected phase {expected:?}, session is in {actual:?}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("practice needs exactly {PRACTICE_IMAGES} selections, got {0}")]
    PracticeSize(usize),
    #[error("answer for question {got} but the current question is {expected}")]
    OutOfOrderAnswer { expected: usize, got: usize },
    #[error("trail batch {got} arrived while expecting batch {expected}")]
    OutOfOrderBatch { expected: u32, got: u32 },
    #[error("score is available after exactly {MIDPOINT} answers, {answered} given")]
    WrongTime { answered: usize },
    #[error("invalid answer: {0}")]
    InvalidAnswer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PracticeOutcome {
    pub passed: bool,
    pub hits: Vec<bool>,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerInput {
    pub question_idx: usize,
    pub events: Vec<TrailEvent>,
    pub final_selection: CircleSelection,
    pub response_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub worker_id: String,
    pub survey_id: String,
    pub questions: Vec<Question>,
    pub phase: Phase,
    pub practice_attempts: u32,
    pub practice_passed: bool,
    /// Trail events flushed for the current question.
    pub trail: Vec<TrailEvent>,
    pub next_batch: u32,
    pub answers: Vec<BehavioralRecord>,
}

impl Session {
    pub fn new(session_id: String, worker_id: String, survey_id: String, questions: Vec<Question>) -> Self {
        Self {
            session_id,
            worker_id,
            survey_id,
            questions,
            phase: Phase::Consent,
            practice_attempts: 0,
            practice_passed: false,
            trail: Vec::new(),
            next_batch: 0,
            answers: Vec::new(),
        }
    }

    pub fn current_question(&self) -> Option<&Question> {
        match self.phase {
            Phase::Experiment => self.questions.get(self.answers.len()),
            _ => None,
        }
    }

    /// Applies one phase event. Practice events need the practice ground truth.
    pub fn advance_phase(&mut self, event: &SessionEvent, practice_gt: &[BBox]) -> Result<Phase, SessionError> {
        let illegal = || SessionError::IllegalTransition {
            phase: self.phase,
            event: event.name(),
        };
        match event {
            SessionEvent::Acknowledge { page } => {
                if page.phase() != self.phase {
                    return Err(illegal());
                }
                self.phase = match page {
                    Page::Consent => Phase::Instructions,
                    Page::Instructions => Phase::Samples,
                    Page::Samples => Phase::Practice,
                };
            }
            SessionEvent::SubmitPractice { selections } => {
                if self.phase != Phase::Practice {
                    return Err(illegal());
                }
                self.grade_practice(selections, practice_gt)?;
            }
        }
        Ok(self.phase)
    }

    /// Passes only when every selection intersects its person box; a failure
    /// counts the attempt and leaves the session in practice for a retry.
    pub fn grade_practice(
        &mut self,
        selections: &[CircleSelection],
        practice_gt: &[BBox],
    ) -> Result<PracticeOutcome, SessionError> {
        if self.phase != Phase::Practice {
            return Err(SessionError::WrongPhase {
                expected: Phase::Practice,
                actual: self.phase,
            });
        }
        if selections.len() != PRACTICE_IMAGES || practice_gt.len() != PRACTICE_IMAGES {
            return Err(SessionError::PracticeSize(selections.len()));
        }
        let hits: Vec<bool> = selections
            .iter()
            .zip(practice_gt)
            .map(|(sel, gt)| circle_box_iou(sel, gt) > 0.0)
            .collect();
        let passed = hits.iter().all(|h| *h);
        self.practice_attempts += 1;
        if passed {
            self.practice_passed = true;
            self.phase = Phase::Experiment;
        }
        Ok(PracticeOutcome {
            passed,
            hits,
            attempts: self.practice_attempts,
        })
    }

    fn check_question(&self, question_idx: usize) -> Result<(), SessionError> {
        if self.phase != Phase::Experiment {
            return Err(SessionError::WrongPhase {
                expected: Phase::Experiment,
                actual: self.phase,
            });
        }
        if question_idx != self.answers.len() {
            return Err(SessionError::OutOfOrderAnswer {
                expected: self.answers.len(),
                got: question_idx,
            });
        }
        Ok(())
    }

    /// Buffers part of the current question's trail. Returns false for a
    /// batch that was already applied.
    pub fn flush_trail(&mut self, question_idx: usize, batch: u32, events: &[TrailEvent]) -> Result<bool, SessionError> {
        self.check_question(question_idx)?;
        if batch < self.next_batch {
            return Ok(false);
        }
        if batch > self.next_batch {
            return Err(SessionError::OutOfOrderBatch {
                expected: self.next_batch,
                got: batch,
            });
        }
        self.trail.extend_from_slice(events);
        self.next_batch += 1;
        Ok(true)
    }

    /// Scores and stores the answer to the current question.
    ///
    /// The stored trail is the flushed buffer followed by `input.events`.
    pub fn record_answer(&mut self, input: &AnswerInput, ann: &Annotation) -> Result<&BehavioralRecord, SessionError> {
        self.check_question(input.question_idx)?;
        let question = &self.questions[input.question_idx];
        if question.image_id != ann.image_id {
            return Err(SessionError::InvalidAnswer(format!(
                "annotation {} does not belong to question {}",
                ann.image_id, input.question_idx
            )));
        }
        let mut events = self.trail.clone();
        events.extend_from_slice(&input.events);
        let raw = RawRecord {
            session_id: self.session_id.clone(),
            worker_id: self.worker_id.clone(),
            image_id: question.image_id.clone(),
            is_control: question.is_control,
            events,
            final_selection: input.final_selection,
            response_time_ms: input.response_time_ms,
        };
        let record = score_record(raw, ann, input.question_idx + 1, &mut Vec::new())
            .map_err(|e| SessionError::InvalidAnswer(e.to_string()))?;
        self.answers.push(record);
        self.trail.clear();
        self.next_batch = 0;
        if self.answers.len() == QUESTIONS {
            self.phase = Phase::Done;
        }
        Ok(self.answers.last().expect("just pushed"))
    }

    /// Number of hits so far, available right after the midpoint answer.
    pub fn midpoint_score(&self) -> Result<usize, SessionError> {
        if self.answers.len() != MIDPOINT {
            return Err(SessionError::WrongTime {
                answered: self.answers.len(),
            });
        }
        Ok(self.answers.iter().filter(|r| r.is_hit()).count())
    }
}
