//! The service state: surveys, sessions and reviewed records, with every
//! change written to the store before it is acknowledged.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use psych_core::annotation::Annotation;
use psych_core::behavior::{BehavioralRecord, TrailEvent};
use psych_core::geometry::{BBox, CircleSelection};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::pool::ImagePool;
use crate::review::{review_submission, ReviewResult, ReviewThresholds, Verdict};
use crate::session::{AnswerInput, Page, Phase, PracticeOutcome, Session, SessionError, SessionEvent, PRACTICE_IMAGES};
use crate::store::{LogEntry, Store, StoreError};
use crate::survey::{assemble_surveys, AssemblyError, Survey, SurveyStatus, QUESTIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub review: ReviewThresholds,
    /// Exactly three pool image ids shown during practice.
    pub practice_images: Vec<String>,
    /// Let a worker take more than one survey.
    pub allow_repeat_workers: bool,
}

impl ServiceConfig {
    pub fn with_default_practice(pool: &ImagePool) -> Self {
        Self {
            review: ReviewThresholds::default(),
            practice_images: default_practice(pool),
            allow_repeat_workers: false,
        }
    }
}

/// An easy, a middling and a hard positive, ranked by `distance / visibility`.
pub fn default_practice(pool: &ImagePool) -> Vec<String> {
    let mut ranked: Vec<&Annotation> = pool.positives().iter().collect();
    ranked.sort_by(|a, b| {
        let score = |x: &Annotation| x.distance_m.meters() * 1000 / x.visibility_pct.pct();
        score(a).cmp(&score(b)).then_with(|| a.image_id.cmp(&b.image_id))
    });
    if ranked.len() < PRACTICE_IMAGES {
        return ranked.iter().map(|a| a.image_id.clone()).collect();
    }
    let n = ranked.len() - 1;
    [0, n / 2, n * 3 / 4].iter().map(|&i| ranked[i].image_id.clone()).collect()
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown survey {0}")]
    UnknownSurvey(String),
    #[error("no survey is available")]
    NoSurveyAvailable,
    #[error("worker {0} already took a survey")]
    RepeatWorker(String),
    #[error("survey {survey_id} is {status:?}, expected {expected:?}")]
    WrongStatus {
        survey_id: String,
        status: SurveyStatus,
        expected: SurveyStatus,
    },
    #[error("session {0} has not finished its survey")]
    SessionNotDone(String),
    #[error("practice needs {PRACTICE_IMAGES} images from the pool: {0}")]
    BadPractice(String),
    #[error("image {0} is not in the pool")]
    UnknownImage(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("replaying log entry {index}: {source}")]
    Replay {
        index: usize,
        #[source]
        source: Box<ServiceError>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub url: String,
    pub width_px: u32,
    pub height_px: u32,
}

impl ImageRef {
    fn of(ann: &Annotation) -> Self {
        Self {
            image_id: ann.image_id.clone(),
            url: format!("/images/{}", ann.image_id),
            width_px: ann.image_width_px,
            height_px: ann.image_height_px,
        }
    }
}

/// What the client should show next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum NextPayload {
    Consent,
    Instructions,
    Samples,
    Practice {
        attempts: u32,
        images: Vec<ImageRef>,
    },
    Experiment {
        question_idx: usize,
        total: usize,
        image: ImageRef,
        /// The running score is due before this question.
        score_due: bool,
    },
    Done {
        answered: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerOutcome {
    pub record: BehavioralRecord,
    pub next_question: Option<usize>,
    /// False when this was a retry of an answer already stored.
    pub stored: bool,
}

#[derive(Debug)]
pub struct Engine {
    pool: ImagePool,
    config: ServiceConfig,
    practice_gt: Vec<BBox>,
    surveys: Vec<Survey>,
    survey_index: HashMap<String, usize>,
    sessions: BTreeMap<String, Session>,
    reviews: BTreeMap<String, ReviewResult>,
    accepted: Vec<BehavioralRecord>,
    quarantined: Vec<BehavioralRecord>,
    store: Option<Store>,
}

impl Engine {
    /// In-memory engine over already assembled surveys.
    pub fn new(pool: ImagePool, surveys: Vec<Survey>, config: ServiceConfig) -> Result<Self, ServiceError> {
        let practice_gt = config
            .practice_images
            .iter()
            .map(|id| pool.get(id).map(|a| a.gt_box).ok_or_else(|| ServiceError::BadPractice(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        if practice_gt.len() != PRACTICE_IMAGES {
            return Err(ServiceError::BadPractice(format!("{} configured", practice_gt.len())));
        }
        let survey_index = surveys
            .iter()
            .enumerate()
            .map(|(i, s)| (s.survey_id.clone(), i))
            .collect();
        Ok(Self {
            pool,
            config,
            practice_gt,
            surveys,
            survey_index,
            sessions: BTreeMap::new(),
            reviews: BTreeMap::new(),
            accepted: Vec::new(),
            quarantined: Vec::new(),
            store: None,
        })
    }

    /// Opens a persistent engine. Surveys are assembled on first open and
    /// loaded afterwards; the event log is replayed to restore state.
    pub fn open(
        pool: ImagePool,
        config: ServiceConfig,
        dir: &Path,
        n_surveys: usize,
        seed: u64,
    ) -> Result<Self, ServiceError> {
        let (store, entries) = Store::open(dir)?;
        let surveys = match store.load_surveys()? {
            Some(s) => s,
            None => {
                let s = assemble_surveys(&pool, n_surveys, seed)?;
                store.save_surveys(&s)?;
                s
            }
        };
        let mut engine = Self::new(pool, surveys, config)?;
        for (index, entry) in entries.into_iter().enumerate() {
            engine.replay(entry).map_err(|e| ServiceError::Replay {
                index,
                source: Box::new(e),
            })?;
        }
        store.rewrite_records(true, &engine.accepted)?;
        store.rewrite_records(false, &engine.quarantined)?;
        engine.store = Some(store);
        Ok(engine)
    }

    fn replay(&mut self, entry: LogEntry) -> Result<(), ServiceError> {
        match entry {
            LogEntry::SessionCreated {
                session_id,
                worker_id,
                survey_id,
            } => self.claim(session_id, worker_id, Some(survey_id)).map(drop),
            LogEntry::Acknowledged { session_id, page } => self.acknowledge(&session_id, page).map(drop),
            LogEntry::PracticeSubmitted { session_id, selections } => {
                self.submit_practice(&session_id, &selections).map(drop)
            }
            LogEntry::TrailFlushed {
                session_id,
                question_idx,
                batch,
                events,
            } => self.flush_trail(&session_id, question_idx, batch, &events).map(drop),
            LogEntry::AnswerSubmitted { session_id, answer } => self.submit_answer(&session_id, &answer).map(drop),
            LogEntry::Reviewed { session_id, result } => self.apply_review(&session_id, result).map(drop),
            LogEntry::Requeued { survey_id } => self.requeue(&survey_id).map(drop),
        }
    }

    fn log(&mut self, entry: LogEntry) -> Result<(), ServiceError> {
        if let Some(store) = self.store.as_mut() {
            store.append(&entry)?;
        }
        Ok(())
    }

    pub fn pool(&self) -> &ImagePool {
        &self.pool
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn surveys(&self) -> &[Survey] {
        &self.surveys
    }

    pub fn survey(&self, survey_id: &str) -> Option<&Survey> {
        self.survey_index.get(survey_id).map(|&i| &self.surveys[i])
    }

    pub fn session(&self, session_id: &str) -> Option<&Session> {
        self.sessions.get(session_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn review_of(&self, session_id: &str) -> Option<&ReviewResult> {
        self.reviews.get(session_id)
    }

    /// Records of accepted sessions; what analytics reads by default.
    pub fn accepted_records(&self) -> &[BehavioralRecord] {
        &self.accepted
    }

    pub fn quarantined_records(&self) -> &[BehavioralRecord] {
        &self.quarantined
    }

    fn session_mut(&mut self, session_id: &str) -> Result<&mut Session, ServiceError> {
        self.sessions
            .get_mut(session_id)
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))
    }

    /// Claims the first available survey for a worker.
    pub fn create_session(&mut self, worker_id: &str) -> Result<&Session, ServiceError> {
        let session_id = format!("session-{:06}", self.sessions.len() + 1);
        self.claim(session_id, worker_id.to_string(), None)
    }

    fn claim(&mut self, session_id: String, worker_id: String, survey_id: Option<String>) -> Result<&Session, ServiceError> {
        if !self.config.allow_repeat_workers && self.sessions.values().any(|s| s.worker_id == worker_id) {
            return Err(ServiceError::RepeatWorker(worker_id));
        }
        let idx = match &survey_id {
            Some(id) => {
                let i = *self
                    .survey_index
                    .get(id)
                    .ok_or_else(|| ServiceError::UnknownSurvey(id.clone()))?;
                self.expect_status(i, SurveyStatus::Available)?;
                i
            }
            None => self
                .surveys
                .iter()
                .position(|s| s.status == SurveyStatus::Available)
                .ok_or(ServiceError::NoSurveyAvailable)?,
        };
        let survey = &mut self.surveys[idx];
        survey.status = SurveyStatus::Assigned;
        let session = Session::new(
            session_id.clone(),
            worker_id.clone(),
            survey.survey_id.clone(),
            survey.questions.clone(),
        );
        let survey_id = survey.survey_id.clone();
        self.sessions.insert(session_id.clone(), session);
        self.log(LogEntry::SessionCreated {
            session_id: session_id.clone(),
            worker_id,
            survey_id,
        })?;
        Ok(&self.sessions[&session_id])
    }

    fn expect_status(&self, idx: usize, expected: SurveyStatus) -> Result<(), ServiceError> {
        let s = &self.surveys[idx];
        if s.status != expected {
            return Err(ServiceError::WrongStatus {
                survey_id: s.survey_id.clone(),
                status: s.status,
                expected,
            });
        }
        Ok(())
    }

    pub fn acknowledge(&mut self, session_id: &str, page: Page) -> Result<Phase, ServiceError> {
        let phase = self
            .session_mut(session_id)?
            .advance_phase(&SessionEvent::Acknowledge { page }, &[])?;
        self.log(LogEntry::Acknowledged {
            session_id: session_id.to_string(),
            page,
        })?;
        Ok(phase)
    }

    pub fn submit_practice(
        &mut self,
        session_id: &str,
        selections: &[CircleSelection],
    ) -> Result<PracticeOutcome, ServiceError> {
        let gt = self.practice_gt.clone();
        let outcome = self.session_mut(session_id)?.grade_practice(selections, &gt)?;
        self.log(LogEntry::PracticeSubmitted {
            session_id: session_id.to_string(),
            selections: selections.to_vec(),
        })?;
        Ok(outcome)
    }

    pub fn flush_trail(
        &mut self,
        session_id: &str,
        question_idx: usize,
        batch: u32,
        events: &[TrailEvent],
    ) -> Result<bool, ServiceError> {
        let applied = self.session_mut(session_id)?.flush_trail(question_idx, batch, events)?;
        if applied {
            self.log(LogEntry::TrailFlushed {
                session_id: session_id.to_string(),
                question_idx,
                batch,
                events: events.to_vec(),
            })?;
        }
        Ok(applied)
    }

    pub fn submit_answer(&mut self, session_id: &str, answer: &AnswerInput) -> Result<AnswerOutcome, ServiceError> {
        let session = self
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))?;
        if let Some(prev) = session.answers.last() {
            let retry = answer.question_idx + 1 == session.answers.len()
                && prev.final_selection == answer.final_selection
                && prev.response_time_ms == answer.response_time_ms;
            if retry {
                return Ok(AnswerOutcome {
                    record: prev.clone(),
                    next_question: session.current_question().map(|_| session.answers.len()),
                    stored: false,
                });
            }
        }
        let image_id = session
            .current_question()
            .map(|q| q.image_id.clone())
            .ok_or(SessionError::WrongPhase {
                expected: Phase::Experiment,
                actual: session.phase,
            })?;
        let ann = self
            .pool
            .get(&image_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownImage(image_id.clone()))?;
        let session = self.session_mut(session_id)?;
        let record = session.record_answer(answer, &ann)?.clone();
        let next_question = session.current_question().map(|_| session.answers.len());
        let survey_id = session.survey_id.clone();
        if session.phase == Phase::Done {
            if let Some(&i) = self.survey_index.get(&survey_id) {
                self.surveys[i].status = SurveyStatus::Submitted;
            }
        }
        self.log(LogEntry::AnswerSubmitted {
            session_id: session_id.to_string(),
            answer: answer.clone(),
        })?;
        Ok(AnswerOutcome {
            record,
            next_question,
            stored: true,
        })
    }

    pub fn midpoint_score(&self, session_id: &str) -> Result<usize, ServiceError> {
        let session = self
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))?;
        Ok(session.midpoint_score()?)
    }

    /// Reviews a finished session with the configured thresholds.
    pub fn review(&mut self, session_id: &str) -> Result<ReviewResult, ServiceError> {
        let session = self
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))?;
        if session.phase != Phase::Done {
            return Err(ServiceError::SessionNotDone(session_id.to_string()));
        }
        let result = review_submission(&session.answers, &self.config.review);
        self.apply_review(session_id, result)
    }

    fn apply_review(&mut self, session_id: &str, result: ReviewResult) -> Result<ReviewResult, ServiceError> {
        let session = self
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))?;
        if session.phase != Phase::Done {
            return Err(ServiceError::SessionNotDone(session_id.to_string()));
        }
        let idx = *self
            .survey_index
            .get(&session.survey_id)
            .ok_or_else(|| ServiceError::UnknownSurvey(session.survey_id.clone()))?;
        if self.reviews.contains_key(session_id) {
            return Err(ServiceError::WrongStatus {
                survey_id: session.survey_id.clone(),
                status: self.surveys[idx].status,
                expected: SurveyStatus::Submitted,
            });
        }
        self.expect_status(idx, SurveyStatus::Submitted)?;
        let accepted = result.verdict == Verdict::Accept;
        let records = session.answers.clone();
        debug_assert_eq!(records.len(), QUESTIONS);
        self.log(LogEntry::Reviewed {
            session_id: session_id.to_string(),
            result: result.clone(),
        })?;
        self.surveys[idx].status = if accepted {
            SurveyStatus::Accepted
        } else {
            SurveyStatus::Rejected
        };
        if let Some(store) = &self.store {
            if let Err(e) = store.append_records(accepted, &records) {
                warn!("record file append failed, it is rebuilt on restart: {e}");
            }
        }
        if accepted {
            self.accepted.extend(records);
        } else {
            self.quarantined.extend(records);
        }
        self.reviews.insert(session_id.to_string(), result.clone());
        Ok(result)
    }

    /// Makes a rejected survey available to new workers.
    pub fn requeue(&mut self, survey_id: &str) -> Result<&Survey, ServiceError> {
        let idx = *self
            .survey_index
            .get(survey_id)
            .ok_or_else(|| ServiceError::UnknownSurvey(survey_id.to_string()))?;
        self.expect_status(idx, SurveyStatus::Rejected)?;
        self.surveys[idx].status = SurveyStatus::Available;
        self.log(LogEntry::Requeued {
            survey_id: survey_id.to_string(),
        })?;
        Ok(&self.surveys[idx])
    }

    pub fn next(&self, session_id: &str) -> Result<NextPayload, ServiceError> {
        let session = self
            .sessions
            .get(session_id)
            .ok_or_else(|| ServiceError::UnknownSession(session_id.to_string()))?;
        Ok(match session.phase {
            Phase::Consent => NextPayload::Consent,
            Phase::Instructions => NextPayload::Instructions,
            Phase::Samples => NextPayload::Samples,
            Phase::Practice => NextPayload::Practice {
                attempts: session.practice_attempts,
                images: self
                    .config
                    .practice_images
                    .iter()
                    .filter_map(|id| self.pool.get(id))
                    .map(ImageRef::of)
                    .collect(),
            },
            Phase::Experiment => {
                let question_idx = session.answers.len();
                let q = &session.questions[question_idx];
                let ann = self
                    .pool
                    .get(&q.image_id)
                    .ok_or_else(|| ServiceError::UnknownImage(q.image_id.clone()))?;
                NextPayload::Experiment {
                    question_idx,
                    total: session.questions.len(),
                    image: ImageRef::of(ann),
                    score_due: question_idx == crate::session::MIDPOINT,
                }
            }
            Phase::Done => NextPayload::Done {
                answered: session.answers.len(),
            },
        })
    }
}
