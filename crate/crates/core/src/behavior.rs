//! Behavioral data: magnifier trails, final selections and response times.
//!
//! Two JSON-lines layouts are used. The raw layout ([`RawRecord`]) is what the
//! survey service logs for every answered image. Ingesting it against the
//! annotation file yields [`BehavioralRecord`]s, which add the selection IoU and
//! the stratum/image context needed by analytics; those are written in the
//! scored layout consumed by `analyze`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{self, Annotation, AnnotationError, Distance, StratumKey, Visibility};
use crate::geometry::{circle_box_iou, CircleSelection};
use crate::jsonl::{self, JsonlError};

/// One sample of the lens state, timestamped from when the image was shown.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrailEvent {
    pub t_ms: u64,
    pub x: f64,
    pub y: f64,
    pub zoom_level: u32,
    pub lens_radius_px: f64,
}

impl TrailEvent {
    pub fn lens(&self) -> Option<CircleSelection> {
        CircleSelection::new(self.x, self.y, self.lens_radius_px).ok()
    }
}

/// On-disk record as emitted by the survey service (no IoU).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub session_id: String,
    pub worker_id: String,
    pub image_id: String,
    pub is_control: bool,
    pub events: Vec<TrailEvent>,
    pub final_selection: CircleSelection,
    pub response_time_ms: u64,
}

/// A validated worker x image outcome with its selection IoU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralRecord {
    pub session_id: String,
    pub worker_id: String,
    pub image_id: String,
    pub is_control: bool,
    pub events: Vec<TrailEvent>,
    pub final_selection: CircleSelection,
    pub response_time_ms: u64,
    pub iou: f64,
    pub distance_m: Distance,
    pub visibility_pct: Visibility,
    pub image_width_px: u32,
    pub image_height_px: u32,
}

impl BehavioralRecord {
    pub fn stratum(&self) -> StratumKey {
        StratumKey::new(self.distance_m, self.visibility_pct)
    }

    pub fn is_hit(&self) -> bool {
        self.iou > 0.0
    }

    pub fn to_raw(&self) -> RawRecord {
        RawRecord {
            session_id: self.session_id.clone(),
            worker_id: self.worker_id.clone(),
            image_id: self.image_id.clone(),
            is_control: self.is_control,
            events: self.events.clone(),
            final_selection: self.final_selection,
            response_time_ms: self.response_time_ms,
        }
    }
}

/// Problems with a single record. During ingest these are reported per line
/// and the offending record is skipped.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("line {line}: no annotation for image {image_id}")]
    MissingAnnotation { line: usize, image_id: String },
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: trail timestamps decrease in session {session_id}, image {image_id}")]
    NonMonotonicTrail {
        line: usize,
        session_id: String,
        image_id: String,
    },
}

impl IngestError {
    pub fn line(&self) -> usize {
        match self {
            IngestError::MissingAnnotation { line, .. }
            | IngestError::MalformedLine { line, .. }
            | IngestError::NonMonotonicTrail { line, .. } => *line,
        }
    }
}

/// A lens coordinate that had to be clamped into the image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClampWarning {
    pub line: usize,
    pub event_index: usize,
    pub from: (f64, f64),
    pub to: (f64, f64),
}

/// Checks a raw record against its annotation and computes its IoU.
///
/// Out-of-image lens positions are clamped and reported through `clamped`.
pub fn score_record(
    raw: RawRecord,
    ann: &Annotation,
    line: usize,
    clamped: &mut Vec<ClampWarning>,
) -> Result<BehavioralRecord, IngestError> {
    let malformed = |message: String| IngestError::MalformedLine { line, message };

    if raw.events.is_empty() {
        return Err(malformed("trail has no events".into()));
    }
    if raw.response_time_ms == 0 {
        return Err(malformed("response_time_ms must be positive".into()));
    }
    if raw
        .events
        .windows(2)
        .any(|pair| pair[1].t_ms < pair[0].t_ms)
    {
        return Err(IngestError::NonMonotonicTrail {
            line,
            session_id: raw.session_id,
            image_id: raw.image_id,
        });
    }
    for e in &raw.events {
        if !(e.x.is_finite() && e.y.is_finite() && e.lens_radius_px.is_finite()) {
            return Err(malformed("non-finite trail coordinate".into()));
        }
        if e.lens_radius_px <= 0.0 || e.zoom_level == 0 {
            return Err(malformed("lens radius and zoom level must be positive".into()));
        }
    }
    let last = *raw.events.last().expect("non-empty");
    if raw.response_time_ms < last.t_ms {
        return Err(malformed(format!(
            "response_time_ms {} precedes last trail event at {} ms",
            raw.response_time_ms, last.t_ms
        )));
    }
    let sel = raw.final_selection;
    if sel.cx != last.x || sel.cy != last.y || sel.radius != last.lens_radius_px {
        return Err(malformed(
            "final_selection differs from the last lens position".into(),
        ));
    }

    let (w, h) = (f64::from(ann.image_width_px), f64::from(ann.image_height_px));
    let mut events = raw.events;
    for (event_index, e) in events.iter_mut().enumerate() {
        let (cx, cy) = (e.x.clamp(0.0, w), e.y.clamp(0.0, h));
        if (cx, cy) != (e.x, e.y) {
            clamped.push(ClampWarning {
                line,
                event_index,
                from: (e.x, e.y),
                to: (cx, cy),
            });
            e.x = cx;
            e.y = cy;
        }
    }
    let last = *events.last().expect("non-empty");
    let final_selection = CircleSelection {
        cx: last.x,
        cy: last.y,
        radius: last.lens_radius_px,
    };
    let iou = circle_box_iou(&final_selection, &ann.gt_box);

    Ok(BehavioralRecord {
        session_id: raw.session_id,
        worker_id: raw.worker_id,
        image_id: raw.image_id,
        is_control: raw.is_control,
        events,
        final_selection,
        response_time_ms: raw.response_time_ms,
        iou,
        distance_m: ann.distance_m,
        visibility_pct: ann.visibility_pct,
        image_width_px: ann.image_width_px,
        image_height_px: ann.image_height_px,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCount {
    pub distance_m: Distance,
    pub visibility_pct: Visibility,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub record_count: usize,
    pub session_count: usize,
    pub worker_count: usize,
    pub control_count: usize,
    pub positive_count: usize,
    /// All 50 strata, including empty ones.
    pub per_stratum: Vec<StratumCount>,
}

impl DatasetSummary {
    pub fn from_records(records: &[BehavioralRecord]) -> Self {
        let mut counts: BTreeMap<StratumKey, usize> =
            StratumKey::all().map(|k| (k, 0)).collect();
        for r in records {
            *counts.entry(r.stratum()).or_default() += 1;
        }
        let workers: BTreeSet<&str> = records.iter().map(|r| r.worker_id.as_str()).collect();
        let sessions: BTreeSet<&str> = records.iter().map(|r| r.session_id.as_str()).collect();
        let control_count = records.iter().filter(|r| r.is_control).count();
        Self {
            record_count: records.len(),
            session_count: sessions.len(),
            worker_count: workers.len(),
            control_count,
            positive_count: records.len() - control_count,
            per_stratum: counts
                .into_iter()
                .map(|(k, count)| StratumCount {
                    distance_m: k.distance_m,
                    visibility_pct: k.visibility_pct,
                    count,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IngestOutput {
    pub records: Vec<BehavioralRecord>,
    pub summary: DatasetSummary,
    pub issues: Vec<IngestError>,
    pub clamped: Vec<ClampWarning>,
}

#[derive(Debug, Error)]
pub enum IngestFailure {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

/// Validates `(line_no, text)` pairs of the raw layout against annotations.
pub fn ingest_lines<I>(lines: I, annotations: &HashMap<String, Annotation>) -> IngestOutput
where
    I: IntoIterator<Item = (usize, String)>,
{
    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut clamped = Vec::new();
    for (line, text) in lines {
        let raw: RawRecord = match serde_json::from_str(&text) {
            Ok(raw) => raw,
            Err(e) => {
                issues.push(IngestError::MalformedLine {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let Some(ann) = annotations.get(&raw.image_id) else {
            issues.push(IngestError::MissingAnnotation {
                line,
                image_id: raw.image_id,
            });
            continue;
        };
        match score_record(raw, ann, line, &mut clamped) {
            Ok(rec) => records.push(rec),
            Err(e) => issues.push(e),
        }
    }
    let summary = DatasetSummary::from_records(&records);
    IngestOutput {
        records,
        summary,
        issues,
        clamped,
    }
}

/// Reads a raw behavioral file and its annotation file.
pub fn ingest(behavior_file: &Path, annotation_file: &Path) -> Result<IngestOutput, IngestFailure> {
    let anns = annotation::read_annotations(annotation_file)?;
    let index = annotation::index_annotations(&anns)?;
    let lines = jsonl::lines(behavior_file)?;
    Ok(ingest_lines(lines, &index))
}

/// Writes records in the raw layout (IoU and context omitted).
pub fn write_raw(path: &Path, records: &[BehavioralRecord]) -> Result<(), JsonlError> {
    let raw: Vec<RawRecord> = records.iter().map(BehavioralRecord::to_raw).collect();
    jsonl::write_all(path, &raw)
}

/// Writes records in the scored layout.
pub fn write_scored(path: &Path, records: &[BehavioralRecord]) -> Result<(), JsonlError> {
    jsonl::write_all(path, records)
}

pub fn read_scored(path: &Path) -> Result<Vec<BehavioralRecord>, JsonlError> {
    jsonl::read_strict(path)
}

/// Records split by whether the final selection overlaps the person.
#[derive(Debug, Clone, Default)]
pub struct TpFpSplit<'a> {
    pub true_positives: Vec<&'a BehavioralRecord>,
    pub false_positives: Vec<&'a BehavioralRecord>,
}

/// TP iff `iou > 0`; a selection that merely touches the box is a miss.
pub fn label_tp_fp(records: &[BehavioralRecord]) -> TpFpSplit<'_> {
    let (true_positives, false_positives) = records.iter().partition(|r| r.is_hit());
    TpFpSplit {
        true_positives,
        false_positives,
    }
}
