//! Survey composition: 13 images, 3 of them controls, and 10 positives with
//! two per distance, pairwise-distinct actors and pairwise-distinct visibility
//! labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use pathfinding::directed::edmonds_karp::edmonds_karp_dense;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use psych_core::annotation::{Distance, Visibility};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pool::{is_control_stratum, ImagePool};

pub const QUESTIONS: usize = 13;
pub const CONTROLS: usize = 3;
pub const PER_DISTANCE: usize = 2;

const FORBIDDEN: i64 = -1_000_000_000_000;
const ATTEMPTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurveyStatus {
    Available,
    Assigned,
    Submitted,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub image_id: String,
    pub is_control: bool,
    /// The image had already been placed in an earlier survey.
    pub reused: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Survey {
    pub survey_id: String,
    pub questions: Vec<Question>,
    pub status: SurveyStatus,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("pool cannot satisfy the survey constraints: {0}")]
    InfeasiblePool(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurveyViolation {
    #[error("survey has {0} questions")]
    QuestionCount(usize),
    #[error("survey has {0} controls")]
    ControlCount(usize),
    #[error("image {0} is not in the pool")]
    UnknownImage(String),
    #[error("image {0} is flagged with the wrong control status")]
    ControlFlagMismatch(String),
    #[error("control {0} is not a 10 m / 90-100% image")]
    ControlStratum(String),
    #[error("{count} positives at {distance_m} m")]
    PerDistance { distance_m: u32, count: usize },
    #[error("actor {0} appears twice")]
    RepeatedActor(u32),
    #[error("visibility {0}% appears twice")]
    RepeatedVisibility(u32),
}

/// Checks one survey against the composition rules.
pub fn check_survey(survey: &Survey, pool: &ImagePool) -> Result<(), SurveyViolation> {
    if survey.questions.len() != QUESTIONS {
        return Err(SurveyViolation::QuestionCount(survey.questions.len()));
    }
    let controls = survey.questions.iter().filter(|q| q.is_control).count();
    if controls != CONTROLS {
        return Err(SurveyViolation::ControlCount(controls));
    }
    let mut per_distance: BTreeMap<Distance, usize> = Distance::ALL.iter().map(|d| (*d, 0)).collect();
    let mut actors = BTreeSet::new();
    let mut visibilities = BTreeSet::new();
    for q in &survey.questions {
        let ann = pool
            .get(&q.image_id)
            .ok_or_else(|| SurveyViolation::UnknownImage(q.image_id.clone()))?;
        if pool.is_control(&q.image_id) != Some(q.is_control) {
            return Err(SurveyViolation::ControlFlagMismatch(q.image_id.clone()));
        }
        if q.is_control {
            if !is_control_stratum(ann) {
                return Err(SurveyViolation::ControlStratum(q.image_id.clone()));
            }
            continue;
        }
        *per_distance.entry(ann.distance_m).or_default() += 1;
        if !actors.insert(ann.actor_id) {
            return Err(SurveyViolation::RepeatedActor(ann.actor_id));
        }
        if !visibilities.insert(ann.visibility_pct) {
            return Err(SurveyViolation::RepeatedVisibility(ann.visibility_pct.pct()));
        }
    }
    if let Some((d, n)) = per_distance.iter().find(|(_, n)| **n != PER_DISTANCE) {
        return Err(SurveyViolation::PerDistance {
            distance_m: d.meters(),
            count: *n,
        });
    }
    Ok(())
}

type Cell = (Distance, Visibility);

/// Builds `n_surveys` surveys, deterministic in `seed`.
///
/// Positives are placed in rounds: within a round every image is used once
/// before any is used again, except where the composition rules force a
/// repeat. Repeats are flagged on the question. Controls rotate the same way.
pub fn assemble_surveys(pool: &ImagePool, n_surveys: usize, seed: u64) -> Result<Vec<Survey>, AssemblyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if pool.controls().len() < CONTROLS {
        return Err(AssemblyError::InfeasiblePool(format!(
            "{} controls, need {CONTROLS}",
            pool.controls().len()
        )));
    }
    let mut assembler = Assembler::new(pool);
    let mut ctl_uses = vec![0u32; pool.controls().len()];

    let mut surveys = Vec::with_capacity(n_surveys);
    for s in 0..n_surveys {
        let positives = assembler.next_survey(&mut rng)?;
        let controls = pick_controls(&ctl_uses, &mut rng);

        let mut questions = Vec::with_capacity(QUESTIONS);
        for i in positives {
            questions.push(Question {
                image_id: pool.positives()[i].image_id.clone(),
                is_control: false,
                reused: assembler.uses[i] > 0,
            });
            assembler.uses[i] += 1;
        }
        for i in controls {
            questions.push(Question {
                image_id: pool.controls()[i].image_id.clone(),
                is_control: true,
                reused: ctl_uses[i] > 0,
            });
            ctl_uses[i] += 1;
        }
        questions.shuffle(&mut rng);
        surveys.push(Survey {
            survey_id: format!("survey-{s:04}"),
            questions,
            status: SurveyStatus::Available,
        });
    }
    Ok(surveys)
}

struct Plan {
    floor: u32,
    /// Cell usage still owed to the planned surveys.
    residual: HashMap<Cell, i64>,
    surveys_left: usize,
}

struct Assembler<'a> {
    pool: &'a ImagePool,
    cells: HashMap<Cell, Vec<usize>>,
    slots: Vec<Distance>,
    visibilities: Vec<Visibility>,
    uses: Vec<u32>,
    plan: Option<Plan>,
}

impl<'a> Assembler<'a> {
    fn new(pool: &'a ImagePool) -> Self {
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, ann) in pool.positives().iter().enumerate() {
            cells.entry((ann.distance_m, ann.visibility_pct)).or_default().push(i);
        }
        Self {
            pool,
            cells,
            slots: Distance::ALL
                .iter()
                .flat_map(|d| std::iter::repeat_n(*d, PER_DISTANCE))
                .collect(),
            visibilities: Visibility::all().collect(),
            uses: vec![0; pool.positives().len()],
            plan: None,
        }
    }

    fn floor(&self) -> u32 {
        self.uses.iter().copied().min().unwrap_or(0)
    }

    fn fresh_counts(&self, floor: u32) -> HashMap<Cell, i64> {
        self.cells
            .iter()
            .map(|(cell, list)| (*cell, list.iter().filter(|&&i| self.uses[i] == floor).count() as i64))
            .collect()
    }

    fn next_survey(&mut self, rng: &mut ChaCha8Rng) -> Result<Vec<usize>, AssemblyError> {
        let floor = self.floor();
        let stale = self
            .plan
            .as_ref()
            .is_none_or(|p| p.floor != floor || p.surveys_left == 0);
        if stale {
            self.plan = Some(plan_round(&self.fresh_counts(floor), floor));
        }
        let plan = self.plan.as_ref().expect("just planned");
        if plan.surveys_left > 0 {
            // Actor clashes can spoil a planned survey; try other draws from
            // the plan before settling for the freshest one seen.
            let residual = plan.residual.clone();
            let mut best: Option<(usize, Vec<Cell>, Vec<usize>)> = None;
            for _ in 0..ATTEMPTS {
                let Some(cells) = self.match_cells(|cell| residual.get(cell).copied().filter(|x| *x > 0), rng) else {
                    break;
                };
                let Some(picked) = self.match_actors(&cells, floor, rng) else {
                    continue;
                };
                let fresh = picked.iter().filter(|&&i| self.uses[i] == floor).count();
                if best.as_ref().is_none_or(|(f, _, _)| fresh > *f) {
                    best = Some((fresh, cells, picked));
                }
                if fresh == self.slots.len() {
                    break;
                }
            }
            if let Some((_, cells, picked)) = best {
                let plan = self.plan.as_mut().expect("planned");
                for cell in &cells {
                    *plan.residual.get_mut(cell).expect("planned cell") -= 1;
                }
                plan.surveys_left -= 1;
                return Ok(picked);
            }
        }

        // No fully fresh survey is left in this round: prefer cells with the
        // most fresh images and accept repeats.
        let fresh = self.fresh_counts(floor);
        for _ in 0..ATTEMPTS {
            let cells = self
                .match_cells(|cell| self.cells.contains_key(cell).then(|| fresh[cell]), rng)
                .ok_or_else(|| {
                    AssemblyError::InfeasiblePool("no visibility-to-distance assignment covers every slot".into())
                })?;
            if let Some(picked) = self.match_actors(&cells, floor, rng) {
                return Ok(picked);
            }
        }
        Err(AssemblyError::InfeasiblePool(
            "no assignment with distinct actors found".into(),
        ))
    }

    /// Assigns the ten visibility labels to the two-per-distance slots,
    /// maximising `weight`; `None` weights are not allowed.
    fn match_cells(&self, weight: impl Fn(&Cell) -> Option<i64>, rng: &mut ChaCha8Rng) -> Option<Vec<Cell>> {
        let m = Matrix::from_fn(self.slots.len(), self.visibilities.len(), |(r, c)| {
            match weight(&(self.slots[r], self.visibilities[c])) {
                Some(w) => w * 1000 + rng.random_range(0..1000),
                None => FORBIDDEN,
            }
        });
        let (_, col_of_row) = kuhn_munkres(&m);
        let cells: Vec<Cell> = col_of_row
            .iter()
            .enumerate()
            .map(|(r, &c)| (self.slots[r], self.visibilities[c]))
            .collect();
        cells.iter().all(|cell| weight(cell).is_some()).then_some(cells)
    }

    /// One image per cell with all actors distinct, least-used images first.
    fn match_actors(&self, cells: &[Cell], floor: u32, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
        let mut best: Vec<HashMap<u32, usize>> = Vec::with_capacity(cells.len());
        for cell in cells {
            let mut per_actor: HashMap<u32, usize> = HashMap::new();
            for &i in &self.cells[cell] {
                let actor = self.pool.positives()[i].actor_id;
                if per_actor.get(&actor).is_none_or(|&j| self.uses[i] < self.uses[j]) {
                    per_actor.insert(actor, i);
                }
            }
            best.push(per_actor);
        }
        let mut actors: Vec<u32> = best.iter().flat_map(|m| m.keys().copied()).collect();
        actors.sort_unstable();
        actors.dedup();
        if actors.len() < cells.len() {
            return None;
        }
        let m = Matrix::from_fn(cells.len(), actors.len(), |(r, c)| match best[r].get(&actors[c]) {
            Some(&i) => -i64::from(self.uses[i] - floor) * 1000 + rng.random_range(0..1000),
            None => FORBIDDEN,
        });
        let (_, col_of_row) = kuhn_munkres(&m);
        col_of_row
            .iter()
            .enumerate()
            .map(|(r, &c)| best[r].get(&actors[c]).copied())
            .collect()
    }
}

/// Largest number of surveys that can be filled from `fresh` alone, with the
/// cell usage that achieves it.
///
/// `k` surveys fit iff the network source -> distance (capacity 2k) ->
/// visibility (capacity = fresh images in the cell) -> sink (capacity k)
/// carries 10k. Any integral flow of that size splits into `k` valid
/// surveys, so the planned surveys can be drawn one matching at a time.
fn plan_round(fresh: &HashMap<Cell, i64>, floor: u32) -> Plan {
    let distances = Distance::ALL;
    let visibilities: Vec<Visibility> = Visibility::all().collect();
    let per_vis: Vec<i64> = visibilities
        .iter()
        .map(|v| distances.iter().map(|d| fresh.get(&(*d, *v)).copied().unwrap_or(0)).sum())
        .collect();
    let per_dist: Vec<i64> = distances
        .iter()
        .map(|d| visibilities.iter().map(|v| fresh.get(&(*d, *v)).copied().unwrap_or(0)).sum())
        .collect();
    let upper = per_vis
        .iter()
        .copied()
        .chain(per_dist.iter().map(|n| n / PER_DISTANCE as i64))
        .min()
        .unwrap_or(0);

    let (source, sink) = (0usize, 1usize);
    let dist_node = |i: usize| 2 + i;
    let vis_node = |j: usize| 2 + distances.len() + j;
    let nodes: Vec<usize> = (0..2 + distances.len() + visibilities.len()).collect();
    let flow = |k: i64| {
        let mut caps = Vec::new();
        for (i, d) in distances.iter().enumerate() {
            caps.push(((source, dist_node(i)), PER_DISTANCE as i64 * k));
            for (j, v) in visibilities.iter().enumerate() {
                let f = fresh.get(&(*d, *v)).copied().unwrap_or(0);
                if f > 0 {
                    caps.push(((dist_node(i), vis_node(j)), f));
                }
            }
        }
        for j in 0..visibilities.len() {
            caps.push(((vis_node(j), sink), k));
        }
        edmonds_karp_dense(&nodes, &source, &sink, caps)
    };
    let full = (distances.len() * PER_DISTANCE) as i64;
    let (mut lo, mut hi) = (0i64, upper.max(0));
    while lo < hi {
        let mid = (lo + hi + 1) / 2;
        if flow(mid).1 == full * mid {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let mut residual = HashMap::new();
    if lo > 0 {
        for ((from, to), amount) in flow(lo).0 {
            if (2..2 + distances.len()).contains(&from) && to >= vis_node(0) && amount > 0 {
                let cell = (distances[from - 2], visibilities[to - vis_node(0)]);
                residual.insert(cell, amount);
            }
        }
    }
    Plan {
        floor,
        residual,
        surveys_left: lo as usize,
    }
}

fn pick_controls(uses: &[u32], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<(u32, u32, usize)> = uses
        .iter()
        .enumerate()
        .map(|(i, &u)| (u, rng.random::<u32>(), i))
        .collect();
    order.sort_unstable();
    order.iter().take(CONTROLS).map(|&(_, _, i)| i).collect()
}
