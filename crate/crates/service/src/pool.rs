use std::collections::HashMap;

use psych_core::annotation::{Annotation, Distance};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("control image {image_id} is at {distance_m} m / {visibility_pct}% (controls must be 10 m at 90% or 100%)")]
    BadControl {
        image_id: String,
        distance_m: u32,
        visibility_pct: u32,
    },
    #[error("image id {0} appears more than once across the pool")]
    DuplicateImage(String),
}

/// The positives subset and the easy control subset surveys are drawn from.
#[derive(Debug, Clone)]
pub struct ImagePool {
    positives: Vec<Annotation>,
    controls: Vec<Annotation>,
    index: HashMap<String, (bool, usize)>,
}

pub fn is_control_stratum(ann: &Annotation) -> bool {
    ann.distance_m == Distance::D10 && matches!(ann.visibility_pct.pct(), 90 | 100)
}

impl ImagePool {
    pub fn new(positives: Vec<Annotation>, controls: Vec<Annotation>) -> Result<Self, PoolError> {
        if let Some(bad) = controls.iter().find(|c| !is_control_stratum(c)) {
            return Err(PoolError::BadControl {
                image_id: bad.image_id.clone(),
                distance_m: bad.distance_m.meters(),
                visibility_pct: bad.visibility_pct.pct(),
            });
        }
        let mut index = HashMap::with_capacity(positives.len() + controls.len());
        for (control, list) in [(false, &positives), (true, &controls)] {
            for (i, ann) in list.iter().enumerate() {
                if index.insert(ann.image_id.clone(), (control, i)).is_some() {
                    return Err(PoolError::DuplicateImage(ann.image_id.clone()));
                }
            }
        }
        Ok(Self {
            positives,
            controls,
            index,
        })
    }

    pub fn positives(&self) -> &[Annotation] {
        &self.positives
    }

    pub fn controls(&self) -> &[Annotation] {
        &self.controls
    }

    pub fn get(&self, image_id: &str) -> Option<&Annotation> {
        self.index.get(image_id).map(|&(control, i)| {
            if control {
                &self.controls[i]
            } else {
                &self.positives[i]
            }
        })
    }

    pub fn is_control(&self, image_id: &str) -> Option<bool> {
        self.index.get(image_id).map(|&(control, _)| control)
    }

    pub fn annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.positives.iter().chain(&self.controls)
    }
}

/// A pool shaped like the study's: `actors` actors at every distance and
/// visibility, thinned at random to `positives` images, plus `controls` easy
/// images at 10 m. Frames are 3840 x 2160 with person-sized boxes.
pub fn synthetic_pool(actors: u32, positives: usize, controls: usize, seed: u64) -> ImagePool {
    use psych_core::annotation::{StratumKey, Visibility};
    use psych_core::geometry::BBox;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let boxed = |d: Distance, rng: &mut rand_chacha::ChaCha8Rng| {
        let h = 2000.0 / f64::from(d.meters()) * rng.random_range(0.8..1.2);
        let w = h * rng.random_range(0.35..0.6);
        BBox::new(rng.random_range(0.0..3840.0 - w), rng.random_range(0.0..2160.0 - h), w, h).expect("positive size")
    };
    let mut cells: Vec<(u32, StratumKey)> = (1..=actors)
        .flat_map(|a| StratumKey::all().map(move |k| (a, k)))
        .collect();
    cells.shuffle(&mut rng);
    cells.truncate(positives);
    cells.sort_by_key(|&(a, k)| (k, a));
    let pos = cells
        .into_iter()
        .map(|(actor_id, k)| Annotation {
            image_id: format!("p-{}-{}-{actor_id:03}", k.distance_m.meters(), k.visibility_pct.pct()),
            actor_id,
            distance_m: k.distance_m,
            visibility_pct: k.visibility_pct,
            gt_box: boxed(k.distance_m, &mut rng),
            image_width_px: 3840,
            image_height_px: 2160,
        })
        .collect();
    let ctl = (0..controls)
        .map(|i| Annotation {
            image_id: format!("c-{i:04}"),
            actor_id: i as u32 % actors.max(1) + 1,
            distance_m: Distance::D10,
            visibility_pct: Visibility::new(if i % 2 == 0 { 100 } else { 90 }).expect("valid"),
            gt_box: boxed(Distance::D10, &mut rng),
            image_width_px: 3840,
            image_height_px: 2160,
        })
        .collect();
    ImagePool::new(pos, ctl).expect("generated pool is consistent")
}
