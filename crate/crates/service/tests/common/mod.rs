#![allow(dead_code)]

use psych_core::annotation::Annotation;
use psych_core::behavior::TrailEvent;
use psych_core::geometry::CircleSelection;
use psych_service::pool::synthetic_pool;
use psych_service::session::AnswerInput;
use psych_service::{assemble_surveys, Engine, ImagePool, ServiceConfig};

pub fn small_pool() -> ImagePool {
    synthetic_pool(12, 600, 9, 5)
}

pub fn engine(n_surveys: usize) -> Engine {
    let pool = small_pool();
    let surveys = assemble_surveys(&pool, n_surveys, 3).unwrap();
    let config = ServiceConfig::with_default_practice(&pool);
    Engine::new(pool, surveys, config).unwrap()
}

pub fn center_hit(ann: &Annotation) -> CircleSelection {
    let (cx, cy) = ann.gt_box.center();
    CircleSelection::new(cx, cy, 40.0).unwrap()
}

pub fn far_miss(ann: &Annotation) -> CircleSelection {
    let (cx, cy) = ann.gt_box.center();
    let x = if cx > 1920.0 { 60.0 } else { 3780.0 };
    let y = if cy > 1080.0 { 60.0 } else { 2100.0 };
    CircleSelection::new(x, y, 40.0).unwrap()
}

/// A sweep across the image ending on `sel`, answered after `rt_ms`.
pub fn answer(question_idx: usize, ann: &Annotation, sel: CircleSelection, rt_ms: u64, thorough: bool) -> AnswerInput {
    let mut events = Vec::new();
    if thorough {
        let (w, h) = (f64::from(ann.image_width_px), f64::from(ann.image_height_px));
        for row in 0..5 {
            for col in 0..10 {
                events.push(TrailEvent {
                    t_ms: (row * 10 + col) as u64 * rt_ms / 60,
                    x: w * (col as f64 + 0.5) / 10.0,
                    y: h * (row as f64 * 2.0 + 0.5) / 10.0,
                    zoom_level: 1,
                    lens_radius_px: 250.0,
                });
            }
        }
    }
    events.push(TrailEvent {
        t_ms: rt_ms * 50 / 60,
        x: sel.cx,
        y: sel.cy,
        zoom_level: 2,
        lens_radius_px: sel.radius,
    });
    AnswerInput {
        question_idx,
        events,
        final_selection: sel,
        response_time_ms: rt_ms,
    }
}
