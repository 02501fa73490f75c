use serde::Serialize;

use super::types::{GazeSample, Setting};

/// One broken invariant, naming the offending part of the sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Every invariant violation in `sample`; empty means valid.
pub fn validate_sample(sample: &GazeSample) -> Vec<Violation> {
    let mut out = Vec::new();
    if sample.id.trim().is_empty() {
        out.push(Violation::new("id", "sample id is empty"));
    }

    let (w, h) = (sample.image.width(), sample.image.height());
    if let Some(v) = sample.image.pixels().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        out.push(Violation::new("image", format!("intensity {v} outside [0, 1]")));
    }

    for (name, mask) in sample.masks.named() {
        if mask.width() != w || mask.height() != h {
            out.push(Violation::new(
                format!("masks.{name}"),
                format!("mask is {}x{} but image is {w}x{h}", mask.width(), mask.height()),
            ));
        }
    }
    if sample.masks.mediastinum.is_empty() && sample.masks.heart.is_none() {
        out.push(Violation::new(
            "masks.mediastinum",
            "empty mediastinum and no heart mask; heart cannot be derived",
        ));
    }

    for (i, f) in sample.fixations.iter().enumerate() {
        if ![f.x, f.y, f.t_start, f.t_end].iter().all(|v| v.is_finite()) {
            out.push(Violation::new(format!("fixations[{i}]"), "non-finite value"));
        } else if f.t_start >= f.t_end {
            out.push(Violation::new(
                format!("fixations[{i}]"),
                format!("t_start {} is not before t_end {}", f.t_start, f.t_end),
            ));
        }
    }

    for (i, s) in sample.transcript.sentences.iter().enumerate() {
        if s.t_start > s.t_end {
            out.push(Violation::new(
                format!("transcript.sentences[{i}]"),
                format!("interval [{}, {}] is reversed", s.t_start, s.t_end),
            ));
        }
    }
    for (a, b) in sample.transcript.overlapping_pairs() {
        out.push(Violation::new(
            "transcript",
            format!("sentences {a} and {b} overlap or are out of order"),
        ));
    }

    if sample.labels.contains_key(&Setting::M) {
        out.push(Violation::new(
            "labels",
            "setting M is the union of C, L and R and cannot be labeled directly",
        ));
    }
    out
}
