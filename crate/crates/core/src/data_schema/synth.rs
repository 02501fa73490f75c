//! Deterministic synthetic gaze studies.
//!
//! Geometry is expressed as fractions of the image side so one configuration
//! works at any resolution. Radiological convention: the patient's right
//! lung appears on the image's left.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::types::{
    AnatomicMaskSet, BinaryMask, CxrImage, Fixation, GazeSample, Label, Sentence, Setting, Transcript, PATCH_SIZE,
};
use crate::error::{Error, Result};
use crate::gazeprep::mediastinum_to_heart;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Square image side in pixels; multiple of 16.
    pub image_size: usize,
    /// Probability that a base setting is labeled positive.
    pub positive_rate: f64,
    /// Probability that a base setting is labeled negative; the remainder is absent.
    pub negative_rate: f64,
    /// Inclusive range of fixations laid down per dictated sentence.
    pub fixations_per_sentence: [usize; 2],
    /// Inclusive range of fixations before dictation starts.
    pub free_view_fixations: [usize; 2],
    /// Inclusive range of finding-free filler sentences.
    pub filler_sentences: [usize; 2],
    /// Fraction of fixations in a keyword sentence's window placed on the anatomy.
    pub on_target_fraction: f64,
    /// Std of the fixation cluster around a lesion, as a fraction of the image side.
    pub lesion_spread: f64,
    /// Peak brightness added by a lung opacity.
    pub lesion_amplitude: f64,
    /// Half-width of uniform pixel noise.
    pub noise: f64,
    /// Probability that an off-target fixation lands slightly outside the image.
    pub off_image_rate: f64,
    /// Sentences that mention no finding keyword.
    pub filler_vocabulary: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 448,
            positive_rate: 0.35,
            negative_rate: 0.35,
            fixations_per_sentence: [3, 6],
            free_view_fixations: [3, 6],
            filler_sentences: [1, 2],
            on_target_fraction: 0.85,
            lesion_spread: 0.03,
            lesion_amplitude: 0.35,
            noise: 0.03,
            off_image_rate: 0.05,
            filler_vocabulary: [
                "Lines and tubes are unremarkable.",
                "No pneumothorax is seen.",
                "The osseous structures are intact.",
                "Comparison is made with the prior study.",
                "Mediastinal contours are stable.",
                "The trachea is midline.",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 4 * PATCH_SIZE || !self.image_size.is_multiple_of(PATCH_SIZE) {
            return bad(format!(
                "synth image_size {} must be a multiple of {PATCH_SIZE} and at least {}",
                self.image_size,
                4 * PATCH_SIZE
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_rate)
            || !(0.0..=1.0).contains(&self.negative_rate)
            || self.positive_rate + self.negative_rate > 1.0
        {
            return bad("positive_rate + negative_rate must lie in [0, 1]".into());
        }
        for (name, [lo, hi]) in [
            ("fixations_per_sentence", self.fixations_per_sentence),
            ("free_view_fixations", self.free_view_fixations),
            ("filler_sentences", self.filler_sentences),
        ] {
            if lo > hi {
                return bad(format!("{name}: range [{lo}, {hi}] is empty"));
            }
        }
        if self.fixations_per_sentence[0] == 0 {
            return bad("fixations_per_sentence must be at least 1".into());
        }
        if !(0.7..=1.0).contains(&self.on_target_fraction) {
            return bad("on_target_fraction must lie in [0.7, 1]".into());
        }
        if self.filler_sentences[1] > 0 && self.filler_vocabulary.is_empty() {
            return bad("filler_vocabulary is empty".into());
        }
        if !(self.lesion_spread > 0.0) || self.noise < 0.0 || self.lesion_amplitude < 0.0 {
            return bad("lesion_spread must be positive; noise and amplitude non-negative".into());
        }
        Ok(())
    }
}

const POSITIVE_SENTENCES: [(Setting, &[&str]); 3] = [
    (
        Setting::C,
        &[
            "There is cardiomegaly.",
            "The cardiac silhouette is enlarged.",
            "Mild cardiomegaly is present.",
        ],
    ),
    (
        Setting::L,
        &[
            "There is an opacity in the left lung base.",
            "Consolidation is seen in the left lower lobe.",
            "A nodule projects over the left hemithorax.",
        ],
    ),
    (
        Setting::R,
        &[
            "There is an opacity in the right lung base.",
            "Consolidation is seen in the right lower lobe.",
            "A nodule projects over the right hemithorax.",
        ],
    ),
];

const NEGATIVE_SENTENCES: [(Setting, &[&str]); 3] = [
    (
        Setting::C,
        &["No cardiomegaly.", "Heart size is normal without cardiomegaly."],
    ),
    (
        Setting::L,
        &["The left lung is clear.", "No focal opacity in the left lung."],
    ),
    (
        Setting::R,
        &["The right lung is clear.", "No focal opacity in the right lung."],
    ),
];

fn sentence_bank(bank: &[(Setting, &'static [&'static str]); 3], s: Setting) -> &'static [&'static str] {
    bank.iter().find(|(k, _)| *k == s).map(|(_, v)| *v).unwrap_or(&[])
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    fn mask(&self, size: usize) -> BinaryMask {
        BinaryMask::from_fn(size, size, |x, y| self.contains(x as f64, y as f64))
    }
}

fn range_inclusive(rng: &mut ChaCha8Rng, [lo, hi]: [usize; 2]) -> usize {
    rng.random_range(lo..=hi)
}

/// Uniform point on the mask, by rejection within its bounding box.
fn point_in_mask(rng: &mut ChaCha8Rng, mask: &BinaryMask) -> (f64, f64) {
    let (h, w) = mask.dim();
    loop {
        let x = rng.random_range(0.0..w as f64 - 1.0);
        let y = rng.random_range(0.0..h as f64 - 1.0);
        if mask.contains(x.round() as i64, y.round() as i64) {
            return (x, y);
        }
    }
}

/// Point near `center` that still lies on the mask.
fn point_near(rng: &mut ChaCha8Rng, mask: &BinaryMask, center: (f64, f64), spread: f64) -> (f64, f64) {
    let normal = Normal::new(0.0, spread).expect("positive spread");
    for _ in 0..64 {
        let x = center.0 + normal.sample(rng);
        let y = center.1 + normal.sample(rng);
        if mask.contains(x.round() as i64, y.round() as i64) {
            return (x, y);
        }
    }
    point_in_mask(rng, mask)
}

fn point_anywhere(rng: &mut ChaCha8Rng, size: f64, off_image_rate: f64) -> (f64, f64) {
    if rng.random_bool(off_image_rate) {
        // device noise just past an edge
        let along = rng.random_range(0.0..size);
        let past = -rng.random_range(1.0..size * 0.05 + 2.0);
        return match rng.random_range(0..4) {
            0 => (past, along),
            1 => (size - 1.0 - past, along),
            2 => (along, past),
            _ => (along, size - 1.0 - past),
        };
    }
    let margin = size * 0.1;
    (
        rng.random_range(margin..size - margin),
        rng.random_range(margin..size - margin),
    )
}

/// Where a positive finding sits, used both for the image cue and gaze.
fn lesion_center(rng: &mut ChaCha8Rng, mask: &BinaryMask) -> (f64, f64) {
    point_in_mask(rng, mask)
}

/// Lays `points.len()` fixations into `[start, end)`, one per equal slot.
/// On-target fixations fill most of their slot, the rest a smaller share.
fn lay_fixations(rng: &mut ChaCha8Rng, start: f64, end: f64, points: &[((f64, f64), bool)], out: &mut Vec<Fixation>) {
    if points.is_empty() || end <= start {
        return;
    }
    let slot = (end - start) / points.len() as f64;
    for (i, &((x, y), on_target)) in points.iter().enumerate() {
        let slot_start = start + i as f64 * slot;
        let lead = slot * rng.random_range(0.02..0.05);
        let fill = if on_target {
            rng.random_range(0.85..0.93)
        } else {
            rng.random_range(0.3..0.45)
        };
        let t_start = slot_start + lead;
        out.push(Fixation {
            x,
            y,
            t_start,
            t_end: t_start + slot * fill,
        });
    }
}

/// Generates one study. Pure in `(seed, config)`.
pub fn synth_sample(seed: u64, config: &SynthConfig) -> GazeSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let s = size as f64;

    let mut labels = BTreeMap::new();
    for setting in Setting::BASE {
        let u: f64 = rng.random();
        let label = if u < config.positive_rate {
            Label::Positive
        } else if u < config.positive_rate + config.negative_rate {
            Label::Negative
        } else {
            Label::Absent
        };
        labels.insert(setting, label);
    }

    let mut jitter = |scale: f64| rng.random_range(-scale..scale) * s;
    let right_lung = Ellipse {
        cx: 0.29 * s + jitter(0.015),
        cy: 0.48 * s + jitter(0.02),
        rx: 0.11 * s + jitter(0.01),
        ry: 0.27 * s + jitter(0.02),
    };
    let left_lung = Ellipse {
        cx: 0.71 * s + jitter(0.015),
        cy: 0.48 * s + jitter(0.02),
        rx: 0.11 * s + jitter(0.01),
        ry: 0.27 * s + jitter(0.02),
    };
    let enlarged = labels[&Setting::C] == Label::Positive;
    let mediastinum = Ellipse {
        cx: 0.5 * s + jitter(0.01),
        cy: 0.55 * s + jitter(0.015),
        rx: if enlarged { 0.1 } else { 0.065 } * s + jitter(0.005),
        ry: 0.3 * s + jitter(0.01),
    };
    let body = Ellipse {
        cx: 0.5 * s,
        cy: 0.52 * s,
        rx: 0.46 * s,
        ry: 0.47 * s,
    };

    let masks = AnatomicMaskSet {
        left_lung: left_lung.mask(size),
        right_lung: right_lung.mask(size),
        mediastinum: mediastinum.mask(size),
        heart: None,
    };
    let heart = mediastinum_to_heart(&masks.mediastinum).expect("synthetic mediastinum is non-empty");

    let target_mask = |setting: Setting| match setting {
        Setting::C => &heart,
        Setting::L => &masks.left_lung,
        _ => &masks.right_lung,
    };
    let mut lesions: BTreeMap<Setting, (f64, f64)> = BTreeMap::new();
    for setting in Setting::BASE {
        if labels[&setting] == Label::Positive {
            let c = lesion_center(&mut rng, target_mask(setting));
            lesions.insert(setting, c);
        }
    }

    // image
    let lesion_sigma = 0.04 * s;
    let mut pixels = Array2::from_shape_fn((size, size), |(y, x)| {
        let (xf, yf) = (x as f64, y as f64);
        let mut v = 0.08;
        if body.contains(xf, yf) {
            v = 0.4;
        }
        if left_lung.contains(xf, yf) || right_lung.contains(xf, yf) {
            v = 0.18;
        }
        if mediastinum.contains(xf, yf) {
            v = 0.72;
        }
        for (setting, &(lx, ly)) in &lesions {
            if *setting != Setting::C {
                let d2 = (xf - lx).powi(2) + (yf - ly).powi(2);
                v += config.lesion_amplitude * (-d2 / (2.0 * lesion_sigma * lesion_sigma)).exp();
            }
        }
        v
    });
    for v in pixels.iter_mut() {
        let n = if config.noise > 0.0 {
            rng.random_range(-config.noise..=config.noise)
        } else {
            0.0
        };
        // quantized so a 16-bit PNG round trip is exact
        *v = ((*v + n).clamp(0.0, 1.0) * 65535.0).round() / 65535.0;
    }
    let image = CxrImage::new(pixels).expect("synthetic image is valid");

    // transcript
    let mut planned: Vec<(String, Option<Setting>)> = Vec::new();
    for setting in Setting::BASE {
        let bank = match labels[&setting] {
            Label::Positive => sentence_bank(&POSITIVE_SENTENCES, setting),
            Label::Negative => sentence_bank(&NEGATIVE_SENTENCES, setting),
            Label::Absent => continue,
        };
        let text = bank.choose(&mut rng).expect("non-empty bank");
        planned.push((text.to_string(), Some(setting)));
    }
    let n_filler = range_inclusive(&mut rng, config.filler_sentences);
    for _ in 0..n_filler {
        let text = config.filler_vocabulary.choose(&mut rng).expect("validated non-empty");
        planned.push((text.clone(), None));
    }
    planned.shuffle(&mut rng);

    let mut sentences = Vec::with_capacity(planned.len());
    let mut fixations = Vec::new();
    let mut t = rng.random_range(1.0..2.5);

    let free: Vec<_> = (0..range_inclusive(&mut rng, config.free_view_fixations))
        .map(|_| (point_anywhere(&mut rng, s, config.off_image_rate), false))
        .collect();
    lay_fixations(&mut rng, 0.0, t, &free, &mut fixations);

    for (i, (text, setting)) in planned.into_iter().enumerate() {
        if i > 0 {
            t += rng.random_range(0.2..0.8);
        }
        let t_start = t;
        let t_end = t_start + rng.random_range(1.5..3.5);
        // gaze window: from the end of the previous sentence to the end of this one
        let window_start = sentences.last().map_or(t_start, |p: &Sentence| p.t_end);
        let k = range_inclusive(&mut rng, config.fixations_per_sentence);
        let mut points = Vec::with_capacity(k);
        match setting {
            Some(setting) => {
                let n_on = ((k as f64) * config.on_target_fraction).ceil() as usize;
                let mask = target_mask(setting);
                for j in 0..k {
                    if j < n_on {
                        let p = match lesions.get(&setting) {
                            Some(&c) => point_near(&mut rng, mask, c, config.lesion_spread * s),
                            None => point_in_mask(&mut rng, mask),
                        };
                        points.push((p, true));
                    } else {
                        points.push((point_anywhere(&mut rng, s, config.off_image_rate), false));
                    }
                }
                points.shuffle(&mut rng);
            }
            None => {
                for _ in 0..k {
                    points.push((point_anywhere(&mut rng, s, config.off_image_rate), false));
                }
            }
        }
        lay_fixations(&mut rng, window_start, t_end, &points, &mut fixations);
        sentences.push(Sentence { text, t_start, t_end });
        t = t_end;
    }

    GazeSample {
        id: format!("synth-{seed:016x}"),
        image,
        fixations,
        transcript: Transcript { sentences },
        masks,
        labels,
    }
}

/// Per-sample seeds derived from one corpus seed (SplitMix64 sequence).
pub fn corpus_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        })
        .collect()
}

pub fn synth_corpus(seed: u64, n: usize, config: &SynthConfig) -> Vec<GazeSample> {
    corpus_seeds(seed, n)
        .into_iter()
        .map(|s| synth_sample(s, config))
        .collect()
}
