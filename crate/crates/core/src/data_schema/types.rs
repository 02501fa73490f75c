use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the square patches both encoders tokenize images into.
pub const PATCH_SIZE: usize = 16;

/// Grayscale radiograph with intensities in `[0, 1]`.
///
/// Stored row-major as `(height, width)`; pixel `(x, y)` lives at `pixels[[y, x]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CxrImage {
    pixels: Array2<f64>,
}

impl CxrImage {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 || h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 {
            return Err(Error::Shape(format!(
                "image is {w}x{h}; width and height must be positive multiples of the patch size {PATCH_SIZE}"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("image intensity {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::new(Array2::zeros((height, width)))
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }
}

/// One gaze fixation in image pixel coordinates (origin top-left, y down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    pub t_start: f64,
    pub t_end: f64,
}

impl Fixation {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub t_start: f64,
    pub t_end: f64,
}

/// Dictated report, one timestamped record per sentence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub sentences: Vec<Sentence>,
}

impl Transcript {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Index pairs `(i, i + 1)` of adjacent sentences whose intervals overlap
    /// or are out of order.
    pub fn overlapping_pairs(&self) -> Vec<(usize, usize)> {
        self.sentences
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1].t_start < w[0].t_end || w[1].t_start < w[0].t_start)
            .map(|(i, _)| (i, i + 1))
            .collect()
    }
}

/// `{0, 1}` field on the image grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    values: Array2<u8>,
}

impl BinaryMask {
    pub fn new(values: Array2<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Invalid("mask values must be 0 or 1".into()));
        }
        Ok(Self { values })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self {
            values: Array2::from_shape_fn((height, width), |(y, x)| f(x, y) as u8),
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            values: Array2::ones((height, width)),
        }
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    /// Whether integer pixel `(x, y)` is set; out-of-grid pixels are not.
    pub fn contains(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 {
            return false;
        }
        self.values.get((y as usize, x as usize)).is_some_and(|&v| v == 1)
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    pub fn as_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapRole {
    GroundTruth,
    Predicted,
}

/// Dense intensity field in `[0, 1]`, same grid as its image.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    values: Array2<f64>,
    role: HeatmapRole,
}

impl Heatmap {
    pub fn new(values: Array2<f64>, role: HeatmapRole) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self { values, role })
    }

    pub fn zeros(width: usize, height: usize, role: HeatmapRole) -> Self {
        Self {
            values: Array2::zeros((height, width)),
            role,
        }
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn role(&self) -> HeatmapRole {
        self.role
    }
}

/// Anatomy whose heatmap a prompt asks for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anatomy {
    LeftLung,
    RightLung,
    Heart,
}

impl Anatomy {
    pub fn as_str(self) -> &'static str {
        match self {
            Anatomy::LeftLung => "left_lung",
            Anatomy::RightLung => "right_lung",
            Anatomy::Heart => "heart",
        }
    }
}

impl FromStr for Anatomy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left_lung" => Ok(Anatomy::LeftLung),
            "right_lung" => Ok(Anatomy::RightLung),
            "heart" => Ok(Anatomy::Heart),
            other => Err(Error::Invalid(format!(
                "unknown prompt target {other:?}; expected left_lung, right_lung or heart"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnatomicMaskSet {
    pub left_lung: BinaryMask,
    pub right_lung: BinaryMask,
    pub mediastinum: BinaryMask,
    pub heart: Option<BinaryMask>,
}

impl AnatomicMaskSet {
    /// Masks keyed by file stem, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &BinaryMask)> {
        let mut out = vec![
            ("left_lung", &self.left_lung),
            ("right_lung", &self.right_lung),
            ("mediastinum", &self.mediastinum),
        ];
        if let Some(h) = &self.heart {
            out.push(("heart", h));
        }
        out
    }
}

/// Finding question / data subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    C,
    L,
    R,
    M,
}

impl Setting {
    /// The three settings that are labeled directly; `M` is their union.
    pub const BASE: [Setting; 3] = [Setting::C, Setting::L, Setting::R];
    pub const ALL: [Setting; 4] = [Setting::C, Setting::L, Setting::R, Setting::M];

    /// Anatomy a base setting is about. `None` for the union setting.
    pub fn anatomy(self) -> Option<Anatomy> {
        match self {
            Setting::C => Some(Anatomy::Heart),
            Setting::L => Some(Anatomy::LeftLung),
            Setting::R => Some(Anatomy::RightLung),
            Setting::M => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::C => "C",
            Setting::L => "L",
            Setting::R => "R",
            Setting::M => "M",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "C" => Ok(Setting::C),
            "L" => Ok(Setting::L),
            "R" => Ok(Setting::R),
            "M" => Ok(Setting::M),
            other => Err(Error::Invalid(format!(
                "unknown setting {other:?}; expected C, L, R or M"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    Absent,
}

impl Label {
    /// Class index for the two-way classifier; `None` when absent.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::Negative => Some(0),
            Label::Positive => Some(1),
            Label::Absent => None,
        }
    }
}

/// One study: radiograph, gaze recording, dictation, anatomy and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeSample {
    pub id: String,
    pub image: CxrImage,
    pub fixations: Vec<Fixation>,
    pub transcript: Transcript,
    pub masks: AnatomicMaskSet,
    /// Labels for the base settings; a missing entry means absent.
    pub labels: BTreeMap<Setting, Label>,
}

impl GazeSample {
    pub fn label(&self, setting: Setting) -> Label {
        self.labels.get(&setting).copied().unwrap_or(Label::Absent)
    }
}
