//! On-disk formats for gaze studies and derived heatmaps.
//!
//! A dataset is a directory holding one sub-directory per sample id:
//!
//! ```text
//! <id>/image.png          8- or 16-bit grayscale
//! <id>/fixations.csv      header x,y,t_start,t_end (extra columns ignored)
//! <id>/transcript.json    {"sentences": [{"text", "t_start", "t_end"}, ...]}
//! <id>/masks/<name>.png   1-bit (or 8-bit, nonzero = set) grayscale
//! <id>/labels.json        {"C": "positive", "L": "absent", ...}
//! ```
//!
//! Heatmaps are raw little-endian `f32`, row-major, with a JSON sidecar
//! carrying `{width, height}`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::types::{
    AnatomicMaskSet, BinaryMask, CxrImage, Fixation, GazeSample, Heatmap, HeatmapRole, Label, Setting, Transcript,
};
use crate::error::{Error, Result};

pub fn load_image(path: impl AsRef<Path>) -> Result<CxrImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let pixels = match img {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                f64::from(buf.get_pixel(x as u32, y as u32).0[0]) / 255.0
            })
        }
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                f64::from(buf.get_pixel(x as u32, y as u32).0[0]) / 65535.0
            })
        }
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!("expected 8- or 16-bit grayscale, found {:?}", other.color()),
            })
        }
    };
    CxrImage::new(pixels).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes a 16-bit grayscale PNG. Values that are multiples of `1/65535`
/// survive a save/load cycle bit-exactly.
pub fn save_image(image: &CxrImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = image.pixels().dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(image.pixels()[[y as usize, x as usize]] * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn parse_err(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

/// Reads a comma-delimited fixation table. Rows are numbered from 1,
/// excluding the header.
pub fn load_fixations(path: impl AsRef<Path>) -> Result<Vec<Fixation>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers = reader.headers().map_err(|e| parse_err(path, 0, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| parse_err(path, 0, format!("missing column {name:?}")))
    };
    let cols = [column("x")?, column("y")?, column("t_start")?, column("t_end")?];

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| parse_err(path, row, e.to_string()))?;
        let mut vals = [0.0; 4];
        for (v, &c) in vals.iter_mut().zip(&cols) {
            let field = record.get(c).ok_or_else(|| parse_err(path, row, "too few fields"))?;
            *v = field
                .parse::<f64>()
                .map_err(|e| parse_err(path, row, format!("{field:?}: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, row, "non-finite value"));
            }
        }
        let [x, y, t_start, t_end] = vals;
        if t_start >= t_end {
            return Err(parse_err(
                path,
                row,
                format!("t_start {t_start} must be before t_end {t_end}"),
            ));
        }
        out.push(Fixation { x, y, t_start, t_end });
    }
    Ok(out)
}

pub fn save_fixations(fixations: &[Fixation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("x,y,t_start,t_end\n");
    for f in fixations {
        text.push_str(&format!("{},{},{},{}\n", f.x, f.y, f.t_start, f.t_end));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a transcript record, returning sentences sorted by start time.
pub fn load_transcript(path: impl AsRef<Path>) -> Result<Transcript> {
    let path = path.as_ref();
    let mut transcript: Transcript = read_json(path)?;
    for (i, s) in transcript.sentences.iter().enumerate() {
        if !(s.t_start.is_finite() && s.t_end.is_finite()) || s.t_start > s.t_end {
            return Err(parse_err(
                path,
                i + 1,
                format!("sentence interval [{}, {}] is invalid", s.t_start, s.t_end),
            ));
        }
    }
    transcript.sentences.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
    let overlaps = transcript.overlapping_pairs();
    if !overlaps.is_empty() {
        let pairs: Vec<String> = overlaps
            .iter()
            .map(|&(a, b)| {
                let (sa, sb) = (&transcript.sentences[a], &transcript.sentences[b]);
                format!("[{}, {}] overlaps [{}, {}]", sa.t_start, sa.t_end, sb.t_start, sb.t_end)
            })
            .collect();
        return Err(Error::Invalid(format!(
            "{}: overlapping sentences: {}",
            path.display(),
            pairs.join("; ")
        )));
    }
    Ok(transcript)
}

pub fn save_transcript(transcript: &Transcript, path: impl AsRef<Path>) -> Result<()> {
    write_json(transcript, path)
}

/// Reads a grayscale PNG mask; any nonzero sample is set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let image_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| image_err(e.to_string()))?;
    let (width, height, depth, color) = {
        let info = reader.info();
        (
            info.width as usize,
            info.height as usize,
            info.bit_depth as usize,
            info.color_type,
        )
    };
    if color != png::ColorType::Grayscale {
        return Err(image_err(format!("mask must be grayscale, found {color:?}")));
    }
    let mut buf = vec![
        0u8;
        reader
            .output_buffer_size()
            .ok_or_else(|| image_err("image too large".into()))?
    ];
    let frame = reader.next_frame(&mut buf).map_err(|e| image_err(e.to_string()))?;
    let stride = frame.line_size;
    let values = Array2::from_shape_fn((height, width), |(y, x)| {
        let row = &buf[y * stride..(y + 1) * stride];
        let set = match depth {
            1 | 2 | 4 => {
                let bit = x * depth;
                let byte = row[bit / 8];
                let shift = 8 - depth - (bit % 8);
                (byte >> shift) & ((1u8 << depth) - 1) != 0
            }
            8 => row[x] != 0,
            _ => row[2 * x] != 0 || row[2 * x + 1] != 0,
        };
        set as u8
    });
    BinaryMask::new(values)
}

/// Writes a 1-bit grayscale PNG.
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = mask.dim();
    let stride = w.div_ceil(8);
    let mut data = vec![0u8; stride * h];
    for ((y, x), &v) in mask.values().indexed_iter() {
        if v == 1 {
            data[y * stride + x / 8] |= 0x80 >> (x % 8);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::One);
    let to_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer.write_image_data(&data).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub width: usize,
    pub height: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `path` (raw LE f32) and its `.json` sidecar.
pub fn save_heatmap(heatmap: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(heatmap.values().len() * 4);
    for &v in heatmap.values().iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    write_json(
        &HeatmapMeta {
            width: heatmap.width(),
            height: heatmap.height(),
        },
        sidecar_path(path),
    )
}

pub fn load_heatmap(path: impl AsRef<Path>, role: HeatmapRole) -> Result<Heatmap> {
    let path = path.as_ref();
    let meta: HeatmapMeta = read_json(sidecar_path(path))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != meta.width * meta.height * 4 {
        return Err(Error::Shape(format!(
            "{}: {} bytes, expected {} for {}x{} f32",
            path.display(),
            bytes.len(),
            meta.width * meta.height * 4,
            meta.width,
            meta.height
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let values = Array2::from_shape_vec((meta.height, meta.width), values).map_err(|e| Error::Shape(e.to_string()))?;
    Heatmap::new(values, role)
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::json(path, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

const MASK_NAMES: [&str; 3] = ["left_lung", "right_lung", "mediastinum"];

/// Loads one sample directory; the id is the directory name.
pub fn load_sample(dir: impl AsRef<Path>) -> Result<GazeSample> {
    let dir = dir.as_ref();
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Invalid(format!("{}: no usable sample id", dir.display())))?
        .to_string();
    let image = load_image(dir.join("image.png"))?;
    let fixations = load_fixations(dir.join("fixations.csv"))?;
    let transcript = load_transcript(dir.join("transcript.json"))?;
    let masks_dir = dir.join("masks");
    let [left_lung, right_lung, mediastinum] = MASK_NAMES.map(|n| load_mask(masks_dir.join(format!("{n}.png"))));
    let heart_path = masks_dir.join("heart.png");
    let heart = if heart_path.exists() {
        Some(load_mask(heart_path)?)
    } else {
        None
    };
    let labels: BTreeMap<Setting, Label> = read_json(dir.join("labels.json"))?;
    if labels.contains_key(&Setting::M) {
        return Err(Error::Invalid(format!(
            "{}: labels may only name C, L and R",
            dir.display()
        )));
    }
    Ok(GazeSample {
        id,
        image,
        fixations,
        transcript,
        masks: AnatomicMaskSet {
            left_lung: left_lung?,
            right_lung: right_lung?,
            mediastinum: mediastinum?,
            heart,
        },
        labels,
    })
}

/// Writes `sample` into `root/<id>/`.
pub fn save_sample(sample: &GazeSample, root: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = root.as_ref().join(&sample.id);
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    save_image(&sample.image, dir.join("image.png"))?;
    save_fixations(&sample.fixations, dir.join("fixations.csv"))?;
    save_transcript(&sample.transcript, dir.join("transcript.json"))?;
    for (name, mask) in sample.masks.named() {
        save_mask(mask, masks_dir.join(format!("{name}.png")))?;
    }
    write_json(&sample.labels, dir.join("labels.json"))?;
    Ok(dir)
}

/// Loads every sample sub-directory of `root`, sorted by id.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<GazeSample>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join("image.png").exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    dirs.iter().map(load_sample).collect()
}
