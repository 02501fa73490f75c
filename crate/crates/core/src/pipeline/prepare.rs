use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::data_schema::{
    load_dataset, load_heatmap, load_image, read_json, save_heatmap, save_image, synth_corpus, write_json, Anatomy,
    CxrImage, GazeSample, Heatmap, HeatmapRole, Setting,
};
use crate::error::{Error, Result};
use crate::gazeprep::{build_setting, prompt_for, split_by_setting, KeywordTable, SplitName};

/// One training/evaluation unit: a (study, base setting) pair at training
/// resolution with its prompt, label and split.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedEntry {
    pub id: String,
    pub sample_id: String,
    pub setting: Setting,
    pub target: Anatomy,
    pub prompt: String,
    /// Class index: 0 negative, 1 positive.
    pub label: usize,
    /// `None` when dropped by class balancing.
    pub split: Option<SplitName>,
    pub retained_fixations: usize,
    pub image: CxrImage,
    pub heatmap: Heatmap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub sample_id: String,
    pub setting: Setting,
    pub target: Anatomy,
    pub prompt: String,
    pub label: usize,
    pub split: Option<SplitName>,
    pub retained_fixations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub setting: Setting,
    pub train_size: usize,
    pub radius: f64,
    /// Entry counts per split and class: `split -> [negative, positive]`.
    pub counts: BTreeMap<SplitName, [usize; 2]>,
    pub entries: Vec<ManifestEntry>,
}

/// Samples from the configured directory, or the seeded synthetic corpus.
pub fn load_samples(config: &PipelineConfig) -> Result<Vec<GazeSample>> {
    match &config.data.dir {
        Some(dir) => load_dataset(dir),
        None => Ok(synth_corpus(config.seed, config.data.synth_count, &config.synth)),
    }
}

pub fn keyword_table(config: &PipelineConfig) -> Result<KeywordTable> {
    match &config.data.keywords {
        Some(path) => KeywordTable::load(path),
        None => Ok(KeywordTable::default()),
    }
}

/// Area-average downsampling of a square-multiple field to `size x size`.
pub fn downsample(values: &Array2<f64>, size: usize) -> Result<Array2<f64>> {
    let (h, w) = values.dim();
    if size == 0 || h % size != 0 || w % size != 0 || h / size != w / size {
        return Err(Error::Shape(format!(
            "cannot downsample {w}x{h} to {size}x{size} by an integer factor"
        )));
    }
    let k = h / size;
    if k == 1 {
        return Ok(values.clone());
    }
    let area = (k * k) as f64;
    Ok(Array2::from_shape_fn((size, size), |(y, x)| {
        let mut s = 0.0;
        for dy in 0..k {
            for dx in 0..k {
                s += values[[y * k + dy, x * k + dx]];
            }
        }
        s / area
    }))
}

/// Rounds to the 16-bit grid images are stored on, so in-memory and on-disk
/// datasets agree exactly.
fn quantize_u16(values: Array2<f64>) -> Array2<f64> {
    values.mapv(|v| (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0)
}

fn quantize_f32(values: Array2<f64>) -> Array2<f64> {
    values.mapv(|v| f64::from(v as f32))
}

/// Ground truth for the configured setting, downsampled and split.
/// With `split = false` every entry is assigned to the training split (for
/// small capability checks that cannot fill three balanced splits).
pub fn prepare_entries(samples: &[GazeSample], config: &PipelineConfig, split: bool) -> Result<Vec<PreparedEntry>> {
    let keywords = keyword_table(config)?;
    let built = build_setting(samples, config.setting, &keywords, config.data.radius)?;
    let labels: Vec<usize> = built
        .iter()
        .map(|e| e.label.class_index().expect("labeled entries only"))
        .collect();
    let membership = if split {
        let settings: Vec<Setting> = built.iter().map(|e| e.setting).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        split_by_setting(&settings, &positive, &config.split)?.membership(built.len())
    } else {
        vec![Some(SplitName::Train); built.len()]
    };
    let size = config.data.train_size;
    built
        .iter()
        .zip(labels)
        .zip(membership)
        .map(|((e, label), split)| {
            let image = quantize_u16(downsample(e.sample.image.pixels(), size)?);
            let heat = quantize_f32(downsample(e.heatmap.values(), size)?);
            Ok(PreparedEntry {
                id: e.entry_id(),
                sample_id: e.sample.id.clone(),
                setting: e.setting,
                target: e.target,
                prompt: prompt_for(e.target, &config.data.heart_phrase),
                label,
                split,
                retained_fixations: e.retained,
                image: CxrImage::new(image)?,
                heatmap: Heatmap::new(heat, HeatmapRole::GroundTruth)?,
            })
        })
        .collect()
}

/// Entries of one split, in manifest order.
pub fn split_entries(entries: &[PreparedEntry], name: SplitName) -> Vec<&PreparedEntry> {
    entries.iter().filter(|e| e.split == Some(name)).collect()
}

pub fn manifest_for(entries: &[PreparedEntry], config: &PipelineConfig) -> DatasetManifest {
    let mut counts: BTreeMap<SplitName, [usize; 2]> = BTreeMap::new();
    for e in entries {
        if let Some(s) = e.split {
            counts.entry(s).or_default()[e.label] += 1;
        }
    }
    DatasetManifest {
        config_hash: config.hash(),
        setting: config.setting,
        train_size: config.data.train_size,
        radius: config.data.radius,
        counts,
        entries: entries
            .iter()
            .map(|e| ManifestEntry {
                id: e.id.clone(),
                sample_id: e.sample_id.clone(),
                setting: e.setting,
                target: e.target,
                prompt: e.prompt.clone(),
                label: e.label,
                split: e.split,
                retained_fixations: e.retained_fixations,
            })
            .collect(),
    }
}

/// Writes `manifest.json` plus `entries/<id>/{image.png, heatmap.f32}`.
pub fn write_prepared(dir: &Path, entries: &[PreparedEntry], config: &PipelineConfig) -> Result<DatasetManifest> {
    for e in entries {
        let d = dir.join("entries").join(&e.id);
        std::fs::create_dir_all(&d).map_err(|err| Error::io(&d, err))?;
        save_image(&e.image, d.join("image.png"))?;
        save_heatmap(&e.heatmap, d.join("heatmap.f32"))?;
    }
    let manifest = manifest_for(entries, config);
    write_json(&manifest, dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn read_prepared(dir: &Path) -> Result<(DatasetManifest, Vec<PreparedEntry>)> {
    let manifest: DatasetManifest = read_json(dir.join("manifest.json"))?;
    let entries = manifest
        .entries
        .iter()
        .map(|m| {
            let d = dir.join("entries").join(&m.id);
            Ok(PreparedEntry {
                id: m.id.clone(),
                sample_id: m.sample_id.clone(),
                setting: m.setting,
                target: m.target,
                prompt: m.prompt.clone(),
                label: m.label,
                split: m.split,
                retained_fixations: m.retained_fixations,
                image: load_image(d.join("image.png"))?,
                heatmap: load_heatmap(d.join("heatmap.f32"), HeatmapRole::GroundTruth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.synth.image_size = 128;
        c.data.train_size = 64;
        c.data.radius = 20.0;
        c.data.synth_count = 40;
        c.setting = Setting::C;
        c
    }

    #[test]
    fn downsample_averages_blocks() {
        let v = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64);
        let d = downsample(&v, 2).unwrap();
        assert_eq!(d, ndarray::arr2(&[[2.5, 4.5], [10.5, 12.5]]));
        assert!(downsample(&v, 3).is_err());
        assert_eq!(downsample(&v, 4).unwrap(), v);
    }

    #[test]
    fn prepared_round_trip() {
        let config = small_config();
        let samples = load_samples(&config).unwrap();
        let entries = prepare_entries(&samples, &config, true).unwrap();
        assert!(!entries.is_empty());
        assert!(entries.iter().all(|e| e.image.width() == 64 && e.heatmap.width() == 64));
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_prepared(dir.path(), &entries, &config).unwrap();
        let (back_manifest, back) = read_prepared(dir.path()).unwrap();
        assert_eq!(back_manifest, manifest);
        assert_eq!(back, entries);
        for [neg, pos] in manifest.counts.values() {
            assert!(neg.abs_diff(*pos) <= 1);
        }
    }
}
