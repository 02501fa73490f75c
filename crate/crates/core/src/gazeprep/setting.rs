use rayon::prelude::*;

use super::anatomy::mediastinum_to_heart;
use super::filter::{filter_fixations, select_interval};
use super::keywords::{find_keyword_sentences, KeywordTable};
use super::render::render_heatmap;
use crate::data_schema::{Anatomy, BinaryMask, GazeSample, Heatmap, Label, Setting};
use crate::error::Result;

/// One (sample, base setting) pair with its ground-truth heatmap.
#[derive(Clone, Debug)]
pub struct SettingEntry<'a> {
    pub sample: &'a GazeSample,
    /// Always a base setting (C, L or R), also for entries of the union.
    pub setting: Setting,
    pub label: Label,
    pub target: Anatomy,
    pub heatmap: Heatmap,
    /// Fixations that survived interval and mask filtering.
    pub retained: usize,
}

impl SettingEntry<'_> {
    pub fn entry_id(&self) -> String {
        entry_id(&self.sample.id, self.setting)
    }
}

pub fn entry_id(sample_id: &str, setting: Setting) -> String {
    format!("{sample_id}__{setting}")
}

/// Anatomic mask used to filter fixations for a base setting.
pub fn setting_mask(sample: &GazeSample, setting: Setting) -> Result<BinaryMask> {
    Ok(match setting {
        Setting::L => sample.masks.left_lung.clone(),
        Setting::R => sample.masks.right_lung.clone(),
        _ => match &sample.masks.heart {
            Some(h) => h.clone(),
            None => mediastinum_to_heart(&sample.masks.mediastinum)?,
        },
    })
}

fn entry_for<'a>(
    sample: &'a GazeSample,
    setting: Setting,
    keywords: &KeywordTable,
    radius: f64,
) -> Result<Option<SettingEntry<'a>>> {
    let label = sample.label(setting);
    if label == Label::Absent {
        return Ok(None);
    }
    let matches = find_keyword_sentences(&sample.transcript, keywords.for_setting(setting));
    let Some(interval) = select_interval(&sample.transcript, &matches)? else {
        return Ok(None);
    };
    let mask = setting_mask(sample, setting)?;
    let kept = filter_fixations(&sample.fixations, interval, &mask);
    let heatmap = render_heatmap(&kept, sample.image.width(), sample.image.height(), radius)?;
    Ok(Some(SettingEntry {
        sample,
        setting,
        label,
        target: setting.anatomy().expect("base setting"),
        heatmap,
        retained: kept.len(),
    }))
}

/// Ground-truth entries of a setting. Samples without a keyword match or
/// with an absent label are skipped; `M` yields the C, L and R entries in
/// that order.
pub fn build_setting<'a>(
    samples: &'a [GazeSample],
    setting: Setting,
    keywords: &KeywordTable,
    radius: f64,
) -> Result<Vec<SettingEntry<'a>>> {
    let settings: Vec<Setting> = match setting {
        Setting::M => Setting::BASE.to_vec(),
        s => vec![s],
    };
    let mut out = Vec::new();
    for s in settings {
        let entries: Vec<Option<SettingEntry<'a>>> = samples
            .par_iter()
            .map(|sample| entry_for(sample, s, keywords, radius))
            .collect::<Result<_>>()?;
        out.extend(entries.into_iter().flatten());
    }
    Ok(out)
}
