use std::str::FromStr;

use crate::data_schema::{Anatomy, BinaryMask};
use crate::error::{Error, Result};

pub const PROMPT_PREFIX: &str = "diagnosis of";

/// Heart mask from a mediastinum mask: the top third (rounded up) of the
/// mask's own vertical extent is removed.
pub fn mediastinum_to_heart(mediastinum: &BinaryMask) -> Result<BinaryMask> {
    let rows: Vec<usize> = mediastinum
        .values()
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|&v| v == 1))
        .map(|(i, _)| i)
        .collect();
    let (Some(&top), Some(&bottom)) = (rows.first(), rows.last()) else {
        return Err(Error::Invalid("mediastinum mask is empty".into()));
    };
    let extent = bottom - top + 1;
    let cut_end = top + extent.div_ceil(3);
    let mut values = mediastinum.values().clone();
    values
        .rows_mut()
        .into_iter()
        .take(cut_end)
        .skip(top)
        .for_each(|mut r| r.fill(0));
    BinaryMask::new(values)
}

/// Prompt wording for an anatomy, with the heart phrase configurable
/// (`"heart"` by default, `"the heart"` in some figures).
pub fn prompt_for(anatomy: Anatomy, heart_phrase: &str) -> String {
    let target = match anatomy {
        Anatomy::LeftLung => "left lung",
        Anatomy::RightLung => "right lung",
        Anatomy::Heart => heart_phrase,
    };
    format!("{PROMPT_PREFIX} {target}")
}

/// Prompt for a target named `left_lung`, `right_lung` or `heart`.
pub fn make_prompt(target: &str) -> Result<String> {
    Ok(prompt_for(Anatomy::from_str(target)?, "heart"))
}
