use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data_schema::{read_json, Setting, Transcript};
use crate::error::{Error, Result};

/// Conjunction of lowercase terms that must all occur in one sentence.
pub type KeywordGroup = Vec<String>;

/// Per-setting keyword search rules: a sentence matches a setting when any
/// of its groups matches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeywordTable {
    pub groups: BTreeMap<Setting, Vec<KeywordGroup>>,
}

impl Default for KeywordTable {
    fn default() -> Self {
        let g = |terms: &[&str]| terms.iter().map(|t| t.to_string()).collect::<Vec<_>>();
        let side = |side: &str| {
            ["lung", "base", "lobe", "hemithorax"]
                .iter()
                .map(|region| g(&[side, region]))
                .collect::<Vec<_>>()
        };
        let mut groups = BTreeMap::new();
        groups.insert(Setting::C, vec![g(&["cardiomegaly"]), g(&["enlarged", "cardiac"])]);
        groups.insert(Setting::L, side("left"));
        groups.insert(Setting::R, side("right"));
        Self { groups }
    }
}

impl KeywordTable {
    pub fn validate(&self) -> Result<()> {
        for setting in Setting::BASE {
            let groups = self.groups.get(&setting).map(Vec::as_slice).unwrap_or(&[]);
            if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
                return Err(Error::Config(format!(
                    "keyword table needs non-empty groups for setting {setting}"
                )));
            }
            for term in groups.iter().flatten() {
                if term.trim().is_empty() || *term != term.to_lowercase() {
                    return Err(Error::Config(format!(
                        "keyword {term:?} must be non-empty and lowercase"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let table: Self = read_json(path)?;
        table.validate()?;
        Ok(table)
    }

    pub fn for_setting(&self, setting: Setting) -> &[KeywordGroup] {
        self.groups.get(&setting).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn term_regex(term: &str) -> Regex {
    Regex::new(&format!(r"(?i)\b{}\b", regex::escape(term))).expect("escaped term is a valid pattern")
}

/// Indices (ascending) of sentences matching any keyword group.
/// Matching is case-insensitive on whole words.
pub fn find_keyword_sentences(transcript: &Transcript, groups: &[KeywordGroup]) -> Vec<usize> {
    let compiled: Vec<Vec<Regex>> = groups
        .iter()
        .map(|g| g.iter().map(|t| term_regex(t)).collect())
        .collect();
    transcript
        .sentences
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            compiled
                .iter()
                .any(|group| !group.is_empty() && group.iter().all(|re| re.is_match(&s.text)))
        })
        .map(|(i, _)| i)
        .collect()
}
