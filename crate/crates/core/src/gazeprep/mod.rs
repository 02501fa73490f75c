//! Ground-truth construction: keyword-driven interval selection, anatomic
//! filtering of fixations, Gaussian rendering, prompts and data splits.

mod anatomy;
mod filter;
mod keywords;
mod render;
mod setting;
mod split;

pub use anatomy::{make_prompt, mediastinum_to_heart, prompt_for, PROMPT_PREFIX};
pub use filter::{filter_fixations, select_interval, Interval};
pub use keywords::{find_keyword_sentences, KeywordGroup, KeywordTable};
pub use render::{render_heatmap, DEFAULT_RADIUS};
pub use setting::{build_setting, entry_id, setting_mask, SettingEntry};
pub use split::{split_by_setting, split_dataset, Partition, SplitName, SplitSpec};
