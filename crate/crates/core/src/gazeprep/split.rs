use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_schema::Setting;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Down-sample the majority class to 1:1 before splitting.
    pub balance: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
            balance: true,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {}:{}:{} must be non-negative and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

/// Indices into the split input, each list ascending. Entries dropped by
/// balancing appear in none of them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Split membership per input index.
    pub fn membership(&self, n: usize) -> Vec<Option<SplitName>> {
        let mut out = vec![None; n];
        for (name, idx) in [
            (SplitName::Train, &self.train),
            (SplitName::Val, &self.val),
            (SplitName::Test, &self.test),
        ] {
            for &i in idx {
                out[i] = Some(name);
            }
        }
        out
    }
}

/// Seeded train/val/test partition of binary-labeled entries.
///
/// With balancing on, the majority class is uniformly down-sampled to the
/// minority count and the classes are interleaved before cutting, so every
/// split holds the two classes within one of each other.
pub fn split_dataset(positive: &[bool], spec: &SplitSpec) -> Result<Partition> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pos: Vec<usize> = (0..positive.len()).filter(|&i| positive[i]).collect();
    let mut neg: Vec<usize> = (0..positive.len()).filter(|&i| !positive[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let order: Vec<usize> = if spec.balance {
        let n = pos.len().min(neg.len());
        pos.iter()
            .take(n)
            .zip(neg.iter().take(n))
            .flat_map(|(&p, &q)| [p, q])
            .collect()
    } else {
        let mut all: Vec<usize> = pos.into_iter().chain(neg).collect();
        all.shuffle(&mut rng);
        all
    };

    let n = order.len();
    let n_train = (n as f64 * spec.train).round() as usize;
    let n_val = (n as f64 * spec.val).round() as usize;
    if n_train < 1 || n_val < 1 || n_train + n_val >= n {
        return Err(Error::Invalid(format!(
            "{n} entries after balancing cannot fill three non-empty splits"
        )));
    }
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Partition {
        train: sorted(&order[..n_train]),
        val: sorted(&order[n_train..n_train + n_val]),
        test: sorted(&order[n_train + n_val..]),
    })
}

/// Splits each base setting independently and unions the result, so the
/// union setting's splits are the sums of the per-setting splits.
pub fn split_by_setting(settings: &[Setting], positive: &[bool], spec: &SplitSpec) -> Result<Partition> {
    let mut groups: BTreeMap<Setting, Vec<usize>> = BTreeMap::new();
    for (i, &s) in settings.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    let mut out = Partition::default();
    for (setting, idx) in groups {
        let labels: Vec<bool> = idx.iter().map(|&i| positive[i]).collect();
        let sub_spec = SplitSpec {
            seed: spec.seed.wrapping_add(setting as u64),
            ..spec.clone()
        };
        let part = split_dataset(&labels, &sub_spec).map_err(|e| match e {
            Error::Invalid(m) => Error::Invalid(format!("setting {setting}: {m}")),
            other => other,
        })?;
        out.train.extend(part.train.iter().map(|&j| idx[j]));
        out.val.extend(part.val.iter().map(|&j| idx[j]));
        out.test.extend(part.test.iter().map(|&j| idx[j]));
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_pos(idx: &[usize], labels: &[bool]) -> usize {
        idx.iter().filter(|&&i| labels[i]).count()
    }

    #[test]
    fn balanced_hundred() {
        let labels: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
        let p = split_dataset(&labels, &SplitSpec::default()).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (70, 15, 15));
        assert_eq!(count_pos(&p.train, &labels), 35);
        for s in [&p.val, &p.test] {
            let pos = count_pos(s, &labels) as i64;
            assert!((2 * pos - s.len() as i64).abs() <= 1);
        }
    }

    #[test]
    fn downsamples_majority() {
        let labels: Vec<bool> = (0..100).map(|i| i < 60).collect();
        let p = split_dataset(&labels, &SplitSpec::default()).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (56, 12, 12));
        let all: Vec<usize> = p.train.iter().chain(&p.val).chain(&p.test).copied().collect();
        assert_eq!(count_pos(&all, &labels), 40);
        for s in [&p.train, &p.val, &p.test] {
            assert_eq!(2 * count_pos(s, &labels), s.len());
        }
    }

    #[test]
    fn too_small_and_bad_ratios() {
        assert!(split_dataset(&[true, false], &SplitSpec::default()).is_err());
        assert!(split_dataset(&[true; 40], &SplitSpec::default()).is_err());
        let spec = SplitSpec {
            train: 0.8,
            ..SplitSpec::default()
        };
        assert!(split_dataset(&[true, false], &spec).is_err());
    }

    #[test]
    fn seeded() {
        let labels: Vec<bool> = (0..57).map(|i| i % 3 == 0).collect();
        let spec = SplitSpec {
            seed: 9,
            ..SplitSpec::default()
        };
        assert_eq!(
            split_dataset(&labels, &spec).unwrap(),
            split_dataset(&labels, &spec).unwrap()
        );
        let other = SplitSpec {
            seed: 10,
            ..SplitSpec::default()
        };
        assert_ne!(
            split_dataset(&labels, &spec).unwrap(),
            split_dataset(&labels, &other).unwrap()
        );
    }
}
