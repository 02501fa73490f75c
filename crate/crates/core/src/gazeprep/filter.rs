use serde::{Deserialize, Serialize};

use crate::data_schema::{BinaryMask, Fixation, Transcript};
use crate::error::{Error, Result};

/// Closed time window `[start, end]` in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

/// `[0, e]` where `e` ends the highest-index matching sentence; `None` when
/// nothing matched.
pub fn select_interval(transcript: &Transcript, match_indices: &[usize]) -> Result<Option<Interval>> {
    let Some(&last) = match_indices.iter().max() else {
        return Ok(None);
    };
    let sentence = transcript.sentences.get(last).ok_or_else(|| {
        Error::Invalid(format!(
            "sentence index {last} out of range for a transcript of {} sentences",
            transcript.len()
        ))
    })?;
    Ok(Some(Interval {
        start: 0.0,
        end: sentence.t_end,
    }))
}

/// Keeps fixations that start before `interval.end` and whose rounded
/// position is a set mask pixel. A fixation running past the end of the
/// interval is cut at it.
pub fn filter_fixations(fixations: &[Fixation], interval: Interval, mask: &BinaryMask) -> Vec<Fixation> {
    fixations
        .iter()
        .filter(|f| f.t_start < interval.end)
        .filter(|f| mask.contains(f.x.round() as i64, f.y.round() as i64))
        .map(|f| Fixation {
            t_end: f.t_end.min(interval.end),
            ..*f
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_schema::Sentence;

    fn fx(x: f64, y: f64, t0: f64, t1: f64) -> Fixation {
        Fixation {
            x,
            y,
            t_start: t0,
            t_end: t1,
        }
    }

    fn transcript_with_ends(ends: &[f64]) -> Transcript {
        let mut start = 0.0;
        Transcript {
            sentences: ends
                .iter()
                .map(|&e| {
                    let s = Sentence {
                        text: String::new(),
                        t_start: start,
                        t_end: e,
                    };
                    start = e;
                    s
                })
                .collect(),
        }
    }

    #[test]
    fn picks_rightmost_sentence() {
        let ends: Vec<f64> = (0..12).map(|i| i as f64 * 4.0 + 2.7).collect();
        let t = transcript_with_ends(&ends);
        // s10 (index 10) ends at 42.7
        let i = select_interval(&t, &[3, 4, 10]).unwrap().unwrap();
        assert_eq!(i, Interval { start: 0.0, end: 42.7 });
        let t = transcript_with_ends(&[1.0, 2.0]);
        assert_eq!(select_interval(&t, &[1]).unwrap().unwrap().end, 2.0);
        assert_eq!(select_interval(&t, &[]).unwrap(), None);
        assert!(select_interval(&t, &[2]).is_err());
    }

    #[test]
    fn filter_rules() {
        let mask = BinaryMask::from_fn(10, 10, |x, _| x < 5);
        let iv = Interval { start: 0.0, end: 10.0 };
        let inside = fx(2.0, 3.0, 0.0, 0.3);
        let outside = fx(7.0, 3.0, 0.0, 0.3);
        let late = fx(2.0, 3.0, 10.5, 11.0);
        let straddle = fx(2.0, 3.0, 9.8, 10.4);
        let kept = filter_fixations(&[inside, outside, late, straddle], iv, &mask);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0], inside);
        assert!((kept[1].duration() - 0.2).abs() < 1e-12);
        // rounding: 4.6 rounds to 5, which is outside the mask
        assert!(filter_fixations(&[fx(4.6, 1.0, 0.0, 1.0)], iv, &mask).is_empty());
        assert_eq!(filter_fixations(&[fx(4.4, 1.0, 0.0, 1.0)], iv, &mask).len(), 1);
        // off-grid positions are never on the mask
        assert!(filter_fixations(&[fx(-3.0, 1.0, 0.0, 1.0)], iv, &BinaryMask::ones(10, 10)).is_empty());
    }
}
