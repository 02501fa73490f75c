use ndarray::Array2;

use crate::data_schema::{Fixation, Heatmap, HeatmapRole};
use crate::error::{Error, Result};

/// Default truncation radius, in pixels of the source resolution.
pub const DEFAULT_RADIUS: f64 = 150.0;

/// Duration-weighted sum of truncated Gaussians, normalized to peak 1.
///
/// Each fixation contributes `duration * exp(-d^2 / (2 sigma^2))` with
/// `sigma = radius / 3` at pixels within `radius` of it, and nothing beyond.
/// Pixel centers sit at integer coordinates. Fixations are accumulated in a
/// canonical order, so the result does not depend on input order.
pub fn render_heatmap(fixations: &[Fixation], width: usize, height: usize, radius: f64) -> Result<Heatmap> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::Invalid(format!("heatmap radius must be positive, got {radius}")));
    }
    let mut ordered: Vec<&Fixation> = fixations.iter().filter(|f| f.duration() > 0.0).collect();
    ordered.sort_by(|a, b| {
        a.x.total_cmp(&b.x)
            .then(a.y.total_cmp(&b.y))
            .then(a.t_start.total_cmp(&b.t_start))
            .then(a.t_end.total_cmp(&b.t_end))
    });

    let sigma = radius / 3.0;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    let r2 = radius * radius;
    let mut field = Array2::<f64>::zeros((height, width));
    for f in ordered {
        let duration = f.duration();
        let x_lo = (f.x - radius).ceil().max(0.0);
        let x_hi = (f.x + radius).floor().min(width as f64 - 1.0);
        let y_lo = (f.y - radius).ceil().max(0.0);
        let y_hi = (f.y + radius).floor().min(height as f64 - 1.0);
        if x_lo > x_hi || y_lo > y_hi {
            continue;
        }
        for y in y_lo as usize..=y_hi as usize {
            let dy = y as f64 - f.y;
            let mut row = field.row_mut(y);
            for x in x_lo as usize..=x_hi as usize {
                let dx = x as f64 - f.x;
                let d2 = dx * dx + dy * dy;
                if d2 <= r2 {
                    row[x] += duration * (-d2 * inv_two_sigma2).exp();
                }
            }
        }
    }

    let peak = field.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        field.mapv_inplace(|v| (v / peak).min(1.0));
    }
    Heatmap::new(field, HeatmapRole::GroundTruth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fx(x: f64, y: f64, d: f64) -> Fixation {
        Fixation {
            x,
            y,
            t_start: 1.0,
            t_end: 1.0 + d,
        }
    }

    #[test]
    fn centered_fixation_is_symmetric() {
        let h = render_heatmap(&[fx(20.0, 20.0, 0.5)], 41, 41, 12.0).unwrap();
        let v = h.values();
        assert_eq!(v[[20, 20]], 1.0);
        for y in 0..41 {
            for x in 0..41 {
                assert_eq!(v[[y, x]], v[[y, 40 - x]]);
                assert_eq!(v[[y, x]], v[[40 - y, x]]);
                assert_eq!(v[[y, x]], v[[x, y]]);
                assert!(v[[y, x]] <= 1.0);
            }
        }
        // truncation: zero just past the radius, positive on it
        assert!(v[[20, 32]] > 0.0);
        assert_eq!(v[[20, 33]], 0.0);
    }

    #[test]
    fn coincident_fixations_add_linearly() {
        let a = render_heatmap(&[fx(7.3, 9.1, 0.2), fx(7.3, 9.1, 0.2), fx(20.0, 4.0, 0.1)], 32, 24, 8.0).unwrap();
        let b = render_heatmap(&[fx(7.3, 9.1, 0.4), fx(20.0, 4.0, 0.1)], 32, 24, 8.0).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_and_invalid() {
        let h = render_heatmap(&[], 16, 16, 5.0).unwrap();
        assert!(h.values().iter().all(|&v| v == 0.0));
        assert!(render_heatmap(&[], 16, 16, 0.0).is_err());
        assert!(render_heatmap(&[], 16, 16, -2.0).is_err());
        // entirely off-grid fixation leaves the field empty
        let h = render_heatmap(&[fx(-50.0, 3.0, 1.0)], 16, 16, 5.0).unwrap();
        assert!(h.values().iter().all(|&v| v == 0.0));
    }
}
