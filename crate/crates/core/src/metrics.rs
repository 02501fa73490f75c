//! Location and intensity metrics, aggregate reports and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_schema::{BinaryMask, Heatmap, HeatmapRole};
use crate::error::{Error, Result};
use crate::losses::binarize;

/// Probability threshold for hard predicted masks.
pub const PRED_THRESHOLD: f64 = 0.5;
/// PSNR reported for identical (or nearly identical) inputs.
pub const PSNR_CAP: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskClass {
    Foreground,
    Background,
}

fn same_dim(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("metric inputs differ in shape: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Intersection over union of one class; 1 when the class is absent from both.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask, which: MaskClass) -> Result<f64> {
    same_dim(pred.dim(), gt.dim())?;
    let want = u8::from(which == MaskClass::Foreground);
    let (mut inter, mut union) = (0usize, 0usize);
    Zip::from(pred.values()).and(gt.values()).for_each(|&p, &g| {
        let (p, g) = (p == want, g == want);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    });
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Ground-truth-frequency weighted IoU over foreground and background.
pub fn fw_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let fg = iou(pred, gt, MaskClass::Foreground)?;
    let bg = iou(pred, gt, MaskClass::Background)?;
    let freq_fg = gt.count_ones() as f64 / gt.values().len() as f64;
    Ok(freq_fg * fg + (1.0 - freq_fg) * bg)
}

pub fn l1_mean(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    same_dim(pred.dim(), gt.dim())?;
    Ok((pred - gt).mapv(f64::abs).mean().unwrap_or(0.0))
}

pub fn l2_mean(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    same_dim(pred.dim(), gt.dim())?;
    Ok((pred - gt).mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    let mse = l2_mean(pred, gt)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> Array1<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let k = Array1::from_shape_fn(SSIM_WINDOW, |i| {
        let d = i as f64 - half;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s = k.sum();
    k / s
}

/// Separable "valid" filtering with a symmetric 1-D kernel.
fn filter_valid(x: &Array2<f64>, k: &Array1<f64>) -> Array2<f64> {
    let n = k.len();
    let (h, w) = x.dim();
    let rows = Array2::from_shape_fn((h, w + 1 - n), |(y, c)| {
        (0..n).map(|i| k[i] * x[[y, c + i]]).sum::<f64>()
    });
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(r, c)| {
        (0..n).map(|i| k[i] * rows[[r + i, c]]).sum::<f64>()
    })
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).
pub fn ssim(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    same_dim(pred.dim(), gt.dim())?;
    let (h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let mx = filter_valid(pred, &k);
    let my = filter_valid(gt, &k);
    let exx = filter_valid(&(pred * pred), &k);
    let eyy = filter_valid(&(gt * gt), &k);
    let exy = filter_valid(&(pred * gt), &k);
    let mut total = 0.0;
    Zip::from(&mx)
        .and(&my)
        .and(&exx)
        .and(&eyy)
        .and(&exy)
        .for_each(|&mx, &my, &exx, &eyy, &exy| {
            let vx = exx - mx * mx;
            let vy = eyy - my * my;
            let cxy = exy - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        });
    Ok(total / mx.len() as f64)
}

/// Fraction of values above `threshold`.
pub fn area_ratio_at(values: &Array2<f64>, threshold: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| v > threshold).count() as f64 / values.len() as f64
}

/// Threshold used to binarize a heatmap of the given role.
pub fn role_threshold(role: HeatmapRole) -> f64 {
    match role {
        HeatmapRole::GroundTruth => 0.0,
        HeatmapRole::Predicted => PRED_THRESHOLD,
    }
}

/// Covered-area fraction: `> 0` for ground truth, `> 0.5` for predictions.
pub fn area_ratio(heatmap: &Heatmap) -> f64 {
    area_ratio_at(heatmap.values(), role_threshold(heatmap.role()))
}

/// Hard mask of a heatmap with its role's threshold.
pub fn heatmap_mask(heatmap: &Heatmap) -> BinaryMask {
    binarize(heatmap.values(), role_threshold(heatmap.role()))
}

/// True and predicted class of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassOutcome {
    pub label: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub fw_iou: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub l1: f64,
    pub l2: f64,
    pub area_ratio: f64,
    pub label: Option<usize>,
    pub predicted: Option<usize>,
}

/// Arithmetic means over samples; IoU values are fractions in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub count: usize,
    pub fg_iou: f64,
    pub bg_iou: f64,
    pub fw_iou: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub l1: f64,
    pub l2: f64,
    pub area_ratio: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<SampleMetrics>,
    pub aggregate: AggregateMetrics,
    pub provenance: BTreeMap<String, String>,
}

/// Heatmap metrics of one prediction against its ground truth.
pub fn sample_metrics(id: &str, pred: &Heatmap, gt: &Heatmap) -> Result<SampleMetrics> {
    let (p, g) = (pred.values(), gt.values());
    let pm = heatmap_mask(pred);
    let gm = heatmap_mask(gt);
    Ok(SampleMetrics {
        id: id.to_string(),
        fg_iou: iou(&pm, &gm, MaskClass::Foreground)?,
        bg_iou: iou(&pm, &gm, MaskClass::Background)?,
        fw_iou: fw_iou(&pm, &gm)?,
        ssim: ssim(p, g)?,
        psnr: psnr(p, g)?,
        l1: l1_mean(p, g)?,
        l2: l2_mean(p, g)?,
        area_ratio: area_ratio(pred),
        label: None,
        predicted: None,
    })
}

/// Fraction of correct predictions; `None` for an empty set.
pub fn accuracy<'a>(outcomes: impl IntoIterator<Item = &'a ClassOutcome>) -> Option<f64> {
    let (mut n, mut ok) = (0usize, 0usize);
    for o in outcomes {
        n += 1;
        ok += usize::from(o.label == o.predicted);
    }
    (n > 0).then(|| ok as f64 / n as f64)
}

fn mismatch(what: &str, a: &BTreeMap<String, impl Sized>, b: &BTreeMap<String, impl Sized>) -> Result<()> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        let missing: Vec<&String> = a
            .keys()
            .filter(|k| !b.contains_key(*k))
            .chain(b.keys().filter(|k| !a.contains_key(*k)))
            .collect();
        return Err(Error::Invalid(format!("{what} ids do not match: {missing:?}")));
    }
    Ok(())
}

/// Per-sample metrics plus means. `outcomes` may be empty (no accuracy);
/// otherwise it must cover exactly the same ids as the heatmaps.
pub fn evaluate(
    preds: &BTreeMap<String, Heatmap>,
    gts: &BTreeMap<String, Heatmap>,
    outcomes: &BTreeMap<String, ClassOutcome>,
) -> Result<MetricsReport> {
    mismatch("prediction/ground-truth", preds, gts)?;
    if !outcomes.is_empty() {
        mismatch("heatmap/classification", preds, outcomes)?;
    }
    let pairs: Vec<(&String, &Heatmap, &Heatmap)> = preds.iter().map(|(id, p)| (id, p, &gts[id])).collect();
    let mut records = pairs
        .par_iter()
        .map(|(id, p, g)| sample_metrics(id, p, g))
        .collect::<Result<Vec<_>>>()?;
    for r in &mut records {
        if let Some(o) = outcomes.get(&r.id) {
            r.label = Some(o.label);
            r.predicted = Some(o.predicted);
        }
    }
    let aggregate = aggregate(&records, accuracy(outcomes.values()));
    Ok(MetricsReport {
        records,
        aggregate,
        provenance: BTreeMap::new(),
    })
}

fn aggregate(records: &[SampleMetrics], accuracy: Option<f64>) -> AggregateMetrics {
    let n = records.len();
    let mean = |f: fn(&SampleMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            records.iter().map(f).sum::<f64>() / n as f64
        }
    };
    AggregateMetrics {
        count: n,
        fg_iou: mean(|r| r.fg_iou),
        bg_iou: mean(|r| r.bg_iou),
        fw_iou: mean(|r| r.fw_iou),
        ssim: mean(|r| r.ssim),
        psnr: mean(|r| r.psnr),
        l1: mean(|r| r.l1),
        l2: mean(|r| r.l2),
        area_ratio: mean(|r| r.area_ratio),
        accuracy,
    }
}

impl MetricsReport {
    pub fn with_provenance(mut self, key: &str, value: impl Into<String>) -> Self {
        self.provenance.insert(key.to_string(), value.into());
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Per-sample records as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,fg_iou,bg_iou,fw_iou,ssim,psnr,l1,l2,area_ratio,label,predicted\n");
        let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.id,
                r.fg_iou,
                r.bg_iou,
                r.fw_iou,
                r.ssim,
                r.psnr,
                r.l1,
                r.l2,
                r.area_ratio,
                opt(r.label),
                opt(r.predicted)
            );
        }
        out
    }

    /// Heatmap table row for this report.
    pub fn heatmap_table(&self, method: &str) -> Table {
        let a = &self.aggregate;
        let mut t = Table::heatmap();
        t.push(vec![
            method.to_string(),
            pct(a.fg_iou),
            pct(a.bg_iou),
            pct(a.fw_iou),
            fixed(a.ssim, 4),
            fixed(a.psnr, 2),
            fixed(a.l1, 4),
            fixed(a.l2, 4),
        ]);
        t
    }

    pub fn accuracy_table(&self, model: &str) -> Table {
        let mut t = Table::accuracy();
        t.push(vec![
            model.to_string(),
            self.aggregate.accuracy.map(pct).unwrap_or_else(|| "-".into()),
        ]);
        t
    }

    /// Writes `report.json`, `samples.csv` and `tables.txt` into `dir`.
    pub fn write(&self, dir: &Path, tables: &[Table]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text: String = tables.iter().map(|t| t.render() + "\n").collect();
        for (name, body) in [
            ("report.json", self.to_json()),
            ("samples.csv", self.to_csv()),
            ("tables.txt", text),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

pub fn fixed(v: f64, digits: usize) -> String {
    format!("{v:.digits$}")
}

/// A titled, optionally column-grouped result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    /// Spanning group labels and how many columns each covers.
    pub groups: Vec<(String, usize)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: &str, groups: &[(&str, usize)], columns: &[&str]) -> Self {
        Self {
            title: title.to_string(),
            groups: groups.iter().map(|(g, n)| (g.to_string(), *n)).collect(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Location and intensity comparison of heatmap predictors.
    pub fn heatmap() -> Self {
        Self::new(
            "Heatmap prediction",
            &[("", 1), ("Location", 3), ("Intensity", 4)],
            &["Methods", "fgIoU", "bgIoU", "fwIoU", "mSSIM", "mPSNR", "mL1", "mL2"],
        )
    }

    pub fn accuracy() -> Self {
        Self::new("Classification", &[], &["Model", "Accuracy (%)"])
    }

    pub fn per_setting() -> Self {
        Self::new(
            "Per-setting heatmap prediction",
            &[],
            &["Settings", "fwIoU", "mSSIM", "mPSNR", "mL1"],
        )
    }

    pub fn losses() -> Self {
        Self::new(
            "Loss ablation",
            &[("Losses", 3), ("Location", 2), ("Intensity", 2)],
            &["L2", "Lce", "Ldice", "fgIoU", "fwIoU", "mPSNR", "mL2"],
        )
    }

    pub fn alpha() -> Self {
        Self::new(
            "Scaling-vector ablation",
            &[],
            &["Settings", "fwIoU", "mSSIM", "mPSNR", "mL1"],
        )
    }

    pub fn gt_mask() -> Self {
        Self::new(
            "Classification with predicted vs ground-truth masking",
            &[],
            &["Settings", "Heatmap", "Area ratio (%)", "Accuracy (%)"],
        )
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the columns");
        self.rows.push(row);
    }

    /// Plain-text rendering with aligned columns.
    pub fn render(&self) -> String {
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].len())
                    .chain([self.columns[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            format!("| {} |", parts.join(" | "))
        };
        let mut out = format!("{}\n", self.title);
        if !self.groups.is_empty() {
            let mut col = 0;
            let mut cells = Vec::new();
            for (name, span) in &self.groups {
                let w: usize = widths[col..col + span].iter().sum::<usize>() + 3 * (span - 1);
                cells.push(format!("{name:^w$}"));
                col += span;
            }
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        let _ = writeln!(out, "{}", line(&self.columns));
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        for r in &self.rows {
            let _ = writeln!(out, "{}", line(r));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",") + "\n";
        for r in &self.rows {
            out += &(r.join(",") + "\n");
        }
        out
    }
}
