use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{dsc, hd95};
use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMask};

/// Anything that maps an image to a label mask.
pub trait Segmenter: Sync {
    fn segment(&self, image: &GrayImage) -> Result<LabelMask>;
}

/// Column names for the foreground classes (1..class_count).
///
/// With the 12-class lumbar scheme these are L1–L5, S1, D1–D5.
pub fn class_names(class_count: usize) -> Vec<String> {
    if class_count == 12 {
        let mut v: Vec<String> = (1..=5).map(|i| format!("L{i}")).collect();
        v.push("S1".into());
        v.extend((1..=5).map(|i| format!("D{i}")));
        v
    } else {
        (1..class_count).map(|i| format!("C{i}")).collect()
    }
}

/// Per-class metric rows over the foreground classes, with an average column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub columns: Vec<String>,
    /// (row label, per-class values); NaN where no sample produced a value.
    pub rows: Vec<(String, Vec<f64>)>,
}

impl MetricTable {
    fn average(values: &[f64]) -> f64 {
        let ok: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        }
    }

    /// Aligned text with an `Average` column.
    pub fn to_text(&self) -> String {
        let label_w = self.rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:<label_w$}", "");
        for c in self.columns.iter().chain(std::iter::once(&"Average".to_string())) {
            let _ = write!(s, " {c:>9}");
        }
        s.push('\n');
        for (label, vals) in &self.rows {
            let _ = write!(s, "{label:<label_w$}");
            for v in vals.iter().chain(std::iter::once(&Self::average(vals))) {
                let _ = write!(s, " {v:>9.3}");
            }
            s.push('\n');
        }
        s
    }

    /// Tab-separated variant with full precision.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric");
        for c in &self.columns {
            let _ = write!(s, "\t{c}");
        }
        s.push_str("\tAverage\n");
        for (label, vals) in &self.rows {
            s.push_str(label);
            for v in vals.iter().chain(std::iter::once(&Self::average(vals))) {
                let _ = write!(s, "\t{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Per-sample, per-foreground-class metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_count: usize,
    /// `dsc[sample][class - 1]`
    pub dsc: Vec<Vec<f64>>,
    /// `hd95[sample][class - 1]`, `None` where the class is missing from either mask.
    pub hd95: Vec<Vec<Option<f64>>>,
}

impl EvalReport {
    fn score(pred: &LabelMask, truth: &LabelMask, class_count: usize, spacing: Option<f64>) -> Result<(Vec<f64>, Vec<Option<f64>>)> {
        let mut d = Vec::with_capacity(class_count - 1);
        let mut h = Vec::with_capacity(class_count - 1);
        for c in 1..class_count {
            d.push(dsc(pred, truth, c, class_count)?);
            h.push(match hd95(pred, truth, c, spacing) {
                Ok(v) => Some(v),
                Err(Error::ClassAbsent { .. }) => None,
                Err(e) => return Err(e),
            });
        }
        Ok((d, h))
    }

    /// Mean DSC of each foreground class over samples.
    pub fn class_dsc(&self) -> Vec<f64> {
        let n = self.dsc.len().max(1) as f64;
        (0..self.class_count - 1)
            .map(|c| self.dsc.iter().map(|row| row[c]).sum::<f64>() / n)
            .collect()
    }

    /// Mean HD95 of each foreground class over samples where it is defined.
    pub fn class_hd95(&self) -> Vec<f64> {
        (0..self.class_count - 1)
            .map(|c| {
                let v: Vec<f64> = self.hd95.iter().filter_map(|row| row[c]).collect();
                if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            })
            .collect()
    }

    /// Mean DSC over foreground classes and samples.
    pub fn mean_dsc(&self) -> f64 {
        let c = self.class_dsc();
        c.iter().sum::<f64>() / c.len() as f64
    }

    pub fn table(&self) -> MetricTable {
        MetricTable {
            columns: class_names(self.class_count),
            rows: vec![("DSC".into(), self.class_dsc()), ("HD95".into(), self.class_hd95())],
        }
    }
}

/// Segments every sample and scores it against its mask.
pub fn evaluate(model: &dyn Segmenter, samples: &[(GrayImage, LabelMask)], class_count: usize, spacing: Option<f64>) -> Result<EvalReport> {
    if class_count < 2 {
        return Err(Error::Config(format!("class_count {class_count} < 2")));
    }
    let scored = samples
        .par_iter()
        .map(|(image, truth)| EvalReport::score(&model.segment(image)?, truth, class_count, spacing))
        .collect::<Result<Vec<_>>>()?;
    let (dsc, hd95) = scored.into_iter().unzip();
    Ok(EvalReport { class_count, dsc, hd95 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Horizontal,
    Vertical,
}

impl Axis {
    fn offset(self, s: i64) -> (i64, i64) {
        match self {
            Axis::Horizontal => (0, s),
            Axis::Vertical => (s, 0),
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizontal" | "h" => Ok(Axis::Horizontal),
            "vertical" | "v" => Ok(Axis::Vertical),
            _ => Err(Error::invalid("axis", format!("unknown axis {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub shift: u32,
    /// Per-class and per-sample scores, averaged over the two shift directions.
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub axis: Axis,
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    /// One row per shift with the mean foreground DSC per class.
    pub fn table(&self) -> MetricTable {
        let class_count = self.rows.first().map(|r| r.report.class_count).unwrap_or(2);
        MetricTable {
            columns: class_names(class_count),
            rows: self
                .rows
                .iter()
                .map(|r| (format!("shift {}", r.shift), r.report.class_dsc()))
                .collect(),
        }
    }

    pub fn mean_dsc(&self) -> Vec<(u32, f64)> {
        self.rows.iter().map(|r| (r.shift, r.report.mean_dsc())).collect()
    }
}

/// Evaluates under translations of each magnitude in both directions along
/// `axis`. Vacated pixels get intensity `fill` and the background label.
/// Scores of the two directions are averaged per sample; magnitude 0 is
/// evaluated once and equals [`evaluate`].
pub fn robustness_sweep(
    model: &dyn Segmenter,
    samples: &[(GrayImage, LabelMask)],
    class_count: usize,
    axis: Axis,
    shifts: &[u32],
    fill: f64,
    max_shift: u32,
) -> Result<RobustnessReport> {
    let mut rows = Vec::with_capacity(shifts.len());
    for &s in shifts {
        if s > max_shift {
            return Err(Error::invalid("robustness_sweep", format!("shift {s} exceeds limit {max_shift}")));
        }
        let dirs: Vec<i64> = if s == 0 { vec![0] } else { vec![-(s as i64), s as i64] };
        let reports = dirs
            .iter()
            .map(|&d| {
                let (dy, dx) = axis.offset(d);
                let moved: Vec<(GrayImage, LabelMask)> = samples
                    .iter()
                    .map(|(img, m)| (img.shifted(dy, dx, fill), m.shifted(dy, dx)))
                    .collect();
                evaluate(model, &moved, class_count, None)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(RobustnessRow {
            shift: s,
            report: average_reports(reports),
        });
    }
    Ok(RobustnessReport { axis, rows })
}

fn average_reports(mut reports: Vec<EvalReport>) -> EvalReport {
    if reports.len() == 1 {
        return reports.pop().expect("one report");
    }
    let k = reports.len() as f64;
    let first = &reports[0];
    let dsc = (0..first.dsc.len())
        .map(|s| {
            (0..first.class_count - 1)
                .map(|c| reports.iter().map(|r| r.dsc[s][c]).sum::<f64>() / k)
                .collect()
        })
        .collect();
    let hd95 = (0..first.hd95.len())
        .map(|s| {
            (0..first.class_count - 1)
                .map(|c| {
                    let v: Vec<f64> = reports.iter().filter_map(|r| r.hd95[s][c]).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect()
        })
        .collect();
    EvalReport {
        class_count: first.class_count,
        dsc,
        hd95,
    }
}
