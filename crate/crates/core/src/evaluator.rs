//! CULane-style lane scoring.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{lines_path_for, parse_lines_file, CategoryIndex};
use crate::imaging::{rasterize_lane_mask, LaneMask, Polyline};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub line_width: f64,
    pub iou_threshold: f64,
    /// `(height, width)` of the annotation frame.
    pub canvas: (usize, usize),
    /// Categories without ground truth, reported as false positives only.
    pub fp_only_categories: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            line_width: 30.0,
            iou_threshold: 0.5,
            canvas: (590, 1640),
            fp_only_categories: vec!["Crossroad".into()],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.line_width >= 1.0) {
            return Err(Error::Config(format!("line_width must be >= 1, got {}", self.line_width)));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if self.canvas.0 == 0 || self.canvas.1 == 0 {
            return Err(Error::Config("evaluation canvas must be non-empty".into()));
        }
        Ok(())
    }

    fn mask(&self, lane: &Polyline) -> LaneMask {
        rasterize_lane_mask(lane, self.line_width, self.canvas.0, self.canvas.1)
    }
}

fn mask_iou(a: &LaneMask, b: &LaneMask) -> f64 {
    let inter = a.intersection(b);
    let union = a.count() + b.count() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn lane_iou(pred: &Polyline, gt: &Polyline, cfg: &EvalConfig) -> f64 {
    mask_iou(&cfg.mask(pred), &cfg.mask(gt))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(pred index, gt index, iou)` for every matched pair.
    pub assignment: Vec<(usize, usize, f64)>,
}

/// Maximum-weight assignment on a rectangular matrix. Returns, per row, the
/// assigned column (or `None` when the row maps to padding).
fn hungarian(weights: &[Vec<f64>], cols: usize) -> Vec<Option<usize>> {
    let rows = weights.len();
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -weights[i][j]
        } else {
            0.0
        }
    };
    // 1-based potentials; p[j] is the row assigned to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        if p[j] >= 1 && p[j] <= rows && j <= cols {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Matches from a precomputed IoU matrix (`ious[pred][gt]`).
pub fn match_from_ious(ious: &[Vec<f64>], n_gt: usize, threshold: f64) -> MatchResult {
    let n_pred = ious.len();
    // Every admissible edge outweighs the sum of all IoUs, so the optimum
    // first maximizes cardinality and then total IoU.
    let bonus = (n_pred.min(n_gt) + 1) as f64;
    let weights: Vec<Vec<f64>> = ious
        .iter()
        .map(|row| row.iter().map(|&iou| if iou > threshold { bonus + iou } else { 0.0 }).collect())
        .collect();
    let mut assignment: Vec<(usize, usize, f64)> = hungarian(&weights, n_gt)
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j, ious[i][j])))
        .filter(|&(_, _, iou)| iou > threshold)
        .collect();
    assignment.sort_by_key(|&(i, _, _)| i);
    let tp = assignment.len();
    MatchResult {
        tp,
        fp: n_pred - tp,
        fn_: n_gt - tp,
        assignment,
    }
}

pub fn iou_matrix(preds: &[Polyline], gts: &[Polyline], cfg: &EvalConfig) -> Vec<Vec<f64>> {
    let gt_masks: Vec<LaneMask> = gts.iter().map(|g| cfg.mask(g)).collect();
    preds
        .iter()
        .map(|p| {
            let pm = cfg.mask(p);
            gt_masks.iter().map(|g| mask_iou(&pm, g)).collect()
        })
        .collect()
}

pub fn match_lanes(preds: &[Polyline], gts: &[Polyline], cfg: &EvalConfig) -> MatchResult {
    match_from_ious(&iou_matrix(preds, gts, cfg), gts.len(), cfg.iou_threshold)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn scores(&self) -> Scores {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Scores {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: String,
    #[serde(flatten)]
    pub counts: Counts,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// In order of first appearance in the category index.
    pub per_category: Vec<CategoryScore>,
    pub fp_only_categories: BTreeMap<String, usize>,
    pub total_counts: Counts,
    pub total: Scores,
}

impl EvalReport {
    pub fn from_counts(per_image: &[(String, Counts)], fp_only: &[String]) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut acc: BTreeMap<String, Counts> = BTreeMap::new();
        for (cat, c) in per_image {
            if !acc.contains_key(cat) {
                order.push(cat.clone());
            }
            acc.entry(cat.clone()).or_default().add(*c);
        }
        let mut report = EvalReport::default();
        for cat in order {
            let c = acc[&cat];
            if fp_only.contains(&cat) {
                report.fp_only_categories.insert(cat, c.fp);
            } else {
                report.total_counts.add(c);
                report.per_category.push(CategoryScore {
                    category: cat,
                    counts: c,
                    scores: c.scores(),
                });
            }
        }
        report.total = report.total_counts.scores();
        report
    }

    pub fn category(&self, name: &str) -> Option<&CategoryScore> {
        self.per_category.iter().find(|c| c.category == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<12} {:>7} {:>7} {:>7} {:>9} {:>7} {:>6}", "Category", "TP", "FP", "FN", "Precision", "Recall", "F1").unwrap();
        for c in &self.per_category {
            writeln!(
                s,
                "{:<12} {:>7} {:>7} {:>7} {:>9.1} {:>7.1} {:>6.1}",
                c.category,
                c.counts.tp,
                c.counts.fp,
                c.counts.fn_,
                100.0 * c.scores.precision,
                100.0 * c.scores.recall,
                100.0 * c.scores.f1
            )
            .unwrap();
        }
        for (cat, fp) in &self.fp_only_categories {
            writeln!(s, "{:<12} {:>7} {:>7} {:>7} {:>9} {:>7} {:>6}", cat, "-", fp, "-", "-", "-", "(FP)").unwrap();
        }
        let t = &self.total_counts;
        writeln!(
            s,
            "{:<12} {:>7} {:>7} {:>7} {:>9.1} {:>7.1} {:>6.1}",
            "Total",
            t.tp,
            t.fp,
            t.fn_,
            100.0 * self.total.precision,
            100.0 * self.total.recall,
            100.0 * self.total.f1
        )
        .unwrap();
        s
    }
}

fn score_image(pred_dir: &Path, gt_dir: &Path, rel: &str, cfg: &EvalConfig) -> Result<Counts> {
    let gt = parse_lines_file(&lines_path_for(&gt_dir.join(rel)))?;
    let pred_path = lines_path_for(&pred_dir.join(rel));
    let preds = if pred_path.exists() {
        parse_lines_file(&pred_path)?.lanes
    } else {
        Vec::new()
    };
    let gts: Vec<Polyline> = gt.lanes.into_iter().filter(|l| l.len() >= 2).collect();
    let m = match_lanes(&preds, &gts, cfg);
    Ok(Counts {
        tp: m.tp,
        fp: m.fp,
        fn_: m.fn_,
    })
}

/// Scores every image of `index`. Paths in the index are relative to both
/// `pred_dir` and `gt_dir`; annotations sit next to them as `.lines.txt`.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, index: &CategoryIndex, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let per_image: Vec<(String, Counts)> = index
        .entries
        .par_iter()
        .map(|(rel, cat)| score_image(pred_dir, gt_dir, rel, cfg).map(|c| (cat.clone(), c)))
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_counts(&per_image, &cfg.fp_only_categories))
}
