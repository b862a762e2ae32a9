//! Probability maps to lane polylines.

use serde::{Deserialize, Serialize};

use crate::datasets::format_lines;
use crate::detector::DetectorOutput;
use crate::imaging::Polyline;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// A lane is decoded only when its existence confidence is strictly above this.
    pub exist_thresh: f64,
    pub row_stride: usize,
    /// Sampled rows whose best probability is below this are dropped.
    pub row_prob_floor: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            exist_thresh: 0.5,
            row_stride: 20,
            row_prob_floor: 0.3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodedLanes {
    /// `(lane slot, polyline)` with points in increasing row order.
    pub lanes: Vec<(usize, Polyline)>,
    pub confidences: Vec<f64>,
}

impl DecodedLanes {
    pub fn polylines(&self) -> impl Iterator<Item = &Polyline> {
        self.lanes.iter().map(|(_, l)| l)
    }

    /// Maps every point from output resolution to another frame.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            lanes: self.lanes.iter().map(|(k, l)| (*k, l.scaled(sx, sy))).collect(),
            confidences: self.confidences.clone(),
        }
    }
}

pub fn decode_lanes(out: &DetectorOutput, cfg: &DecodeConfig) -> DecodedLanes {
    let (h, w) = (out.height, out.width);
    let stride = cfg.row_stride.max(1);
    let mut lanes = Vec::new();
    for (k, &conf) in out.existence.iter().enumerate() {
        if !(conf as f64 > cfg.exist_thresh) {
            continue;
        }
        let plane = out.prob_map(k + 1);
        let mut points = Vec::new();
        let mut y = h as isize - 1;
        while y >= 0 {
            let row = &plane[y as usize * w..(y as usize + 1) * w];
            let (mut best_x, mut best) = (0, row[0]);
            for (x, &p) in row.iter().enumerate().skip(1) {
                if p > best {
                    best = p;
                    best_x = x;
                }
            }
            if best as f64 >= cfg.row_prob_floor {
                points.push((best_x as f64, y as f64));
            }
            y -= stride as isize;
        }
        if points.len() >= 2 {
            points.reverse();
            lanes.push((k, Polyline::new(points).expect("rows strictly increase")));
        }
    }
    DecodedLanes {
        lanes,
        confidences: out.existence.iter().map(|&c| c as f64).collect(),
    }
}

/// CULane `.lines.txt` content for the decoded lanes.
pub fn lanes_to_culane_lines(dec: &DecodedLanes) -> String {
    format_lines(dec.polylines())
}
