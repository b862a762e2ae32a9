use super::{Image, Polyline};

/// Binary canvas produced by stroking a lane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LaneMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl LaneMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection(&self, other: &LaneMask) -> usize {
        assert_eq!(self.dims(), other.dims());
        self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count()
    }

    pub fn to_image(&self) -> Image {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Image::new(self.height, self.width, 1, data).expect("positive dims")
    }
}

fn segment_dist2(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    (px - cx) * (px - cx) + (py - cy) * (py - cy)
}

/// Sets every pixel whose center lies strictly within `width / 2` of the polyline.
///
/// Polylines with fewer than two points leave the mask untouched.
pub fn rasterize_into(line: &Polyline, width: f64, mask: &mut LaneMask) {
    let pts = line.points();
    if pts.len() < 2 || mask.height == 0 || mask.width == 0 {
        return;
    }
    let r = width / 2.0;
    let r2 = r * r;
    let (hmax, wmax) = ((mask.height - 1) as f64, (mask.width - 1) as f64);
    for seg in pts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let x0 = (a.0.min(b.0) - r).floor().max(0.0);
        let x1 = (a.0.max(b.0) + r).ceil().min(wmax);
        let y0 = (a.1.min(b.1) - r).floor().max(0.0);
        let y1 = (a.1.max(b.1) + r).ceil().min(hmax);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            let row = y * mask.width;
            for x in x0 as usize..=x1 as usize {
                if !mask.bits[row + x] && segment_dist2(x as f64, y as f64, a, b) < r2 {
                    mask.bits[row + x] = true;
                }
            }
        }
    }
}

pub fn rasterize_lane_mask(line: &Polyline, width: f64, canvas_h: usize, canvas_w: usize) -> LaneMask {
    let mut m = LaneMask::new(canvas_h, canvas_w);
    rasterize_into(line, width, &mut m);
    m
}

/// Strokes `line` with round joins and caps onto a one-channel `{0, 1}` image.
pub fn rasterize_lane(line: &Polyline, width: f64, canvas_h: usize, canvas_w: usize) -> Image {
    rasterize_lane_mask(line, width, canvas_h, canvas_w).to_image()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: every pixel center against every segment, using
    /// Euclidean distance through projection onto the segment's line.
    fn oracle(points: &[(f64, f64)], width: f64, h: usize, w: usize) -> Vec<bool> {
        let mut out = vec![false; h * w];
        if points.len() < 2 {
            return out;
        }
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64, y as f64);
                let mut best = f64::INFINITY;
                for s in points.windows(2) {
                    let (ax, ay) = s[0];
                    let (bx, by) = s[1];
                    let seg_len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
                    let d = if seg_len == 0.0 {
                        ((px - ax).powi(2) + (py - ay).powi(2)).sqrt()
                    } else {
                        let along = ((px - ax) * (bx - ax) + (py - ay) * (by - ay)) / seg_len;
                        if along <= 0.0 {
                            ((px - ax).powi(2) + (py - ay).powi(2)).sqrt()
                        } else if along >= seg_len {
                            ((px - bx).powi(2) + (py - by).powi(2)).sqrt()
                        } else {
                            ((px - ax) * (by - ay) - (py - ay) * (bx - ax)).abs() / seg_len
                        }
                    };
                    best = best.min(d);
                }
                out[y * w + x] = best < width / 2.0;
            }
        }
        out
    }

    #[test]
    fn horizontal_segment_matches_brute_force() {
        let line = Polyline::new(vec![(0.0, 50.0), (199.0, 50.0)]);
        // Rows are equal, so build without the monotone-row check.
        assert!(line.is_err());
        let line = Polyline::new_unchecked(vec![(0.0, 50.0), (199.0, 50.0)]);
        let m = rasterize_lane_mask(&line, 30.0, 100, 200);
        let want = oracle(line.points(), 30.0, 100, 200);
        assert_eq!(m.bits(), &want[..]);
        // rows 36..=64 are strictly within 15 px of row 50
        assert_eq!(m.count(), 29 * 200);
    }

    #[test]
    fn empty_and_single_point_polylines_draw_nothing() {
        assert_eq!(rasterize_lane_mask(&Polyline::empty(), 30.0, 10, 10).count(), 0);
        let p = Polyline::new(vec![(5.0, 5.0)]).unwrap();
        assert_eq!(rasterize_lane_mask(&p, 30.0, 10, 10).count(), 0);
    }

    #[test]
    fn identical_polylines_identical_masks() {
        let p = Polyline::new(vec![(3.0, 1.0), (10.5, 20.0), (12.0, 30.0)]).unwrap();
        assert_eq!(rasterize_lane(&p, 5.0, 32, 32), rasterize_lane(&p.clone(), 5.0, 32, 32));
    }

    #[test]
    fn off_canvas_lane_is_clipped() {
        let p = Polyline::new(vec![(-50.0, -10.0), (-40.0, 80.0)]).unwrap();
        assert_eq!(rasterize_lane_mask(&p, 4.0, 16, 16).count(), 0);
    }

    fn arb_polyline() -> impl Strategy<Value = (Vec<(f64, f64)>, usize, usize, f64)> {
        (8usize..=64, 8usize..=64, 1.0f64..20.0, 2usize..=5).prop_flat_map(|(h, w, width, n)| {
            (
                prop::collection::vec((-10.0f64..74.0, -10.0f64..74.0), n),
                Just(h),
                Just(w),
                Just(width),
            )
                .prop_map(|(mut pts, h, w, width)| {
                    pts.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
                    pts.dedup_by(|a, b| a.1 == b.1);
                    (pts, h, w, width)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn raster_matches_per_pixel_oracle((pts, h, w, width) in arb_polyline()) {
            let line = Polyline::new(pts.clone()).unwrap();
            let m = rasterize_lane_mask(&line, width, h, w);
            prop_assert_eq!(m.bits(), &oracle(&pts, width, h, w)[..]);
        }

        #[test]
        fn raster_ignores_point_order((pts, h, w, width) in arb_polyline()) {
            let line = Polyline::new(pts).unwrap();
            prop_assert_eq!(
                rasterize_lane_mask(&line, width, h, w),
                rasterize_lane_mask(&line.reversed(), width, h, w)
            );
        }
    }
}
