use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// A detected lane marking as a list of `(x, y)` points.
pub type Polyline = Vec<[f32; 2]>;

/// Fixed-size lane descriptor: one `(x1, y1, x2, y2)` segment per lane,
/// zero rows past `count`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneInput {
    pub rows: Vec<[f32; 4]>,
    pub count: usize,
}

impl LaneInput {
    pub fn empty(max_lanes: usize) -> Self {
        Self {
            rows: vec![[0.0; 4]; max_lanes],
            count: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.rows.len()
    }

    pub fn flattened(&self) -> Vec<f32> {
        self.rows.iter().flatten().copied().collect()
    }
}

fn polyline_length(line: &[[f32; 2]]) -> f64 {
    line.windows(2)
        .map(|w| {
            let dx = (w[1][0] - w[0][0]) as f64;
            let dy = (w[1][1] - w[0][1]) as f64;
            dx.hypot(dy)
        })
        .sum()
}

/// Total-least-squares segment through the points, clipped to their extent.
/// The endpoint with the smaller `y` (then smaller `x`) comes first.
fn fit_segment(line: &[[f32; 2]]) -> [f32; 4] {
    let n = line.len() as f64;
    let (mx, my) = line.iter().fold((0.0, 0.0), |(sx, sy), p| {
        (sx + p[0] as f64 / n, sy + p[1] as f64 / n)
    });
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in line {
        let dx = p[0] as f64 - mx;
        let dy = p[1] as f64 - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (dx, dy) = (theta.cos(), theta.sin());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in line {
        let t = (p[0] as f64 - mx) * dx + (p[1] as f64 - my) * dy;
        lo = lo.min(t);
        hi = hi.max(t);
    }
    let a = [mx + lo * dx, my + lo * dy];
    let b = [mx + hi * dx, my + hi * dy];
    let (first, second) = if (a[1], a[0]) <= (b[1], b[0]) {
        (a, b)
    } else {
        (b, a)
    };
    [
        first[0] as f32,
        first[1] as f32,
        second[0] as f32,
        second[1] as f32,
    ]
}

fn row_cmp(a: &[f32; 4], b: &[f32; 4]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Summarizes up to `max_lanes` polylines, longest first, into a [`LaneInput`].
/// Empty polylines are ignored; ties in length are ordered by segment
/// coordinates so the result does not depend on input order.
pub fn encode_lanes(polylines: &[Polyline], max_lanes: usize) -> LaneInput {
    let mut fitted: Vec<(f64, [f32; 4])> = polylines
        .iter()
        .filter(|l| !l.is_empty())
        .map(|l| (polyline_length(l), fit_segment(l)))
        .collect();
    fitted.sort_by(|(la, ra), (lb, rb)| lb.total_cmp(la).then_with(|| row_cmp(ra, rb)));
    fitted.truncate(max_lanes);
    let mut out = LaneInput::empty(max_lanes);
    out.count = fitted.len();
    for (slot, (_, row)) in out.rows.iter_mut().zip(fitted) {
        *slot = row;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn no_lanes_gives_zero_input() {
        let out = encode_lanes(&[], 20);
        assert_eq!(out.count, 0);
        assert_eq!(out.rows.len(), 20);
        assert!(out.flattened().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_lane_fits_its_endpoints() {
        let line: Polyline = (0..=10).map(|i| [160.0, 100.0 + 20.0 * i as f32]).collect();
        let out = encode_lanes(&[line], 20);
        assert_eq!(out.count, 1);
        let r = out.rows[0];
        for (got, want) in r.iter().zip([160.0, 100.0, 160.0, 300.0]) {
            assert!((got - want).abs() < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn diagonal_lane_endpoints_match_least_squares_oracle() {
        // points exactly on y = 2x + 5, so the fit is the line itself
        let line: Polyline = [0.0f32, 3.0, 7.0, 10.0]
            .iter()
            .map(|&x| [x, 2.0 * x + 5.0])
            .collect();
        let r = encode_lanes(&[line], 4).rows[0];
        for (got, want) in r.iter().zip([0.0, 5.0, 10.0, 25.0]) {
            assert!((got - want).abs() < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn keeps_the_longest_lanes() {
        let lanes: Vec<Polyline> = (0..25)
            .map(|i| vec![[i as f32, 0.0], [i as f32, 10.0 + i as f32]])
            .collect();
        let out = encode_lanes(&lanes, 20);
        assert_eq!(out.count, 20);
        let xs: Vec<f32> = out.rows.iter().map(|r| r[0]).collect();
        let want: Vec<f32> = (5..25).rev().map(|i| i as f32).collect();
        assert_eq!(xs, want);
    }

    #[test]
    fn empty_polylines_are_skipped() {
        let out = encode_lanes(&[vec![], vec![[1.0, 2.0], [1.0, 4.0]]], 3);
        assert_eq!(out.count, 1);
        assert_eq!(out.rows[1], [0.0; 4]);
    }

    proptest! {
        #[test]
        fn encoding_ignores_input_order(
            lanes in prop::collection::vec(
                prop::collection::vec((0.0f32..320.0, 0.0f32..320.0).prop_map(|(x, y)| [x, y]), 1..6),
                0..30,
            ),
            seed in any::<u64>(),
        ) {
            let mut shuffled = lanes.clone();
            let mut state = seed;
            for i in (1..shuffled.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            let a = encode_lanes(&lanes, 20);
            let b = encode_lanes(&shuffled, 20);
            prop_assert_eq!(a.count, lanes.len().min(20));
            prop_assert_eq!(a, b);
            let tail_zero = encode_lanes(&lanes, 20).rows[lanes.len().min(20)..].iter().all(|r| *r == [0.0; 4]);
            prop_assert!(tail_zero);
        }
    }
}
