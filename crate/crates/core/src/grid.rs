//! Goal grid over the scene, sliding-window goal extraction and the
//! absolute/relative coordinate transforms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Point = [f64; 2];

/// Axis-aligned world rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Extent {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(Error::invalid(
                "extent",
                format!("empty extent ({x_min}, {y_min})..({x_max}, {y_max})"),
            ));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Bounding box of `points`, padded by `margin`. Degenerate boxes are
    /// widened to at least one unit per axis.
    pub fn bounding(points: impl IntoIterator<Item = Point>, margin: f64) -> Result<Self> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if !lo[0].is_finite() {
            return Err(Error::invalid("extent", "no points"));
        }
        for a in 0..2 {
            if hi[a] - lo[a] < 1.0 {
                let mid = 0.5 * (hi[a] + lo[a]);
                lo[a] = mid - 0.5;
                hi[a] = mid + 0.5;
            }
        }
        Self::new(lo[0] - margin, lo[1] - margin, hi[0] + margin, hi[1] + margin)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Maps a world point into `[-1, 1]²` relative to this extent.
    pub fn normalize(&self, p: Point) -> Point {
        [
            2.0 * (p[0] - self.x_min) / self.width() - 1.0,
            2.0 * (p[1] - self.y_min) / self.height() - 1.0,
        ]
    }
}

/// Uniform `rows × cols` grid of goal cells over an extent. Cell index is
/// `row * cols + col`, with row 0 at `y_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneGrid {
    pub bounds: Extent,
    pub rows: usize,
    pub cols: usize,
}

impl SceneGrid {
    pub fn new(bounds: Extent, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("grid", "grid needs at least one cell"));
        }
        Ok(Self { bounds, rows, cols })
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Index of the cell containing `p`. Cells are half-open `[lo, hi)`
    /// except along the maximum edges; out-of-bounds points are clamped to
    /// the border cells.
    pub fn position_to_cell(&self, p: Point) -> usize {
        let b = &self.bounds;
        let bucket = |v: f64, lo: f64, span: f64, n: usize| -> usize {
            let f = ((v - lo) / span * n as f64).floor();
            if f.is_nan() || f < 0.0 {
                0
            } else {
                (f as usize).min(n - 1)
            }
        };
        let col = bucket(p[0], b.x_min, b.width(), self.cols);
        let row = bucket(p[1], b.y_min, b.height(), self.rows);
        row * self.cols + col
    }

    pub fn cell_center(&self, cell: usize) -> Point {
        let (row, col) = (cell / self.cols, cell % self.cols);
        let cw = self.bounds.width() / self.cols as f64;
        let ch = self.bounds.height() / self.rows as f64;
        [
            self.bounds.x_min + (col as f64 + 0.5) * cw,
            self.bounds.y_min + (row as f64 + 0.5) * ch,
        ]
    }

    pub fn cell_size(&self) -> Point {
        [
            self.bounds.width() / self.cols as f64,
            self.bounds.height() / self.rows as f64,
        ]
    }

    pub fn one_hot(&self, cell: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.num_cells()];
        v[cell] = 1.0;
        v
    }

    /// Per-step goal cells: step `t` in window `j = t / w` takes the cell of
    /// the position at `min((j+1)·w − 1, T−1)`.
    pub fn goal_cells(&self, trajectory: &[Point], window: usize) -> Result<Vec<usize>> {
        if window == 0 {
            return Err(Error::invalid("extract_goals", "window must be at least 1"));
        }
        let t_len = trajectory.len();
        Ok((0..t_len)
            .map(|t| {
                let anchor = ((t / window + 1) * window - 1).min(t_len - 1);
                self.position_to_cell(trajectory[anchor])
            })
            .collect())
    }

    /// Ground-truth goals as a `[T, K]` one-hot matrix.
    pub fn extract_goals(&self, trajectory: &[Point], window: usize) -> Result<Tensor> {
        let cells = self.goal_cells(trajectory, window)?;
        let k = self.num_cells();
        let mut data = vec![0.0; cells.len() * k];
        for (t, &c) in cells.iter().enumerate() {
            data[t * k + c] = 1.0;
        }
        Tensor::new(&[cells.len(), k], data)
    }
}

/// An absolute anchor and the per-step displacements that follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementSequence {
    pub initial: Point,
    pub displacements: Vec<Point>,
    /// Rounding error of each displacement, `(p[t+1] − p[t]) − displacements[t]`
    /// exactly; lets [`to_absolute`] reproduce the input bit for bit. Empty
    /// means all zero.
    pub residuals: Vec<Point>,
}

impl DisplacementSequence {
    pub fn new(initial: Point, displacements: Vec<Point>) -> Self {
        Self {
            initial,
            displacements,
            residuals: Vec::new(),
        }
    }
}

/// Error-free sum: `s + e == a + b` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

pub fn to_relative(trajectory: &[Point]) -> Result<DisplacementSequence> {
    if trajectory.len() < 2 {
        return Err(Error::invalid(
            "to_relative",
            format!("need at least 2 positions, got {}", trajectory.len()),
        ));
    }
    let mut displacements = Vec::with_capacity(trajectory.len() - 1);
    let mut residuals = Vec::with_capacity(trajectory.len() - 1);
    for w in trajectory.windows(2) {
        let (dx, ex) = two_sum(w[1][0], -w[0][0]);
        let (dy, ey) = two_sum(w[1][1], -w[0][1]);
        displacements.push([dx, dy]);
        residuals.push([ex, ey]);
    }
    Ok(DisplacementSequence {
        initial: trajectory[0],
        displacements,
        residuals,
    })
}

/// Prefix sums of the displacements from the anchor, with each step's
/// residual folded back in.
pub fn to_absolute(seq: &DisplacementSequence) -> Vec<Point> {
    let mut out = Vec::with_capacity(seq.displacements.len() + 1);
    let mut p = seq.initial;
    out.push(p);
    for (t, d) in seq.displacements.iter().enumerate() {
        let e = seq.residuals.get(t).copied().unwrap_or([0.0, 0.0]);
        for k in 0..2 {
            let (s, r) = two_sum(p[k], d[k]);
            p[k] = s + (r + e[k]);
        }
        out.push(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(rows: usize, cols: usize) -> SceneGrid {
        SceneGrid::new(Extent::new(0.0, 0.0, 1.0, 1.0).unwrap(), rows, cols).unwrap()
    }

    #[test]
    fn relative_by_hand() {
        let seq = to_relative(&[[0.0, 0.0], [1.0, 1.0], [3.0, 2.0]]).unwrap();
        assert_eq!(seq.initial, [0.0, 0.0]);
        assert_eq!(seq.displacements, vec![[1.0, 1.0], [2.0, 1.0]]);
    }

    #[test]
    fn stationary_has_zero_displacements() {
        let seq = to_relative(&[[2.5, -1.0]; 6]).unwrap();
        assert!(seq.displacements.iter().all(|d| *d == [0.0, 0.0]));
    }

    #[test]
    fn relative_needs_two_points() {
        assert!(to_relative(&[[0.0, 0.0]]).is_err());
        assert!(to_relative(&[]).is_err());
    }

    #[test]
    fn absolute_by_hand() {
        let seq = DisplacementSequence::new([0.0, 0.0], vec![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(to_absolute(&seq), vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]);
        let single = DisplacementSequence::new([4.0, 5.0], vec![]);
        assert_eq!(to_absolute(&single), vec![[4.0, 5.0]]);
    }

    #[test]
    fn roundtrip_exact_across_zero() {
        let t = [[-0.1, 0.3], [0.3, -0.1], [1e5 + 0.3, 0.1], [-1e5, 1e-13]];
        assert_ne!(-0.1 + (0.3 - (-0.1)), 0.3);
        let seq = to_relative(&t).unwrap();
        assert_eq!(seq.displacements[0][0], 0.3 - (-0.1));
        assert_eq!(to_absolute(&seq), t.to_vec());
    }

    #[test]
    fn cell_bucketing() {
        let g = unit_grid(2, 2);
        assert_eq!(g.position_to_cell([0.25, 0.25]), 0);
        assert_eq!(g.position_to_cell([0.75, 0.25]), 1);
        assert_eq!(g.position_to_cell([0.25, 0.75]), 2);
        assert_eq!(g.position_to_cell([1.0, 1.0]), 3);
        assert_eq!(g.position_to_cell([-10.0, -10.0]), 0);
        assert_eq!(g.position_to_cell([10.0, -10.0]), 1);
        assert_eq!(g.position_to_cell([0.0, 0.0]), 0);
        assert_eq!(g.position_to_cell([f64::NAN, 0.9]), 2);
    }

    #[test]
    fn cell_centers_map_back() {
        let g = SceneGrid::new(Extent::new(-47.0, -25.0, 47.0, 25.0).unwrap(), 5, 10).unwrap();
        for c in 0..g.num_cells() {
            assert_eq!(g.position_to_cell(g.cell_center(c)), c);
        }
    }

    #[test]
    fn window_walk() {
        let g = unit_grid(2, 2);
        // cell 0 for the first two steps, cell 3 afterwards
        let traj = [[0.1, 0.1], [0.2, 0.2], [0.8, 0.8], [0.9, 0.9]];
        let cells = g.goal_cells(&traj, 2).unwrap();
        let c1 = g.position_to_cell(traj[1]);
        let c3 = g.position_to_cell(traj[3]);
        assert_eq!(cells, vec![c1, c1, c3, c3]);
        assert_eq!(cells, vec![0, 0, 3, 3]);
    }

    #[test]
    fn oversized_window_uses_final_position() {
        let g = unit_grid(3, 3);
        let traj = [[0.1, 0.1], [0.5, 0.5], [0.95, 0.1]];
        let last = g.position_to_cell(traj[2]);
        for w in [3, 4, 100] {
            assert_eq!(g.goal_cells(&traj, w).unwrap(), vec![last; 3]);
        }
    }

    #[test]
    fn trailing_partial_window_anchors_on_last_step() {
        let g = unit_grid(1, 5);
        let traj: Vec<Point> = (0..5).map(|i| [i as f64 * 0.2 + 0.1, 0.5]).collect();
        assert_eq!(g.goal_cells(&traj, 2).unwrap(), vec![1, 1, 3, 3, 4]);
    }

    #[test]
    fn stationary_goals_are_constant() {
        let g = unit_grid(4, 4);
        let traj = [[0.6, 0.3]; 9];
        let onehot = g.extract_goals(&traj, 4).unwrap();
        let cell = g.position_to_cell(traj[0]);
        for t in 0..9 {
            assert_eq!(onehot.row(t), g.one_hot(cell).as_slice());
        }
    }

    #[test]
    fn zero_window_rejected() {
        assert!(unit_grid(2, 2).goal_cells(&[[0.0, 0.0]], 0).is_err());
    }

    #[test]
    fn bad_extents_rejected() {
        assert!(Extent::new(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(Extent::new(0.0, 2.0, 1.0, 1.0).is_err());
        assert!(SceneGrid::new(Extent::new(0.0, 0.0, 1.0, 1.0).unwrap(), 0, 3).is_err());
    }
}
