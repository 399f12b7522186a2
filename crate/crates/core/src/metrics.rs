//! Average and final displacement errors.

use crate::error::{Error, Result};
use crate::grid::Point;

fn check_shapes(op: &'static str, predicted: &[Vec<Point>], truth: &[Vec<Point>], mask: &[Vec<bool>]) -> Result<()> {
    let rows = |v: &[Vec<Point>]| v.iter().map(Vec::len).collect::<Vec<_>>();
    let mask_rows: Vec<usize> = mask.iter().map(Vec::len).collect();
    if rows(predicted) != rows(truth) || rows(truth) != mask_rows {
        return Err(Error::ShapeMismatch {
            op,
            lhs: rows(predicted),
            rhs: rows(truth),
        });
    }
    Ok(())
}

fn distance(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Mean Euclidean error over the valid `(agent, step)` pairs.
pub fn ade(predicted: &[Vec<Point>], truth: &[Vec<Point>], mask: &[Vec<bool>]) -> Result<f64> {
    check_shapes("ade", predicted, truth, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, t), m) in predicted.iter().zip(truth).zip(mask) {
        for ((&a, &b), &valid) in p.iter().zip(t).zip(m) {
            if valid {
                sum += distance(a, b);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("ade", "no valid entries"));
    }
    Ok(sum / count as f64)
}

/// Mean Euclidean error at the final step over agents valid there.
pub fn fde(predicted: &[Vec<Point>], truth: &[Vec<Point>], mask: &[Vec<bool>]) -> Result<f64> {
    check_shapes("fde", predicted, truth, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, t), m) in predicted.iter().zip(truth).zip(mask) {
        if let (Some(&a), Some(&b), Some(&true)) = (p.last(), t.last(), m.last()) {
            sum += distance(a, b);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("fde", "no valid final entries"));
    }
    Ok(sum / count as f64)
}
