//! SVG rendering of a roll-out: observed prefix in black, ground truth in
//! blue, prediction in red.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Extent, Point, SceneGrid};
use crate::model::Rollout;
use crate::scene::Scene;

pub const OBSERVED_COLOR: &str = "black";
pub const TRUTH_COLOR: &str = "blue";
pub const PREDICTION_COLOR: &str = "red";
const CANVAS: f64 = 600.0;
const MARGIN: f64 = 20.0;

struct Canvas {
    extent: Extent,
    scale: f64,
    width: f64,
    height: f64,
}

impl Canvas {
    fn new(extent: Extent) -> Self {
        let scale = (CANVAS - 2.0 * MARGIN) / extent.width().max(extent.height());
        Self {
            extent,
            scale,
            width: extent.width() * scale + 2.0 * MARGIN,
            height: extent.height() * scale + 2.0 * MARGIN,
        }
    }

    /// World y grows upwards, SVG y downwards.
    fn map(&self, p: Point) -> (f64, f64) {
        (
            MARGIN + (p[0] - self.extent.x_min) * self.scale,
            MARGIN + (self.extent.y_max - p[1]) * self.scale,
        )
    }

    fn polyline(&self, out: &mut String, class: &str, color: &str, points: &[Point]) {
        let coords: Vec<String> = points
            .iter()
            .map(|&p| {
                let (x, y) = self.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="{class}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
    }
}

/// Renders agents present at step `obs − 1`. The truth line holds the
/// `pred` ground-truth positions after the prefix and is drawn only for
/// agents present throughout.
pub fn render_svg(scene: &Scene, rollout: &Rollout, obs: usize, grid: Option<&SceneGrid>) -> Result<String> {
    let pred = rollout.predicted.first().map_or(0, Vec::len);
    if obs == 0 || scene.len() < obs + pred || rollout.predicted.len() != scene.num_agents() {
        return Err(Error::invalid(
            "render_svg",
            "roll-out does not match the scene's agents and steps",
        ));
    }
    let canvas = Canvas::new(scene.extent);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.2} {:.2}">"#,
        canvas.width, canvas.height, canvas.width, canvas.height
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if let Some(grid) = grid {
        let e = grid.bounds;
        let size = grid.cell_size();
        let _ = writeln!(out, r#"<g class="grid" stroke="lightgray" stroke-width="1">"#);
        for c in 0..=grid.cols {
            let x = e.x_min + c as f64 * size[0];
            let (x0, y0) = canvas.map([x, e.y_min]);
            let (x1, y1) = canvas.map([x, e.y_max]);
            let _ = writeln!(out, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}"/>"#);
        }
        for r in 0..=grid.rows {
            let y = e.y_min + r as f64 * size[1];
            let (x0, y0) = canvas.map([e.x_min, y]);
            let (x1, y1) = canvas.map([e.x_max, y]);
            let _ = writeln!(out, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}"/>"#);
        }
        let _ = writeln!(out, "</g>");
    }
    for (i, track) in scene.positions.iter().enumerate() {
        if !rollout.present[i] {
            continue;
        }
        let mask = &scene.mask[i];
        let observed: Vec<Point> = (0..obs).filter(|&t| mask[t]).map(|t| track[t]).collect();
        canvas.polyline(&mut out, "observed", OBSERVED_COLOR, &observed);
        if mask[obs..obs + pred].iter().all(|&m| m) {
            canvas.polyline(&mut out, "truth", TRUTH_COLOR, &track[obs..obs + pred]);
        }
        canvas.polyline(&mut out, "prediction", PREDICTION_COLOR, &rollout.predicted[i]);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn plot_rollout(
    scene: &Scene,
    rollout: &Rollout,
    obs: usize,
    grid: Option<&SceneGrid>,
    path: &Path,
) -> Result<()> {
    let svg = render_svg(scene, rollout, obs, grid)?;
    fs::write(path, svg).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
