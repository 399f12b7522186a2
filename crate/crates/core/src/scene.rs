//! Fixed-length multi-agent trajectory blocks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Extent, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Sdd,
    Sports,
    Synthetic,
}

impl DatasetKind {
    /// Unit of world coordinates, used to label reports.
    pub fn unit(self) -> &'static str {
        match self {
            DatasetKind::Sdd => "m",
            DatasetKind::Sports => "ft",
            DatasetKind::Synthetic => "cells",
        }
    }

    pub fn default_frame_rate(self) -> f64 {
        match self {
            DatasetKind::Sdd => 2.5,
            DatasetKind::Sports | DatasetKind::Synthetic => 5.0,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Sdd => "sdd",
            DatasetKind::Sports => "sports",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sdd" => Ok(DatasetKind::Sdd),
            "sports" => Ok(DatasetKind::Sports),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

/// Positions of `n` agents over `T` steps. Absent entries hold `[0, 0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// `positions[agent][step]`.
    pub positions: Vec<Vec<Point>>,
    /// `mask[agent][step]`, true where the agent is present.
    pub mask: Vec<Vec<bool>>,
    pub kind: DatasetKind,
    pub frame_rate: f64,
    pub extent: Extent,
}

impl Scene {
    pub fn new(
        positions: Vec<Vec<Point>>,
        mask: Vec<Vec<bool>>,
        kind: DatasetKind,
        frame_rate: f64,
        extent: Extent,
    ) -> Result<Self> {
        let scene = Self {
            positions,
            mask,
            kind,
            frame_rate,
            extent,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// A scene in which every agent is present at every step.
    pub fn fully_present(
        positions: Vec<Vec<Point>>,
        kind: DatasetKind,
        frame_rate: f64,
        extent: Extent,
    ) -> Result<Self> {
        let mask = positions.iter().map(|p| vec![true; p.len()]).collect();
        Self::new(positions, mask, kind, frame_rate, extent)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::invalid("scene", "no agents"));
        }
        let t = self.positions[0].len();
        if t == 0 {
            return Err(Error::invalid("scene", "no time-steps"));
        }
        if self.mask.len() != self.positions.len() {
            return Err(Error::invalid("scene", "mask and positions disagree on agent count"));
        }
        for (i, (p, m)) in self.positions.iter().zip(&self.mask).enumerate() {
            if p.len() != t || m.len() != t {
                return Err(Error::invalid("scene", format!("agent {i} has a ragged track")));
            }
            for (step, (pt, &present)) in p.iter().zip(m).enumerate() {
                if present && !(pt[0].is_finite() && pt[1].is_finite()) {
                    return Err(Error::invalid(
                        "scene",
                        format!("agent {i} has a non-finite position at step {step}"),
                    ));
                }
                if !present && *pt != [0.0, 0.0] {
                    return Err(Error::invalid(
                        "scene",
                        format!("agent {i} is absent at step {step} but has a position"),
                    ));
                }
            }
        }
        if !self.mask.iter().any(|m| m.iter().all(|&b| b)) {
            return Err(Error::invalid("scene", "no agent is present at every step"));
        }
        Ok(())
    }

    pub fn num_agents(&self) -> usize {
        self.positions.len()
    }

    pub fn len(&self) -> usize {
        self.positions[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positions of all agents at `step`.
    pub fn positions_at(&self, step: usize) -> Vec<Point> {
        self.positions.iter().map(|p| p[step]).collect()
    }

    pub fn present_at(&self, step: usize) -> Vec<bool> {
        self.mask.iter().map(|m| m[step]).collect()
    }

    /// The first `steps` time-steps.
    pub fn prefix(&self, steps: usize) -> Result<Scene> {
        self.window(0, steps)
    }

    /// Steps `[start, start+len)`. Fails if no agent is present throughout.
    pub fn window(&self, start: usize, len: usize) -> Result<Scene> {
        if len == 0 || start + len > self.len() {
            return Err(Error::invalid(
                "scene",
                format!("window {start}..{} exceeds {} steps", start + len, self.len()),
            ));
        }
        Scene::new(
            self.positions.iter().map(|p| p[start..start + len].to_vec()).collect(),
            self.mask.iter().map(|m| m[start..start + len].to_vec()).collect(),
            self.kind,
            self.frame_rate,
            self.extent,
        )
    }

    /// Agent `i` of the result is agent `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Scene {
        Scene {
            positions: perm.iter().map(|&j| self.positions[j].clone()).collect(),
            mask: perm.iter().map(|&j| self.mask[j].clone()).collect(),
            ..self.clone()
        }
    }

    /// Seconds spanned by `steps` time-steps.
    pub fn seconds(&self, steps: usize) -> f64 {
        steps as f64 / self.frame_rate
    }
}
