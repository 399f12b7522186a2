//! Run configuration: per-dataset presets, overridable from a flat TOML
//! file and from `key = value` strings.
//!
//! Every field of [`RunConfig`] is a valid key. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, SyntheticConfig, Team};
use crate::error::{Error, Result};
use crate::model::{GoalGraph, ModelConfig, ModelVariant};
use crate::nn::Activation;
use crate::scene::{DatasetKind, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    /// TrajNet file or directory (sdd), play file (sports); unused for
    /// synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    /// `atk` or `def`, sports only.
    pub team: String,
    pub variant: ModelVariant,
    pub obs: usize,
    pub pred: usize,
    /// Window advance when segmenting TrajNet recordings.
    pub stride: usize,
    pub learning_rate: f64,
    /// Scenes per Adam step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many Adam steps; 0 means no cap.
    pub max_steps: usize,
    pub clip_norm: f64,
    pub ce_weight: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub goal_window: usize,
    pub adjacency_threshold: f64,
    pub goal_graph: GoalGraph,
    pub graph_hidden: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub head_dim: usize,
    pub activation: Activation,
    pub displacement_scale: f64,
    pub teacher_forcing: bool,
    /// Condition the evaluation burn-in on ground-truth goals.
    pub eval_ground_truth_goals: bool,
    pub sample: bool,
    /// Seeds initialisation, batching and latent noise.
    pub seed: u64,
    /// Seeds synthetic generation and the train/val/test split.
    pub data_seed: u64,
    pub synth_scenes: usize,
    pub synth_agents: usize,
    pub synth_coordination: f64,
    pub synth_noise: f64,
    pub synth_segments: usize,
}

impl RunConfig {
    /// Defaults for a dataset: full-scale settings for urban (sdd) and sports
    /// data, desk-scale settings for synthetic data.
    pub fn preset(dataset: DatasetKind) -> Self {
        let base = Self {
            dataset,
            data_path: None,
            team: "atk".into(),
            variant: ModelVariant::Dagnet,
            obs: 8,
            pred: 12,
            stride: 20,
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 500,
            max_steps: 0,
            clip_norm: 10.0,
            ce_weight: 1e-2,
            grid_rows: 10,
            grid_cols: 10,
            goal_window: 4,
            adjacency_threshold: 3.0,
            goal_graph: GoalGraph::Complete,
            graph_hidden: 4,
            feature_dim: 64,
            hidden_dim: 64,
            latent_dim: 32,
            head_dim: 64,
            activation: Activation::Relu,
            displacement_scale: 1.0,
            teacher_forcing: true,
            eval_ground_truth_goals: false,
            sample: false,
            seed: 0,
            data_seed: 0,
            synth_scenes: 200,
            synth_agents: 5,
            synth_coordination: 1.0,
            synth_noise: 0.02,
            synth_segments: 2,
        };
        match dataset {
            DatasetKind::Sdd => base,
            DatasetKind::Sports => Self {
                obs: 10,
                pred: 40,
                learning_rate: 1e-3,
                batch_size: 64,
                epochs: 300,
                grid_rows: 5,
                grid_cols: 10,
                goal_window: 10,
                adjacency_threshold: 5.0,
                graph_hidden: 8,
                ..base
            },
            DatasetKind::Synthetic => Self {
                learning_rate: 1e-3,
                batch_size: 8,
                epochs: 40,
                grid_rows: 6,
                grid_cols: 8,
                goal_window: 5,
                adjacency_threshold: 2.0,
                graph_hidden: 8,
                displacement_scale: 0.25,
                ..base
            },
        }
    }

    /// Preset for the dataset named in `text` (or `fallback`), then every
    /// key of `text` applied on top.
    pub fn from_toml_str(text: &str, fallback: DatasetKind) -> Result<Self> {
        Self::from_sources(Some(text), None, fallback)
    }

    /// Preset for `dataset`, else the dataset named in `text`, else
    /// `fallback`; then the keys of `text` on top.
    pub fn from_sources(text: Option<&str>, dataset: Option<DatasetKind>, fallback: DatasetKind) -> Result<Self> {
        let mut table: toml::Table = match text {
            Some(t) => t.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        let named = match table.remove("dataset") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| Error::Config("`dataset` must be a string".into()))?
                    .parse()?,
            ),
            None => None,
        };
        let mut cfg = Self::preset(dataset.or(named).unwrap_or(fallback));
        cfg.merge(table)?;
        Ok(cfg)
    }

    /// Reads an optional config file and resolves it as [`Self::from_sources`].
    pub fn resolve(path: Option<&Path>, dataset: Option<DatasetKind>) -> Result<Self> {
        let text = match path {
            Some(p) => Some(
                fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?,
            ),
            None => None,
        };
        Self::from_sources(text.as_deref(), dataset, DatasetKind::Sdd).map_err(|e| match (e, path) {
            (Error::Config(msg), Some(p)) => Error::Config(format!("{}: {msg}", p.display())),
            (other, _) => other,
        })
    }

    /// Applies `key = value` where `value` is TOML; bare words that are not
    /// valid TOML are taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut table = toml::Table::new();
        table.insert(key.to_string(), parsed);
        self.merge(table)
    }

    fn merge(&mut self, overrides: toml::Table) -> Result<()> {
        let mut current = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            current.insert(k, v);
        }
        let merged: RunConfig = current
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        merged.validate()?;
        *self = merged;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs == 0 || self.pred == 0 {
            return Err(Error::Config("obs and pred must be at least 1".into()));
        }
        if self.batch_size == 0 || self.stride == 0 {
            return Err(Error::Config("batch_size and stride must be at least 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config("learning_rate and clip_norm must be positive".into()));
        }
        if self.team != "atk" && self.team != "def" {
            return Err(Error::Config(format!("team must be atk or def, got `{}`", self.team)));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            goal_window: self.goal_window,
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            latent_dim: self.latent_dim,
            head_dim: self.head_dim,
            graph_hidden: self.graph_hidden,
            activation: self.activation,
            displacement_scale: self.displacement_scale,
            adjacency_threshold: self.adjacency_threshold,
            goal_graph: self.goal_graph,
            ce_weight: self.ce_weight,
            teacher_forcing: self.teacher_forcing,
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.data_seed,
            n_scenes: self.synth_scenes,
            n_agents: self.synth_agents,
            steps: self.obs + self.pred,
            coordination: self.synth_coordination,
            noise: self.synth_noise,
            grid_rows: self.grid_rows,
            grid_cols: self.grid_cols,
            segments: self.synth_segments,
        }
    }

    pub fn team(&self) -> Result<Team> {
        self.team.parse()
    }

    /// Loads or generates every scene of the configured dataset. Urban
    /// recordings are cut into `obs + pred` windows; plays keep their full
    /// length.
    pub fn load_scenes(&self) -> Result<Vec<Scene>> {
        self.load_scenes_with_window(self.obs + self.pred)
    }

    /// As [`Self::load_scenes`] with urban windows of `window` steps and
    /// synthetic scenes of at least that length.
    pub fn load_scenes_with_window(&self, window: usize) -> Result<Vec<Scene>> {
        let path = || {
            self.data_path
                .as_deref()
                .ok_or_else(|| Error::Config(format!("dataset `{}` needs data_path", self.dataset)))
        };
        match self.dataset {
            DatasetKind::Sdd => data::load_trajnet_dir(
                path()?,
                window,
                0,
                self.stride,
                DatasetKind::Sdd.default_frame_rate(),
            ),
            DatasetKind::Sports => {
                let team = self.team()?;
                let plays = data::normalize_plays(&data::load_plays(path()?)?);
                plays.iter().map(|p| data::split_team(p, team)).collect()
            }
            DatasetKind::Synthetic => data::generate_synthetic(&SyntheticConfig {
                steps: window.max(self.obs + self.pred),
                ..self.synthetic_config()
            }),
        }
    }
}

/// Parses `a-b,c-d,...` into `(obs, pred)` pairs.
pub fn parse_splits(text: &str) -> Result<Vec<(usize, usize)>> {
    let splits = text
        .split(',')
        .map(|part| {
            let (a, b) = part
                .trim()
                .split_once('-')
                .ok_or_else(|| Error::Config(format!("split `{part}` is not obs-pred")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&v| v > 0)
                    .ok_or_else(|| Error::Config(format!("bad step count `{s}` in `{part}`")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect::<Result<Vec<_>>>()?;
    if splits.is_empty() {
        return Err(Error::Config("no splits given".into()));
    }
    Ok(splits)
}
