//! Trains and evaluates the three model variants on identical data and
//! seeds.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::Splits;
use crate::error::Result;
use crate::eval::{evaluate, EvalConfig, EvalReport, ModelPredictor};
use crate::model::{Model, ModelVariant};
use crate::scene::Scene;
use crate::train::{fit, train_run, TrainOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: ModelVariant,
    pub report: EvalReport,
}

impl AblationRow {
    /// Attention over neighbouring agents.
    pub fn agents_interact(&self) -> bool {
        self.variant.refines_hidden()
    }

    /// Goal objective and goal refinement.
    pub fn future_objective(&self) -> bool {
        self.variant.uses_goals()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn mark(flag: bool) -> &'static str {
    if flag {
        "✓"
    } else {
        "✗"
    }
}

impl AblationTable {
    /// Tab-separated table: one row per variant, an ADE and an FDE column
    /// per split.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("model\tagents_interact\tfuture_objective");
        if let Some(first) = self.rows.first() {
            let _ = write!(out, "\tunit");
            for s in &first.report.splits {
                let _ = write!(out, "\tade_{}-{}\tfde_{}-{}", s.obs, s.pred, s.obs, s.pred);
            }
            let _ = write!(out, "\tn_scenes\tn_agents");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}",
                row.variant.display_name(),
                mark(row.agents_interact()),
                mark(row.future_objective()),
                row.report.unit
            );
            for s in &row.report.splits {
                let _ = write!(out, "\t{:.4}\t{:.4}", s.ade, s.fde);
            }
            let _ = writeln!(out, "\t{}\t{}", row.report.n_scenes, row.report.n_agents);
        }
        out
    }

    pub fn row(&self, variant: ModelVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Trains each variant from `cfg` (only the variant differs) on
/// `data.train`, selects on `data.val`, evaluates on `data.test`. With
/// `out_dir`, each variant's log and checkpoint go to `out_dir/<variant>`.
pub fn run_ablation(
    cfg: &RunConfig,
    data: &Splits<Scene>,
    eval: &EvalConfig,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(ModelVariant::ALL.len());
    for variant in ModelVariant::ALL {
        let run = RunConfig {
            variant,
            ..cfg.clone()
        };
        run.validate()?;
        let (model, store) = match out_dir {
            Some(dir) => {
                let art = train_run(&run, &data.train, &data.val, &dir.join(variant.to_string()))?;
                (art.model, art.outcome.best)
            }
            None => {
                let (model, store) = Model::init(run.model_config(), run.seed)?;
                let out = fit(&model, store, &data.train, &data.val, &TrainOptions::from_config(&run), &mut |_| Ok(()))?;
                (model, out.best)
            }
        };
        let predictor = ModelPredictor {
            model: &model,
            store: &store,
            sample: run.sample,
            ground_truth_goals: run.eval_ground_truth_goals,
        };
        let report = evaluate(&predictor, variant.display_name(), &data.test, run.dataset, eval)?;
        rows.push(AblationRow { variant, report });
    }
    Ok(AblationTable { rows })
}
