use std::path::Path;

use serde::{Deserialize, Serialize};

use super::evaluate;
use crate::dape::PeStrategy;
use crate::error::{Error, Result};
use crate::harness::{train, RunConfig};
use crate::losses::LossWeights;
use crate::synthbench::Dataset;

/// Grid of positional strategies × loss weightings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub strategies: Vec<PeStrategy>,
    pub weights: Vec<LossWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub pe: PeStrategy,
    pub concept: f64,
    pub pos: f64,
    pub zs_acc: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub sla: f64,
    pub final_loss: f64,
}

/// Trains and tests every grid cell under the recipe in `base`.
pub fn run_ablation(
    base: &RunConfig,
    grid: &AblationSpec,
    data: &Dataset,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if grid.strategies.is_empty() || grid.weights.is_empty() {
        return Err(Error::config("ablation", "grid needs at least one strategy and one weighting"));
    }
    let mut rows = Vec::new();
    for &pe in &grid.strategies {
        for w in &grid.weights {
            w.validate()?;
            let mut cfg = base.clone();
            cfg.pe = pe;
            cfg.loss = *w;
            let (state, logs) = train(cfg, data, |_| {})?;
            let s = evaluate(&state.model, &data.test, &base.eval)?;
            let row = AblationRow {
                pe,
                concept: w.concept,
                pos: w.pos,
                zs_acc: s.zs_acc,
                recall_at_1: s.recall_at(1),
                recall_at_5: s.recall_at(5),
                recall_at_10: s.recall_at(10),
                sla: s.sla,
                final_loss: logs.last().map_or(f64::NAN, |l| l.loss.total),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("pe\tconcept\tpos\tzs_acc\trecall_at_1\trecall_at_5\trecall_at_10\tsla\tfinal_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.6}\n",
            r.pe, r.concept, r.pos, r.zs_acc, r.recall_at_1, r.recall_at_5, r.recall_at_10, r.sla, r.final_loss
        ));
    }
    out
}

/// Writes `ablation.tsv` and `ablation.jsonl` into `dir`.
pub fn write_ablation(rows: &[AblationRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tsv = dir.join("ablation.tsv");
    std::fs::write(&tsv, ablation_tsv(rows)).map_err(|e| Error::io(&tsv, e))?;
    let jsonl = dir.join("ablation.jsonl");
    let body: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain struct") + "\n")
        .collect();
    std::fs::write(&jsonl, body).map_err(|e| Error::io(&jsonl, e))
}
