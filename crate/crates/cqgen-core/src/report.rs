//! CSV and JSON report emission: per-instance metric tables with an
//! aggregate mean row, the per-step training log, the attention-weight
//! trace behind `inspect-weights`, and text-metric tables.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::retrieval::MetricReport;

#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub instance_id: String,
    pub model: String,
    pub protocol: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Debug, Serialize)]
struct MetricsDocument<'a> {
    per_instance: &'a [MetricRow],
    mean: Vec<MetricRow>,
}

fn mean_rows(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut keys: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r.model.clone(), r.protocol.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(model, protocol)| {
            let group: Vec<MetricReport> = rows
                .iter()
                .filter(|r| r.model == model && r.protocol == protocol)
                .map(|r| r.report)
                .collect();
            MetricRow {
                instance_id: "mean".to_string(),
                model,
                protocol,
                report: MetricReport::mean(&group),
            }
        })
        .collect()
}

/// Writes `metrics.csv` (one row per instance plus one mean row per
/// model/protocol group) and `metrics.json`.
pub fn write_metric_reports(
    csv_path: impl AsRef<Path>,
    json_path: impl AsRef<Path>,
    rows: &[MetricRow],
) -> Result<()> {
    let means = mean_rows(rows);

    let mut csv = std::fs::File::create(csv_path)?;
    writeln!(
        csv,
        "instance_id,model,protocol,map,rprec,mrr,mrr_at_10,ndcg,precision_at_k"
    )?;
    for row in rows.iter().chain(means.iter()) {
        let r = &row.report;
        writeln!(
            csv,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            row.instance_id,
            row.model,
            row.protocol,
            r.map,
            r.rprec,
            r.mrr,
            r.mrr_at_10,
            r.ndcg,
            r.precision_at_k
        )?;
    }

    let doc = MetricsDocument {
        per_instance: rows,
        mean: means,
    };
    let mut json = std::fs::File::create(json_path)?;
    serde_json::to_writer_pretty(&mut json, &doc)?;
    json.write_all(b"\n")?;
    Ok(())
}

/// One row per coordinator training step.
#[derive(Debug, Clone)]
pub struct TrainingLogRow {
    pub step: usize,
    pub reward: f64,
    pub baseline: f64,
    pub l_pg: f64,
    pub l_scr: f64,
    pub l_h: f64,
    pub l_total: f64,
    pub gate_rate: f64,
    pub fallback_rate: f64,
}

pub fn write_training_log(path: impl AsRef<Path>, rows: &[TrainingLogRow]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(
        file,
        "step,R,R_baseline,L_PG,L_SCR,L_H,L_total,gate_rate,fallback_rate"
    )?;
    for r in rows {
        writeln!(
            file,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.step,
            r.reward,
            r.baseline,
            r.l_pg,
            r.l_scr,
            r.l_h,
            r.l_total,
            r.gate_rate,
            r.fallback_rate
        )?;
    }
    Ok(())
}

/// One row per (step, document) in a decoded trace: the attention weight of
/// that document and the step's eta.
#[derive(Debug, Clone)]
pub struct WeightsTraceRow {
    pub step: usize,
    pub token: String,
    pub position_index: usize,
    pub set: &'static str,
    pub weight: f64,
    pub eta: f64,
}

pub fn write_weights_trace(path: impl AsRef<Path>, rows: &[WeightsTraceRow]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "step,token,position_index,set,weight,eta")?;
    for r in rows {
        writeln!(
            file,
            "{},{},{},{},{:.6},{:.6}",
            r.step, r.token, r.position_index, r.set, r.weight, r.eta
        )?;
    }
    Ok(())
}

/// One row per (instance, model) with BLEU-1..4 and ROUGE-L.
#[derive(Debug, Clone)]
pub struct TextMetricsRow {
    pub instance_id: String,
    pub model: String,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
}

pub fn write_text_metrics(path: impl AsRef<Path>, rows: &[TextMetricsRow]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "instance_id,model,BL-1,BL-2,BL-3,BL-4,ROUGE_L")?;
    for r in rows {
        writeln!(
            file,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.instance_id, r.model, r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.rouge_l
        )?;
    }
    Ok(())
}
