use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_transfer, write_json, EditMode, JobMetrics, PipelineConfig, Portrait, TransferTuple};
use crate::curation::{Category, TupleRecord};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::generator::GeneratorBackend;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub id: String,
    pub category: Category,
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<JobMetrics>,
}

/// Means over the succeeded jobs of one category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAggregate {
    pub jobs: usize,
    pub succeeded: usize,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_latent_distance: Option<f64>,
    pub mean_hair_iou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub jobs: Vec<JobOutcome>,
    pub categories: BTreeMap<Category, CategoryAggregate>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl BatchReport {
    fn aggregate(jobs: Vec<JobOutcome>) -> Self {
        let mut by_cat: BTreeMap<Category, Vec<&JobOutcome>> = BTreeMap::new();
        for j in &jobs {
            by_cat.entry(j.category).or_default().push(j);
        }
        let categories = by_cat
            .into_iter()
            .map(|(cat, js)| {
                let ok: Vec<&JobMetrics> = js.iter().filter_map(|j| j.metrics.as_ref()).collect();
                let agg = CategoryAggregate {
                    jobs: js.len(),
                    succeeded: ok.len(),
                    mean_psnr: mean(ok.iter().map(|m| m.report.psnr)),
                    mean_ssim: mean(ok.iter().map(|m| m.report.ssim)),
                    mean_latent_distance: mean(ok.iter().map(|m| m.report.latent_distance)),
                    mean_hair_iou: mean(ok.iter().filter_map(|m| m.report.hair_iou)),
                };
                (cat, agg)
            })
            .collect();
        Self { jobs, categories }
    }

    pub fn failed(&self) -> usize {
        self.jobs.iter().filter(|j| j.status == JobStatus::Failed).count()
    }
}

fn load_tuple(data_dir: &Path, r: &TupleRecord) -> Result<TransferTuple> {
    Ok(TransferTuple {
        id: r.id.clone(),
        identity: Portrait::load_record(data_dir, &r.identity)?,
        shape: Portrait::load_record(data_dir, &r.shape)?,
        appearance: Portrait::load_record(data_dir, &r.appearance)?,
    })
}

/// Runs every record on a pool of `jobs` workers. Each job writes under
/// `out_root/<tuple id>/`; a failing job is reported without affecting the
/// others. The report (also written to `out_root/batch_report.json`) lists
/// jobs in record-id order.
#[allow(clippy::too_many_arguments)]
pub fn run_batch(
    records: &[TupleRecord],
    data_dir: &Path,
    config: &PipelineConfig,
    generator: &dyn GeneratorBackend,
    extractor: &dyn FeatureExtractor,
    jobs: usize,
    mode: EditMode,
    out_root: &Path,
) -> Result<BatchReport> {
    if jobs == 0 {
        return Err(Error::InvalidParameter("jobs must be >= 1".into()));
    }
    let mut records: Vec<&TupleRecord> = records.iter().collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::InvalidParameter(format!("duplicate tuple id {}", w[0].id)));
    }
    std::fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build worker pool: {e}")))?;
    let outcomes: Vec<JobOutcome> = pool.install(|| {
        records
            .par_iter()
            .map(|r| {
                let run = load_tuple(data_dir, r).and_then(|t| {
                    run_transfer(t, mode, generator, extractor, config, &out_root.join(&r.id))
                });
                match run {
                    Ok(res) => JobOutcome {
                        id: r.id.clone(),
                        category: r.category,
                        status: JobStatus::Succeeded,
                        error: None,
                        metrics: Some(res.metrics),
                    },
                    Err(e) => JobOutcome {
                        id: r.id.clone(),
                        category: r.category,
                        status: JobStatus::Failed,
                        error: Some(e.to_string()),
                        metrics: None,
                    },
                }
            })
            .collect()
    });
    let report = BatchReport::aggregate(outcomes);
    write_json(&out_root.join("batch_report.json"), &report)?;
    Ok(report)
}
