//! Benchmark evaluation over many episodes.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::episode::{list_episodes, load_episode, write_mask, Episode};
use super::mix_seed;
use super::pipeline::{backbone_for, run_episode, EpisodeResult};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::metrics::{write_records, Counts, EpisodeRecord, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Predictor {
    /// The full adaptation pipeline.
    Pipeline,
    /// Every pixel foreground.
    Naive,
    /// Every pixel foreground with probability `p`.
    Random { p: f64 },
    /// The ground truth itself.
    Oracle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: Predictor,
    pub records: Vec<EpisodeRecord>,
    pub summary: Summary,
    /// The always-foreground predictor on the same queries.
    pub naive: Summary,
    #[serde(skip)]
    pub results: Vec<EpisodeResult>,
}

impl EvalReport {
    /// Writes `records.jsonl`, `summary.csv` and, for pipeline runs,
    /// `masks/<episode>/pred_<j>.png`.
    pub fn write(&self, dir: &Path, with_masks: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_records(BufWriter::new(File::create(dir.join("records.jsonl"))?), &self.records)?;
        let mut csv = BufWriter::new(File::create(dir.join("summary.csv"))?);
        self.summary.write_csv(&mut csv)?;
        let mut naive = BufWriter::new(File::create(dir.join("summary_naive.csv"))?);
        self.naive.write_csv(&mut naive)?;
        if with_masks {
            for r in &self.results {
                let d = dir.join("masks").join(&r.episode);
                fs::create_dir_all(&d)?;
                for p in &r.predictions {
                    write_mask(&d.join(format!("pred_{}.png", p.query)), &p.mask)?;
                }
            }
        }
        Ok(())
    }
}

fn ground_truth(ep: &Episode, j: usize) -> Result<&Mask> {
    ep.queries[j]
        .mask
        .as_ref()
        .ok_or(Error::MissingGroundTruth(j))
        .map_err(|e| e.in_episode(&ep.id))
}

fn baseline_records(ep: &Episode, predictor: Predictor, seed: u64) -> Result<Vec<EpisodeRecord>> {
    let mut records = Vec::with_capacity(ep.queries.len());
    for j in 0..ep.queries.len() {
        let gt = ground_truth(ep, j)?;
        let pred: Mask = match predictor {
            Predictor::Naive => Grid::filled(gt.width(), gt.height(), true),
            Predictor::Oracle => gt.clone(),
            Predictor::Random { p } => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, ep.seed), j as u64));
                gt.map(|_| rng.gen_bool(p))
            }
            Predictor::Pipeline => unreachable!("handled by the pipeline"),
        };
        records.push(EpisodeRecord::new(&ep.id, j, ep.class_id, Counts::from_masks(&pred, gt)?));
    }
    Ok(records)
}

/// Runs `predictor` over every episode and aggregates the counts.
pub fn evaluate(episodes: &[Episode], cfg: &RunConfig, predictor: Predictor) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::Empty("no episodes to evaluate".into()));
    }
    if let Predictor::Random { p } = predictor {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(format!("random predictor probability {p} outside [0, 1]")));
        }
    }
    let classes = episodes.iter().map(|e| e.class_id).max().unwrap_or(0) + 1;
    let (records, results): (Vec<EpisodeRecord>, Vec<EpisodeResult>) = match predictor {
        Predictor::Pipeline => {
            let backbone = backbone_for(cfg)?;
            let results = episodes
                .par_iter()
                .map(|ep| {
                    for j in 0..ep.queries.len() {
                        ground_truth(ep, j)?;
                    }
                    run_episode(ep, cfg, backbone.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            let records = results.iter().flat_map(EpisodeResult::records).collect();
            (records, results)
        }
        other => {
            let nested = episodes
                .par_iter()
                .map(|ep| baseline_records(ep, other, cfg.seed))
                .collect::<Result<Vec<_>>>()?;
            (nested.into_iter().flatten().collect(), Vec::new())
        }
    };
    let naive_records = episodes
        .iter()
        .map(|ep| baseline_records(ep, Predictor::Naive, cfg.seed))
        .collect::<Result<Vec<_>>>()?
        .concat();
    Ok(EvalReport {
        predictor,
        summary: Summary::from_records(&records, classes)?,
        naive: Summary::from_records(&naive_records, classes)?,
        records,
        results,
    })
}

/// Loads every episode under `root`, restricted to `shots` shots.
pub fn load_dataset(root: &Path, shots: usize) -> Result<Vec<Episode>> {
    let dirs = list_episodes(root)?;
    if dirs.is_empty() {
        return Err(Error::ingest(root, "no episode directories (with meta.txt) found"));
    }
    dirs.iter()
        .map(|d| load_episode(d)?.with_shots(shots))
        .collect()
}
