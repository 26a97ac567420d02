//! Intersection-over-union bookkeeping for one-way episodes, plus the
//! closed-form analysis of a random Bernoulli predictor.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;

/// Confusion counts of one binary prediction.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        if !pred.same_dims(gt) {
            return Err(Error::shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        let mut c = Counts::default();
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn pixels(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn predicted_fg_ratio(&self) -> f64 {
        ratio(self.tp + self.fp, self.pixels())
    }

    pub fn true_fg_ratio(&self) -> f64 {
        ratio(self.tp + self.fn_, self.pixels())
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// Foreground IoU, `None` when both masks are empty.
    pub fn fg_iou(&self) -> Option<f64> {
        let u = self.tp + self.fp + self.fn_;
        (u > 0).then(|| self.tp as f64 / u as f64)
    }

    pub fn bg_iou(&self) -> Option<f64> {
        let u = self.tn + self.fp + self.fn_;
        (u > 0).then(|| self.tn as f64 / u as f64)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-class intersections and unions. Row 1 holds the class, row 0 its
/// complement (true negatives).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoUAccumulator {
    classes: usize,
    intersection: [Vec<u64>; 2],
    union: [Vec<u64>; 2],
}

impl IoUAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            intersection: [vec![0; classes], vec![0; classes]],
            union: [vec![0; classes], vec![0; classes]],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `I[row][class]`.
    pub fn intersection(&self, row: usize, class_id: usize) -> u64 {
        self.intersection[row][class_id]
    }

    /// `U[row][class]`.
    pub fn union(&self, row: usize, class_id: usize) -> u64 {
        self.union[row][class_id]
    }

    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask, class_id: usize) -> Result<Counts> {
        self.check_class(class_id)?;
        let c = Counts::from_masks(pred, gt)?;
        self.add_counts(class_id, &c)?;
        Ok(c)
    }

    pub fn add_counts(&mut self, class_id: usize, c: &Counts) -> Result<()> {
        self.check_class(class_id)?;
        self.intersection[1][class_id] += c.tp;
        self.union[1][class_id] += c.tp + c.fp + c.fn_;
        self.intersection[0][class_id] += c.tn;
        self.union[0][class_id] += c.tn + c.fn_ + c.fp;
        Ok(())
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.classes {
            return Err(Error::ClassOutOfRange { class_id, classes: self.classes });
        }
        Ok(())
    }

    /// Elementwise sum with an accumulator over the same classes.
    pub fn merge(&mut self, other: &IoUAccumulator) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("accumulators differ in class count"));
        }
        for row in 0..2 {
            for c in 0..self.classes {
                self.intersection[row][c] += other.intersection[row][c];
                self.union[row][c] += other.union[row][c];
            }
        }
        Ok(())
    }

    pub fn class_iou(&self, class_id: usize) -> Option<f64> {
        let u = self.union[1][class_id];
        (u > 0).then(|| self.intersection[1][class_id] as f64 / u as f64)
    }

    /// Mean class IoU over classes with a nonzero union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = (0..self.classes).filter_map(|c| self.class_iou(c)).collect();
        let excluded = self.classes - ious.len();
        if ious.is_empty() {
            return Err(Error::UndefinedMetric("every class has an empty union".into()));
        }
        if excluded > 0 {
            info!("mIoU excludes {excluded} classes with empty union");
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    /// Mean of the pooled foreground and background IoUs.
    pub fn fbiou(&self) -> Result<f64> {
        let sum = |v: &Vec<u64>| v.iter().sum::<u64>();
        let (i_f, u_f) = (sum(&self.intersection[1]), sum(&self.union[1]));
        let (i_b, u_b) = (sum(&self.intersection[0]), sum(&self.union[0]));
        if u_f == 0 && u_b == 0 {
            return Err(Error::UndefinedMetric("foreground and background unions are empty".into()));
        }
        Ok(0.5 * (ratio(i_f, u_f) + ratio(i_b, u_b)))
    }
}

/// True and predicted foreground ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPair {
    pub r_y: f64,
    pub r_hat: f64,
}

impl RatioPair {
    pub fn new(r_y: f64, r_hat: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&r_y) || !(0.0..=1.0).contains(&r_hat) {
            return Err(Error::config(format!("ratios must lie in [0, 1], got ({r_y}, {r_hat})")));
        }
        Ok(Self { r_y, r_hat })
    }

    fn complement(self) -> Self {
        Self { r_y: 1.0 - self.r_y, r_hat: 1.0 - self.r_hat }
    }
}

fn random_class_iou(r: RatioPair) -> f64 {
    let num = r.r_hat * r.r_y;
    let den = num + r.r_y * (1.0 - r.r_hat) + (1.0 - r.r_y) * r.r_hat;
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Expected (mIoU, FB-IoU) of a predictor marking each pixel foreground
/// with probability `r_hat`.
pub fn expected_random_iou(r: RatioPair) -> (f64, f64) {
    let fg = random_class_iou(r);
    let bg = random_class_iou(r.complement());
    (fg, 0.5 * (fg + bg))
}

/// Derivatives of [`expected_random_iou`] with respect to `r_hat`.
pub fn random_iou_gradients(r: RatioPair) -> Result<(f64, f64)> {
    let den_f = r.r_y + r.r_hat - r.r_y * r.r_hat;
    let s = r.complement();
    let den_b = s.r_y + s.r_hat - s.r_y * s.r_hat;
    if den_f == 0.0 || den_b == 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "gradient singular at r_y={}, r_hat={}",
            r.r_y, r.r_hat
        )));
    }
    let d_fg = r.r_y * r.r_y / (den_f * den_f);
    let d_bg = -s.r_y * s.r_y / (den_b * den_b);
    Ok((d_fg, 0.5 * (d_fg + d_bg)))
}

/// One evaluated query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: String,
    pub query: usize,
    pub class_id: usize,
    #[serde(flatten)]
    pub counts: Counts,
    pub predicted_fg_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<bool>,
}

impl EpisodeRecord {
    pub fn new(episode: impl Into<String>, query: usize, class_id: usize, counts: Counts) -> Self {
        Self {
            episode: episode.into(),
            query,
            class_id,
            counts,
            predicted_fg_ratio: counts.predicted_fg_ratio(),
            refined: None,
        }
    }
}

pub fn write_records(mut out: impl Write, records: &[EpisodeRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(input: impl BufRead) -> Result<Vec<EpisodeRecord>> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}

/// Benchmark-level scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub queries: usize,
    /// From counts pooled over all episodes.
    pub miou: f64,
    pub fbiou: f64,
    /// Per-episode IoUs averaged over episodes.
    pub episode_miou: f64,
    pub episode_fbiou: f64,
    /// Mean predicted foreground ratio, in percent.
    pub fg_percent: f64,
}

impl Summary {
    pub const CSV_HEADER: &'static str =
        "episodes,queries,miou,fbiou,episode_miou,episode_fbiou,fg_percent";

    pub fn from_records(records: &[EpisodeRecord], classes: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("no evaluation records".into()));
        }
        let mut acc = IoUAccumulator::new(classes);
        let mut per_episode: BTreeMap<&str, Counts> = BTreeMap::new();
        for r in records {
            acc.add_counts(r.class_id, &r.counts)?;
            per_episode.entry(&r.episode).or_default().add(&r.counts);
        }
        let fg: Vec<f64> = per_episode.values().filter_map(Counts::fg_iou).collect();
        let fb: Vec<f64> = per_episode
            .values()
            .map(|c| 0.5 * (c.fg_iou().unwrap_or(0.0) + c.bg_iou().unwrap_or(0.0)))
            .collect();
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        Ok(Self {
            episodes: per_episode.len(),
            queries: records.len(),
            miou: acc.miou()?,
            fbiou: acc.fbiou()?,
            episode_miou: mean(&fg),
            episode_fbiou: mean(&fb),
            fg_percent: 100.0 * records.iter().map(|r| r.predicted_fg_ratio).sum::<f64>() / records.len() as f64,
        })
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.4}",
            self.episodes, self.queries, self.miou, self.fbiou, self.episode_miou, self.episode_fbiou, self.fg_percent
        )?;
        Ok(())
    }
}
