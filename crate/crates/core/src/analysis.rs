//! Class discriminability of embeddings: averaged cosine similarities of
//! same-class and opposite-class pixel pairs, within the support and across
//! query and support.

use std::io::Write;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::grid::{resize_bilinear, Mask, ScoreMap};

pub const MAX_SAMPLED_PAIRS: u64 = 1_000_000;

/// Feature rows split by the downsized mask; zero vectors are dropped.
#[derive(Debug, Clone)]
pub struct Partition {
    pub foreground: Array2<f64>,
    pub background: Array2<f64>,
    pub zero_vectors: usize,
}

/// Bilinearly downsizes `mask` to the volume and splits rows at `> 0.5`.
pub fn class_partition(features: &FeatureVolume, mask: &Mask) -> Result<Partition> {
    let scores = resize_bilinear(&mask.to_scores(), features.width(), features.height());
    partition_scores(features, &scores)
}

/// Splits rows by an already downsized mask.
pub fn partition_scores(features: &FeatureVolume, scores: &ScoreMap) -> Result<Partition> {
    if scores.dims() != (features.width(), features.height()) {
        return Err(Error::shape("mask does not match the feature volume"));
    }
    let m = features.matrix();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let mut zero_vectors = 0;
    for (i, &s) in scores.as_slice().iter().enumerate() {
        if m.row(i).iter().all(|&v| v == 0.0) {
            zero_vectors += 1;
        } else if s > 0.5 {
            fg.push(i);
        } else {
            bg.push(i);
        }
    }
    Ok(Partition {
        foreground: m.select(Axis(0), &fg),
        background: m.select(Axis(0), &bg),
        zero_vectors,
    })
}

/// How the quadratic pair sets are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PairMode {
    /// Every pair, via the sum of unit vectors.
    #[default]
    Exact,
    /// At most `cap` uniformly drawn pairs per statistic.
    Sampled { cap: u64, seed: u64 },
}

fn unit_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    out
}

/// Mean cosine similarity over `a x b`, `None` if either set is empty.
/// Returns the value and the number of pairs it averages.
pub fn mean_cosine(a: &Array2<f64>, b: &Array2<f64>, mode: PairMode) -> Option<(f64, u64)> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return None;
    }
    let ua = unit_rows(a);
    let ub = unit_rows(b);
    let pairs = a.nrows() as u64 * b.nrows() as u64;
    match mode {
        PairMode::Sampled { cap, seed } if pairs > cap => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sum = 0.0;
            for _ in 0..cap {
                let i = rng.gen_range(0..ua.nrows());
                let j = rng.gen_range(0..ub.nrows());
                sum += ua.row(i).dot(&ub.row(j));
            }
            Some(((sum / cap as f64).clamp(-1.0, 1.0), cap))
        }
        _ => {
            let v = ua.sum_axis(Axis(0)).dot(&ub.sum_axis(Axis(0))) / pairs as f64;
            Some((v.clamp(-1.0, 1.0), pairs))
        }
    }
}

/// Similarity statistics of one level; `None` marks an empty class set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelSimilarity {
    pub sim_ff_ss: Option<f64>,
    pub sim_fb_ss: Option<f64>,
    pub delta_ss: Option<f64>,
    pub sim_ff_qs: Option<f64>,
    pub sim_fb_qs: Option<f64>,
    pub delta_qs: Option<f64>,
}

impl LevelSimilarity {
    fn with_deltas(mut self) -> Self {
        self.delta_ss = self.sim_ff_ss.zip(self.sim_fb_ss).map(|(a, b)| a - b);
        self.delta_qs = self.sim_ff_qs.zip(self.sim_fb_qs).map(|(a, b)| a - b);
        self
    }

    fn fields(&self) -> [Option<f64>; 6] {
        [self.sim_ff_ss, self.sim_fb_ss, self.delta_ss, self.sim_ff_qs, self.sim_fb_qs, self.delta_qs]
    }

    fn from_fields(f: [Option<f64>; 6]) -> Self {
        Self {
            sim_ff_ss: f[0],
            sim_fb_ss: f[1],
            delta_ss: f[2],
            sim_ff_qs: f[3],
            sim_fb_qs: f[4],
            delta_qs: f[5],
        }
    }

    /// Field-wise mean over the records where a field is present.
    pub fn mean_of(records: &[LevelSimilarity]) -> Self {
        let mut out = [None; 6];
        for (k, slot) in out.iter_mut().enumerate() {
            let vals: Vec<f64> = records.iter().filter_map(|r| r.fields()[k]).collect();
            if !vals.is_empty() {
                *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        Self::from_fields(out)
    }
}

/// Statistics of one level from query and support partitions.
pub fn class_similarities(query: &Partition, support: &Partition, mode: PairMode) -> LevelSimilarity {
    let sim = |a: &Array2<f64>, b: &Array2<f64>| mean_cosine(a, b, mode).map(|(v, _)| v);
    LevelSimilarity {
        sim_ff_ss: sim(&support.foreground, &support.foreground),
        sim_fb_ss: sim(&support.foreground, &support.background),
        sim_ff_qs: sim(&query.foreground, &support.foreground),
        sim_fb_qs: sim(&query.foreground, &support.background),
        ..Default::default()
    }
    .with_deltas()
}

/// Per-level statistics for one query-support pair of pyramids.
pub fn pyramid_similarities(
    query: &[FeatureVolume],
    support: &[FeatureVolume],
    query_mask: &Mask,
    support_mask: &Mask,
    mode: PairMode,
) -> Result<Vec<LevelSimilarity>> {
    if query.len() != support.len() {
        return Err(Error::shape("query and support pyramids differ in depth"));
    }
    query
        .iter()
        .zip(support)
        .map(|(q, s)| {
            let pq = class_partition(q, query_mask)?;
            let ps = class_partition(s, support_mask)?;
            Ok(class_similarities(&pq, &ps, mode))
        })
        .collect()
}

/// Level statistics averaged within consecutive blocks of `split` levels.
pub fn block_average(levels: &[LevelSimilarity], split: &[usize]) -> Result<Vec<LevelSimilarity>> {
    if split.iter().sum::<usize>() != levels.len() || split.contains(&0) {
        return Err(Error::shape(format!(
            "block split {split:?} does not cover {} levels",
            levels.len()
        )));
    }
    let mut start = 0;
    Ok(split
        .iter()
        .map(|&n| {
            let block = LevelSimilarity::mean_of(&levels[start..start + n]);
            start += n;
            block
        })
        .collect())
}

pub fn block_names(blocks: usize) -> Vec<String> {
    match blocks {
        3 => vec!["L".into(), "M".into(), "H".into()],
        n => (1..=n).map(|i| format!("B{i}")).collect(),
    }
}

/// Writes rows `scope,metric` and one column per block for before and after.
pub fn write_table(
    mut out: impl Write,
    before: &[LevelSimilarity],
    after: &[LevelSimilarity],
    episodes: usize,
) -> Result<()> {
    if before.len() != after.len() {
        return Err(Error::shape("before and after differ in block count"));
    }
    let names = block_names(before.len());
    let mut header = vec!["scope".to_string(), "metric".to_string()];
    header.extend(names.iter().map(|n| format!("{n}_before")));
    header.extend(names.iter().map(|n| format!("{n}_after")));
    header.push("episodes".into());
    writeln!(out, "{}", header.join(","))?;
    let rows: [(&str, &str, usize); 6] = [
        ("intra_support", "fg_fg", 0),
        ("intra_support", "fg_bg", 1),
        ("intra_support", "delta", 2),
        ("inter_query_support", "fg_fg", 3),
        ("inter_query_support", "fg_bg", 4),
        ("inter_query_support", "delta", 5),
    ];
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.4}"));
    for (scope, metric, k) in rows {
        let mut cells = vec![scope.to_string(), metric.to_string()];
        cells.extend(before.iter().map(|b| fmt(b.fields()[k])));
        cells.extend(after.iter().map(|a| fmt(a.fields()[k])));
        cells.push(episodes.to_string());
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use ndarray::array;

    #[test]
    fn orthogonal_classes() {
        let fg = array![[1.0, 0.0], [2.0, 0.0]];
        let bg = array![[0.0, 3.0]];
        let p = Partition { foreground: fg, background: bg, zero_vectors: 0 };
        let s = class_similarities(&p, &p, PairMode::Exact);
        assert!((s.sim_ff_ss.unwrap() - 1.0).abs() < 1e-15);
        assert!(s.sim_fb_ss.unwrap().abs() < 1e-15);
        assert!((s.delta_qs.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_foreground_mask() {
        let f = FeatureVolume::from_fn(4, 4, 3, |y, x, c| (y + x + c) as f64 + 1.0);
        let p = class_partition(&f, &Grid::filled(16, 16, true)).unwrap();
        assert_eq!(p.foreground.nrows(), 16);
        assert_eq!(p.background.nrows(), 0);
        let s = class_similarities(&p, &p, PairMode::Exact);
        assert!(s.sim_fb_ss.is_none() && s.delta_ss.is_none());
    }

    #[test]
    fn half_cells_are_background() {
        let f = FeatureVolume::from_fn(1, 2, 1, |_, _, _| 1.0);
        let scores = Grid::new(2, 1, vec![0.5, 0.51]).unwrap();
        let p = partition_scores(&f, &scores).unwrap();
        assert_eq!((p.foreground.nrows(), p.background.nrows()), (1, 1));
    }

    #[test]
    fn zero_vectors_are_dropped() {
        let f = FeatureVolume::from_fn(1, 3, 2, |_, x, _| x as f64);
        let p = partition_scores(&f, &Grid::filled(3, 1, 1.0)).unwrap();
        assert_eq!(p.zero_vectors, 1);
        assert_eq!(p.foreground.nrows(), 2);
    }

    #[test]
    fn sampling_approximates_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((400, 5), |_| rng.gen_range(-1.0..2.0));
        let b = Array2::from_shape_fn((300, 5), |_| rng.gen_range(-1.0..2.0));
        let (exact, n) = mean_cosine(&a, &b, PairMode::Exact).unwrap();
        assert_eq!(n, 120_000);
        let (approx, m) = mean_cosine(&a, &b, PairMode::Sampled { cap: 20_000, seed: 3 }).unwrap();
        assert_eq!(m, 20_000);
        assert!((exact - approx).abs() < 0.01);
    }

    #[test]
    fn blocks() {
        let lv = |v: f64| LevelSimilarity { sim_ff_ss: Some(v), ..Default::default() };
        let levels = vec![lv(1.0), lv(2.0), lv(3.0)];
        let b = block_average(&levels, &[1, 1, 1]).unwrap();
        assert_eq!(b, levels);
        let b = block_average(&levels, &[2, 1]).unwrap();
        assert_eq!(b[0].sim_ff_ss, Some(1.5));
        assert!(block_average(&levels, &[4, 6, 3]).is_err());
    }

    #[test]
    fn table_layout() {
        let lv = LevelSimilarity { sim_ff_ss: Some(0.5), sim_fb_ss: Some(0.25), ..Default::default() }.with_deltas();
        let mut buf = Vec::new();
        write_table(&mut buf, &[lv; 3], &[lv; 3], 7).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[0].starts_with("scope,metric,L_before,M_before,H_before,L_after"));
        assert!(lines[3].starts_with("intra_support,delta,0.2500"));
    }
}
