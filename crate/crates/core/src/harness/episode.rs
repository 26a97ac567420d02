//! Episode directories and raster I/O.
//!
//! Layout: `support/img_<i>.png` with `support/mask_<i>.png`,
//! `query/img_<j>.png` with optional `query/mask_<j>.png`, and `meta.txt`
//! holding `class_id=` and `seed=` lines. Shots and queries are ordered by
//! file name.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage as RgbBuffer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, RgbImage, ScoreMap};

#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub image: RgbImage,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub image: RgbImage,
    pub mask: Option<Mask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub class_id: usize,
    pub support: Vec<Shot>,
    pub queries: Vec<Query>,
    pub seed: u64,
}

impl Episode {
    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() {
            return Err(Error::Empty(format!("episode {} has no support shot", self.id)));
        }
        if self.queries.is_empty() {
            return Err(Error::Empty(format!("episode {} has no query", self.id)));
        }
        for (i, s) in self.support.iter().enumerate() {
            if !s.image.same_dims(&s.mask) {
                return Err(Error::shape(format!("support {i}: image and mask differ in size")));
            }
        }
        for (j, q) in self.queries.iter().enumerate() {
            if let Some(m) = &q.mask {
                if !q.image.same_dims(m) {
                    return Err(Error::shape(format!("query {j}: image and mask differ in size")));
                }
            }
        }
        Ok(())
    }

    pub fn shots(&self) -> usize {
        self.support.len()
    }

    /// The same episode restricted to its first `k` shots.
    pub fn with_shots(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.support.len() {
            return Err(Error::config(format!(
                "episode {} has {} shots, {k} requested",
                self.id,
                self.support.len()
            )));
        }
        let mut ep = self.clone();
        ep.support.truncate(k);
        Ok(ep)
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::ingest(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    Grid::new(w as usize, h as usize, data)
}

/// Reads a mask raster; luma values above 127 are foreground.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)
        .map_err(|e| Error::ingest(path, e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Grid::new(w as usize, h as usize, img.pixels().map(|p| p[0] > 127).collect())
}

pub fn write_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    let buf = RgbBuffer::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let p = image.get(x as usize, y as usize);
        Rgb(p.map(|v| v.round().clamp(0.0, 255.0) as u8))
    });
    buf.save(path)?;
    Ok(())
}

/// Writes a mask as 0/255 grayscale.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let buf = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if *mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    buf.save(path)?;
    Ok(())
}

/// Value range of a quantized score map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftMapRange {
    pub min: f64,
    pub max: f64,
}

/// Writes a score map as 16-bit grayscale spanning its range, plus a
/// `<path>.json` sidecar with that range.
pub fn write_soft_map(path: &Path, map: &ScoreMap) -> Result<()> {
    let (min, max) = map.min_max();
    let span = max - min;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(map.width() as u32, map.height() as u32, |x, y| {
            let v = *map.get(x as usize, y as usize);
            let q = if span > 0.0 { ((v - min) / span * 65535.0).round() } else { 0.0 };
            Luma([q as u16])
        });
    buf.save(path)?;
    fs::write(sidecar(path), serde_json::to_string(&SoftMapRange { min, max })?)?;
    Ok(())
}

pub fn read_soft_map(path: &Path) -> Result<ScoreMap> {
    let range: SoftMapRange = serde_json::from_str(&fs::read_to_string(sidecar(path))?)?;
    let img = image::open(path)
        .map_err(|e| Error::ingest(path, e.to_string()))?
        .to_luma16();
    let (w, h) = img.dimensions();
    let span = range.max - range.min;
    let data = img
        .pixels()
        .map(|p| range.min + p[0] as f64 / 65535.0 * span)
        .collect();
    Grid::new(w as usize, h as usize, data)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn parse_meta(path: &Path) -> Result<(usize, u64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let mut class_id = None;
    let mut seed = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::ingest(path, format!("expected key=value, got `{line}`")))?;
        let bad = |e: std::num::ParseIntError| Error::ingest(path, format!("{}: {e}", k.trim()));
        match k.trim() {
            "class_id" => class_id = Some(v.trim().parse().map_err(bad)?),
            "seed" => seed = Some(v.trim().parse().map_err(bad)?),
            other => return Err(Error::ingest(path, format!("unknown key `{other}`"))),
        }
    }
    let class_id = class_id.ok_or_else(|| Error::ingest(path, "missing class_id"))?;
    Ok((class_id, seed.unwrap_or(0)))
}

/// `img_<suffix>.png` files of a directory, sorted by name, with suffixes.
fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::ingest(dir, e.to_string()))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(suffix) = name.strip_prefix("img_").and_then(|n| n.strip_suffix(".png")) {
            found.push((suffix.to_string(), path.clone()));
        }
    }
    found.sort_by(|a, b| a.1.file_name().cmp(&b.1.file_name()));
    Ok(found)
}

pub fn load_episode(dir: &Path) -> Result<Episode> {
    let (class_id, seed) = parse_meta(&dir.join("meta.txt"))?;
    let support_dir = dir.join("support");
    let mut support = Vec::new();
    for (suffix, img_path) in list_images(&support_dir)? {
        let mask_path = support_dir.join(format!("mask_{suffix}.png"));
        if !mask_path.exists() {
            return Err(Error::ingest(&mask_path, "support mask missing"));
        }
        let shot = Shot { image: read_rgb(&img_path)?, mask: read_mask(&mask_path)? };
        if !shot.image.same_dims(&shot.mask) {
            return Err(Error::ingest(&mask_path, "mask size differs from image"));
        }
        support.push(shot);
    }
    let query_dir = dir.join("query");
    let mut queries = Vec::new();
    for (suffix, img_path) in list_images(&query_dir)? {
        let image = read_rgb(&img_path)?;
        let mask_path = query_dir.join(format!("mask_{suffix}.png"));
        let mask = if mask_path.exists() {
            let m = read_mask(&mask_path)?;
            if !image.same_dims(&m) {
                return Err(Error::ingest(&mask_path, "mask size differs from image"));
            }
            Some(m)
        } else {
            None
        };
        queries.push(Query { image, mask });
    }
    if support.is_empty() {
        return Err(Error::ingest(&support_dir, "no support images"));
    }
    if queries.is_empty() {
        return Err(Error::ingest(&query_dir, "no query images"));
    }
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("episode")
        .to_string();
    Ok(Episode { id, class_id, support, queries, seed })
}

pub fn save_episode(dir: &Path, ep: &Episode) -> Result<()> {
    let support_dir = dir.join("support");
    let query_dir = dir.join("query");
    fs::create_dir_all(&support_dir)?;
    fs::create_dir_all(&query_dir)?;
    fs::write(dir.join("meta.txt"), format!("class_id={}\nseed={}\n", ep.class_id, ep.seed))?;
    let width = |n: usize| n.saturating_sub(1).to_string().len().max(1);
    let ws = width(ep.support.len());
    for (i, s) in ep.support.iter().enumerate() {
        write_rgb(&support_dir.join(format!("img_{i:0ws$}.png")), &s.image)?;
        write_mask(&support_dir.join(format!("mask_{i:0ws$}.png")), &s.mask)?;
    }
    let wq = width(ep.queries.len());
    for (j, q) in ep.queries.iter().enumerate() {
        write_rgb(&query_dir.join(format!("img_{j:0wq$}.png")), &q.image)?;
        if let Some(m) = &q.mask {
            write_mask(&query_dir.join(format!("mask_{j:0wq$}.png")), m)?;
        }
    }
    Ok(())
}

/// Episode directories (those holding `meta.txt`) under `root`, by name.
pub fn list_episodes(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::ingest(root, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.txt").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}
