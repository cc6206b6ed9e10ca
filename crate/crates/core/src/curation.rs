//! Tuple selection from a directory of pre-segmented, pre-landmarked
//! portraits, with head-pose alignment categories.
//!
//! Each portrait `<stem>.png` is expected next to `<stem>.face.png`,
//! `<stem>.hair.png` and `<stem>.landmarks.json` (68 `[x, y]` pairs).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_ops::{mask_iou, BinaryMask};

pub const NUM_LANDMARKS: usize = 68;
/// Fraction of the image size a landmark may fall outside the frame.
pub const LANDMARK_SLACK: f64 = 0.10;
pub const DEFAULT_MIN_HAIR: f64 = 0.18;

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::Landmark(format!(
                "expected {NUM_LANDMARKS} points, got {}",
                points.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Landmark("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let points: Vec<[f64; 2]> =
            serde_json::from_str(text).map_err(|e| Error::Landmark(format!("malformed landmark JSON: {e}")))?;
        Self::new(points)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Landmark(m) => Error::Landmark(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    /// Every point inside `[-0.1·w, 1.1·w] × [-0.1·h, 1.1·h]`.
    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        let (h, w) = (height as f64, width as f64);
        for (k, &[x, y]) in self.points.iter().enumerate() {
            let ok_x = x >= -LANDMARK_SLACK * w && x <= (1.0 + LANDMARK_SLACK) * w;
            let ok_y = y >= -LANDMARK_SLACK * h && y <= (1.0 + LANDMARK_SLACK) * h;
            if !(ok_x && ok_y) {
                return Err(Error::Landmark(format!(
                    "point {k} ({x}, {y}) outside a {width}x{height} frame"
                )));
            }
        }
        Ok(())
    }
}

/// Foreground fraction of a hair mask.
pub fn hair_fraction(hair: &BinaryMask) -> f64 {
    if hair.is_empty() {
        return 0.0;
    }
    hair.area() as f64 / hair.len() as f64
}

/// Mean Euclidean distance between corresponding landmarks, in pixels.
pub fn pose_distance(a: &LandmarkSet, b: &LandmarkSet) -> Result<f64> {
    if a.points.len() != b.points.len() {
        return Err(Error::Landmark(format!(
            "landmark counts differ ({} vs {})",
            a.points.len(),
            b.points.len()
        )));
    }
    let sum: f64 = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
        .sum();
    Ok(sum / a.points.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Easy,
    Medium,
    Difficult,
    Rejected,
}

impl Category {
    pub const ALIGNED: [Category; 3] = [Category::Easy, Category::Medium, Category::Difficult];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Easy => "Easy",
            Category::Medium => "Medium",
            Category::Difficult => "Difficult",
            Category::Rejected => "Rejected",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Both the IoU interval (open below, closed above) and the PD interval
/// (closed below, open above) of a category must hold.
pub fn categorize(iou: f64, pd: f64) -> Category {
    const BANDS: [(Category, f64, f64, f64, f64); 3] = [
        (Category::Easy, 0.8, 1.0, 0.0, 2.0),
        (Category::Medium, 0.7, 0.8, 2.0, 4.0),
        (Category::Difficult, 0.6, 0.7, 4.0, 5.0),
    ];
    BANDS
        .iter()
        .find(|&&(_, ilo, ihi, plo, phi)| iou > ilo && iou <= ihi && pd >= plo && pd < phi)
        .map_or(Category::Rejected, |b| b.0)
}

/// Companion files of one portrait, relative to the data directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortraitPaths {
    pub image: String,
    pub face_mask: String,
    pub hair_mask: String,
    pub landmarks: String,
}

impl PortraitPaths {
    fn for_stem(stem: &str) -> Self {
        Self {
            image: format!("{stem}.png"),
            face_mask: format!("{stem}.face.png"),
            hair_mask: format!("{stem}.hair.png"),
            landmarks: format!("{stem}.landmarks.json"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TupleRecord {
    pub id: String,
    pub identity: PortraitPaths,
    pub shape: PortraitPaths,
    pub appearance: PortraitPaths,
    /// Face-mask IoU between identity and shape reference.
    pub iou: f64,
    /// Landmark pose distance in pixels at `resolution`.
    pub pd: f64,
    pub category: Category,
    /// `[height, width]` of the identity portrait.
    pub resolution: [usize; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurationConstraints {
    pub min_hair: f64,
}

impl Default for CurationConstraints {
    fn default() -> Self {
        Self {
            min_hair: DEFAULT_MIN_HAIR,
        }
    }
}

struct Portrait {
    stem: String,
    paths: PortraitPaths,
    face: BinaryMask,
    landmarks: LandmarkSet,
    resolution: [usize; 2],
    hair_fraction: f64,
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if !p.is_file() {
        return Err(Error::Manifest {
            message: "missing companion file".into(),
            path: p,
        });
    }
    Ok(p)
}

fn load_portrait(dir: &Path, stem: &str) -> Result<Portrait> {
    let paths = PortraitPaths::for_stem(stem);
    let image = require(dir, &paths.image)?;
    let face_p = require(dir, &paths.face_mask)?;
    let hair_p = require(dir, &paths.hair_mask)?;
    let lm_p = require(dir, &paths.landmarks)?;
    let (w, h) = image::image_dimensions(&image)?;
    let (h, w) = (h as usize, w as usize);
    let face = BinaryMask::load_png(&face_p)?;
    let hair = BinaryMask::load_png(&hair_p)?;
    for (m, p) in [(&face, &face_p), (&hair, &hair_p)] {
        if m.height() != h || m.width() != w {
            return Err(Error::Manifest {
                message: format!("mask is {}x{}, image is {w}x{h}", m.width(), m.height()),
                path: p.clone(),
            });
        }
    }
    let landmarks = LandmarkSet::load(&lm_p)?;
    landmarks.check_bounds(h, w)?;
    Ok(Portrait {
        stem: stem.to_owned(),
        paths,
        face,
        landmarks,
        resolution: [h, w],
        hair_fraction: hair_fraction(&hair),
    })
}

/// Portrait stems in lexicographic order: every `*.png` that is not itself
/// a `.face.png` / `.hair.png` companion.
pub fn list_portraits(data_dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(data_dir).map_err(|e| Error::io(data_dir, e))?;
    let mut stems = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(data_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".png") {
            if !stem.ends_with(".face") && !stem.ends_with(".hair") && entry.path().is_file() {
                stems.push(stem.to_owned());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// All `(I₁, I₂)` ordered pairs (a portrait may pair with itself) crossed
/// with every `I₃`, among portraits passing the hair constraint. Rejected
/// tuples are kept; filter on `category` if unwanted. Sorted by id.
pub fn build_manifest(data_dir: impl AsRef<Path>, constraints: &CurationConstraints) -> Result<Vec<TupleRecord>> {
    let dir = data_dir.as_ref();
    let stems = list_portraits(dir)?;
    let portraits: Vec<Portrait> = stems
        .par_iter()
        .map(|s| load_portrait(dir, s))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.hair_fraction >= constraints.min_hair)
        .collect();

    let pairs: Vec<(usize, usize)> = (0..portraits.len())
        .flat_map(|a| (0..portraits.len()).map(move |b| (a, b)))
        .collect();
    let metrics: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (pa, pb) = (&portraits[a], &portraits[b]);
            if pa.resolution != pb.resolution {
                return Err(Error::Manifest {
                    message: format!("resolution differs from {}", pa.paths.image),
                    path: dir.join(&pb.paths.image),
                });
            }
            Ok((mask_iou(&pa.face, &pb.face)?, pose_distance(&pa.landmarks, &pb.landmarks)?))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(pairs.len() * portraits.len());
    for (&(a, b), &(iou, pd)) in pairs.iter().zip(&metrics) {
        for p3 in &portraits {
            let (p1, p2) = (&portraits[a], &portraits[b]);
            records.push(TupleRecord {
                id: format!("{}__{}__{}", p1.stem, p2.stem, p3.stem),
                identity: p1.paths.clone(),
                shape: p2.paths.clone(),
                appearance: p3.paths.clone(),
                iou,
                pd,
                category: categorize(iou, pd),
                resolution: p1.resolution,
            });
        }
    }
    records.sort_by(|x, y| x.id.cmp(&y.id));
    Ok(records)
}

pub fn write_manifest(records: &[TupleRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(out, "{line}").map_err(|e| Error::io("<manifest>", e))?;
    }
    Ok(())
}

pub fn save_manifest(records: &[TupleRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_manifest(records, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSONL manifest; blank lines are skipped.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<TupleRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TupleRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            message: format!("line {}: {e}", n + 1),
            path: path.to_owned(),
        })?;
        if rec.category != categorize(rec.iou, rec.pd) {
            return Err(Error::Manifest {
                message: format!("line {}: category {} inconsistent with iou/pd", n + 1, rec.category),
                path: path.to_owned(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Record count per category, in `Easy, Medium, Difficult, Rejected` order.
pub fn category_counts(records: &[TupleRecord]) -> BTreeMap<Category, usize> {
    let mut m = BTreeMap::new();
    for r in records {
        *m.entry(r.category).or_insert(0) += 1;
    }
    m
}
