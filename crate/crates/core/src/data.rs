//! Synthetic scenes of colored rectangles, their rasterization, and the
//! JSON-lines dataset format.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_range, Execution};
use crate::geometry::{iou, BBox};
use crate::rng::{derive_seed, fill_normal, seeded};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_CLASSES: usize = 3;
pub const DEFAULT_MAX_OBJECTS: usize = 10;
pub const DEFAULT_IMAGE_SIZE: usize = 64;

const MIN_SIDE: f64 = 0.08;
const MAX_SIDE: f64 = 0.30;
const MAX_PAIR_IOU: f64 = 0.3;
const MAX_TRIES: usize = 1000;
const NOISE_SIGMA: f64 = 0.05;
const NOISE_STREAM: u64 = 0x6e6f697365;

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("max_objects must be at least 1")]
    NoObjects,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

fn quantize(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Draws a scene: object count uniform on `0..=max_objects`, boxes rejection
/// sampled so that every side is at least 0.08 and no two objects overlap by
/// more than 0.3 IoU. Classes are uniform over [`DEFAULT_CLASSES`].
pub fn generate_scene(seed: u64, max_objects: usize) -> Result<Scene, DataError> {
    generate_scene_with_classes(seed, max_objects, DEFAULT_CLASSES)
}

pub fn generate_scene_with_classes(seed: u64, max_objects: usize, classes: usize) -> Result<Scene, DataError> {
    if max_objects == 0 {
        return Err(DataError::NoObjects);
    }
    let mut rng = seeded(seed);
    let target = rng.random_range(0..=max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(target);
    let mut tries = 0;
    while objects.len() < target && tries < MAX_TRIES {
        tries += 1;
        let w = rng.random_range(MIN_SIDE..=MAX_SIDE);
        let h = rng.random_range(MIN_SIDE..=MAX_SIDE);
        let x1 = quantize(rng.random_range(0.0..=1.0 - w));
        let y1 = quantize(rng.random_range(0.0..=1.0 - h));
        let candidate = BBox::new(x1, y1, quantize(x1 + w).min(1.0), quantize(y1 + h).min(1.0));
        if candidate.width() < MIN_SIDE || candidate.height() < MIN_SIDE {
            continue;
        }
        if objects.iter().any(|o| iou(&o.bbox, &candidate) > MAX_PAIR_IOU) {
            continue;
        }
        let class = rng.random_range(0..classes);
        objects.push(SceneObject {
            class,
            bbox: candidate,
        });
    }
    Ok(Scene { seed, objects })
}

/// Renders `[3 x h x w]`: zero background, each object paints its pixel
/// rectangle one-hot in channel `class % 3` (later objects win), then
/// Gaussian noise with sigma 0.05 seeded from the scene.
pub fn rasterize(scene: &Scene, h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for obj in &scene.objects {
        let b = &obj.bbox;
        let channel = obj.class % 3;
        let cols = covered(b.x1, b.x2, w);
        let rows = covered(b.y1, b.y2, h);
        for r in rows {
            for c in cols.clone() {
                for ch in 0..3 {
                    data[ch * plane + r * w + c] = if ch == channel { 1.0 } else { 0.0 };
                }
            }
        }
    }
    let mut noise = vec![0.0; data.len()];
    let mut rng = seeded(scene.seed ^ NOISE_STREAM);
    fill_normal(&mut rng, &mut noise, NOISE_SIGMA);
    data.iter_mut().zip(&noise).for_each(|(d, n)| *d += n);
    Tensor::from_parts(vec![3, h, w], data)
}

/// Pixel indices whose centers lie in `[lo, hi)`.
fn covered(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let first = (lo * n as f64 - 0.5).ceil().max(0.0) as usize;
    let end = ((hi * n as f64 - 0.5).ceil().max(0.0) as usize).min(n);
    first..end.max(first)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Scenes `0..count` of a split; each scene has its own derived seed.
pub fn generate_split(
    base_seed: u64,
    split: Split,
    count: usize,
    max_objects: usize,
    exec: Execution,
) -> Result<Vec<Scene>, DataError> {
    if max_objects == 0 {
        return Err(DataError::NoObjects);
    }
    let stream = match split {
        Split::Train => TRAIN_STREAM,
        Split::Val => VAL_STREAM,
    };
    map_range(count, exec, |i| generate_scene(derive_seed(base_seed, stream, i as u64), max_objects))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub max_objects: usize,
    pub classes: usize,
    pub image_size: usize,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| DataError::Manifest(e.to_string()))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(DataError::Manifest(format!(
                "unsupported format version {}",
                m.format_version
            )));
        }
        Ok(m)
    }
}

#[derive(Deserialize)]
struct SceneLine {
    seed: u64,
    objects: Vec<[f64; 5]>,
}

fn scene_line(scene: &Scene) -> String {
    let objs: Vec<String> = scene
        .objects
        .iter()
        .map(|o| {
            let b = &o.bbox;
            format!("[{},{:.6},{:.6},{:.6},{:.6}]", o.class, b.x1, b.y1, b.x2, b.y2)
        })
        .collect();
    format!("{{\"seed\":{},\"objects\":[{}]}}", scene.seed, objs.join(","))
}

/// One JSON object per line, coordinates with six fractional digits.
pub fn write_split(path: &Path, scenes: &[Scene]) -> Result<(), DataError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for s in scenes {
        writeln!(out, "{}", scene_line(s))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<Vec<Scene>, DataError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut scenes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let number = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SceneLine = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: number,
            msg: e.to_string(),
        })?;
        let mut objects = Vec::with_capacity(parsed.objects.len());
        for [c, x1, y1, x2, y2] in parsed.objects {
            if c < 0.0 || c.fract() != 0.0 {
                return Err(DataError::Parse {
                    line: number,
                    msg: format!("class {c} is not a non-negative integer"),
                });
            }
            let bbox = BBox::new(x1, y1, x2, y2);
            if !bbox.is_valid() {
                return Err(DataError::Parse {
                    line: number,
                    msg: format!("invalid box {bbox:?}"),
                });
            }
            objects.push(SceneObject {
                class: c as usize,
                bbox,
            });
        }
        scenes.push(Scene {
            seed: parsed.seed,
            objects,
        });
    }
    Ok(scenes)
}

/// Standard dataset layout: `train.jsonl`, `val.jsonl`, `manifest.json`.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Dataset {
    pub fn generate(manifest: DatasetManifest, exec: Execution) -> Result<Self, DataError> {
        let train = generate_split(manifest.seed, Split::Train, manifest.train, manifest.max_objects, exec)?;
        let val = generate_split(manifest.seed, Split::Val, manifest.val, manifest.max_objects, exec)?;
        Ok(Dataset { manifest, train, val })
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir)?;
        write_split(&dir.join("train.jsonl"), &self.train)?;
        write_split(&dir.join("val.jsonl"), &self.val)?;
        self.manifest.write(&dir.join("manifest.json"))
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let manifest = DatasetManifest::read(&dir.join("manifest.json"))?;
        let train = read_split(&dir.join("train.jsonl"))?;
        let val = read_split(&dir.join("val.jsonl"))?;
        Ok(Dataset { manifest, train, val })
    }
}
