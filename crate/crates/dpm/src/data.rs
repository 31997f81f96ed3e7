//! Synthetic occluded-identity dataset: each identity is a smooth random
//! channel field, cameras add a tint, and a shared pool of obstacle
//! textures gets pasted over rectangles. The shared obstacles are the
//! point — a model that matches on them ranks occluded impostors high.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DpmError;
use crate::tensor::Tensor;

const IMG_MAGIC: &[u8; 7] = b"DPMIMG1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub classes: usize,
    pub images_per_id: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub cameras: usize,
    pub p_occ: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub obstacles: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 20,
            images_per_id: 30,
            image_h: 32,
            image_w: 16,
            channels: 3,
            cameras: 3,
            p_occ: 0.5,
            a_min: 0.25,
            a_max: 0.5,
            obstacles: 4,
            sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DpmError> {
        if self.classes < 2 {
            return Err(DpmError::invalid("classes", format!("{} < 2", self.classes)));
        }
        if self.images_per_id < 3 {
            return Err(DpmError::invalid(
                "images_per_id",
                format!("{} leaves no room for train/query/gallery", self.images_per_id),
            ));
        }
        if self.image_h == 0 || self.image_w == 0 || self.channels == 0 {
            return Err(DpmError::invalid("image", "zero dimension".to_string()));
        }
        if self.cameras == 0 {
            return Err(DpmError::invalid("cameras", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_occ) {
            return Err(DpmError::invalid("p_occ", format!("{} not in [0,1]", self.p_occ)));
        }
        if !(self.a_min > 0.0 && self.a_min <= self.a_max && self.a_max < 1.0) {
            return Err(DpmError::invalid(
                "a_min/a_max",
                format!("need 0 < {} <= {} < 1", self.a_min, self.a_max),
            ));
        }
        if self.obstacles == 0 {
            return Err(DpmError::invalid("obstacles", "must be >= 1"));
        }
        if self.sigma < 0.0 {
            return Err(DpmError::invalid("sigma", format!("{} < 0", self.sigma)));
        }
        Ok(())
    }

    /// (train, query, gallery) counts per identity.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.images_per_id;
        let train = (2 * n).div_ceil(3).min(n - 2);
        let rem = n - train;
        let query = (2 * rem / 5).max(1);
        (train, query, rem - query)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// Occlusion rectangle in pixel coordinates, diagnostics only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone)]
pub struct DataSample {
    pub image: Tensor<f32>,
    pub id: usize,
    pub camera: usize,
    pub split: Split,
    pub occlusion: Option<Rect>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub samples: Vec<DataSample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> impl Iterator<Item = &DataSample> {
        self.samples.iter().filter(move |x| x.split == s)
    }

    /// FNV-1a over every image byte plus labels, for determinism checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for s in &self.samples {
            for v in s.image.data() {
                for b in v.to_le_bytes() {
                    eat(b);
                }
            }
            eat(s.id as u8);
            eat(s.camera as u8);
        }
        h
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 kept away from 0
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Smooth per-identity base field: a few low-frequency cosine components
/// per channel plus a DC offset, keyed by (seed, id).
fn identity_field(spec: &SynthSpec, id: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x1D_u64 << 56) ^ id as u64);
    let (h, w, c) = (spec.image_h, spec.image_w, spec.channels);
    let mut out = vec![0.0f32; h * w * c];
    for ch in 0..c {
        let dc: f64 = rng.gen_range(-0.5..0.5);
        let comps: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.15..0.45),  // amplitude
                    rng.gen_range(0.5..2.0),    // vertical cycles
                    rng.gen_range(0.5..2.0),    // horizontal cycles
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let mut v = dc;
                for &(a, fy, fx, ph) in &comps {
                    let arg = std::f64::consts::TAU
                        * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                        + ph;
                    v += a * arg.cos();
                }
                out[(y * w + x) * c + ch] = v as f32;
            }
        }
    }
    out
}

/// Per-camera channel tint, keyed by (seed, camera).
fn camera_tint(spec: &SynthSpec, camera: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0xCA_u64 << 56) ^ camera as u64);
    (0..spec.channels).map(|_| rng.gen_range(-0.3..0.3) as f32).collect()
}

/// Shared obstacle texture k, rendered at full image size with high-frequency
/// high-amplitude content so occluded regions look alike across identities.
fn obstacle_texture(spec: &SynthSpec, k: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x0B_u64 << 56) ^ k as u64);
    let (h, w, c) = (spec.image_h, spec.image_w, spec.channels);
    let mut out = vec![0.0f32; h * w * c];
    for ch in 0..c {
        let dc: f64 = rng.gen_range(-0.8..0.8);
        let a: f64 = rng.gen_range(0.8..1.4);
        let fy: f64 = rng.gen_range(3.0..6.0);
        let fx: f64 = rng.gen_range(3.0..6.0);
        let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..h {
            for x in 0..w {
                let arg = std::f64::consts::TAU
                    * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                    + ph;
                out[(y * w + x) * c + ch] = (dc + a * arg.cos()) as f32;
            }
        }
    }
    out
}

/// Per-sample RNG seed, stable across regeneration.
pub fn sample_seed(spec: &SynthSpec, id: usize, index: usize) -> u64 {
    spec.seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add((id as u64) << 20)
        .wrapping_add(index as u64)
}

/// Holistic (pre-occlusion) image: identity field + camera tint + noise
/// drawn from `rng`.
pub fn render_holistic(
    spec: &SynthSpec,
    id: usize,
    camera: usize,
    rng: &mut impl Rng,
) -> Tensor<f32> {
    let (h, w, c) = (spec.image_h, spec.image_w, spec.channels);
    let mut img = identity_field(spec, id);
    let tint = camera_tint(spec, camera);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let i = (y * w + x) * c + ch;
                img[i] += tint[ch];
                if spec.sigma > 0.0 {
                    img[i] += (spec.sigma * gaussian(rng)) as f32;
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], img).expect("sized by construction")
}

fn occlude(spec: &SynthSpec, image: &mut Tensor<f32>, rng: &mut impl Rng) -> Rect {
    let (h, w, c) = (spec.image_h, spec.image_w, spec.channels);
    // full-width horizontal band: covered fraction is exactly band_h / h
    let lo = ((spec.a_min * h as f64).ceil() as usize).clamp(1, h);
    let hi = ((spec.a_max * h as f64).floor() as usize).clamp(lo, h);
    let band_h = rng.gen_range(lo..=hi);
    let y0 = rng.gen_range(0..=h - band_h);
    let k = rng.gen_range(0..spec.obstacles);
    let tex = obstacle_texture(spec, k);
    let dst = image.data_mut();
    for y in y0..y0 + band_h {
        let row = y * w * c;
        dst[row..row + w * c].copy_from_slice(&tex[row..row + w * c]);
    }
    Rect { y: y0, x: 0, h: band_h, w }
}

/// Deterministic dataset generation. Query samples are always occluded
/// (mirroring the occluded-query protocol) unless p_occ is exactly 0,
/// which switches occlusion off globally.
pub fn generate(spec: &SynthSpec) -> Result<Dataset, DpmError> {
    spec.validate()?;
    let (n_train, n_query, _n_gallery) = spec.split_sizes();
    let mut samples = Vec::with_capacity(spec.classes * spec.images_per_id);
    for id in 0..spec.classes {
        for index in 0..spec.images_per_id {
            let split = if index < n_train {
                Split::Train
            } else if index < n_train + n_query {
                Split::Query
            } else {
                Split::Gallery
            };
            let camera = index % spec.cameras;
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec, id, index));
            let mut image = render_holistic(spec, id, camera, &mut rng);
            let p = match split {
                Split::Query if spec.p_occ > 0.0 => 1.0,
                _ => spec.p_occ,
            };
            let occlusion = if rng.gen::<f64>() < p {
                Some(occlude(spec, &mut image, &mut rng))
            } else {
                None
            };
            samples.push(DataSample { image, id, camera, split, occlusion });
        }
    }
    Ok(Dataset { spec: spec.clone(), samples })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: usize,
    camera: usize,
    split: Split,
    occluded: bool,
    path: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    rect: Option<Rect>,
}

fn write_image(path: &Path, t: &Tensor<f32>) -> Result<(), DpmError> {
    let shape = t.shape();
    let mut f = fs::File::create(path)?;
    f.write_all(IMG_MAGIC)?;
    for &d in shape {
        f.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_image(path: &Path) -> Result<Tensor<f32>, DpmError> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 7];
    f.read_exact(&mut magic)?;
    if &magic != IMG_MAGIC {
        return Err(DpmError::Format(format!("bad magic in {}", path.display())));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 8];
        f.read_exact(&mut b)?;
        *d = u64::from_le_bytes(b) as usize;
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 4];
    for _ in 0..n {
        f.read_exact(&mut b)?;
        data.push(f32::from_le_bytes(b));
    }
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(DpmError::Format(format!("trailing bytes in {}", path.display())));
    }
    Tensor::new(dims.to_vec(), data)
}

/// Write manifest.jsonl + per-sample DPMIMG1 files + the resolved spec.
pub fn store(dataset: &Dataset, dir: &Path) -> Result<(), DpmError> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut manifest = String::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let rel = format!("images/{i:05}.bin");
        write_image(&dir.join(&rel), &s.image)?;
        let rec = ManifestRecord {
            id: s.id,
            camera: s.camera,
            split: s.split,
            occluded: s.occlusion.is_some(),
            path: rel,
            rect: s.occlusion,
        };
        manifest.push_str(&serde_json::to_string(&rec).map_err(|e| DpmError::Format(e.to_string()))?);
        manifest.push('\n');
    }
    fs::write(dir.join("manifest.jsonl"), manifest)?;
    let spec = serde_json::to_string_pretty(&dataset.spec).map_err(|e| DpmError::Format(e.to_string()))?;
    fs::write(dir.join("spec.json"), spec)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset, DpmError> {
    let spec: SynthSpec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)
        .map_err(|e| DpmError::Format(format!("spec.json: {e}")))?;
    let manifest = fs::read_to_string(dir.join("manifest.jsonl"))?;
    let mut samples = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| DpmError::Format(format!("manifest line {}: {e}", lineno + 1)))?;
        let image = read_image(&dir.join(&rec.path))?;
        samples.push(DataSample {
            image,
            id: rec.id,
            camera: rec.camera,
            split: rec.split,
            occlusion: rec.rect,
        });
    }
    Ok(Dataset { spec, samples })
}
