//! Procedural scenes with exact region labels, the in-memory dataset, and
//! its on-disk layout (`manifest`, `images/NNNNN.png`, `masks/NNNNN.png`).

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::png_io;
use crate::rng::{self, Rng};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionModel {
    /// Background, a body, and a distinct-colour part attached to the body's
    /// top: three regions.
    FgBg,
    /// Background and two possibly overlapping shapes: three regions.
    TwoShapes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub resolution: usize,
    pub num_images: usize,
    pub region_model: RegionModel,
    pub shapes: Vec<ShapeKind>,
    /// Body (or shape) area as a fraction of the image, `[min, max]`.
    pub size_range: [f64; 2],
    /// Minimum RGB distance (0..255 scale) between region base colours.
    pub min_color_distance: f64,
    /// Peak-to-peak amplitude (0..255 scale) of the background value noise.
    pub texture_amplitude: f64,
    /// Value-noise lattice cells across the image.
    pub texture_cells: usize,
    /// Amplitude of the smooth shading applied inside shapes.
    pub shading: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            resolution: 32,
            num_images: 4000,
            region_model: RegionModel::FgBg,
            shapes: vec![ShapeKind::Ellipse, ShapeKind::Blob],
            size_range: [0.15, 0.35],
            min_color_distance: 110.0,
            texture_amplitude: 60.0,
            texture_cells: 4,
            shading: 20.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn num_regions(&self) -> usize {
        3
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 {
            return Err(Error::config("data.scene.resolution", "must be >= 4"));
        }
        let [lo, hi] = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::config(
                "data.scene.size_range",
                format!("need 0 < min <= max < 1, got [{lo}, {hi}]"),
            ));
        }
        if self.shapes.is_empty() {
            return Err(Error::config("data.scene.shapes", "must list at least one shape"));
        }
        if self.texture_cells == 0 {
            return Err(Error::config("data.scene.texture_cells", "must be >= 1"));
        }
        if !(0.0..=255.0).contains(&self.min_color_distance) {
            return Err(Error::config("data.scene.min_color_distance", "must lie in [0, 255]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub count: usize,
    pub resolution: usize,
    /// Number of ground-truth classes, when labels are present.
    pub num_classes: Option<usize>,
    pub scene: Option<SceneSpec>,
    pub checksum: String,
}

/// 8-bit RGB images (HWC, row-major) with optional per-pixel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    resolution: usize,
    images: Vec<u8>,
    labels: Option<Vec<u8>>,
    num_classes: Option<usize>,
    scene: Option<SceneSpec>,
    sources: Vec<PathBuf>,
}

impl Dataset {
    pub fn empty(resolution: usize) -> Self {
        Self {
            resolution,
            images: Vec::new(),
            labels: None,
            num_classes: None,
            scene: None,
            sources: Vec::new(),
        }
    }

    pub fn from_parts(
        resolution: usize,
        images: Vec<u8>,
        labels: Option<Vec<u8>>,
        num_classes: Option<usize>,
    ) -> Result<Self> {
        let plane = resolution * resolution;
        if plane == 0 || !images.len().is_multiple_of(3 * plane) {
            return Err(Error::Shape {
                what: "image buffer".into(),
                expected: vec![3 * plane],
                got: vec![images.len()],
            });
        }
        let n = images.len() / (3 * plane);
        if let Some(l) = &labels {
            if l.len() != n * plane {
                return Err(Error::Shape {
                    what: "label buffer".into(),
                    expected: vec![n * plane],
                    got: vec![l.len()],
                });
            }
        }
        Ok(Self {
            resolution,
            images,
            labels,
            num_classes,
            scene: None,
            sources: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        let per = 3 * self.resolution * self.resolution;
        self.images.len().checked_div(per).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    pub fn scene(&self) -> Option<&SceneSpec> {
        self.scene.as_ref()
    }

    /// File each image was read from (empty for generated data).
    pub fn sources(&self) -> &[PathBuf] {
        &self.sources
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let per = 3 * self.resolution * self.resolution;
        &self.images[i * per..(i + 1) * per]
    }

    pub fn labels(&self, i: usize) -> Option<&[u8]> {
        let plane = self.resolution * self.resolution;
        self.labels.as_ref().map(|l| &l[i * plane..(i + 1) * plane])
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Concatenated labels of `indices`, `(n, H, W)` row-major.
    pub fn label_batch(&self, indices: &[usize]) -> Option<Vec<u8>> {
        let mut out = Vec::with_capacity(indices.len() * self.resolution * self.resolution);
        for &i in indices {
            out.extend_from_slice(self.labels(i)?);
        }
        Some(out)
    }

    /// Images `indices` as a `(n, 3, H, W)` tensor in `[-1, 1]`. With
    /// `flip[i]` set, image `i` is mirrored horizontally.
    pub fn batch(&self, indices: &[usize], flip: Option<&[bool]>, dtype: DType) -> Result<Tensor> {
        let r = self.resolution;
        let plane = r * r;
        let mut data = vec![0f32; indices.len() * 3 * plane];
        for (bi, &idx) in indices.iter().enumerate() {
            let img = self.image_bytes(idx);
            let mirror = flip.map(|f| f[bi]).unwrap_or(false);
            for y in 0..r {
                for x in 0..r {
                    let sx = if mirror { r - 1 - x } else { x };
                    for c in 0..3 {
                        data[(bi * 3 + c) * plane + y * r + x] =
                            to_unit(img[(y * r + sx) * 3 + c]);
                    }
                }
            }
        }
        Ok(Tensor::from_vec(data, (indices.len(), 3, r, r), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn all(&self, dtype: DType) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, None, dtype)
    }

    /// First `len - held_out` items and the last `held_out` items.
    pub fn split(&self, held_out: usize) -> (Dataset, Dataset) {
        let n = self.len();
        let cut = n - held_out.min(n);
        (self.subset(0..cut), self.subset(cut..n))
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        let per = 3 * self.resolution * self.resolution;
        let plane = self.resolution * self.resolution;
        Dataset {
            resolution: self.resolution,
            images: self.images[range.start * per..range.end * per].to_vec(),
            labels: self
                .labels
                .as_ref()
                .map(|l| l[range.start * plane..range.end * plane].to_vec()),
            num_classes: self.num_classes,
            scene: self.scene.clone(),
            sources: self.sources.get(range).map(|s| s.to_vec()).unwrap_or_default(),
        }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.resolution as u64).to_le_bytes());
        h.update(&self.images);
        if let Some(l) = &self.labels {
            h.update(l);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format_version: DATASET_FORMAT_VERSION,
            count: self.len(),
            resolution: self.resolution,
            num_classes: self.num_classes,
            scene: self.scene.clone(),
            checksum: self.checksum(),
        }
    }

    /// Write `manifest`, `images/NNNNN.png` and (when labelled)
    /// `masks/NNNNN.png` under `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let r = self.resolution as u32;
        for i in 0..self.len() {
            png_io::write_rgb(&img_dir.join(format!("{i:05}.png")), r, r, self.image_bytes(i))?;
        }
        if self.labels.is_some() {
            let mask_dir = dir.join("masks");
            std::fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
            for i in 0..self.len() {
                let l = self.labels(i).expect("labelled");
                png_io::write_indexed(&mask_dir.join(format!("{i:05}.png")), r, r, l)?;
            }
        }
        let manifest = serde_json::to_string_pretty(&self.manifest())
            .map_err(|e| Error::Malformed(e.to_string()))?;
        let path = dir.join("manifest");
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }
}

/// `px / 127.5 - 1`.
pub fn to_unit(px: u8) -> f32 {
    (px as f64 / 127.5 - 1.0) as f32
}

/// Inverse of [`to_unit`] with clamping and rounding.
pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Convert a `(n, 3, H, W)` tensor in `[-1, 1]` into HWC bytes per image.
pub fn tensor_to_rgb(images: &Tensor) -> Result<Vec<Vec<u8>>> {
    let (n, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::Shape {
            what: "RGB image batch".into(),
            expected: vec![n, 3, h, w],
            got: images.dims().to_vec(),
        });
    }
    let v = images.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let plane = h * w;
    Ok((0..n)
        .map(|b| {
            let mut out = vec![0u8; 3 * plane];
            for p in 0..plane {
                for ch in 0..3 {
                    out[p * 3 + ch] = to_byte(v[(b * 3 + ch) * plane + p]);
                }
            }
            out
        })
        .collect())
}

/// Procedurally generate a labelled dataset. Deterministic in `spec.seed`;
/// image `i` depends only on `(seed, i)`.
pub fn generate_dataset(spec: &SceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let r = spec.resolution;
    let scenes: Vec<(Vec<u8>, Vec<u8>)> = (0..spec.num_images)
        .into_par_iter()
        .map(|i| render_scene(spec, &mut rng::stream(spec.seed, "scene", i as u64)))
        .collect();
    let mut images = Vec::with_capacity(spec.num_images * 3 * r * r);
    let mut labels = Vec::with_capacity(spec.num_images * r * r);
    for (img, lab) in scenes {
        images.extend(img);
        labels.extend(lab);
    }
    let mut ds = Dataset::from_parts(r, images, Some(labels), Some(spec.num_regions()))?;
    ds.scene = Some(spec.clone());
    Ok(ds)
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    /// Blob radial harmonics `(amplitude, phase)` for orders 2..=4.
    harmonics: [(f64, f64); 3],
}

impl Shape {
    fn random(kind: ShapeKind, area: f64, center: (f64, f64), rng: &mut Rng) -> Self {
        let aspect: f64 = rng.random_range(0.7..1.4);
        let base = (area / std::f64::consts::PI).sqrt();
        let mut harmonics = [(0.0, 0.0); 3];
        for h in &mut harmonics {
            *h = (rng.random_range(0.0..0.15), rng.random_range(0.0..std::f64::consts::TAU));
        }
        let (rx, ry) = match kind {
            // Same area as the ellipse: w*h = pi*rx*ry.
            ShapeKind::Rectangle => {
                let half = (area / 4.0).sqrt();
                (half * aspect.sqrt(), half / aspect.sqrt())
            }
            _ => (base * aspect.sqrt(), base / aspect.sqrt()),
        };
        Self {
            kind,
            cx: center.0,
            cy: center.1,
            rx,
            ry,
            angle: rng.random_range(-0.5..0.5),
            harmonics,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Blob => {
                let theta = v.atan2(u);
                let radius = 1.0
                    + self
                        .harmonics
                        .iter()
                        .enumerate()
                        .map(|(i, (a, p))| a * ((i + 2) as f64 * theta + p).sin())
                        .sum::<f64>();
                (u * u + v * v).sqrt() <= radius
            }
        }
    }
}

fn random_colors(n: usize, min_dist: f64, rng: &mut Rng) -> Vec<[f64; 3]> {
    let mut out: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        let c = [
            rng.random_range(30.0..225.0),
            rng.random_range(30.0..225.0),
            rng.random_range(30.0..225.0),
        ];
        attempts += 1;
        let far = out.iter().all(|o| {
            let d: f64 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            d.sqrt() >= min_dist
        });
        // Give up on the distance constraint rather than loop forever.
        if far || attempts > 10_000 {
            out.push(c);
        }
    }
    out
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise(res: usize, cells: usize, rng: &mut Rng) -> Vec<f64> {
    let g = cells + 1;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.random_range(0.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; res * res];
    for y in 0..res {
        for x in 0..res {
            let fx = (x as f64 + 0.5) / res as f64 * cells as f64;
            let fy = (y as f64 + 0.5) / res as f64 * cells as f64;
            let (ix, iy) = ((fx as usize).min(cells - 1), (fy as usize).min(cells - 1));
            let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
            let at = |i: usize, j: usize| lattice[j * g + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out[y * res + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

fn render_scene(spec: &SceneSpec, rng: &mut Rng) -> (Vec<u8>, Vec<u8>) {
    let r = spec.resolution;
    let rf = r as f64;
    let colors = random_colors(3, spec.min_color_distance, rng);
    let texture = value_noise(r, spec.texture_cells, rng);
    let tint: [f64; 3] = [
        rng.random_range(0.5..1.0),
        rng.random_range(0.5..1.0),
        rng.random_range(0.5..1.0),
    ];
    let pick = |rng: &mut Rng| spec.shapes[rng.random_range(0..spec.shapes.len())];
    let area = |rng: &mut Rng| rng.random_range(spec.size_range[0]..=spec.size_range[1]) * rf * rf;

    let shapes: [Shape; 2] = match spec.region_model {
        RegionModel::FgBg => {
            let kind = pick(rng);
            let a = area(rng);
            let center = (rng.random_range(0.4..0.6) * rf, rng.random_range(0.5..0.65) * rf);
            let body = Shape::random(kind, a, center, rng);
            // Part sits on the upper edge of the body, like hair on a head.
            let part_area = a * rng.random_range(0.3..0.5);
            let lift = body.ry * rng.random_range(0.75..0.95);
            let mut part = Shape::random(
                ShapeKind::Ellipse,
                part_area,
                (body.cx + rng.random_range(-0.1..0.1) * body.rx, body.cy - lift),
                rng,
            );
            part.rx = part.rx.max(body.rx * 0.8);
            part.ry = part_area / (std::f64::consts::PI * part.rx);
            part.angle = body.angle;
            [body, part]
        }
        RegionModel::TwoShapes => {
            let make = |rng: &mut Rng| {
                let kind = pick(rng);
                let a = area(rng) * 0.6;
                let c = (rng.random_range(0.25..0.75) * rf, rng.random_range(0.25..0.75) * rf);
                Shape::random(kind, a, c, rng)
            };
            [make(rng), make(rng)]
        }
    };
    let shade_dir = rng.random_range(0.0..std::f64::consts::TAU);

    let mut img = vec![0u8; 3 * r * r];
    let mut lab = vec![0u8; r * r];
    for y in 0..r {
        for x in 0..r {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut label = 0u8;
            for (k, s) in shapes.iter().enumerate() {
                if s.contains(px, py) {
                    label = (k + 1) as u8;
                }
            }
            let p = y * r + x;
            lab[p] = label;
            let base = colors[label as usize];
            for c in 0..3 {
                let v = if label == 0 {
                    base[c] + spec.texture_amplitude * (texture[p] - 0.5) * tint[c] * 2.0
                } else {
                    let s = &shapes[label as usize - 1];
                    let along = ((px - s.cx) * shade_dir.cos() + (py - s.cy) * shade_dir.sin())
                        / s.rx.max(s.ry).max(1.0);
                    base[c] + spec.shading * along.clamp(-1.0, 1.0)
                };
                img[p * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (img, lab)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png")) == Some(true)
        {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Load 8-bit PNGs from `path` (or from `path/images` when present),
/// centre-cropped to a square and resized to `resolution`.
///
/// Label maps are read from a sibling `masks/` directory when one exists.
pub fn load_png_dir(path: &Path, resolution: usize) -> Result<Dataset> {
    let img_dir = if path.join("images").is_dir() {
        path.join("images")
    } else {
        path.to_path_buf()
    };
    let files = png_files(&img_dir)?;
    if files.is_empty() {
        log::warn!("no PNG files found in {}", img_dir.display());
        return Ok(Dataset::empty(resolution));
    }
    let mut images = Vec::with_capacity(files.len() * 3 * resolution * resolution);
    for f in &files {
        images.extend(png_io::read_rgb_square(f, resolution)?);
    }
    let mask_dir = path.join("masks");
    let (labels, num_classes) = if img_dir != path && mask_dir.is_dir() {
        let mut labels = Vec::with_capacity(files.len() * resolution * resolution);
        for f in &files {
            let m = mask_dir.join(f.file_name().expect("file has a name"));
            labels.extend(png_io::read_labels_square(&m, resolution)?);
        }
        let classes = labels.iter().copied().max().map(|m| m as usize + 1);
        (Some(labels), classes)
    } else {
        (None, None)
    };
    let mut ds = Dataset::from_parts(resolution, images, labels, num_classes)?;
    ds.sources = files;
    if let Ok(text) = std::fs::read_to_string(path.join("manifest")) {
        if let Ok(m) = serde_json::from_str::<DatasetManifest>(&text) {
            ds.scene = m.scene;
            if m.num_classes.is_some() && ds.labels.is_some() {
                ds.num_classes = m.num_classes;
            }
        }
    }
    Ok(ds)
}
