//! Procedural annotated scenes and aligned clear / auxiliary / target triplets.
//!
//! A scene is a textured ground plane seen in perspective with a few flat
//! shapes (disc, box, triangle) on it. Depth follows the ground plane: the
//! bottom row is nearest and depth grows as `1 / row` toward the horizon.
//! Each object takes the ground depth at its base.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::{DepthMap, Image};
use crate::seeds;
use crate::weathergen::{self, FogParams, Intensity, RainSpec};

pub const CLASS_NAMES: [&str; 3] = ["disc", "box", "triangle"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    /// Inclusive object count range.
    pub objects: (usize, usize),
    /// Inclusive object side range, in pixels.
    pub object_size: (usize, usize),
    pub depth_near: f64,
    pub depth_far: f64,
    pub texture_amplitude: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            classes: 3,
            objects: (1, 6),
            object_size: (12, 24),
            depth_near: 10.0,
            depth_far: 300.0,
            texture_amplitude: 0.04,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Input("scene must have a positive size".into()));
        }
        if self.classes == 0 || self.classes > CLASS_NAMES.len() {
            return Err(Error::Input(format!(
                "classes must be in 1..={}, got {}",
                CLASS_NAMES.len(),
                self.classes
            )));
        }
        if self.objects.0 > self.objects.1 {
            return Err(Error::Input("object count range is empty".into()));
        }
        let (lo, hi) = self.object_size;
        if lo < 3 || lo > hi || hi > self.width.min(self.height) {
            return Err(Error::Input(format!("object size range {:?} invalid", self.object_size)));
        }
        if !(0.0 < self.depth_near && self.depth_near <= self.depth_far) {
            return Err(Error::Input("depth range invalid".into()));
        }
        Ok(())
    }

    /// Ground-plane depth at a pixel row.
    pub fn ground_depth(&self, row: usize) -> f64 {
        (self.depth_near * self.height as f64 / (row as f64 + 1.0)).min(self.depth_far)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image: Image,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    pub depth: Option<DepthMap>,
}

impl AnnotatedImage {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(Error::Input(format!(
                "{} boxes but {} labels",
                self.boxes.len(),
                self.labels.len()
            )));
        }
        let (w, h) = (self.image.width() as f64, self.image.height() as f64);
        for b in &self.boxes {
            if !b.is_valid() || b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > w || b.y_max > h {
                return Err(Error::Input(format!("box {b:?} outside {w}x{h} image")));
            }
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {l} outside {classes} classes")));
        }
        if let Some(d) = &self.depth {
            if d.width() != self.image.width() || d.height() != self.image.height() {
                return Err(Error::Shape("depth map does not match image".into()));
            }
        }
        Ok(())
    }
}

/// Pixel mask and bounding box of one rendered object.
struct Shape {
    mask: Vec<(usize, usize)>,
    bbox: BBox,
}

fn rasterize(class: usize, x0: usize, y0: usize, side: usize) -> Shape {
    let s = side as f64;
    let mut mask = Vec::new();
    for dy in 0..side {
        for dx in 0..side {
            let (px, py) = (dx as f64 + 0.5, dy as f64 + 0.5);
            let inside = match class {
                0 => {
                    let r = s / 2.0;
                    (px - r).powi(2) + (py - r).powi(2) <= r * r
                }
                1 => true,
                _ => {
                    // Apex at top center, base along the bottom edge.
                    let half = 0.5 * s * (py / s);
                    (px - s / 2.0).abs() <= half
                }
            };
            if inside {
                mask.push((x0 + dx, y0 + dy));
            }
        }
    }
    let bbox = mask_bbox(&mask);
    Shape { mask, bbox }
}

fn mask_bbox(mask: &[(usize, usize)]) -> BBox {
    let x_min = mask.iter().map(|p| p.0).min().unwrap_or(0);
    let x_max = mask.iter().map(|p| p.0).max().unwrap_or(0);
    let y_min = mask.iter().map(|p| p.1).min().unwrap_or(0);
    let y_max = mask.iter().map(|p| p.1).max().unwrap_or(0);
    BBox::new(x_min as f64, y_min as f64, x_max as f64 + 1.0, y_max as f64 + 1.0)
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Renders one clear-weather scene with tight boxes and a depth map.
pub fn gen_scene(rng: &mut impl Rng, cfg: &SceneConfig) -> AnnotatedImage {
    render_scene(rng, cfg).0
}

/// Like [`gen_scene`], also returning the pixel mask of every object.
fn render_scene(rng: &mut impl Rng, cfg: &SceneConfig) -> (AnnotatedImage, Vec<Vec<(usize, usize)>>) {
    let (w, h) = (cfg.width, cfg.height);
    let mut image = Image::rgb(w, h);
    let mut depth: Vec<f64> = (0..h)
        .flat_map(|y| std::iter::repeat(cfg.ground_depth(y)).take(w))
        .collect();

    let ground: [f64; 3] = {
        let base = rng.gen_range(0.25..0.55);
        [
            base + rng.gen_range(-0.08..0.08),
            base + rng.gen_range(-0.08..0.08),
            base + rng.gen_range(-0.08..0.08),
        ]
    };
    let shade = rng.gen_range(0.05..0.2);
    for y in 0..h {
        // Darker toward the bottom of the frame.
        let row_shade = 1.0 - shade * (y as f64 / h as f64);
        for x in 0..w {
            for (c, g) in ground.iter().enumerate() {
                let noise = rng.gen_range(-1.0..1.0) * cfg.texture_amplitude;
                image.set(c, y, x, (g * row_shade + noise).clamp(0.0, 1.0));
            }
        }
    }
    let ground_lum = luminance(ground);

    let count = rng.gen_range(cfg.objects.0..=cfg.objects.1);
    let mut boxes = Vec::new();
    let mut labels = Vec::new();
    let mut occupied: Vec<BBox> = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..count {
        for _attempt in 0..50 {
            let side = rng.gen_range(cfg.object_size.0..=cfg.object_size.1);
            let x0 = rng.gen_range(0..=w - side);
            let y0 = rng.gen_range(0..=h - side);
            let class = rng.gen_range(0..cfg.classes);
            let shape = rasterize(class, x0, y0, side);
            // One pixel of clearance keeps every object fully visible.
            let padded = BBox::new(
                shape.bbox.x_min - 1.0,
                shape.bbox.y_min - 1.0,
                shape.bbox.x_max + 1.0,
                shape.bbox.y_max + 1.0,
            );
            if occupied.iter().any(|o| crate::geometry::iou(o, &padded) > 0.0) {
                continue;
            }
            let color = loop {
                let c = [
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.05..0.95),
                ];
                if (luminance(c) - ground_lum).abs() >= 0.2 {
                    break c;
                }
            };
            let object_depth = cfg.ground_depth(shape.bbox.y_max as usize - 1) + rng.gen_range(0.0..2.0);
            for &(x, y) in &shape.mask {
                for (c, v) in color.iter().enumerate() {
                    let noise = rng.gen_range(-1.0..1.0) * cfg.texture_amplitude * 0.5;
                    image.set(c, y, x, (v + noise).clamp(0.0, 1.0));
                }
                depth[y * w + x] = object_depth.min(cfg.depth_far);
            }
            occupied.push(shape.bbox);
            boxes.push(shape.bbox);
            labels.push(class);
            masks.push(shape.mask);
            break;
        }
    }

    let scene = AnnotatedImage {
        image: image.quantized(),
        boxes,
        labels,
        depth: Some(quantize_depth(DepthMap::new(w, h, depth).expect("depth is valid"))),
    };
    (scene, masks)
}

fn quantize_depth(d: DepthMap) -> DepthMap {
    let values = d.values().iter().map(|m| (m * 1000.0).round() / 1000.0).collect();
    DepthMap::new(d.width(), d.height(), values).expect("rounding keeps depth valid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weather {
    Fog,
    Rain,
}

impl Weather {
    pub fn other(self) -> Weather {
        match self {
            Weather::Fog => Weather::Rain,
            Weather::Rain => Weather::Fog,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Weather::Fog => "fog",
            Weather::Rain => "rain",
        }
    }
}

impl std::str::FromStr for Weather {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fog" | "foggy" => Ok(Weather::Fog),
            "rain" | "rainy" => Ok(Weather::Rain),
            other => Err(Error::Input(format!("unknown weather `{other}` (expected fog or rain)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeatherConfig {
    /// Attenuation per meter for small, medium and large fog.
    pub fog_beta: [f64; 3],
    pub airlight: [f64; 3],
    pub rain: RainSpec,
}

impl Default for WeatherConfig {
    fn default() -> Self {
        Self {
            fog_beta: Intensity::ALL.map(FogParams::default_beta),
            airlight: FogParams::DEFAULT_AIRLIGHT,
            rain: RainSpec {
                streak_count: 14,
                ..RainSpec::default()
            },
        }
    }
}

impl WeatherConfig {
    pub fn fog_params(&self, level: Intensity) -> FogParams {
        FogParams {
            beta_atm: self.fog_beta[level as usize],
            airlight: self.airlight,
            level,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [s, m, l] = self.fog_beta;
        if !(s < m && m < l) {
            return Err(Error::Input(format!(
                "fog betas must increase small < medium < large, got {:?}",
                self.fog_beta
            )));
        }
        self.rain.validate()
    }

    /// Renders `weather` at `level` over a clear image with depth. Rain
    /// streaks are drawn from `seed`, so different levels of the same seed
    /// differ only by erosion.
    pub fn render(&self, clear: &AnnotatedImage, weather: Weather, level: Intensity, seed: u64) -> Result<Image> {
        let depth = clear
            .depth
            .as_ref()
            .ok_or_else(|| Error::Input("weather rendering needs a depth map".into()))?;
        let img = &clear.image;
        let out = match weather {
            Weather::Fog => weathergen::synth_fog(img, depth, &self.fog_params(level))?,
            Weather::Rain => {
                let mut rng = seeds::rng_for(seed, &[seeds::tag("rain")]);
                let map = weathergen::gen_rain_map(&self.rain, img.width(), img.height(), &mut rng);
                let map = weathergen::rainmix_transform(&map, &mut rng, &self.rain);
                weathergen::apply_rain(img, &map, level, &self.rain)?
            }
        };
        Ok(out.quantized())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedTriplet {
    pub source: AnnotatedImage,
    pub auxiliary: AnnotatedImage,
    pub target: AnnotatedImage,
}

impl AlignedTriplet {
    pub fn width(&self) -> usize {
        self.source.image.width()
    }

    pub fn height(&self) -> usize {
        self.source.image.height()
    }

    pub fn members(&self) -> [&AnnotatedImage; 3] {
        [&self.source, &self.auxiliary, &self.target]
    }

    pub fn members_mut(&mut self) -> [&mut AnnotatedImage; 3] {
        [&mut self.source, &mut self.auxiliary, &mut self.target]
    }

    /// Identical image sizes and identical annotations across the three.
    pub fn is_aligned(&self) -> bool {
        let [s, a, t] = self.members();
        s.image.same_size(&a.image)
            && s.image.same_size(&t.image)
            && s.boxes == a.boxes
            && s.boxes == t.boxes
            && s.labels == a.labels
            && s.labels == t.labels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    pub target: Weather,
    pub target_level: Intensity,
    pub auxiliary_level: Intensity,
    pub weather: WeatherConfig,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            target: Weather::Fog,
            target_level: Intensity::Large,
            auxiliary_level: Intensity::Large,
            weather: WeatherConfig::default(),
        }
    }
}

/// Target is the requested weather, auxiliary the other one; all three share
/// the clear image's annotations.
pub fn build_triplet(clear: &AnnotatedImage, cfg: &TripletConfig, seed: u64) -> Result<AlignedTriplet> {
    if clear.depth.is_none() {
        return Err(Error::Input("build_triplet needs a clear image with depth".into()));
    }
    let weather = |img: Image| AnnotatedImage {
        image: img,
        boxes: clear.boxes.clone(),
        labels: clear.labels.clone(),
        depth: None,
    };
    let target = cfg.weather.render(clear, cfg.target, cfg.target_level, seed)?;
    let auxiliary = cfg.weather.render(clear, cfg.target.other(), cfg.auxiliary_level, seed)?;
    Ok(AlignedTriplet {
        source: clear.clone(),
        auxiliary: weather(auxiliary),
        target: weather(target),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub scene: SceneConfig,
    pub triplet: TripletConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            triplet: TripletConfig::default(),
            n_train: 500,
            n_val: 100,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.triplet.weather.validate()
    }

    /// Short content hash of the generator settings.
    pub fn spec_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One aligned triplet plus target-weather renders at every intensity level.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub triplet: AlignedTriplet,
    pub target_levels: BTreeMap<Intensity, Image>,
}

/// Generates one split. Every sample draws from a stream derived from
/// `(seed, split, index)`, so splits never share a stream.
pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.len(split))
        .map(|i| generate_sample(spec, split, i))
        .collect()
}

pub fn generate_sample(spec: &DatasetSpec, split: Split, index: usize) -> Result<Sample> {
    let sample_seed = seeds::derive_seed(spec.seed, &[seeds::tag(split.name()), index as u64]);
    let mut rng = seeds::rng_for(sample_seed, &[seeds::tag("scene")]);
    let clear = gen_scene(&mut rng, &spec.scene);
    let triplet = build_triplet(&clear, &spec.triplet, sample_seed)?;
    let mut target_levels = BTreeMap::new();
    for level in Intensity::ALL {
        let img = if level == spec.triplet.target_level {
            triplet.target.image.clone()
        } else {
            spec.triplet.weather.render(&clear, spec.triplet.target, level, sample_seed)?
        };
        target_levels.insert(level, img);
    }
    Ok(Sample {
        id: format!("{}_{index:05}", split.name()),
        triplet,
        target_levels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub source: String,
    pub auxiliary: String,
    pub target: String,
    pub depth: String,
    #[serde(default)]
    pub target_levels: BTreeMap<Intensity, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub target_weather: Weather,
    pub classes: Vec<String>,
    pub seed: u64,
    pub spec_hash: String,
    pub annotations: String,
    pub records: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    id: String,
    boxes: Vec<[f64; 4]>,
    labels: Vec<usize>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// Header fields written into a manifest.
#[derive(Clone, Debug)]
pub struct ManifestInfo {
    pub split: String,
    pub target_weather: Weather,
    pub classes: usize,
    pub seed: u64,
    pub spec_hash: String,
}

/// Writes PNGs, a JSON-lines annotation file and `manifest.json` into `dir`.
pub fn write_dataset(samples: &[Sample], dir: &Path, info: &ManifestInfo) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let mut ann = BufWriter::new(File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?);
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let t = &s.triplet;
        let name = |suffix: &str| format!("{}_{suffix}.png", s.id);
        let rec = SampleRecord {
            id: s.id.clone(),
            source: name("source"),
            auxiliary: name("auxiliary"),
            target: name("target"),
            depth: name("depth"),
            target_levels: s
                .target_levels
                .keys()
                .map(|l| (*l, name(&format!("target_{}", l.name()))))
                .collect(),
        };
        t.source.image.save_png(&dir.join(&rec.source))?;
        t.auxiliary.image.save_png(&dir.join(&rec.auxiliary))?;
        t.target.image.save_png(&dir.join(&rec.target))?;
        t.source
            .depth
            .as_ref()
            .ok_or_else(|| Error::Input(format!("sample {} has no depth", s.id)))?
            .save_png(&dir.join(&rec.depth))?;
        for (level, img) in &s.target_levels {
            img.save_png(&dir.join(&rec.target_levels[level]))?;
        }
        let line = AnnotationLine {
            id: s.id.clone(),
            boxes: t.source.boxes.iter().map(BBox::as_array).collect(),
            labels: t.source.labels.clone(),
        };
        serde_json::to_writer(&mut ann, &line).map_err(|e| Error::decode(&ann_path, e))?;
        ann.write_all(b"\n").map_err(|e| Error::io(&ann_path, e))?;
        records.push(rec);
    }
    ann.flush().map_err(|e| Error::io(&ann_path, e))?;
    let manifest = DatasetManifest {
        split: info.split.clone(),
        target_weather: info.target_weather,
        classes: CLASS_NAMES[..info.classes].iter().map(|s| s.to_string()).collect(),
        seed: info.seed,
        spec_hash: info.spec_hash.clone(),
        annotations: ANNOTATIONS_FILE.to_string(),
        records,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Accepts either a manifest file or the directory holding `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::decode(&path, e))
}

/// Loads every sample listed in a manifest.
pub fn read_dataset(path: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let path = manifest_path(path);
    let manifest = read_manifest(&path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let ann_path = dir.join(&manifest.annotations);
    let file = File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut annotations = BTreeMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: AnnotationLine = serde_json::from_str(&line).map_err(|e| Error::decode(&ann_path, e))?;
        annotations.insert(ann.id.clone(), ann);
    }
    let mut samples = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let ann = annotations
            .get(&rec.id)
            .ok_or_else(|| Error::decode(&ann_path, format!("no annotation for sample {}", rec.id)))?;
        let boxes: Vec<BBox> = ann.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect();
        let annotated = |image: Image, depth: Option<DepthMap>| AnnotatedImage {
            image,
            boxes: boxes.clone(),
            labels: ann.labels.clone(),
            depth,
        };
        let depth = DepthMap::load_png(&dir.join(&rec.depth))?;
        let triplet = AlignedTriplet {
            source: annotated(Image::load_png(&dir.join(&rec.source))?, Some(depth)),
            auxiliary: annotated(Image::load_png(&dir.join(&rec.auxiliary))?, None),
            target: annotated(Image::load_png(&dir.join(&rec.target))?, None),
        };
        let mut target_levels = BTreeMap::new();
        for (level, file) in &rec.target_levels {
            target_levels.insert(*level, Image::load_png(&dir.join(file))?);
        }
        samples.push(Sample {
            id: rec.id.clone(),
            triplet,
            target_levels,
        });
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;

    #[test]
    fn empty_object_range_gives_no_boxes() {
        let cfg = SceneConfig {
            objects: (0, 0),
            ..Default::default()
        };
        let scene = gen_scene(&mut rng_for(1, &[]), &cfg);
        assert!(scene.boxes.is_empty() && scene.labels.is_empty());
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let cfg = SceneConfig::default();
        let a = gen_scene(&mut rng_for(5, &[]), &cfg);
        let b = gen_scene(&mut rng_for(5, &[]), &cfg);
        assert_eq!(a, b);
        a.validate(cfg.classes).unwrap();
        let d = a.depth.as_ref().unwrap();
        // Lower rows are nearer.
        assert!(d.get(cfg.height - 1, 0) <= d.get(cfg.height / 2, 0));
    }

    #[test]
    fn boxes_match_rendered_masks() {
        let cfg = SceneConfig::default();
        let mut seen = 0;
        let mut seed = 0;
        while seen < 5000 {
            let (scene, masks) = render_scene(&mut rng_for(seed, &[]), &cfg);
            assert_eq!(masks.len(), scene.boxes.len());
            for (mask, b) in masks.iter().zip(&scene.boxes) {
                let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
                for &(x, y) in mask {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
                let derived = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64);
                assert_eq!(crate::geometry::iou(&derived, b), 1.0);
                seen += 1;
            }
            seed += 1;
        }
    }

    fn small_spec(n_train: usize, n_val: usize) -> DatasetSpec {
        DatasetSpec {
            n_train,
            n_val,
            ..Default::default()
        }
    }

    fn info(spec: &DatasetSpec) -> ManifestInfo {
        ManifestInfo {
            split: "val".into(),
            target_weather: spec.triplet.target,
            classes: spec.scene.classes,
            seed: spec.seed,
            spec_hash: spec.spec_hash(),
        }
    }

    #[test]
    fn empty_dataset_has_no_records() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(0, 0);
        let m = write_dataset(&[], dir.path(), &info(&spec)).unwrap();
        assert!(m.records.is_empty());
        let (read, samples) = read_dataset(dir.path()).unwrap();
        assert_eq!(read, m);
        assert!(samples.is_empty());
    }

    #[test]
    fn ten_samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(0, 10);
        let samples = generate_split(&spec, Split::Val).unwrap();
        write_dataset(&samples, dir.path(), &info(&spec)).unwrap();
        let (_, read) = read_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(read.len(), 10);
        for (a, b) in samples.iter().zip(&read) {
            assert_eq!(a.id, b.id);
            for (x, y) in a.triplet.members().into_iter().zip(b.triplet.members()) {
                assert_eq!(x.boxes, y.boxes);
                assert_eq!(x.labels, y.labels);
                assert_eq!(x.image, y.image);
            }
            assert_eq!(a.target_levels, b.target_levels);
        }
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(0, 2);
        let samples = generate_split(&spec, Split::Val).unwrap();
        let m = write_dataset(&samples, dir.path(), &info(&spec)).unwrap();
        let victim = &m.records[1].target;
        std::fs::remove_file(dir.path().join(victim)).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains(victim.as_str()), "{err}");
        assert!(err.is_input_error());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn every_sample_is_an_aligned_triplet(seed in 0u64..10_000, index in 0usize..50) {
            let spec = DatasetSpec { seed, ..small_spec(50, 0) };
            let s = generate_sample(&spec, Split::Train, index).unwrap();
            proptest::prop_assert!(s.triplet.is_aligned());
            s.triplet.source.validate(spec.scene.classes).unwrap();
            proptest::prop_assert_eq!(&s, &generate_sample(&spec, Split::Train, index).unwrap());
        }
    }

    #[test]
    fn triplet_requires_depth() {
        let mut scene = gen_scene(&mut rng_for(2, &[]), &SceneConfig::default());
        scene.depth = None;
        assert!(matches!(
            build_triplet(&scene, &TripletConfig::default(), 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn fog_target_uses_rain_auxiliary() {
        let scene = gen_scene(&mut rng_for(3, &[]), &SceneConfig::default());
        let cfg = TripletConfig::default();
        let t = build_triplet(&scene, &cfg, 17).unwrap();
        assert!(t.is_aligned());
        let fog = cfg.weather.render(&scene, Weather::Fog, Intensity::Large, 17).unwrap();
        let rain = cfg.weather.render(&scene, Weather::Rain, Intensity::Large, 17).unwrap();
        assert_eq!(t.target.image, fog);
        assert_eq!(t.auxiliary.image, rain);
        assert_ne!(fog, rain);
    }

    #[test]
    fn zero_weather_reproduces_clear_image() {
        let scene = gen_scene(&mut rng_for(4, &[]), &SceneConfig::default());
        let mut cfg = TripletConfig::default();
        cfg.weather.fog_beta = [0.0; 3];
        cfg.weather.rain.streak_count = 0;
        let t = build_triplet(&scene, &cfg, 1).unwrap();
        assert_eq!(t.target.image, scene.image);
        assert_eq!(t.auxiliary.image, scene.image);
        assert_eq!(
            serde_json::to_string(&t.source.boxes).unwrap(),
            serde_json::to_string(&t.target.boxes).unwrap()
        );
    }

    #[test]
    fn splits_are_disjoint_and_reproducible() {
        let spec = DatasetSpec {
            n_train: 3,
            n_val: 3,
            ..Default::default()
        };
        let train = generate_split(&spec, Split::Train).unwrap();
        let val = generate_split(&spec, Split::Val).unwrap();
        assert_eq!(train, generate_split(&spec, Split::Train).unwrap());
        for t in &train {
            assert!(val.iter().all(|v| v.triplet.source.image != t.triplet.source.image));
        }
    }
}
