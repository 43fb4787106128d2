//! Procedural glyph dataset. Every class is a distinct (shape, color) glyph
//! placed somewhere on a noisy background; distractor glyphs drawn from the
//! train classes' pool share every image, so features biased toward seen
//! classes land on the wrong region while the shared target glyph is the only
//! signal common to a class's support and query samples. Train/val/test class
//! splits are disjoint.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container;
use crate::error::{DataError, ProtocolError};
use crate::fewshot::{Episode, EpisodeSample};
use crate::tensor::Tensor;

pub const SHAPE_COUNT: usize = 5;
pub const COLOR_COUNT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub samples_per_class: usize,
    /// Distractor glyphs per val/test image. Training images stay clean:
    /// the embedding learns glyphs without clutter suppression, and unseen-
    /// class episodes then face familiar glyphs as clutter.
    pub distractors: usize,
    /// Distractor glyphs per train image.
    pub train_distractors: usize,
    /// Size of the shared distractor glyph pool, drawn from the train
    /// classes' targets; images of every split use this pool.
    pub distractor_pool: usize,
    /// Distractor glyph size relative to the target's; the target is the
    /// dominant glyph, which is what grounds an image's class identity.
    pub distractor_scale: f32,
    pub noise_sigma: f32,
    pub glyph_size: usize,
    pub size_jitter: usize,
    pub color_jitter: f32,
    /// Target position uniform over the margin grid; `false` pins it to the
    /// image center (for separability fixtures).
    pub position_jitter: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 48,
            train_classes: 24,
            val_classes: 6,
            test_classes: 10,
            samples_per_class: 40,
            distractors: 2,
            train_distractors: 0,
            distractor_pool: 24,
            distractor_scale: 1.0,
            noise_sigma: 0.03,
            glyph_size: 14,
            size_jitter: 1,
            color_jitter: 0.10,
            position_jitter: true,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Parses the flat `key = value` spec format; unset keys keep defaults.
    pub fn parse(text: &str, filename: &str) -> Result<Self, crate::error::ConfigError> {
        let mut spec = SynthSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() || line.starts_with('[') {
                continue;
            }
            let err = |detail: String| crate::error::ConfigError::Parse {
                file: filename.to_string(),
                line: lineno + 1,
                detail,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            spec.apply(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(spec)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("cannot parse {value:?}"))
        }
        match key {
            "image_size" => self.image_size = num(value)?,
            "train_classes" => self.train_classes = num(value)?,
            "val_classes" => self.val_classes = num(value)?,
            "test_classes" => self.test_classes = num(value)?,
            "samples_per_class" => self.samples_per_class = num(value)?,
            "distractors" => self.distractors = num(value)?,
            "train_distractors" => self.train_distractors = num(value)?,
            "distractor_pool" => self.distractor_pool = num(value)?,
            "distractor_scale" => self.distractor_scale = num(value)?,
            "noise_sigma" => self.noise_sigma = num(value)?,
            "glyph_size" => self.glyph_size = num(value)?,
            "size_jitter" => self.size_jitter = num(value)?,
            "color_jitter" => self.color_jitter = num(value)?,
            "position_jitter" => self.position_jitter = num(value)?,
            "seed" => self.seed = num(value)?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> usize {
        SHAPE_COUNT * COLOR_COUNT
    }

    pub fn class_count(&self) -> usize {
        self.train_classes + self.val_classes + self.test_classes
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.class_count() > self.vocabulary() {
            return Err(DataError::BadManifest {
                path: "spec".into(),
                line: 0,
                detail: format!(
                    "splits need {} classes but the glyph vocabulary has {}",
                    self.class_count(),
                    self.vocabulary()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Inclusive pixel bounding box of the target glyph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    fn intersects(&self, other: &BBox) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Record {
    pub id: usize,
    pub class: usize,
    pub split: Split,
    pub bbox: BBox,
}

/// Loaded dataset: one image tensor per record plus the manifest.
pub struct Dataset {
    pub image_size: usize,
    images: Vec<f32>,
    pub records: Vec<Record>,
    per_class: Vec<Vec<usize>>,
    split_classes: [Vec<usize>; 3],
    pub content_hash: String,
}

fn glyph_of(class: usize) -> (usize, usize) {
    (class % SHAPE_COUNT, class / SHAPE_COUNT)
}

const PALETTE: [[f32; 3]; COLOR_COUNT] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.85, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.20, 0.85],
    [0.10, 0.85, 0.90],
    [0.95, 0.55, 0.10],
    [0.95, 0.95, 0.95],
];

const BACKGROUND: f32 = 0.12;
const MARGIN: usize = 2;

/// Coverage of a shape at local glyph coordinates, in [0,1].
fn shape_alpha(shape: usize, x: usize, y: usize, size: usize) -> f32 {
    let s = size as f32;
    let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
    let (cx, cy) = (s / 2.0, s / 2.0);
    let r = s / 2.0;
    match shape {
        // disk
        0 => {
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            (r - d + 0.5).clamp(0.0, 1.0)
        }
        // square
        1 => 1.0,
        // upward triangle
        2 => {
            let half = (fy / s) * r;
            if (fx - cx).abs() <= half {
                1.0
            } else {
                0.0
            }
        }
        // ring
        3 => {
            let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            let outer = (r - d + 0.5).clamp(0.0, 1.0);
            let inner = (0.55 * r - d + 0.5).clamp(0.0, 1.0);
            outer - inner
        }
        // cross
        _ => {
            let bar = s / 3.0;
            if (fx - cx).abs() <= bar / 2.0 || (fy - cy).abs() <= bar / 2.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn draw_glyph(
    pixels: &mut [f32],
    image_size: usize,
    class: usize,
    bbox: &BBox,
    color_jitter: f32,
    rng: &mut ChaCha8Rng,
) {
    let (shape, color_idx) = glyph_of(class);
    let base = PALETTE[color_idx];
    let jitter: [f32; 3] = [
        1.0 + rng.gen_range(-color_jitter..=color_jitter),
        1.0 + rng.gen_range(-color_jitter..=color_jitter),
        1.0 + rng.gen_range(-color_jitter..=color_jitter),
    ];
    let size = bbox.x1 - bbox.x0 + 1;
    for gy in 0..size {
        for gx in 0..size {
            let a = shape_alpha(shape, gx, gy, size);
            if a <= 0.0 {
                continue;
            }
            let (x, y) = (bbox.x0 + gx, bbox.y0 + gy);
            for ch in 0..3 {
                let idx = (y * image_size + x) * 3 + ch;
                let color = (base[ch] * jitter[ch]).clamp(0.0, 1.0);
                pixels[idx] = pixels[idx] * (1.0 - a) + color * a;
            }
        }
    }
}

fn sample_bbox(
    image_size: usize,
    glyph_size: usize,
    size_jitter: usize,
    centered: bool,
    rng: &mut ChaCha8Rng,
) -> BBox {
    let min_size = glyph_size.saturating_sub(size_jitter).max(4);
    let max_size = (glyph_size + size_jitter).min(image_size - 2 * MARGIN);
    let size = if centered {
        glyph_size
    } else {
        rng.gen_range(min_size..=max_size)
    };
    let span = image_size - 2 * MARGIN - size;
    let (x0, y0) = if centered {
        ((image_size - size) / 2, (image_size - size) / 2)
    } else {
        (
            MARGIN + rng.gen_range(0..=span),
            MARGIN + rng.gen_range(0..=span),
        )
    };
    BBox {
        x0,
        y0,
        x1: x0 + size - 1,
        y1: y0 + size - 1,
    }
}

/// Box-Muller gaussian; two uniforms per draw keeps the stream deterministic.
fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

fn render_sample(
    spec: &SynthSpec,
    class: usize,
    count: usize,
    distractor_pool: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, BBox) {
    let n = spec.image_size;
    let mut pixels = vec![BACKGROUND; n * n * 3];
    let target_bbox = sample_bbox(
        n,
        spec.glyph_size,
        spec.size_jitter,
        !spec.position_jitter,
        rng,
    );

    // distractors first so the target is never occluded; they render at a
    // fraction of the target size, so the dominant glyph carries the label
    let distractor_size = ((spec.glyph_size as f32 * spec.distractor_scale).round() as usize).max(4);
    for _ in 0..count {
        let choices: Vec<usize> = distractor_pool.iter().copied().filter(|&c| c != class).collect();
        if choices.is_empty() {
            break;
        }
        let d_class = choices[rng.gen_range(0..choices.len())];
        let mut placed = None;
        for _ in 0..50 {
            let bbox = sample_bbox(n, distractor_size, spec.size_jitter, false, rng);
            if !bbox.intersects(&target_bbox) {
                placed = Some(bbox);
                break;
            }
        }
        if let Some(bbox) = placed {
            draw_glyph(&mut pixels, n, d_class, &bbox, spec.color_jitter, rng);
        }
    }
    draw_glyph(&mut pixels, n, class, &target_bbox, spec.color_jitter, rng);

    if spec.noise_sigma > 0.0 {
        for p in &mut pixels {
            *p = (*p + spec.noise_sigma * gaussian(rng)).clamp(0.0, 1.0);
        }
    } else {
        for p in &mut pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }
    (pixels, target_bbox)
}

pub fn images_path(dir: &Path) -> PathBuf {
    dir.join("images.cant")
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}

/// Generates the dataset files: a rank-4 image container and a manifest with
/// one `id class split x0 y0 x1 y1` line per record. Deterministic in the
/// spec seed, byte for byte.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<String, DataError> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| DataError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // split assignment: shuffled glyph vocabulary, then contiguous runs
    let mut classes: Vec<usize> = (0..spec.vocabulary()).collect();
    classes.shuffle(&mut rng);
    let train: Vec<usize> = classes[..spec.train_classes].to_vec();
    let pool: Vec<usize> = train[..spec.distractor_pool.min(train.len())].to_vec();
    let val: Vec<usize> = classes[spec.train_classes..spec.train_classes + spec.val_classes].to_vec();
    let test: Vec<usize> =
        classes[spec.train_classes + spec.val_classes..spec.class_count()].to_vec();

    let n = spec.image_size;
    let total = spec.class_count() * spec.samples_per_class;
    let mut all_pixels = Vec::with_capacity(total * n * n * 3);
    let mut manifest = String::new();
    let mut id = 0usize;
    for (split, class_list) in [
        (Split::Train, &train),
        (Split::Val, &val),
        (Split::Test, &test),
    ] {
        for &class in class_list {
            let count = if split == Split::Train {
                spec.train_distractors
            } else {
                spec.distractors
            };
            for _ in 0..spec.samples_per_class {
                let (pixels, bbox) = render_sample(spec, class, count, &pool, &mut rng);
                all_pixels.extend_from_slice(&pixels);
                manifest.push_str(&format!(
                    "{id} {class} {} {} {} {} {}\n",
                    split.as_str(),
                    bbox.x0,
                    bbox.y0,
                    bbox.x1,
                    bbox.y1
                ));
                id += 1;
            }
        }
    }

    let tensor = Tensor::new(vec![total, n, n, 3], all_pixels)?;
    container::write_file(&images_path(out_dir), &tensor)?;
    fs::write(manifest_path(out_dir), &manifest).map_err(|e| DataError::Io {
        path: manifest_path(out_dir).display().to_string(),
        source: e,
    })?;
    container::hash_files(&[&images_path(out_dir), &manifest_path(out_dir)])
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let images_file = images_path(dir);
        let manifest_file = manifest_path(dir);
        let content_hash = container::hash_files(&[&images_file, &manifest_file])?;
        let tensor = container::read_file(&images_file)?;
        let shape = tensor.shape().to_vec();
        if shape.len() != 4 || shape[3] != 3 || shape[1] != shape[2] {
            return Err(DataError::BadManifest {
                path: images_file.display().to_string(),
                line: 0,
                detail: format!("expected [n, s, s, 3] images, got {shape:?}"),
            });
        }
        let image_size = shape[1];
        let text = fs::read_to_string(&manifest_file).map_err(|e| DataError::Io {
            path: manifest_file.display().to_string(),
            source: e,
        })?;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |detail: &str| DataError::BadManifest {
                path: manifest_file.display().to_string(),
                line: lineno + 1,
                detail: detail.to_string(),
            };
            if fields.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("not an integer"));
            records.push(Record {
                id: parse(fields[0])?,
                class: parse(fields[1])?,
                split: Split::parse(fields[2]).ok_or_else(|| bad("unknown split"))?,
                bbox: BBox {
                    x0: parse(fields[3])?,
                    y0: parse(fields[4])?,
                    x1: parse(fields[5])?,
                    y1: parse(fields[6])?,
                },
            });
        }
        if records.len() != shape[0] {
            return Err(DataError::BadManifest {
                path: manifest_file.display().to_string(),
                line: 0,
                detail: format!("{} records vs {} images", records.len(), shape[0]),
            });
        }

        let class_max = records.iter().map(|r| r.class).max().unwrap_or(0);
        let mut per_class = vec![Vec::new(); class_max + 1];
        let mut split_classes: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for r in &records {
            per_class[r.class].push(r.id);
            let bucket = match r.split {
                Split::Train => &mut split_classes[0],
                Split::Val => &mut split_classes[1],
                Split::Test => &mut split_classes[2],
            };
            if !bucket.contains(&r.class) {
                bucket.push(r.class);
            }
        }
        Ok(Self {
            image_size,
            images: tensor.into_data(),
            records,
            per_class,
            split_classes,
            content_hash,
        })
    }

    pub fn classes_of(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.split_classes[0],
            Split::Val => &self.split_classes[1],
            Split::Test => &self.split_classes[2],
        }
    }

    pub fn records_of_class(&self, class: usize) -> &[usize] {
        &self.per_class[class]
    }

    /// Image as an (s, s, 3) tensor in [0, 1].
    pub fn image(&self, record: usize) -> Tensor {
        let n = self.image_size;
        let stride = n * n * 3;
        Tensor::new(
            vec![n, n, 3],
            self.images[record * stride..(record + 1) * stride].to_vec(),
        )
        .expect("image extents")
    }

    /// Position of this train class in the global-classifier index.
    pub fn global_index(&self, class: usize) -> Option<usize> {
        self.split_classes[0].iter().position(|&c| c == class)
    }

    pub fn bbox(&self, record: usize) -> BBox {
        self.records[record].bbox
    }
}

/// Samples one C-way K-shot episode with n_query queries per class from one
/// split. Classes get a fresh 0..C relabeling; support and query records are
/// disjoint.
pub fn sample_episode(
    dataset: &Dataset,
    split: Split,
    way: usize,
    shot: usize,
    n_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, ProtocolError> {
    let classes = dataset.classes_of(split);
    if classes.len() < way {
        return Err(ProtocolError::NotEnoughClasses {
            split: split.as_str().to_string(),
            available: classes.len(),
            needed: way,
        });
    }
    let mut shuffled = classes.to_vec();
    shuffled.shuffle(rng);
    let picked = &shuffled[..way];

    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * n_query);
    for (episode_label, &class) in picked.iter().enumerate() {
        let records = dataset.records_of_class(class);
        if records.len() < shot + n_query {
            return Err(ProtocolError::NotEnoughSamples {
                class,
                available: records.len(),
                needed: shot + n_query,
            });
        }
        let mut pool = records.to_vec();
        pool.shuffle(rng);
        for &record in &pool[..shot] {
            support.push(EpisodeSample {
                record,
                episode_label,
                global_class: class,
            });
        }
        for &record in &pool[shot..shot + n_query] {
            query.push(EpisodeSample {
                record,
                episode_label,
                global_class: class,
            });
        }
    }
    let episode = Episode {
        way,
        shot,
        queries_per_class: n_query,
        support,
        query,
    };
    episode.validate()?;
    Ok(episode)
}
