//! Synthetic shapes scenes, labeled-subset splits, and the on-disk dataset
//! layout:
//!
//! ```text
//! <dir>/images/000000.png ...
//! <dir>/annotations.json
//! <dir>/splits/<fraction>_<seed>.json
//! ```

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::rng::{stream, tag};

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle"];
pub const SCENE_SIZE: usize = 64;
const MIN_SIDE_PX: usize = 8;
const MAX_SIDE_PX: usize = 24;
const MAX_OVERLAP_IOU: f64 = 0.3;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Schema { path: PathBuf, msg: String },
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("{0}")]
    Split(String),
}

type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Row-major `height × width × 3` image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Snaps every value to the nearest `k / 255`.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = quantize(*v);
        }
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        let n = (self.width * self.height) as f64;
        m.map(|v| v / n)
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// One ground-truth object; `class` is in `1..=NUM_CLASSES`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<Object>,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    class: usize,
    x0: usize,
    y0: usize,
    side: usize,
}

impl Shape {
    /// Pixel membership by pixel-center sampling.
    fn covers(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.side || y >= self.y0 + self.side {
            return false;
        }
        let s = self.side as f64;
        let (u, v) = ((x - self.x0) as f64 + 0.5, (y - self.y0) as f64 + 0.5);
        match self.class {
            1 => {
                let r = s / 2.0;
                (u - r).powi(2) + (v - r).powi(2) <= r * r
            }
            2 => true,
            // Apex at top centre, base along the bottom edge.
            _ => (u - s / 2.0).abs() <= v / 2.0,
        }
    }

    /// Tight pixel bounds `(x1, y1, x2, y2)`, exclusive on the far side.
    fn bounds(&self) -> (usize, usize, usize, usize) {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in self.y0..self.y0 + self.side {
            for x in self.x0..self.x0 + self.side {
                if self.covers(x, y) {
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        (x1, y1, x2, y2)
    }

    fn bbox(&self) -> BBox {
        let (x1, y1, x2, y2) = self.bounds();
        let s = SCENE_SIZE as f64;
        BBox::from_corners(x1 as f64 / s, y1 as f64 / s, x2 as f64 / s, y2 as f64 / s)
    }
}

fn render(seed: u64) -> (Scene, Vec<Shape>, Vec<[f64; 3]>) {
    let mut rng = stream(seed, &[]);
    let size = SCENE_SIZE;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.35));
    let mut image = Image::filled(size, size, base);
    for v in image.data.iter_mut() {
        *v += rng.random_range(-0.04..0.04);
    }

    let wanted = rng.random_range(1..=4usize);
    let (mut shapes, mut colors): (Vec<Shape>, Vec<[f64; 3]>) = (Vec::new(), Vec::new());
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..wanted {
        for _attempt in 0..50 {
            let side = rng.random_range(MIN_SIDE_PX + 2..=MAX_SIDE_PX);
            let shape = Shape {
                class: rng.random_range(1..=NUM_CLASSES),
                x0: rng.random_range(0..=size - side),
                y0: rng.random_range(0..=size - side),
                side,
            };
            let (x1, y1, x2, y2) = shape.bounds();
            if x2 - x1 < MIN_SIDE_PX || y2 - y1 < MIN_SIDE_PX {
                continue;
            }
            let b = shape.bbox();
            if boxes.iter().any(|o| iou(o, &b) >= MAX_OVERLAP_IOU) {
                continue;
            }
            // A bright channel keeps objects apart from the dark background.
            let mut color: [f64; 3] = std::array::from_fn(|_| quantize(rng.random_range(0.0..1.0)));
            let bright = rng.random_range(0..3);
            color[bright] = quantize(rng.random_range(0.55..1.0));
            if colors.contains(&color) {
                continue;
            }
            shapes.push(shape);
            colors.push(color);
            boxes.push(b);
            break;
        }
    }
    for (shape, color) in shapes.iter().zip(&colors) {
        for y in shape.y0..shape.y0 + shape.side {
            for x in shape.x0..shape.x0 + shape.side {
                if shape.covers(x, y) {
                    image.set_pixel(x, y, *color);
                }
            }
        }
    }
    image.quantize();
    let objects = shapes
        .iter()
        .zip(boxes)
        .map(|(s, bbox)| Object { class: s.class, bbox })
        .collect();
    (Scene { image, objects }, shapes, colors)
}

/// Deterministic scene from a seed: 1–4 flat-coloured shapes on a dark noisy
/// background, boxes equal to the exact pixel bounds of each shape.
pub fn generate_scene(seed: u64) -> Scene {
    render(seed).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub total_images: usize,
    pub labeled_fraction: f64,
    pub subset_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// A random labeled subset of `round(fraction · total)` ids; every id is unlabeled.
pub fn make_splits(spec: &SplitSpec) -> Result<Split> {
    let f = spec.labeled_fraction;
    if !(f > 0.0 && f <= 1.0) {
        return Err(DataError::Split(format!("labeled fraction {f} outside (0, 1]")));
    }
    let n = (f * spec.total_images as f64).round() as usize;
    if n == 0 {
        return Err(DataError::Split(format!(
            "fraction {f} of {} images leaves no labeled image",
            spec.total_images
        )));
    }
    let mut ids: Vec<usize> = (0..spec.total_images).collect();
    ids.shuffle(&mut stream(spec.subset_seed, &[tag::LABELED_ORDER, spec.total_images as u64]));
    let mut labeled = ids[..n].to_vec();
    labeled.sort_unstable();
    Ok(Split {
        labeled,
        unlabeled: (0..spec.total_images).collect(),
    })
}

/// Scenes of one partition (train or eval) held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
}

impl Dataset {
    /// Scene `i` depends only on `(master_seed, partition_tag, i)`.
    pub fn generate(n: usize, master_seed: u64, partition_tag: u64) -> Self {
        Self {
            scenes: (0..n)
                .map(|i| generate_scene(crate::rng::derive_seed(master_seed, &[partition_tag, i as u64])))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Per-channel mean over all images.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for s in &self.scenes {
            let c = s.image.channel_means();
            for k in 0..3 {
                m[k] += c[k];
            }
        }
        m.map(|v| v / self.scenes.len().max(1) as f64)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CocoImage {
    id: usize,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CocoAnnotation {
    id: usize,
    image_id: usize,
    category_id: usize,
    /// `[x, y, w, h]` in pixels.
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CocoCategory {
    id: usize,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";

fn image_file(i: usize) -> String {
    format!("images/{i:06}.png")
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::save_buffer(path, &bytes, img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8).map_err(|e| {
        DataError::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    })
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    Ok(Image {
        width: rgb.width() as usize,
        height: rgb.height() as usize,
        data: rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    let mut coco = CocoFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: CLASS_NAMES
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: i + 1,
                name: n.to_string(),
            })
            .collect(),
    };
    for (i, scene) in ds.scenes.iter().enumerate() {
        let file_name = image_file(i);
        save_png(&dir.join(&file_name), &scene.image)?;
        let (w, h) = (scene.image.width as f64, scene.image.height as f64);
        coco.images.push(CocoImage {
            id: i,
            file_name,
            width: scene.image.width,
            height: scene.image.height,
        });
        for o in &scene.objects {
            let (x1, y1, x2, y2) = o.bbox.to_corners();
            coco.annotations.push(CocoAnnotation {
                id: coco.annotations.len(),
                image_id: i,
                category_id: o.class,
                bbox: [x1 * w, y1 * h, (x2 - x1) * w, (y2 - y1) * h],
            });
        }
    }
    let path = dir.join(ANNOTATIONS_FILE);
    let json = serde_json::to_string_pretty(&coco).expect("annotations serialize");
    std::fs::write(&path, json).map_err(io_err(&path))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(ANNOTATIONS_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let schema = |msg: String| DataError::Schema { path: path.clone(), msg };
    let coco: CocoFile = serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?;

    let on_disk = match std::fs::read_dir(dir.join("images")) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
            .count(),
        Err(_) => 0,
    };
    if on_disk != coco.images.len() {
        return Err(schema(format!("{} images listed, {on_disk} png files on disk", coco.images.len())));
    }
    for (i, c) in coco.categories.iter().enumerate() {
        if c.id != i + 1 || c.id > NUM_CLASSES {
            return Err(schema(format!("unexpected category id {}", c.id)));
        }
    }

    let mut scenes = Vec::with_capacity(coco.images.len());
    for (i, rec) in coco.images.iter().enumerate() {
        if rec.id != i {
            return Err(schema(format!("image ids must be 0..n in order; found {} at position {i}", rec.id)));
        }
        let img_path = dir.join(&rec.file_name);
        let image = load_png(&img_path)?;
        if image.width != rec.width || image.height != rec.height {
            return Err(schema(format!(
                "image {i} is {}x{}, annotations say {}x{}",
                image.width, image.height, rec.width, rec.height
            )));
        }
        scenes.push(Scene {
            image,
            objects: Vec::new(),
        });
    }
    for a in &coco.annotations {
        let scene = scenes
            .get_mut(a.image_id)
            .ok_or_else(|| schema(format!("annotation {} refers to missing image {}", a.id, a.image_id)))?;
        if !(1..=NUM_CLASSES).contains(&a.category_id) {
            return Err(schema(format!("annotation {} has category {}", a.id, a.category_id)));
        }
        let (w, h) = (scene.image.width as f64, scene.image.height as f64);
        let [x, y, bw, bh] = a.bbox;
        if !a.bbox.iter().all(|v| v.is_finite()) || bw <= 0.0 || bh <= 0.0 || x < 0.0 || y < 0.0 || x + bw > w || y + bh > h {
            return Err(schema(format!("annotation {} has out-of-image bbox {:?}", a.id, a.bbox)));
        }
        scene.objects.push(Object {
            class: a.category_id,
            bbox: BBox::from_corners(x / w, y / h, (x + bw) / w, (y + bh) / h),
        });
    }
    Ok(Dataset { scenes })
}

pub fn split_path(dir: &Path, fraction: f64, seed: u64) -> PathBuf {
    dir.join("splits").join(format!("{fraction}_{seed}.json"))
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitFile {
    spec: SplitSpec,
    labeled: Vec<usize>,
}

pub fn save_split(dir: &Path, spec: &SplitSpec, split: &Split) -> Result<PathBuf> {
    let path = split_path(dir, spec.labeled_fraction, spec.subset_seed);
    let parent = path.parent().expect("split path has a parent");
    std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    let json = serde_json::to_string_pretty(&SplitFile {
        spec: *spec,
        labeled: split.labeled.clone(),
    })
    .expect("split serializes");
    std::fs::write(&path, json).map_err(io_err(&path))?;
    Ok(path)
}

pub fn load_split(path: &Path) -> Result<(SplitSpec, Split)> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let f: SplitFile = serde_json::from_str(&text).map_err(|e| DataError::Schema {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if f.labeled.is_empty() || f.labeled.iter().any(|&i| i >= f.spec.total_images) {
        return Err(DataError::Schema {
            path: path.to_path_buf(),
            msg: "labeled ids empty or out of range".into(),
        });
    }
    Ok((
        f.spec,
        Split {
            labeled: f.labeled,
            unlabeled: (0..f.spec.total_images).collect(),
        },
    ))
}

/// Writes `<root>/train` and `<root>/eval`.
pub fn generate_dataset(root: &Path, n_train: usize, n_eval: usize, master_seed: u64) -> Result<(Dataset, Dataset)> {
    let train = Dataset::generate(n_train, master_seed, tag::TRAIN_SCENE);
    let eval = Dataset::generate(n_eval, master_seed, tag::EVAL_SCENE);
    save_dataset(&root.join("train"), &train)?;
    save_dataset(&root.join("eval"), &eval)?;
    Ok((train, eval))
}
