//! Weak, strong and supervised-branch augmentation pipelines.
//!
//! Every sampled parameter lands in an [`AugRecord`], which is enough to
//! replay the augmentation exactly. Geometric ops compose into one affine map
//! in normalized canvas coordinates and the image is resampled once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Object};
use crate::geometry::{transform_box_visible, Affine2D, GeometryError};
use crate::teacher::PseudoLabelSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoutSpec {
    pub p: f64,
    /// Erased fraction of the image area.
    pub scale: (f64, f64),
    /// Aspect ratio `h / w`, sampled log-uniformly.
    pub ratio: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub hflip_p: f64,
    /// Rescale factors about the centre, one drawn uniformly per image.
    pub resize_scales: Vec<f64>,
    pub jitter_p: f64,
    /// Brightness, contrast, saturation, hue.
    pub jitter: [f64; 4],
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub cutouts: Vec<CutoutSpec>,
    pub rotate_p: f64,
    pub rotate_deg: f64,
    pub shear_p: f64,
    pub shear_deg: f64,
    pub rescale_p: f64,
    pub translate: (f64, f64),
    pub rescale: (f64, f64),
    pub enable_geometric: bool,
    pub enable_cutout: bool,
    /// Colour for erased and out-of-frame pixels; the dataset mean.
    pub fill: [f64; 3],
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            hflip_p: 0.5,
            resize_scales: vec![0.75, 0.875, 1.0, 1.125, 1.25],
            jitter_p: 0.8,
            jitter: [0.4, 0.4, 0.4, 0.1],
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: (0.1, 2.0),
            cutouts: vec![
                CutoutSpec {
                    p: 0.7,
                    scale: (0.05, 0.2),
                    ratio: (0.3, 3.3),
                },
                CutoutSpec {
                    p: 0.5,
                    scale: (0.02, 0.2),
                    ratio: (0.1, 6.0),
                },
                CutoutSpec {
                    p: 0.3,
                    scale: (0.02, 0.2),
                    ratio: (0.05, 8.0),
                },
            ],
            rotate_p: 0.3,
            rotate_deg: 30.0,
            shear_p: 0.3,
            shear_deg: 30.0,
            rescale_p: 0.5,
            translate: (0.0, 0.25),
            rescale: (0.25, 0.75),
            enable_geometric: true,
            enable_cutout: true,
            fill: [0.5; 3],
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut probs = vec![
            self.hflip_p,
            self.jitter_p,
            self.grayscale_p,
            self.blur_p,
            self.rotate_p,
            self.shear_p,
            self.rescale_p,
        ];
        probs.extend(self.cutouts.iter().map(|c| c.p));
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err("augmentation probabilities must lie in [0, 1]".into());
        }
        if self.resize_scales.is_empty() || self.resize_scales.iter().any(|s| !(*s > 0.0)) {
            return Err("resize scales must be positive and non-empty".into());
        }
        let ordered = |(a, b): (f64, f64)| a <= b;
        if !ordered(self.blur_sigma) || self.blur_sigma.0 <= 0.0 || !ordered(self.translate) || !ordered(self.rescale) || self.rescale.0 <= 0.0 {
            return Err("augmentation ranges must be ordered and positive".into());
        }
        if self.cutouts.iter().any(|c| !ordered(c.scale) || !ordered(c.ratio) || c.ratio.0 <= 0.0) {
            return Err("cutout ranges must be ordered and positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PhotoOp {
    Brightness(f64),
    Contrast(f64),
    Saturation(f64),
    /// Shift on the hue circle, in turns.
    Hue(f64),
    Grayscale,
    Blur(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GeoOp {
    HFlip,
    Resize(f64),
    Rotate(f64),
    Shear(f64, f64),
    RescaleTranslate { sx: f64, sy: f64, tx: f64, ty: f64 },
}

impl GeoOp {
    pub fn affine(&self) -> Affine2D {
        match *self {
            GeoOp::HFlip => Affine2D::hflip(),
            GeoOp::Resize(s) => Affine2D::scale_about_center(s),
            GeoOp::Rotate(d) => Affine2D::rotation(d),
            GeoOp::Shear(x, y) => Affine2D::shear(x, y),
            GeoOp::RescaleTranslate { sx, sy, tx, ty } => Affine2D::rescale_translate(sx, sy, tx, ty),
        }
    }
}

/// Pixel rectangle `[x, x + w) × [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    /// Geometric ops applied before the photometric ones.
    pub pre_geometric: Vec<GeoOp>,
    pub photometric: Vec<PhotoOp>,
    pub geometric: Vec<GeoOp>,
    /// Composition of all geometric ops; maps input coordinates to output.
    pub affine: Affine2D,
    pub cutouts: Vec<Rect>,
    pub fill: [f64; 3],
}

impl AugRecord {
    fn new(fill: [f64; 3]) -> Self {
        Self {
            pre_geometric: Vec::new(),
            photometric: Vec::new(),
            geometric: Vec::new(),
            affine: Affine2D::identity(),
            cutouts: Vec::new(),
            fill,
        }
    }

    fn compose(ops: &[GeoOp]) -> Affine2D {
        ops.iter().fold(Affine2D::identity(), |acc, op| acc.then(&op.affine()))
    }
}

/// Re-applies a recorded augmentation.
pub fn apply_record(image: &Image, rec: &AugRecord) -> Result<Image, GeometryError> {
    let mut img = warp(image, &AugRecord::compose(&rec.pre_geometric), rec.fill)?;
    for op in &rec.photometric {
        apply_photo(&mut img, *op);
    }
    img = warp(&img, &AugRecord::compose(&rec.geometric), rec.fill)?;
    for r in &rec.cutouts {
        erase(&mut img, r, rec.fill);
    }
    Ok(img)
}

/// Resamples `image` so that content at `p` moves to `t(p)`, bilinearly;
/// samples from outside the frame take `fill`.
pub fn warp(image: &Image, t: &Affine2D, fill: [f64; 3]) -> Result<Image, GeometryError> {
    if t.is_identity() {
        return Ok(image.clone());
    }
    let inv = t.inverse()?;
    let (w, h) = (image.width, image.height);
    let mut out = Image::filled(w, h, fill);
    let sample = |x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            fill[c]
        } else {
            image.data[(y as usize * w + x as usize) * 3 + c]
        }
    };
    for y in 0..h {
        for x in 0..w {
            let (u, v) = inv.apply((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let (sx, sy) = (u * w as f64 - 0.5, v * h as f64 - 0.5);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let i = (y * w + x) * 3;
            for c in 0..3 {
                let top = sample(x0, y0, c) * (1.0 - fx) + sample(x0 + 1, y0, c) * fx;
                let bottom = sample(x0, y0 + 1, c) * (1.0 - fx) + sample(x0 + 1, y0 + 1, c) * fx;
                out.data[i + c] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

fn luma(px: &[f64]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn gaussian_blur(img: &mut Image, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                tmp[(y * w + x) * 3 + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * img.data[(y * w + reflect(x as i64 + k as i64 - radius, w)) * 3 + c])
                    .sum();
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.data[(y * w + x) * 3 + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[(reflect(y as i64 + k as i64 - radius, h) * w + x) * 3 + c])
                    .sum::<f64>()
                    .clamp(0.0, 1.0);
            }
        }
    }
}

pub fn apply_photo(img: &mut Image, op: PhotoOp) {
    match op {
        PhotoOp::Brightness(f) => img.data.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0)),
        PhotoOp::Contrast(f) => {
            let n = (img.width * img.height) as f64;
            let m = img.data.chunks_exact(3).map(luma).sum::<f64>() / n;
            img.data.iter_mut().for_each(|v| *v = ((*v - m) * f + m).clamp(0.0, 1.0));
        }
        PhotoOp::Saturation(f) => {
            for px in img.data.chunks_exact_mut(3) {
                let g = luma(px);
                px.iter_mut().for_each(|v| *v = ((*v - g) * f + g).clamp(0.0, 1.0));
            }
        }
        PhotoOp::Hue(shift) => {
            for px in img.data.chunks_exact_mut(3) {
                let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
                let rgb = hsv_to_rgb(h + shift, s, v);
                for c in 0..3 {
                    px[c] = rgb[c].clamp(0.0, 1.0);
                }
            }
        }
        PhotoOp::Grayscale => {
            for px in img.data.chunks_exact_mut(3) {
                let g = luma(px).clamp(0.0, 1.0);
                px.fill(g);
            }
        }
        PhotoOp::Blur(sigma) => gaussian_blur(img, sigma),
    }
}

fn erase(img: &mut Image, r: &Rect, fill: [f64; 3]) {
    for y in r.y..(r.y + r.h).min(img.height) {
        for x in r.x..(r.x + r.w).min(img.width) {
            img.set_pixel(x, y, fill);
        }
    }
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn sample_symmetric(rng: &mut impl Rng, mag: f64) -> f64 {
    sample_range(rng, (-mag, mag))
}

fn sample_weak_geometry(cfg: &AugConfig, rng: &mut impl Rng) -> Vec<GeoOp> {
    let mut ops = Vec::new();
    if rng.random_bool(cfg.hflip_p) {
        ops.push(GeoOp::HFlip);
    }
    let s = cfg.resize_scales[rng.random_range(0..cfg.resize_scales.len())];
    if s != 1.0 {
        ops.push(GeoOp::Resize(s));
    }
    ops
}

fn sample_photometric(cfg: &AugConfig, rng: &mut impl Rng) -> Vec<PhotoOp> {
    let mut ops = Vec::new();
    if rng.random_bool(cfg.jitter_p) {
        let [b, c, s, h] = cfg.jitter;
        ops.push(PhotoOp::Brightness(sample_range(rng, (1.0 - b, 1.0 + b))));
        ops.push(PhotoOp::Contrast(sample_range(rng, (1.0 - c, 1.0 + c))));
        ops.push(PhotoOp::Saturation(sample_range(rng, (1.0 - s, 1.0 + s))));
        ops.push(PhotoOp::Hue(sample_symmetric(rng, h)));
    }
    if rng.random_bool(cfg.grayscale_p) {
        ops.push(PhotoOp::Grayscale);
    }
    if rng.random_bool(cfg.blur_p) {
        ops.push(PhotoOp::Blur(sample_range(rng, cfg.blur_sigma)));
    }
    ops
}

fn sample_cutouts(cfg: &AugConfig, w: usize, h: usize, rng: &mut impl Rng) -> Vec<Rect> {
    let mut rects = Vec::new();
    if !cfg.enable_cutout {
        return rects;
    }
    let area = (w * h) as f64;
    for spec in &cfg.cutouts {
        if !rng.random_bool(spec.p) {
            continue;
        }
        for _ in 0..10 {
            let target = area * sample_range(rng, spec.scale);
            let ratio = sample_range(rng, (spec.ratio.0.ln(), spec.ratio.1.ln())).exp();
            let rh = (target * ratio).sqrt().round() as usize;
            let rw = (target / ratio).sqrt().round() as usize;
            if rh == 0 || rw == 0 || rh > h || rw > w {
                continue;
            }
            rects.push(Rect {
                x: rng.random_range(0..=w - rw),
                y: rng.random_range(0..=h - rh),
                w: rw,
                h: rh,
            });
            break;
        }
    }
    rects
}

fn sample_strong_geometry(cfg: &AugConfig, rng: &mut impl Rng) -> Vec<GeoOp> {
    let mut ops = Vec::new();
    if !cfg.enable_geometric {
        return ops;
    }
    if rng.random_bool(cfg.rotate_p) {
        ops.push(GeoOp::Rotate(sample_symmetric(rng, cfg.rotate_deg)));
    }
    if rng.random_bool(cfg.shear_p) {
        let sx = sample_symmetric(rng, cfg.shear_deg);
        let sy = sample_symmetric(rng, cfg.shear_deg);
        ops.push(GeoOp::Shear(sx, sy));
    }
    if rng.random_bool(cfg.rescale_p) {
        let sx = sample_range(rng, cfg.rescale);
        let sy = sample_range(rng, cfg.rescale);
        let tx = sample_range(rng, cfg.translate);
        let ty = sample_range(rng, cfg.translate);
        ops.push(GeoOp::RescaleTranslate { sx, sy, tx, ty });
    }
    ops
}

/// Moves boxes through `t`, dropping those left mostly out of frame.
pub fn transform_objects(objects: &[Object], t: &Affine2D) -> Result<Vec<Object>, GeometryError> {
    if !t.is_invertible() {
        return Err(GeometryError::Singular);
    }
    if t.is_identity() {
        return Ok(objects.to_vec());
    }
    Ok(objects
        .iter()
        .filter_map(|o| {
            transform_box_visible(&o.bbox, t).ok().map(|bbox| Object { class: o.class, bbox })
        })
        .collect())
}

/// Flip and rescale only.
pub fn weak_augment(image: &Image, objects: &[Object], cfg: &AugConfig, rng: &mut impl Rng) -> Result<(Image, Vec<Object>, AugRecord), GeometryError> {
    let mut rec = AugRecord::new(cfg.fill);
    rec.pre_geometric = sample_weak_geometry(cfg, rng);
    rec.affine = AugRecord::compose(&rec.pre_geometric);
    let img = apply_record(image, &rec)?;
    let objs = transform_objects(objects, &rec.affine)?;
    Ok((img, objs, rec))
}

/// Photometric ops, then rotate / shear / rescale-translate, then CutOut.
/// The input is expected to be a weak view already.
pub fn strong_augment(image: &Image, cfg: &AugConfig, rng: &mut impl Rng) -> Result<(Image, AugRecord), GeometryError> {
    let mut rec = AugRecord::new(cfg.fill);
    rec.photometric = sample_photometric(cfg, rng);
    rec.geometric = sample_strong_geometry(cfg, rng);
    rec.affine = AugRecord::compose(&rec.geometric);
    rec.cutouts = sample_cutouts(cfg, image.width, image.height, rng);
    Ok((apply_record(image, &rec)?, rec))
}

/// Flip and rescale, then photometric ops and (if enabled) CutOut. No strong
/// geometric ops.
pub fn supervised_augment(image: &Image, objects: &[Object], cfg: &AugConfig, rng: &mut impl Rng) -> Result<(Image, Vec<Object>, AugRecord), GeometryError> {
    let mut rec = AugRecord::new(cfg.fill);
    rec.pre_geometric = sample_weak_geometry(cfg, rng);
    rec.affine = AugRecord::compose(&rec.pre_geometric);
    rec.photometric = sample_photometric(cfg, rng);
    rec.cutouts = sample_cutouts(cfg, image.width, image.height, rng);
    let img = apply_record(image, &rec)?;
    let objs = transform_objects(objects, &rec.affine)?;
    Ok((img, objs, rec))
}

/// Carries weak-view pseudo-boxes into the strong view. Class distributions
/// are untouched, except that object rows whose box leaves the frame become
/// certain no-object.
pub fn map_pseudo_boxes(pseudo: &PseudoLabelSet, strong: &AugRecord) -> Result<PseudoLabelSet, GeometryError> {
    if !strong.affine.is_invertible() {
        return Err(GeometryError::Singular);
    }
    let mut out = pseudo.clone();
    if strong.affine.is_identity() {
        return Ok(out);
    }
    for i in 0..out.len() {
        match transform_box_visible(&pseudo.boxes[i], &strong.affine) {
            Ok(b) => out.boxes[i] = b,
            Err(_) => {
                if out.is_object(i) {
                    out.set_no_object(i);
                }
            }
        }
    }
    Ok(out)
}
