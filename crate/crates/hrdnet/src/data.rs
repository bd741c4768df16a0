//! Synthetic small-object scenes and COCO-style dataset storage.
//!
//! The generator renders class-distinctive sprites (filled square, disk,
//! diagonal cross, frame) on a textured background, so a detector must learn
//! shape, not just contrast. Datasets round-trip through a directory of PNG
//! images plus one `annotations.json` using the COCO detection layout, which
//! lets standard tooling cross-check the evaluator.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnnotatedImage, BBox};
use crate::postprocess::iou;

/// Maximum IoU tolerated between two placed objects.
pub const MAX_PLACEMENT_IOU: f64 = 0.3;

/// Placement attempts per object before giving up on it.
pub const MAX_PLACEMENT_RETRIES: usize = 100;

/// Recipe for one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of object side lengths in pixels.
    pub object_size_px: (usize, usize),
    pub num_classes: usize,
    /// Background noise amplitude in [0, 1].
    pub clutter_level: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if self.object_size_px.0 == 0 || self.object_size_px.0 > self.object_size_px.1 {
            return Err(Error::Config(format!(
                "object_size_px range {:?} must be positive and ordered",
                self.object_size_px
            )));
        }
        if self.object_size_px.1 >= h.min(w) / 2 {
            return Err(Error::Config(format!(
                "max object size {} must be below half the image side {}",
                self.object_size_px.1,
                h.min(w)
            )));
        }
        if self.objects_per_image.0 > self.objects_per_image.1 {
            return Err(Error::Config(format!(
                "objects_per_image range {:?} must be ordered",
                self.objects_per_image
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.clutter_level) {
            return Err(Error::Config(format!(
                "clutter_level {} not in [0, 1]",
                self.clutter_level
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("class_{c}")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: SceneSpec =
            toml::from_str(&text).map_err(|e| Error::Parse(format!("scene spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scene spec serializes")
    }
}

/// Saturated sprite color for a class; always outside the background's
/// [0.2, 0.8] value range in at least one channel.
fn class_color(class: usize) -> [f32; 3] {
    let mut c = [0.0f32; 3];
    for (k, v) in c.iter_mut().enumerate() {
        *v = if (class >> k) & 1 == 1 { 1.0 } else { 0.0 };
    }
    c
}

fn paint(image: &mut Array3<f32>, y: usize, x: usize, color: [f32; 3]) {
    for (k, &v) in color.iter().enumerate() {
        image[[k, y, x]] = v;
    }
}

/// Draw one sprite tightly filling `(x, y, w, h)`. The shape cycles with the
/// class index so every class is visually distinct from its neighbors.
fn draw_sprite(image: &mut Array3<f32>, class: usize, x: usize, y: usize, w: usize, h: usize) {
    let color = class_color(class);
    let (fw, fh) = (w as f32, h as f32);
    for dy in 0..h {
        for dx in 0..w {
            // normalized coordinates in [-1, 1] at pixel centers
            let nx = (2.0 * (dx as f32 + 0.5) - fw) / fw;
            let ny = (2.0 * (dy as f32 + 0.5) - fh) / fh;
            let inside = match class % 4 {
                0 => true,                                // filled square
                1 => nx * nx + ny * ny <= 1.0,            // inscribed disk
                2 => (nx - ny).abs() <= 0.5 || (nx + ny).abs() <= 0.5, // diagonal cross
                _ => nx.abs() >= 0.5 || ny.abs() >= 0.5,  // frame
            };
            if inside {
                paint(image, y + dy, x + dx, color);
            }
        }
    }
}

/// Smooth low-frequency texture plus clutter noise, clamped to [0.2, 0.8].
fn render_background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let (h, w) = spec.image_size;
    let (phase_y, phase_x): (f32, f32) = (rng.gen::<f32>() * 6.28, rng.gen::<f32>() * 6.28);
    let clutter = spec.clutter_level as f32;
    let mut image = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let wave = 0.15
                * ((y as f32 * 0.11 + phase_y).sin() + (x as f32 * 0.07 + phase_x).cos());
            let noise = clutter * (rng.gen::<f32>() - 0.5) * 0.4;
            for k in 0..3 {
                let channel_tint = 0.05 * k as f32;
                image[[k, y, x]] = (0.5 + wave + noise + channel_tint).clamp(0.2, 0.8);
            }
        }
    }
    image
}

/// Render scene `index` of the dataset described by `spec`. Pure in
/// `(spec.seed, index)`, so scenes can be generated in parallel.
///
/// Objects that cannot be placed with pairwise IoU below
/// [`MAX_PLACEMENT_IOU`] within [`MAX_PLACEMENT_RETRIES`] attempts are
/// silently dropped, so an image may carry fewer objects than drawn.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<AnnotatedImage<f32>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index.wrapping_add(1));
    let (h, w) = spec.image_size;
    let mut image = render_background(spec, &mut rng);
    let count = rng.gen_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_RETRIES {
            let ow = rng.gen_range(spec.object_size_px.0..=spec.object_size_px.1);
            let oh = rng.gen_range(spec.object_size_px.0..=spec.object_size_px.1);
            let x = rng.gen_range(0..=w - ow);
            let y = rng.gen_range(0..=h - oh);
            let candidate = BBox::new(x as f64, y as f64, ow as f64, oh as f64);
            if boxes.iter().all(|b| iou(b, &candidate) < MAX_PLACEMENT_IOU) {
                placed = Some((x, y, ow, oh, candidate));
                break;
            }
        }
        if let Some((x, y, ow, oh, candidate)) = placed {
            let class = rng.gen_range(0..spec.num_classes);
            draw_sprite(&mut image, class, x, y, ow, oh);
            boxes.push(candidate);
            labels.push(class);
        }
    }
    Ok(AnnotatedImage {
        image,
        boxes,
        labels,
    })
}

/// One stored dataset entry.
#[derive(Debug, Clone)]
pub struct DatasetSample {
    pub id: u64,
    pub file_name: String,
    pub data: AnnotatedImage<f32>,
}

/// In-memory dataset: images, ground truth, class names and a split tag.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<DatasetSample>,
    pub class_names: Vec<String>,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Generate `count` scenes (indices 0..count) in parallel.
pub fn generate_dataset(spec: &SceneSpec, count: usize, split: &str) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            Ok(DatasetSample {
                id: i + 1,
                file_name: format!("{split}_{i:06}.png"),
                data: generate_scene(spec, i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        class_names: spec.class_names(),
        split: split.to_string(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    height: usize,
    width: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: usize,
    bbox: [f64; 4],
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: usize,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoDoc {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write one image as an 8-bit RGB PNG.
pub fn save_image(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::InvalidInput(format!(
            "PNG export expects 3 channels, got {c}"
        )));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(image[[0, y, x]]),
                    to_u8(image[[1, y, x]]),
                    to_u8(image[[2, y, x]]),
                ]),
            );
        }
    }
    buf.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Read an RGB PNG into channel-first floats in [0, 1].
pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for k in 0..3 {
            out[[k, y as usize, x as usize]] = pixel.0[k] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Write a dataset as PNGs plus `annotations.json` under `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut doc = CocoDoc {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: dataset
            .class_names
            .iter()
            .enumerate()
            .map(|(id, name)| CocoCategory {
                id,
                name: name.clone(),
            })
            .collect(),
    };
    let mut ann_id = 1u64;
    for sample in &dataset.samples {
        let (_, h, w) = sample.data.image.dim();
        save_image(&dir.join(&sample.file_name), &sample.data.image)?;
        doc.images.push(CocoImage {
            id: sample.id,
            file_name: sample.file_name.clone(),
            height: h,
            width: w,
        });
        for (b, &label) in sample.data.boxes.iter().zip(&sample.data.labels) {
            doc.annotations.push(CocoAnnotation {
                id: ann_id,
                image_id: sample.id,
                category_id: label,
                bbox: [b.x, b.y, b.w, b.h],
                area: b.area(),
                iscrowd: 0,
            });
            ann_id += 1;
        }
    }
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Parse(format!("annotations: {e}")))?;
    std::fs::write(dir.join("annotations.json"), json)?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`] (or any tool using
/// the same COCO detection subset). Boxes poking out of the image are
/// clipped; non-positive boxes and unknown categories are errors naming the
/// offending annotation id.
pub fn load_dataset(dir: &Path, split: &str) -> Result<Dataset> {
    let ann_path = dir.join("annotations.json");
    let text = std::fs::read_to_string(&ann_path)?;
    let doc: CocoDoc = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", ann_path.display())))?;
    let mut categories = doc.categories;
    categories.sort_by_key(|c| c.id);
    let class_names: Vec<String> = categories.iter().map(|c| c.name.clone()).collect();
    let label_of = |category_id: usize| categories.iter().position(|c| c.id == category_id);

    let mut samples = Vec::with_capacity(doc.images.len());
    for info in &doc.images {
        let image = load_image(&dir.join(&info.file_name))?;
        let (_, h, w) = image.dim();
        if (h, w) != (info.height, info.width) {
            return Err(Error::InvalidInput(format!(
                "image {}: file is {h}x{w} but annotations say {}x{}",
                info.id, info.height, info.width
            )));
        }
        samples.push(DatasetSample {
            id: info.id,
            file_name: info.file_name.clone(),
            data: AnnotatedImage {
                image,
                boxes: Vec::new(),
                labels: Vec::new(),
            },
        });
    }
    for ann in &doc.annotations {
        let [x, y, w, h] = ann.bbox;
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "annotation {}: non-positive box {w}x{h}",
                ann.id
            )));
        }
        let label = label_of(ann.category_id).ok_or_else(|| {
            Error::InvalidInput(format!(
                "annotation {}: unknown category {}",
                ann.id, ann.category_id
            ))
        })?;
        let sample = samples
            .iter_mut()
            .find(|s| s.id == ann.image_id)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "annotation {}: unknown image {}",
                    ann.id, ann.image_id
                ))
            })?;
        let (_, ih, iw) = sample.data.image.dim();
        let clipped = BBox::new(x, y, w, h)
            .clip_to(iw as f64, ih as f64)
            .ok_or_else(|| {
                Error::InvalidInput(format!("annotation {}: box fully outside image", ann.id))
            })?;
        sample.data.boxes.push(clipped);
        sample.data.labels.push(label);
    }
    Ok(Dataset {
        samples,
        class_names,
        split: split.to_string(),
    })
}
