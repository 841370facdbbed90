//! DOTA annotations, seeded splits, synthetic scenes and image files.

use std::collections::HashSet;
use std::fmt::{Debug, Write as _};
use std::fs;
use std::hash::Hash;
use std::path::Path;

use msdet_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{iou, BBox, GtBox};
use crate::error::{Error, Result};

pub const DOTA_CLASSES: [&str; 15] = [
    "plane",
    "ship",
    "storage-tank",
    "baseball-diamond",
    "tennis-court",
    "basketball-court",
    "ground-track-field",
    "harbor",
    "bridge",
    "large-vehicle",
    "small-vehicle",
    "helicopter",
    "roundabout",
    "soccer-ball-field",
    "swimming-pool",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DotaObject {
    pub quad: [f64; 8],
    pub category: String,
    pub difficult: bool,
    /// Axis-aligned hull of the quad.
    pub bbox: BBox,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotation {
    pub image_id: String,
    pub objects: Vec<DotaObject>,
    /// Malformed lines and degenerate quads that were skipped.
    pub warnings: usize,
}

impl Annotation {
    /// Ground truth for the known categories; returns the boxes and how many
    /// objects had a category outside `classes`.
    pub fn gt_boxes(&self, classes: &[&str]) -> (Vec<GtBox>, usize) {
        let mut unknown = 0;
        let mut out = Vec::new();
        for o in &self.objects {
            match classes.iter().position(|c| *c == o.category) {
                Some(class_id) => out.push(GtBox {
                    class_id,
                    bbox: o.bbox,
                    difficult: o.difficult,
                }),
                None => unknown += 1,
            }
        }
        (out, unknown)
    }
}

fn parse_object(line: &str) -> Option<DotaObject> {
    let tok: Vec<&str> = line.split_whitespace().collect();
    if tok.len() != 10 {
        return None;
    }
    let mut quad = [0.0; 8];
    for (q, t) in quad.iter_mut().zip(&tok[..8]) {
        *q = t.parse::<f64>().ok().filter(|v| v.is_finite())?;
    }
    let difficult = match tok[9] {
        "0" => false,
        "1" => true,
        _ => return None,
    };
    let xs = [quad[0], quad[2], quad[4], quad[6]];
    let ys = [quad[1], quad[3], quad[5], quad[7]];
    let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
    let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let bbox = BBox::new(min(xs), min(ys), max(xs), max(ys));
    bbox.is_valid().then(|| DotaObject {
        quad,
        category: tok[8].to_string(),
        difficult,
        bbox,
    })
}

/// Parses one DOTA label file. Metadata lines (`imagesource…`, `gsd…`) and
/// blank lines are skipped; malformed lines and degenerate quads are counted
/// in `warnings`.
pub fn parse_dota(image_id: &str, text: &str) -> Annotation {
    let mut ann = Annotation {
        image_id: image_id.to_string(),
        ..Annotation::default()
    };
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("imagesource") || line.starts_with("gsd") {
            continue;
        }
        match parse_object(line) {
            Some(o) => ann.objects.push(o),
            None => ann.warnings += 1,
        }
    }
    ann
}

/// Reads a label file; the image id is the file stem.
pub fn read_dota(path: &Path) -> Result<Annotation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(parse_dota(&id, &text))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then ⌊0.8N⌋ / ⌊0.1N⌋ / remainder.
pub fn split<T: Clone + Eq + Hash + Debug>(ids: &[T], seed: u64) -> Result<Split<T>> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Validation(format!("split: duplicate id {id:?}")));
        }
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(Split {
        train: shuffled,
        val,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectClass {
    pub name: String,
    pub shape: Shape,
    /// Inclusive side (or diameter) range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub classes: Vec<ObjectClass>,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Peak amplitude of the smooth background texture.
    pub clutter: f32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 96,
            classes: vec![
                ObjectClass {
                    name: "small-disc".into(),
                    shape: Shape::Disc,
                    min_size: 6,
                    max_size: 12,
                    color: [0.95, 0.85, 0.2],
                },
                ObjectClass {
                    name: "large-square".into(),
                    shape: Shape::Square,
                    min_size: 40,
                    max_size: 80,
                    color: [0.15, 0.35, 0.85],
                },
            ],
            objects_per_image: (1, 4),
            clutter: 0.12,
            seed: 0,
        }
    }
}

/// Rejection sampling gives up after this many tries and places anyway.
pub const MAX_PLACEMENT_TRIES: usize = 100;
/// Largest IoU allowed between two objects of one image.
pub const MAX_OVERLAP: f64 = 0.4;

impl SceneSpec {
    /// The same scene at another resolution; object size ranges scale with
    /// the image side.
    pub fn with_image_size(&self, image_size: usize) -> Self {
        let f = image_size as f64 / self.image_size as f64;
        let scaled = |v: usize| ((v as f64 * f).round() as usize).max(1);
        let mut spec = self.clone();
        spec.image_size = image_size;
        for c in &mut spec.classes {
            c.min_size = scaled(c.min_size);
            c.max_size = scaled(c.max_size);
        }
        spec
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("scene: no object classes".into()));
        }
        for c in &self.classes {
            if c.min_size == 0 || c.min_size > c.max_size || c.max_size > self.image_size {
                return Err(Error::Config(format!(
                    "scene: class {} has size range {}..={} for a {} px image",
                    c.name, c.min_size, c.max_size, self.image_size
                )));
            }
        }
        let mut ranges: Vec<_> = self.classes.iter().map(|c| (c.min_size, c.max_size)).collect();
        ranges.sort_unstable();
        if ranges.windows(2).any(|w| w[0].1 >= w[1].0) {
            return Err(Error::Config("scene: class size ranges must not overlap".into()));
        }
        if self.objects_per_image.0 > self.objects_per_image.1 {
            return Err(Error::Config("scene: objects_per_image range is reversed".into()));
        }
        Ok(())
    }
}

/// Planar `C×H×W` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Validation(format!(
                "image {channels}×{height}×{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, self.channels, self.height, self.width], |i| self.data[i] as f64)
    }
}

/// Stacks same-sized images into one `N×C×H×W` tensor.
pub fn batch_images(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Validation("batch_images: empty batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if (im.channels, im.height, im.width) != (c, h, w) {
            return Err(Error::Validation(format!(
                "batch_images: mixed sizes {c}×{h}×{w} and {}×{}×{}",
                im.channels, im.height, im.width
            )));
        }
        data.extend(im.data.iter().map(|&v| v as f64));
    }
    Ok(Tensor::new(&[images.len(), c, h, w], data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub gts: Vec<GtBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    /// Objects placed after exhausting the overlap rejection budget.
    pub forced_placements: usize,
}

impl Dataset {
    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// Samples with the given ids, in the order given.
    pub fn subset(&self, ids: &[String]) -> Result<Vec<&Sample>> {
        ids.iter()
            .map(|id| {
                self.samples
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::Validation(format!("unknown image id {id}")))
            })
            .collect()
    }
}

pub fn synthetic_id(index: usize) -> String {
    format!("syn{index:05}")
}

fn render_background(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Vec<f32> {
    let s = spec.image_size;
    let mut img = vec![0.0f32; 3 * s * s];
    let base: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.55));
    // Three random low-frequency plane waves per channel.
    let mut waves = Vec::new();
    for _ in 0..3 {
        let fx: f32 = rng.gen_range(-2.0..2.0) / s as f32;
        let fy: f32 = rng.gen_range(-2.0..2.0) / s as f32;
        let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let weights: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        waves.push((fx, fy, phase, weights));
    }
    for y in 0..s {
        for x in 0..s {
            for (c, b) in base.iter().enumerate() {
                let mut v = *b;
                for (fx, fy, phase, w) in &waves {
                    let arg = std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) + phase;
                    v += spec.clutter / 3.0 * w[c] * arg.sin();
                }
                img[(c * s + y) * s + x] = v;
            }
        }
    }
    img
}

fn paint(img: &mut [f32], s: usize, shape: Shape, bbox: &BBox, color: [f32; 3]) {
    let (x0, y0) = (bbox.x_min as usize, bbox.y_min as usize);
    let (x1, y1) = (bbox.x_max as usize, bbox.y_max as usize);
    let (cx, cy) = bbox.center();
    let r = bbox.width() / 2.0;
    for y in y0..y1 {
        for x in x0..x1 {
            let inside = match shape {
                Shape::Square => true,
                Shape::Disc => {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    dx * dx + dy * dy <= r * r
                }
            };
            if inside {
                for (c, &v) in color.iter().enumerate() {
                    img[(c * s + y) * s + x] = v;
                }
            }
        }
    }
}

/// One synthetic image; a pure function of `(spec, index)`.
fn gen_scene(spec: &SceneSpec, index: usize) -> (Sample, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let s = spec.image_size;
    let mut img = render_background(&mut rng, spec);
    let k = rng.gen_range(spec.objects_per_image.0..=spec.objects_per_image.1);
    let mut placed: Vec<GtBox> = Vec::with_capacity(k);
    let mut forced = 0;
    for _ in 0..k {
        let class_id = rng.gen_range(0..spec.classes.len());
        let class = &spec.classes[class_id];
        let size = rng.gen_range(class.min_size..=class.max_size);
        let mut tries = 0;
        let bbox = loop {
            let x = rng.gen_range(0..=s - size) as f64;
            let y = rng.gen_range(0..=s - size) as f64;
            let b = BBox::new(x, y, x + size as f64, y + size as f64);
            tries += 1;
            if placed.iter().all(|p| iou(&p.bbox, &b) <= MAX_OVERLAP) {
                break b;
            }
            if tries == MAX_PLACEMENT_TRIES {
                forced += 1;
                break b;
            }
        };
        placed.push(GtBox {
            class_id,
            bbox,
            difficult: false,
        });
    }
    // Larger objects first so small ones stay visible on top.
    let mut order: Vec<usize> = (0..placed.len()).collect();
    order.sort_by(|&a, &b| placed[b].bbox.area().total_cmp(&placed[a].bbox.area()));
    for i in order {
        let class = &spec.classes[placed[i].class_id];
        let jitter: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.08..0.08));
        let color = std::array::from_fn(|c| (class.color[c] + jitter[c]).clamp(0.0, 1.0));
        paint(&mut img, s, class.shape, &placed[i].bbox, color);
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    let sample = Sample {
        id: synthetic_id(index),
        image: Image {
            channels: 3,
            height: s,
            width: s,
            data: img,
        },
        gts: placed,
    };
    (sample, forced)
}

/// `n_images` scenes; bit-identical for the same spec.
pub fn gen_synthetic(spec: &SceneSpec, n_images: usize) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(n_images);
    let mut forced_placements = 0;
    for i in 0..n_images {
        let (s, f) = gen_scene(spec, i);
        samples.push(s);
        forced_placements += f;
    }
    Ok(Dataset {
        class_names: spec.class_names(),
        samples,
        forced_placements,
    })
}

pub const RAW_MAGIC: &[u8; 4] = b"MSDT";

/// `MSDT`, u32 C, H, W, then C·H·W little-endian f32.
pub fn encode_raw(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.data.len());
    out.extend_from_slice(RAW_MAGIC);
    for d in [img.channels, img.height, img.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 16 {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("raw header needs 16 bytes, got {}", bytes.len()),
        });
    }
    if &bytes[..4] != RAW_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "unknown magic; expected MSDT".into(),
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let expected = c
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::Format {
            offset: 4,
            message: format!("dimensions {c}×{h}×{w} overflow"),
        })?;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected),
            message: format!("expected {expected} bytes for {c}×{h}×{w}, got {}", bytes.len()),
        });
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Image::new(c, h, w, data)
}

/// 8-bit binary PPM; values are rounded to the nearest level.
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    if img.channels != 3 {
        return Err(Error::Validation(format!("PPM needs 3 channels, got {}", img.channels)));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.height * img.width;
    for p in 0..plane {
        for c in 0..3 {
            out.push((img.data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                message: "truncated PPM header".into(),
            });
        }
        fields.push((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()));
    }
    if fields[0].1 != "P6" {
        return Err(Error::Format {
            offset: 0,
            message: format!("unknown magic {:?}; expected P6 or MSDT", fields[0].1),
        });
    }
    let mut nums = [0usize; 3];
    for (n, (off, f)) in nums.iter_mut().zip(&fields[1..]) {
        *n = f.parse().map_err(|_| Error::Format {
            offset: *off,
            message: format!("bad PPM header field {f:?}"),
        })?;
    }
    let [w, h, maxval] = nums;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format {
            offset: fields[3].0,
            message: format!("only 8-bit PPM is supported, maxval {maxval}"),
        });
    }
    pos += 1; // single whitespace byte after maxval
    let expected = pos + 3 * w * h;
    if bytes.len() < expected {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("expected {expected} bytes for {w}×{h} pixels, got {}", bytes.len()),
        });
    }
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = bytes[pos + 3 * p + c] as f32 / maxval as f32;
        }
    }
    Image::new(3, h, w, data)
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(RAW_MAGIC) {
        decode_raw(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(Error::Format {
            offset: 0,
            message: "unknown magic; expected MSDT or P6".into(),
        })
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// A `1×3×H×W` tensor from a PPM or raw file.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = read_image(path)?;
    if img.channels != 3 {
        return Err(Error::Validation(format!(
            "{}: expected 3 channels, got {}",
            path.display(),
            img.channels
        )));
    }
    Ok(img.to_tensor())
}

pub fn write_raw(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_raw(img)).map_err(|e| Error::io(path, e))
}

/// `image_id class_name difficult x_min y_min x_max y_max`.
pub fn gt_line(image_id: &str, class_name: &str, gt: &GtBox) -> String {
    let b = gt.bbox;
    format!(
        "{image_id} {class_name} {} {} {} {} {}",
        u8::from(gt.difficult),
        b.x_min,
        b.y_min,
        b.x_max,
        b.y_max
    )
}

/// Parses ground-truth lines; class names resolve against `classes`.
pub fn parse_gt_lines(text: &str, classes: &[String]) -> Result<Vec<(String, GtBox)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let here = offset;
        offset += line.len();
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Format { offset: here, message };
        if tok.len() != 7 {
            return Err(bad(format!("expected 7 fields, got {}", tok.len())));
        }
        let class_id = classes
            .iter()
            .position(|c| c == tok[1])
            .ok_or_else(|| bad(format!("unknown class {:?}", tok[1])))?;
        let difficult = match tok[2] {
            "0" => false,
            "1" => true,
            t => return Err(bad(format!("difficult flag must be 0 or 1, got {t:?}"))),
        };
        let mut c = [0.0; 4];
        for (v, t) in c.iter_mut().zip(&tok[3..]) {
            *v = t.parse().map_err(|_| bad(format!("bad coordinate {t:?}")))?;
        }
        let bbox = BBox::new(c[0], c[1], c[2], c[3]);
        if !bbox.is_valid() {
            return Err(bad(format!("degenerate box {c:?}")));
        }
        out.push((
            tok[0].to_string(),
            GtBox {
                class_id,
                bbox,
                difficult,
            },
        ));
    }
    Ok(out)
}

/// On-disk dataset layout written by [`write_dataset`].
pub mod layout {
    pub const CLASSES: &str = "classes.txt";
    pub const GT: &str = "gt.txt";
    pub const IMAGES: &str = "images";
    pub const TRAIN: &str = "train.txt";
    pub const VAL: &str = "val.txt";
    pub const TEST: &str = "test.txt";
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn write_id_list(path: &Path, ids: &[String]) -> Result<()> {
    let mut s = String::new();
    for id in ids {
        let _ = writeln!(s, "{id}");
    }
    write_file(path, &s)
}

pub fn read_id_list(path: &Path) -> Result<Vec<String>> {
    read_lines(path)
}

/// Class list, raw images, ground-truth lines and the three split lists.
pub fn write_dataset(dir: &Path, data: &Dataset, split: &Split<String>) -> Result<()> {
    let images = dir.join(layout::IMAGES);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    write_file(&dir.join(layout::CLASSES), &(data.class_names.join("\n") + "\n"))?;
    let mut gt = String::new();
    for s in &data.samples {
        write_raw(&images.join(format!("{}.msdt", s.id)), &s.image)?;
        for g in &s.gts {
            let _ = writeln!(gt, "{}", gt_line(&s.id, &data.class_names[g.class_id], g));
        }
    }
    write_file(&dir.join(layout::GT), &gt)?;
    write_id_list(&dir.join(layout::TRAIN), &split.train)?;
    write_id_list(&dir.join(layout::VAL), &split.val)?;
    write_id_list(&dir.join(layout::TEST), &split.test)
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, Split<String>)> {
    let class_names = read_lines(&dir.join(layout::CLASSES))?;
    let split = Split {
        train: read_id_list(&dir.join(layout::TRAIN))?,
        val: read_id_list(&dir.join(layout::VAL))?,
        test: read_id_list(&dir.join(layout::TEST))?,
    };
    let gt_path = dir.join(layout::GT);
    let gt_text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let gts = parse_gt_lines(&gt_text, &class_names)?;
    let mut ids: Vec<String> = split.train.iter().chain(&split.val).chain(&split.test).cloned().collect();
    ids.sort();
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let image = read_image(&dir.join(layout::IMAGES).join(format!("{id}.msdt")))?;
        let boxes = gts.iter().filter(|(i, _)| *i == id).map(|(_, g)| *g).collect();
        samples.push(Sample { id, image, gts: boxes });
    }
    Ok((
        Dataset {
            class_names,
            samples,
            forced_placements: 0,
        },
        split,
    ))
}
