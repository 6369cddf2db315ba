//! Synthetic scene generation and region proposal.
//!
//! Scenes are small RGB rasters on a uniform gray background containing
//! colored primitive shapes: cubes drawn as axis-aligned squares, spheres as
//! circles, cylinders as vertical capsules. Colors come from a fixed
//! six-color palette with small per-instance jitter. Every instance is
//! annotated with the exact bounding box of its drawn pixel support, so
//! boxes are tight by construction.
//!
//! Datasets are exported in a COCO-style layout (an `images/` directory of
//! PNG files plus `annotations.json`); categories carry `attribute_id` and
//! `object_id` extension fields so the composition structure survives
//! round trips.
//!
//! [`blob_propose`] recovers region proposals by connected components over
//! background-differenced pixels. Because placement keeps shape supports
//! pixel-disjoint, the proposer is near-perfect on generated data, which is
//! what lets evaluation focus on labels rather than localization.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compspace::{CompositionId, CompositionSpace};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

/// Canvas background color.
pub const BACKGROUND: [u8; 3] = [128, 128, 128];

/// Any-channel deviation from [`BACKGROUND`] above which a pixel counts as
/// foreground.
pub const FOREGROUND_TOLERANCE: u8 = 25;

/// Connected components smaller than this many pixels are discarded as
/// proposals.
pub const MIN_BLOB_AREA: usize = 20;

/// Base RGB values for the attribute palette, before per-instance jitter.
pub const PALETTE: [(&str, [u8; 3]); 6] = [
    ("blue", [42, 75, 215]),
    ("red", [173, 35, 35]),
    ("green", [29, 105, 20]),
    ("purple", [129, 38, 192]),
    ("brown", [129, 74, 25]),
    ("yellow", [255, 238, 51]),
];

/// Maximum absolute per-channel color jitter.
pub const COLOR_JITTER: i16 = 10;

/// Row-major RGB8 raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl Image {
    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            data.extend_from_slice(&color);
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// The raw row-major RGB bytes.
    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    fn set(&mut self, x: u32, y: u32, color: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// Encodes the raster as PNG (lossless, so datasets reproduce
    /// byte-identically).
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        use image::codecs::png::PngEncoder;
        use image::ImageEncoder;
        let mut bytes = Vec::new();
        PngEncoder::new(&mut bytes).write_image(
            &self.data,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(bytes)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        let rgb = decoded.to_rgb8();
        Ok(Self {
            width: rgb.width(),
            height: rgb.height(),
            data: rgb.into_raw(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::from_png_bytes(&fs::read(path)?)
    }
}

/// Integer pixel box, `x`/`y` top-left corner, inclusive extent `w`×`h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelBox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// Intersection-over-union with another box.
    pub fn iou(&self, other: &PixelBox) -> f64 {
        let x1 = self.x.max(other.x);
        let y1 = self.y.max(other.y);
        let x2 = (self.x + self.w).min(other.x + other.w);
        let y2 = (self.y + self.h).min(other.y + other.h);
        if x2 <= x1 || y2 <= y1 {
            return 0.0;
        }
        let inter = (x2 - x1) as u64 * (y2 - y1) as u64;
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// `[x, y, w, h]` as floats, the convention used by evaluation.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x as f64, self.y as f64, self.w as f64, self.h as f64]
    }
}

/// Placement and sizing knobs for scene rendering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Square canvas side in pixels.
    pub image_size: u32,
    /// Upper bound on instances per scene.
    pub max_objects: usize,
    /// Maximum allowed pairwise bounding-box IoU between placed instances.
    pub overlap_cap: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            max_objects: 4,
            overlap_cap: 0.1,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.image_size < 64 {
            return Err(Error::Validation(format!(
                "image_size {} too small; need at least 64",
                self.image_size
            )));
        }
        if self.max_objects == 0 {
            return Err(Error::Validation("max_objects must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_cap) {
            return Err(Error::Validation(format!(
                "overlap_cap {} outside [0, 1]",
                self.overlap_cap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Cube,
    Sphere,
    Cylinder,
}

impl ShapeKind {
    fn from_object_name(name: &str) -> Result<Self> {
        match name {
            "cube" => Ok(Self::Cube),
            "sphere" => Ok(Self::Sphere),
            "cylinder" => Ok(Self::Cylinder),
            other => Err(Error::Validation(format!(
                "renderer has no shape for object {other:?}; supported: cube, sphere, cylinder"
            ))),
        }
    }
}

fn palette_color(attribute: &str) -> Result<[u8; 3]> {
    PALETTE
        .iter()
        .find(|(name, _)| *name == attribute)
        .map(|(_, rgb)| *rgb)
        .ok_or_else(|| {
            Error::Validation(format!(
                "renderer has no palette color for attribute {attribute:?}"
            ))
        })
}

/// One placed instance with its draw parameters and tight pixel box.
#[derive(Debug, Clone)]
pub struct SceneObject {
    pub composition: CompositionId,
    pub center: (f64, f64),
    /// Primary half-extent in pixels (half side, radius, or half width).
    pub scale: f64,
    /// Reserved; the renderer draws shapes axis-aligned.
    pub rotation: f64,
    /// Jittered fill color actually drawn.
    pub color: [u8; 3],
    pub bbox: PixelBox,
}

struct PlacedShape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    scale: f64,
    half_w: f64,
    half_h: f64,
}

impl PlacedShape {
    #[inline]
    fn contains(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        match self.kind {
            ShapeKind::Cube => dx.abs() <= self.half_w && dy.abs() <= self.half_h,
            ShapeKind::Sphere => dx * dx + dy * dy <= self.scale * self.scale,
            ShapeKind::Cylinder => {
                if dx.abs() > self.half_w || dy.abs() > self.half_h {
                    return false;
                }
                let cap = dy.abs() - (self.half_h - self.half_w);
                cap <= 0.0 || dx * dx + cap * cap <= self.half_w * self.half_w
            }
        }
    }

    fn mask(&self, size: u32) -> (Vec<(u32, u32)>, Option<PixelBox>) {
        let x_lo = ((self.cx - self.half_w).floor().max(0.0)) as u32;
        let x_hi = ((self.cx + self.half_w).ceil().min(size as f64 - 1.0)) as u32;
        let y_lo = ((self.cy - self.half_h).floor().max(0.0)) as u32;
        let y_hi = ((self.cy + self.half_h).ceil().min(size as f64 - 1.0)) as u32;
        let mut pixels = Vec::new();
        let (mut bx0, mut by0, mut bx1, mut by1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    pixels.push((x, y));
                    bx0 = bx0.min(x);
                    by0 = by0.min(y);
                    bx1 = bx1.max(x);
                    by1 = by1.max(y);
                }
            }
        }
        if pixels.is_empty() {
            return (pixels, None);
        }
        let bbox = PixelBox {
            x: bx0,
            y: by0,
            w: bx1 - bx0 + 1,
            h: by1 - by0 + 1,
        };
        (pixels, Some(bbox))
    }
}

fn sample_shape(kind: ShapeKind, size: u32, rng: &mut ChaCha8Rng) -> PlacedShape {
    let (scale, half_w, half_h) = match kind {
        ShapeKind::Cube => {
            let h = rng.random_range(7.0..=14.0);
            (h, h, h)
        }
        ShapeKind::Sphere => {
            let r = rng.random_range(8.0..=16.0);
            (r, r, r)
        }
        ShapeKind::Cylinder => {
            let w = rng.random_range(5.0..=8.0);
            (w, w, 2.2 * w)
        }
    };
    let margin_x = half_w + 3.0;
    let margin_y = half_h + 3.0;
    let cx = rng.random_range(margin_x..=(size as f64 - margin_x));
    let cy = rng.random_range(margin_y..=(size as f64 - margin_y));
    PlacedShape {
        kind,
        cx,
        cy,
        scale,
        half_w,
        half_h,
    }
}

fn jitter_color(base: [u8; 3], rng: &mut ChaCha8Rng) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (dst, &b) in out.iter_mut().zip(base.iter()) {
        let j = rng.random_range(-COLOR_JITTER..=COLOR_JITTER);
        *dst = (b as i16 + j).clamp(0, 255) as u8;
    }
    out
}

const PLACEMENT_ATTEMPTS: usize = 200;
/// Minimum Chebyshev gap in pixels kept between shape supports, so connected
/// components never merge.
const SUPPORT_GAP: i64 = 2;

/// Renders a single scene containing the given compositions, in order.
///
/// Placement enforces the pairwise bounding-box IoU cap and keeps pixel
/// supports at least [`SUPPORT_GAP`] pixels apart. Fails if the constraints
/// cannot be met after bounded retries.
pub fn render_scene(
    space: &CompositionSpace,
    compositions: &[CompositionId],
    spec: &SceneSpec,
    seed: u64,
) -> Result<(Image, Vec<SceneObject>)> {
    spec.validate()?;
    if compositions.is_empty() {
        return Err(Error::EmptyInput("render_scene needs at least one composition".into()));
    }
    if compositions.len() > spec.max_objects {
        return Err(Error::Validation(format!(
            "{} compositions exceed max_objects {}",
            compositions.len(),
            spec.max_objects
        )));
    }
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Image::filled(size, size, BACKGROUND);
    let mut occupied = vec![false; (size * size) as usize];
    let mut objects: Vec<SceneObject> = Vec::with_capacity(compositions.len());

    for &comp in compositions {
        let (attr_id, obj_id) = space.decompose(comp)?;
        let kind = ShapeKind::from_object_name(&space.objects()[obj_id])?;
        let base_color = palette_color(&space.attributes()[attr_id])?;
        let color = jitter_color(base_color, &mut rng);

        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let candidate = sample_shape(kind, size, &mut rng);
            let (pixels, Some(bbox)) = candidate.mask(size) else {
                continue;
            };
            let iou_ok = objects.iter().all(|o| o.bbox.iou(&bbox) <= spec.overlap_cap);
            let support_ok = pixels
                .iter()
                .all(|&(x, y)| !occupied[(y * size + x) as usize]);
            if iou_ok && support_ok {
                placed = Some((candidate, pixels, bbox));
                break;
            }
        }
        let Some((shape, pixels, bbox)) = placed else {
            return Err(Error::Placement(format!(
                "could not place composition {comp} after {PLACEMENT_ATTEMPTS} attempts (seed {seed})"
            )));
        };

        for &(x, y) in &pixels {
            image.set(x, y, color);
            let x0 = (x as i64 - SUPPORT_GAP).max(0) as u32;
            let x1 = (x as i64 + SUPPORT_GAP).min(size as i64 - 1) as u32;
            let y0 = (y as i64 - SUPPORT_GAP).max(0) as u32;
            let y1 = (y as i64 + SUPPORT_GAP).min(size as i64 - 1) as u32;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    occupied[(yy * size + xx) as usize] = true;
                }
            }
        }
        objects.push(SceneObject {
            composition: comp,
            center: (shape.cx, shape.cy),
            scale: shape.scale,
            rotation: 0.0,
            color,
            bbox,
        });
    }
    Ok((image, objects))
}

/// One ground-truth instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub id: usize,
    pub image_id: usize,
    pub composition: CompositionId,
    pub bbox: PixelBox,
}

/// In-memory dataset: images indexed by id plus flat instance annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub annotations: Vec<Annotation>,
}

impl Dataset {
    /// Annotations grouped by image id.
    pub fn annotations_for(&self, image_id: usize) -> Vec<&Annotation> {
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .collect()
    }

    /// Instance count per composition id.
    pub fn composition_histogram(&self, num_compositions: usize) -> Vec<usize> {
        let mut hist = vec![0usize; num_compositions];
        for a in &self.annotations {
            hist[a.composition] += 1;
        }
        hist
    }
}

/// Generates a dataset with exactly `shots` instances per composition.
///
/// Instances are shuffled deterministically and packed into scenes of one to
/// `max_objects` objects. Scene `i` is rendered with seed `seed ^ i`, so any
/// single image can be regenerated without replaying the whole dataset.
pub fn generate_dataset(
    space: &CompositionSpace,
    compositions: &[CompositionId],
    shots: usize,
    spec: &SceneSpec,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if compositions.is_empty() {
        return Err(Error::EmptyInput("generate_dataset needs compositions".into()));
    }
    if shots == 0 {
        return Err(Error::Validation("shots must be positive".into()));
    }
    let mut instances: Vec<CompositionId> = Vec::with_capacity(compositions.len() * shots);
    for &c in compositions {
        space.decompose(c)?;
        instances.extend(std::iter::repeat_n(c, shots));
    }
    let mut pack_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "packing"));
    instances.shuffle(&mut pack_rng);

    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut cursor = 0usize;
    let mut image_id = 0usize;
    while cursor < instances.len() {
        let remaining = instances.len() - cursor;
        let k = pack_rng.random_range(1..=spec.max_objects.min(remaining));
        let scene_comps = &instances[cursor..cursor + k];
        let (image, objects) = render_scene(space, scene_comps, spec, seed ^ image_id as u64)?;
        for obj in objects {
            annotations.push(Annotation {
                id: annotations.len(),
                image_id,
                composition: obj.composition,
                bbox: obj.bbox,
            });
        }
        images.push(image);
        cursor += k;
        image_id += 1;
    }
    Ok(Dataset { images, annotations })
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: usize,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: usize,
    image_id: usize,
    category_id: usize,
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: usize,
    name: String,
    attribute_id: usize,
    object_id: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

fn coco_categories(space: &CompositionSpace) -> Result<Vec<CocoCategory>> {
    space
        .all_compositions()
        .into_iter()
        .map(|c| {
            let (a, o) = space.decompose(c)?;
            Ok(CocoCategory {
                id: c,
                name: space.composition_name(c)?,
                attribute_id: a,
                object_id: o,
            })
        })
        .collect()
}

fn image_file_name(id: usize) -> String {
    format!("{id:06}.png")
}

/// Writes `images/NNNNNN.png` files plus `annotations.json` under `dir`.
pub fn write_dataset(dataset: &Dataset, space: &CompositionSpace, dir: &Path) -> Result<()> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let mut coco = CocoFile {
        images: Vec::with_capacity(dataset.images.len()),
        annotations: Vec::with_capacity(dataset.annotations.len()),
        categories: coco_categories(space)?,
    };
    for (id, image) in dataset.images.iter().enumerate() {
        let name = image_file_name(id);
        image.save_png(&image_dir.join(&name))?;
        coco.images.push(CocoImage {
            id,
            file_name: name,
            width: image.width(),
            height: image.height(),
        });
    }
    for ann in &dataset.annotations {
        coco.annotations.push(CocoAnnotation {
            id: ann.id,
            image_id: ann.image_id,
            category_id: ann.composition,
            bbox: ann.bbox.to_xywh(),
            area: ann.bbox.area() as f64,
            iscrowd: 0,
        });
    }
    let json = serde_json::to_string_pretty(&coco)?;
    fs::write(dir.join("annotations.json"), json + "\n")?;
    Ok(())
}

/// Loads a dataset written by [`write_dataset`], validating that the stored
/// categories match `space` exactly.
pub fn load_dataset(dir: &Path, space: &CompositionSpace) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("annotations.json")).map_err(|e| {
        Error::Config(format!(
            "cannot read {}: {e}",
            dir.join("annotations.json").display()
        ))
    })?;
    let coco: CocoFile = serde_json::from_str(&text)?;
    let expected = coco_categories(space)?;
    if coco.categories.len() != expected.len() {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} categories, space has {}",
            coco.categories.len(),
            expected.len()
        )));
    }
    for (got, want) in coco.categories.iter().zip(expected.iter()) {
        if got.id != want.id
            || got.name != want.name
            || got.attribute_id != want.attribute_id
            || got.object_id != want.object_id
        {
            return Err(Error::ShapeMismatch(format!(
                "category {} is {:?}, expected {:?}",
                got.id, got.name, want.name
            )));
        }
    }
    let mut images = Vec::with_capacity(coco.images.len());
    for (idx, im) in coco.images.iter().enumerate() {
        if im.id != idx {
            return Err(Error::Validation(format!(
                "image ids must be dense and ordered; found {} at index {idx}",
                im.id
            )));
        }
        images.push(Image::load_png(&dir.join("images").join(&im.file_name))?);
    }
    let mut annotations = Vec::with_capacity(coco.annotations.len());
    for ann in &coco.annotations {
        if ann.image_id >= images.len() {
            return Err(Error::OutOfBounds(format!(
                "annotation {} references image {}",
                ann.id, ann.image_id
            )));
        }
        if ann.category_id >= space.num_compositions() {
            return Err(Error::OutOfBounds(format!(
                "annotation {} references composition {}",
                ann.id, ann.category_id
            )));
        }
        annotations.push(Annotation {
            id: ann.id,
            image_id: ann.image_id,
            composition: ann.category_id,
            bbox: PixelBox {
                x: ann.bbox[0] as u32,
                y: ann.bbox[1] as u32,
                w: ann.bbox[2] as u32,
                h: ann.bbox[3] as u32,
            },
        });
    }
    Ok(Dataset { images, annotations })
}

#[inline]
fn is_foreground(px: [u8; 3]) -> bool {
    px.iter()
        .zip(BACKGROUND.iter())
        .any(|(&c, &b)| c.abs_diff(b) > FOREGROUND_TOLERANCE)
}

/// Class-agnostic region proposals: bounding boxes of 4-connected
/// foreground components, ordered by descending area, then x, then y.
pub fn blob_propose(image: &Image) -> Vec<PixelBox> {
    let (w, h) = (image.width(), image.height());
    let mut visited = vec![false; (w * h) as usize];
    let mut boxes: Vec<(u64, PixelBox)> = Vec::new();
    let mut queue: Vec<(u32, u32)> = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            let idx = (sy * w + sx) as usize;
            if visited[idx] || !is_foreground(image.get(sx, sy)) {
                continue;
            }
            visited[idx] = true;
            queue.clear();
            queue.push((sx, sy));
            let (mut x0, mut y0, mut x1, mut y1) = (sx, sy, sx, sy);
            let mut area = 0usize;
            while let Some((x, y)) = queue.pop() {
                area += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                let neighbors = [
                    (x.wrapping_sub(1), y),
                    (x + 1, y),
                    (x, y.wrapping_sub(1)),
                    (x, y + 1),
                ];
                for (nx, ny) in neighbors {
                    if nx < w && ny < h {
                        let nidx = (ny * w + nx) as usize;
                        if !visited[nidx] && is_foreground(image.get(nx, ny)) {
                            visited[nidx] = true;
                            queue.push((nx, ny));
                        }
                    }
                }
            }
            if area >= MIN_BLOB_AREA {
                let bbox = PixelBox {
                    x: x0,
                    y: y0,
                    w: x1 - x0 + 1,
                    h: y1 - y0 + 1,
                };
                boxes.push((area as u64, bbox));
            }
        }
    }
    boxes.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(a.1.x.cmp(&b.1.x))
            .then(a.1.y.cmp(&b.1.y))
    });
    boxes.into_iter().map(|(_, b)| b).collect()
}

/// Fraction of ground-truth instances recovered by [`blob_propose`] at the
/// given IoU threshold.
pub fn proposer_recall(dataset: &Dataset, iou_threshold: f64) -> f64 {
    if dataset.annotations.is_empty() {
        return 1.0;
    }
    let mut hit = 0usize;
    for (image_id, image) in dataset.images.iter().enumerate() {
        let proposals = blob_propose(image);
        for ann in dataset.annotations.iter().filter(|a| a.image_id == image_id) {
            if proposals.iter().any(|p| p.iou(&ann.bbox) >= iou_threshold) {
                hit += 1;
            }
        }
    }
    hit as f64 / dataset.annotations.len() as f64
}
