//! The toy trainable-token detector.
//!
//! Stand-in for a frozen open-vocabulary detector tuned through auxiliary
//! text tokens. Every attribute and object owns one trainable token in
//! `R^d`; a class phrase embeds as the mean of its token rows pushed through
//! a frozen random linear map; a region embeds through a frozen random
//! patch-projection featurizer. The score of (region, class) is a scaled dot
//! product squashed by a sigmoid, one independent probability per class.
//!
//! Only token rows (and, later, prompt-local token copies) ever receive
//! gradients. The frozen featurizer, the frozen composition map, and the
//! base copies of the initial tokens stay bitwise fixed, which is what makes
//! "no forgetting of the base model" checkable.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::compspace::{CompositionId, CompositionSpace};
use crate::error::{Error, Result};
use crate::evalkit::Detection;
use crate::scenegen::{blob_propose, Image, PixelBox, BACKGROUND, FOREGROUND_TOLERANCE};
use crate::seeds::derive_seed;

/// Minimum embedding width.
pub const MIN_DIM: usize = 8;

/// Side of the square canvas crops are resampled to.
pub const CANVAS: usize = 32;

/// Patch grid side; the canvas divides into `PATCH_GRID`² patches.
pub const PATCH_GRID: usize = 4;

/// Raw featurizer width: per-patch foreground coverage, global channel
/// means and standard deviations, foreground-masked channel means, global
/// coverage, and box squareness.
pub const RAW_FEATURE_DIM: usize = PATCH_GRID * PATCH_GRID + 11;

/// Closed vocabulary of prompt function words.
pub const FUNCTION_WORDS: [&str; 6] = ["is", "not", "but", "a", "an", "the"];

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

fn unit_normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}

/// Trainable attribute and object tokens plus frozen base copies of their
/// initial values.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    pub attr: Array2<f64>,
    pub obj: Array2<f64>,
    attr_base: Array2<f64>,
    obj_base: Array2<f64>,
}

impl TokenTable {
    /// Draws one unit-norm token per attribute and object.
    ///
    /// Rows are sampled from a Gaussian with mean 0 and standard deviation
    /// `1/sqrt(dim)`, then unit-normalized.
    pub fn init(space: &CompositionSpace, dim: usize, seed: u64) -> Result<Self> {
        if dim < MIN_DIM {
            return Err(Error::Validation(format!(
                "token dim {dim} below minimum {MIN_DIM}"
            )));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let mut attr = gaussian_matrix(space.num_attributes(), dim, std, derive_seed(seed, "attr"));
        let mut obj = gaussian_matrix(space.num_objects(), dim, std, derive_seed(seed, "obj"));
        unit_normalize_rows(&mut attr);
        unit_normalize_rows(&mut obj);
        Ok(Self {
            attr_base: attr.clone(),
            obj_base: obj.clone(),
            attr,
            obj,
        })
    }

    pub fn dim(&self) -> usize {
        self.attr.ncols()
    }

    /// Frozen copy of the attribute tokens at initialization.
    pub fn attr_base(&self) -> ArrayView2<'_, f64> {
        self.attr_base.view()
    }

    /// Frozen copy of the object tokens at initialization.
    pub fn obj_base(&self) -> ArrayView2<'_, f64> {
        self.obj_base.view()
    }

    pub(crate) fn from_parts(
        attr: Array2<f64>,
        obj: Array2<f64>,
        attr_base: Array2<f64>,
        obj_base: Array2<f64>,
    ) -> Self {
        Self { attr, obj, attr_base, obj_base }
    }
}

/// Frozen embeddings for the closed prompt function-word vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionWordTable {
    embeddings: Array2<f64>,
}

impl FunctionWordTable {
    pub fn init(dim: usize, seed: u64) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let mut embeddings = gaussian_matrix(FUNCTION_WORDS.len(), dim, std, seed);
        unit_normalize_rows(&mut embeddings);
        Self { embeddings }
    }

    pub fn lookup(&self, word: &str) -> Option<ArrayView1<'_, f64>> {
        FUNCTION_WORDS
            .iter()
            .position(|w| *w == word)
            .map(|i| self.embeddings.row(i))
    }
}

/// Frozen random projection from raw crop statistics to `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurizer {
    w: Array2<f64>,
    seed: u64,
}

impl Featurizer {
    pub fn new(dim: usize, seed: u64) -> Self {
        let std = 1.0 / (RAW_FEATURE_DIM as f64).sqrt();
        Self {
            w: gaussian_matrix(dim, RAW_FEATURE_DIM, std, seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.w.view()
    }

    /// Raw statistics of a crop.
    ///
    /// The box is letterboxed onto a square background-filled canvas and
    /// nearest-resampled to 32×32, then summarized as:
    ///
    /// - 16 per-patch foreground-coverage fractions over a 4×4 grid, where
    ///   a pixel counts as foreground when any channel differs from the
    ///   canonical background by more than the proposal tolerance
    ///   (shape-carrying and color-invariant),
    /// - 3 global channel means and 3 standard deviations,
    /// - 3 foreground-masked channel means — the average color of the
    ///   foreground pixels alone, which carries color independently of how
    ///   much of the box the shape fills (background color when the box has
    ///   no foreground),
    /// - global foreground coverage, and
    /// - box squareness `min(w, h) / max(w, h)`.
    ///
    /// Keeping color and shape in separate, individually clean statistics
    /// matters: statistics that mix the two (such as per-patch channel
    /// means) let training fit the seen compositions through entangled
    /// shortcuts that do not transfer to unseen attribute–object pairs.
    ///
    /// Everything lands in [0, 1].
    fn raw_features(image: &Image, bbox: &PixelBox) -> Result<[f64; RAW_FEATURE_DIM]> {
        if bbox.w == 0 || bbox.h == 0 {
            return Err(Error::Validation("zero-sized region".into()));
        }
        if bbox.x + bbox.w > image.width() || bbox.y + bbox.h > image.height() {
            return Err(Error::OutOfBounds(format!(
                "region {:?} outside {}x{} image",
                bbox,
                image.width(),
                image.height()
            )));
        }
        let side = bbox.w.max(bbox.h) as f64;
        let off_x = (side - bbox.w as f64) / 2.0;
        let off_y = (side - bbox.h as f64) / 2.0;
        let mut canvas = [[0f64; 3]; CANVAS * CANVAS];
        let mut foreground = [0f64; CANVAS * CANVAS];
        for j in 0..CANVAS {
            for i in 0..CANVAS {
                let sx = (i as f64 + 0.5) * side / CANVAS as f64 - off_x;
                let sy = (j as f64 + 0.5) * side / CANVAS as f64 - off_y;
                let px = if sx >= 0.0 && sx < bbox.w as f64 && sy >= 0.0 && sy < bbox.h as f64 {
                    image.get(bbox.x + sx as u32, bbox.y + sy as u32)
                } else {
                    BACKGROUND
                };
                canvas[j * CANVAS + i] = [
                    px[0] as f64 / 255.0,
                    px[1] as f64 / 255.0,
                    px[2] as f64 / 255.0,
                ];
                let contrast = px
                    .iter()
                    .zip(BACKGROUND.iter())
                    .map(|(&p, &b)| (p as i32 - b as i32).abs())
                    .max()
                    .unwrap_or(0);
                foreground[j * CANVAS + i] =
                    if contrast > FOREGROUND_TOLERANCE as i32 { 1.0 } else { 0.0 };
            }
        }
        let mut raw = [0f64; RAW_FEATURE_DIM];
        let patch = CANVAS / PATCH_GRID;
        let global_block = PATCH_GRID * PATCH_GRID;
        for py in 0..PATCH_GRID {
            for px_i in 0..PATCH_GRID {
                let mut cover = 0f64;
                for j in 0..patch {
                    for i in 0..patch {
                        cover += foreground[(py * patch + j) * CANVAS + px_i * patch + i];
                    }
                }
                raw[py * PATCH_GRID + px_i] = cover / (patch * patch) as f64;
            }
        }
        let n = (CANVAS * CANVAS) as f64;
        let fg_count: f64 = foreground.iter().sum();
        for ch in 0..3 {
            let mean = canvas.iter().map(|p| p[ch]).sum::<f64>() / n;
            let var = canvas.iter().map(|p| (p[ch] - mean).powi(2)).sum::<f64>() / n;
            raw[global_block + ch] = mean;
            raw[global_block + 3 + ch] = var.sqrt();
            raw[global_block + 6 + ch] = if fg_count > 0.0 {
                canvas
                    .iter()
                    .zip(foreground.iter())
                    .map(|(p, &f)| p[ch] * f)
                    .sum::<f64>()
                    / fg_count
            } else {
                BACKGROUND[ch] as f64 / 255.0
            };
        }
        raw[global_block + 9] = fg_count / n;
        raw[global_block + 10] = bbox.w.min(bbox.h) as f64 / bbox.w.max(bbox.h) as f64;
        Ok(raw)
    }

    /// Unit-norm region embedding of one box.
    pub fn features(&self, image: &Image, bbox: &PixelBox) -> Result<Array1<f64>> {
        let raw = Self::raw_features(image, bbox)?;
        let raw = Array1::from_iter(raw);
        let mut out = self.w.dot(&raw);
        let norm = out.dot(&out).sqrt();
        if norm > 1e-12 {
            out.mapv_inplace(|v| v / norm);
        }
        Ok(out)
    }

    /// Feature matrix for a batch of boxes, one row per box.
    pub fn features_batch(&self, image: &Image, boxes: &[PixelBox]) -> Result<Array2<f64>> {
        let dim = self.w.nrows();
        let mut out = Array2::zeros((boxes.len(), dim));
        for (i, b) in boxes.iter().enumerate() {
            out.row_mut(i).assign(&self.features(image, b)?);
        }
        Ok(out)
    }
}

/// Frozen random linear map applied to mean token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMap {
    m: Array2<f64>,
    seed: u64,
}

impl FrozenMap {
    pub fn new(dim: usize, seed: u64) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            m: gaussian_matrix(dim, dim, std, seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.m.view()
    }

    pub fn apply(&self, v: &Array1<f64>) -> Array1<f64> {
        self.m.dot(v)
    }

    /// Pulls a gradient back through the map: `d(apply)/dv^T · g`.
    pub fn backprop(&self, g: &Array1<f64>) -> Array1<f64> {
        self.m.t().dot(g)
    }
}

/// A trainable prompt attached to one composition's class phrase.
///
/// Rows are working copies of the embeddings of the prompt words at the time
/// the prompt was built; training updates the copies, never the table rows
/// or function words they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSlot {
    pub owner: CompositionId,
    pub init_text: String,
    pub tokens: Array2<f64>,
}

/// Identifies one trainable row in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRef {
    Attr(usize),
    Obj(usize),
    Prompt { slot: usize, row: usize },
}

/// The complete detector: space, trainable tokens, prompts, and frozen
/// parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub space: CompositionSpace,
    pub dim: usize,
    pub table: TokenTable,
    pub words: FunctionWordTable,
    pub prompts: Vec<PromptSlot>,
    pub featurizer: Featurizer,
    pub frozen_map: FrozenMap,
    word_seed: u64,
}

impl Model {
    /// Initializes a fresh model; all component seeds derive from `seed`.
    pub fn new(space: CompositionSpace, dim: usize, seed: u64) -> Result<Self> {
        let table = TokenTable::init(&space, dim, derive_seed(seed, "tokens"))?;
        let word_seed = derive_seed(seed, "words");
        Ok(Self {
            table,
            words: FunctionWordTable::init(dim, word_seed),
            prompts: Vec::new(),
            featurizer: Featurizer::new(dim, derive_seed(seed, "featurizer")),
            frozen_map: FrozenMap::new(dim, derive_seed(seed, "frozen-map")),
            space,
            dim,
            word_seed,
        })
    }

    pub(crate) fn from_parts(
        space: CompositionSpace,
        dim: usize,
        table: TokenTable,
        prompts: Vec<PromptSlot>,
        featurizer_seed: u64,
        frozen_map_seed: u64,
        word_seed: u64,
    ) -> Self {
        Self {
            table,
            words: FunctionWordTable::init(dim, word_seed),
            prompts,
            featurizer: Featurizer::new(dim, featurizer_seed),
            frozen_map: FrozenMap::new(dim, frozen_map_seed),
            space,
            dim,
            word_seed,
        }
    }

    pub fn word_seed(&self) -> u64 {
        self.word_seed
    }

    /// Fixed logit temperature, `10 / sqrt(d)`.
    pub fn temperature(&self) -> f64 {
        10.0 / (self.dim as f64).sqrt()
    }

    /// Trainable rows contributing to a composition's phrase embedding:
    /// prompt rows of slots owned by it, then its attribute and object
    /// tokens.
    pub fn phrase_token_refs(&self, composition: CompositionId) -> Result<Vec<TokenRef>> {
        let (a, o) = self.space.decompose(composition)?;
        let mut refs = Vec::new();
        for (slot, prompt) in self.prompts.iter().enumerate() {
            if prompt.owner == composition {
                for row in 0..prompt.tokens.nrows() {
                    refs.push(TokenRef::Prompt { slot, row });
                }
            }
        }
        refs.push(TokenRef::Attr(a));
        refs.push(TokenRef::Obj(o));
        Ok(refs)
    }

    pub fn token_row(&self, r: TokenRef) -> ArrayView1<'_, f64> {
        match r {
            TokenRef::Attr(i) => self.table.attr.row(i),
            TokenRef::Obj(i) => self.table.obj.row(i),
            TokenRef::Prompt { slot, row } => self.prompts[slot].tokens.row(row),
        }
    }

    /// Class embedding: mean of the phrase's token rows through the frozen
    /// map.
    pub fn compose_embedding(&self, composition: CompositionId) -> Result<Array1<f64>> {
        let refs = self.phrase_token_refs(composition)?;
        let mut mean = Array1::zeros(self.dim);
        for &r in &refs {
            mean += &self.token_row(r);
        }
        mean.mapv_inplace(|v| v / refs.len() as f64);
        Ok(self.frozen_map.apply(&mean))
    }

    /// Stack of class embeddings for a candidate list, one row per class.
    pub fn class_embeddings(&self, class_list: &[CompositionId]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((class_list.len(), self.dim));
        for (i, &c) in class_list.iter().enumerate() {
            out.row_mut(i).assign(&self.compose_embedding(c)?);
        }
        Ok(out)
    }

    /// Logits for boxes in an image against the given class embeddings.
    pub fn score_regions(
        &self,
        image: &Image,
        boxes: &[PixelBox],
        class_embeddings: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let features = self.featurizer.features_batch(image, boxes)?;
        Ok(score_features(
            features.view(),
            class_embeddings,
            self.temperature(),
        ))
    }

    /// Multi-label detection on one image: proposals from connected
    /// components, one detection per (box, class) with probability at or
    /// above `threshold`.
    pub fn predict(
        &self,
        image: &Image,
        image_id: usize,
        class_list: &[CompositionId],
        threshold: f64,
    ) -> Result<Vec<Detection>> {
        let boxes = blob_propose(image);
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let embeddings = self.class_embeddings(class_list)?;
        let logits = self.score_regions(image, &boxes, embeddings.view())?;
        let mut detections = Vec::new();
        for (bi, b) in boxes.iter().enumerate() {
            for (ci, &comp) in class_list.iter().enumerate() {
                let p = sigmoid(logits[[bi, ci]]);
                if p >= threshold {
                    detections.push(Detection {
                        image_id,
                        bbox: b.to_xywh(),
                        composition: comp,
                        score: p,
                    });
                }
            }
        }
        Ok(detections)
    }

    /// Total number of parameters that may receive gradients:
    /// `(|A| + |O|) · d` token entries plus every prompt row.
    pub fn trainable_param_count(&self) -> usize {
        let table = (self.space.num_attributes() + self.space.num_objects()) * self.dim;
        let prompts: usize = self.prompts.iter().map(|p| p.tokens.len()).sum();
        table + prompts
    }

    /// All named float arrays, trainable and frozen, for checkpointing and
    /// change audits. Prompt arrays are named by slot index.
    pub fn named_arrays(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = vec![
            (
                "attr_tokens".to_string(),
                self.table.attr.iter().copied().collect(),
            ),
            (
                "obj_tokens".to_string(),
                self.table.obj.iter().copied().collect(),
            ),
            (
                "attr_tokens_base".to_string(),
                self.table.attr_base.iter().copied().collect(),
            ),
            (
                "obj_tokens_base".to_string(),
                self.table.obj_base.iter().copied().collect(),
            ),
            (
                "featurizer_w".to_string(),
                self.featurizer.w.iter().copied().collect(),
            ),
            (
                "frozen_map_m".to_string(),
                self.frozen_map.m.iter().copied().collect(),
            ),
        ];
        for (i, p) in self.prompts.iter().enumerate() {
            out.push((format!("prompt_{i:03}"), p.tokens.iter().copied().collect()));
        }
        out
    }
}

/// Scaled dot-product logits: `features · embeddings^T / tau`.
pub fn score_features(
    features: ArrayView2<'_, f64>,
    class_embeddings: ArrayView2<'_, f64>,
    tau: f64,
) -> Array2<f64> {
    let mut logits = features.dot(&class_embeddings.t());
    logits.mapv_inplace(|v| v / tau);
    logits
}

/// Names of arrays whose values differ bitwise between two models.
pub fn changed_arrays(before: &Model, after: &Model) -> Vec<String> {
    let a = before.named_arrays();
    let b = after.named_arrays();
    let mut names: Vec<String> = Vec::new();
    for (name, values) in &a {
        match b.iter().find(|(n, _)| n == name) {
            Some((_, other)) => {
                let same = values.len() == other.len()
                    && values
                        .iter()
                        .zip(other.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits());
                if !same {
                    names.push(name.clone());
                }
            }
            None => names.push(name.clone()),
        }
    }
    for (name, _) in &b {
        if !a.iter().any(|(n, _)| n == name) {
            names.push(name.clone());
        }
    }
    names
}
