//! Deterministic SGD over rendered datasets.
//!
//! Images are turned into training examples once up front: region proposals
//! come from the blob proposer, each ground-truth instance claims its
//! best-overlapping proposal, unmatched proposals become background rows
//! (subsampled to a fixed ratio), and the frozen featurizer embeds every
//! kept region. Epochs then shuffle images with a seeded RNG, batch them,
//! and apply plain SGD to whichever token rows the [`TrainMask`] allows.
//! Same config, same data, same seed — bit-identical parameters out.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::complosses::{
    smooth_targets, total_loss, Grads, LossBreakdown, LossWeights, SmoothingPolicy,
};
use crate::compspace::{AttributeId, CompositionId, CompositionSpace, ObjectId};
use crate::error::{Error, Result};
use crate::scenegen::{blob_propose, Annotation, Dataset, PixelBox};
use crate::seeds::derive_seed;
use crate::tokenmodel::{Model, TokenRef};

/// Training-loop knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Images per batch.
    pub batch_size: usize,
    /// Kept background regions per foreground region.
    pub bg_ratio: f64,
    /// Proposal-to-ground-truth match threshold.
    pub match_iou: f64,
    /// Global gradient-norm cap per step; gradients above it are rescaled.
    pub max_grad_norm: f64,
    /// Seed for epoch shuffling and background subsampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 5.0,
            batch_size: 8,
            bg_ratio: 3.0,
            match_iou: 0.5,
            max_grad_norm: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Validation(format!("learning rate {} invalid", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        if !(self.bg_ratio.is_finite() && self.bg_ratio >= 0.0) {
            return Err(Error::Validation(format!(
                "background ratio {} invalid",
                self.bg_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.match_iou) {
            return Err(Error::Validation(format!(
                "match IoU {} outside [0, 1]",
                self.match_iou
            )));
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm > 0.0) {
            return Err(Error::Validation(format!(
                "gradient-norm cap {} invalid",
                self.max_grad_norm
            )));
        }
        Ok(())
    }
}

/// Which trainable rows SGD may update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMask {
    /// Every attribute token, object token, and prompt row.
    AllTokens,
    /// Only the listed attribute/object tokens, plus all prompt rows.
    SubsetTokens {
        attrs: Vec<AttributeId>,
        objs: Vec<ObjectId>,
    },
    /// Only prompt rows; the token tables stay untouched.
    PromptOnly,
}

impl TrainMask {
    /// The subset mask covering exactly the primitives of `compositions`.
    pub fn for_compositions(
        space: &CompositionSpace,
        compositions: &[CompositionId],
    ) -> Result<Self> {
        let mut attrs = Vec::new();
        let mut objs = Vec::new();
        for &c in compositions {
            let (a, o) = space.decompose(c)?;
            if !attrs.contains(&a) {
                attrs.push(a);
            }
            if !objs.contains(&o) {
                objs.push(o);
            }
        }
        attrs.sort_unstable();
        objs.sort_unstable();
        Ok(Self::SubsetTokens { attrs, objs })
    }

    pub fn allows(&self, token: TokenRef) -> bool {
        match self {
            Self::AllTokens => true,
            Self::SubsetTokens { attrs, objs } => match token {
                TokenRef::Attr(i) => attrs.contains(&i),
                TokenRef::Obj(i) => objs.contains(&i),
                TokenRef::Prompt { .. } => true,
            },
            Self::PromptOnly => matches!(token, TokenRef::Prompt { .. }),
        }
    }
}

/// Assigns ground-truth labels to region proposals.
///
/// Each annotation, in order, claims the not-yet-claimed proposal with the
/// highest IoU at or above `iou_threshold` (ties go to the earlier
/// proposal). Returns one entry per proposal: the matched composition or
/// `None` for background.
pub fn match_regions(
    proposals: &[PixelBox],
    annotations: &[&Annotation],
    iou_threshold: f64,
) -> Vec<Option<CompositionId>> {
    let mut labels: Vec<Option<CompositionId>> = vec![None; proposals.len()];
    for ann in annotations {
        let mut best: Option<(usize, f64)> = None;
        for (pi, p) in proposals.iter().enumerate() {
            if labels[pi].is_some() {
                continue;
            }
            let iou = ann.bbox.iou(p);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((pi, iou));
            }
        }
        if let Some((pi, _)) = best {
            labels[pi] = Some(ann.composition);
        }
    }
    labels
}

/// One image, featurized and labeled, ready for batching.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub image_id: usize,
    /// Kept regions × model dim.
    pub features: Array2<f64>,
    /// Per kept region: matched composition or background.
    pub labels: Vec<Option<CompositionId>>,
    /// Per-class soft targets, kept regions × class list.
    pub targets: Array2<f64>,
}

/// Proposes, matches, subsamples background, and featurizes every image.
///
/// Images contributing no kept region are dropped. Background proposals are
/// subsampled per image to at most `ceil(bg_ratio × max(foreground, 1))`,
/// chosen by a seeded shuffle.
pub fn prepare_dataset(
    model: &Model,
    dataset: &Dataset,
    class_list: &[CompositionId],
    policy: &SmoothingPolicy,
    cfg: &TrainConfig,
) -> Result<Vec<PreparedImage>> {
    cfg.validate()?;
    policy.validate()?;
    let mut prepared = Vec::new();
    for (image_id, image) in dataset.images.iter().enumerate() {
        let proposals = blob_propose(image);
        let annotations = dataset.annotations_for(image_id);
        let assignment = match_regions(&proposals, &annotations, cfg.match_iou);
        let fg: Vec<usize> = (0..proposals.len()).filter(|&i| assignment[i].is_some()).collect();
        let bg: Vec<usize> = (0..proposals.len()).filter(|&i| assignment[i].is_none()).collect();
        let keep_bg = ((cfg.bg_ratio * fg.len().max(1) as f64).ceil() as usize).min(bg.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &format!("background-{image_id}"),
        ));
        let mut bg = bg;
        bg.shuffle(&mut rng);
        bg.truncate(keep_bg);
        let mut kept: Vec<usize> = fg.iter().chain(bg.iter()).copied().collect();
        kept.sort_unstable();
        if kept.is_empty() {
            continue;
        }
        let boxes: Vec<PixelBox> = kept.iter().map(|&i| proposals[i]).collect();
        let labels: Vec<Option<CompositionId>> = kept.iter().map(|&i| assignment[i]).collect();
        let features = model.featurizer.features_batch(image, &boxes)?;
        let targets = smooth_targets(&model.space, &labels, class_list, policy)?;
        prepared.push(PreparedImage {
            image_id,
            features,
            labels,
            targets,
        });
    }
    if prepared.is_empty() {
        return Err(Error::EmptyInput(
            "no image produced any training region".into(),
        ));
    }
    Ok(prepared)
}

/// Per-epoch means of the (already weighted) loss terms, plus anything the
/// loop wants to flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<LossBreakdown>,
    pub notes: Vec<String>,
    /// Seed the run was driven by.
    pub seed: u64,
    /// Wall-clock duration of the loop in milliseconds. Not deterministic;
    /// keep it out of artifacts that must reproduce byte-identically.
    pub wall_ms: f64,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<&LossBreakdown> {
        self.epochs.last()
    }
}

/// Global L2 norm over every gradient entry.
pub fn grad_norm(grads: &Grads) -> f64 {
    let mut sum = 0.0;
    sum += grads.attr.iter().map(|v| v * v).sum::<f64>();
    sum += grads.obj.iter().map(|v| v * v).sum::<f64>();
    for p in &grads.prompts {
        sum += p.iter().map(|v| v * v).sum::<f64>();
    }
    sum.sqrt()
}

/// Rescales the gradients so their global norm is at most `max_norm`.
pub fn clip_grads(grads: &mut Grads, max_norm: f64) {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.attr.mapv_inplace(|v| v * scale);
        grads.obj.mapv_inplace(|v| v * scale);
        for p in &mut grads.prompts {
            p.mapv_inplace(|v| v * scale);
        }
    }
}

/// Applies one SGD step, touching only rows the mask allows.
pub fn apply_update(model: &mut Model, grads: &Grads, mask: &TrainMask, lr: f64) {
    for i in 0..model.table.attr.nrows() {
        if mask.allows(TokenRef::Attr(i)) {
            model.table.attr.row_mut(i).scaled_add(-lr, &grads.attr.row(i));
        }
    }
    for i in 0..model.table.obj.nrows() {
        if mask.allows(TokenRef::Obj(i)) {
            model.table.obj.row_mut(i).scaled_add(-lr, &grads.obj.row(i));
        }
    }
    for (slot, g) in grads.prompts.iter().enumerate() {
        for row in 0..g.nrows() {
            if mask.allows(TokenRef::Prompt { slot, row }) {
                model.prompts[slot]
                    .tokens
                    .row_mut(row)
                    .scaled_add(-lr, &g.row(row));
            }
        }
    }
}

/// Runs the full training loop, mutating `model` in place.
///
/// Every epoch shuffles images with a seed derived from `cfg.seed` and the
/// epoch index, batches them, evaluates the combined objective, clips the
/// gradient to `cfg.max_grad_norm`, and applies masked SGD. Training aborts
/// with [`Error::NonFinite`] the moment any loss term leaves the finite
/// range. The HSIC term needs at least two labeled instances, so batches
/// with fewer skip it (noted once in the log).
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    class_list: &[CompositionId],
    policy: &SmoothingPolicy,
    weights: &LossWeights,
    mask: &TrainMask,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    weights.validate()?;
    let started = std::time::Instant::now();
    let prepared = prepare_dataset(model, dataset, class_list, policy, cfg)?;
    let mut log = TrainLog {
        epochs: Vec::with_capacity(cfg.epochs),
        notes: Vec::new(),
        seed: cfg.seed,
        wall_ms: 0.0,
    };
    let mut hsic_note_logged = false;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("epoch-{epoch}")));
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 6];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let rows: usize = chunk.iter().map(|&i| prepared[i].features.nrows()).sum();
            let dim = model.dim;
            let mut features = Array2::zeros((rows, dim));
            let mut targets = Array2::zeros((rows, class_list.len()));
            let mut instance_comps = Vec::new();
            let mut r = 0;
            for &i in chunk {
                let p = &prepared[i];
                let n = p.features.nrows();
                features
                    .slice_mut(ndarray::s![r..r + n, ..])
                    .assign(&p.features);
                targets
                    .slice_mut(ndarray::s![r..r + n, ..])
                    .assign(&p.targets);
                instance_comps.extend(p.labels.iter().flatten().copied());
                r += n;
            }
            let mut batch_weights = *weights;
            if batch_weights.lambda_h > 0.0 && instance_comps.len() < 2 {
                batch_weights.lambda_h = 0.0;
                if !hsic_note_logged {
                    log.notes.push(
                        "decorrelation term skipped for batches with fewer than two labeled instances"
                            .to_string(),
                    );
                    hsic_note_logged = true;
                }
            }
            let (breakdown, mut grads) = total_loss(
                model,
                class_list,
                features.view(),
                targets.view(),
                &instance_comps,
                &batch_weights,
            )?;
            if let Some(term) = breakdown.non_finite_term() {
                return Err(Error::NonFinite {
                    term: term.to_string(),
                    step,
                });
            }
            clip_grads(&mut grads, cfg.max_grad_norm);
            apply_update(model, &grads, mask, cfg.lr);
            sums[0] += breakdown.classification;
            sums[1] += breakdown.l_distance;
            sums[2] += breakdown.l_a;
            sums[3] += breakdown.l_o;
            sums[4] += breakdown.l_hsic;
            sums[5] += breakdown.total;
            batches += 1;
            step += 1;
        }
        let k = batches as f64;
        log.epochs.push(LossBreakdown {
            classification: sums[0] / k,
            l_distance: sums[1] / k,
            l_a: sums[2] / k,
            l_o: sums[3] / k,
            l_hsic: sums[4] / k,
            total: sums[5] / k,
        });
    }
    log.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(log)
}

/// Runs the detector over every image and scores the detections against the
/// dataset's annotations.
pub fn evaluate_model(
    model: &Model,
    dataset: &Dataset,
    split: &crate::compspace::SplitSpec,
    class_list: &[CompositionId],
    params: &crate::evalkit::EvalParams,
    score_threshold: f64,
) -> Result<crate::evalkit::EvalReport> {
    let detections = collect_detections(model, dataset, class_list, score_threshold)?;
    let ground_truth = dataset_ground_truth(dataset);
    crate::evalkit::nms_map(&detections, &ground_truth, &model.space, split, params)
}

/// All raw (pre-NMS) detections over a dataset.
pub fn collect_detections(
    model: &Model,
    dataset: &Dataset,
    class_list: &[CompositionId],
    score_threshold: f64,
) -> Result<Vec<crate::evalkit::Detection>> {
    let mut detections = Vec::new();
    for (image_id, image) in dataset.images.iter().enumerate() {
        detections.extend(model.predict(image, image_id, class_list, score_threshold)?);
    }
    Ok(detections)
}

/// Dataset annotations as evaluation ground truth.
pub fn dataset_ground_truth(dataset: &Dataset) -> Vec<crate::evalkit::GroundTruth> {
    dataset
        .annotations
        .iter()
        .map(|a| crate::evalkit::GroundTruth {
            image_id: a.image_id,
            bbox: a.bbox.to_xywh(),
            composition: a.composition,
        })
        .collect()
}
