//! Incremental updates driven by confusion mining.
//!
//! After pretraining, the confusion matrix on held-out data points at
//! composition pairs the detector mixes up. Each mined pair (an
//! underperforming composition and the distractor it gets predicted as)
//! seeds a contrastive prompt — extra trainable rows spliced into the
//! underperformer's class phrase — and an increment round trains on the
//! union of old and new data under a parameter mask chosen by the update
//! regime. Frozen parts (featurizer, composition map, function words,
//! initialization copies) must come out bitwise untouched, which the tests
//! and the acceptance suite both verify.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::complosses::{LossWeights, SmoothingPolicy};
use crate::compspace::{CompositionId, SplitSpec};
use crate::error::{Error, Result};
use crate::evalkit::{class_agnostic_nms, confusion_matrix, ConfusionMatrix, EvalParams, EvalReport};
use crate::scenegen::Dataset;
use crate::tokenmodel::{Model, PromptSlot};
use crate::trainer::{
    collect_detections, dataset_ground_truth, evaluate_model, train, TrainConfig, TrainLog,
    TrainMask,
};

/// One mined confusion: `underperformer` is the ground-truth composition,
/// `distractor` the composition it gets predicted as, `rate` the
/// row-normalized confusion rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusedPair {
    pub underperformer: CompositionId,
    pub distractor: CompositionId,
    pub rate: f64,
}

/// Extracts off-diagonal confusion rates at or above `threshold` from a
/// row-normalized confusion matrix, strongest first (ties broken by
/// underperformer id, then distractor id).
pub fn mine_confusions(matrix: &ConfusionMatrix, threshold: f64) -> Result<Vec<ConfusedPair>> {
    if !(0.0 < threshold && threshold <= 1.0) {
        return Err(Error::Validation(format!(
            "confusion threshold {threshold} outside (0, 1]"
        )));
    }
    let normalized = matrix.normalized_rows();
    let n = matrix.num_compositions();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && normalized[[i, j]] >= threshold {
                pairs.push(ConfusedPair {
                    underperformer: i,
                    distractor: j,
                    rate: normalized[[i, j]],
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.rate
            .partial_cmp(&a.rate)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.underperformer.cmp(&b.underperformer))
            .then(a.distractor.cmp(&b.distractor))
    });
    Ok(pairs)
}

/// Runs the detector over a dataset and tabulates ground truth against the
/// surviving (post-NMS) predictions.
pub fn model_confusions(
    model: &Model,
    dataset: &Dataset,
    class_list: &[CompositionId],
    params: &EvalParams,
    score_threshold: f64,
    match_iou: f64,
) -> Result<ConfusionMatrix> {
    let detections = collect_detections(model, dataset, class_list, score_threshold)?;
    let survivors = class_agnostic_nms(&detections, params.nms_iou);
    let ground_truth = dataset_ground_truth(dataset);
    confusion_matrix(&survivors, &ground_truth, &model.space, match_iou)
}

/// Keeps at most one pair per underperformer (the strongest), dropping
/// underperformers already in the pretraining set. Returns the kept pairs
/// and a human-readable note per dropped or merged entry. Errors when
/// nothing survives.
pub fn build_increment_set(
    pairs: &[ConfusedPair],
    split: &SplitSpec,
) -> Result<(Vec<ConfusedPair>, Vec<String>)> {
    let mut kept: Vec<ConfusedPair> = Vec::new();
    let mut notes = Vec::new();
    let pretrain: Vec<CompositionId> = split.pretrain().collect();
    for p in pairs {
        if pretrain.contains(&p.underperformer) {
            notes.push(format!(
                "dropped pair ({} -> {}): composition {} is already in the pretraining set",
                p.underperformer, p.distractor, p.underperformer
            ));
            continue;
        }
        if kept.iter().any(|k| k.underperformer == p.underperformer) {
            notes.push(format!(
                "merged pair ({} -> {}): composition {} already has a stronger pair",
                p.underperformer, p.distractor, p.underperformer
            ));
            continue;
        }
        kept.push(*p);
    }
    if kept.is_empty() {
        return Err(Error::EmptyInput(
            "no confusion pair survives filtering; nothing to increment".into(),
        ));
    }
    Ok((kept, notes))
}

/// Which parts of a contrastive prompt to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptComponents {
    /// `is not <distractor> but is <target>`
    Both,
    /// `is not <distractor>`
    Negation,
    /// `is <target>`
    Affirmation,
}

impl PromptComponents {
    /// Initialization text for a prompt targeting `target_name` against
    /// `distractor_name`.
    pub fn text(&self, target_name: &str, distractor_name: &str) -> String {
        match self {
            Self::Both => format!("is not {distractor_name} but is {target_name}"),
            Self::Negation => format!("is not {distractor_name}"),
            Self::Affirmation => format!("is {target_name}"),
        }
    }
}

/// Embeds a whitespace-separated prompt: function words resolve to their
/// frozen embeddings, primitive names to copies of the current token rows.
/// The returned rows are independent copies — training them never moves the
/// tables they came from.
pub fn prompt_tokens_from_text(model: &Model, text: &str) -> Result<Array2<f64>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::EmptyInput("prompt text is empty".into()));
    }
    let mut rows = Array2::zeros((words.len(), model.dim));
    for (k, word) in words.iter().enumerate() {
        if let Some(row) = model.words.lookup(word) {
            rows.row_mut(k).assign(&row);
        } else if let Ok(a) = model.space.attribute_id(word) {
            rows.row_mut(k).assign(&model.table.attr.row(a));
        } else if let Ok(o) = model.space.object_id(word) {
            rows.row_mut(k).assign(&model.table.obj.row(o));
        } else {
            return Err(Error::UnknownWord((*word).to_string()));
        }
    }
    Ok(rows)
}

/// Builds a contrastive prompt for `target` against `distractor` and
/// attaches it to the model. Returns the new prompt's slot index.
pub fn build_contrastive_prompt(
    model: &mut Model,
    target: CompositionId,
    distractor: CompositionId,
    components: PromptComponents,
) -> Result<usize> {
    if target == distractor {
        return Err(Error::Validation(
            "contrastive prompt needs two distinct compositions".into(),
        ));
    }
    let target_name = model.space.composition_name(target)?;
    let distractor_name = model.space.composition_name(distractor)?;
    let init_text = components.text(&target_name, &distractor_name);
    let tokens = prompt_tokens_from_text(model, &init_text)?;
    model.prompts.push(PromptSlot {
        owner: target,
        init_text,
        tokens,
    });
    Ok(model.prompts.len() - 1)
}

/// Parameter scope of an increment round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Update every token and prompt row.
    AllTokens,
    /// Update only tokens of the increment compositions, plus prompt rows.
    SubsetTokens,
    /// Update only prompt rows.
    PromptOnly,
}

impl Regime {
    pub fn mask(
        &self,
        space: &crate::compspace::CompositionSpace,
        increment: &[CompositionId],
    ) -> Result<TrainMask> {
        Ok(match self {
            Self::AllTokens => TrainMask::AllTokens,
            Self::SubsetTokens => TrainMask::for_compositions(space, increment)?,
            Self::PromptOnly => TrainMask::PromptOnly,
        })
    }
}

/// Everything an increment round needs besides the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncrementConfig {
    pub components: PromptComponents,
    pub regime: Regime,
    pub policy: SmoothingPolicy,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalParams,
    /// Detector score threshold used during evaluation.
    pub score_threshold: f64,
}

/// Result of one increment round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncrementOutcome {
    /// Compositions added to the increment set.
    pub added: Vec<CompositionId>,
    /// Prompt slots created this round, in pair order.
    pub prompt_slots: Vec<usize>,
    /// Test metrics immediately before the round.
    pub before: EvalReport,
    /// Test metrics after the round.
    pub after: EvalReport,
    pub log: TrainLog,
    pub notes: Vec<String>,
}

/// Differences between two evaluation reports, after minus before.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReportDeltas {
    pub d_map_overall: Option<f64>,
    pub d_map_pretrain: Option<f64>,
    pub d_map_increment: Option<f64>,
    pub d_map_unseen: Option<f64>,
    pub d_hm_seen_unseen: Option<f64>,
    pub d_hm_pretrain_increment_unseen: Option<f64>,
}

pub fn report_deltas(before: &EvalReport, after: &EvalReport) -> ReportDeltas {
    let diff = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => Some(b - a),
        _ => None,
    };
    ReportDeltas {
        d_map_overall: diff(before.map_overall, after.map_overall),
        d_map_pretrain: diff(before.map_pretrain, after.map_pretrain),
        d_map_increment: diff(before.map_increment, after.map_increment),
        d_map_unseen: diff(before.map_unseen, after.map_unseen),
        d_hm_seen_unseen: diff(before.hm_seen_unseen, after.hm_seen_unseen),
        d_hm_pretrain_increment_unseen: diff(
            before.hm_pretrain_increment_unseen,
            after.hm_pretrain_increment_unseen,
        ),
    }
}

/// Runs one full increment round:
///
/// 1. moves the mined underperformers into the split's increment set,
/// 2. evaluates the untouched model on the test set (the "before" report),
/// 3. attaches one contrastive prompt per mined pair,
/// 4. trains on `train_data` (typically pretraining plus increment scenes)
///    under the regime's parameter mask, and
/// 5. re-evaluates (the "after" report).
///
/// Returns the updated split alongside the outcome. The model's class list
/// is the full composition space throughout, matching pretraining.
pub fn run_increment(
    model: &mut Model,
    split: &SplitSpec,
    pairs: &[ConfusedPair],
    train_data: &Dataset,
    test_data: &Dataset,
    cfg: &IncrementConfig,
) -> Result<(SplitSpec, IncrementOutcome)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("increment round needs confusion pairs".into()));
    }
    let (pairs, notes) = build_increment_set(pairs, split)?;
    let added: Vec<CompositionId> = pairs.iter().map(|p| p.underperformer).collect();
    let new_split = split.with_increment(&model.space, &added)?;
    let class_list = model.space.all_compositions();

    let before = evaluate_model(
        model,
        test_data,
        &new_split,
        &class_list,
        &cfg.eval,
        cfg.score_threshold,
    )?;

    let mut prompt_slots = Vec::with_capacity(pairs.len());
    for p in &pairs {
        prompt_slots.push(build_contrastive_prompt(
            model,
            p.underperformer,
            p.distractor,
            cfg.components,
        )?);
    }

    let mask = cfg.regime.mask(&model.space, &added)?;
    let log = train(
        model,
        train_data,
        &class_list,
        &cfg.policy,
        &cfg.weights,
        &mask,
        &cfg.train,
    )?;

    let after = evaluate_model(
        model,
        test_data,
        &new_split,
        &class_list,
        &cfg.eval,
        cfg.score_threshold,
    )?;

    Ok((
        new_split,
        IncrementOutcome {
            added,
            prompt_slots,
            before,
            after,
            log,
            notes,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compspace::CompositionSpace;
    use crate::scenegen::{generate_dataset, SceneSpec};
    use crate::tokenmodel::changed_arrays;

    fn hand_matrix(n: usize, cells: &[(usize, usize, u64)]) -> ConfusionMatrix {
        let mut m = ConfusionMatrix::new(n);
        for &(i, j, v) in cells {
            m.counts[[i, j]] = v;
        }
        m
    }

    #[test]
    fn test_mine_confusions_orders_by_rate() {
        // row 2: 30% confused with 5; row 7: 60% confused with 1
        let m = hand_matrix(8, &[(2, 2, 7), (2, 5, 3), (7, 1, 6), (7, 7, 4)]);
        let pairs = mine_confusions(&m, 0.25).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].underperformer, 7);
        assert_eq!(pairs[0].distractor, 1);
        assert!((pairs[0].rate - 0.6).abs() < 1e-12);
        assert_eq!(pairs[1].underperformer, 2);
        assert!((pairs[1].rate - 0.3).abs() < 1e-12);
    }

    #[test]
    fn test_mine_confusions_ignores_diagonal_and_below_threshold() {
        let m = hand_matrix(4, &[(1, 1, 99), (1, 0, 1)]);
        assert!(mine_confusions(&m, 0.25).unwrap().is_empty());
        assert!(mine_confusions(&m, 0.0).is_err());
        assert!(mine_confusions(&m, 1.5).is_err());
    }

    #[test]
    fn test_build_increment_set_filters_and_dedupes() {
        let space = CompositionSpace::color_shape_default();
        let split = SplitSpec::color_shape_default(&space).unwrap();
        let pretrain_comp = split.pretrain().next().unwrap();
        let unseen = split.unseen();
        let pairs = vec![
            ConfusedPair { underperformer: unseen[0], distractor: unseen[1], rate: 0.9 },
            ConfusedPair { underperformer: pretrain_comp, distractor: unseen[0], rate: 0.8 },
            ConfusedPair { underperformer: unseen[0], distractor: unseen[2], rate: 0.7 },
            ConfusedPair { underperformer: unseen[3], distractor: unseen[1], rate: 0.6 },
        ];
        let (kept, notes) = build_increment_set(&pairs, &split).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].underperformer, unseen[0]);
        assert_eq!(kept[0].distractor, unseen[1]); // strongest pair kept
        assert_eq!(kept[1].underperformer, unseen[3]);
        assert_eq!(notes.len(), 2); // one dropped, one merged
    }

    #[test]
    fn test_build_increment_set_errors_when_empty() {
        let space = CompositionSpace::color_shape_default();
        let split = SplitSpec::color_shape_default(&space).unwrap();
        let pretrain_comp = split.pretrain().next().unwrap();
        let pairs = vec![ConfusedPair {
            underperformer: pretrain_comp,
            distractor: 0,
            rate: 0.9,
        }];
        assert!(build_increment_set(&pairs, &split).is_err());
    }

    #[test]
    fn test_prompt_text_variants() {
        assert_eq!(
            PromptComponents::Both.text("green cylinder", "green cube"),
            "is not green cube but is green cylinder"
        );
        assert_eq!(
            PromptComponents::Negation.text("green cylinder", "green cube"),
            "is not green cube"
        );
        assert_eq!(
            PromptComponents::Affirmation.text("green cylinder", "green cube"),
            "is green cylinder"
        );
    }

    #[test]
    fn test_prompt_tokens_copy_current_rows() {
        let space = CompositionSpace::color_shape_default();
        let model = Model::new(space, 16, 5).unwrap();
        let rows = prompt_tokens_from_text(&model, "is not green cube").unwrap();
        assert_eq!(rows.nrows(), 4);
        assert_eq!(rows.row(0), model.words.lookup("is").unwrap());
        assert_eq!(rows.row(1), model.words.lookup("not").unwrap());
        let green = model.space.attribute_id("green").unwrap();
        let cube = model.space.object_id("cube").unwrap();
        assert_eq!(rows.row(2), model.table.attr.row(green));
        assert_eq!(rows.row(3), model.table.obj.row(cube));
    }

    #[test]
    fn test_prompt_rejects_unknown_word() {
        let space = CompositionSpace::color_shape_default();
        let model = Model::new(space, 16, 5).unwrap();
        let err = prompt_tokens_from_text(&model, "is not chartreuse cube").unwrap_err();
        assert!(matches!(err, Error::UnknownWord(w) if w == "chartreuse"));
    }

    #[test]
    fn test_build_contrastive_prompt_attaches_slot() {
        let space = CompositionSpace::color_shape_default();
        let mut model = Model::new(space, 16, 5).unwrap();
        let target = model.space.parse_composition("green cylinder").unwrap();
        let distractor = model.space.parse_composition("green cube").unwrap();
        let slot =
            build_contrastive_prompt(&mut model, target, distractor, PromptComponents::Both)
                .unwrap();
        assert_eq!(slot, 0);
        let p = &model.prompts[0];
        assert_eq!(p.owner, target);
        assert_eq!(p.init_text, "is not green cube but is green cylinder");
        assert_eq!(p.tokens.nrows(), 8);
        // the prompt now participates in the owner's phrase
        let refs = model.phrase_token_refs(target).unwrap();
        assert_eq!(refs.len(), 8 + 2);
        assert!(build_contrastive_prompt(&mut model, target, target, PromptComponents::Both)
            .is_err());
    }

    #[test]
    fn test_run_increment_prompt_only_keeps_tables_frozen() {
        let space = CompositionSpace::color_shape_default();
        let split = SplitSpec::color_shape_default(&space).unwrap();
        let pretrain: Vec<CompositionId> = split.pretrain().collect();
        let unseen = split.unseen();
        let spec = SceneSpec::default();
        let train_data = generate_dataset(&space, &pretrain, 2, &spec, 21).unwrap();
        let test_data = generate_dataset(&space, &space.all_compositions(), 1, &spec, 22).unwrap();
        let mut model = Model::new(space.clone(), 16, 9).unwrap();
        let before_model = model.clone();
        let pairs = vec![ConfusedPair {
            underperformer: unseen[0],
            distractor: unseen[1],
            rate: 0.5,
        }];
        let cfg = IncrementConfig {
            components: PromptComponents::Both,
            regime: Regime::PromptOnly,
            policy: SmoothingPolicy::default(),
            weights: LossWeights::default(),
            train: TrainConfig {
                epochs: 3,
                lr: 1.0,
                batch_size: 4,
                seed: 1,
                ..TrainConfig::default()
            },
            eval: EvalParams::default(),
            score_threshold: 0.25,
        };
        let (new_split, outcome) =
            run_increment(&mut model, &split, &pairs, &train_data, &test_data, &cfg).unwrap();
        assert_eq!(new_split.increment().collect::<Vec<_>>(), vec![unseen[0]]);
        assert_eq!(outcome.added, vec![unseen[0]]);
        assert_eq!(model.prompts.len(), 1);
        // prompt-only: every table row identical, prompt rows moved
        let changed = changed_arrays(&before_model, &model);
        assert!(
            changed.iter().all(|n| n.starts_with("prompt_")),
            "unexpected changes: {changed:?}"
        );
        assert!(outcome.before.map_overall.is_some());
        assert!(outcome.after.map_overall.is_some());
    }
}
