//! One incremental update round: mine the confusion matrix, attach
//! contrastive prompts, tune ONLY the prompts, verify nothing else moved.
//!
//! ```sh
//! cargo run --release --example incremental_round
//! ```
//!
//! After pretraining, some unseen compositions are systematically absorbed
//! by a confusable seen one (same shape, different color). The round:
//!
//! 1. evaluates the model and tabulates a row-normalized confusion matrix;
//! 2. mines (underperformer, distractor) pairs above a rate threshold;
//! 3. attaches one contrastive prompt per pair — negation tokens built
//!    from "not <distractor>" plus affirmation tokens from the target name;
//! 4. tunes under the prompt-only regime on pretraining data plus a few
//!    fresh shots of the added compositions;
//! 5. re-evaluates, and proves the frozen-parameter contract with a
//!    bitwise diff of every model array.

use czsl_lab::complosses::{LossWeights, SmoothingMode, SmoothingPolicy};
use czsl_lab::compspace::{CompositionSpace, SplitSpec};
use czsl_lab::evalkit::EvalParams;
use czsl_lab::expcli::merge_datasets;
use czsl_lab::incrementer::{
    mine_confusions, model_confusions, run_increment, IncrementConfig, PromptComponents, Regime,
};
use czsl_lab::scenegen::{generate_dataset, SceneSpec};
use czsl_lab::tokenmodel::{changed_arrays, Model};
use czsl_lab::trainer::{train, TrainConfig, TrainMask};

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.1}"))
}

fn main() -> czsl_lab::Result<()> {
    let space = CompositionSpace::color_shape_default();
    let split = SplitSpec::color_shape_default(&space)?;
    let pretrain: Vec<usize> = split.pretrain().collect();
    let class_list = space.all_compositions();
    let spec = SceneSpec::default();
    let train_data = generate_dataset(&space, &pretrain, 10, &spec, 1001)?;
    let test_data = generate_dataset(&space, &space.all_compositions(), 10, &spec, 2002)?;

    // --- pretrain with the full compositional objective -----------------
    let policy = SmoothingPolicy::default();
    let weights = LossWeights { lambda1: 0.3, lambda2: 0.3, lambda3: 0.3, lambda_h: 1.0 };
    let mut model = Model::new(space.clone(), 64, 0)?;
    let cfg = TrainConfig { epochs: 2000, lr: 5.0, seed: 0, ..TrainConfig::default() };
    println!("pretraining ({} epochs)...", cfg.epochs);
    train(
        &mut model,
        &train_data,
        &class_list,
        &policy,
        &weights,
        &TrainMask::AllTokens,
        &cfg,
    )?;

    // --- mine confusions -------------------------------------------------
    let matrix = model_confusions(&model, &test_data, &class_list, &EvalParams::default(), 0.1, 0.5)?;
    let pairs = mine_confusions(&matrix, 0.2)?;
    println!("\nmined {} confused pairs (rate >= 0.2):", pairs.len());
    for p in &pairs {
        println!(
            "  {:<18} absorbed by {:<18} rate {:.2}",
            space.composition_name(p.underperformer)?,
            space.composition_name(p.distractor)?,
            p.rate
        );
    }
    if pairs.is_empty() {
        println!("nothing to do — model already separates every composition");
        return Ok(());
    }

    // --- one prompt-only increment round ---------------------------------
    // Tokens stay frozen: only the new prompt rows may move. Training data
    // is the original pretraining set plus a few shots of the added pairs.
    let added: Vec<usize> = pairs.iter().map(|p| p.underperformer).collect();
    let fresh = generate_dataset(&space, &added, 10, &spec, 3003)?;
    let union = merge_datasets(&train_data, &fresh);
    let before_model = model.clone();
    // The round tunes against one-hot targets: the added compositions now
    // have labeled shots, and partial-credit targets would teach their
    // prompts to fire on same-part instances of the original classes.
    let inc_cfg = IncrementConfig {
        components: PromptComponents::Both,
        regime: Regime::PromptOnly,
        policy: SmoothingPolicy { mode: SmoothingMode::None, ..policy },
        weights,
        train: TrainConfig { epochs: 4000, lr: 15.0, seed: 0, ..TrainConfig::default() },
        eval: EvalParams::default(),
        score_threshold: 0.1,
    };
    println!("\ntuning prompts only ({} epochs, lr {})...", inc_cfg.train.epochs, inc_cfg.train.lr);
    let (new_split, outcome) =
        run_increment(&mut model, &split, &pairs, &union, &test_data, &inc_cfg)?;

    println!("\nadded to the increment set:");
    for &c in &outcome.added {
        println!("  {}", space.composition_name(c)?);
    }
    println!("\nprompt texts attached:");
    for &slot in &outcome.prompt_slots {
        let p = &model.prompts[slot];
        println!(
            "  slot {slot} on {:<18} init \"{}\" ({} rows)",
            space.composition_name(p.owner)?,
            p.init_text,
            p.tokens.nrows()
        );
    }

    println!("\nbefore -> after (test set, mAP percent):");
    println!(
        "  pretrain  {} -> {}",
        fmt(outcome.before.map_pretrain),
        fmt(outcome.after.map_pretrain)
    );
    println!(
        "  increment {} -> {}",
        fmt(outcome.before.map_increment),
        fmt(outcome.after.map_increment)
    );
    println!(
        "  unseen    {} -> {}",
        fmt(outcome.before.map_unseen),
        fmt(outcome.after.map_unseen)
    );
    println!(
        "  HM(pre, inc, unseen) {} -> {}",
        fmt(outcome.before.hm_pretrain_increment_unseen),
        fmt(outcome.after.hm_pretrain_increment_unseen)
    );
    println!(
        "  (increment set now {} compositions, unseen {})",
        new_split.increment().count(),
        new_split.unseen().len()
    );

    // --- the freeze contract ----------------------------------------------
    let changed = changed_arrays(&before_model, &model);
    println!("\narrays changed by the round: {changed:?}");
    assert!(
        changed.iter().all(|name| name.starts_with("prompt")),
        "prompt-only tuning must leave tokens, featurizer, and frozen map bitwise unchanged"
    );
    println!("every non-prompt array is bitwise identical to the pretrained model.");
    Ok(())
}
