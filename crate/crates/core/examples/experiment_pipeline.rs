//! The config-driven experiment pipeline on disk: gen -> train ->
//! confusions -> increment -> report, plus the reproducibility contract.
//!
//! ```sh
//! cargo run --release --example experiment_pipeline
//! ```
//!
//! This is the library-level walkthrough of what the `czsl-lab` binary
//! does. Every run lands in `runs/<hash>/`, where the hash covers the
//! full configuration snapshot, and everything below a run directory
//! except `record.json` (timestamps) is byte-reproducible: rerunning the
//! same config yields bit-identical checkpoints and reports.
//!
//! The example uses a reduced schedule so it finishes in seconds; the
//! checked-in `configs/default.json` holds the full protocol.

use czsl_lab::compspace::Manifest;
use czsl_lab::expcli::{
    cmd_confusions, cmd_gen, cmd_increment, cmd_report, cmd_train, ConfusionsOptions, ExpConfig,
    IncrementOptions, ReportOptions, Toggles, TrainOptions,
};

fn main() -> czsl_lab::Result<()> {
    let root = std::env::temp_dir().join("czsl-lab-experiment-pipeline");
    if root.exists() {
        std::fs::remove_dir_all(&root)?;
    }
    std::fs::create_dir_all(&root)?;

    // A protocol manifest plus a compact configuration. The binary reads
    // the same structure from a JSON file (`czsl-lab gen --config ...`).
    let manifest_path = root.join("manifest.json");
    Manifest::color_shape_default().save(&manifest_path)?;
    let mut config = ExpConfig {
        manifest: manifest_path,
        out_dir: root.join("out"),
        seed: 0,
        dim: 64,
        ..ExpConfig::default()
    };
    config.dataset.pretrain_shots = 10;
    config.dataset.test_shots = 12;
    config.dataset.increment_shots = 10;
    config.train.epochs = 2000;
    config.loss.weights.lambda1 = 0.3;
    config.loss.weights.lambda2 = 0.3;
    config.loss.weights.lambda3 = 0.3;
    config.loss.weights.lambda_h = 1.0;

    // --- gen ---------------------------------------------------------------
    let summary = cmd_gen(&config, false)?;
    println!(
        "gen: pretrain {} images / {} instances, test {} images / {} instances",
        summary.pretrain.images,
        summary.pretrain.instances,
        summary.test.images,
        summary.test.instances
    );
    println!("     pretrain content sha256 {}...", &summary.pretrain.content_sha256[..16]);

    // --- train (both arms) ---------------------------------------------------
    let full = cmd_train(
        &config,
        &TrainOptions { toggles: Toggles::full(), seeds: vec![0], force: false },
    )?;
    let baseline = cmd_train(
        &config,
        &TrainOptions { toggles: Toggles::baseline(), seeds: vec![0], force: false },
    )?;
    let full_dir = config.runs_dir().join(&full[0].config_hash);
    let baseline_dir = config.runs_dir().join(&baseline[0].config_hash);
    println!("\ntrain: {} -> runs/{}", full[0].variant, full[0].config_hash);
    println!("train: {} -> runs/{}", baseline[0].variant, baseline[0].config_hash);

    // --- reproducibility -----------------------------------------------------
    // Rerunning the identical config claims the same directory (hence
    // --force) and must reproduce the checkpoint byte for byte.
    let ckpt_before = std::fs::read(full_dir.join("checkpoint.ckpt"))?;
    cmd_train(
        &config,
        &TrainOptions { toggles: Toggles::full(), seeds: vec![0], force: true },
    )?;
    let ckpt_after = std::fs::read(full_dir.join("checkpoint.ckpt"))?;
    assert_eq!(ckpt_before, ckpt_after, "rerun must be byte-identical");
    println!("rerun of the same config reproduced checkpoint.ckpt byte for byte");

    // --- confusions -> plan ----------------------------------------------------
    let plan = cmd_confusions(&ConfusionsOptions {
        run: full_dir.clone(),
        threshold: None,
        out: None,
    })?;
    println!("\nconfusions: mined {} pairs, selected {}:", plan.mined.len(), plan.selected.len());
    for p in &plan.selected {
        println!(
            "  {} <- confused with {} (rate {:.2}), prompt init \"{}\"",
            p.target, p.distractor, p.rate, p.init_text
        );
    }
    if plan.is_empty() {
        println!("plan is empty at this schedule; nothing to increment");
        return Ok(());
    }

    // --- increment --------------------------------------------------------------
    let (inc_record, inc_report) = cmd_increment(&IncrementOptions {
        run: full_dir.clone(),
        plan: full_dir.join("plan.json"),
        ..IncrementOptions::default()
    })?;
    println!("\nincrement: runs/{} ({})", inc_record.config_hash, inc_record.variant);
    print!("{}", inc_report.delta_table());

    // --- report -------------------------------------------------------------------
    let tables = cmd_report(&ReportOptions {
        runs: vec![
            full_dir,
            baseline_dir,
            config.runs_dir().join(&inc_record.config_hash),
        ],
        out_csv: None,
        out_text: None,
    })?;
    println!("\n{}", tables.text);
    println!("(runs live under {})", config.runs_dir().display());
    Ok(())
}
