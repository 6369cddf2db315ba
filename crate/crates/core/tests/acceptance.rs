//! Acceptance gate: nine criteria covering oracle equivalence, gradient
//! checks, evaluation artifacts, freeze contracts, directional training
//! claims, determinism, and protocol fidelity.
//!
//! Each criterion prints exactly one `criterion N ... PASS/FAIL` line; run
//! with `cargo test --test acceptance -- --nocapture` to see them on
//! success. The whole suite is deterministic.

use std::path::PathBuf;
use std::time::Instant;

use czsl_lab::checkpoint::load_model;
use czsl_lab::complosses::{
    distance_loss, hsic, orthogonality_loss, smooth_targets, total_loss, Kernel, LossWeights,
    SmoothingMode, SmoothingPolicy,
};
use czsl_lab::compspace::{CompositionSpace, Manifest, SplitSpec};
use czsl_lab::evalkit::{
    average_precision, harmonic_mean, harmonic_mean3, map_without_nms, nms_map, Detection,
    EvalParams, EvalReport, GroundTruth, IouSweep,
};
use czsl_lab::expcli::{
    cmd_confusions, cmd_gen, cmd_increment, cmd_train, ConfusionsOptions, ExpConfig, GenSummary,
    IncrementOptions, IncrementReport, RunRecord, Toggles, TrainOptions,
};
use czsl_lab::incrementer::{build_contrastive_prompt, PromptComponents, Regime};
use czsl_lab::scenegen::{generate_dataset, SceneSpec};
use czsl_lab::tokenmodel::{changed_arrays, Model};
use czsl_lab::trainer::{train, TrainConfig};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

// ===========================================================================
// criterion 1 — loss terms match brute-force oracles
// ===========================================================================

fn naive_unit_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    out
}

/// Mean absolute pairwise cosine, written as plain loops.
fn oracle_orthogonality(rows: &Array2<f64>) -> f64 {
    let n = rows.nrows();
    if n < 2 {
        return 0.0;
    }
    let unit = naive_unit_rows(rows);
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut dot = 0.0;
            for k in 0..unit.ncols() {
                dot += unit[[i, k]] * unit[[j, k]];
            }
            sum += dot.abs();
        }
    }
    sum / (n * n - n) as f64
}

/// Negative log distance between unit-row group means, plain loops.
fn oracle_distance(attr: &Array2<f64>, obj: &Array2<f64>) -> f64 {
    let ua = naive_unit_rows(attr);
    let uo = naive_unit_rows(obj);
    let d = attr.ncols();
    let mut delta = vec![0.0; d];
    for k in 0..d {
        let ma: f64 = (0..ua.nrows()).map(|i| ua[[i, k]]).sum::<f64>() / ua.nrows() as f64;
        let mo: f64 = (0..uo.nrows()).map(|i| uo[[i, k]]).sum::<f64>() / uo.nrows() as f64;
        delta[k] = ma - mo;
    }
    let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    -norm.ln()
}

fn naive_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, m) = (a.nrows(), b.ncols());
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

fn oracle_gram(x: &Array2<f64>, gaussian: bool) -> Array2<f64> {
    let n = x.nrows();
    if !gaussian {
        return naive_matmul(x, &x.t().to_owned());
    }
    let mut sq = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut d = 0.0;
            for k in 0..x.ncols() {
                let v = x[[i, k]] - x[[j, k]];
                d += v * v;
            }
            sq[[i, j]] = d;
        }
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push(sq[[i, j]]);
        }
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if pairs.is_empty() {
        0.0
    } else if pairs.len() % 2 == 1 {
        pairs[pairs.len() / 2]
    } else {
        0.5 * (pairs[pairs.len() / 2 - 1] + pairs[pairs.len() / 2])
    };
    let sigma_sq = if median > 0.0 { median } else { 1.0 };
    sq.mapv(|d| (-d / (2.0 * sigma_sq)).exp())
}

/// `tr(K H L H) / (n - 1)^2` evaluated by explicit matrix construction:
/// builds `H = I - (1/n) 1 1^T`, multiplies naively, takes the trace.
fn oracle_hsic(x: &Array2<f64>, y: &Array2<f64>, gaussian: bool) -> f64 {
    let n = x.nrows();
    let k = oracle_gram(x, gaussian);
    let l = oracle_gram(y, gaussian);
    let h = Array2::from_shape_fn((n, n), |(i, j)| {
        (if i == j { 1.0 } else { 0.0 }) - 1.0 / n as f64
    });
    let khlh = naive_matmul(&naive_matmul(&naive_matmul(&k, &h), &l), &h);
    let mut trace = 0.0;
    for i in 0..n {
        trace += khlh[[i, i]];
    }
    trace / ((n - 1) as f64 * (n - 1) as f64)
}

/// Per-cell case table for every smoothing mode.
fn oracle_targets(
    space: &CompositionSpace,
    ground_truth: &[Option<usize>],
    class_list: &[usize],
    policy: &SmoothingPolicy,
) -> Array2<f64> {
    let mut t = Array2::zeros((ground_truth.len(), class_list.len()));
    for (r, gt) in ground_truth.iter().enumerate() {
        let Some(gt) = gt else { continue };
        let (a_t, o_t) = space.decompose(*gt).unwrap();
        for (ci, &c) in class_list.iter().enumerate() {
            let (a, o) = space.decompose(c).unwrap();
            t[[r, ci]] = match policy.mode {
                SmoothingMode::None => {
                    if a == a_t && o == o_t {
                        1.0
                    } else {
                        0.0
                    }
                }
                SmoothingMode::Conventional => {
                    let hot = if a == a_t && o == o_t { 1.0 } else { 0.0 };
                    (1.0 - policy.epsilon) * hot + policy.epsilon / class_list.len() as f64
                }
                SmoothingMode::Compositional => {
                    if a == a_t && o == o_t {
                        policy.p_c
                    } else if o == o_t {
                        policy.p_o
                    } else if a == a_t {
                        policy.p_a
                    } else {
                        0.0
                    }
                }
            };
        }
    }
    t
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let space = CompositionSpace::color_shape_default();
    let mut max_err = 0.0f64;
    let mut inputs = 0usize;
    for k in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k);
        let na = rng.random_range(2..7);
        let no = rng.random_range(2..5);
        let d = rng.random_range(3..10);
        let scale = 0.5 + 2.0 * rng.random::<f64>();
        let attr = Array2::from_shape_fn((na, d), |_| scale * (rng.random::<f64>() - 0.5));
        let obj = Array2::from_shape_fn((no, d), |_| scale * (rng.random::<f64>() - 0.5));

        max_err = max_err.max(rel_err(
            orthogonality_loss(attr.view()),
            oracle_orthogonality(&attr),
        ));
        max_err = max_err.max(rel_err(
            orthogonality_loss(obj.view()),
            oracle_orthogonality(&obj),
        ));
        let dist = distance_loss(attr.view(), obj.view()).map_err(|e| e.to_string())?;
        max_err = max_err.max(rel_err(dist, oracle_distance(&attr, &obj)));

        let n = rng.random_range(2..8);
        let x = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() - 0.5);
        let y = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() - 0.5);
        for gaussian in [false, true] {
            let kernel = if gaussian { Kernel::Gaussian } else { Kernel::Linear };
            let got = hsic(x.view(), y.view(), kernel).map_err(|e| e.to_string())?;
            max_err = max_err.max(rel_err(got, oracle_hsic(&x, &y, gaussian)));
        }

        let mode = [SmoothingMode::None, SmoothingMode::Conventional, SmoothingMode::Compositional]
            [(k % 3) as usize];
        let policy = SmoothingPolicy {
            mode,
            p_c: 1.0,
            p_o: rng.random::<f64>() * 0.5,
            p_a: rng.random::<f64>() * 0.5,
            epsilon: rng.random::<f64>() * 0.3,
        };
        let mut classes = space.all_compositions();
        classes.shuffle(&mut rng);
        classes.truncate(rng.random_range(1..=classes.len()));
        let gts: Vec<Option<usize>> = (0..6)
            .map(|_| {
                if rng.random::<f64>() < 0.2 {
                    None
                } else {
                    Some(rng.random_range(0..space.num_compositions()))
                }
            })
            .collect();
        let got = smooth_targets(&space, &gts, &classes, &policy).map_err(|e| e.to_string())?;
        let want = oracle_targets(&space, &gts, &classes, &policy);
        for (a, b) in got.iter().zip(want.iter()) {
            if (a - b).abs() > 0.0 {
                max_err = max_err.max(rel_err(*a, *b));
            }
        }
        inputs += 6;
    }
    let secs = started.elapsed().as_secs_f64();
    if max_err < 1e-10 && inputs >= 100 && secs < 10.0 {
        Ok(format!("{inputs} inputs, max rel err {max_err:.2e}, {secs:.2}s"))
    } else {
        Err(format!("{inputs} inputs, max rel err {max_err:.2e}, {secs:.2}s (need <1e-10, >=100 inputs, <10s)"))
    }
}

// ===========================================================================
// criterion 2 — analytic gradients vs central finite differences
// ===========================================================================

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let space = CompositionSpace::color_shape_default();
    let classes = space.all_compositions();
    let step = 1e-5;
    let mut max_err = 0.0f64;
    for k in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + k);
        let mut model = Model::new(space.clone(), 12, 9000 + k).map_err(|e| e.to_string())?;
        // rotate through weight settings that isolate the loss families:
        // classification alone, classification + separation, and
        // classification + decorrelation
        let weights = match k % 3 {
            0 => LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda_h: 0.0 },
            1 => LossWeights { lambda1: 0.3, lambda2: 0.2, lambda3: 0.25, lambda_h: 0.0 },
            _ => LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda_h: 0.7 },
        };
        let gts: Vec<Option<usize>> = (0..5)
            .map(|_| Some(rng.random_range(0..space.num_compositions())))
            .chain(std::iter::once(None))
            .collect();
        let instance_comps: Vec<usize> = gts.iter().flatten().copied().collect();
        let targets = smooth_targets(&space, &gts, &classes, &SmoothingPolicy::default())
            .map_err(|e| e.to_string())?;
        let features =
            Array2::from_shape_fn((gts.len(), model.dim), |_| rng.random::<f64>() - 0.5);

        let (_, grads) = total_loss(
            &model,
            &classes,
            features.view(),
            targets.view(),
            &instance_comps,
            &weights,
        )
        .map_err(|e| e.to_string())?;

        let eval = |m: &Model| -> f64 {
            total_loss(
                m,
                &classes,
                features.view(),
                targets.view(),
                &instance_comps,
                &weights,
            )
            .unwrap()
            .0
            .total
        };
        // four attribute entries and three object entries per configuration
        for _ in 0..4 {
            let r = rng.random_range(0..space.num_attributes());
            let c = rng.random_range(0..model.dim);
            let orig = model.table.attr[[r, c]];
            model.table.attr[[r, c]] = orig + step;
            let plus = eval(&model);
            model.table.attr[[r, c]] = orig - step;
            let minus = eval(&model);
            model.table.attr[[r, c]] = orig;
            let fd = (plus - minus) / (2.0 * step);
            max_err = max_err.max((grads.attr[[r, c]] - fd).abs() / grads.attr[[r, c]].abs().max(fd.abs()).max(1e-6));
        }
        for _ in 0..3 {
            let r = rng.random_range(0..space.num_objects());
            let c = rng.random_range(0..model.dim);
            let orig = model.table.obj[[r, c]];
            model.table.obj[[r, c]] = orig + step;
            let plus = eval(&model);
            model.table.obj[[r, c]] = orig - step;
            let minus = eval(&model);
            model.table.obj[[r, c]] = orig;
            let fd = (plus - minus) / (2.0 * step);
            max_err = max_err.max((grads.obj[[r, c]] - fd).abs() / grads.obj[[r, c]].abs().max(fd.abs()).max(1e-6));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    if max_err < 1e-4 && secs < 30.0 {
        Ok(format!("20 configs x 7 entries, max rel err {max_err:.2e}, {secs:.2}s"))
    } else {
        Err(format!("max rel err {max_err:.2e}, {secs:.2}s (need <1e-4, <30s)"))
    }
}

// ===========================================================================
// criterion 3 — inflated AP collapses under class-agnostic NMS
// ===========================================================================

fn criterion_3() -> Outcome {
    let space = CompositionSpace::color_shape_default();
    let split = SplitSpec::color_shape_default(&space).map_err(|e| e.to_string())?;
    let green = space.parse_composition("green cylinder").map_err(|e| e.to_string())?;
    let purple = space.parse_composition("purple cylinder").map_err(|e| e.to_string())?;
    let box_a = [10.0, 10.0, 30.0, 30.0];
    let box_b = [70.0, 70.0, 30.0, 30.0];
    let gts = vec![
        GroundTruth { image_id: 0, bbox: box_a, composition: purple },
        GroundTruth { image_id: 0, bbox: box_b, composition: green },
    ];
    let dets = vec![
        Detection { image_id: 0, bbox: box_a, composition: green, score: 0.9 },
        Detection { image_id: 0, bbox: box_a, composition: purple, score: 0.8 },
        Detection { image_id: 0, bbox: box_b, composition: purple, score: 0.9 },
        Detection { image_id: 0, bbox: box_b, composition: green, score: 0.8 },
    ];

    let raw_green = average_precision(&dets, &gts, green, &IouSweep::Coco);
    let raw_purple = average_precision(&dets, &gts, purple, &IouSweep::Coco);
    let raw_report =
        map_without_nms(&dets, &gts, &space, &split, &IouSweep::Coco).map_err(|e| e.to_string())?;
    if raw_green != Some(50.0) || raw_purple != Some(50.0) {
        return Err(format!("pre-NMS AP {raw_green:?}/{raw_purple:?}, expected exactly 50.0"));
    }
    if raw_report.per_composition_ap[green] != Some(50.0) {
        return Err("report-level pre-NMS AP differs from 50.0".into());
    }

    let wrong = nms_map(&dets, &gts, &space, &split, &EvalParams::default())
        .map_err(|e| e.to_string())?;
    if wrong.map_overall != Some(0.0) {
        return Err(format!("wrong-label NMS mAP {:?}, expected exactly 0.0", wrong.map_overall));
    }

    let mut corrected = dets;
    for d in &mut corrected {
        let right = gts.iter().any(|g| g.bbox == d.bbox && g.composition == d.composition);
        d.score = if right { 0.9 } else { 0.8 };
    }
    let right = nms_map(&corrected, &gts, &space, &split, &EvalParams::default())
        .map_err(|e| e.to_string())?;
    if right.map_overall != Some(100.0) {
        return Err(format!("right-label NMS mAP {:?}, expected exactly 100.0", right.map_overall));
    }
    Ok("pre-NMS 50.0 / wrong-label 0.0 / right-label 100.0, all exact".into())
}

// ===========================================================================
// criterion 4 — freeze contracts under every training regime
// ===========================================================================

fn criterion_4() -> Outcome {
    let space = CompositionSpace::color_shape_default();
    let split = SplitSpec::color_shape_default(&space).map_err(|e| e.to_string())?;
    let comps: Vec<usize> = split.pretrain().collect();
    let classes = space.all_compositions();
    let data = generate_dataset(&space, &comps, 2, &SceneSpec::default(), 77)
        .map_err(|e| e.to_string())?;
    let target = space.parse_composition("blue sphere").map_err(|e| e.to_string())?;
    let distractor = space.parse_composition("blue cube").map_err(|e| e.to_string())?;

    let mut details = Vec::new();
    for regime in [Regime::AllTokens, Regime::SubsetTokens, Regime::PromptOnly] {
        let mut model = Model::new(space.clone(), 16, 3).map_err(|e| e.to_string())?;
        build_contrastive_prompt(&mut model, target, distractor, PromptComponents::Both)
            .map_err(|e| e.to_string())?;
        let before = model.clone();
        let mask = regime.mask(&space, &[target]).map_err(|e| e.to_string())?;
        let cfg = TrainConfig { epochs: 5, lr: 2.0, seed: 1, ..TrainConfig::default() };
        train(
            &mut model,
            &data,
            &classes,
            &SmoothingPolicy::default(),
            &LossWeights::default(),
            &mask,
            &cfg,
        )
        .map_err(|e| e.to_string())?;
        let changed = changed_arrays(&before, &model);
        let frozen_names = ["attr_tokens_base", "obj_tokens_base", "featurizer_w", "frozen_map_m"];
        for name in frozen_names {
            if changed.iter().any(|c| c == name) {
                return Err(format!("{regime:?} modified frozen array {name}"));
            }
        }
        if regime == Regime::PromptOnly {
            for name in ["attr_tokens", "obj_tokens"] {
                if changed.iter().any(|c| c == name) {
                    return Err(format!("prompt-only tuning modified {name}"));
                }
            }
            if !changed.iter().any(|c| c.starts_with("prompt")) {
                return Err("prompt-only tuning trained nothing".into());
            }
        }
        if changed.is_empty() {
            return Err(format!("{regime:?} trained nothing at all"));
        }
        details.push(format!("{regime:?} changed only {changed:?}"));
    }
    Ok(format!(
        "bases + featurizer + frozen map bitwise intact under all 3 regimes; {}",
        details.last().unwrap()
    ))
}

// ===========================================================================
// shared full-protocol runs for criteria 5, 6, 8, 9
// ===========================================================================

struct Protocol {
    config: ExpConfig,
    summary: GenSummary,
    full_records: Vec<RunRecord>,
    baseline_records: Vec<RunRecord>,
    _root: tempfile::TempDir,
}

fn run_protocol() -> Result<Protocol, String> {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest_path = root.path().join("manifest.json");
    Manifest::color_shape_default()
        .save(&manifest_path)
        .map_err(|e| e.to_string())?;
    let mut config = ExpConfig {
        manifest: manifest_path,
        out_dir: root.path().join("out"),
        seed: 0,
        dim: 64,
        ..ExpConfig::default()
    };
    config.train.epochs = 2000;
    config.loss.weights = LossWeights { lambda1: 0.3, lambda2: 0.3, lambda3: 0.3, lambda_h: 1.0 };

    let summary = cmd_gen(&config, false).map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = (0..5).collect();
    let full_records = cmd_train(
        &config,
        &TrainOptions { toggles: Toggles::full(), seeds: seeds.clone(), force: false },
    )
    .map_err(|e| e.to_string())?;
    let baseline_records = cmd_train(
        &config,
        &TrainOptions { toggles: Toggles::baseline(), seeds, force: false },
    )
    .map_err(|e| e.to_string())?;
    Ok(Protocol { config, summary, full_records, baseline_records, _root: root })
}

fn read_report(config: &ExpConfig, record: &RunRecord) -> Result<EvalReport, String> {
    let path = config.runs_dir().join(&record.config_hash).join(&record.report);
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn criterion_5(protocol: &Protocol, secs: f64) -> Outcome {
    let mut full_unseen = Vec::new();
    let mut full_hm = Vec::new();
    for r in &protocol.full_records {
        let report = read_report(&protocol.config, r)?;
        full_unseen.push(report.map_unseen.unwrap_or(0.0));
        full_hm.push(report.hm_seen_unseen.unwrap_or(0.0));
    }
    let mut base_unseen = Vec::new();
    let mut base_hm = Vec::new();
    for r in &protocol.baseline_records {
        let report = read_report(&protocol.config, r)?;
        base_unseen.push(report.map_unseen.unwrap_or(0.0));
        base_hm.push(report.hm_seen_unseen.unwrap_or(0.0));
    }
    let mu_full = median(&mut full_unseen);
    let mu_base = median(&mut base_unseen);
    let mh_full = median(&mut full_hm);
    let mh_base = median(&mut base_hm);
    let detail = format!(
        "5 seeds: median unseen {mu_full:.1} vs {mu_base:.1}, median HM {mh_full:.1} vs {mh_base:.1} (+{:.1}), {secs:.0}s",
        mh_full - mh_base
    );
    if mu_full > mu_base && mh_full - mh_base >= 10.0 && secs < 900.0 {
        Ok(detail)
    } else {
        Err(format!("{detail} (need unseen strictly higher, HM +>=10, <900s)"))
    }
}

fn criterion_6(protocol: &Protocol) -> Outcome {
    let started = Instant::now();
    let mut improvements = Vec::new();
    let mut drops = Vec::new();
    for r in &protocol.full_records {
        let run_dir: PathBuf = protocol.config.runs_dir().join(&r.config_hash);
        let plan = cmd_confusions(&ConfusionsOptions {
            run: run_dir.clone(),
            threshold: None,
            out: None,
        })
        .map_err(|e| e.to_string())?;
        if plan.is_empty() {
            return Err(format!("seed {}: empty confusion plan, nothing to tune", r.seed));
        }
        let (inc_record, inc_report): (RunRecord, IncrementReport) =
            cmd_increment(&IncrementOptions {
                run: run_dir.clone(),
                plan: run_dir.join("plan.json"),
                ..IncrementOptions::default()
            })
            .map_err(|e| e.to_string())?;
        let before_inc = inc_report.before.map_increment.unwrap_or(0.0);
        let after_inc = inc_report.after.map_increment.unwrap_or(0.0);
        improvements.push(after_inc - before_inc);
        let before_pre = inc_report.before.map_pretrain.unwrap_or(0.0);
        let after_pre = inc_report.after.map_pretrain.unwrap_or(0.0);
        drops.push(before_pre - after_pre);

        // freeze contract between the two checkpoints on disk
        let (src_model, _) =
            load_model(&run_dir.join(&r.checkpoint), None).map_err(|e| e.to_string())?;
        let inc_dir = protocol.config.runs_dir().join(&inc_record.config_hash);
        let (inc_model, _) =
            load_model(&inc_dir.join(&inc_record.checkpoint), None).map_err(|e| e.to_string())?;
        let changed = changed_arrays(&src_model, &inc_model);
        if !changed.iter().all(|n| n.starts_with("prompt")) {
            return Err(format!("seed {}: increment changed non-prompt arrays {changed:?}", r.seed));
        }
        if changed.is_empty() {
            return Err(format!("seed {}: increment trained nothing", r.seed));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let med_improvement = median(&mut improvements);
    let med_drop = median(&mut drops);
    let detail = format!(
        "5 seeds: median increment mAP {med_improvement:+.1}, median pretrain drop {med_drop:.1}, prompts-only bitwise, {secs:.0}s"
    );
    if med_improvement > 0.0 && med_drop <= 5.0 && secs < 900.0 {
        Ok(detail)
    } else {
        Err(format!("{detail} (need improvement >0, drop <=5, <900s)"))
    }
}

// ===========================================================================
// criterion 7 — harmonic-mean arithmetic anchors
// ===========================================================================

fn criterion_7() -> Outcome {
    let hm = harmonic_mean(88.7, 70.6).map_err(|e| e.to_string())?;
    let hm3 = harmonic_mean3(92.6, 93.7, 75.2).map_err(|e| e.to_string())?;
    if (hm - 78.6).abs() <= 0.05 && (hm3 - 86.3).abs() <= 0.05 {
        Ok(format!("HM(88.7, 70.6) = {hm:.2}, HM3(92.6, 93.7, 75.2) = {hm3:.2}"))
    } else {
        Err(format!("HM = {hm:.4} (want 78.6 +/- 0.05), HM3 = {hm3:.4} (want 86.3 +/- 0.05)"))
    }
}

// ===========================================================================
// criterion 8 — bitwise determinism of data generation and training
// ===========================================================================

fn criterion_8(protocol: &Protocol) -> Outcome {
    let r = &protocol.full_records[0];
    let run_dir = protocol.config.runs_dir().join(&r.config_hash);
    let ckpt_1 = std::fs::read(run_dir.join(&r.checkpoint)).map_err(|e| e.to_string())?;
    let report_1 = std::fs::read(run_dir.join(&r.report)).map_err(|e| e.to_string())?;

    // regenerate the datasets and retrain from scratch with the identical
    // configuration and seed
    let summary_2 = cmd_gen(&protocol.config, true).map_err(|e| e.to_string())?;
    if summary_2.pretrain.content_sha256 != protocol.summary.pretrain.content_sha256
        || summary_2.test.content_sha256 != protocol.summary.test.content_sha256
    {
        return Err("regenerated datasets hash differently".into());
    }
    let rerun = cmd_train(
        &protocol.config,
        &TrainOptions { toggles: Toggles::full(), seeds: vec![r.seed], force: true },
    )
    .map_err(|e| e.to_string())?;
    if rerun[0].config_hash != r.config_hash {
        return Err("identical config produced a different run hash".into());
    }
    let ckpt_2 = std::fs::read(run_dir.join(&r.checkpoint)).map_err(|e| e.to_string())?;
    let report_2 = std::fs::read(run_dir.join(&r.report)).map_err(|e| e.to_string())?;
    if ckpt_1 != ckpt_2 {
        return Err("checkpoints differ between identical runs".into());
    }
    if report_1 != report_2 {
        return Err("reports differ between identical runs".into());
    }
    Ok(format!(
        "dataset hashes, checkpoint ({} bytes), and report bitwise identical across rerun",
        ckpt_1.len()
    ))
}

// ===========================================================================
// criterion 9 — default protocol counts
// ===========================================================================

fn criterion_9(protocol: &Protocol) -> Outcome {
    let (_, space, split) = protocol.config.resolve_manifest().map_err(|e| e.to_string())?;
    let pretrain_instances = protocol.summary.pretrain.instances;
    let test_instances = protocol.summary.test.instances;
    let n_pretrain = split.pretrain().count();
    let n_unseen = split.unseen().len();
    if pretrain_instances == 60
        && test_instances == 1080
        && n_pretrain == 6
        && n_unseen == 12
        && space.num_compositions() == 18
    {
        Ok("60 pretrain instances, 1080 test instances, |C_p| = 6, |C_u| = 12".into())
    } else {
        Err(format!(
            "pretrain {pretrain_instances} (want 60), test {test_instances} (want 1080), |C_p| {n_pretrain} (want 6), |C_u| {n_unseen} (want 12)"
        ))
    }
}

// ===========================================================================
// the gate
// ===========================================================================

#[test]
fn acceptance_gate() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "loss terms match brute-force oracles", criterion_1()));
    results.push((2, "analytic gradients match finite differences", criterion_2()));
    results.push((3, "inflated AP collapses under class-agnostic NMS", criterion_3()));
    results.push((4, "freeze contracts hold under every regime", criterion_4()));

    let protocol_started = Instant::now();
    match run_protocol() {
        Ok(protocol) => {
            let protocol_secs = protocol_started.elapsed().as_secs_f64();
            results.push((5, "full objective beats baseline on unseen mAP and HM", criterion_5(&protocol, protocol_secs)));
            results.push((6, "prompt-only increment helps without forgetting", criterion_6(&protocol)));
            results.push((7, "harmonic-mean arithmetic anchors", criterion_7()));
            results.push((8, "bitwise-deterministic generation and training", criterion_8(&protocol)));
            results.push((9, "default protocol counts", criterion_9(&protocol)));
        }
        Err(e) => {
            let msg = format!("protocol runs failed: {e}");
            results.push((5, "full objective beats baseline on unseen mAP and HM", Err(msg.clone())));
            results.push((6, "prompt-only increment helps without forgetting", Err(msg.clone())));
            results.push((7, "harmonic-mean arithmetic anchors", criterion_7()));
            results.push((8, "bitwise-deterministic generation and training", Err(msg.clone())));
            results.push((9, "default protocol counts", Err(msg)));
        }
    }

    let mut lines = String::new();
    let mut failures = 0;
    for (id, name, outcome) in &results {
        let line = match outcome {
            Ok(detail) => format!("criterion {id} ({name}): PASS — {detail}"),
            Err(reason) => {
                failures += 1;
                format!("criterion {id} ({name}): FAIL — {reason}")
            }
        };
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    assert!(failures == 0, "{failures} acceptance criteria failed:\n{lines}");
}
