//! The compositional loss stack and its analytic gradients.
//!
//! Targets: per-region, per-class soft labels built by one of three
//! smoothing modes (one-hot, conventional label smoothing, compositional
//! smoothing that gives partial credit to half-right compositions).
//!
//! Terms:
//! * classification: mean binary cross-entropy between sigmoid scores and
//!   the smoothed targets;
//! * separation: pushes attribute tokens apart, object tokens apart
//!   (pairwise orthogonality), and the two groups away from each other
//!   (negative log distance between group means);
//! * decorrelation: HSIC between the attribute-token and object-token rows
//!   sampled by the batch, discouraging statistical dependence between the
//!   two halves of each composition.
//!
//! Every differentiable term comes with a closed-form gradient with respect
//! to the raw token rows; the acceptance suite checks them against central
//! finite differences.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::compspace::{CompositionId, CompositionSpace};
use crate::error::{Error, Result};
use crate::tokenmodel::{score_features, sigmoid, Model, TokenRef, TokenTable};

/// How target rows are filled for matched regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    /// One-hot on the ground-truth composition.
    None,
    /// `(1 - eps) * onehot + eps / k` over the candidate list.
    Conventional,
    /// Partial credit for matching one primitive of the ground truth.
    Compositional,
}

impl Default for SmoothingMode {
    fn default() -> Self {
        Self::Compositional
    }
}

/// Target construction parameters.
///
/// `p_c` is the target for the exact composition, `p_o` for a candidate
/// sharing only the object, `p_a` for a candidate sharing only the
/// attribute. `epsilon` is the conventional-smoothing mass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SmoothingPolicy {
    pub mode: SmoothingMode,
    pub p_c: f64,
    pub p_o: f64,
    pub p_a: f64,
    pub epsilon: f64,
}

impl Default for SmoothingPolicy {
    fn default() -> Self {
        Self {
            mode: SmoothingMode::Compositional,
            p_c: 1.0,
            p_o: 0.2,
            p_a: 0.2,
            epsilon: 0.1,
        }
    }
}

impl SmoothingPolicy {
    pub fn one_hot() -> Self {
        Self {
            mode: SmoothingMode::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p_c", self.p_c), ("p_o", self.p_o), ("p_a", self.p_a)] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::Validation(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.epsilon) || !self.epsilon.is_finite() {
            return Err(Error::Validation(format!(
                "epsilon = {} outside [0, 1)",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Term weights of the combined objective: `lambda1` scales the
/// mean-distance term, `lambda2`/`lambda3` the attribute/object
/// orthogonality terms, `lambda_h` the HSIC term. A weight of zero switches
/// its term off entirely.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_h: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.1,
            lambda_h: 1.0,
        }
    }
}

impl LossWeights {
    /// All auxiliary terms off: classification only.
    pub fn classification_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda_h: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda_h", self.lambda_h),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!(
                    "{name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Builds the per-region target matrix over a candidate class list.
///
/// `ground_truth[r]` is the composition matched to region `r`, or `None` for
/// background; background rows are all zero in every mode.
pub fn smooth_targets(
    space: &CompositionSpace,
    ground_truth: &[Option<CompositionId>],
    class_list: &[CompositionId],
    policy: &SmoothingPolicy,
) -> Result<Array2<f64>> {
    policy.validate()?;
    if class_list.is_empty() {
        return Err(Error::EmptyInput("class list is empty".into()));
    }
    let candidates: Vec<(usize, usize)> = class_list
        .iter()
        .map(|&c| space.decompose(c))
        .collect::<Result<_>>()?;
    let mut targets = Array2::zeros((ground_truth.len(), class_list.len()));
    for (r, gt) in ground_truth.iter().enumerate() {
        let Some(gt_comp) = gt else {
            continue;
        };
        let (a_t, o_t) = space.decompose(*gt_comp)?;
        match policy.mode {
            SmoothingMode::None => {
                for (ci, &(a_p, o_p)) in candidates.iter().enumerate() {
                    if a_p == a_t && o_p == o_t {
                        targets[[r, ci]] = 1.0;
                    }
                }
            }
            SmoothingMode::Conventional => {
                let floor = policy.epsilon / class_list.len() as f64;
                for (ci, &(a_p, o_p)) in candidates.iter().enumerate() {
                    let hot = if a_p == a_t && o_p == o_t { 1.0 } else { 0.0 };
                    targets[[r, ci]] = (1.0 - policy.epsilon) * hot + floor;
                }
            }
            SmoothingMode::Compositional => {
                for (ci, &(a_p, o_p)) in candidates.iter().enumerate() {
                    targets[[r, ci]] = if a_p == a_t && o_p == o_t {
                        policy.p_c
                    } else if o_p == o_t {
                        policy.p_o
                    } else if a_p == a_t {
                        policy.p_a
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    Ok(targets)
}

/// Mean binary cross-entropy over all (region, class) entries, computed
/// stably from logits.
pub fn classification_loss(logits: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<f64> {
    if logits.shape() != targets.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("classification loss over zero entries".into()));
    }
    let mut sum = 0.0;
    for (&z, &y) in logits.iter().zip(targets.iter()) {
        sum += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    }
    Ok(sum / logits.len() as f64)
}

/// Gradient of [`classification_loss`] with respect to the logits:
/// `(sigmoid(z) - y) / N`.
pub fn classification_grad_logits(
    logits: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Array2<f64> {
    let n = logits.len() as f64;
    let mut out = Array2::zeros(logits.raw_dim());
    for ((i, j), &z) in logits.indexed_iter() {
        out[[i, j]] = (sigmoid(z) - targets[[i, j]]) / n;
    }
    out
}

fn normalized_rows(rows: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<f64>) {
    let mut unit = rows.to_owned();
    let mut norms = Vec::with_capacity(rows.nrows());
    for mut row in unit.rows_mut() {
        let norm = row.dot(&row).sqrt();
        norms.push(norm);
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    (unit, norms)
}

/// Mean absolute pairwise cosine between distinct rows:
/// `sum_{i != j} |e_i · e_j| / (n^2 - n)` over unit-normalized rows.
///
/// Fewer than two rows make every pair vanish; the loss is defined as 0
/// there (the denominator would be zero) and the trainer surfaces a note.
pub fn orthogonality_loss(rows: ArrayView2<'_, f64>) -> f64 {
    let n = rows.nrows();
    if n < 2 {
        return 0.0;
    }
    let (unit, _) = normalized_rows(rows);
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += unit.row(i).dot(&unit.row(j)).abs();
            }
        }
    }
    sum / (n * n - n) as f64
}

/// Gradient of [`orthogonality_loss`] with respect to the raw rows.
pub fn orthogonality_grad(rows: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = rows.nrows();
    let mut grad = Array2::zeros(rows.raw_dim());
    if n < 2 {
        return grad;
    }
    let (unit, norms) = normalized_rows(rows);
    let scale = 2.0 / (n * n - n) as f64;
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        let mut acc = Array1::<f64>::zeros(rows.ncols());
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = unit.row(i).dot(&unit.row(j));
            let sign = if s >= 0.0 { 1.0 } else { -1.0 };
            // d|e_i·e_j|/d raw_i through the row normalization
            acc.scaled_add(sign, &unit.row(j));
            acc.scaled_add(-sign * s, &unit.row(i));
        }
        acc.mapv_inplace(|v| v * scale / norms[i]);
        grad.row_mut(i).assign(&acc);
    }
    grad
}

/// Norm floor guarding the log singularity when the group means coincide.
pub const DISTANCE_NORM_FLOOR: f64 = 1e-8;

/// Negative log distance between the means of the unit-normalized attribute
/// and object rows: `-ln ||mu_A - mu_O||`, with the norm clamped at
/// [`DISTANCE_NORM_FLOOR`].
pub fn distance_loss(attr_rows: ArrayView2<'_, f64>, obj_rows: ArrayView2<'_, f64>) -> Result<f64> {
    let delta = group_mean_delta(attr_rows, obj_rows)?;
    let norm = delta.dot(&delta).sqrt().max(DISTANCE_NORM_FLOOR);
    Ok(-norm.ln())
}

fn group_mean_delta(
    attr_rows: ArrayView2<'_, f64>,
    obj_rows: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    if attr_rows.nrows() == 0 || obj_rows.nrows() == 0 {
        return Err(Error::EmptyInput("distance loss needs both token groups".into()));
    }
    if attr_rows.ncols() != obj_rows.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "attribute dim {} vs object dim {}",
            attr_rows.ncols(),
            obj_rows.ncols()
        )));
    }
    let (unit_a, _) = normalized_rows(attr_rows);
    let (unit_o, _) = normalized_rows(obj_rows);
    let mu_a = unit_a.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let mu_o = unit_o.mean_axis(ndarray::Axis(0)).expect("non-empty");
    Ok(&mu_a - &mu_o)
}

/// Gradient of [`distance_loss`] with respect to the raw attribute and
/// object rows. Zero in the clamped regime.
pub fn distance_grad(
    attr_rows: ArrayView2<'_, f64>,
    obj_rows: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let delta = group_mean_delta(attr_rows, obj_rows)?;
    let norm = delta.dot(&delta).sqrt();
    let mut ga = Array2::zeros(attr_rows.raw_dim());
    let mut go = Array2::zeros(obj_rows.raw_dim());
    if norm <= DISTANCE_NORM_FLOOR {
        return Ok((ga, go));
    }
    // dL/d(delta) = -delta / ||delta||^2, and delta depends on each group
    // mean with opposite signs.
    let dl_ddelta = delta.mapv(|v| -v / (norm * norm));
    let (unit_a, norms_a) = normalized_rows(attr_rows);
    let (unit_o, norms_o) = normalized_rows(obj_rows);
    for (i, mut row) in ga.rows_mut().into_iter().enumerate() {
        if norms_a[i] == 0.0 {
            continue;
        }
        let e = unit_a.row(i);
        let proj = e.dot(&dl_ddelta);
        let mut g = dl_ddelta.clone();
        g.scaled_add(-proj, &e);
        g.mapv_inplace(|v| v / (attr_rows.nrows() as f64 * norms_a[i]));
        row.assign(&g);
    }
    for (i, mut row) in go.rows_mut().into_iter().enumerate() {
        if norms_o[i] == 0.0 {
            continue;
        }
        let e = unit_o.row(i);
        let proj = e.dot(&dl_ddelta);
        let mut g = dl_ddelta.clone();
        g.scaled_add(-proj, &e);
        g.mapv_inplace(|v| -v / (obj_rows.nrows() as f64 * norms_o[i]));
        row.assign(&g);
    }
    Ok((ga, go))
}

/// Weighted sum of the three separation terms over a token table:
/// `lambda1 * distance + lambda2 * orth(attr) + lambda3 * orth(obj)`.
pub fn separation_loss(table: &TokenTable, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    let mut total = 0.0;
    if weights.lambda1 > 0.0 {
        total += weights.lambda1 * distance_loss(table.attr.view(), table.obj.view())?;
    }
    if weights.lambda2 > 0.0 {
        total += weights.lambda2 * orthogonality_loss(table.attr.view());
    }
    if weights.lambda3 > 0.0 {
        total += weights.lambda3 * orthogonality_loss(table.obj.view());
    }
    Ok(total)
}

/// Kernel used by [`hsic`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `k(x, y) = x · y`.
    Linear,
    /// `k(x, y) = exp(-||x - y||^2 / (2 sigma^2))` with the median
    /// heuristic: `sigma^2` is the median of the pairwise squared distances
    /// (1 if that median is zero).
    Gaussian,
}

fn gram(x: ArrayView2<'_, f64>, kernel: Kernel) -> Array2<f64> {
    let n = x.nrows();
    match kernel {
        Kernel::Linear => x.dot(&x.t()),
        Kernel::Gaussian => {
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
            let mut pairs: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in (i + 1)..n {
                    pairs.push(sq[[i, j]]);
                }
            }
            pairs.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
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
    }
}

/// Double-centers a Gram matrix: `H K H` with `H = I - (1/n) 1 1^T`.
fn double_center(k: &Array2<f64>) -> Array2<f64> {
    let n = k.nrows();
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).sum() / nf).collect();
    let col_means: Vec<f64> = (0..n).map(|j| k.column(j).sum() / nf).collect();
    let grand = k.sum() / (nf * nf);
    Array2::from_shape_fn((n, n), |(i, j)| k[[i, j]] - row_means[i] - col_means[j] + grand)
}

/// Biased HSIC estimator between paired samples:
/// `tr(K H L H) / (n - 1)^2`.
///
/// Rows of `x` and `y` are paired observations; needs at least two samples.
pub fn hsic(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, kernel: Kernel) -> Result<f64> {
    let n = x.nrows();
    if n != y.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "hsic pairs {} x-rows with {} y-rows",
            n,
            y.nrows()
        )));
    }
    if n < 2 {
        return Err(Error::Validation(format!("hsic needs n >= 2 samples, got {n}")));
    }
    let kc = double_center(&gram(x, kernel));
    let l = gram(y, kernel);
    let mut trace = 0.0;
    for i in 0..n {
        for j in 0..n {
            trace += kc[[i, j]] * l[[i, j]];
        }
    }
    Ok(trace / ((n - 1) as f64 * (n - 1) as f64))
}

/// Gradient of linear-kernel [`hsic`] with respect to each sample row.
pub fn hsic_linear_grad(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = x.nrows();
    if n != y.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "hsic pairs {} x-rows with {} y-rows",
            n,
            y.nrows()
        )));
    }
    if n < 2 {
        return Err(Error::Validation(format!("hsic needs n >= 2 samples, got {n}")));
    }
    let scale = 1.0 / ((n - 1) as f64 * (n - 1) as f64);
    // d tr(X X^T A) / dX = 2 A X for symmetric A
    let a = double_center(&gram(y, Kernel::Linear));
    let gx = a.dot(&x).mapv(|v| 2.0 * v * scale);
    let b = double_center(&gram(x, Kernel::Linear));
    let gy = b.dot(&y).mapv(|v| 2.0 * v * scale);
    Ok((gx, gy))
}

/// `lambda_h` times the linear-kernel HSIC between the object-token and
/// attribute-token *directions* sampled by a batch: one `(t_o, t_a)` pair
/// per ground-truth instance, each row scaled to unit norm before the
/// estimator.
///
/// The normalization makes the term invariant to token magnitude. Raw
/// linear-kernel HSIC grows with `||t||^4`, so as classification drives
/// token norms up its gradient (cubic in the norms) eventually drowns the
/// bounded classification gradient and descent collapses the smaller token
/// table to a constant row — the estimator's degenerate zero. Measuring
/// directions keeps the penalty commensurate with the other terms at every
/// scale while still punishing statistical dependence between the two
/// token families.
pub fn decorrelation_loss(
    table: &TokenTable,
    space: &CompositionSpace,
    batch_compositions: &[CompositionId],
    weights: &LossWeights,
) -> Result<f64> {
    weights.validate()?;
    let (x, y) = stack_pairs(table, space, batch_compositions)?;
    let (xn, _) = normalize_rows(&x);
    let (yn, _) = normalize_rows(&y);
    Ok(weights.lambda_h * hsic(xn.view(), yn.view(), Kernel::Linear)?)
}

/// Scales every row to unit norm; returns the scaled matrix and the
/// original norms (floored at `1e-12` to stay finite on a zero row).
fn normalize_rows(m: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    (out, norms)
}

fn stack_pairs(
    table: &TokenTable,
    space: &CompositionSpace,
    batch_compositions: &[CompositionId],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = batch_compositions.len();
    let d = table.dim();
    let mut x = Array2::zeros((n, d)); // object rows
    let mut y = Array2::zeros((n, d)); // attribute rows
    for (k, &c) in batch_compositions.iter().enumerate() {
        let (a, o) = space.decompose(c)?;
        x.row_mut(k).assign(&table.obj.row(o));
        y.row_mut(k).assign(&table.attr.row(a));
    }
    Ok((x, y))
}

/// Per-term (already weighted) contributions of one combined-loss
/// evaluation. `total` is the exact sum of the components.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub l_distance: f64,
    pub l_a: f64,
    pub l_o: f64,
    pub l_hsic: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name and value of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("classification", self.classification),
            ("l_distance", self.l_distance),
            ("l_a", self.l_a),
            ("l_o", self.l_o),
            ("l_hsic", self.l_hsic),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// Gradients for every trainable array of a model, in model layout.
#[derive(Debug, Clone)]
pub struct Grads {
    pub attr: Array2<f64>,
    pub obj: Array2<f64>,
    pub prompts: Vec<Array2<f64>>,
}

impl Grads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            attr: Array2::zeros(model.table.attr.raw_dim()),
            obj: Array2::zeros(model.table.obj.raw_dim()),
            prompts: model
                .prompts
                .iter()
                .map(|p| Array2::zeros(p.tokens.raw_dim()))
                .collect(),
        }
    }
}

/// One combined forward/backward pass.
///
/// `features` holds one region embedding per row, `targets` the matching
/// smoothed target matrix over `class_list`, and `instance_compositions`
/// the ground-truth composition of each foreground instance in the batch
/// (the HSIC sample). Terms with zero weight are skipped entirely.
pub fn total_loss(
    model: &Model,
    class_list: &[CompositionId],
    features: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    instance_compositions: &[CompositionId],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Grads)> {
    weights.validate()?;
    if features.nrows() != targets.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows vs {} target rows",
            features.nrows(),
            targets.nrows()
        )));
    }
    if targets.ncols() != class_list.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} target columns vs {} classes",
            targets.ncols(),
            class_list.len()
        )));
    }
    if features.ncols() != model.dim {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} vs model dim {}",
            features.ncols(),
            model.dim
        )));
    }
    let mut grads = Grads::zeros_like(model);
    let tau = model.temperature();

    // classification
    let embeddings = model.class_embeddings(class_list)?;
    let logits = score_features(features, embeddings.view(), tau);
    let classification = classification_loss(logits.view(), targets)?;
    let dz = classification_grad_logits(logits.view(), targets);
    // dL/dE = dZ^T F / tau, then back through the frozen map and the phrase
    // mean.
    let de = dz.t().dot(&features).mapv(|v| v / tau);
    for (ci, &comp) in class_list.iter().enumerate() {
        let du = model.frozen_map.backprop(&de.row(ci).to_owned());
        let refs = model.phrase_token_refs(comp)?;
        let share = 1.0 / refs.len() as f64;
        for &r in &refs {
            match r {
                TokenRef::Attr(i) => grads.attr.row_mut(i).scaled_add(share, &du),
                TokenRef::Obj(i) => grads.obj.row_mut(i).scaled_add(share, &du),
                TokenRef::Prompt { slot, row } => {
                    grads.prompts[slot].row_mut(row).scaled_add(share, &du)
                }
            }
        }
    }

    // separation
    let mut l_distance = 0.0;
    let mut l_a = 0.0;
    let mut l_o = 0.0;
    if weights.lambda1 > 0.0 {
        l_distance =
            weights.lambda1 * distance_loss(model.table.attr.view(), model.table.obj.view())?;
        let (ga, go) = distance_grad(model.table.attr.view(), model.table.obj.view())?;
        grads.attr.scaled_add(weights.lambda1, &ga);
        grads.obj.scaled_add(weights.lambda1, &go);
    }
    if weights.lambda2 > 0.0 {
        l_a = weights.lambda2 * orthogonality_loss(model.table.attr.view());
        grads
            .attr
            .scaled_add(weights.lambda2, &orthogonality_grad(model.table.attr.view()));
    }
    if weights.lambda3 > 0.0 {
        l_o = weights.lambda3 * orthogonality_loss(model.table.obj.view());
        grads
            .obj
            .scaled_add(weights.lambda3, &orthogonality_grad(model.table.obj.view()));
    }

    // decorrelation (on unit-normalized rows; see `decorrelation_loss`)
    let mut l_hsic = 0.0;
    if weights.lambda_h > 0.0 {
        let (x, y) = stack_pairs(&model.table, &model.space, instance_compositions)?;
        let (xn, x_norms) = normalize_rows(&x);
        let (yn, y_norms) = normalize_rows(&y);
        l_hsic = weights.lambda_h * hsic(xn.view(), yn.view(), Kernel::Linear)?;
        let (gx, gy) = hsic_linear_grad(xn.view(), yn.view())?;
        // chain rule through u = t / ||t||: dL/dt = (g - (g.u) u) / ||t||
        for (k, &c) in instance_compositions.iter().enumerate() {
            let (a, o) = model.space.decompose(c)?;
            let gxk = gx.row(k);
            let xk = xn.row(k);
            let proj = gxk.dot(&xk);
            let gxt = Array1::from_shape_fn(xk.len(), |j| (gxk[j] - proj * xk[j]) / x_norms[k]);
            grads.obj.row_mut(o).scaled_add(weights.lambda_h, &gxt);
            let gyk = gy.row(k);
            let yk = yn.row(k);
            let proj = gyk.dot(&yk);
            let gyt = Array1::from_shape_fn(yk.len(), |j| (gyk[j] - proj * yk[j]) / y_norms[k]);
            grads.attr.row_mut(a).scaled_add(weights.lambda_h, &gyt);
        }
    }

    let total = classification + l_distance + l_a + l_o + l_hsic;
    Ok((
        LossBreakdown {
            classification,
            l_distance,
            l_a,
            l_o,
            l_hsic,
            total,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn space() -> CompositionSpace {
        CompositionSpace::color_shape_default()
    }

    // ==================== smoothing ====================

    #[test]
    fn test_compositional_smoothing_case_table() {
        let sp = space();
        let blue_cube = sp.parse_composition("blue cube").unwrap();
        let classes = vec![
            sp.parse_composition("blue cube").unwrap(),
            sp.parse_composition("red cube").unwrap(),
            sp.parse_composition("blue sphere").unwrap(),
            sp.parse_composition("red sphere").unwrap(),
        ];
        let t = smooth_targets(
            &sp,
            &[Some(blue_cube)],
            &classes,
            &SmoothingPolicy::default(),
        )
        .unwrap();
        assert_eq!(t.row(0).to_vec(), vec![1.0, 0.2, 0.2, 0.0]);
    }

    #[test]
    fn test_conventional_smoothing_matches_hand_value() {
        let sp = space();
        let policy = SmoothingPolicy {
            mode: SmoothingMode::Conventional,
            epsilon: 0.1,
            ..SmoothingPolicy::default()
        };
        let classes = vec![0, 1, 2, 3];
        let t = smooth_targets(&sp, &[Some(0)], &classes, &policy).unwrap();
        let row = t.row(0);
        assert_abs_diff_eq!(row[0], 0.925, epsilon = 1e-12);
        for j in 1..4 {
            assert_abs_diff_eq!(row[j], 0.025, epsilon = 1e-12);
        }
    }

    #[test]
    fn test_one_hot_mode_and_background_rows() {
        let sp = space();
        let classes = vec![0, 1, 2];
        for policy in [
            SmoothingPolicy::one_hot(),
            SmoothingPolicy::default(),
            SmoothingPolicy {
                mode: SmoothingMode::Conventional,
                ..SmoothingPolicy::default()
            },
        ] {
            let t = smooth_targets(&sp, &[Some(1), None], &classes, &policy).unwrap();
            assert_eq!(t.row(1).sum(), 0.0, "background row must stay zero");
        }
        let t = smooth_targets(&sp, &[Some(1)], &classes, &SmoothingPolicy::one_hot()).unwrap();
        assert_eq!(t.row(0).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn test_smoothing_validation_errors() {
        let sp = space();
        let bad = SmoothingPolicy {
            p_o: 1.5,
            ..SmoothingPolicy::default()
        };
        assert!(smooth_targets(&sp, &[Some(0)], &[0], &bad).is_err());
        assert!(smooth_targets(&sp, &[Some(0)], &[], &SmoothingPolicy::default()).is_err());
        assert!(smooth_targets(&sp, &[Some(99)], &[0], &SmoothingPolicy::default()).is_err());
        assert!(smooth_targets(&sp, &[Some(0)], &[99], &SmoothingPolicy::default()).is_err());
    }

    // ==================== classification ====================

    #[test]
    fn test_bce_at_half_probability() {
        let logits = array![[0.0]];
        let targets = array![[0.5]];
        let loss = classification_loss(logits.view(), targets.view()).unwrap();
        assert_abs_diff_eq!(loss, 0.6931, epsilon = 1e-4);
        assert_abs_diff_eq!(loss, 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn test_bce_shape_and_empty_errors() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((3, 2));
        assert!(classification_loss(a.view(), b.view()).is_err());
        let e = Array2::<f64>::zeros((0, 3));
        assert!(classification_loss(e.view(), e.view()).is_err());
    }

    #[test]
    fn test_bce_grad_matches_finite_difference() {
        let logits = array![[0.3, -1.2], [2.0, 0.1]];
        let targets = array![[1.0, 0.2], [0.0, 0.9]];
        let g = classification_grad_logits(logits.view(), targets.view());
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let mut plus = logits.clone();
                plus[[i, j]] += h;
                let mut minus = logits.clone();
                minus[[i, j]] -= h;
                let fd = (classification_loss(plus.view(), targets.view()).unwrap()
                    - classification_loss(minus.view(), targets.view()).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(g[[i, j]], fd, epsilon = 1e-8);
            }
        }
    }

    // ==================== orthogonality ====================

    #[test]
    fn test_orthogonality_hand_value() {
        let rows = array![[1.0, 0.0], [0.5f64.sqrt(), 0.5f64.sqrt()]];
        assert_abs_diff_eq!(orthogonality_loss(rows.view()), 0.70711, epsilon = 1e-5);
    }

    #[test]
    fn test_orthogonality_extremes() {
        let same = array![[2.0, 0.0], [3.0, 0.0]];
        assert_abs_diff_eq!(orthogonality_loss(same.view()), 1.0, epsilon = 1e-12);
        let ortho = array![[1.0, 0.0], [0.0, 5.0]];
        assert_abs_diff_eq!(orthogonality_loss(ortho.view()), 0.0, epsilon = 1e-12);
        let single = array![[1.0, 0.0]];
        assert_eq!(orthogonality_loss(single.view()), 0.0);
    }

    #[test]
    fn test_orthogonality_scale_invariance() {
        let rows = array![[0.3, -0.8, 0.1], [1.0, 0.4, -0.2], [-0.5, 0.9, 0.7]];
        let scaled = rows.mapv(|v| v * 7.5);
        assert_abs_diff_eq!(
            orthogonality_loss(rows.view()),
            orthogonality_loss(scaled.view()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn test_orthogonality_grad_matches_finite_difference() {
        let rows = array![[0.9, -0.2, 0.4], [0.1, 1.1, -0.6], [-0.7, 0.3, 0.8]];
        let g = orthogonality_grad(rows.view());
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut plus = rows.clone();
                plus[[i, j]] += h;
                let mut minus = rows.clone();
                minus[[i, j]] -= h;
                let fd =
                    (orthogonality_loss(plus.view()) - orthogonality_loss(minus.view())) / (2.0 * h);
                assert_abs_diff_eq!(g[[i, j]], fd, epsilon = 1e-7);
            }
        }
    }

    // ==================== distance ====================

    #[test]
    fn test_distance_hand_value() {
        // unit means at (1, 0) and (-1, 0): ||mu_A - mu_O|| = 2
        let attr = array![[1.5, 0.0]];
        let obj = array![[-3.0, 0.0]];
        let loss = distance_loss(attr.view(), obj.view()).unwrap();
        assert_abs_diff_eq!(loss, -0.69315, epsilon = 1e-5);
    }

    #[test]
    fn test_distance_clamps_at_zero_gap() {
        let attr = array![[1.0, 0.0]];
        let obj = array![[2.0, 0.0]];
        let loss = distance_loss(attr.view(), obj.view()).unwrap();
        assert_abs_diff_eq!(loss, -DISTANCE_NORM_FLOOR.ln(), epsilon = 1e-9);
        let (ga, go) = distance_grad(attr.view(), obj.view()).unwrap();
        assert_eq!(ga.sum(), 0.0);
        assert_eq!(go.sum(), 0.0);
    }

    #[test]
    fn test_distance_grad_matches_finite_difference() {
        let attr = array![[0.9, -0.2, 0.4], [0.2, 0.8, -0.3]];
        let obj = array![[-0.5, 0.6, 0.1], [0.3, -0.9, 0.7], [0.8, 0.1, 0.2]];
        let (ga, go) = distance_grad(attr.view(), obj.view()).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut plus = attr.clone();
                plus[[i, j]] += h;
                let mut minus = attr.clone();
                minus[[i, j]] -= h;
                let fd = (distance_loss(plus.view(), obj.view()).unwrap()
                    - distance_loss(minus.view(), obj.view()).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(ga[[i, j]], fd, epsilon = 1e-7);
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let mut plus = obj.clone();
                plus[[i, j]] += h;
                let mut minus = obj.clone();
                minus[[i, j]] -= h;
                let fd = (distance_loss(attr.view(), plus.view()).unwrap()
                    - distance_loss(attr.view(), minus.view()).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(go[[i, j]], fd, epsilon = 1e-7);
            }
        }
    }

    // ==================== hsic ====================

    #[test]
    fn test_hsic_hand_matrix() {
        let x = array![[1.0], [2.0], [3.0]];
        let y = array![[1.0], [0.0], [-1.0]];
        let v = hsic(x.view(), y.view(), Kernel::Linear).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn test_hsic_constant_samples_vanish() {
        let x = array![[0.7, 0.1], [0.7, 0.1], [0.7, 0.1]];
        let y = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let v = hsic(x.view(), y.view(), Kernel::Linear).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn test_hsic_needs_two_samples_and_matching_rows() {
        let x = array![[1.0]];
        let y = array![[1.0]];
        assert!(hsic(x.view(), y.view(), Kernel::Linear).is_err());
        let x2 = array![[1.0], [2.0]];
        assert!(hsic(x2.view(), y.view(), Kernel::Linear).is_err());
    }

    #[test]
    fn test_hsic_permutation_invariance() {
        let x = array![[1.0, 0.3], [2.0, -0.4], [0.5, 0.9], [-1.2, 0.2]];
        let y = array![[0.2, 1.0], [0.8, -0.1], [-0.3, 0.4], [0.6, 0.5]];
        let perm = [2usize, 0, 3, 1];
        let xp = ndarray::Array2::from_shape_fn(x.raw_dim(), |(i, j)| x[[perm[i], j]]);
        let yp = ndarray::Array2::from_shape_fn(y.raw_dim(), |(i, j)| y[[perm[i], j]]);
        for kernel in [Kernel::Linear, Kernel::Gaussian] {
            let v = hsic(x.view(), y.view(), kernel).unwrap();
            let vp = hsic(xp.view(), yp.view(), kernel).unwrap();
            assert_abs_diff_eq!(v, vp, epsilon = 1e-12);
        }
    }

    #[test]
    fn test_hsic_gaussian_detects_dependence() {
        let n = 12;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 / n as f64 - 0.5);
        let y = x.mapv(|v| v * v);
        let dep = hsic(x.view(), y.view(), Kernel::Gaussian).unwrap();
        assert!(dep > 1e-4, "quadratic dependence should register, got {dep}");
    }

    #[test]
    fn test_hsic_linear_grad_matches_finite_difference() {
        let x = array![[0.5, -0.2], [1.1, 0.4], [-0.3, 0.8]];
        let y = array![[0.9, 0.1], [-0.6, 0.3], [0.2, -0.7]];
        let (gx, gy) = hsic_linear_grad(x.view(), y.view()).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..2 {
                let mut plus = x.clone();
                plus[[i, j]] += h;
                let mut minus = x.clone();
                minus[[i, j]] -= h;
                let fd = (hsic(plus.view(), y.view(), Kernel::Linear).unwrap()
                    - hsic(minus.view(), y.view(), Kernel::Linear).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(gx[[i, j]], fd, epsilon = 1e-8);
                let mut plus = y.clone();
                plus[[i, j]] += h;
                let mut minus = y.clone();
                minus[[i, j]] -= h;
                let fd = (hsic(x.view(), plus.view(), Kernel::Linear).unwrap()
                    - hsic(x.view(), minus.view(), Kernel::Linear).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(gy[[i, j]], fd, epsilon = 1e-8);
            }
        }
    }

    // ==================== combined ====================

    #[test]
    fn test_decorrelation_batch_of_identical_compositions_vanishes() {
        let sp = space();
        let table = TokenTable::init(&sp, 16, 3).unwrap();
        let v = decorrelation_loss(&table, &sp, &[4, 4, 4], &LossWeights::default()).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn test_decorrelation_single_instance_errors() {
        let sp = space();
        let table = TokenTable::init(&sp, 16, 3).unwrap();
        assert!(decorrelation_loss(&table, &sp, &[4], &LossWeights::default()).is_err());
    }

    #[test]
    fn test_total_loss_breakdown_sums_and_scales() {
        let sp = space();
        let model = Model::new(sp, 16, 5).unwrap();
        let classes = model.space.all_compositions();
        let features = Array2::from_shape_fn((6, 16), |(i, j)| ((i * 7 + j) as f64 * 0.13).sin());
        let gts = [Some(0), Some(4), None, Some(8), Some(13), Some(0)];
        let targets =
            smooth_targets(&model.space, &gts, &classes, &SmoothingPolicy::default()).unwrap();
        let instance_comps: Vec<usize> = gts.iter().flatten().copied().collect();
        let weights = LossWeights::default();
        let (breakdown, _) = total_loss(
            &model,
            &classes,
            features.view(),
            targets.view(),
            &instance_comps,
            &weights,
        )
        .unwrap();
        let sum = breakdown.classification
            + breakdown.l_distance
            + breakdown.l_a
            + breakdown.l_o
            + breakdown.l_hsic;
        assert_abs_diff_eq!(breakdown.total, sum, epsilon = 1e-9);

        let doubled = LossWeights {
            lambda2: weights.lambda2 * 2.0,
            ..weights
        };
        let (b2, _) = total_loss(
            &model,
            &classes,
            features.view(),
            targets.view(),
            &instance_comps,
            &doubled,
        )
        .unwrap();
        assert_abs_diff_eq!(b2.l_a, 2.0 * breakdown.l_a, epsilon = 1e-12);
    }

    #[test]
    fn test_total_loss_grad_matches_finite_difference() {
        let sp = space();
        let mut model = Model::new(sp, 12, 9).unwrap();
        let classes = model.space.all_compositions();
        let features = Array2::from_shape_fn((5, 12), |(i, j)| ((i * 5 + j) as f64 * 0.29).sin());
        let gts = [Some(0), Some(4), Some(8), Some(13), Some(4)];
        let targets =
            smooth_targets(&model.space, &gts, &classes, &SmoothingPolicy::default()).unwrap();
        let instance_comps: Vec<usize> = gts.iter().flatten().copied().collect();
        let weights = LossWeights {
            lambda1: 0.3,
            lambda2: 0.2,
            lambda3: 0.25,
            lambda_h: 0.7,
        };
        let (_, grads) = total_loss(
            &model,
            &classes,
            features.view(),
            targets.view(),
            &instance_comps,
            &weights,
        )
        .unwrap();
        let eps = 1e-6;
        let mut eval = |m: &Model| {
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
        for (r, c) in [(0usize, 0usize), (2, 5), (5, 11), (3, 7)] {
            let orig = model.table.attr[[r, c]];
            model.table.attr[[r, c]] = orig + eps;
            let plus = eval(&model);
            model.table.attr[[r, c]] = orig - eps;
            let minus = eval(&model);
            model.table.attr[[r, c]] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            assert_abs_diff_eq!(grads.attr[[r, c]], fd, epsilon = 1e-5);
        }
        for (r, c) in [(0usize, 3usize), (1, 9), (2, 0)] {
            let orig = model.table.obj[[r, c]];
            model.table.obj[[r, c]] = orig + eps;
            let plus = eval(&model);
            model.table.obj[[r, c]] = orig - eps;
            let minus = eval(&model);
            model.table.obj[[r, c]] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            assert_abs_diff_eq!(grads.obj[[r, c]], fd, epsilon = 1e-5);
        }
    }

    #[test]
    fn test_total_loss_skips_disabled_terms() {
        let sp = space();
        let model = Model::new(sp, 16, 5).unwrap();
        let classes = vec![0usize, 5];
        let features = Array2::from_shape_fn((1, 16), |(_, j)| (j as f64 * 0.21).cos());
        let targets = smooth_targets(
            &model.space,
            &[Some(0)],
            &classes,
            &SmoothingPolicy::one_hot(),
        )
        .unwrap();
        // single instance would make HSIC error, but lambda_h = 0 skips it
        let (breakdown, _) = total_loss(
            &model,
            &classes,
            features.view(),
            targets.view(),
            &[0],
            &LossWeights::classification_only(),
        )
        .unwrap();
        assert_eq!(breakdown.l_hsic, 0.0);
        assert_eq!(breakdown.l_a, 0.0);
        assert_eq!(breakdown.total, breakdown.classification);
    }

    #[test]
    fn test_loss_weights_validation() {
        let bad = LossWeights {
            lambda1: -0.1,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
        let nan = LossWeights {
            lambda_h: f64::NAN,
            ..LossWeights::default()
        };
        assert!(nan.validate().is_err());
    }
}
