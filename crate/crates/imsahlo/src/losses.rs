//! The four-term hybrid segmentation loss and its supporting constructions.
//!
//! Terms: Tversky (region overlap with asymmetric FP/FN penalties),
//! contour-weighted boundary (weighted BCE + weighted squared-denominator
//! Dice over a ground-truth contour weight map), focal (hard-example
//! weighted cross-entropy), and centerline Dice over soft skeletons
//! (topology). Every term exists in two forms: a graph builder used by
//! training, and an eager scalar wrapper. A finite-difference gradient
//! checker verifies the graph forms.

use crate::graph::{finite_difference, max_relative_error, Graph, Var};
use crate::kernels::pool3_forward;
use crate::morph::{dilate_cross, erode_cross};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: pred {pred:?} vs gt {gt:?}")]
    ShapeMismatch {
        pred: [usize; 4],
        gt: [usize; 4],
    },
    #[error("loss evaluated to a non-finite value")]
    NonFinite,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

fn check_shapes(pred: &Tensor, gt: &Tensor) -> Result<(), LossError> {
    if pred.shape() != gt.shape() {
        return Err(LossError::ShapeMismatch {
            pred: pred.shape(),
            gt: gt.shape(),
        });
    }
    Ok(())
}

/// Asymmetric region-overlap penalty: `alpha` weights false positives,
/// `beta` weights false negatives.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TverskyParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.7,
            epsilon: 1e-6,
        }
    }
}

impl TverskyParams {
    /// Alternative preset with the FP/FN penalties swapped.
    pub fn precision_weighted() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            epsilon: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(LossError::InvalidParams(
                "tversky: need alpha, beta >= 0 and alpha + beta > 0".into(),
            ));
        }
        if self.epsilon <= 0.0 {
            return Err(LossError::InvalidParams("tversky: epsilon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha_t: f64,
    pub epsilon: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 3.0,
            alpha_t: 0.8,
            epsilon: 1e-7,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.gamma < 0.0 {
            return Err(LossError::InvalidParams("focal: gamma must be >= 0".into()));
        }
        if self.alpha_t <= 0.0 || self.alpha_t > 1.0 {
            return Err(LossError::InvalidParams("focal: alpha_t must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ContourParams {
    /// Weight assigned to boundary-band pixels; interior stays at 1.
    pub boundary_weight: f64,
    /// Dilation radius of the boundary band, in pixels.
    pub boundary_radius: usize,
    pub epsilon: f64,
}

impl Default for ContourParams {
    fn default() -> Self {
        Self {
            boundary_weight: 5.0,
            boundary_radius: 1,
            epsilon: 1e-6,
        }
    }
}

impl ContourParams {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.boundary_weight < 1.0 {
            return Err(LossError::InvalidParams(
                "contour: boundary_weight must be >= 1".into(),
            ));
        }
        if self.boundary_radius < 1 {
            return Err(LossError::InvalidParams(
                "contour: boundary_radius must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ClDiceParams {
    pub skeleton_iters: usize,
    pub epsilon: f64,
}

impl Default for ClDiceParams {
    fn default() -> Self {
        Self {
            skeleton_iters: 5,
            epsilon: 1e-6,
        }
    }
}

impl ClDiceParams {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.skeleton_iters < 1 {
            return Err(LossError::InvalidParams(
                "cldice: skeleton_iters must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Combination weights, in term order Tversky, boundary, focal, clDice.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct HybridWeights {
    pub w_tversky: f64,
    pub w_boundary: f64,
    pub w_focal: f64,
    pub w_cldice: f64,
}

impl Default for HybridWeights {
    fn default() -> Self {
        Self {
            w_tversky: 0.4,
            w_boundary: 0.2,
            w_focal: 0.3,
            w_cldice: 0.1,
        }
    }
}

impl HybridWeights {
    /// Alternative preset that favours the boundary term over the focal one.
    pub fn contour_weighted() -> Self {
        Self {
            w_tversky: 0.4,
            w_boundary: 0.3,
            w_focal: 0.2,
            w_cldice: 0.1,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w_tversky, self.w_boundary, self.w_focal, self.w_cldice]
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let a = self.as_array();
        if a.iter().any(|&w| w < 0.0) || a.iter().all(|&w| w == 0.0) {
            return Err(LossError::InvalidParams(
                "hybrid weights must be >= 0 with at least one > 0".into(),
            ));
        }
        Ok(())
    }
}

/// All loss hyperparameters bundled for the trainer and the CLI config.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tversky: TverskyParams,
    pub focal: FocalParams,
    pub contour: ContourParams,
    pub cldice: ClDiceParams,
    pub weights: HybridWeights,
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        self.tversky.validate()?;
        self.focal.validate()?;
        self.contour.validate()?;
        self.cldice.validate()?;
        self.weights.validate()
    }
}

// ---------------------------------------------------------------------------
// graph builders
// ---------------------------------------------------------------------------

/// 1 - (TP + eps) / (TP + alpha FP + beta FN + eps), summed over all pixels.
pub fn tversky_term(g: &mut Graph, pred: Var, gt: &Tensor, p: &TverskyParams) -> Var {
    let gt_c = g.constant(gt.clone());
    let gt_inv = g.constant(gt.map(|v| 1.0 - v));
    let tp_map = g.mul(pred, gt_c);
    let tp = g.sum_all(tp_map);
    let fp_map = g.mul(pred, gt_inv);
    let fp = g.sum_all(fp_map);
    let pred_inv = g.one_minus(pred);
    let fn_map = g.mul(pred_inv, gt_c);
    let fn_ = g.sum_all(fn_map);
    let num = g.add_scalar(tp, p.epsilon);
    let fp_w = g.mul_scalar(fp, p.alpha);
    let fn_w = g.mul_scalar(fn_, p.beta);
    let den_a = g.add(tp, fp_w);
    let den_b = g.add(den_a, fn_w);
    let den = g.add_scalar(den_b, p.epsilon);
    let ratio = g.div(num, den);
    g.one_minus(ratio)
}

/// Mean over pixels of -alpha_t (1 - p_t)^gamma log(p_t).
pub fn focal_term(g: &mut Graph, pred: Var, gt: &Tensor, p: &FocalParams) -> Var {
    let gt_c = g.constant(gt.clone());
    let gt_inv = g.constant(gt.map(|v| 1.0 - v));
    let hit = g.mul(pred, gt_c);
    let pred_inv = g.one_minus(pred);
    let miss = g.mul(pred_inv, gt_inv);
    let pt = g.add(hit, miss);
    let one_minus_pt = g.one_minus(pt);
    let focus = g.pow_scalar(one_minus_pt, p.gamma);
    let log_pt = g.ln_clamped(pt, p.epsilon);
    let prod = g.mul(focus, log_pt);
    let mean = g.mean_all(prod);
    g.mul_scalar(mean, -p.alpha_t)
}

/// Contour weight map: 1 everywhere, `boundary_weight` on the ground-truth
/// boundary band. The band is `gt XOR erode(gt)` dilated `boundary_radius`
/// times with the 3x3 cross.
pub fn contour_weight_map(gt: &Tensor, p: &ContourParams) -> Tensor {
    let eroded = erode_cross(gt);
    let mut band = gt.zip(&eroded, |a, b| if (a > 0.5) != (b > 0.5) { 1.0 } else { 0.0 });
    for _ in 0..p.boundary_radius {
        band = dilate_cross(&band);
    }
    band.map(|b| 1.0 + (p.boundary_weight - 1.0) * b)
}

/// Weighted BCE plus weighted squared-denominator Dice over `wmap`.
pub fn boundary_term(
    g: &mut Graph,
    pred: Var,
    gt: &Tensor,
    wmap: &Tensor,
    p: &ContourParams,
) -> Var {
    let n = gt.len() as f64;
    let w_c = g.constant(wmap.clone());
    let gt_c = g.constant(gt.clone());
    let gt_inv = g.constant(gt.map(|v| 1.0 - v));

    // weighted BCE
    let log_p = g.ln_clamped(pred, p.epsilon);
    let pred_inv = g.one_minus(pred);
    let log_q = g.ln_clamped(pred_inv, p.epsilon);
    let pos = g.mul(gt_c, log_p);
    let neg = g.mul(gt_inv, log_q);
    let ce = g.add(pos, neg);
    let wce = g.mul(w_c, ce);
    let wce_sum = g.sum_all(wce);
    let wbce = g.mul_scalar(wce_sum, -1.0 / n);

    // weighted Dice with squared denominator terms
    let wp = g.mul(w_c, pred);
    let wpg = g.mul(wp, gt_c);
    let inter = g.sum_all(wpg);
    let num = g.affine(inter, 2.0, p.epsilon);
    let p2 = g.mul(pred, pred);
    let wp2 = g.mul(w_c, p2);
    let wp2_sum = g.sum_all(wp2);
    let wg2: f64 = wmap
        .data()
        .iter()
        .zip(gt.data())
        .map(|(w, gv)| w * gv * gv)
        .sum();
    let den = g.add_scalar(wp2_sum, wg2 + p.epsilon);
    let ratio = g.div(num, den);
    let wdice = g.one_minus(ratio);

    g.add(wbce, wdice)
}

/// Iterated morphological soft skeleton (graph form): min/max 3x3 pooling
/// with replicate padding, `iters` erosion rounds.
pub fn soft_skeleton_term(g: &mut Graph, x: Var, iters: usize) -> Var {
    let eroded = g.pool3(x, false);
    let opened = g.pool3(eroded, true);
    let diff = g.sub(x, opened);
    let mut skel = g.relu(diff);
    let mut cur = x;
    for _ in 0..iters {
        cur = g.pool3(cur, false);
        let er = g.pool3(cur, false);
        let op = g.pool3(er, true);
        let d = g.sub(cur, op);
        let ridge = g.relu(d);
        let gate = g.one_minus(skel);
        let add = g.mul(ridge, gate);
        let add = g.relu(add);
        skel = g.add(skel, add);
    }
    skel
}

/// Eager soft skeleton on a plain tensor.
pub fn soft_skeleton(x: &Tensor, iters: usize) -> Tensor {
    let min3 = |t: &Tensor| pool3_forward(t, false).0;
    let max3 = |t: &Tensor| pool3_forward(t, true).0;
    let opened = max3(&min3(x));
    let mut skel = x.zip(&opened, |a, b| (a - b).max(0.0));
    let mut cur = x.clone();
    for _ in 0..iters {
        cur = min3(&cur);
        let op = max3(&min3(&cur));
        let ridge = cur.zip(&op, |a, b| (a - b).max(0.0));
        let add = ridge.zip(&skel, |r, s| (r * (1.0 - s)).max(0.0));
        skel = skel.zip(&add, |s, a| s + a);
    }
    skel
}

/// Centerline Dice: topology precision uses the (constant) ground-truth
/// skeleton, topology recall uses the soft skeleton of the prediction.
pub fn cldice_term(g: &mut Graph, pred: Var, gt: &Tensor, p: &ClDiceParams) -> Var {
    let skel_gt = soft_skeleton(gt, p.skeleton_iters);
    let skel_gt_sum = skel_gt.sum();
    let skel_gt_c = g.constant(skel_gt);
    let gt_c = g.constant(gt.clone());

    let prec_map = g.mul(skel_gt_c, pred);
    let prec_sum = g.sum_all(prec_map);
    let prec_num = g.add_scalar(prec_sum, p.epsilon);
    let tprec = g.mul_scalar(prec_num, 1.0 / (skel_gt_sum + p.epsilon));

    let skel_pred = soft_skeleton_term(g, pred, p.skeleton_iters);
    let rec_map = g.mul(skel_pred, gt_c);
    let rec_sum = g.sum_all(rec_map);
    let rec_num = g.add_scalar(rec_sum, p.epsilon);
    let skel_pred_sum = g.sum_all(skel_pred);
    let rec_den = g.add_scalar(skel_pred_sum, p.epsilon);
    let trecall = g.div(rec_num, rec_den);

    let prod = g.mul(tprec, trecall);
    let num = g.mul_scalar(prod, 2.0);
    let den = g.add(tprec, trecall);
    let ratio = g.div(num, den);
    g.one_minus(ratio)
}

/// Graph nodes for each hybrid term; inactive (zero-weight) terms are still
/// evaluated forward for reporting but receive no gradient.
pub struct HybridTerms {
    pub total: Var,
    pub tversky: Var,
    pub boundary: Var,
    pub focal: Var,
    pub cldice: Var,
}

/// Weighted sum of the four terms. Zero-weight terms are excluded from the
/// sum so the backward pass never visits them.
pub fn hybrid_term(g: &mut Graph, pred: Var, gt: &Tensor, cfg: &LossConfig) -> HybridTerms {
    let wmap = contour_weight_map(gt, &cfg.contour);
    let tversky = tversky_term(g, pred, gt, &cfg.tversky);
    let boundary = boundary_term(g, pred, gt, &wmap, &cfg.contour);
    let focal = focal_term(g, pred, gt, &cfg.focal);
    let cldice = cldice_term(g, pred, gt, &cfg.cldice);

    let w = cfg.weights;
    let mut total: Option<Var> = None;
    for (term, weight) in [
        (tversky, w.w_tversky),
        (boundary, w.w_boundary),
        (focal, w.w_focal),
        (cldice, w.w_cldice),
    ] {
        if weight == 0.0 {
            continue;
        }
        let scaled = g.mul_scalar(term, weight);
        total = Some(match total {
            Some(t) => g.add(t, scaled),
            None => scaled,
        });
    }
    HybridTerms {
        total: total.expect("hybrid weights are all zero"),
        tversky,
        boundary,
        focal,
        cldice,
    }
}

// ---------------------------------------------------------------------------
// eager wrappers
// ---------------------------------------------------------------------------

fn eval_scalar(
    pred: &Tensor,
    gt: &Tensor,
    build: impl FnOnce(&mut Graph, Var, &Tensor) -> Var,
) -> Result<f64, LossError> {
    check_shapes(pred, gt)?;
    let mut g = Graph::new();
    let pv = g.constant(pred.clone());
    let loss = build(&mut g, pv, gt);
    let v = g.scalar_value(loss);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LossError::NonFinite)
    }
}

pub fn tversky_loss(pred: &Tensor, gt: &Tensor, p: &TverskyParams) -> Result<f64, LossError> {
    eval_scalar(pred, gt, |g, pv, gt| tversky_term(g, pv, gt, p))
}

pub fn focal_loss(pred: &Tensor, gt: &Tensor, p: &FocalParams) -> Result<f64, LossError> {
    eval_scalar(pred, gt, |g, pv, gt| focal_term(g, pv, gt, p))
}

pub fn boundary_loss(pred: &Tensor, gt: &Tensor, p: &ContourParams) -> Result<f64, LossError> {
    eval_scalar(pred, gt, |g, pv, gt| {
        let wmap = contour_weight_map(gt, p);
        boundary_term(g, pv, gt, &wmap, p)
    })
}

pub fn cldice_loss(pred: &Tensor, gt: &Tensor, p: &ClDiceParams) -> Result<f64, LossError> {
    eval_scalar(pred, gt, |g, pv, gt| cldice_term(g, pv, gt, p))
}

/// Per-term values of one hybrid evaluation.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tversky: f64,
    pub boundary: f64,
    pub focal: f64,
    pub cldice: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &HybridWeights) -> f64 {
        w.w_tversky * self.tversky
            + w.w_boundary * self.boundary
            + w.w_focal * self.focal
            + w.w_cldice * self.cldice
    }
}

pub fn hybrid_loss(
    pred: &Tensor,
    gt: &Tensor,
    cfg: &LossConfig,
) -> Result<(f64, LossBreakdown), LossError> {
    check_shapes(pred, gt)?;
    let mut g = Graph::new();
    let pv = g.constant(pred.clone());
    let terms = hybrid_term(&mut g, pv, gt, cfg);
    let total = g.scalar_value(terms.total);
    if !total.is_finite() {
        return Err(LossError::NonFinite);
    }
    Ok((
        total,
        LossBreakdown {
            tversky: g.scalar_value(terms.tversky),
            boundary: g.scalar_value(terms.boundary),
            focal: g.scalar_value(terms.focal),
            cldice: g.scalar_value(terms.cldice),
        },
    ))
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

/// Which loss a gradient check targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Tversky,
    Focal,
    Boundary,
    ClDice,
    Hybrid,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Tversky,
        LossKind::Focal,
        LossKind::Boundary,
        LossKind::ClDice,
        LossKind::Hybrid,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Tversky => "tversky",
            LossKind::Focal => "focal",
            LossKind::Boundary => "boundary",
            LossKind::ClDice => "cldice",
            LossKind::Hybrid => "hybrid",
        }
    }
}

/// Compares the autodiff gradient of `build`'s output w.r.t. `pred` against
/// central finite differences, returning the max relative error.
pub fn gradcheck<F>(build: F, pred: &Tensor, step: f64) -> Result<f64, LossError>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let mut g = Graph::new();
    let pv = g.leaf(pred.clone());
    let loss = build(&mut g, pv);
    if !g.scalar_value(loss).is_finite() {
        return Err(LossError::NonFinite);
    }
    g.backward(loss);
    let analytic = g
        .grad(pv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(pred.shape()));
    let numeric = finite_difference(
        pred,
        |probe| {
            let mut g = Graph::new();
            let pv = g.constant(probe.clone());
            let loss = build(&mut g, pv);
            g.scalar_value(loss)
        },
        step,
    );
    if !numeric.all_finite() {
        return Err(LossError::NonFinite);
    }
    Ok(max_relative_error(&analytic, &numeric))
}

/// Gradient check for one named loss against finite differences.
pub fn gradcheck_loss(
    kind: LossKind,
    pred: &Tensor,
    gt: &Tensor,
    cfg: &LossConfig,
    step: f64,
) -> Result<f64, LossError> {
    check_shapes(pred, gt)?;
    let cfg = *cfg;
    let gt = gt.clone();
    match kind {
        LossKind::Tversky => gradcheck(move |g, pv| tversky_term(g, pv, &gt, &cfg.tversky), pred, step),
        LossKind::Focal => gradcheck(move |g, pv| focal_term(g, pv, &gt, &cfg.focal), pred, step),
        LossKind::Boundary => {
            let wmap = contour_weight_map(&gt, &cfg.contour);
            gradcheck(
                move |g, pv| boundary_term(g, pv, &gt, &wmap, &cfg.contour),
                pred,
                step,
            )
        }
        LossKind::ClDice => gradcheck(move |g, pv| cldice_term(g, pv, &gt, &cfg.cldice), pred, step),
        LossKind::Hybrid => gradcheck(move |g, pv| hybrid_term(g, pv, &gt, &cfg).total, pred, step),
    }
}

/// Smallest margin separating min/max-pool selections (and opening
/// residuals) from ties across the soft-skeleton pipeline on `x`.
///
/// The skeleton is piecewise smooth in its input; kinks only occur where a
/// pool selection switches or where `x - open(x)` touches zero with the two
/// values coming from different input elements. A finite-difference probe
/// with step `h` stays on one smooth piece whenever this margin exceeds a
/// few multiples of `h`.
pub fn skeleton_tie_margin(x: &Tensor, iters: usize) -> f64 {
    struct Tracked {
        values: Vec<f64>,
        source: Vec<usize>,
    }

    fn pool_tracked(t: &Tracked, h: usize, w: usize, take_max: bool) -> (Tracked, f64) {
        let mut out = Tracked {
            values: vec![0.0; h * w],
            source: vec![0; h * w],
        };
        let mut margin = f64::INFINITY;
        for y in 0..h as isize {
            for x0 in 0..w as isize {
                let mut best = if take_max {
                    f64::NEG_INFINITY
                } else {
                    f64::INFINITY
                };
                let mut best_src = usize::MAX;
                let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(9);
                for dy in -1isize..=1 {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -1isize..=1 {
                        let xx = (x0 + dx).clamp(0, w as isize - 1) as usize;
                        let i = yy * w + xx;
                        candidates.push((t.values[i], t.source[i]));
                        let better = if take_max {
                            t.values[i] > best
                        } else {
                            t.values[i] < best
                        };
                        if better {
                            best = t.values[i];
                            best_src = t.source[i];
                        }
                    }
                }
                // competitor: extremal candidate from a different source
                for (v, s) in candidates {
                    if s != best_src {
                        margin = margin.min((v - best).abs());
                    }
                }
                let i = (y * w as isize + x0) as usize;
                out.values[i] = best;
                out.source[i] = best_src;
            }
        }
        (out, margin)
    }

    assert_eq!(x.n() * x.c(), 1, "tie margin expects a single plane");
    let (h, w) = (x.h(), x.w());
    let mut cur = Tracked {
        values: x.data().to_vec(),
        source: (0..h * w).collect(),
    };
    let mut margin = f64::INFINITY;

    for round in 0..=iters {
        if round > 0 {
            let (next, m) = pool_tracked(&cur, h, w, false);
            margin = margin.min(m);
            cur = next;
        }
        let (eroded, m1) = pool_tracked(&cur, h, w, false);
        let (opened, m2) = pool_tracked(&eroded, h, w, true);
        margin = margin.min(m1).min(m2);
        for i in 0..h * w {
            if cur.source[i] != opened.source[i] {
                margin = margin.min((cur.values[i] - opened.values[i]).abs());
            }
        }
    }
    margin
}
