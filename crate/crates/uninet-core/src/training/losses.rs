//! Per-task training objectives. Matching runs on detached values; the loss
//! terms themselves are built on the tape so gradients flow to the heads.

use super::hungarian::hungarian_match;
use crate::error::{Error, Result};
use crate::nets::{
    encode_box_target, DepthForward, DetForward, Net, SegForward, Task,
};
use crate::scenegen::{Mask, SceneSample};
use crate::tensor::{sigmoid_scalar, softmax_slice, Tape, Tensor, VarId};

/// Loss hyperparameters; the defaults implement the documented objective.
#[derive(Clone, Debug)]
pub struct LossConfig {
    pub silog_lambda: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Matching-cost weights for the det head.
    pub det_cost_cls: f64,
    pub det_cost_box: f64,
    /// Classification weight for unmatched ("no object") seg queries.
    pub seg_no_object_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            silog_lambda: 0.85,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            det_cost_cls: 1.0,
            det_cost_box: 0.25,
            seg_no_object_weight: 0.1,
        }
    }
}

/// Matched-pair diagnostics returned next to each scalar loss.
#[derive(Clone, Debug, Default)]
pub struct LossDiag {
    /// (query index, position in `used_targets`).
    pub matches: Vec<(usize, usize)>,
    /// Original indices of the targets that took part in matching.
    pub used_targets: Vec<usize>,
    /// Original indices removed before matching (outside detection range).
    pub filtered_targets: Vec<usize>,
}

pub enum TaskForward {
    Det(DetForward),
    Seg(SegForward),
    Depth(DepthForward),
}

impl TaskForward {
    pub fn task(&self) -> Task {
        match self {
            TaskForward::Det(_) => Task::Det,
            TaskForward::Seg(_) => Task::Seg,
            TaskForward::Depth(_) => Task::Depth,
        }
    }
}

/// Dispatch to the per-task objective; `task` must agree with the forward
/// output's task.
pub fn compute_task_loss(
    net: &mut Net,
    task: Task,
    fwd: &TaskForward,
    sample: &SceneSample,
    cfg: &LossConfig,
) -> Result<(VarId, LossDiag)> {
    if fwd.task() != task {
        return Err(Error::validation(format!(
            "task mismatch: loss for {task}, prediction from {}",
            fwd.task()
        )));
    }
    match fwd {
        TaskForward::Det(f) => det_loss(net, f, sample, cfg),
        TaskForward::Seg(f) => seg_loss(net, f, sample, cfg),
        TaskForward::Depth(f) => depth_loss(net, f, sample, cfg),
    }
}

// ---- silog ----

/// Scale-invariant log loss: sqrt(mean(d^2) - lambda * mean(d)^2) with
/// d = ln(pred) - ln(gt) over valid pixels.
pub fn silog_loss(
    tape: &mut Tape,
    pred: VarId,
    gt: &[f64],
    valid: &[bool],
    lambda: f64,
) -> Result<VarId> {
    let n_all = tape.val(pred).numel();
    if gt.len() != n_all || valid.len() != n_all {
        return Err(Error::shape("silog: pred/gt/valid size mismatch".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation("silog lambda must be in [0,1]"));
    }
    let idx: Vec<usize> = (0..n_all).filter(|&i| valid[i]).collect();
    if idx.len() < 2 {
        return Err(Error::DegenerateMask(format!("{} valid pixels", idx.len())));
    }
    for &i in &idx {
        if !(gt[i] > 0.0) || !(tape.val(pred).data()[i] > 0.0) {
            return Err(Error::validation("nonpositive depth on valid pixel"));
        }
    }
    let flat = tape.reshape(pred, vec![n_all, 1]);
    let sel = tape.select_rows(flat, &idx);
    let ln_pred = tape.ln(sel);
    let ln_gt = tape.leaf(Tensor::new(vec![idx.len(), 1], idx.iter().map(|&i| gt[i].ln()).collect()));
    let d = tape.sub(ln_pred, ln_gt);
    let d2 = tape.square(d);
    let m2 = tape.mean_all(d2);
    let m1 = tape.mean_all(d);
    let m1s = tape.square(m1);
    let lam = tape.scale(m1s, lambda);
    let inner = tape.sub(m2, lam);
    Ok(tape.sqrt_floor(inner))
}

/// Plain-value silog for callers without a tape.
pub fn silog_value(pred: &[f64], gt: &[f64], valid: &[bool], lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::new(vec![pred.len()], pred.to_vec()));
    let l = silog_loss(&mut tape, p, gt, valid, lambda)?;
    Ok(tape.val(l).item())
}

// ---- dice ----

/// Soft dice coefficient with epsilon 1.0: (2*sum(ab)+e)/(sum a + sum b + e).
pub fn dice_coefficient(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut inter = 0.0;
    let mut sa = 0.0;
    let mut sb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += x * y;
        sa += x;
        sb += y;
    }
    (2.0 * inter + DICE_EPS) / (sa + sb + DICE_EPS)
}

pub const DICE_EPS: f64 = 1.0;

// ---- det ----

fn det_loss(
    net: &mut Net,
    fwd: &DetForward,
    sample: &SceneSample,
    cfg: &LossConfig,
) -> Result<(VarId, LossDiag)> {
    let arch = net.arch().clone();
    let nq = arch.det_queries;
    let c = arch.class_count;

    // range-filter targets
    let mut used = Vec::new();
    let mut filtered = Vec::new();
    for (i, b) in sample.boxes.iter().enumerate() {
        if arch.det_range.contains(b.center) {
            used.push(i);
        } else {
            filtered.push(i);
        }
    }
    let targets: Vec<[f64; 8]> =
        used.iter().map(|&i| encode_box_target(&arch, &sample.boxes[i])).collect();
    let m = targets.len();

    // matching costs on detached values
    let cls_val = net.tape.val(fwd.cls_logits).clone();
    let box_val = net.tape.val(fwd.box_params).clone();
    let mut cost = vec![0.0f64; nq * m];
    for q in 0..nq {
        for (ti, t) in targets.iter().enumerate() {
            let gt_class = sample.boxes[used[ti]].class_id;
            let p = sigmoid_scalar(cls_val.data()[q * c + gt_class]);
            let l1: f64 = (0..8)
                .map(|k| (box_val.data()[q * 8 + k] - t[k]).abs())
                .sum();
            cost[q * m + ti] = cfg.det_cost_cls * (1.0 - p) + cfg.det_cost_box * l1;
        }
    }
    let matches = hungarian_match(&cost, nq, m)?;
    let n_match = matches.len().max(1);

    // focal classification over every query
    let mut target_onehot = vec![0.0f64; nq * c];
    for &(q, ti) in &matches {
        target_onehot[q * c + sample.boxes[used[ti]].class_id] = 1.0;
    }
    let y = net.leaf(Tensor::new(vec![nq, c], target_onehot));
    let focal = focal_with_logits(&mut net.tape, fwd.cls_logits, y, cfg);
    let cls_loss = {
        let s = net.tape.sum_all(focal);
        net.tape.scale(s, 1.0 / n_match as f64)
    };

    // L1 box regression on matched queries
    let loss = if matches.is_empty() {
        cls_loss
    } else {
        let qs: Vec<usize> = matches.iter().map(|&(q, _)| q).collect();
        let rows = net.tape.select_rows(fwd.box_params, &qs);
        let gt: Vec<f64> = matches
            .iter()
            .flat_map(|&(_, ti)| targets[ti].into_iter())
            .collect();
        let gt = net.leaf(Tensor::new(vec![matches.len(), 8], gt));
        let diff = net.tape.sub(rows, gt);
        let l1 = net.tape.abs(diff);
        let s = net.tape.sum_all(l1);
        let box_loss = net.tape.scale(s, 1.0 / n_match as f64);
        net.tape.add(cls_loss, box_loss)
    };
    Ok((loss, LossDiag { matches, used_targets: used, filtered_targets: filtered }))
}

/// Elementwise focal loss with sigmoid logits; `y` is a {0,1} leaf.
fn focal_with_logits(tape: &mut Tape, logits: VarId, y: VarId, cfg: &LossConfig) -> VarId {
    debug_assert_eq!(cfg.focal_gamma, 2.0, "focal modulation is hard-wired quadratic");
    let p = tape.sigmoid(logits);
    let neg_z = tape.neg(logits);
    let ln_p = tape.softplus(neg_z); // = -ln sigmoid(z)
    let ln_1mp = tape.softplus(logits); // = -ln(1 - sigmoid(z))
    let one_minus_p = tape.map_affine(p, -1.0, 1.0);
    let mod_pos = tape.square(one_minus_p);
    let mod_neg = tape.square(p);
    let pos = tape.mul(mod_pos, ln_p);
    let pos = tape.scale(pos, cfg.focal_alpha);
    let neg = tape.mul(mod_neg, ln_1mp);
    let neg = tape.scale(neg, 1.0 - cfg.focal_alpha);
    let pos_y = tape.mul(pos, y);
    let one_minus_y = tape.map_affine(y, -1.0, 1.0);
    let neg_y = tape.mul(neg, one_minus_y);
    tape.add(pos_y, neg_y)
}

// ---- seg ----

/// Pool a full-resolution binary mask to the head grid: a cell is on when at
/// least half of its source pixels are.
pub fn downsample_mask(mask: &Mask, gh: usize, gw: usize) -> Vec<f64> {
    let fy = mask.height / gh;
    let fx = mask.width / gw;
    debug_assert!(fy * gh == mask.height && fx * gw == mask.width);
    let mut out = vec![0.0; gh * gw];
    for y in 0..gh {
        for x in 0..gw {
            let mut on = 0usize;
            for dy in 0..fy {
                for dx in 0..fx {
                    if mask.get(x * fx + dx, y * fy + dy) {
                        on += 1;
                    }
                }
            }
            out[y * gw + x] = if 2 * on >= fx * fy { 1.0 } else { 0.0 };
        }
    }
    out
}

fn seg_loss(
    net: &mut Net,
    fwd: &SegForward,
    sample: &SceneSample,
    cfg: &LossConfig,
) -> Result<(VarId, LossDiag)> {
    let arch = net.arch().clone();
    let nq = arch.seg_queries;
    let ncls = arch.class_count + 1;
    let (gh, gw) = fwd.grid;
    let s = gh * gw;

    let gt_masks: Vec<Vec<f64>> =
        sample.instances.iter().map(|inst| downsample_mask(&inst.mask, gh, gw)).collect();
    let used: Vec<usize> = (0..sample.instances.len()).collect();
    let m = used.len();

    // costs on detached values
    let cls_val = net.tape.val(fwd.cls_logits).clone();
    let mask_val = net.tape.val(fwd.mask_logits).clone();
    let mut cost = vec![0.0f64; nq * m];
    for q in 0..nq {
        let mut probs = vec![0.0; ncls];
        softmax_slice(&cls_val.data()[q * ncls..(q + 1) * ncls], &mut probs);
        let soft: Vec<f64> =
            mask_val.data()[q * s..(q + 1) * s].iter().map(|&z| sigmoid_scalar(z)).collect();
        for (ti, gt) in gt_masks.iter().enumerate() {
            let class = sample.instances[used[ti]].class_id;
            let ce = -(probs[class].max(1e-30)).ln();
            let dice = 1.0 - dice_coefficient(&soft, gt);
            let bce: f64 = soft
                .iter()
                .zip(gt.iter())
                .map(|(&p, &y)| {
                    let p = p.clamp(1e-12, 1.0 - 1e-12);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / s as f64;
            cost[q * m + ti] = ce + dice + bce;
        }
    }
    let matches = hungarian_match(&cost, nq, m)?;

    // cross-entropy over all queries; unmatched queries target "no object"
    let mut onehot = vec![0.0f64; nq * ncls];
    let mut weights = vec![cfg.seg_no_object_weight; nq];
    for q in 0..nq {
        onehot[q * ncls + arch.class_count] = 1.0;
    }
    for &(q, ti) in &matches {
        onehot[q * ncls + arch.class_count] = 0.0;
        onehot[q * ncls + sample.instances[used[ti]].class_id] = 1.0;
        weights[q] = 1.0;
    }
    let wsum: f64 = weights.iter().sum();
    let ls = net.tape.log_softmax_rows(fwd.cls_logits);
    let oh = net.leaf(Tensor::new(vec![nq, ncls], onehot));
    let picked = net.tape.mul(ls, oh);
    let ce_rows = net.tape.sum_rows(picked); // [nq], = ln p_target
    let w = net.leaf(Tensor::new(vec![nq], weights));
    let ce_weighted = net.tape.mul(ce_rows, w);
    let ce_sum = net.tape.sum_all(ce_weighted);
    let ce = net.tape.scale(ce_sum, -1.0 / wsum);

    let loss = if matches.is_empty() {
        ce
    } else {
        let qs: Vec<usize> = matches.iter().map(|&(q, _)| q).collect();
        let rows = net.tape.select_rows(fwd.mask_logits, &qs); // [M, S]
        let probs = net.tape.sigmoid(rows);
        let gt_flat: Vec<f64> =
            matches.iter().flat_map(|&(_, ti)| gt_masks[ti].iter().copied()).collect();
        let gt = net.leaf(Tensor::new(vec![matches.len(), s], gt_flat.clone()));
        // dice over each matched pair
        let prod = net.tape.mul(probs, gt);
        let inter = net.tape.sum_rows(prod); // [M]
        let sa = net.tape.sum_rows(probs);
        let sb: Vec<f64> = matches.iter().map(|&(_, ti)| gt_masks[ti].iter().sum()).collect();
        let sb = net.leaf(Tensor::new(vec![matches.len()], sb));
        let denom_raw = net.tape.add(sa, sb);
        let denom = net.tape.add_scalar(denom_raw, DICE_EPS);
        let num_raw = net.tape.scale(inter, 2.0);
        let num = net.tape.add_scalar(num_raw, DICE_EPS);
        let inv = net.tape.recip(denom);
        let dice = net.tape.mul(num, inv); // [M]
        let dice_mean = net.tape.mean_all(dice);
        let dice_loss = net.tape.map_affine(dice_mean, -1.0, 1.0); // 1 - dice

        // binary cross-entropy with logits: softplus(z) - z*y
        let sp = net.tape.softplus(rows);
        let zy = net.tape.mul(rows, gt);
        let bce_el = net.tape.sub(sp, zy);
        let bce = net.tape.mean_all(bce_el);

        let md = net.tape.add(dice_loss, bce);
        net.tape.add(ce, md)
    };
    Ok((loss, LossDiag { matches, used_targets: used, filtered_targets: vec![] }))
}

// ---- depth ----

fn depth_loss(
    net: &mut Net,
    fwd: &DepthForward,
    sample: &SceneSample,
    cfg: &LossConfig,
) -> Result<(VarId, LossDiag)> {
    let gt: Vec<f64> = sample.depth.iter().map(|&d| d as f64).collect();
    let valid = vec![true; gt.len()];
    let loss = silog_loss(&mut net.tape, fwd.depth_map, &gt, &valid, cfg.silog_lambda)?;
    Ok((loss, LossDiag::default()))
}
