//! Training objectives of both stages, the optimizer and the training loops.

pub mod optim;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{Assignment, GroundTruthTrack};
use crate::numerics::{Tape, Tensor, Var};

pub use optim::AdamW;
pub use train::{
    loss_csv, train_refiner, train_tracker, LossRecord, TrainConfig, TrainOutcome, TrainState,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub class: f64,
    pub mask: f64,
    pub dice: f64,
    /// Class-loss weight of queries supervised toward "no object".
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            mask: 5.0,
            dice: 5.0,
            no_object: 0.1,
        }
    }
}

/// Supervision of one query set: a class per query (`None` is "no
/// object") and target masks for some queries.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryTargets {
    pub classes: Vec<Option<usize>>,
    /// `(query, 0/1 mask over H*W)`
    pub masks: Vec<(usize, Vec<f64>)>,
}

impl QueryTargets {
    /// Frame `t` under tracker matching: a matched track present at `t`
    /// supervises class and mask, an absent one only "no object".
    pub fn tracker_frame(
        sigma: &Assignment,
        gts: &[GroundTruthTrack],
        num_queries: usize,
        t: usize,
    ) -> Self {
        let mut classes = vec![None; num_queries];
        let mut masks = Vec::new();
        for (g, &q) in gts.iter().zip(&sigma.perm) {
            if g.is_present(t) {
                classes[q] = Some(g.class);
                masks.push((q, g.mask(t).to_vec()));
            }
        }
        Self { classes, masks }
    }

    /// Video-level class targets of refiner matching.
    pub fn refiner_classes(
        sigma: &Assignment,
        gts: &[GroundTruthTrack],
        num_queries: usize,
    ) -> Vec<Option<usize>> {
        let mut classes = vec![None; num_queries];
        for (g, &q) in gts.iter().zip(&sigma.perm) {
            classes[q] = Some(g.class);
        }
        classes
    }
}

/// `Σ_q w_q · CE(logits_q, target_q)`, the no-object class being the last
/// column.
pub fn class_loss_on(
    t: &Tape,
    logits: Var,
    classes: &[Option<usize>],
    w: &LossWeights,
) -> Result<Var> {
    let shape = t.shape(logits);
    if shape.len() != 2 || shape[0] != classes.len() {
        return Err(Error::shape(
            "class_loss",
            format!("logits {shape:?} for {} targets", classes.len()),
        ));
    }
    let no_object = shape[1] - 1;
    let idx: Vec<usize> = classes.iter().map(|c| c.unwrap_or(no_object)).collect();
    if idx.iter().any(|&c| c > no_object) {
        return Err(Error::Invalid(format!(
            "target class outside {no_object} classes"
        )));
    }
    let weights: Vec<f64> = classes
        .iter()
        .map(|c| {
            if c.is_some() {
                w.class
            } else {
                w.class * w.no_object
            }
        })
        .collect();
    let picked = t.pick(t.log_softmax(logits, 1)?, &idx)?;
    let wv = t.constant(Tensor::new([classes.len()], weights)?)?;
    t.neg(t.sum(t.mul(picked, wv)?)?)
}

/// Per-row mean BCE with logits, `[M]`.
pub fn bce_rows_on(t: &Tape, logits: Var, target: Var) -> Result<Var> {
    let hw = t.shape(logits).get(1).copied().unwrap_or(1).max(1);
    let per_px = t.sub(t.softplus(logits)?, t.mul(logits, target)?)?;
    t.scale(t.sum_axis(per_px, 1)?, 1.0 / hw as f64)
}

/// Per-row Dice loss, `[M]`.
pub fn dice_rows_on(t: &Tape, logits: Var, target: Var) -> Result<Var> {
    use crate::matcher::DICE_EPS;
    let p = t.sigmoid(logits)?;
    let inter = t.sum_axis(t.mul(p, target)?, 1)?;
    let denom = t.add_scalar(t.add(t.sum_axis(p, 1)?, t.sum_axis(target, 1)?)?, DICE_EPS)?;
    let ratio = t.div(t.add_scalar(t.scale(inter, 2.0)?, DICE_EPS)?, denom)?;
    t.add_scalar(t.neg(ratio)?, 1.0)
}

/// `Σ λ_mask·BCE + λ_dice·Dice` over the listed rows of `mask_logits
/// [N,HW]`. Dice is skipped for empty targets.
pub fn mask_loss_on(
    t: &Tape,
    mask_logits: Var,
    masks: &[(usize, Vec<f64>)],
    w: &LossWeights,
) -> Result<Var> {
    if masks.is_empty() {
        return t.constant(Tensor::scalar(0.0));
    }
    let hw = t.shape(mask_logits)[1];
    if let Some((q, m)) = masks.iter().find(|(_, m)| m.len() != hw) {
        return Err(Error::shape(
            "mask_loss",
            format!("target of query {q} has {} pixels, logits {hw}", m.len()),
        ));
    }
    let rows: Vec<usize> = masks.iter().map(|(q, _)| *q).collect();
    let flat: Vec<f64> = masks.iter().flat_map(|(_, m)| m.iter().copied()).collect();
    let logits = t.gather_rows(mask_logits, &rows)?;
    let target = t.constant(Tensor::new([rows.len(), hw], flat)?)?;
    let bce = t.scale(t.sum(bce_rows_on(t, logits, target)?)?, w.mask)?;
    let dice_w: Vec<f64> = masks
        .iter()
        .map(|(_, m)| {
            if m.iter().any(|&v| v > 0.0) {
                w.dice
            } else {
                0.0
            }
        })
        .collect();
    let dw = t.constant(Tensor::new([rows.len()], dice_w)?)?;
    let dice = t.sum(t.mul(dice_rows_on(t, logits, target)?, dw)?)?;
    t.add(bce, dice)
}

/// Loss of one frame: weighted class CE over every query plus mask losses
/// of the supervised ones.
pub fn frame_loss_on(
    t: &Tape,
    class_logits: Var,
    mask_logits: Var,
    target: &QueryTargets,
    w: &LossWeights,
) -> Result<Var> {
    let c = class_loss_on(t, class_logits, &target.classes, w)?;
    let m = mask_loss_on(t, mask_logits, &target.masks, w)?;
    t.add(c, m)
}

/// Tracker loss: frame losses summed over the clip with one assignment.
pub fn loss_tracker_on(
    t: &Tape,
    class_logits: &[Var],
    mask_logits: &[Var],
    gts: &[GroundTruthTrack],
    sigma: &Assignment,
    w: &LossWeights,
) -> Result<Var> {
    if class_logits.len() != mask_logits.len() || class_logits.is_empty() {
        return Err(Error::shape(
            "loss_tracker",
            format!(
                "{} class vs {} mask frames",
                class_logits.len(),
                mask_logits.len()
            ),
        ));
    }
    let n = t.shape(class_logits[0])[0];
    let mut total: Option<Var> = None;
    for (f, (&c, &m)) in class_logits.iter().zip(mask_logits).enumerate() {
        let l = frame_loss_on(t, c, m, &QueryTargets::tracker_frame(sigma, gts, n, f), w)?;
        total = Some(match total {
            Some(acc) => t.add(acc, l)?,
            None => l,
        });
    }
    Ok(total.unwrap())
}

/// Refiner loss: one video-level class term per query plus per-frame mask
/// losses of every matched track.
pub fn loss_refiner_on(
    t: &Tape,
    class_logits: Var,
    mask_logits: &[Var],
    gts: &[GroundTruthTrack],
    sigma: &Assignment,
    w: &LossWeights,
) -> Result<Var> {
    let n = t.shape(class_logits)[0];
    let mut total = class_loss_on(
        t,
        class_logits,
        &QueryTargets::refiner_classes(sigma, gts, n),
        w,
    )?;
    for (f, &m) in mask_logits.iter().enumerate() {
        let masks: Vec<(usize, Vec<f64>)> = gts
            .iter()
            .zip(&sigma.perm)
            .map(|(g, &q)| (q, g.mask(f).to_vec()))
            .collect();
        total = t.add(total, mask_loss_on(t, m, &masks, w)?)?;
    }
    Ok(total)
}

fn eval_scalar(f: impl FnOnce(&Tape) -> Result<Var>) -> Result<f64> {
    let t = Tape::new();
    let v = f(&t)?;
    let x = t.value(v).item();
    Ok(x)
}

/// [`frame_loss_on`] on plain tensors.
pub fn frame_loss(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    target: &QueryTargets,
    w: &LossWeights,
) -> Result<f64> {
    eval_scalar(|t| {
        frame_loss_on(
            t,
            t.constant(class_logits.clone())?,
            t.constant(mask_logits.clone())?,
            target,
            w,
        )
    })
}

/// [`loss_tracker_on`] on plain tensors.
pub fn loss_tracker(
    class_logits: &[Tensor],
    mask_logits: &[Tensor],
    gts: &[GroundTruthTrack],
    sigma: &Assignment,
    w: &LossWeights,
) -> Result<f64> {
    eval_scalar(|t| {
        let c = class_logits
            .iter()
            .map(|x| t.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let m = mask_logits
            .iter()
            .map(|x| t.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        loss_tracker_on(t, &c, &m, gts, sigma, w)
    })
}

/// [`loss_refiner_on`] on plain tensors.
pub fn loss_refiner(
    class_logits: &Tensor,
    mask_logits: &[Tensor],
    gts: &[GroundTruthTrack],
    sigma: &Assignment,
    w: &LossWeights,
) -> Result<f64> {
    eval_scalar(|t| {
        let m = mask_logits
            .iter()
            .map(|x| t.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        loss_refiner_on(t, t.constant(class_logits.clone())?, &m, gts, sigma, w)
    })
}
