use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::GroupTargets;
use crate::numerics::{Graph, Tensor, Var};
use crate::pixel_embedding::PixelEmbedding;

/// Probability clamp applied before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Group-mask term.
    pub dice: f64,
    /// Affinity term.
    pub group: f64,
    /// Detection term; always 0 because the detector is frozen.
    pub detection: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dice: 1.0,
            group: 1.0,
            detection: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.dice >= 0.0
            && self.group >= 0.0
            && self.dice.is_finite()
            && self.group.is_finite())
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {} and {}",
                self.dice, self.group
            )));
        }
        if self.detection != 0.0 {
            return Err(Error::Config(
                "the detection loss weight must be 0 with a frozen detector".into(),
            ));
        }
        Ok(())
    }

    pub fn combine(&self, mask: f64, group: f64) -> f64 {
        self.dice * mask + self.group * group
    }
}

/// Which loss supervises the predicted group masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLoss {
    #[default]
    Dice,
    Bce,
    Both,
}

impl std::str::FromStr for MaskLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(MaskLoss::Dice),
            "bce" => Ok(MaskLoss::Bce),
            "both" => Ok(MaskLoss::Both),
            other => Err(Error::Config(format!(
                "unknown mask loss {other:?} (expected dice, bce or both)"
            ))),
        }
    }
}

/// `F̂ · P`: one logit map per instance, flattened to `N × H'W'`.
pub fn group_mask_logits(g: &mut Graph, features: Var, embedding: &PixelEmbedding) -> Result<Var> {
    let [_, d] = g.value(features).dims2("predict_group_masks")?;
    if d != embedding.dim {
        return Err(Error::shape(
            "predict_group_masks",
            g.dims(features),
            &[embedding.dim, embedding.height, embedding.width],
        ));
    }
    let flat = g.reshape(embedding.map, &[d, embedding.height * embedding.width])?;
    g.matmul(features, flat)
}

/// `σ(F̂ · P)`.
pub fn predict_group_masks(
    g: &mut Graph,
    features: Var,
    embedding: &PixelEmbedding,
) -> Result<Var> {
    let logits = group_mask_logits(g, features, embedding)?;
    Ok(g.sigmoid(logits))
}

/// `F̂ F̂ᵀ / √D`, exactly symmetric.
pub fn affinity_logits(g: &mut Graph, features: Var) -> Result<Var> {
    let [_, d] = g.value(features).dims2("predict_affinity")?;
    let gram = g.gram(features)?;
    Ok(g.scale(gram, 1.0 / (d as f64).sqrt()))
}

/// `σ(F̂ F̂ᵀ / √D)`.
pub fn predict_affinity(g: &mut Graph, features: Var) -> Result<Var> {
    let logits = affinity_logits(g, features)?;
    Ok(g.sigmoid(logits))
}

fn row_mask(matched: &[bool], width: usize) -> Result<Tensor> {
    Tensor::new(
        &[matched.len(), width],
        matched
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, width))
            .collect(),
    )
}

fn check_dims(g: &Graph, pred: Var, target: &Tensor, op: &'static str) -> Result<()> {
    if g.dims(pred) != target.dims() {
        return Err(Error::shape(op, g.dims(pred), target.dims()));
    }
    Ok(())
}

/// Soft dice over matched rows as one global ratio:
/// `1 − 2Σ⟨T, P⟩ / (Σ‖T‖² + Σ‖P‖²)`; 0 when nothing is matched.
pub fn dice_loss(g: &mut Graph, pred: Var, targets: &GroupTargets) -> Result<Var> {
    check_dims(g, pred, &targets.group_masks, "dice_loss")?;
    if targets.num_matched() == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let width = targets.group_masks.dims()[1];
    let target_sq: f64 = targets.group_masks.data().iter().map(|v| v * v).sum();
    let overlap = g.mul_const(pred, targets.group_masks.clone())?;
    let overlap = g.sum(overlap);
    let kept = g.mul_const(pred, row_mask(&targets.matched, width)?)?;
    let sq = g.mul(kept, kept)?;
    let sq = g.sum(sq);
    let denom = g.offset(sq, target_sq);
    let ratio = g.div(overlap, denom)?;
    let ratio = g.scale(ratio, -2.0);
    Ok(g.offset(ratio, 1.0))
}

/// Sum of weighted binary cross-entropy terms, with `p` clamped to
/// `[ε, 1−ε]`: `−Σ w⁺·log p + w⁻·log(1−p)`.
fn weighted_bce_sum(g: &mut Graph, p: Var, pos: Tensor, neg: Tensor) -> Result<Var> {
    let p = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = g.log(p);
    let q = g.scale(p, -1.0);
    let q = g.offset(q, 1.0);
    let log_q = g.log(q);
    let a = g.mul_const(log_p, pos)?;
    let b = g.mul_const(log_q, neg)?;
    let both = g.add(a, b)?;
    let total = g.sum(both);
    Ok(g.scale(total, -1.0))
}

/// Per-pixel BCE on matched rows, averaged over those pixels.
pub fn mask_bce_loss(g: &mut Graph, pred: Var, targets: &GroupTargets) -> Result<Var> {
    check_dims(g, pred, &targets.group_masks, "mask_bce_loss")?;
    if targets.num_matched() == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let (pos, neg, norm) = mask_bce_weights(targets)?;
    let total = weighted_bce_sum(g, pred, pos, neg)?;
    Ok(g.scale(total, 1.0 / norm))
}

fn mask_bce_weights(targets: &GroupTargets) -> Result<(Tensor, Tensor, f64)> {
    let width = targets.group_masks.dims()[1];
    let rows = row_mask(&targets.matched, width)?;
    let pos = targets.group_masks.clone();
    let neg = rows.zip_map(&pos, |r, t| r * (1.0 - t))?;
    Ok((pos, neg, (targets.num_matched() * width) as f64))
}

fn affinity_weights(targets: &GroupTargets) -> Result<(Tensor, Tensor, f64)> {
    let pos = targets.weight.zip_map(&targets.affinity, |c, a| c * a)?;
    let neg = targets
        .weight
        .zip_map(&targets.affinity, |c, a| c * (1.0 - a))?;
    Ok((pos, neg, targets.weight.sum().max(1.0)))
}

/// [`mask_bce_loss`] evaluated from logits; same value, with a gradient
/// that survives the clamp.
pub fn mask_bce_loss_logits(g: &mut Graph, logits: Var, targets: &GroupTargets) -> Result<Var> {
    check_dims(g, logits, &targets.group_masks, "mask_bce_loss")?;
    if targets.num_matched() == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let (pos, neg, norm) = mask_bce_weights(targets)?;
    let total = g.clamped_bce_logits(logits, pos, neg, PROB_EPS)?;
    Ok(g.scale(total, 1.0 / norm))
}

/// [`affinity_loss`] evaluated from logits; same value, with a gradient
/// that survives the clamp.
pub fn affinity_loss_logits(g: &mut Graph, logits: Var, targets: &GroupTargets) -> Result<Var> {
    check_dims(g, logits, &targets.affinity, "affinity_loss")?;
    let (pos, neg, norm) = affinity_weights(targets)?;
    let total = g.clamped_bce_logits(logits, pos, neg, PROB_EPS)?;
    Ok(g.scale(total, 1.0 / norm))
}

/// Affinity BCE weighted by `C`, normalized by `max(1, ΣC)`.
pub fn affinity_loss(g: &mut Graph, affinity: Var, targets: &GroupTargets) -> Result<Var> {
    check_dims(g, affinity, &targets.affinity, "affinity_loss")?;
    let (pos, neg, norm) = affinity_weights(targets)?;
    let total = weighted_bce_sum(g, affinity, pos, neg)?;
    Ok(g.scale(total, 1.0 / norm))
}

/// `α1·mask + α2·group`.
pub fn total_loss(g: &mut Graph, mask: Var, group: Var, weights: &LossWeights) -> Result<Var> {
    let a = g.scale(mask, weights.dice);
    let b = g.scale(group, weights.group);
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mask;
    use crate::matching::Assignment;
    use crate::numerics::{finite_diff_check, logistic, ParamStore};

    fn targets_from(rows: &[Vec<f64>], matched: &[bool]) -> GroupTargets {
        let n = rows.len();
        let w = rows[0].len();
        let groups: Vec<Mask> = rows
            .iter()
            .map(|r| Mask::from_bits(1, w, r.iter().map(|&v| v == 1.0).collect()).unwrap())
            .collect();
        let targets = matched
            .iter()
            .enumerate()
            .map(|(i, &m)| m.then_some(i))
            .collect();
        let a = Assignment::new(targets, 0.0).unwrap();
        let ids: Vec<usize> = (0..n).collect();
        GroupTargets::from_groups(&a, &ids, &groups).unwrap()
    }

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    fn dice_of(pred: &[Vec<f64>], t: &GroupTargets) -> f64 {
        eval(|g| {
            let p = g.constant(Tensor::from_rows(pred)?);
            dice_loss(g, p, t)
        })
    }

    #[test]
    fn dice_examples() {
        let rows = vec![vec![1.0, 1.0, 0.0, 0.0]];
        let t = targets_from(&rows, &[true]);
        assert_eq!(dice_of(&rows, &t), 0.0);
        assert_eq!(dice_of(&[vec![0.0, 0.0, 1.0, 1.0]], &t), 1.0);
        assert!((dice_of(&[vec![1.0, 0.0, 0.0, 0.0]], &t) - 1.0 / 3.0).abs() < 1e-15);
        let none = targets_from(&rows, &[false]);
        assert_eq!(dice_of(&[vec![0.3, 0.2, 0.1, 0.9]], &none), 0.0);
    }

    #[test]
    fn dice_ignores_unmatched_rows() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let t = targets_from(&rows, &[true, false]);
        assert_eq!(dice_of(&[vec![1.0, 0.0], vec![0.9, 0.1]], &t), 0.0);
    }

    fn affinity_of(a_hat: Tensor, t: &GroupTargets) -> f64 {
        eval(|g| {
            let a = g.constant(a_hat);
            affinity_loss(g, a, t)
        })
    }

    fn pair_targets(same: bool) -> GroupTargets {
        let a = Assignment::new(vec![Some(0), Some(1)], 0.0).unwrap();
        let masks = vec![Mask::from_fn(1, 1, |_, _| true); 2];
        let ids = if same { vec![0, 0] } else { vec![0, 1] };
        GroupTargets::from_groups(&a, &ids, &masks).unwrap()
    }

    #[test]
    fn affinity_examples() {
        for same in [true, false] {
            let t = pair_targets(same);
            let half = affinity_of(Tensor::full(&[2, 2], 0.5), &t);
            assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
            let perfect = t
                .affinity
                .map(|a| if a == 1.0 { 1.0 - PROB_EPS } else { PROB_EPS });
            assert!(affinity_of(perfect, &t) <= 1e-6);
        }
        let mut t = pair_targets(true);
        t.weight = Tensor::zeros(&[2, 2]);
        assert_eq!(affinity_of(Tensor::full(&[2, 2], 0.3), &t), 0.0);
    }

    #[test]
    fn group_mask_examples() {
        let mut g = Graph::new();
        let map = g.constant(Tensor::new(&[1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap());
        let pe = PixelEmbedding {
            map,
            branches: vec![],
            dim: 1,
            height: 1,
            width: 3,
        };
        let f = g.constant(Tensor::from_rows(&[vec![2.0], vec![0.0]]).unwrap());
        let m = predict_group_masks(&mut g, f, &pe).unwrap();
        let v = g.value(m);
        assert!((v.at(&[0, 0]) - 0.8807970779778823).abs() < 1e-15);
        assert_eq!(v.at(&[0, 1]), 0.5);
        assert_eq!(v.at(&[0, 2]), logistic(-2.0));
        assert!(v.row(1).iter().all(|&x| x == 0.5));

        let bad = g.constant(Tensor::zeros(&[2, 3]));
        assert!(predict_group_masks(&mut g, bad, &pe).is_err());
    }

    #[test]
    fn affinity_prediction_examples() {
        let d = 4.0f64;
        let mut g = Graph::new();
        let f = g.constant(
            Tensor::from_rows(&[
                vec![d.powf(0.25), 0.0, 0.0, 0.0],
                vec![d.powf(0.25), 0.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0, 0.0],
                vec![0.0; 4],
            ])
            .unwrap(),
        );
        let a = predict_affinity(&mut g, f).unwrap();
        let v = g.value(a);
        assert!((v.at(&[0, 1]) - 0.7310585786300049).abs() < 1e-15);
        assert_eq!(v.at(&[0, 2]), 0.5);
        assert_eq!(v.at(&[3, 3]), 0.5);
    }

    #[test]
    fn total_loss_examples() {
        let run = |w: LossWeights, d: f64, a: f64| {
            eval(|g| {
                let x = g.constant(Tensor::scalar(d));
                let y = g.constant(Tensor::scalar(a));
                total_loss(g, x, y, &w)
            })
        };
        let w = LossWeights::default();
        assert!((run(w, 0.2, 0.3) - 0.5).abs() < 1e-15);
        assert_eq!(run(LossWeights { dice: 0.0, ..w }, 0.2, 0.3), 0.3);
        assert_eq!(run(LossWeights { group: 0.0, ..w }, 0.7, 0.3), 0.7);
        assert!(LossWeights {
            detection: 1.0,
            ..w
        }
        .validate()
        .is_err());
        assert!(LossWeights { dice: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn mask_bce_is_zero_at_perfect_and_ln2_at_half() {
        let rows = vec![vec![1.0, 0.0, 1.0]];
        let t = targets_from(&rows, &[true]);
        let at = |p: Vec<f64>| {
            eval(|g| {
                let x = g.constant(Tensor::from_rows(&[p])?);
                mask_bce_loss(g, x, &t)
            })
        };
        assert!(at(vec![1.0, 0.0, 1.0]) < 1e-6);
        assert!((at(vec![0.5; 3]) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    fn three_pairs() -> GroupTargets {
        let a = Assignment::new(vec![Some(0), Some(1), Some(2)], 0.0).unwrap();
        let masks = vec![Mask::from_fn(1, 1, |_, _| true); 3];
        GroupTargets::from_groups(&a, &[0, 0, 1], &masks).unwrap()
    }

    #[test]
    fn logit_losses_match_probability_losses() {
        let t = three_pairs();
        for z in [
            Tensor::from_rows(&[
                vec![2.0, -1.0, 0.5],
                vec![-1.0, 3.0, -4.0],
                vec![0.5, -4.0, 0.0],
            ])
            .unwrap(),
            Tensor::full(&[3, 3], 40.0),
            Tensor::full(&[3, 3], -40.0),
        ] {
            let from_logits = eval(|g| {
                let z = g.constant(z.clone());
                affinity_loss_logits(g, z, &t)
            });
            let from_probs = affinity_of(z.map(logistic), &t);
            assert!(
                (from_logits - from_probs).abs() < 1e-9,
                "{from_logits} vs {from_probs}"
            );
        }

        let rows = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]];
        let t = targets_from(&rows, &[true, false]);
        let z = Tensor::from_rows(&[vec![1.5, -30.0, 0.2], vec![4.0, 4.0, 4.0]]).unwrap();
        let from_logits = eval(|g| {
            let z = g.constant(z.clone());
            mask_bce_loss_logits(g, z, &t)
        });
        let from_probs = eval(|g| {
            let p = g.constant(z.map(logistic));
            mask_bce_loss(g, p, &t)
        });
        assert!((from_logits - from_probs).abs() < 1e-9);
    }

    #[test]
    fn logit_gradient_survives_the_clamp() {
        let t = three_pairs();
        let mut g = Graph::new();
        let z = g.constant(Tensor::full(&[3, 3], 30.0));
        let loss = affinity_loss_logits(&mut g, z, &t).unwrap();
        let grad = g.backward(loss).unwrap();
        let dz = grad.get(z).unwrap();
        let norm = t.weight.sum();
        for i in 0..3 {
            for j in 0..3 {
                let expected =
                    t.weight.at(&[i, j]) * (logistic(30.0) - t.affinity.at(&[i, j])) / norm;
                assert!((dz.at(&[i, j]) - expected).abs() < 1e-12);
            }
        }
        // pairs that should be apart are pushed back even though the loss is clamped
        assert!(dz.at(&[0, 2]) > 0.9 / norm);
    }

    #[test]
    fn logit_losses_pass_finite_differences() {
        let t = three_pairs();
        let mut store = ParamStore::new();
        store.insert(
            "f",
            Tensor::from_rows(&[vec![0.3, -0.2], vec![0.5, 0.1], vec![-0.4, 0.6]]).unwrap(),
        );
        let err = finite_diff_check(&store, 1e-6, |g, p| {
            let f = g.param(p, "f")?;
            let z = affinity_logits(g, f)?;
            affinity_loss_logits(g, z, &t)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
