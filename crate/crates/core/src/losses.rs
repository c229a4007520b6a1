//! Angular-margin classification loss, a center-compactness penalty, and
//! their weighted combination.
//!
//! Both losses operate on row-normalized embeddings. The classification head
//! keeps one unit-norm column per class; similarity between an embedding and
//! a class is the cosine of the angle between them. The margin pushes each
//! sample away from its own class boundary during training, and the center
//! term pulls samples of a class toward a running class mean, shrinking
//! intra-class spread.

use crate::standard_normal;
use crate::tensor::{Graph, Tensor, VarId};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Weights of the angular classification head: one column per class,
/// `dim x classes`, columns kept at unit norm between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcHead {
    pub weight: Tensor,
    pub classes: usize,
    pub dim: usize,
}

impl ArcHead {
    /// Random unit columns. Entries are drawn from a standard normal so the
    /// normalized columns are uniform on the sphere.
    pub fn new(dim: usize, classes: usize, seed: u64) -> Result<Self> {
        if dim == 0 || classes < 2 {
            return Err(Error::Usage(format!(
                "head needs dim >= 1 and classes >= 2, got {dim}x{classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = Tensor::from_fn(&[dim, classes], |_| standard_normal(&mut rng));
        normalize_columns_in_place(&mut weight)?;
        weight.requires_grad = true;
        Ok(ArcHead { weight, classes, dim })
    }

    /// Restores every column to unit norm after an optimizer step moved it.
    /// Columns within `tol` of unit length are left untouched bit for bit.
    pub fn renormalize_columns(&mut self, tol: f64) -> Result<()> {
        let (d, n) = (self.dim, self.classes);
        for j in 0..n {
            let mut sq = 0.0;
            for i in 0..d {
                let v = self.weight.data[i * n + j];
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric(format!(
                    "head column {j} collapsed to norm {norm:e}"
                )));
            }
            if (norm - 1.0).abs() <= tol {
                continue;
            }
            for i in 0..d {
                self.weight.data[i * n + j] /= norm;
            }
        }
        Ok(())
    }
}

/// Running per-class means of normalized embeddings. Updated outside the
/// graph after each optimizer step, never differentiated through.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    pub centers: Tensor,
    pub alpha: f64,
    pub classes: usize,
    pub dim: usize,
}

impl CenterBank {
    pub fn new(classes: usize, dim: usize, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Usage(format!(
                "center update rate must be in (0, 1], got {alpha}"
            )));
        }
        Ok(CenterBank {
            centers: Tensor::zeros(&[classes, dim]),
            alpha,
            classes,
            dim,
        })
    }

    /// Gathers the center row for each label into a `batch x dim` tensor.
    pub fn gather(&self, labels: &[usize]) -> Result<Tensor> {
        let mut out = Tensor::zeros(&[labels.len(), self.dim]);
        for (r, &y) in labels.iter().enumerate() {
            if y >= self.classes {
                return Err(Error::Usage(format!(
                    "label {y} out of range for {} centers",
                    self.classes
                )));
            }
            let src = &self.centers.data[y * self.dim..(y + 1) * self.dim];
            out.data[r * self.dim..(r + 1) * self.dim].copy_from_slice(src);
        }
        Ok(out)
    }

    /// Moves each class center toward the mean of this batch's normalized
    /// embeddings for that class. The denominator dampens classes with many
    /// samples in the batch:
    ///
    ///   delta_j = sum_{i: y_i = j} (c_j - e_i) / (1 + count_j)
    ///   c_j    <- c_j - alpha * delta_j
    ///
    /// Classes absent from the batch keep their center exactly.
    pub fn update(&mut self, embeddings: &Tensor, labels: &[usize]) -> Result<()> {
        if embeddings.shape.len() != 2 || embeddings.shape[1] != self.dim {
            return Err(Error::Usage(format!(
                "expected embeddings of width {}, got shape {:?}",
                self.dim, embeddings.shape
            )));
        }
        if embeddings.shape[0] != labels.len() {
            return Err(Error::Usage(format!(
                "{} embeddings but {} labels",
                embeddings.shape[0],
                labels.len()
            )));
        }
        let d = self.dim;
        let mut delta = vec![0.0; self.classes * d];
        let mut count = vec![0usize; self.classes];
        for (r, &y) in labels.iter().enumerate() {
            if y >= self.classes {
                return Err(Error::Usage(format!(
                    "label {y} out of range for {} centers",
                    self.classes
                )));
            }
            count[y] += 1;
            let e = &embeddings.data[r * d..(r + 1) * d];
            let c = &self.centers.data[y * d..(y + 1) * d];
            for i in 0..d {
                delta[y * d + i] += c[i] - e[i];
            }
        }
        for j in 0..self.classes {
            if count[j] == 0 {
                continue;
            }
            let damp = self.alpha / (1.0 + count[j] as f64);
            for i in 0..d {
                self.centers.data[j * d + i] -= damp * delta[j * d + i];
            }
        }
        if !self.centers.all_finite() {
            return Err(Error::Numeric("center update produced non-finite values".into()));
        }
        Ok(())
    }
}

/// Everything later stages need from one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    /// Row-normalized embeddings, reused by the center update.
    pub normalized: VarId,
    /// Scalar classification loss.
    pub arc: VarId,
    /// Scalar center penalty (zero node when the weight is zero).
    pub center: VarId,
    /// Scalar combined loss actually differentiated.
    pub total: VarId,
}

/// Margin-and-scale settings for the classification loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcParams {
    pub scale: f64,
    pub margin: f64,
}

impl Default for ArcParams {
    fn default() -> Self {
        ArcParams { scale: 30.0, margin: 0.3 }
    }
}

/// Cosine logits between normalized embeddings and normalized head columns,
/// clamped strictly inside (-1, 1) so the angle stays differentiable.
fn cosine_logits(g: &mut Graph, normalized: VarId, weight: VarId) -> Result<VarId> {
    let wn = g.l2_normalize_cols(weight)?;
    let cos = g.matmul(normalized, wn)?;
    g.clamp(cos, -1.0 + 1e-7, 1.0 - 1e-7)
}

/// Angular-margin softmax loss on unnormalized embeddings.
///
/// The target-class cosine cos(theta) becomes cos(theta + margin) before
/// scaling, which demands a larger true-class similarity to achieve the same
/// softmax probability. A zero margin skips the rewrite entirely, making the
/// result identical to plain scaled-cosine cross-entropy.
pub fn arcface_loss(
    g: &mut Graph,
    embeddings: VarId,
    weight: VarId,
    labels: &[usize],
    p: ArcParams,
) -> Result<LossNodes> {
    let normalized = g.l2_normalize_rows(embeddings)?;
    let arc = arcface_from_normalized(g, normalized, weight, labels, p)?;
    let center = g.constant(Tensor::scalar(0.0))?;
    Ok(LossNodes { normalized, arc, center, total: arc })
}

fn arcface_from_normalized(
    g: &mut Graph,
    normalized: VarId,
    weight: VarId,
    labels: &[usize],
    p: ArcParams,
) -> Result<VarId> {
    if !(p.scale.is_finite() && p.scale > 0.0) {
        return Err(Error::Usage(format!("scale must be positive, got {}", p.scale)));
    }
    let cos = cosine_logits(g, normalized, weight)?;
    let shifted = if p.margin == 0.0 {
        cos
    } else {
        g.angular_margin(cos, labels, p.margin)?
    };
    let logits = g.scale(shifted, p.scale)?;
    g.cross_entropy(logits, labels)
}

/// Half squared distance between normalized embeddings and their class
/// centers, summed over the batch:
///
///   L_c = 1/2 * sum_i ||e_i - c_{y_i}||^2
pub fn center_loss(
    g: &mut Graph,
    normalized: VarId,
    bank: &CenterBank,
    labels: &[usize],
) -> Result<VarId> {
    let gathered = g.constant(bank.gather(labels)?)?;
    let diff = g.sub(normalized, gathered)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 0.5)
}

/// The combined training loss: classification plus `lambda` times the center
/// penalty, sharing one normalization node. With `lambda == 0` the center
/// term is still reported but the returned total IS the classification node,
/// so the two losses agree bit for bit.
pub fn joint_loss(
    g: &mut Graph,
    embeddings: VarId,
    weight: VarId,
    bank: &CenterBank,
    labels: &[usize],
    p: ArcParams,
    lambda: f64,
) -> Result<LossNodes> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Usage(format!(
            "center weight must be finite and non-negative, got {lambda}"
        )));
    }
    let normalized = g.l2_normalize_rows(embeddings)?;
    let arc = arcface_from_normalized(g, normalized, weight, labels, p)?;
    let center = center_loss(g, normalized, bank, labels)?;
    let total = if lambda == 0.0 {
        arc
    } else {
        let weighted = g.scale(center, lambda)?;
        g.add(arc, weighted)?
    };
    Ok(LossNodes { normalized, arc, center, total })
}

fn normalize_columns_in_place(t: &mut Tensor) -> Result<()> {
    let (d, n) = (t.shape[0], t.shape[1]);
    for j in 0..n {
        let mut sq = 0.0;
        for i in 0..d {
            sq += t.data[i * n + j] * t.data[i * n + j];
        }
        let norm = sq.sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric(format!("column {j} has norm {norm:e}")));
        }
        for i in 0..d {
            t.data[i * n + j] /= norm;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_multi;

    fn head_2x2_identity() -> ArcHead {
        // Columns are the coordinate axes: class 0 along e0, class 1 along e1.
        ArcHead {
            weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            classes: 2,
            dim: 2,
        }
    }

    #[test]
    fn head_columns_are_unit_norm() {
        let head = ArcHead::new(16, 5, 7).unwrap();
        let (d, n) = (16, 5);
        for j in 0..n {
            let sq: f64 = (0..d)
                .map(|i| head.weight.data[i * n + j])
                .map(|v| v * v)
                .sum();
            assert!((sq.sqrt() - 1.0).abs() < 1e-12, "column {j}");
        }
    }

    #[test]
    fn renormalize_is_a_noop_within_tolerance() {
        let mut head = ArcHead::new(8, 3, 1).unwrap();
        let before = head.weight.data.clone();
        head.renormalize_columns(1e-9).unwrap();
        for (a, b) in head.weight.data.iter().zip(&before) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Push one column off unit length; only that column changes.
        head.weight.data[0] *= 2.0;
        head.weight.data[3] *= 2.0;
        let col_before: Vec<f64> = head.weight.data.iter().skip(1).step_by(3).cloned().collect();
        head.renormalize_columns(1e-9).unwrap();
        let col_after: Vec<f64> = head.weight.data.iter().skip(1).step_by(3).cloned().collect();
        assert_eq!(col_before, col_after);
        let sq: f64 = head.weight.data.iter().step_by(3).map(|v| v * v).sum();
        assert!((sq.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn arcface_equidistant_two_classes_gives_ln_two() {
        // Embedding at 45 degrees from both axes: both cosines equal, so the
        // softmax is uniform and the loss is exactly ln 2 regardless of scale.
        let head = head_2x2_identity();
        let mut g = Graph::new();
        let e = g
            .var(Tensor::new(vec![1, 2], vec![3.0, 3.0]).unwrap())
            .unwrap();
        let w = g.var(head.weight.clone()).unwrap();
        let nodes = arcface_loss(
            &mut g,
            e,
            w,
            &[0],
            ArcParams { scale: 30.0, margin: 0.0 },
        )
        .unwrap();
        let want = std::f64::consts::LN_2;
        assert!((g.tensor(nodes.arc).item() - want).abs() < 1e-12);
    }

    #[test]
    fn arcface_matches_softplus_of_cosine_gap() {
        // Two classes, margin 0: loss = ln(1 + exp(-s * (cos0 - cos1))).
        // Embedding along class 0 gives cos0 = 1, cos1 = 0 (clamp shifts
        // these by 1e-7, which the tolerance absorbs), s = 1:
        // loss = ln(1 + e^-1) = 0.31326168751822286.
        let head = head_2x2_identity();
        let mut g = Graph::new();
        let e = g
            .var(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap())
            .unwrap();
        let w = g.var(head.weight.clone()).unwrap();
        let nodes = arcface_loss(
            &mut g,
            e,
            w,
            &[0],
            ArcParams { scale: 1.0, margin: 0.0 },
        )
        .unwrap();
        assert!((g.tensor(nodes.arc).item() - 0.31326168751822286).abs() < 1e-6);
    }

    #[test]
    fn arcface_loss_is_positive_and_margin_raises_it() {
        let head = ArcHead::new(8, 4, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let e = Tensor::from_fn(&[6, 8], |_| rng.gen_range(-1.0..1.0));
        let labels = [0usize, 1, 2, 3, 0, 1];
        let loss_at = |margin: f64| {
            let mut g = Graph::new();
            let ev = g.var(e.clone()).unwrap();
            let wv = g.var(head.weight.clone()).unwrap();
            let nodes =
                arcface_loss(&mut g, ev, wv, &labels, ArcParams { scale: 30.0, margin }).unwrap();
            g.tensor(nodes.arc).item()
        };
        let mut prev = loss_at(0.0);
        assert!(prev > 0.0);
        for margin in [0.1, 0.2, 0.3, 0.5] {
            let cur = loss_at(margin);
            assert!(cur > prev, "margin {margin}: {cur} <= {prev}");
            prev = cur;
        }
    }

    #[test]
    fn margin_requires_larger_similarity_for_equal_probability() {
        // With a margin, the target logit drops from cos(t) to cos(t+m), so
        // the same embedding yields a smaller target probability.
        let head = head_2x2_identity();
        let theta: f64 = 0.9;
        let e = Tensor::new(vec![1, 2], vec![theta.cos(), theta.sin()]).unwrap();
        let prob_target = |margin: f64| {
            let mut g = Graph::new();
            let ev = g.var(e.clone()).unwrap();
            let wv = g.var(head.weight.clone()).unwrap();
            let n = g.l2_normalize_rows(ev).unwrap();
            let wn = g.l2_normalize_cols(wv).unwrap();
            let cos = g.matmul(n, wn).unwrap();
            let cl = g.clamp(cos, -1.0 + 1e-7, 1.0 - 1e-7).unwrap();
            let sh = if margin == 0.0 { cl } else { g.angular_margin(cl, &[0], margin).unwrap() };
            let sc = g.scale(sh, 10.0).unwrap();
            let p = g.softmax(sc).unwrap();
            g.tensor(p).data[0]
        };
        assert!(prob_target(0.3) < prob_target(0.0));
    }

    #[test]
    fn center_loss_is_zero_iff_embeddings_sit_on_centers() {
        let mut bank = CenterBank::new(2, 3, 0.5).unwrap();
        bank.centers = Tensor::new(
            vec![2, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        // Embeddings exactly on their centers (already unit rows).
        let on = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let e = g.var(on).unwrap();
        let n = g.l2_normalize_rows(e).unwrap();
        let c = center_loss(&mut g, n, &bank, &[0, 1]).unwrap();
        assert_eq!(g.tensor(c).item(), 0.0);

        // Unit distance from the center gives exactly 1/2.
        let off = Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let e = g.var(off).unwrap();
        let n = g.l2_normalize_rows(e).unwrap();
        let c = center_loss(&mut g, n, &bank, &[0]).unwrap();
        // ||(0,0,1) - (1,0,0)||^2 = 2, half of that is 1.
        assert!((g.tensor(c).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn joint_with_zero_weight_is_bitwise_the_classification_loss() {
        let head = ArcHead::new(8, 3, 3).unwrap();
        let bank = CenterBank::new(3, 8, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let e = Tensor::from_fn(&[5, 8], |_| rng.gen_range(-1.0..1.0));
        let labels = [0usize, 1, 2, 0, 1];

        let mut g = Graph::new();
        let ev = g.var(e.clone()).unwrap();
        let wv = g.var(head.weight.clone()).unwrap();
        let joint =
            joint_loss(&mut g, ev, wv, &bank, &labels, ArcParams::default(), 0.0).unwrap();
        assert_eq!(joint.total, joint.arc);

        let mut g2 = Graph::new();
        let ev2 = g2.var(e.clone()).unwrap();
        let wv2 = g2.var(head.weight.clone()).unwrap();
        let solo =
            arcface_loss(&mut g2, ev2, wv2, &labels, ArcParams::default()).unwrap();
        assert_eq!(
            g.tensor(joint.total).item().to_bits(),
            g2.tensor(solo.arc).item().to_bits()
        );
    }

    #[test]
    fn joint_is_linear_in_the_center_weight() {
        let head = ArcHead::new(8, 3, 5).unwrap();
        let mut bank = CenterBank::new(3, 8, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        bank.centers = Tensor::from_fn(&[3, 8], |_| rng.gen_range(-0.3..0.3));
        let e = Tensor::from_fn(&[5, 8], |_| rng.gen_range(-1.0..1.0));
        let labels = [0usize, 1, 2, 0, 1];
        for lambda in [0.001, 0.0411, 0.411, 1.0] {
            let mut g = Graph::new();
            let ev = g.var(e.clone()).unwrap();
            let wv = g.var(head.weight.clone()).unwrap();
            let nodes =
                joint_loss(&mut g, ev, wv, &bank, &labels, ArcParams::default(), lambda).unwrap();
            let total = g.tensor(nodes.total).item();
            let arc = g.tensor(nodes.arc).item();
            let center = g.tensor(nodes.center).item();
            // The graph computes arc + lambda*center with the same primitive
            // operations, so the identity holds bitwise.
            assert_eq!(total.to_bits(), (arc + lambda * center).to_bits(), "lambda {lambda}");
        }
    }

    #[test]
    fn center_update_moves_toward_batch_mean() {
        // One class, one sample at distance d: delta = (c - e)/2, so the
        // center moves alpha/2 of the way toward the embedding.
        let mut bank = CenterBank::new(1, 2, 0.5).unwrap();
        let e = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        bank.update(&e, &[0]).unwrap();
        assert_eq!(bank.centers.data, vec![0.25, 0.0]);
        // Absent classes stay put.
        let mut bank = CenterBank::new(2, 2, 0.5).unwrap();
        bank.centers.data = vec![0.5, 0.5, -0.5, -0.5];
        bank.update(&e, &[0]).unwrap();
        assert_eq!(&bank.centers.data[2..], &[-0.5, -0.5]);
    }

    #[test]
    fn center_update_damps_by_batch_count() {
        // Two samples of one class, both at the same point e: the raw pull is
        // 2(c - e) but the 1/(1 + 2) denominator leaves alpha * 2/3 of (c-e).
        let mut bank = CenterBank::new(1, 1, 0.5).unwrap();
        bank.centers.data = vec![1.0];
        let e = Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
        bank.update(&e, &[0, 0]).unwrap();
        // delta = (1-0)+(1-0) = 2, damp = 0.5/3, c = 1 - 2*0.5/3 = 2/3.
        assert!((bank.centers.data[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn losses_differentiate_cleanly() {
        let head = ArcHead::new(6, 3, 23).unwrap();
        let mut bank = CenterBank::new(3, 6, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        bank.centers = Tensor::from_fn(&[3, 6], |_| rng.gen_range(-0.3..0.3));
        let e = Tensor::from_fn(&[4, 6], |_| rng.gen_range(-1.0..1.0));
        let labels = vec![0usize, 1, 2, 0];
        let err = grad_check_multi(
            |g, ids| {
                let nodes = joint_loss(
                    g,
                    ids[0],
                    ids[1],
                    &bank,
                    &labels,
                    ArcParams::default(),
                    0.0411,
                )?;
                Ok(nodes.total)
            },
            &[e, head.weight.clone()],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "joint loss gradient error {err}");
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(ArcHead::new(0, 2, 1).is_err());
        assert!(ArcHead::new(4, 1, 1).is_err());
        assert!(CenterBank::new(2, 4, 0.0).is_err());
        assert!(CenterBank::new(2, 4, 1.5).is_err());
        let bank = CenterBank::new(2, 4, 0.5).unwrap();
        assert!(bank.gather(&[2]).is_err());
        let head = ArcHead::new(4, 2, 1).unwrap();
        let mut g = Graph::new();
        let e = g.var(Tensor::zeros(&[1, 4])).unwrap();
        let w = g.var(head.weight.clone()).unwrap();
        // Zero embedding cannot be normalized.
        assert!(arcface_loss(&mut g, e, w, &[0], ArcParams::default()).is_err());
    }
}
