//! The five training losses and their analytic gradients, plus the
//! stage-level combinations.
//!
//! Stage 1 minimizes `distillation_loss` (instance + structure alignment)
//! between projected student embeddings and frozen teacher embeddings.
//! Stage 2 minimizes `tuning_loss`, an InfoNCE term on normalized embeddings
//! plus a weighted self-distillation regularizer against an EMA teacher.
//!
//! All losses use sum reduction, matching the formulas they implement;
//! [`apply_reduction`] rescales a result by `1/B` when mean reduction is
//! requested. Teacher and EMA batches are constants: no gradients flow
//! through them.

use std::collections::BTreeMap;

use crate::embedding::{
    l2_normalize, smoothed_distance_with_scale, smoothed_norm_with_scale, EmbeddingBatch,
    NORM_SMOOTHING_EPS,
};
use crate::error::{Error, Result};

/// Gradient key for the trainable batch of a distillation-style loss.
pub const GRAD_STUDENT: &str = "student";
/// Gradient key for the image batch of the contrastive loss.
pub const GRAD_IMAGE: &str = "image";
/// Gradient key for the text batch of the contrastive loss.
pub const GRAD_TEXT: &str = "text";
/// Gradient key for the log-temperature scalar (stored as a 1x1 matrix).
pub const GRAD_LOG_TAU: &str = "log_tau";

/// Standard CLIP initialization for the learnable temperature.
pub const TAU_INIT: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossWarning {
    /// Structure terms need at least two samples; the pair sum was skipped.
    BatchTooSmallForPairs,
}

/// A loss evaluation: scalar value plus one gradient block per trainable
/// input group, keyed by the `GRAD_*` constants.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grads: BTreeMap<&'static str, EmbeddingBatch>,
    pub warnings: Vec<LossWarning>,
}

impl LossValue {
    fn new(value: f64) -> Self {
        Self {
            value,
            grads: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn grad(&self, key: &str) -> Option<&EmbeddingBatch> {
        self.grads.get(key)
    }

    /// Scalar gradient for [`GRAD_LOG_TAU`], if present.
    pub fn log_tau_grad(&self) -> Option<f64> {
        self.grads.get(GRAD_LOG_TAU).map(|g| g.get(0, 0))
    }
}

/// Loss reduction over the batch dimension. `Sum` matches the written
/// formulas; `Mean` divides value and gradients by the batch size so the
/// loss scale is independent of batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Rescales a sum-reduced loss in place for the requested reduction.
pub fn apply_reduction(loss: &mut LossValue, reduction: Reduction, batch_size: usize) {
    if reduction == Reduction::Mean && batch_size > 0 {
        let inv = 1.0 / batch_size as f64;
        loss.value *= inv;
        for g in loss.grads.values_mut() {
            g.scale(inv);
        }
    }
}

fn check_same_shape(
    context: &'static str,
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            context,
            expected: format!("{}x{}", a.rows(), a.cols()),
            got: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    Ok(())
}

/// Instance semantic alignment: sum over samples of the smoothed L2 distance
/// between student and teacher rows. Gradients flow to the student only.
pub fn instance_alignment_loss(
    student: &EmbeddingBatch,
    teacher: &EmbeddingBatch,
) -> Result<LossValue> {
    check_same_shape("instance_alignment_loss", student, teacher)?;
    let mut value = 0.0;
    let mut grad = EmbeddingBatch::zeros(student.rows(), student.cols());
    for i in 0..student.rows() {
        let diff: Vec<f64> = student
            .row(i)
            .iter()
            .zip(teacher.row(i))
            .map(|(s, t)| s - t)
            .collect();
        let (norm, scale) = smoothed_norm_with_scale(&diff, NORM_SMOOTHING_EPS);
        value += norm;
        for (g, d) in grad.row_mut(i).iter_mut().zip(&diff) {
            *g = d * scale;
        }
    }
    let mut out = LossValue::new(value);
    out.grads.insert(GRAD_STUDENT, grad);
    Ok(out)
}

/// Embedding structure alignment: sum over unordered pairs of the absolute
/// difference between student and teacher intra-batch distances. Student and
/// teacher may live in spaces of different dimension. The absolute value
/// takes subgradient zero at exact ties.
pub fn structure_alignment_loss(
    student: &EmbeddingBatch,
    teacher: &EmbeddingBatch,
) -> Result<LossValue> {
    if student.rows() != teacher.rows() {
        return Err(Error::ShapeMismatch {
            context: "structure_alignment_loss",
            expected: format!("{} rows", student.rows()),
            got: format!("{} rows", teacher.rows()),
        });
    }
    let n = student.rows();
    if n < 2 {
        let mut out = LossValue::new(0.0);
        out.warnings.push(LossWarning::BatchTooSmallForPairs);
        return Ok(out);
    }
    let mut value = 0.0;
    let mut grad = EmbeddingBatch::zeros(student.rows(), student.cols());
    for i in 0..n {
        for j in (i + 1)..n {
            let (ds, scale) =
                smoothed_distance_with_scale(student.row(i), student.row(j), NORM_SMOOTHING_EPS);
            let (dt, _) =
                smoothed_distance_with_scale(teacher.row(i), teacher.row(j), NORM_SMOOTHING_EPS);
            let diff = ds - dt;
            value += diff.abs();
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            if sign != 0.0 {
                for k in 0..student.cols() {
                    let delta = (student.get(i, k) - student.get(j, k)) * scale * sign;
                    grad.set(i, k, grad.get(i, k) + delta);
                    grad.set(j, k, grad.get(j, k) - delta);
                }
            }
        }
    }
    let mut out = LossValue::new(value);
    out.grads.insert(GRAD_STUDENT, grad);
    Ok(out)
}

/// Stage-1 distillation objective: instance plus structure alignment.
pub fn distillation_loss(
    student: &EmbeddingBatch,
    teacher: &EmbeddingBatch,
) -> Result<LossValue> {
    check_same_shape("distillation_loss", student, teacher)?;
    let instance = instance_alignment_loss(student, teacher)?;
    let structure = structure_alignment_loss(student, teacher)?;
    let mut grad = instance.grads[GRAD_STUDENT].clone();
    if let Some(sg) = structure.grad(GRAD_STUDENT) {
        grad.add_scaled(sg, 1.0);
    }
    let mut out = LossValue::new(instance.value + structure.value);
    out.grads.insert(GRAD_STUDENT, grad);
    out.warnings = structure.warnings;
    Ok(out)
}

/// Symmetric InfoNCE over a batch of paired embeddings.
///
/// `value = -sum_i [log softmax_j(v_i.t_j / tau)[i] + log softmax_j(t_i.v_j / tau)[i]]`
/// with `tau = exp(log_tau)`. Inputs are expected to be L2-normalized
/// already. Softmaxes subtract the per-row maximum before exponentiating.
/// Gradients cover the image batch, the text batch, and `log_tau`.
pub fn info_nce_loss(
    image: &EmbeddingBatch,
    text: &EmbeddingBatch,
    log_tau: f64,
) -> Result<LossValue> {
    check_same_shape("info_nce_loss", image, text)?;
    let n = image.rows();
    let tau = log_tau.exp();
    let logits = {
        let mut l = crate::embedding::similarity_matrix(image, text)?;
        l.scale(1.0 / tau);
        l
    };

    // Log-softmax along rows (image -> text) and columns (text -> image).
    let mut value = 0.0;
    // dL/dlogits accumulates (row_softmax - I) + (col_softmax - I).
    let mut dlogits = EmbeddingBatch::zeros(n, n);

    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = max + sum_exp.ln();
        value -= row[i] - log_sum;
        for j in 0..n {
            let p = (row[j] - log_sum).exp();
            dlogits.set(i, j, dlogits.get(i, j) + p - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| logits.get(i, j)).collect();
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = col.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = max + sum_exp.ln();
        value -= col[j] - log_sum;
        for i in 0..n {
            let q = (col[i] - log_sum).exp();
            dlogits.set(i, j, dlogits.get(i, j) + q - if i == j { 1.0 } else { 0.0 });
        }
    }

    // Chain rule through logits = (V T^t) / tau.
    let d = image.cols();
    let mut grad_image = EmbeddingBatch::zeros(n, d);
    let mut grad_text = EmbeddingBatch::zeros(n, d);
    let mut grad_log_tau = 0.0;
    for i in 0..n {
        for j in 0..n {
            let g = dlogits.get(i, j);
            grad_log_tau -= g * logits.get(i, j);
            if g != 0.0 {
                for k in 0..d {
                    grad_image.set(i, k, grad_image.get(i, k) + g * text.get(j, k) / tau);
                    grad_text.set(j, k, grad_text.get(j, k) + g * image.get(i, k) / tau);
                }
            }
        }
    }

    let mut out = LossValue::new(value);
    out.grads.insert(GRAD_IMAGE, grad_image);
    out.grads.insert(GRAD_TEXT, grad_text);
    out.grads
        .insert(GRAD_LOG_TAU, EmbeddingBatch::new(1, 1, vec![grad_log_tau])?);
    Ok(out)
}

/// Self-distillation regularizer between the trainable image encoder's
/// outputs and its EMA teacher's outputs: structurally identical to the
/// stage-1 distillation loss with the EMA batch as the frozen teacher.
pub fn self_distill_reg_loss(
    student_img: &EmbeddingBatch,
    ema_img: &EmbeddingBatch,
) -> Result<LossValue> {
    check_same_shape("self_distill_reg_loss", student_img, ema_img)?;
    distillation_loss(student_img, ema_img)
}

/// Propagates a gradient through row-wise L2 normalization.
///
/// `raw` is the unnormalized batch, `normalized` its normalized image, and
/// `grad_normalized` the loss gradient at the normalized output. Rows listed
/// in `degenerate` passed through normalization unchanged, so their gradient
/// does too.
fn chain_through_normalization(
    raw: &EmbeddingBatch,
    normalized: &EmbeddingBatch,
    degenerate: &[usize],
    grad_normalized: &EmbeddingBatch,
) -> EmbeddingBatch {
    let mut out = EmbeddingBatch::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        if degenerate.contains(&i) {
            out.row_mut(i).copy_from_slice(grad_normalized.row(i));
            continue;
        }
        let norm = crate::embedding::dot(raw.row(i), raw.row(i)).sqrt();
        let y = normalized.row(i);
        let g = grad_normalized.row(i);
        let gy = crate::embedding::dot(g, y);
        for k in 0..raw.cols() {
            out.set(i, k, (g[k] - gy * y[k]) / norm);
        }
    }
    out
}

/// Stage-2 objective: `info_nce + lambda * self_distill_reg`.
///
/// Takes raw (unnormalized) encoder outputs. The contrastive term sees
/// L2-normalized embeddings, with gradients chained back through the
/// normalization; the regularizer compares raw student and EMA outputs.
/// Gradient keys: [`GRAD_IMAGE`], [`GRAD_TEXT`], [`GRAD_LOG_TAU`].
pub fn tuning_loss(
    image: &EmbeddingBatch,
    text: &EmbeddingBatch,
    ema_img: &EmbeddingBatch,
    log_tau: f64,
    lambda: f64,
) -> Result<LossValue> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "tuning_loss lambda must be finite and non-negative, got {lambda}"
        )));
    }
    check_same_shape("tuning_loss", image, ema_img)?;

    let (image_n, image_degenerate) = l2_normalize(image, NORM_SMOOTHING_EPS);
    let (text_n, text_degenerate) = l2_normalize(text, NORM_SMOOTHING_EPS);
    let info = info_nce_loss(&image_n, &text_n, log_tau)?;

    let mut grad_image =
        chain_through_normalization(image, &image_n, &image_degenerate, &info.grads[GRAD_IMAGE]);
    let grad_text =
        chain_through_normalization(text, &text_n, &text_degenerate, &info.grads[GRAD_TEXT]);

    // The regularizer is skipped entirely when disabled.
    let mut out = if lambda == 0.0 {
        LossValue::new(info.value)
    } else {
        let reg = self_distill_reg_loss(image, ema_img)?;
        grad_image.add_scaled(&reg.grads[GRAD_STUDENT], lambda);
        let mut out = LossValue::new(info.value + lambda * reg.value);
        out.warnings = reg.warnings;
        out
    };
    out.grads.insert(GRAD_IMAGE, grad_image);
    out.grads.insert(GRAD_TEXT, grad_text);
    out.grads
        .insert(GRAD_LOG_TAU, info.grads[GRAD_LOG_TAU].clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rows: &[&[f64]]) -> EmbeddingBatch {
        EmbeddingBatch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> EmbeddingBatch {
        EmbeddingBatch::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    /// Direct scalar InfoNCE oracle: plain softmax per direction, no shared
    /// code with the implementation.
    fn info_nce_oracle(image: &EmbeddingBatch, text: &EmbeddingBatch, tau: f64) -> f64 {
        let n = image.rows();
        let sim = |i: usize, j: usize| {
            let mut s = 0.0;
            for k in 0..image.cols() {
                s += image.get(i, k) * text.get(j, k);
            }
            s
        };
        let mut total = 0.0;
        for i in 0..n {
            let mut denom_i2t = 0.0;
            let mut denom_t2i = 0.0;
            for j in 0..n {
                denom_i2t += (sim(i, j) / tau).exp();
                denom_t2i += (sim(j, i) / tau).exp();
            }
            total -= ((sim(i, i) / tau).exp() / denom_i2t).ln();
            total -= ((sim(i, i) / tau).exp() / denom_t2i).ln();
        }
        total
    }

    #[test]
    fn instance_unit_displacement() {
        let loss =
            instance_alignment_loss(&batch(&[&[1.0, 0.0]]), &batch(&[&[0.0, 0.0]])).unwrap();
        assert!((loss.value - 1.0).abs() < 1e-5);
    }

    #[test]
    fn instance_coincidence_is_exactly_zero() {
        let b = batch(&[&[0.3, -1.2], &[5.0, 2.0]]);
        let loss = instance_alignment_loss(&b, &b).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.grads[GRAD_STUDENT].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn instance_sum_of_unit_norms() {
        let loss = instance_alignment_loss(
            &batch(&[&[1.0, 0.0], &[0.0, 1.0]]),
            &batch(&[&[0.0, 0.0], &[0.0, 0.0]]),
        )
        .unwrap();
        assert!((loss.value - 2.0).abs() < 1e-5);
    }

    #[test]
    fn instance_shape_mismatch_fatal() {
        let a = batch(&[&[1.0, 0.0]]);
        let b = batch(&[&[1.0, 0.0, 0.0]]);
        assert!(instance_alignment_loss(&a, &b).is_err());
    }

    #[test]
    fn structure_distance_gap() {
        // Student rows at distance 5, teacher rows at distance 3: |5 - 3| = 2.
        let student = batch(&[&[0.0, 0.0], &[3.0, 4.0]]);
        let teacher = batch(&[&[0.0, 0.0], &[3.0, 0.0]]);
        let loss = structure_alignment_loss(&student, &teacher).unwrap();
        assert!((loss.value - 2.0).abs() < 1e-5);
    }

    #[test]
    fn structure_zero_under_isometry() {
        // Student is a rotation plus translation of the teacher.
        let teacher = batch(&[&[1.0, 0.5], &[-0.3, 2.0], &[0.7, -1.1]]);
        let theta: f64 = 1.1;
        let (c, s) = (theta.cos(), theta.sin());
        let student_rows: Vec<Vec<f64>> = teacher
            .iter_rows()
            .map(|r| vec![c * r[0] - s * r[1] + 10.0, s * r[0] + c * r[1] - 3.0])
            .collect();
        let student = EmbeddingBatch::from_rows(&student_rows).unwrap();
        let loss = structure_alignment_loss(&student, &teacher).unwrap();
        assert!(loss.value.abs() < 1e-7);
    }

    #[test]
    fn structure_matches_two_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let student = random_batch(&mut rng, 3, 4);
        let teacher = random_batch(&mut rng, 3, 2); // different D is allowed
        let loss = structure_alignment_loss(&student, &teacher).unwrap();
        let mut expect = 0.0;
        for i in 0..3 {
            for j in (i + 1)..3 {
                let ds = {
                    let sq: f64 = (0..4)
                        .map(|k| (student.get(i, k) - student.get(j, k)).powi(2))
                        .sum();
                    (sq + NORM_SMOOTHING_EPS).sqrt() - NORM_SMOOTHING_EPS.sqrt()
                };
                let dt = {
                    let sq: f64 = (0..2)
                        .map(|k| (teacher.get(i, k) - teacher.get(j, k)).powi(2))
                        .sum();
                    (sq + NORM_SMOOTHING_EPS).sqrt() - NORM_SMOOTHING_EPS.sqrt()
                };
                expect += (ds - dt).abs();
            }
        }
        assert!((loss.value - expect).abs() < 1e-12);
    }

    #[test]
    fn structure_single_row_warns() {
        let b = batch(&[&[1.0, 2.0]]);
        let loss = structure_alignment_loss(&b, &b).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.grads.is_empty());
        assert_eq!(loss.warnings, vec![LossWarning::BatchTooSmallForPairs]);
    }

    #[test]
    fn structure_invariant_under_independent_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let student = random_batch(&mut rng, 4, 2);
        let teacher = random_batch(&mut rng, 4, 2);
        let rotate = |b: &EmbeddingBatch, theta: f64| {
            let (c, s) = (theta.cos(), theta.sin());
            EmbeddingBatch::from_rows(
                &b.iter_rows()
                    .map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1]])
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let base = structure_alignment_loss(&student, &teacher).unwrap().value;
        let turned = structure_alignment_loss(&rotate(&student, 0.9), &rotate(&teacher, -2.3))
            .unwrap()
            .value;
        assert!((base - turned).abs() < 1e-7);
    }

    #[test]
    fn joint_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let student = random_batch(&mut rng, 5, 3);
        let teacher = random_batch(&mut rng, 5, 3);
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |b: &EmbeddingBatch| {
            EmbeddingBatch::from_rows(&perm.iter().map(|&i| b.row(i).to_vec()).collect::<Vec<_>>())
                .unwrap()
        };
        let ins0 = instance_alignment_loss(&student, &teacher).unwrap().value;
        let ins1 = instance_alignment_loss(&permute(&student), &permute(&teacher))
            .unwrap()
            .value;
        assert!((ins0 - ins1).abs() < 1e-12);
        let st0 = structure_alignment_loss(&student, &teacher).unwrap().value;
        let st1 = structure_alignment_loss(&permute(&student), &permute(&teacher))
            .unwrap()
            .value;
        assert!((st0 - st1).abs() < 1e-12);
    }

    #[test]
    fn distillation_is_sum_of_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let student = random_batch(&mut rng, 3, 4);
        let teacher = random_batch(&mut rng, 3, 4);
        let dis = distillation_loss(&student, &teacher).unwrap();
        let ins = instance_alignment_loss(&student, &teacher).unwrap();
        let st = structure_alignment_loss(&student, &teacher).unwrap();
        assert!((dis.value - (ins.value + st.value)).abs() < 1e-12);
    }

    #[test]
    fn distillation_zero_at_coincidence() {
        let b = batch(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(distillation_loss(&b, &b).unwrap().value, 0.0);
    }

    #[test]
    fn distillation_single_row_equals_instance() {
        let student = batch(&[&[1.5, -0.5]]);
        let teacher = batch(&[&[0.25, 0.75]]);
        let dis = distillation_loss(&student, &teacher).unwrap();
        let ins = instance_alignment_loss(&student, &teacher).unwrap();
        assert_eq!(dis.value, ins.value);
    }

    #[test]
    fn info_nce_identity_rows_matches_oracle() {
        let id = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = info_nce_loss(&id, &id, 0.0_f64).unwrap(); // tau = 1
        let oracle = info_nce_oracle(&id, &id, 1.0);
        assert!((loss.value - oracle).abs() < 1e-12);
        // Closed form: 4 * ln(1 + e^-1).
        let expect = 4.0 * (1.0 + (-1.0_f64).exp()).ln();
        assert!((loss.value - expect).abs() < 1e-12);
    }

    #[test]
    fn info_nce_uniform_similarities() {
        // Identical rows make every similarity equal, forcing uniform
        // softmaxes: the loss is 2B log B. For B = 2 that is 4 ln 2.
        let b = batch(&[&[0.6, 0.8], &[0.6, 0.8]]);
        let loss = info_nce_loss(&b, &b, (0.37_f64).ln()).unwrap();
        assert!((loss.value - 4.0 * 2.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn info_nce_clip_temperature_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let image = {
            let (n, _) = crate::embedding::l2_normalize(&random_batch(&mut rng, 4, 3), 1e-12);
            n
        };
        let text = {
            let (n, _) = crate::embedding::l2_normalize(&random_batch(&mut rng, 4, 3), 1e-12);
            n
        };
        let loss = info_nce_loss(&image, &text, TAU_INIT.ln()).unwrap();
        let oracle = info_nce_oracle(&image, &text, TAU_INIT);
        assert!((loss.value - oracle).abs() < 1e-9);
    }

    #[test]
    fn info_nce_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_batch(&mut rng, 5, 4);
        let b = random_batch(&mut rng, 5, 4);
        let ab = info_nce_loss(&a, &b, -1.3).unwrap().value;
        let ba = info_nce_loss(&b, &a, -1.3).unwrap().value;
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn info_nce_monotone_in_diagonal_similarity() {
        // Diagonal similarity of pair 0 rises while every off-diagonal
        // similarity stays fixed; the loss must strictly decrease.
        let image = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let mut prev = f64::INFINITY;
        for &a in &[0.1, 0.4, 0.7, 1.0, 1.3] {
            let text = batch(&[&[a, 0.0], &[0.0, 1.0]]);
            let v = info_nce_loss(&image, &text, 0.0).unwrap().value;
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn reg_loss_zero_at_coincidence_and_single_row() {
        let b = batch(&[&[0.1, 0.2], &[0.3, 0.4]]);
        assert_eq!(self_distill_reg_loss(&b, &b).unwrap().value, 0.0);
        let student = batch(&[&[2.0, 0.0]]);
        let ema = batch(&[&[0.0, 0.0]]);
        let loss = self_distill_reg_loss(&student, &ema).unwrap();
        assert!((loss.value - 2.0).abs() < 1e-5);
    }

    #[test]
    fn reg_loss_is_distillation_with_ema_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let student = random_batch(&mut rng, 3, 4);
        let ema = random_batch(&mut rng, 3, 4);
        let reg = self_distill_reg_loss(&student, &ema).unwrap();
        let dis = distillation_loss(&student, &ema).unwrap();
        assert_eq!(reg.value, dis.value);
    }

    #[test]
    fn tuning_lambda_zero_equals_info_nce() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let image = random_batch(&mut rng, 4, 3);
        let text = random_batch(&mut rng, 4, 3);
        let ema = random_batch(&mut rng, 4, 3);
        let tune = tuning_loss(&image, &text, &ema, TAU_INIT.ln(), 0.0).unwrap();
        let (vn, _) = l2_normalize(&image, NORM_SMOOTHING_EPS);
        let (tn, _) = l2_normalize(&text, NORM_SMOOTHING_EPS);
        let info = info_nce_loss(&vn, &tn, TAU_INIT.ln()).unwrap();
        assert_eq!(tune.value, info.value);
    }

    #[test]
    fn tuning_paper_lambda_composes_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let image = random_batch(&mut rng, 4, 3);
        let text = random_batch(&mut rng, 4, 3);
        let ema = random_batch(&mut rng, 4, 3);
        let lambda = 0.0004; // the published loss weight
        let tune = tuning_loss(&image, &text, &ema, TAU_INIT.ln(), lambda).unwrap();
        let info = tuning_loss(&image, &text, &ema, TAU_INIT.ln(), 0.0).unwrap();
        let reg = self_distill_reg_loss(&image, &ema).unwrap();
        assert!((tune.value - (info.value + lambda * reg.value)).abs() < 1e-12);
    }

    #[test]
    fn tuning_equals_info_when_student_matches_ema() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let image = random_batch(&mut rng, 4, 3);
        let text = random_batch(&mut rng, 4, 3);
        for &lambda in &[0.0, 0.0004, 1.0, 50.0] {
            let tune = tuning_loss(&image, &text, &image, TAU_INIT.ln(), lambda).unwrap();
            let base = tuning_loss(&image, &text, &image, TAU_INIT.ln(), 0.0).unwrap();
            assert_eq!(tune.value, base.value);
        }
    }

    #[test]
    fn tuning_negative_lambda_fatal() {
        let b = batch(&[&[1.0, 0.0]]);
        assert!(matches!(
            tuning_loss(&b, &b, &b, 0.0, -0.1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn losses_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let a = random_batch(&mut rng, 4, 3);
            let b = random_batch(&mut rng, 4, 3);
            assert!(instance_alignment_loss(&a, &b).unwrap().value >= 0.0);
            assert!(structure_alignment_loss(&a, &b).unwrap().value >= 0.0);
            assert!(self_distill_reg_loss(&a, &b).unwrap().value >= 0.0);
            assert!(info_nce_loss(&a, &b, 0.0).unwrap().value.is_finite());
        }
    }

    #[test]
    fn mean_reduction_divides_by_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_batch(&mut rng, 4, 3);
        let b = random_batch(&mut rng, 4, 3);
        let sum = distillation_loss(&a, &b).unwrap();
        let mut mean = sum.clone();
        apply_reduction(&mut mean, Reduction::Mean, 4);
        assert!((mean.value - sum.value / 4.0).abs() < 1e-15);
        let gs = &sum.grads[GRAD_STUDENT];
        let gm = &mean.grads[GRAD_STUDENT];
        for (s, m) in gs.data().iter().zip(gm.data()) {
            assert!((m - s / 4.0).abs() < 1e-15);
        }
    }
}
