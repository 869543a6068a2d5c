//! Evaluation harnesses: cross-modal retrieval, zero-shot classification,
//! encoder drift, and the finite-difference gradient checker.
//!
//! Everything is read-only and deterministic. Tie-breaking is always by
//! lowest index so independent implementations agree bit-for-bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, EmbeddingBatch, NORM_SMOOTHING_EPS};
use crate::error::{Error, Result};
use crate::losses::{
    self, info_nce_loss, instance_alignment_loss, self_distill_reg_loss,
    structure_alignment_loss, LossValue,
};
use crate::models::ToyEncoder;

/// Metrics for one evaluated configuration. Field order is the JSON order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub recall_i2t_at1: f64,
    pub recall_t2i_at1: f64,
    pub recall_i2t_at5: f64,
    pub recall_t2i_at5: f64,
    pub heldout_zero_shot_accuracy: f64,
    pub finetune_class_accuracy: f64,
    pub mean_drift: f64,
}

impl MetricsReport {
    /// Aligned one-line rendering for the CLI table.
    pub fn table_row(&self) -> String {
        format!(
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10.4}",
            self.label,
            self.recall_i2t_at1,
            self.recall_t2i_at1,
            self.recall_i2t_at5,
            self.recall_t2i_at5,
            self.heldout_zero_shot_accuracy,
            self.finetune_class_accuracy,
            self.mean_drift,
        )
    }

    pub fn table_header() -> String {
        format!(
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}",
            "config", "i2t@1", "t2i@1", "i2t@5", "t2i@5", "heldout", "finetune", "drift"
        )
    }
}

/// Fraction of queries whose true partner ranks in the top `k` by dot
/// product, in each direction: `(image_to_text, text_to_image)`. Row `i` of
/// each batch is the true partner of row `i` in the other. Ties rank the
/// lower index first.
pub fn recall_at_k(
    image_emb: &EmbeddingBatch,
    text_emb: &EmbeddingBatch,
    k: usize,
) -> Result<(f64, f64)> {
    if image_emb.rows() != text_emb.rows() || image_emb.cols() != text_emb.cols() {
        return Err(Error::ShapeMismatch {
            context: "recall_at_k",
            expected: format!("{}x{}", image_emb.rows(), image_emb.cols()),
            got: format!("{}x{}", text_emb.rows(), text_emb.cols()),
        });
    }
    let n = image_emb.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!(
            "recall_at_k requires 1 <= k <= batch size, got k={k} with {n} rows"
        )));
    }
    let rank_of_true = |queries: &EmbeddingBatch, gallery: &EmbeddingBatch, q: usize| -> usize {
        let true_score = dot(queries.row(q), gallery.row(q));
        let mut ahead = 0;
        for j in 0..n {
            let s = dot(queries.row(q), gallery.row(j));
            // Strictly better, or equal with a lower index, ranks ahead.
            if s > true_score || (s == true_score && j < q) {
                ahead += 1;
            }
        }
        ahead
    };
    let mut hits_i2t = 0;
    let mut hits_t2i = 0;
    for q in 0..n {
        if rank_of_true(image_emb, text_emb, q) < k {
            hits_i2t += 1;
        }
        if rank_of_true(text_emb, image_emb, q) < k {
            hits_t2i += 1;
        }
    }
    Ok((hits_i2t as f64 / n as f64, hits_t2i as f64 / n as f64))
}

/// Accuracy of nearest-prototype classification by dot-product similarity.
/// Ties resolve to the lower class id.
pub fn zero_shot_accuracy(
    image_emb: &EmbeddingBatch,
    class_prototypes: &EmbeddingBatch,
    labels: &[usize],
) -> Result<f64> {
    if image_emb.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "zero_shot_accuracy",
            expected: format!("{} labels", image_emb.rows()),
            got: format!("{}", labels.len()),
        });
    }
    if image_emb.cols() != class_prototypes.cols() {
        return Err(Error::ShapeMismatch {
            context: "zero_shot_accuracy",
            expected: format!("prototype width {}", image_emb.cols()),
            got: format!("{}", class_prototypes.cols()),
        });
    }
    let n_classes = class_prototypes.rows();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidConfig(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    if image_emb.rows() == 0 {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let mut best_class = 0;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..n_classes {
            let s = dot(image_emb.row(i), class_prototypes.row(c));
            if s > best_score {
                best_score = s;
                best_class = c;
            }
        }
        if best_class == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean output-space L2 displacement between two encoders over probes.
pub fn drift_metric(
    encoder: &ToyEncoder,
    reference: &ToyEncoder,
    probe_inputs: &EmbeddingBatch,
) -> Result<f64> {
    let a = encoder.apply(probe_inputs)?;
    let b = reference.apply(probe_inputs)?;
    if !a.same_shape(&b) {
        return Err(Error::ShapeMismatch {
            context: "drift_metric",
            expected: format!("{}x{}", a.rows(), a.cols()),
            got: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    if a.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..a.rows() {
        let sq: f64 = a
            .row(i)
            .iter()
            .zip(b.row(i))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        total += sq.sqrt();
    }
    Ok(total / a.rows() as f64)
}

/// Which loss a gradient check targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpec {
    Instance,
    Structure,
    InfoNce,
    SelfDistillReg,
}

impl LossSpec {
    pub const ALL: [LossSpec; 4] = [
        LossSpec::Instance,
        LossSpec::Structure,
        LossSpec::InfoNce,
        LossSpec::SelfDistillReg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossSpec::Instance => "instance_alignment",
            LossSpec::Structure => "structure_alignment",
            LossSpec::InfoNce => "info_nce",
            LossSpec::SelfDistillReg => "self_distill_reg",
        }
    }
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub loss: &'static str,
    pub passed: bool,
    pub max_rel_err: f64,
    pub worst_coordinate: String,
    pub checked: usize,
    pub skipped: usize,
}

/// Distance below which a coordinate counts as sitting on an abs/norm kink
/// and is excluded from the finite-difference comparison.
const KINK_MARGIN: f64 = 1e-6;
/// Coordinates whose analytic and numeric gradients are both below this
/// magnitude compare with absolute instead of relative tolerance.
const ZERO_GRAD_ABS_TOL: f64 = 1e-8;

struct GradcheckInstance {
    student: EmbeddingBatch,
    teacher: EmbeddingBatch,
    log_tau: f64,
}

impl GradcheckInstance {
    fn evaluate(&self, spec: LossSpec) -> Result<LossValue> {
        match spec {
            LossSpec::Instance => instance_alignment_loss(&self.student, &self.teacher),
            LossSpec::Structure => structure_alignment_loss(&self.student, &self.teacher),
            LossSpec::InfoNce => info_nce_loss(&self.student, &self.teacher, self.log_tau),
            LossSpec::SelfDistillReg => self_distill_reg_loss(&self.student, &self.teacher),
        }
    }

    /// Rows of the trainable batch that sit within [`KINK_MARGIN`] of a
    /// non-differentiable point of `spec` at the current inputs.
    fn kinked_rows(&self, spec: LossSpec) -> Vec<bool> {
        let n = self.student.rows();
        let mut kinked = vec![false; n];
        let near_instance_kink = |i: usize| {
            let sq: f64 = self
                .student
                .row(i)
                .iter()
                .zip(self.teacher.row(i))
                .map(|(s, t)| (s - t) * (s - t))
                .sum();
            sq.sqrt() < KINK_MARGIN
        };
        let mark_pair_kinks = |kinked: &mut Vec<bool>| {
            let ds = crate::embedding::pairwise_euclidean(&self.student, NORM_SMOOTHING_EPS);
            let dt = crate::embedding::pairwise_euclidean(&self.teacher, NORM_SMOOTHING_EPS);
            for i in 0..n {
                for j in (i + 1)..n {
                    let tie = (ds.get(i, j) - dt.get(i, j)).abs() < KINK_MARGIN;
                    let coincident = ds.get(i, j) < KINK_MARGIN;
                    if tie || coincident {
                        kinked[i] = true;
                        kinked[j] = true;
                    }
                }
            }
        };
        match spec {
            LossSpec::Instance => {
                for (i, flag) in kinked.iter_mut().enumerate() {
                    *flag = near_instance_kink(i);
                }
            }
            LossSpec::Structure => mark_pair_kinks(&mut kinked),
            LossSpec::SelfDistillReg => {
                mark_pair_kinks(&mut kinked);
                for (i, flag) in kinked.iter_mut().enumerate() {
                    *flag = *flag || near_instance_kink(i);
                }
            }
            LossSpec::InfoNce => {}
        }
        kinked
    }
}

/// Central-difference gradient check of one loss on a random instance.
///
/// Every coordinate of the trainable inputs is perturbed by `+-h`; for
/// `InfoNce` both batches carry gradients and `log_tau` is checked too.
/// Coordinates on rows within `1e-6` of an abs/norm kink are skipped.
pub fn gradcheck(spec: LossSpec, seed: u64, h: f64, tol: f64) -> Result<GradcheckReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidConfig(format!(
            "gradcheck step h must lie in [1e-7, 1e-3], got {h}"
        )));
    }
    let mut rng = crate::seeds::rng(seed, crate::seeds::GRADCHECK);
    let rows = rng.random_range(2..=6);
    let cols = rng.random_range(2..=5);
    let mut random_batch = |rows: usize, cols: usize| {
        EmbeddingBatch::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.5..1.5))
                .collect::<Vec<f64>>(),
        )
        .unwrap()
    };
    let (student, teacher) = match spec {
        // Contrastive inputs should look like normalized embeddings.
        LossSpec::InfoNce => {
            let (s, _) = crate::embedding::l2_normalize(&random_batch(rows, cols), 1e-12);
            let (t, _) = crate::embedding::l2_normalize(&random_batch(rows, cols), 1e-12);
            (s, t)
        }
        _ => (random_batch(rows, cols), random_batch(rows, cols)),
    };
    let instance = GradcheckInstance {
        student,
        teacher,
        log_tau: losses::TAU_INIT.ln(),
    };

    let analytic = instance.evaluate(spec)?;
    let kinked = instance.kinked_rows(spec);

    let mut max_rel_err: f64 = 0.0;
    let mut worst = String::from("none");
    let mut checked = 0;
    let mut skipped = 0;

    let mut compare = |analytic_g: f64, numeric: f64, name: String| {
        checked += 1;
        if analytic_g.abs() < ZERO_GRAD_ABS_TOL && numeric.abs() < ZERO_GRAD_ABS_TOL {
            return;
        }
        let rel = (analytic_g - numeric).abs() / analytic_g.abs().max(numeric.abs());
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = name;
        }
    };

    // Trainable batch coordinates only: teacher/EMA batches are constants
    // of the distillation losses (stop-gradient), so they are not checked.
    // For InfoNce both batches carry gradients.
    let groups: &[&str] = match spec {
        LossSpec::InfoNce => &["image", "text"],
        _ => &["student"],
    };
    for &group in groups {
        let base = if group == "student" || group == "image" {
            &instance.student
        } else {
            &instance.teacher
        };
        for i in 0..base.rows() {
            if kinked[i] {
                skipped += base.cols();
                continue;
            }
            for j in 0..base.cols() {
                let mut plus = GradcheckInstance {
                    student: instance.student.clone(),
                    teacher: instance.teacher.clone(),
                    log_tau: instance.log_tau,
                };
                let mut minus = GradcheckInstance {
                    student: instance.student.clone(),
                    teacher: instance.teacher.clone(),
                    log_tau: instance.log_tau,
                };
                {
                    fn target<'a>(
                        inst: &'a mut GradcheckInstance,
                        first_group: bool,
                    ) -> &'a mut EmbeddingBatch {
                        if first_group {
                            &mut inst.student
                        } else {
                            &mut inst.teacher
                        }
                    }
                    let first = group == "student" || group == "image";
                    let p = target(&mut plus, first);
                    p.set(i, j, p.get(i, j) + h);
                    let m = target(&mut minus, first);
                    m.set(i, j, m.get(i, j) - h);
                }
                let numeric =
                    (plus.evaluate(spec)?.value - minus.evaluate(spec)?.value) / (2.0 * h);
                let key = match spec {
                    LossSpec::InfoNce => {
                        if group == "image" {
                            losses::GRAD_IMAGE
                        } else {
                            losses::GRAD_TEXT
                        }
                    }
                    _ => losses::GRAD_STUDENT,
                };
                compare(analytic.grads[key].get(i, j), numeric, format!("{group}[{i}][{j}]"));
            }
        }
    }

    if spec == LossSpec::InfoNce {
        let plus = GradcheckInstance {
            log_tau: instance.log_tau + h,
            student: instance.student.clone(),
            teacher: instance.teacher.clone(),
        };
        let minus = GradcheckInstance {
            log_tau: instance.log_tau - h,
            student: instance.student.clone(),
            teacher: instance.teacher.clone(),
        };
        let numeric = (plus.evaluate(spec)?.value - minus.evaluate(spec)?.value) / (2.0 * h);
        compare(
            analytic.log_tau_grad().unwrap_or(0.0),
            numeric,
            "log_tau".into(),
        );
    }

    Ok(GradcheckReport {
        loss: spec.name(),
        passed: max_rel_err < tol,
        max_rel_err,
        worst_coordinate: worst,
        checked,
        skipped,
    })
}
