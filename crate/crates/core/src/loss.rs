//! Classification and distillation losses.
//!
//! The distillation losses follow the temperature-softmax convention: with
//! teacher probabilities `q` (already softened at temperature `tau`) and
//! student probabilities `p = softmax(logits / tau)`, the single-teacher
//! loss is `tau^2 / N * sum q * (log q - log p)` and the multi-teacher loss
//! averages that KL term over teachers. `0 * log 0` counts as zero and `p`
//! is floored at 1e-12 inside the logarithm. Gradients flow only into the
//! student logits; teachers enter the tape as constants.

use crate::error::{Error, Result};
use crate::tape::{softmax_row, Tape, TensorId};

pub const PROB_FLOOR: f64 = 1e-12;

/// A batch of per-row probability distributions, validated on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch {
    rows: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbBatch {
    pub fn new(rows: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || classes == 0 || data.len() != rows * classes {
            return Err(Error::Shape(format!(
                "probability batch {rows}x{classes} does not match {} values",
                data.len()
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            if !((-1e-12..=1.0 + 1e-12).contains(&v)) {
                return Err(Error::Domain(format!("probability {v} at index {i} outside [0,1]")));
            }
        }
        for r in 0..rows {
            let sum: f64 = data[r * classes..][..classes].iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("row {r} sums to {sum}, not 1")));
            }
        }
        Ok(ProbBatch { rows, classes, data })
    }

    /// Softens a batch of logits into probabilities at temperature `tau`.
    pub fn from_logits(rows: usize, classes: usize, logits: &[f64], tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Param(format!("temperature must be > 0, got {tau}")));
        }
        if logits.len() != rows * classes || rows == 0 || classes == 0 {
            return Err(Error::Shape(format!(
                "logit batch {rows}x{classes} does not match {} values",
                logits.len()
            )));
        }
        let mut data = vec![0.0; logits.len()];
        for r in 0..rows {
            softmax_row(
                &logits[r * classes..][..classes],
                tau,
                &mut data[r * classes..][..classes],
            );
        }
        ProbBatch::new(rows, classes, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.classes..][..self.classes]
    }
}

/// Integer class labels with a declared class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    labels: Vec<usize>,
    classes: usize,
}

impl LabelBatch {
    pub fn new(labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() || classes == 0 {
            return Err(Error::Shape("empty label batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Param(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(LabelBatch { labels, classes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Mean negative log-likelihood of the labels under softmax at temperature 1.
pub fn cross_entropy(tape: &mut Tape, logits: TensorId, labels: &LabelBatch) -> Result<TensorId> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[1] != labels.classes() {
        return Err(Error::Shape(format!(
            "cross_entropy logits {shape:?} vs {} classes",
            labels.classes()
        )));
    }
    if shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "cross_entropy got {} labels for {} rows",
            labels.len(),
            shape[0]
        )));
    }
    tape.cross_entropy(logits, labels.labels())
}

/// Mean-KL distillation loss against `K` teachers:
/// `tau^2 / (K*N) * sum_k sum_n sum_m q_k * (log q_k - log p)`.
pub fn kd_loss_mean_kl(
    tape: &mut Tape,
    student_logits: TensorId,
    teachers: &[ProbBatch],
    tau: f64,
) -> Result<TensorId> {
    if teachers.is_empty() {
        return Err(Error::Param("distillation needs at least one teacher".into()));
    }
    let shape = tape.shape(student_logits).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("student logits must be [N,M], got {shape:?}")));
    }
    let (n, m) = (shape[0], shape[1]);
    for (k, t) in teachers.iter().enumerate() {
        if t.rows() != n || t.classes() != m {
            return Err(Error::Shape(format!(
                "teacher {k} is {}x{}, student logits are {n}x{m}",
                t.rows(),
                t.classes()
            )));
        }
    }

    // Teachers enter as one combined constant weight per logit entry, plus
    // the constant sum of q*log q terms (0*log 0 := 0).
    let kcount = teachers.len();
    let mut weights = vec![0.0; n * m];
    for t in teachers {
        for (w, &q) in weights.iter_mut().zip(t.data()) {
            *w += q;
        }
    }
    let mut q_log_q = 0.0;
    for t in teachers {
        for &q in t.data() {
            if q > 0.0 {
                q_log_q += q * q.ln();
            }
        }
    }

    let coef = tau * tau / (kcount as f64 * n as f64);
    let p = tape.softmax_temp(student_logits, tau)?;
    let p = tape.clamp_min(p, PROB_FLOOR)?;
    let log_p = tape.log(p)?;
    let w = tape.constant(vec![n, m], weights)?;
    let weighted = tape.mul(log_p, w)?;
    let total = tape.sum_all(weighted)?;
    tape.affine(total, -coef, coef * q_log_q)
}

/// Single-teacher distillation loss; the `K = 1` case of
/// [`kd_loss_mean_kl`], bit for bit.
pub fn kd_loss_single(
    tape: &mut Tape,
    student_logits: TensorId,
    teacher: &ProbBatch,
    tau: f64,
) -> Result<TensorId> {
    kd_loss_mean_kl(tape, student_logits, std::slice::from_ref(teacher), tau)
}

/// Elementwise mean of the teacher distributions.
pub fn ensemble_average_probs(teachers: &[ProbBatch]) -> Result<ProbBatch> {
    if teachers.is_empty() {
        return Err(Error::Param("ensemble average needs at least one member".into()));
    }
    let (n, m) = (teachers[0].rows(), teachers[0].classes());
    for (k, t) in teachers.iter().enumerate() {
        if t.rows() != n || t.classes() != m {
            return Err(Error::Shape(format!(
                "ensemble member {k} is {}x{}, expected {n}x{m}",
                t.rows(),
                t.classes()
            )));
        }
    }
    let kf = teachers.len() as f64;
    let mut data = vec![0.0; n * m];
    for t in teachers {
        for (d, &q) in data.iter_mut().zip(t.data()) {
            *d += q;
        }
    }
    for d in &mut data {
        *d /= kf;
    }
    ProbBatch::new(n, m, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ce_value(logits: Vec<f64>, n: usize, m: usize, labels: Vec<usize>) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(vec![n, m], logits).unwrap();
        let l = cross_entropy(&mut tape, x, &LabelBatch::new(labels, m).unwrap()).unwrap();
        tape.data(l)[0]
    }

    fn kd_value(logits: &[f64], n: usize, m: usize, teachers: &[ProbBatch], tau: f64) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(vec![n, m], logits.to_vec()).unwrap();
        let l = kd_loss_mean_kl(&mut tape, x, teachers, tau).unwrap();
        tape.data(l)[0]
    }

    #[test]
    fn cross_entropy_confident_correct_is_near_zero() {
        assert!(ce_value(vec![50.0, 0.0, 0.0], 1, 3, vec![0]) < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_is_log_m() {
        let v = ce_value(vec![0.0; 10], 1, 10, vec![7]);
        assert!((v - 10.0_f64.ln()).abs() <= 1e-12, "{v}");
        assert!((v - std::f64::consts::LN_10).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_frozen_value() {
        let v = ce_value(vec![1.0, 2.0, 3.0], 1, 3, vec![2]);
        assert!((v - 0.4076059644443803).abs() <= 1e-12, "{v}");
    }

    #[test]
    fn cross_entropy_rejects_class_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        let labels = LabelBatch::new(vec![0], 4).unwrap();
        assert!(cross_entropy(&mut tape, x, &labels).is_err());
    }

    #[test]
    fn label_batch_rejects_out_of_range() {
        assert!(LabelBatch::new(vec![0, 3], 3).is_err());
    }

    #[test]
    fn prob_batch_rejects_bad_rows() {
        assert!(ProbBatch::new(1, 2, vec![0.9, 0.3]).is_err());
        assert!(ProbBatch::new(1, 2, vec![1.2, -0.2]).is_err());
    }

    /// Teacher equal to the student's own distribution: loss is exactly 0.
    #[test]
    fn kd_single_zero_when_teacher_matches() {
        let logits = vec![0.4, -0.3, 1.1, 0.0, 0.0, 0.0];
        let teacher = ProbBatch::from_logits(2, 3, &logits, 1.0).unwrap();
        let v = kd_value(&logits, 2, 3, std::slice::from_ref(&teacher), 1.0);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn kd_single_frozen_value() {
        // Student logits whose softmax is [0.6, 0.4]; teacher [0.7, 0.3].
        let logits = vec![0.6_f64.ln(), 0.4_f64.ln()];
        let teacher = ProbBatch::new(1, 2, vec![0.7, 0.3]).unwrap();
        let v = kd_value(&logits, 1, 2, std::slice::from_ref(&teacher), 1.0);
        // 0.7*ln(0.7/0.6) + 0.3*ln(0.3/0.4)
        assert!((v - 0.021600854143546535).abs() <= 1e-9, "{v}");
    }

    #[test]
    fn kd_temperature_prefactor_is_exact() {
        let logits1 = vec![0.6_f64.ln(), 0.4_f64.ln()];
        let logits2: Vec<f64> = logits1.iter().map(|v| 2.0 * v).collect();
        let teacher = ProbBatch::new(1, 2, vec![0.7, 0.3]).unwrap();
        let v1 = kd_value(&logits1, 1, 2, std::slice::from_ref(&teacher), 1.0);
        let v2 = kd_value(&logits2, 1, 2, std::slice::from_ref(&teacher), 2.0);
        assert_eq!((4.0 * v1).to_bits(), v2.to_bits());
    }

    #[test]
    fn kd_mean_kl_frozen_two_teacher_value() {
        let logits = vec![0.6_f64.ln(), 0.4_f64.ln()];
        let t1 = ProbBatch::new(1, 2, vec![0.7, 0.3]).unwrap();
        let t2 = ProbBatch::new(1, 2, vec![0.5, 0.5]).unwrap();
        let v = kd_value(&logits, 1, 2, &[t1, t2], 1.0);
        assert!((v - 0.02100592570183705).abs() <= 1e-9, "{v}");
    }

    #[test]
    fn kd_mean_kl_with_one_teacher_is_bitwise_single() {
        let logits = vec![0.2, -0.8, 0.5, 1.4, 0.0, -0.4];
        let teacher = ProbBatch::from_logits(2, 3, &[0.1, 0.9, 0.3, -0.2, 0.4, 0.0], 2.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3], logits.clone()).unwrap();
        let a = kd_loss_single(&mut tape, x, &teacher, 2.0).unwrap();
        let b = kd_loss_mean_kl(&mut tape, x, std::slice::from_ref(&teacher), 2.0).unwrap();
        assert_eq!(tape.data(a)[0].to_bits(), tape.data(b)[0].to_bits());
    }

    #[test]
    fn kd_mean_kl_zero_when_all_teachers_match() {
        let logits = vec![0.4, -0.3, 1.1];
        let teacher = ProbBatch::from_logits(1, 3, &logits, 3.0).unwrap();
        let v = kd_value(&logits, 1, 3, &[teacher.clone(), teacher], 3.0);
        assert!(v.abs() <= 1e-12, "{v}");
    }

    #[test]
    fn kd_one_hot_teacher_matches_cross_entropy() {
        let mut rng = crate::rng::stream(21, "loss-onehot");
        for _ in 0..50 {
            let (n, m) = (4, 6);
            let logits: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-8.0..8.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
            let mut onehot = vec![0.0; n * m];
            for (r, &y) in labels.iter().enumerate() {
                onehot[r * m + y] = 1.0;
            }
            let teacher = ProbBatch::new(n, m, onehot).unwrap();
            let kd = kd_value(&logits, n, m, std::slice::from_ref(&teacher), 1.0);
            let ce = ce_value(logits, n, m, labels);
            assert!((kd - ce).abs() <= 1e-12, "kd {kd} vs ce {ce}");
        }
    }

    #[test]
    fn kd_losses_are_non_negative() {
        let mut rng = crate::rng::stream(22, "loss-nonneg");
        for _ in 0..100 {
            let (n, m) = (3, 5);
            let logits: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let tlogits: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let tau = rng.gen_range(0.5..8.0);
            let teacher = ProbBatch::from_logits(n, m, &tlogits, tau).unwrap();
            let v = kd_value(&logits, n, m, std::slice::from_ref(&teacher), tau);
            assert!(v >= 0.0, "{v}");
        }
    }

    /// Jensen: averaging KL over teachers upper-bounds KL from the averaged
    /// teacher distribution.
    #[test]
    fn kd_mean_kl_dominates_average_prob_kl() {
        let mut rng = crate::rng::stream(23, "loss-jensen");
        for _ in 0..50 {
            let (n, m) = (2, 4);
            let logits: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let teachers: Vec<ProbBatch> = (0..3)
                .map(|_| {
                    let t: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-4.0..4.0)).collect();
                    ProbBatch::from_logits(n, m, &t, 2.0).unwrap()
                })
                .collect();
            let mean_kl = kd_value(&logits, n, m, &teachers, 2.0);
            let avg = ensemble_average_probs(&teachers).unwrap();
            let avg_kl = kd_value(&logits, n, m, std::slice::from_ref(&avg), 2.0);
            assert!(mean_kl >= avg_kl - 1e-12, "{mean_kl} < {avg_kl}");
        }
    }

    #[test]
    fn kd_gradient_matches_finite_differences_and_skips_teachers() {
        let logits0 = vec![0.4, -0.2, 0.9, -1.3, 0.6, 0.1];
        let teacher = ProbBatch::from_logits(2, 3, &[1.0, 0.2, -0.5, 0.3, 0.3, 0.3], 4.0).unwrap();

        let value = |l: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let x = tape.constant(vec![2, 3], l.to_vec()).unwrap();
            let loss = kd_loss_single(&mut tape, x, &teacher, 4.0).unwrap();
            tape.data(loss)[0]
        };

        let mut tape = Tape::new();
        let x = tape.variable(vec![2, 3], logits0.clone()).unwrap();
        let loss = kd_loss_single(&mut tape, x, &teacher, 4.0).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().to_vec();

        let eps = 1e-5;
        let mut work = logits0.clone();
        for i in 0..work.len() {
            work[i] = logits0[i] + eps;
            let up = value(&work);
            work[i] = logits0[i] - eps;
            let down = value(&work);
            work[i] = logits0[i];
            let numeric = (up - down) / (2.0 * eps);
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-3);
            assert!((analytic[i] - numeric).abs() <= 1e-4 * scale);
        }
    }

    #[test]
    fn ensemble_average_examples() {
        let q = ProbBatch::new(1, 2, vec![0.25, 0.75]).unwrap();
        let same = ensemble_average_probs(std::slice::from_ref(&q)).unwrap();
        assert_eq!(same.data(), q.data());

        let a = ProbBatch::new(1, 2, vec![1.0, 0.0]).unwrap();
        let b = ProbBatch::new(1, 2, vec![0.0, 1.0]).unwrap();
        let avg = ensemble_average_probs(&[a, b]).unwrap();
        assert_eq!(avg.data(), &[0.5, 0.5]);
    }

    #[test]
    fn ensemble_average_rejects_mismatched_members() {
        let a = ProbBatch::new(1, 2, vec![0.5, 0.5]).unwrap();
        let b = ProbBatch::new(1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        assert!(ensemble_average_probs(&[a, b]).is_err());
    }
}
