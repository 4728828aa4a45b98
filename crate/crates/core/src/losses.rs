//! Loss components for mutual distillation: cross-entropy, temperature KD,
//! negative (non-target) knowledge distillation and the InfoNCE contrastive
//! loss. Each returns its value together with the analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_softmax_temp, softmax_temp_into, Matrix};

/// Probability floor applied before every logarithm inside NKD.
pub const NKD_PROB_FLOOR: f64 = 1e-12;

/// Norm floor for cosine similarity inside the training objective.
pub const COSINE_NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub gamma: f64,
    pub enable_nkd: bool,
    pub enable_ctl: bool,
    pub kd_weight: f64,
    pub nkd_weight: f64,
    pub ctl_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.8,
            gamma: 0.9,
            enable_nkd: true,
            enable_ctl: true,
            kd_weight: 1.0,
            nkd_weight: 1.0,
            ctl_weight: 1.0,
        }
    }
}

impl LossConfig {
    /// CE + KD only.
    pub fn base(self) -> Self {
        Self {
            enable_nkd: false,
            enable_ctl: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            errs.push(format!("tau must be > 0, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            errs.push(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        for (name, w) in [
            ("kd_weight", self.kd_weight),
            ("nkd_weight", self.nkd_weight),
            ("ctl_weight", self.ctl_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                errs.push(format!("{name} must be >= 0, got {w}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("temperature must be positive, got {tau}")))
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label < classes {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "label {label} out of range for {classes} classes"
        )))
    }
}

fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let mut p = vec![0.0; logits.len()];
    softmax_temp_into(logits, tau, &mut p);
    p
}

/// `−log softmax(z)[label]` and its gradient `softmax(z) − onehot(label)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::domain("cross-entropy of empty logits"));
    }
    check_label(label, logits.len())?;
    let value = -log_softmax_temp(logits, 1.0)[label];
    let mut grad = softmax(logits, 1.0);
    grad[label] -= 1.0;
    Ok((value, grad))
}

/// `τ²·KL(p_ref ‖ p_learner)` at temperature `τ`, with the gradient taken
/// with respect to the learner's logits only. The teacher's update calls this
/// with the student as reference and vice versa.
pub fn kd_loss(learner_logits: &[f64], reference_logits: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    check_tau(tau)?;
    if learner_logits.len() != reference_logits.len() || learner_logits.is_empty() {
        return Err(Error::shape(
            "kd_loss",
            format!("{} logits", reference_logits.len()),
            learner_logits.len(),
        ));
    }
    let log_p = log_softmax_temp(learner_logits, tau);
    let log_r = log_softmax_temp(reference_logits, tau);
    let p = softmax(learner_logits, tau);
    let r = softmax(reference_logits, tau);
    let mut kl = 0.0;
    for c in 0..r.len() {
        if r[c] > 0.0 {
            kl += r[c] * (log_r[c] - log_p[c]);
        }
    }
    let grad = p.iter().zip(&r).map(|(pi, ri)| tau * (pi - ri)).collect();
    Ok((tau * tau * kl, grad))
}

/// Negative knowledge distillation:
///
/// `−(1−γ)·p_T[t]·log p_S[t] − γ·τ²·Σ_{c≠t} N(p_T)[c]·log N(p_S)[c]`
///
/// where `N(p)[c] = p[c] / Σ_{k≠t} p[k]`. The teacher distribution is a
/// constant; the gradient is with respect to the student logits.
pub fn nkd_loss(
    student_logits: &[f64],
    teacher_logits: &[f64],
    target: usize,
    tau: f64,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    check_tau(tau)?;
    let c = student_logits.len();
    if teacher_logits.len() != c {
        return Err(Error::shape(
            "nkd_loss",
            format!("{c} teacher logits"),
            teacher_logits.len(),
        ));
    }
    if c < 2 {
        return Err(Error::domain(
            "nkd_loss needs at least 2 classes (non-target set is empty)",
        ));
    }
    check_label(target, c)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::domain(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let log_floor = NKD_PROB_FLOOR.ln();

    let p_s = softmax(student_logits, tau);
    let p_t = softmax(teacher_logits, tau);
    let log_ps_target = log_softmax_temp(student_logits, tau)[target];

    let mut grad = vec![0.0; c];

    // Target term.
    let pt_target = p_t[target];
    let target_floored = log_ps_target < log_floor;
    let target_log = log_ps_target.max(log_floor);
    if !target_floored {
        for j in 0..c {
            let delta = if j == target { 1.0 } else { 0.0 };
            grad[j] += -(1.0 - gamma) * pt_target * (delta - p_s[j]) / tau;
        }
    }

    // Non-target term, via softmax restricted to the non-target logits.
    let others: Vec<usize> = (0..c).filter(|&k| k != target).collect();
    let restrict = |z: &[f64]| others.iter().map(|&k| z[k]).collect::<Vec<_>>();
    let zs = restrict(student_logits);
    let zt = restrict(teacher_logits);
    let log_ns = log_softmax_temp(&zs, tau);
    let ns = softmax(&zs, tau);
    let nt = softmax(&zt, tau);

    let mut cross = 0.0;
    let mut unfloored_mass = 0.0;
    for i in 0..others.len() {
        cross += nt[i] * log_ns[i].max(log_floor);
        if log_ns[i] >= log_floor {
            unfloored_mass += nt[i];
        }
    }
    for (i, &k) in others.iter().enumerate() {
        let q = if log_ns[i] >= log_floor { nt[i] } else { 0.0 };
        grad[k] += -gamma * tau * (q - ns[i] * unfloored_mass);
    }

    let value = -(1.0 - gamma) * pt_target * target_log - gamma * tau * tau * cross;
    Ok((value, grad))
}

#[derive(Debug, Clone)]
pub struct CtlOutput {
    pub value: f64,
    pub grad_teacher: Matrix,
    pub grad_student: Matrix,
}

/// InfoNCE between teacher anchors and student candidates:
///
/// `(1/B)·Σ_i −log[ exp(cos(h_T,i, h_S,i)/τ) / Σ_j exp(cos(h_T,i, h_S,j)/τ) ]`
///
/// Rows of the two `B × d` matrices are paired by index. Zero-norm feature
/// vectors are rejected.
pub fn ctl_loss(teacher_feats: &Matrix, student_feats: &Matrix, tau: f64) -> Result<CtlOutput> {
    for (who, m) in [("teacher", teacher_feats), ("student", student_feats)] {
        for i in 0..m.rows() {
            if m.row(i).iter().all(|&v| v == 0.0) {
                return Err(Error::domain(format!("{who} feature vector {i} has zero norm")));
            }
        }
    }
    ctl_loss_floored(teacher_feats, student_feats, tau, 0.0)
}

/// [`ctl_loss`] with vector norms clamped below at `norm_floor`, so that
/// all-zero (dead ReLU) features contribute a finite value.
pub fn ctl_loss_floored(
    teacher_feats: &Matrix,
    student_feats: &Matrix,
    tau: f64,
    norm_floor: f64,
) -> Result<CtlOutput> {
    check_tau(tau)?;
    let (b, d) = (teacher_feats.rows(), teacher_feats.cols());
    if student_feats.rows() != b || student_feats.cols() != d {
        return Err(Error::shape(
            "ctl_loss",
            format!("{b}x{d}"),
            format!("{}x{}", student_feats.rows(), student_feats.cols()),
        ));
    }
    if b < 2 {
        return Err(Error::domain(format!("ctl_loss needs a batch of at least 2, got {b}")));
    }
    let norms = |m: &Matrix| -> Vec<f64> {
        (0..b)
            .map(|i| m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    };
    let raw_t = norms(teacher_feats);
    let raw_s = norms(student_feats);
    let nt: Vec<f64> = raw_t.iter().map(|&n| n.max(norm_floor)).collect();
    let ns: Vec<f64> = raw_s.iter().map(|&n| n.max(norm_floor)).collect();

    let dot = |i: usize, j: usize| -> f64 {
        teacher_feats
            .row(i)
            .iter()
            .zip(student_feats.row(j))
            .map(|(a, b)| a * b)
            .sum()
    };
    let sim = Matrix::from_fn(b, b, |i, j| dot(i, j) / (nt[i] * ns[j]));

    let mut value = 0.0;
    // dL/ds_ij.
    let mut dsim = Matrix::zeros(b, b);
    for i in 0..b {
        let row = sim.row(i);
        let log_p = log_softmax_temp(row, tau);
        value -= log_p[i];
        let p = softmax(row, tau);
        for j in 0..b {
            let delta = if i == j { 1.0 } else { 0.0 };
            dsim.set(i, j, (p[j] - delta) / (tau * b as f64));
        }
    }
    value /= b as f64;

    let mut grad_t = Matrix::zeros(b, d);
    let mut grad_s = Matrix::zeros(b, d);
    for i in 0..b {
        for j in 0..b {
            let g = dsim.get(i, j);
            if g == 0.0 {
                continue;
            }
            let s = sim.get(i, j);
            let inv = 1.0 / (nt[i] * ns[j]);
            // Norm terms vanish where the floor is active.
            let t_norm = if raw_t[i] > norm_floor {
                s / (raw_t[i] * nt[i])
            } else {
                0.0
            };
            let s_norm = if raw_s[j] > norm_floor {
                s / (raw_s[j] * ns[j])
            } else {
                0.0
            };
            let (ti, sj) = (teacher_feats.row(i), student_feats.row(j));
            let gt = grad_t.row_mut(i);
            for k in 0..d {
                gt[k] += g * (sj[k] * inv - t_norm * ti[k]);
            }
            let gs = grad_s.row_mut(j);
            for k in 0..d {
                gs[k] += g * (ti[k] * inv - s_norm * sj[k]);
            }
        }
    }
    Ok(CtlOutput {
        value,
        grad_teacher: grad_t,
        grad_student: grad_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

/// Unweighted batch means of each component.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub ce: f64,
    pub kd: f64,
    pub nkd: f64,
    pub ctl: f64,
}

#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub value: f64,
    pub components: LossComponents,
    /// `B × C`, gradient with respect to the own model's logits.
    pub grad_logits: Matrix,
    /// `B × d`, gradient with respect to the own model's features; `None`
    /// when the contrastive term is off.
    pub grad_features: Option<Matrix>,
}

/// Batch-mean objective of one side of the mutual distillation:
///
/// `CE + kd_w·KD + nkd_w·NKD·[enable_nkd] + ctl_w·CTL·[enable_ctl]`
///
/// The peer's logits are the constant reference for KD and NKD. CTL always
/// uses teacher features as anchors (rows `i`) and student features as the
/// candidates, and only the own side's feature gradient is returned. CTL is
/// skipped for batches of a single sample.
pub fn combined_loss(
    role: Role,
    own_logits: &Matrix,
    peer_logits: &Matrix,
    own_feats: &Matrix,
    peer_feats: &Matrix,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    cfg.validate()?;
    let (b, c) = (own_logits.rows(), own_logits.cols());
    if labels.len() != b || peer_logits.rows() != b || peer_logits.cols() != c {
        return Err(Error::shape(
            "combined_loss",
            format!("{b} labels and {b}x{c} peer logits"),
            format!(
                "{} labels, {}x{} peer logits",
                labels.len(),
                peer_logits.rows(),
                peer_logits.cols()
            ),
        ));
    }
    let inv_b = 1.0 / b as f64;
    let mut comp = LossComponents::default();
    let mut grad_logits = Matrix::zeros(b, c);

    for s in 0..b {
        let own = own_logits.row(s);
        let peer = peer_logits.row(s);
        let (ce, g_ce) = cross_entropy(own, labels[s])?;
        let (kd, g_kd) = kd_loss(own, peer, cfg.tau)?;
        comp.ce += ce * inv_b;
        comp.kd += kd * inv_b;
        let row = grad_logits.row_mut(s);
        for j in 0..c {
            row[j] += (g_ce[j] + cfg.kd_weight * g_kd[j]) * inv_b;
        }
        if cfg.enable_nkd {
            let (nkd, g_nkd) = nkd_loss(own, peer, labels[s], cfg.tau, cfg.gamma)?;
            comp.nkd += nkd * inv_b;
            for j in 0..c {
                row[j] += cfg.nkd_weight * g_nkd[j] * inv_b;
            }
        }
    }

    let mut grad_features = None;
    if cfg.enable_ctl && b >= 2 {
        let (anchors, candidates) = match role {
            Role::Teacher => (own_feats, peer_feats),
            Role::Student => (peer_feats, own_feats),
        };
        let out = ctl_loss_floored(anchors, candidates, cfg.tau, COSINE_NORM_FLOOR)?;
        comp.ctl = out.value;
        let mut g = match role {
            Role::Teacher => out.grad_teacher,
            Role::Student => out.grad_student,
        };
        g.scale(cfg.ctl_weight);
        grad_features = Some(g);
    }

    let mut value = comp.ce + cfg.kd_weight * comp.kd;
    if cfg.enable_nkd {
        value += cfg.nkd_weight * comp.nkd;
    }
    if cfg.enable_ctl && b >= 2 {
        value += cfg.ctl_weight * comp.ctl;
    }
    Ok(CombinedLoss {
        value,
        components: comp,
        grad_logits,
        grad_features,
    })
}
