//! Cross-entropy, temperature-scaled KL distillation and cosine losses,
//! their weighted composite, and the exact gradient of the composite with
//! respect to student logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_tau, softmax_values, Logits, ProbDist};

/// Floor applied to probabilities inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Loss weights `(alpha, beta, gamma)` for CE, KD and COS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTriple {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl WeightTriple {
    pub const CE_ONLY: WeightTriple = WeightTriple::new(1.0, 0.0, 0.0);
    pub const UNIFORM: WeightTriple = WeightTriple::new(1.0, 1.0, 1.0);
    pub const SOFT_ONLY: WeightTriple = WeightTriple::new(0.0, 1.0, 1.0);
    /// Stage-one default.
    pub const BALANCED: WeightTriple = WeightTriple::new(0.33, 0.33, 0.34);

    pub const fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        WeightTriple { alpha, beta, gamma }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "loss weights must be finite and non-negative, got {self}"
            )));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidParameter("loss weights are all zero".into()));
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.beta > 0.0 || self.gamma > 0.0
    }
}

impl std::fmt::Display for WeightTriple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.alpha, self.beta, self.gamma)
    }
}

impl std::str::FromStr for WeightTriple {
    type Err = Error;

    /// Parses `a,b,c`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidParameter(format!("weights {s:?}: expected a,b,c")))?;
        match parts[..] {
            [a, b, c] => {
                let w = WeightTriple::new(a, b, c);
                w.validate()?;
                Ok(w)
            }
            _ => Err(Error::InvalidParameter(format!(
                "weights {s:?}: expected three comma-separated values"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd: f64,
    pub cos: f64,
    pub total: f64,
}

fn check_label(y: usize, num_classes: usize) -> Result<()> {
    if y >= num_classes {
        return Err(Error::InvalidInput(format!(
            "label {y} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

fn check_same_len(a: &ProbDist, b: &ProbDist) -> Result<()> {
    if a.num_classes() != b.num_classes() {
        return Err(Error::InvalidInput(format!(
            "distribution lengths differ: {} vs {}",
            a.num_classes(),
            b.num_classes()
        )));
    }
    Ok(())
}

/// `-ln p_s(y)`.
pub fn ce_loss(p_s: &ProbDist, y: usize) -> Result<f64> {
    check_label(y, p_s.num_classes())?;
    Ok(ce_value(p_s.probs(), y))
}

fn ce_value(p_s: &[f64], y: usize) -> f64 {
    -p_s[y].max(PROB_FLOOR).ln()
}

/// `tau^2 * KL(p_t || p_s)`. Both distributions are expected at temperature `tau`.
pub fn kd_loss(p_t: &ProbDist, p_s: &ProbDist, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    check_same_len(p_t, p_s)?;
    Ok(kd_value(p_t.probs(), p_s.probs(), tau))
}

fn kd_value(p_t: &[f64], p_s: &[f64], tau: f64) -> f64 {
    let kl: f64 = p_t
        .iter()
        .zip(p_s)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, s)| t * (t.ln() - s.max(PROB_FLOOR).ln()))
        .sum();
    // Rounding can leave a tiny negative sum for identical inputs.
    tau * tau * kl.max(0.0)
}

/// `1 - cos(p_s, p_t)`.
pub fn cos_loss(p_s: &ProbDist, p_t: &ProbDist) -> Result<f64> {
    check_same_len(p_s, p_t)?;
    Ok(cos_value(p_s.probs(), p_t.probs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos_value(p_s: &[f64], p_t: &[f64]) -> f64 {
    let denom = dot(p_s, p_s).sqrt() * dot(p_t, p_t).sqrt();
    (1.0 - dot(p_s, p_t) / denom).max(0.0)
}

fn check_composite(
    num_classes: usize,
    y: usize,
    p_t: Option<&ProbDist>,
    w: &WeightTriple,
    tau: f64,
) -> Result<()> {
    check_tau(tau)?;
    check_label(y, num_classes)?;
    match p_t {
        None if w.needs_teacher() => Err(Error::Config(format!(
            "teacher distribution required for weights {w}"
        ))),
        Some(t) if t.num_classes() != num_classes => Err(Error::InvalidInput(format!(
            "teacher has {} classes, student has {num_classes}",
            t.num_classes()
        ))),
        _ => Ok(()),
    }
}

/// Weighted `alpha * CE + beta * KD + gamma * COS`.
///
/// Terms whose weight is zero are still reported when a teacher is present;
/// without a teacher they are 0.
pub fn composite_loss(
    p_s: &ProbDist,
    y: usize,
    p_t: Option<&ProbDist>,
    w: &WeightTriple,
    tau: f64,
) -> Result<LossBreakdown> {
    check_composite(p_s.num_classes(), y, p_t, w, tau)?;
    Ok(breakdown(p_s.probs(), y, p_t.map(ProbDist::probs), w, tau))
}

fn breakdown(p_s: &[f64], y: usize, p_t: Option<&[f64]>, w: &WeightTriple, tau: f64) -> LossBreakdown {
    let ce = ce_value(p_s, y);
    let (kd, cos) = match p_t {
        Some(t) => (kd_value(t, p_s, tau), cos_value(p_s, t)),
        None => (0.0, 0.0),
    };
    LossBreakdown {
        ce,
        kd,
        cos,
        total: w.alpha * ce + w.beta * kd + w.gamma * cos,
    }
}

/// Gradient of `composite_loss(softmax(z / tau), ...).total` with respect to `z`.
pub fn composite_loss_grad(
    logits_s: &Logits,
    y: usize,
    p_t: Option<&ProbDist>,
    w: &WeightTriple,
    tau: f64,
) -> Result<Vec<f64>> {
    composite_loss_and_grad(logits_s, y, p_t, w, tau).map(|(_, g)| g)
}

/// Loss breakdown and logit gradient in one pass.
pub fn composite_loss_and_grad(
    logits_s: &Logits,
    y: usize,
    p_t: Option<&ProbDist>,
    w: &WeightTriple,
    tau: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let z = logits_s.values();
    check_composite(z.len(), y, p_t, w, tau)?;
    let p = softmax_values(z, tau);
    let t = p_t.map(ProbDist::probs);
    let loss = breakdown(&p, y, t, w, tau);
    let mut grad = vec![0.0; z.len()];

    // CE and KD gradients are those of the unclamped log-softmax forms; the
    // probability floor only guards the reported loss values. A confidently
    // wrong sample therefore still gets a full-strength gradient.
    if w.alpha != 0.0 {
        // d(-ln p_y)/dz = (p - onehot(y)) / tau
        let scale = w.alpha / tau;
        for (k, g) in grad.iter_mut().enumerate() {
            let onehot = if k == y { 1.0 } else { 0.0 };
            *g += scale * (p[k] - onehot);
        }
    }
    if let Some(t) = t {
        if w.beta != 0.0 {
            // d(tau^2 KL(t || softmax(z/tau)))/dz = tau * (p * sum(t) - t)
            let mass: f64 = t.iter().sum();
            let scale = w.beta * tau;
            for (k, g) in grad.iter_mut().enumerate() {
                *g += scale * (p[k] * mass - t[k]);
            }
        }
        if w.gamma != 0.0 && loss.cos > 0.0 {
            // dL/dp = -(t / (|p||t|) - (p.t) p / (|p|^3 |t|))
            let np = dot(&p, &p).sqrt();
            let nt = dot(t, t).sqrt();
            let pt = dot(&p, t);
            let dp: Vec<f64> = p
                .iter()
                .zip(t)
                .map(|(pk, tk)| -(tk / (np * nt) - pt * pk / (np * np * np * nt)))
                .collect();
            softmax_vjp_add(&p, &dp, w.gamma / tau, &mut grad);
        }
    }
    Ok((loss, grad))
}

/// `out += scale * J_softmax^T * dp`, with `J = diag(p) - p p^T`.
fn softmax_vjp_add(p: &[f64], dp: &[f64], scale: f64, out: &mut [f64]) {
    let inner = dot(p, dp);
    for ((o, pk), dk) in out.iter_mut().zip(p).zip(dp) {
        *o += scale * pk * (dk - inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::softmax_temp;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pd(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ce_examples() {
        assert_abs_diff_eq!(ce_loss(&pd(&[1.0, 0.0]), 0).unwrap(), 0.0);
        assert_abs_diff_eq!(ce_loss(&pd(&[0.5, 0.5]), 1).unwrap(), 0.693147, epsilon = 1e-6);
        assert_abs_diff_eq!(ce_loss(&pd(&[0.9, 0.1]), 1).unwrap(), 2.302585, epsilon = 1e-6);
        assert!(ce_loss(&pd(&[0.9, 0.1]), 2).is_err());
        // clamped, not infinite
        assert_abs_diff_eq!(ce_loss(&pd(&[1.0, 0.0]), 1).unwrap(), -(1e-12f64).ln());
    }

    #[test]
    fn kd_examples() {
        let p = pd(&[0.2, 0.3, 0.5]);
        assert_eq!(kd_loss(&p, &p, 3.0).unwrap(), 0.0);
        let oracle = 4.0 * (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln());
        let got = kd_loss(&pd(&[0.75, 0.25]), &pd(&[0.5, 0.5]), 2.0).unwrap();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 0.523248, epsilon = 1e-6);
        let got = kd_loss(&pd(&[1.0, 0.0]), &pd(&[0.5, 0.5]), 1.0).unwrap();
        assert_abs_diff_eq!(got, 0.693147, epsilon = 1e-6);
        assert!(kd_loss(&pd(&[1.0, 0.0]), &pd(&[0.5, 0.25, 0.25]), 1.0).is_err());
    }

    #[test]
    fn cos_examples() {
        let p = pd(&[0.1, 0.6, 0.3]);
        assert_abs_diff_eq!(cos_loss(&p, &p).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cos_loss(&pd(&[1.0, 0.0]), &pd(&[0.0, 1.0])).unwrap(), 1.0);
        let oracle = 1.0 - (0.8 * 0.2 + 0.2 * 0.8) / (0.8f64 * 0.8 + 0.2 * 0.2);
        let got = cos_loss(&pd(&[0.8, 0.2]), &pd(&[0.2, 0.8])).unwrap();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 0.529412, epsilon = 1e-6);
    }

    #[test]
    fn composite_examples() {
        let ln2 = 2f64.ln();
        let b = composite_loss(&pd(&[0.5, 0.5]), 0, None, &WeightTriple::CE_ONLY, 1.0).unwrap();
        assert_abs_diff_eq!(b.total, ln2, epsilon = 1e-12);
        assert_eq!((b.kd, b.cos), (0.0, 0.0));

        let p = pd(&[1.0, 0.0, 0.0]);
        let b = composite_loss(&p, 0, Some(&p), &WeightTriple::BALANCED, 1.0).unwrap();
        assert_abs_diff_eq!(b.total, 0.0, epsilon = 1e-15);

        let (s, t) = (pd(&[0.5, 0.5]), pd(&[0.75, 0.25]));
        let b = composite_loss(&s, 0, Some(&t), &WeightTriple::UNIFORM, 1.0).unwrap();
        let kd = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        let cos = 1.0 - (0.5 * 0.75 + 0.5 * 0.25) / (0.5f64.sqrt() * 0.625f64.sqrt());
        assert_abs_diff_eq!(b.ce, ln2, epsilon = 1e-12);
        assert_abs_diff_eq!(b.kd, kd, epsilon = 1e-12);
        assert_abs_diff_eq!(b.cos, cos, epsilon = 1e-12);
        assert_abs_diff_eq!(b.total, ln2 + kd + cos, epsilon = 1e-12);
        assert_abs_diff_eq!(b.kd, 0.130812, epsilon = 1e-6);
        assert_abs_diff_eq!(b.cos, 0.105573, epsilon = 1e-6);
        assert_abs_diff_eq!(b.total, 0.929532, epsilon = 1e-6);
    }

    #[test]
    fn composite_requires_teacher_for_soft_terms() {
        let s = pd(&[0.5, 0.5]);
        let err = composite_loss(&s, 0, None, &WeightTriple::BALANCED, 1.0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let z = Logits::new(vec![0.0, 0.0]).unwrap();
        assert!(composite_loss_grad(&z, 0, None, &WeightTriple::SOFT_ONLY, 1.0).is_err());
    }

    #[test]
    fn ce_gradient_is_p_minus_onehot() {
        let z = Logits::new(vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let p = softmax_temp(&z, 1.0).unwrap();
        let g = composite_loss_grad(&z, 2, None, &WeightTriple::CE_ONLY, 1.0).unwrap();
        for (k, gk) in g.iter().enumerate() {
            let expected = p.probs()[k] - if k == 2 { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(*gk, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn kd_gradient_vanishes_at_teacher() {
        let z = Logits::new(vec![0.3, -1.0, 2.0]).unwrap();
        for tau in [0.5, 1.0, 2.0] {
            let p = softmax_temp(&z, tau).unwrap();
            let g = composite_loss_grad(&z, 0, Some(&p), &WeightTriple::new(0.0, 1.0, 0.0), tau)
                .unwrap();
            assert!(g.iter().all(|v| v.abs() < 1e-15), "{g:?}");
        }
    }

    fn fd_grad(z: &[f64], y: usize, t: &ProbDist, w: &WeightTriple, tau: f64) -> Vec<f64> {
        let h = 1e-5;
        (0..z.len())
            .map(|k| {
                let eval = |delta: f64| {
                    let mut zz = z.to_vec();
                    zz[k] += delta;
                    let p = softmax_temp(&Logits::new(zz).unwrap(), tau).unwrap();
                    composite_loss(&p, y, Some(t), w, tau).unwrap().total
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn logit_gradient_matches_finite_differences(
            z in prop::collection::vec(-3.0f64..3.0, 4..8),
            t_raw in prop::collection::vec(0.05f64..1.0, 8),
            y_raw in 0usize..8,
            w in (0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0),
            tau in prop::sample::select(vec![0.5, 1.0, 2.0]),
        ) {
            let c = z.len();
            let y = y_raw % c;
            let sum: f64 = t_raw[..c].iter().sum();
            let t = ProbDist::new(t_raw[..c].iter().map(|v| v / sum).collect()).unwrap();
            let w = WeightTriple::new(w.0, w.1, w.2);
            let logits = Logits::new(z.clone()).unwrap();
            let g = composite_loss_grad(&logits, y, Some(&t), &w, tau).unwrap();
            let fd = fd_grad(&z, y, &t, &w, tau);
            for (a, n) in g.iter().zip(&fd) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-2);
                prop_assert!(rel < 1e-6, "analytic {} vs fd {}", a, n);
            }
        }

        #[test]
        fn kd_is_nonnegative(
            a in prop::collection::vec(0.01f64..1.0, 5),
            b in prop::collection::vec(0.01f64..1.0, 5),
            tau in 0.1f64..5.0,
        ) {
            let norm = |v: &[f64]| {
                let s: f64 = v.iter().sum();
                ProbDist::new(v.iter().map(|x| x / s).collect()).unwrap()
            };
            prop_assert!(kd_loss(&norm(&a), &norm(&b), tau).unwrap() >= 0.0);
            let c = cos_loss(&norm(&a), &norm(&b)).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
        }

        #[test]
        fn composite_is_linear_in_weights(
            s in prop::collection::vec(0.01f64..1.0, 4),
            t in prop::collection::vec(0.01f64..1.0, 4),
            scale in 0.0f64..10.0,
        ) {
            let norm = |v: &[f64]| {
                let sum: f64 = v.iter().sum();
                ProbDist::new(v.iter().map(|x| x / sum).collect()).unwrap()
            };
            let (s, t) = (norm(&s), norm(&t));
            let w = WeightTriple::new(0.2, 0.5, 0.3);
            let ws = WeightTriple::new(0.2 * scale, 0.5 * scale, 0.3 * scale);
            let a = composite_loss(&s, 1, Some(&t), &w, 1.5).unwrap();
            let b = composite_loss(&s, 1, Some(&t), &ws, 1.5).unwrap();
            prop_assert_eq!((a.ce, a.kd, a.cos), (b.ce, b.kd, b.cos));
            prop_assert!((b.total - scale * a.total).abs() <= 1e-9 * (1.0 + b.total.abs()));
        }
    }

    #[test]
    fn weight_parsing() {
        assert_eq!("1,0,0".parse::<WeightTriple>().unwrap(), WeightTriple::CE_ONLY);
        assert!("1,0".parse::<WeightTriple>().is_err());
        assert!("0,0,0".parse::<WeightTriple>().is_err());
        assert!("-1,1,1".parse::<WeightTriple>().is_err());
    }
}
