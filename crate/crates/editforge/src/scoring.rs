//! Closed-form scoring: benchmark geometric mean, the VIEScore per-sample
//! combinator, alignment accuracy, facial cosine consistency, and the
//! D²PO loss with analytic gradients.
//!
//! All functions are pure and full precision; rounding happens only at
//! reporting boundaries.
//!
//! ```
//! use editforge::model::MetricVector;
//! use editforge::scoring::geometric_score;
//! use editforge::taxonomy::Metric;
//!
//! let metrics = [Metric::If, Metric::Nc, Metric::Vq, Metric::Ra];
//! let v = MetricVector {
//!     if_score: Some(9.0), nc_score: Some(7.0),
//!     vq_score: Some(8.0), ra_score: Some(8.0),
//! };
//! let s = geometric_score(&v, &metrics).unwrap();
//! assert!((s - 7.968565207460511).abs() < 1e-12);
//!
//! // a zero in any applicable dimension annihilates the score
//! let zeroed = MetricVector { nc_score: Some(0.0), ..v };
//! assert_eq!(geometric_score(&zeroed, &metrics).unwrap(), 0.0);
//! ```

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::model::{AtomicTask, MetricVector, PreferencePair};
use crate::taxonomy::Metric;

#[derive(Debug, thiserror::Error)]
pub enum ScoringError {
    #[error("metric {0} required but missing")]
    MissingMetric(Metric),
    #[error("ground-truth task set must be non-empty")]
    EmptyGroundTruth,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Geometric mean of the applicable metrics. A zero in any applicable
/// dimension yields an overall score of zero (a failed edit).
pub fn geometric_score(v: &MetricVector, metrics: &[Metric]) -> Result<f64, ScoringError> {
    let mut log_sum = 0.0;
    for m in metrics {
        let x = v.get(*m).ok_or(ScoringError::MissingMetric(*m))?;
        if x == 0.0 {
            return Ok(0.0);
        }
        log_sum += x.ln();
    }
    Ok((log_sum / metrics.len() as f64).exp())
}

/// VIEScore per-sample combinator: O = sqrt(SC × PQ).
pub fn viescore_overall(sc: f64, pq: f64) -> f64 {
    (sc * pq).sqrt()
}

/// Redundancy weight for alignment accuracy; the reference setting is 0.5.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AccuracyParams {
    pub w: f64,
}

impl Default for AccuracyParams {
    fn default() -> Self {
        AccuracyParams { w: 0.5 }
    }
}

/// Coverage of ground-truth atomic tasks minus a weighted redundancy
/// penalty:
///
/// Acc = |T_GT ∩ T_GEN| / |T_GT| − w · |T_GEN \ T_GT| / |T_GT|
///
/// Membership is by normalized-token equality; the result is unclamped,
/// so negatives are possible and preserved.
pub fn alignment_accuracy(
    t_gt: &HashSet<AtomicTask>,
    t_gen: &HashSet<AtomicTask>,
    params: &AccuracyParams,
) -> Result<f64, ScoringError> {
    if t_gt.is_empty() {
        return Err(ScoringError::EmptyGroundTruth);
    }
    let n_gt = t_gt.len() as f64;
    let matched = t_gt.intersection(t_gen).count() as f64;
    let extra = t_gen.difference(t_gt).count() as f64;
    Ok(matched / n_gt - params.w * extra / n_gt)
}

/// Cosine similarity between two embeddings.
pub fn facial_consistency(e1: &[f64], e2: &[f64]) -> Result<f64, ScoringError> {
    if e1.len() != e2.len() {
        return Err(ScoringError::DimensionMismatch(e1.len(), e2.len()));
    }
    let dot: f64 = e1.iter().zip(e2).map(|(a, b)| a * b).sum();
    let n1: f64 = e1.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2: f64 = e2.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(ScoringError::ZeroVector);
    }
    Ok(dot / (n1 * n2))
}

/// Which completion of a preference pair to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Winner,
    Loser,
}

/// Policy advantage A(p) = β · (log π_θ(p) − log π_ref(p)).
pub fn policy_advantage(pair: &PreferencePair, which: Completion) -> f64 {
    match which {
        Completion::Winner => pair.beta * (pair.logp_theta_w - pair.logp_ref_w),
        Completion::Loser => pair.beta * (pair.logp_theta_l - pair.logp_ref_l),
    }
}

/// Advantage margin A_w − A_l.
pub fn advantage_margin(pair: &PreferencePair) -> f64 {
    policy_advantage(pair, Completion::Winner) - policy_advantage(pair, Completion::Loser)
}

/// Numerically stable log(1 + e^x).
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// D²PO loss: −log σ(A_w − A_l), computed as softplus(−margin).
pub fn d2po_loss(pair: &PreferencePair) -> f64 {
    softplus(-advantage_margin(pair))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Partial derivatives of the D²PO loss with respect to the four logged
/// log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct D2poGrad {
    pub d_logp_theta_w: f64,
    pub d_logp_theta_l: f64,
    pub d_logp_ref_w: f64,
    pub d_logp_ref_l: f64,
}

/// Analytic gradient: with s = σ(A_w − A_l),
/// ∂L/∂logπ_θ(p_w) = −β(1−s), and the remaining partials follow by the
/// chain rule through the two advantages.
pub fn d2po_grad(pair: &PreferencePair) -> D2poGrad {
    let s = sigmoid(advantage_margin(pair));
    let g = pair.beta * (1.0 - s);
    D2poGrad {
        d_logp_theta_w: -g,
        d_logp_theta_l: g,
        d_logp_ref_w: g,
        d_logp_ref_l: -g,
    }
}

/// Check the analytic gradient against central finite differences of
/// step `h`, one log-probability at a time. Passes when every partial
/// agrees within relative tolerance `tol` (absolute for near-zero
/// partials).
pub fn gradient_check(pair: &PreferencePair, h: f64, tol: f64) -> bool {
    let grad = d2po_grad(pair);
    let fd = |bump: &dyn Fn(&mut PreferencePair, f64)| {
        let mut hi = pair.clone();
        bump(&mut hi, h);
        let mut lo = pair.clone();
        bump(&mut lo, -h);
        (d2po_loss(&hi) - d2po_loss(&lo)) / (2.0 * h)
    };
    let checks: [(f64, &dyn Fn(&mut PreferencePair, f64)); 4] = [
        (grad.d_logp_theta_w, &|p, d| p.logp_theta_w += d),
        (grad.d_logp_theta_l, &|p, d| p.logp_theta_l += d),
        (grad.d_logp_ref_w, &|p, d| p.logp_ref_w += d),
        (grad.d_logp_ref_l, &|p, d| p.logp_ref_l += d),
    ];
    checks.iter().all(|(analytic, bump)| {
        let numeric = fd(bump);
        let scale = analytic.abs().max(1e-8);
        (analytic - numeric).abs() / scale <= tol
    })
}

/// Round half away from zero to `decimals` places; the reporting-boundary
/// convention used for tables.
pub fn round_report(x: f64, decimals: u32) -> f64 {
    let f = 10f64.powi(decimals as i32);
    (x * f).round() / f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Metric;
    use proptest::prelude::*;

    fn vector(if_s: f64, nc: f64, vq: f64, ra: Option<f64>) -> MetricVector {
        MetricVector {
            if_score: Some(if_s),
            nc_score: Some(nc),
            vq_score: Some(vq),
            ra_score: ra,
        }
    }

    const BASIC: [Metric; 3] = [Metric::If, Metric::Nc, Metric::Vq];
    const COMPLEX: [Metric; 4] = [Metric::If, Metric::Nc, Metric::Vq, Metric::Ra];

    #[test]
    fn geometric_score_examples() {
        let v = vector(8.0, 8.0, 8.0, None);
        assert!((geometric_score(&v, &BASIC).unwrap() - 8.0).abs() < 1e-12);

        let v = vector(9.0, 7.0, 8.0, Some(8.0));
        let got = geometric_score(&v, &COMPLEX).unwrap();
        assert!((got - 7.968565207460511).abs() < 1e-12);

        let v = vector(9.0, 0.0, 8.0, None);
        assert_eq!(geometric_score(&v, &BASIC).unwrap(), 0.0);

        let v = vector(9.0, 7.0, 8.0, None);
        assert!(matches!(
            geometric_score(&v, &COMPLEX),
            Err(ScoringError::MissingMetric(Metric::Ra))
        ));
    }

    #[test]
    fn viescore_examples() {
        assert_eq!(viescore_overall(0.0, 7.3), 0.0);
        assert!((viescore_overall(9.0, 4.0) - 6.0).abs() < 1e-12);
        assert!((viescore_overall(8.45, 8.195) - 8.321523298050664).abs() < 1e-12);
    }

    fn tasks(pairs: &[(&str, &str)]) -> HashSet<AtomicTask> {
        pairs
            .iter()
            .map(|(o, a)| AtomicTask::new(o, a).unwrap())
            .collect()
    }

    #[test]
    fn alignment_accuracy_examples() {
        let p = AccuracyParams::default();
        let gt = tasks(&[("car", "recolor"), ("sky", "darken")]);

        assert!((alignment_accuracy(&gt, &gt, &p).unwrap() - 1.0).abs() < 1e-12);

        let gen = tasks(&[("car", "recolor"), ("sky", "darken"), ("tree", "remove")]);
        assert!((alignment_accuracy(&gt, &gen, &p).unwrap() - 0.75).abs() < 1e-12);

        let gen = tasks(&[("moon", "add"), ("tree", "remove")]);
        assert!((alignment_accuracy(&gt, &gen, &p).unwrap() - (-0.5)).abs() < 1e-12);

        assert!(matches!(
            alignment_accuracy(&HashSet::new(), &gen, &p),
            Err(ScoringError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn alignment_accuracy_case_and_duplicate_invariant() {
        let p = AccuracyParams::default();
        let gt = tasks(&[("the cat", "remove")]);
        let gen_a = tasks(&[("The   CAT", "Remove")]);
        // sets dedupe: inserting the same normalized task twice is a no-op
        let mut gen_b = gen_a.clone();
        gen_b.insert(AtomicTask::new("the cat", "REMOVE").unwrap());
        assert_eq!(
            alignment_accuracy(&gt, &gen_a, &p).unwrap(),
            alignment_accuracy(&gt, &gen_b, &p).unwrap()
        );
    }

    #[test]
    fn facial_consistency_examples() {
        let v = vec![0.6, 0.8];
        assert!((facial_consistency(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((facial_consistency(&[1.0, 0.0], &[0.0, 1.0]).unwrap()).abs() < 1e-12);
        let c = facial_consistency(&[1.0, 0.0], &[0.5f64.sqrt(), 0.5f64.sqrt()]).unwrap();
        assert!((c - 0.7071067811865476).abs() < 1e-9);
        assert!(matches!(
            facial_consistency(&[0.0, 0.0], &v),
            Err(ScoringError::ZeroVector)
        ));
        assert!(matches!(
            facial_consistency(&[1.0], &v),
            Err(ScoringError::DimensionMismatch(1, 2))
        ));
    }

    fn pair(beta: f64, tw: f64, rw: f64, tl: f64, rl: f64) -> PreferencePair {
        PreferencePair {
            context_id: "c".into(),
            beta,
            logp_theta_w: tw,
            logp_ref_w: rw,
            logp_theta_l: tl,
            logp_ref_l: rl,
        }
    }

    #[test]
    fn policy_advantage_examples() {
        let p = pair(1.0, -2.0, -2.0, -3.0, -3.0);
        assert_eq!(policy_advantage(&p, Completion::Winner), 0.0);

        let p = pair(1.0, -1.0, -2.0, -3.0, -3.0);
        assert!((policy_advantage(&p, Completion::Winner) - 1.0).abs() < 1e-12);

        let p = pair(2.0, -3.0, -1.0, -3.0, -3.0);
        assert!((policy_advantage(&p, Completion::Winner) - (-4.0)).abs() < 1e-12);
    }

    #[test]
    fn d2po_loss_examples() {
        // equal advantages -> ln 2
        let p = pair(3.0, -1.5, -1.5, -2.0, -2.0);
        assert!((d2po_loss(&p) - std::f64::consts::LN_2).abs() < 1e-12);

        // beta=1, logs (-1,-1,-2,-1): A_w=0, A_l=-1, margin 1
        let p = pair(1.0, -1.0, -1.0, -2.0, -1.0);
        assert!((d2po_loss(&p) - 0.31326168751822286).abs() < 1e-12);

        // beta=2, logs (-1,-2,-3,-1): A_w=2, A_l=-4, margin 6
        let p = pair(2.0, -1.0, -2.0, -3.0, -1.0);
        assert!((d2po_loss(&p) - 0.002475685137730357).abs() < 1e-12);
    }

    #[test]
    fn d2po_grad_symmetry_point() {
        let p = pair(1.0, -1.0, -1.0, -2.0, -2.0);
        let g = d2po_grad(&p);
        assert!((g.d_logp_theta_w + 0.5).abs() < 1e-12);
        assert!((g.d_logp_theta_l - 0.5).abs() < 1e-12);
        assert!((g.d_logp_ref_w - 0.5).abs() < 1e-12);
        assert!((g.d_logp_ref_l + 0.5).abs() < 1e-12);
    }

    #[test]
    fn d2po_grad_saturates() {
        let p = pair(10.0, -0.001, -40.0, -40.0, -0.001);
        let g = d2po_grad(&p);
        assert!(g.d_logp_theta_w.abs() < 1e-9);
        assert!(g.d_logp_theta_l.abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn geometric_score_within_min_max(
            a in 0.01f64..10.0, b in 0.01f64..10.0, c in 0.01f64..10.0
        ) {
            let v = vector(a, b, c, None);
            let g = geometric_score(&v, &BASIC).unwrap();
            let min = a.min(b).min(c);
            let max = a.max(b).max(c);
            prop_assert!(g >= min - 1e-12 && g <= max + 1e-12);
        }

        #[test]
        fn geometric_score_permutation_invariant(
            a in 0.0f64..10.0, b in 0.0f64..10.0, c in 0.0f64..10.0
        ) {
            let v = vector(a, b, c, None);
            let g1 = geometric_score(&v, &[Metric::If, Metric::Nc, Metric::Vq]).unwrap();
            let g2 = geometric_score(&v, &[Metric::Vq, Metric::If, Metric::Nc]).unwrap();
            prop_assert!((g1 - g2).abs() < 1e-12);
        }

        #[test]
        fn d2po_loss_positive_and_margin_sign(
            beta in 0.1f64..5.0,
            tw in -10.0f64..0.0, rw in -10.0f64..0.0,
            tl in -10.0f64..0.0, rl in -10.0f64..0.0,
        ) {
            let p = pair(beta, tw, rw, tl, rl);
            let loss = d2po_loss(&p);
            prop_assert!(loss > 0.0);
            let margin = advantage_margin(&p);
            prop_assert_eq!(loss < std::f64::consts::LN_2, margin > 0.0);
        }

        #[test]
        fn d2po_loss_shift_invariant(
            beta in 0.1f64..5.0,
            tw in -9.0f64..-1.0, rw in -9.0f64..-1.0,
            tl in -9.0f64..-1.0, rl in -9.0f64..-1.0,
            shift in -1.0f64..0.0,
        ) {
            let p = pair(beta, tw, rw, tl, rl);
            let q = pair(beta, tw + shift, rw + shift, tl + shift, rl + shift);
            prop_assert!((d2po_loss(&p) - d2po_loss(&q)).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for _ in 0..1000 {
            let p = pair(
                rng.gen_range(0.1..4.0),
                rng.gen_range(-8.0..-0.1),
                rng.gen_range(-8.0..-0.1),
                rng.gen_range(-8.0..-0.1),
                rng.gen_range(-8.0..-0.1),
            );
            let g = d2po_grad(&p);
            let fd = |f: &dyn Fn(&mut PreferencePair, f64)| {
                let mut hi = p.clone();
                f(&mut hi, h);
                let mut lo = p.clone();
                f(&mut lo, -h);
                (d2po_loss(&hi) - d2po_loss(&lo)) / (2.0 * h)
            };
            let checks = [
                (g.d_logp_theta_w, fd(&|q, d| q.logp_theta_w += d)),
                (g.d_logp_theta_l, fd(&|q, d| q.logp_theta_l += d)),
                (g.d_logp_ref_w, fd(&|q, d| q.logp_ref_w += d)),
                (g.d_logp_ref_l, fd(&|q, d| q.logp_ref_l += d)),
            ];
            for (analytic, numeric) in checks {
                // absolute floor: FD truncation noise dominates once the
                // sigmoid saturates and the true partial is ~0
                let scale = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic - numeric).abs() / scale < 1e-6,
                    "{analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn round_report_half_away_from_zero() {
        assert_eq!(round_report(-30.028898, 2), -30.03);
        assert_eq!(round_report(347.264006, 2), 347.26);
        assert_eq!(round_report(0.125, 2), 0.13);
    }
}
