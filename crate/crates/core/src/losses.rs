//! Reconstruction and adversarial objectives.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::BoundDiscriminator;

/// Scores are clamped to `[SCORE_EPS, 1 - SCORE_EPS]` before taking logs.
pub const SCORE_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub rec: f32,
    pub adv_gen: f32,
    pub adv_disc: f32,
    pub total: f32,
}

impl LossReport {
    pub fn new(rec: f32, adv_gen: f32, adv_disc: f32, lambda_adv: f32) -> Self {
        Self {
            rec,
            adv_gen,
            adv_disc,
            total: total_loss(rec, adv_gen, lambda_adv),
        }
    }
}

pub fn total_loss(rec: f32, adv_gen: f32, lambda_adv: f32) -> f32 {
    rec + lambda_adv * adv_gen
}

fn check_snapshots(left: &[Var], right: &[Var]) -> Result<()> {
    if left.is_empty() || left.len() != right.len() {
        return Err(Error::invalid(format!(
            "need matching non-empty snapshot lists, got {} left / {} right",
            left.len(),
            right.len()
        )));
    }
    Ok(())
}

/// `sum_k mean|X_left^k - Y_left| + mean|X_right^k - Y_right|`.
pub fn rec_loss(g: &mut Graph, left: &[Var], right: &[Var], y_left: Var, y_right: Var) -> Result<Var> {
    check_snapshots(left, right)?;
    let mut terms = Vec::with_capacity(2 * left.len());
    for (&l, &r) in left.iter().zip(right) {
        for (x, y) in [(l, y_left), (r, y_right)] {
            let d = g.sub(x, y)?;
            let a = g.abs(d);
            terms.push(g.mean_all(a));
        }
    }
    sum_scalars(g, &terms)
}

fn sum_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

fn checked_scores(g: &mut Graph, scores: Var) -> Result<Var> {
    if let Some(bad) = g.value(scores).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("discriminator score {bad} outside [0,1]")));
    }
    Ok(g.clamp(scores, SCORE_EPS, 1.0 - SCORE_EPS))
}

/// `mean log D(x)`.
fn mean_log_score(g: &mut Graph, disc: &BoundDiscriminator, image: Var) -> Result<Var> {
    let s = disc.forward(g, image)?;
    let s = checked_scores(g, s)?;
    let l = g.ln(s);
    Ok(g.mean_all(l))
}

/// `mean log(1 - D(x))`.
fn mean_log_one_minus(g: &mut Graph, disc: &BoundDiscriminator, image: Var) -> Result<Var> {
    let s = disc.forward(g, image)?;
    let s = checked_scores(g, s)?;
    let inv = g.one_minus(s);
    let l = g.ln(inv);
    Ok(g.mean_all(l))
}

/// Non-saturating generator objective `-sum_k sum_view mean log D(X^k)`.
pub fn adv_gen_loss(g: &mut Graph, disc: &BoundDiscriminator, left: &[Var], right: &[Var]) -> Result<Var> {
    check_snapshots(left, right)?;
    let mut terms = Vec::new();
    for (&l, &r) in left.iter().zip(right) {
        terms.push(mean_log_score(g, disc, l)?);
        terms.push(mean_log_score(g, disc, r)?);
    }
    let s = sum_scalars(g, &terms)?;
    Ok(g.scale(s, -1.0))
}

/// The adversarial value the discriminator maximizes:
/// `sum_k [log D(Y_l) + log(1 - D(X_l^k)) + log D(Y_r) + log(1 - D(X_r^k))]`,
/// each log averaged over score-map positions.
pub fn adv_disc_value(
    g: &mut Graph,
    disc: &BoundDiscriminator,
    left: &[Var],
    right: &[Var],
    y_left: Var,
    y_right: Var,
) -> Result<Var> {
    check_snapshots(left, right)?;
    let real_l = mean_log_score(g, disc, y_left)?;
    let real_r = mean_log_score(g, disc, y_right)?;
    let real = g.add(real_l, real_r)?;
    let real = g.scale(real, left.len() as f32);
    let mut terms = vec![real];
    for (&l, &r) in left.iter().zip(right) {
        terms.push(mean_log_one_minus(g, disc, l)?);
        terms.push(mean_log_one_minus(g, disc, r)?);
    }
    sum_scalars(g, &terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn rec_loss_cases() {
        let mut g = Graph::new();
        let y = g.input(Tensor::full(&[1, 3, 4, 4], 0.25));
        let z = full(&mut g, 0.25);
        let l = rec_loss(&mut g, &[z], &[z], y, y).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let off = full(&mut g, 0.75);
        let l = rec_loss(&mut g, &[off], &[z], y, y).unwrap();
        assert!((g.value(l).data()[0] - 0.5).abs() < 1e-7);
        assert!(rec_loss(&mut g, &[], &[], y, y).is_err());
        assert!(rec_loss(&mut g, &[z, z], &[z], y, y).is_err());
    }

    fn full(g: &mut Graph, v: f32) -> Var {
        g.input(Tensor::full(&[1, 3, 4, 4], v))
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 2.0, 0.0), 1.0);
        assert!((total_loss(1.0, 2.0, 0.01) - 1.02).abs() < 1e-7);
        let r = LossReport::new(1.0, 2.0, -3.0, 0.01);
        assert!((r.total - 1.02).abs() < 1e-7);
    }
}
