//! Iterative cross guidance with confidence-driven mask updating.
//!
//! Each iteration inpaints the current target view with guidance from the
//! current reference view, keeps only predictions both branches are
//! confident about, then swaps roles: the next target is the previous
//! reference and the next reference is the fresh result. Odd iterations
//! produce left-view snapshots, even iterations right-view snapshots.

use crate::error::{Error, Result};
use crate::graph::{Graph, ShiftDirection, Var};
use crate::mask::BinaryMask;
use crate::network::{BranchOutput, Generator};
use crate::tensor::Tensor;

/// Strict threshold applied to the channel-wise maximum of a soft mask.
pub const CONFIDENCE_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Left,
    Right,
}

impl View {
    pub fn other(self) -> Self {
        match self {
            View::Left => View::Right,
            View::Right => View::Left,
        }
    }
}

/// The two generator branches as seen by the iteration loop.
pub trait Branches {
    fn fullres(&self, g: &mut Graph, target: Var, target_mask: &BinaryMask) -> Result<BranchOutput>;

    fn encoder_decoder(
        &self,
        g: &mut Graph,
        target: Var,
        target_mask: &BinaryMask,
        reference: Var,
        reference_mask: &BinaryMask,
        direction: ShiftDirection,
    ) -> Result<BranchOutput>;
}

impl Branches for Generator<Var> {
    fn fullres(&self, g: &mut Graph, target: Var, target_mask: &BinaryMask) -> Result<BranchOutput> {
        Generator::fullres(self, g, target, target_mask)
    }

    fn encoder_decoder(
        &self,
        g: &mut Graph,
        target: Var,
        target_mask: &BinaryMask,
        reference: Var,
        reference_mask: &BinaryMask,
        direction: ShiftDirection,
    ) -> Result<BranchOutput> {
        Generator::encoder_decoder(self, g, target, target_mask, reference, reference_mask, direction)
    }
}

/// `M(i,j) = 1` iff `max_c S(c,i,j) > 0.5`. Accepts `[3,H,W]` or `[1,3,H,W]`.
pub fn threshold_mask(soft: &Tensor) -> Result<BinaryMask> {
    let s = soft.shape();
    let (c, h, w) = match s {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        _ => return Err(Error::shape("threshold_mask", format!("expected [C,H,W], got {s:?}"))),
    };
    if let Some(bad) = soft.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("soft mask value {bad} outside [0,1]")));
    }
    let plane = h * w;
    let d = soft.data();
    let values = Tensor::from_fn(&[1, h, w], |i| {
        let m = (0..c).map(|ch| d[ch * plane + i]).fold(f32::NEG_INFINITY, f32::max);
        if m > CONFIDENCE_THRESHOLD {
            1.0
        } else {
            0.0
        }
    });
    BinaryMask::new(values)
}

/// Both branches must be confident.
pub fn combine_confidence(m_f: &BinaryMask, m_ed: &BinaryMask) -> Result<BinaryMask> {
    m_f.and(m_ed)
}

/// Composes one iteration's result.
///
/// `r = x * m + p * (1 - m) * m_t` with `p = (r_f + r_ed) / 2`, and the
/// updated mask `max(m, (1 - m) * m_t)`. Known pixels pass through
/// unchanged; holes are filled only where both branches are confident and
/// stay zero otherwise.
pub fn compose_iteration_output(
    g: &mut Graph,
    r_f: &BranchOutput,
    r_ed: &BranchOutput,
    m_t: &BinaryMask,
    x_orig: Var,
    m_known: &BinaryMask,
) -> Result<(Var, BinaryMask)> {
    let fill = m_known.holes_where(m_t)?;
    let sum = g.add(r_f.restored, r_ed.restored)?;
    let p = g.scale(sum, 0.5);
    let known = g.input(m_known.expand(3));
    let kept = g.mul(x_orig, known)?;
    let fill_t = g.input(fill.expand(3));
    let filled = g.mul(p, fill_t)?;
    let r = g.add(kept, filled)?;
    let m_new = m_known.or(&fill)?;
    Ok((r, m_new))
}

/// What happened at one iteration.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    /// 1-based iteration index.
    pub t: usize,
    /// View inpainted at this iteration.
    pub view: View,
    pub direction: ShiftDirection,
    /// `R^t`, `[1,3,H,W]`.
    pub output: Var,
    pub confident: BinaryMask,
    pub missing_before: usize,
    pub missing_after: usize,
    pub mask_after: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct IcgOutput {
    pub left: Var,
    pub right: Var,
    pub left_mask: BinaryMask,
    pub right_mask: BinaryMask,
    /// `X_left^k` for `k = 1..=T/2`.
    pub left_snapshots: Vec<Var>,
    /// `X_right^k` for `k = 1..=T/2`.
    pub right_snapshots: Vec<Var>,
    pub history: Vec<IterationRecord>,
}

pub fn validate_iterations(t: usize) -> Result<()> {
    if t == 0 || t % 2 != 0 {
        return Err(Error::invalid(format!(
            "iteration count must be even and positive, got {t}"
        )));
    }
    Ok(())
}

/// Runs `iterations` rounds of cross guidance starting with the left view
/// as target. Images are `[1,3,H,W]` with holes already zero.
pub fn icg_run(
    g: &mut Graph,
    branches: &dyn Branches,
    x_left: Var,
    x_right: Var,
    m_left: &BinaryMask,
    m_right: &BinaryMask,
    iterations: usize,
) -> Result<IcgOutput> {
    validate_iterations(iterations)?;
    if g.shape(x_left) != g.shape(x_right) || m_left.tensor().shape() != m_right.tensor().shape() {
        return Err(Error::shape(
            "icg",
            format!("views differ: {:?} vs {:?}", g.shape(x_left), g.shape(x_right)),
        ));
    }
    let mut target = (x_left, m_left.clone());
    let mut reference = (x_right, m_right.clone());
    let mut view = View::Left;
    let mut direction = ShiftDirection::RefIsRight;
    let mut out = IcgOutput {
        left: x_left,
        right: x_right,
        left_mask: m_left.clone(),
        right_mask: m_right.clone(),
        left_snapshots: Vec::with_capacity(iterations / 2),
        right_snapshots: Vec::with_capacity(iterations / 2),
        history: Vec::with_capacity(iterations),
    };
    for t in 1..=iterations {
        let r_f = branches.fullres(g, target.0, &target.1)?;
        let r_ed = branches.encoder_decoder(g, target.0, &target.1, reference.0, &reference.1, direction)?;
        let m_f = threshold_mask(g.value(r_f.soft_mask))?;
        let m_ed = threshold_mask(g.value(r_ed.soft_mask))?;
        let m_t = combine_confidence(&m_f, &m_ed)?;
        let (r, m_new) = compose_iteration_output(g, &r_f, &r_ed, &m_t, target.0, &target.1)?;
        out.history.push(IterationRecord {
            t,
            view,
            direction,
            output: r,
            confident: m_t,
            missing_before: target.1.missing_count(),
            missing_after: m_new.missing_count(),
            mask_after: m_new.clone(),
        });
        match view {
            View::Left => {
                out.left = r;
                out.left_mask = m_new.clone();
                out.left_snapshots.push(r);
            }
            View::Right => {
                out.right = r;
                out.right_mask = m_new.clone();
                out.right_snapshots.push(r);
            }
        }
        target = std::mem::replace(&mut reference, (r, m_new));
        view = view.other();
        direction = direction.flipped();
    }
    Ok(out)
}
