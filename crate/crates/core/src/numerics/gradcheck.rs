//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over the whole gradient.
    pub rel_err: f64,
    /// Worst per-element relative error.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Coordinates left out because a probe crossed a ReLU or abs kink.
    pub skipped: usize,
}

/// What to do with a coordinate whose probe crosses a ReLU or abs kink.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KinkPolicy {
    /// Leave it out and count it.
    #[default]
    Skip,
    /// Use the forward or backward difference on the side that stays smooth,
    /// skipping only if both sides cross. Suited to deep piecewise-linear
    /// stacks where kinks are everywhere but curvature is low.
    OneSided,
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
///
/// Coordinates whose `±eps` probes change the sign of any ReLU or abs input
/// straddle a kink, where the two gradients legitimately disagree; they are
/// skipped and counted. `rel_err` is the norm-wise error over the remaining
/// coordinates. The per-element error is `|a − n| / max(|a|, |n|, 1e-3·max|n|)`,
/// so elements whose gradient is negligible next to the largest one are judged
/// against that scale instead of their own. Differences divide by the step
/// actually realised in f32, not the nominal `2·eps`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_with(f, x, eps, KinkPolicy::Skip)
}

/// [`finite_diff_check`] with an explicit kink policy.
pub fn finite_diff_check_with<F>(
    f: F,
    x: &Tensor,
    eps: f32,
    kinks: KinkPolicy,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_diff_check", "eps must be > 0"));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad());
    let out = f(&mut tape, xv)?;
    if !tape.shape(out).is_scalar() {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("function must be scalar-valued, got {}", tape.shape(out)),
        ));
    }
    let base_signature = tape.kink_signature();
    tape.backward(out)?;
    let analytic: Vec<f32> = tape
        .grad(xv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor| -> Result<(f64, bool)> {
        let mut t = Tape::new();
        let v = t.constant(probe.clone());
        let o = f(&mut t, v)?;
        Ok((t.item(o)? as f64, t.kink_signature() == base_signature))
    };

    let f0 = tape.item(out)? as f64;
    let mut numeric = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let hi = orig + eps;
        let lo = orig - eps;
        probe.data_mut()[i] = hi;
        let (fp, smooth_hi) = eval(&probe)?;
        probe.data_mut()[i] = lo;
        let (fm, smooth_lo) = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push(match (smooth_hi, smooth_lo) {
            _ if kinks == KinkPolicy::Skip && !(smooth_hi && smooth_lo) => None,
            (true, true) => Some((fp - fm) / (hi as f64 - lo as f64)),
            (true, false) => Some((fp - f0) / (hi as f64 - orig as f64)),
            (false, true) => Some((f0 - fm) / (orig as f64 - lo as f64)),
            (false, false) => None,
        });
    }

    let scale = numeric.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let (mut diff_sq, mut a_sq, mut n_sq) = (0.0f64, 0.0f64, 0.0f64);
    let mut checked = 0;
    for (&a, n) in analytic.iter().zip(&numeric) {
        let Some(n) = *n else { continue };
        checked += 1;
        let a = a as f64;
        let diff = (a - n).abs();
        diff_sq += diff * diff;
        a_sq += a * a;
        n_sq += n * n;
        max_abs = max_abs.max(diff);
        max_rel = max_rel.max(diff / a.abs().max(n.abs()).max(floor));
    }
    let norm = a_sq.max(n_sq).sqrt();
    Ok(GradCheckReport {
        rel_err: if norm > 0.0 {
            diff_sq.sqrt() / norm
        } else {
            0.0
        },
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        checked,
        skipped: x.numel() - checked,
    })
}

/// `Σ yᵢ·rᵢ` with fixed random weights `|rᵢ| ∈ [0.5, 1]` of random sign, a
/// scalar probe whose gradient w.r.t. `y` is O(1) in every element.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = Tensor::uniform(shape, 0.5, 1.0, &mut rng);
    for v in r.data_mut() {
        if rng.gen::<bool>() {
            *v = -*v;
        }
    }
    let r = tape.constant(r);
    let prod = tape.mul(y, r)?;
    let m = tape.mean_all(prod)?;
    Ok(tape.scale(m, shape.numel() as f32))
}
