//! Categorical return distributions on a fixed, equally spaced support.
//!
//! The support holds `n_atoms` atoms between `v_min` and `v_max`. Targets are
//! built by shifting and contracting the support (`r + γ·z`), then projecting
//! the resulting distribution back onto the fixed atoms with
//! [`Support::project`]. Losses are KL divergences against softmax logits;
//! gradients are taken w.r.t. the logits, where they reduce to `p - m`.

use crate::error::{Error, Result};

/// Distance, in units of Δz, below which a target counts as sitting on an atom.
const ON_ATOM_TOLERANCE: f64 = 1e-10;

/// Fixed atom grid `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    atoms: Vec<f64>,
    v_min: f64,
    v_max: f64,
    delta: f64,
}

impl Support {
    pub fn new(n_atoms: usize, v_min: f64, v_max: f64) -> Result<Self> {
        if n_atoms < 2 {
            return Err(Error::Config(format!("support needs at least 2 atoms, got {n_atoms}")));
        }
        if !(v_min < v_max) || !v_min.is_finite() || !v_max.is_finite() {
            return Err(Error::Config(format!("degenerate support range [{v_min}, {v_max}]")));
        }
        let span = v_max - v_min;
        let denom = (n_atoms - 1) as f64;
        let atoms = (0..n_atoms).map(|i| v_min + i as f64 * span / denom).collect();
        Ok(Self { atoms, v_min, v_max, delta: span / denom })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// Atom spacing Δz.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Projects the distribution `(target_atoms, target_probs)` onto this
    /// support.
    ///
    /// Each target atom is clipped to `[v_min, v_max]` and its mass is split
    /// between the two bracketing support atoms in proportion to proximity.
    /// The lower bracket is `floor((T - v_min) / Δz)` clamped to
    /// `[0, n_atoms - 2]`, so a target exactly on an atom puts all of its mass
    /// there.
    pub fn project(&self, target_atoms: &[f64], target_probs: &[f64]) -> Result<CategoricalDist> {
        if target_atoms.len() != target_probs.len() {
            return Err(Error::Dimension(format!(
                "projection got {} atoms but {} probabilities",
                target_atoms.len(),
                target_probs.len()
            )));
        }
        let mut out = vec![0.0; self.len()];
        self.project_into(target_atoms.iter().copied(), target_probs, &mut out);
        Ok(CategoricalDist { probs: out })
    }

    fn project_into(&self, atoms: impl Iterator<Item = f64>, probs: &[f64], out: &mut [f64]) {
        let top = self.len() - 2;
        for (t, &mass) in atoms.zip(probs) {
            if mass == 0.0 {
                continue;
            }
            let t = t.clamp(self.v_min, self.v_max);
            let mut b = (t - self.v_min) / self.delta;
            // Snap rounding residue so targets on an atom keep all their mass.
            let nearest = b.round();
            if (b - nearest).abs() < ON_ATOM_TOLERANCE {
                b = nearest;
            }
            let lower = (b.floor().max(0.0) as usize).min(top);
            let frac = b - lower as f64;
            // frac ∈ [0, 1]; frac == 1 only at v_max, where the upper atom takes it all.
            let upper_mass = mass * frac;
            out[lower] += mass - upper_mass;
            out[lower + 1] += upper_mass;
        }
    }

    /// Multi-step distributional target: the projection of
    /// `(R + γ·z, next_probs)`. A zero discount yields a (split) point mass at
    /// the clipped return.
    pub fn build_target(
        &self,
        n_step_return: f64,
        n_step_discount: f64,
        next_probs: &[f64],
    ) -> Result<CategoricalDist> {
        if next_probs.len() != self.len() {
            return Err(Error::Dimension(format!(
                "next-state distribution has {} atoms, support has {}",
                next_probs.len(),
                self.len()
            )));
        }
        let mut out = vec![0.0; self.len()];
        if n_step_discount == 0.0 {
            self.project_into(std::iter::once(n_step_return), &[1.0], &mut out);
        } else {
            let shifted = self.atoms.iter().map(|&z| n_step_return + n_step_discount * z);
            self.project_into(shifted, next_probs, &mut out);
        }
        Ok(CategoricalDist { probs: out })
    }

    /// Mean value `zᵀp`.
    pub fn mean(&self, probs: &[f64]) -> f64 {
        self.atoms.iter().zip(probs).map(|(z, p)| z * p).sum()
    }
}

/// A probability vector over a [`Support`].
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    pub probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn point_mass(n_atoms: usize, index: usize) -> Self {
        let mut probs = vec![0.0; n_atoms];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log softmax(logits)` via log-sum-exp.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// KL divergence `KL(m || softmax(logits))` and its gradient w.r.t. the
/// logits, `softmax(logits) - m`.
pub fn kl_loss(target: &[f64], logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if target.len() != logits.len() {
        return Err(Error::Dimension(format!("KL target has {} atoms, logits have {}", target.len(), logits.len())));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numerical("non-finite logits in KL loss".into()));
    }
    let log_p = log_softmax(logits);
    let loss = target
        .iter()
        .zip(&log_p)
        .filter(|(&m, _)| m > 0.0)
        .map(|(&m, &lp)| m * (m.ln() - lp))
        .sum::<f64>()
        // Rounding can leave a tiny negative residue when m == p.
        .max(0.0);
    let grad = log_p.iter().zip(target).map(|(&lp, &m)| lp.exp() - m).collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_support_has_expected_spacing() {
        let s = Support::new(51, -10.0, 10.0).unwrap();
        assert_eq!(s.atoms()[0], -10.0);
        assert_eq!(s.atoms()[50], 10.0);
        assert!((s.delta() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn small_supports() {
        assert_eq!(Support::new(2, 0.0, 1.0).unwrap().atoms(), &[0.0, 1.0]);
        assert_eq!(Support::new(5, -1.0, 1.0).unwrap().atoms(), &[-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn degenerate_support_is_rejected() {
        assert!(matches!(Support::new(1, 0.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(Support::new(5, 1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(Support::new(5, 2.0, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn projection_on_grid_is_identity() {
        let s = Support::new(5, -1.0, 1.0).unwrap();
        let p = [0.1, 0.2, 0.3, 0.25, 0.15];
        let out = s.project(s.atoms(), &p).unwrap();
        assert_eq!(out.probs, p);
    }

    #[test]
    fn projection_splits_linearly() {
        let s = Support::new(2, 0.0, 1.0).unwrap();
        let out = s.project(&[0.25], &[1.0]).unwrap();
        assert_eq!(out.probs, vec![0.75, 0.25]);
    }

    #[test]
    fn projection_clips_out_of_range() {
        let s = Support::new(51, -10.0, 10.0).unwrap();
        let out = s.project(&[42.0], &[1.0]).unwrap();
        assert_eq!(out.probs[50], 1.0);
        assert_eq!(out.total_mass(), 1.0);
        let out = s.project(&[-42.0], &[1.0]).unwrap();
        assert_eq!(out.probs[0], 1.0);
    }

    #[test]
    fn terminal_target_splits_between_bracketing_atoms() {
        let s = Support::new(51, -10.0, 10.0).unwrap();
        let next = vec![1.0 / 51.0; 51];
        let out = s.build_target(1.0, 0.0, &next).unwrap();
        // 1.0 sits midway between atoms 27 (0.8) and 28 (1.2).
        assert!((s.atoms()[27] - 0.8).abs() < 1e-12);
        assert!((out.probs[27] - 0.5).abs() < 1e-9);
        assert!((out.probs[28] - 0.5).abs() < 1e-9);
        assert!((out.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_shift_returns_next_distribution() {
        let s = Support::new(11, -1.0, 1.0).unwrap();
        let next: Vec<f64> = (1..=11).map(|i| i as f64 / 66.0).collect();
        let out = s.build_target(0.0, 1.0, &next).unwrap();
        assert_eq!(out.probs, next);
    }

    #[test]
    fn contraction_of_point_mass() {
        let s = Support::new(51, -10.0, 10.0).unwrap();
        let next = CategoricalDist::point_mass(51, 50);
        // 5.0 falls midway between atoms 37 (4.8) and 38 (5.2).
        let out = s.build_target(0.0, 0.5, &next.probs).unwrap();
        assert!((out.probs[37] - 0.5).abs() < 1e-9);
        assert!((out.probs[38] - 0.5).abs() < 1e-9);
        // 6.0 = -10 + 40 * 0.4 is an atom.
        let out = s.build_target(0.0, 0.6, &next.probs).unwrap();
        assert!((out.probs[40] - 1.0).abs() < 1e-9);
        assert!((out.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_of_self_is_zero() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let m = softmax(&logits);
        let (loss, grad) = kl_loss(&m, &logits).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn kl_hand_evaluation() {
        let (loss, grad) = kl_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, vec![-0.5, 0.5]);
    }

    #[test]
    fn kl_rejects_non_finite_logits() {
        assert!(matches!(kl_loss(&[1.0, 0.0], &[f64::NAN, 0.0]), Err(Error::Numerical(_))));
    }

    #[test]
    fn mean_values() {
        let s = Support::new(3, -1.0, 1.0).unwrap();
        assert_eq!(s.mean(&[1.0 / 3.0; 3]), 0.0);
        assert_eq!(s.mean(&[0.0, 0.0, 1.0]), 1.0);
        let s = Support::new(2, 0.0, 4.0).unwrap();
        assert_eq!(s.mean(&[0.25, 0.75]), 3.0);
    }
}
