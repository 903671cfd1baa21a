use serde::{Deserialize, Serialize};

use super::Jet;
use crate::error::{data_err, Result};

/// Affine pt normalisation onto the 5%-95% quantile range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtScaler {
    pub q05: f64,
    pub q95: f64,
}

/// Quantile by linear interpolation between order statistics of `sorted`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl PtScaler {
    /// Fits on the non-padding pt values of `jets`.
    pub fn fit<'a>(jets: impl IntoIterator<Item = &'a Jet>) -> Result<Self> {
        let mut pts: Vec<f64> = jets
            .into_iter()
            .flat_map(|j| j.particles.iter())
            .filter(|p| !p.is_pad())
            .map(|p| p.pt)
            .collect();
        pts.sort_by(f64::total_cmp);
        Self::from_sorted(&pts)
    }

    pub fn from_sorted(pts: &[f64]) -> Result<Self> {
        if pts.len() < 2 {
            return data_err(format!("need at least two pt values to fit a scaler, got {}", pts.len()));
        }
        let (q05, q95) = (quantile(pts, 0.05), quantile(pts, 0.95));
        if q95 <= q05 {
            return data_err(format!("degenerate pt quantiles q05={q05}, q95={q95}"));
        }
        Ok(Self { q05, q95 })
    }

    pub fn scale(&self, pt: f64) -> f64 {
        (pt - self.q05) / (self.q95 - self.q05)
    }

    /// Rescales pt on every non-padding particle; `kt` follows the new pt.
    pub fn apply(&self, jet: &Jet) -> Jet {
        let mut out = jet.clone();
        for p in out.particles.iter_mut().filter(|p| !p.is_pad()) {
            p.pt = self.scale(p.pt);
            p.kt = p.pt * p.dr;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::Particle;

    #[test]
    fn uniform_one_to_hundred() {
        let pts: Vec<f64> = (1..=100).map(f64::from).collect();
        let s = PtScaler::from_sorted(&pts).unwrap();
        assert!((s.q05 - 5.95).abs() < 1e-12);
        assert!((s.q95 - 95.05).abs() < 1e-12);
        assert_eq!(s.scale(s.q05), 0.0);
        assert_eq!(s.scale(s.q95), 1.0);
    }

    #[test]
    fn degenerate() {
        let jet = Jet::new(vec![Particle::new(3.0, 0.1, 0.1).unwrap(); 5], 0);
        assert!(matches!(PtScaler::fit([&jet]), Err(crate::Error::Data(_))));
    }

    #[test]
    fn pads_untouched() {
        let jet = Jet::new(
            vec![
                Particle::new(2.0, 0.1, 0.1).unwrap(),
                Particle::new(4.0, 0.1, 0.1).unwrap(),
                Particle::pad(),
            ],
            0,
        );
        let s = PtScaler::fit([&jet]).unwrap();
        assert_eq!(s.apply(&jet).particles[2], Particle::pad());
    }
}
