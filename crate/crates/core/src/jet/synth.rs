use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Jet, Particle};
use crate::error::{config_err, Result};

/// Shape of one synthetic jet class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    /// Number of Gaussian prongs in the (deta, dphi) plane.
    pub prongs: usize,
    /// Distance of the first prong centre from the jet axis.
    pub radius: f64,
    /// Prong `k` sits at `radius * (1 + k * radius_step)`.
    pub radius_step: f64,
    /// Standard deviation of particle offsets around a prong centre.
    pub spread: f64,
    /// Inclusive range of particles per prong.
    pub particles_per_prong: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: Vec<ClassSpec>,
    /// pt range (GeV) of prong particles, drawn uniformly.
    pub pt: (f64, f64),
    /// Inclusive range of diffuse soft particles per jet.
    pub noise_particles: (usize, usize),
    pub noise_pt: (f64, f64),
    /// Soft particles are uniform in a disc of this radius.
    pub noise_radius: f64,
}

impl Default for SynthSpec {
    /// Two classes: a single central prong against three prongs at
    /// increasing distance from the axis.
    fn default() -> Self {
        Self {
            classes: vec![
                ClassSpec {
                    prongs: 1,
                    radius: 0.0,
                    radius_step: 0.0,
                    spread: 0.05,
                    particles_per_prong: (8, 16),
                },
                ClassSpec {
                    prongs: 3,
                    radius: 0.12,
                    radius_step: 0.8,
                    spread: 0.03,
                    particles_per_prong: (3, 6),
                },
            ],
            pt: (2.0, 4.0),
            noise_particles: (6, 12),
            noise_pt: (1.1, 2.0),
            noise_radius: 0.4,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return config_err(format!("need at least two classes, got {}", self.classes.len()));
        }
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi;
        if !range_ok(self.pt) || !range_ok(self.noise_pt) {
            return config_err("pt ranges must be finite, non-negative and ordered");
        }
        if self.noise_particles.0 > self.noise_particles.1 {
            return config_err("noise particle range is reversed");
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.prongs == 0 || c.particles_per_prong.0 == 0 || c.particles_per_prong.0 > c.particles_per_prong.1 {
                return config_err(format!("class {i} needs at least one prong and a valid particle range"));
            }
            if !(c.spread >= 0.0 && c.radius >= 0.0 && c.radius_step >= 0.0) {
                return config_err(format!("class {i} has a negative geometry parameter"));
            }
        }
        Ok(())
    }
}

/// Draws `n_jets` labelled jets; identical seeds give identical datasets.
pub fn generate_synthetic(seed: u64, n_jets: usize, spec: &SynthSpec) -> Result<Vec<Jet>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut jets = Vec::with_capacity(n_jets);
    for _ in 0..n_jets {
        let label = rng.random_range(0..spec.classes.len());
        let class = &spec.classes[label];
        let mut particles = Vec::new();
        let phase = rng.random_range(0.0..2.0 * PI);
        for k in 0..class.prongs {
            let angle = phase + 2.0 * PI * k as f64 / class.prongs as f64 + rng.random_range(-0.3..0.3);
            let r = class.radius * (1.0 + k as f64 * class.radius_step);
            let (ce, cp) = (r * angle.cos(), r * angle.sin());
            let count = rng.random_range(class.particles_per_prong.0..=class.particles_per_prong.1);
            for _ in 0..count {
                let deta = ce + class.spread * unit.sample(&mut rng);
                let dphi = cp + class.spread * unit.sample(&mut rng);
                let pt = rng.random_range(spec.pt.0..=spec.pt.1);
                particles.push(Particle::new(pt, deta, dphi)?);
            }
        }
        let noise = rng.random_range(spec.noise_particles.0..=spec.noise_particles.1);
        for _ in 0..noise {
            let r = spec.noise_radius * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..2.0 * PI);
            let pt = rng.random_range(spec.noise_pt.0..=spec.noise_pt.1);
            particles.push(Particle::new(pt, r * a.cos(), r * a.sin())?);
        }
        jets.push(Jet::new(particles, label));
    }
    Ok(jets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = SynthSpec::default();
        assert_eq!(
            generate_synthetic(11, 50, &spec).unwrap(),
            generate_synthetic(11, 50, &spec).unwrap()
        );
        assert_ne!(
            generate_synthetic(11, 50, &spec).unwrap(),
            generate_synthetic(12, 50, &spec).unwrap()
        );
    }

    #[test]
    fn empty() {
        assert!(generate_synthetic(0, 0, &SynthSpec::default()).unwrap().is_empty());
    }

    #[test]
    fn one_class_is_rejected() {
        let mut spec = SynthSpec::default();
        spec.classes.truncate(1);
        assert!(matches!(generate_synthetic(0, 1, &spec), Err(crate::Error::Config(_))));
    }
}
