//! Particle and jet data model, ordering, truncation, scaling and I/O.

mod io;
mod morton;
mod partition;
mod scaler;
mod sort;
mod synth;

pub use io::{read_jets, read_jets_from, write_jets, write_jets_to, write_padded_tensor};
pub use morton::{morton_code, morton_sort};
pub use partition::{partition_bounds, partition_segments, PartitionLayout};
pub use scaler::PtScaler;
pub use sort::{sort_jet, truncate_pad};
pub use synth::{generate_synthetic, ClassSpec, SynthSpec};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(phi: f64) -> f64 {
    let mut x = if phi.abs() > 4.0 * PI {
        (phi + PI).rem_euclid(2.0 * PI) - PI
    } else {
        phi
    };
    while x > PI {
        x -= 2.0 * PI;
    }
    while x <= -PI {
        x += 2.0 * PI;
    }
    x
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Particle {
    /// Transverse momentum in GeV.
    pub pt: f64,
    pub deta: f64,
    /// Azimuthal offset in radians, wrapped into `(-pi, pi]`.
    pub dphi: f64,
    pub dr: f64,
    pub kt: f64,
}

impl Particle {
    /// Builds a particle and derives `dr` and `kt`.
    pub fn new(pt: f64, deta: f64, dphi: f64) -> Result<Self> {
        if !(pt.is_finite() && deta.is_finite() && dphi.is_finite()) {
            return data_err(format!("non-finite particle ({pt}, {deta}, {dphi})"));
        }
        if pt < 0.0 {
            return data_err(format!("negative pt {pt}"));
        }
        let dphi = wrap_angle(dphi);
        let dr = deta.hypot(dphi);
        Ok(Self {
            pt,
            deta,
            dphi,
            dr,
            kt: pt * dr,
        })
    }

    pub fn pad() -> Self {
        Self::default()
    }

    pub fn is_pad(&self) -> bool {
        self.pt == 0.0 && self.deta == 0.0 && self.dphi == 0.0
    }

    pub fn features(&self) -> [f64; 3] {
        [self.pt, self.deta, self.dphi]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Jet {
    pub particles: Vec<Particle>,
    pub label: usize,
}

impl Jet {
    pub fn new(particles: Vec<Particle>, label: usize) -> Self {
        Self { particles, label }
    }

    /// Number of non-padding particles.
    pub fn multiplicity(&self) -> usize {
        self.particles.iter().filter(|p| !p.is_pad()).count()
    }

    /// True when pad rows form a contiguous suffix.
    pub fn padding_is_suffix(&self) -> bool {
        let first_pad = self.particles.iter().position(Particle::is_pad);
        match first_pad {
            None => true,
            Some(i) => self.particles[i..].iter().all(Particle::is_pad),
        }
    }

    /// `[n, 3]` feature matrix `(pt, deta, dphi)`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .particles
            .iter()
            .flat_map(|p| p.features())
            .map(T::from_f64)
            .collect();
        Tensor::new(vec![self.particles.len(), 3], data).expect("three features per particle")
    }
}

/// Stacks equally sized jets into a `[B, n, 3]` batch.
pub fn batch_tensor<T: Scalar>(jets: &[&Jet]) -> Result<Tensor<T>> {
    let n = jets.first().map_or(0, |j| j.particles.len());
    if let Some(bad) = jets.iter().find(|j| j.particles.len() != n) {
        return data_err(format!(
            "jets in a batch must share one length; found {} and {n}",
            bad.particles.len()
        ));
    }
    let data = jets
        .iter()
        .flat_map(|j| j.particles.iter().flat_map(|p| p.features()))
        .map(T::from_f64)
        .collect();
    Tensor::new(vec![jets.len(), n, 3], data)
}

/// Truncates and pads every jet to `n` rows (dropping `pt <= pt_min`), then
/// orders it by `key`.
pub fn prepare_jets(jets: &[Jet], n: usize, pt_min: f64, key: SortKey) -> Vec<Jet> {
    jets.iter()
        .map(|j| sort_jet(&truncate_pad(j, n, pt_min), key))
        .collect()
}

/// Ordering applied to the particles of a jet before it enters a model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortKey {
    Pt,
    #[default]
    Kt,
    Dr,
    Morton,
}

impl fmt::Display for SortKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SortKey::Pt => "pt",
            SortKey::Kt => "kt",
            SortKey::Dr => "dr",
            SortKey::Morton => "morton",
        })
    }
}

impl FromStr for SortKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pt" => Ok(SortKey::Pt),
            "kt" => Ok(SortKey::Kt),
            "dr" => Ok(SortKey::Dr),
            "morton" => Ok(SortKey::Morton),
            other => Err(Error::Config(format!(
                "unknown sort key `{other}` (expected pt, kt, dr or morton)"
            ))),
        }
    }
}
