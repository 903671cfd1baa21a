use std::cmp::Ordering;

use super::morton::morton_codes;
use super::{Jet, Particle, SortKey};

fn tie_break(a: &Particle, b: &Particle) -> Ordering {
    b.pt.total_cmp(&a.pt)
        .then_with(|| b.deta.total_cmp(&a.deta))
        .then_with(|| b.dphi.total_cmp(&a.dphi))
}

/// Orders the non-padding particles by `key` (descending, except Morton
/// codes which ascend), keeping pad rows at the end. Ties resolve on
/// `(pt, deta, dphi)` descending, so the result does not depend on the
/// input order.
pub fn sort_jet(jet: &Jet, key: SortKey) -> Jet {
    let (mut real, pads): (Vec<Particle>, Vec<Particle>) =
        jet.particles.iter().partition(|p| !p.is_pad());
    match key {
        SortKey::Pt => real.sort_by(tie_break),
        SortKey::Kt => real.sort_by(|a, b| b.kt.total_cmp(&a.kt).then_with(|| tie_break(a, b))),
        SortKey::Dr => real.sort_by(|a, b| b.dr.total_cmp(&a.dr).then_with(|| tie_break(a, b))),
        SortKey::Morton => {
            let points: Vec<[f64; 3]> = real.iter().map(|p| [p.deta, p.dphi, 0.0]).collect();
            let codes = morton_codes(&points);
            let mut keyed: Vec<(u64, Particle)> = codes.into_iter().zip(real).collect();
            keyed.sort_by(|(ca, a), (cb, b)| ca.cmp(cb).then_with(|| tie_break(a, b)));
            real = keyed.into_iter().map(|(_, p)| p).collect();
        }
    }
    real.extend(pads);
    Jet::new(real, jet.label)
}

/// Keeps the `n` highest-pt particles with `pt > pt_min` and zero-pads to
/// exactly `n` rows.
pub fn truncate_pad(jet: &Jet, n: usize, pt_min: f64) -> Jet {
    let mut kept: Vec<Particle> = jet
        .particles
        .iter()
        .filter(|p| !p.is_pad() && p.pt > pt_min)
        .copied()
        .collect();
    kept.sort_by(tie_break);
    kept.truncate(n);
    kept.resize(n, Particle::pad());
    Jet::new(kept, jet.label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(pt: f64, deta: f64, dphi: f64) -> Particle {
        Particle::new(pt, deta, dphi).unwrap()
    }

    #[test]
    fn singleton_unchanged() {
        let jet = Jet::new(vec![p(3.0, 0.1, -0.2)], 1);
        for key in [SortKey::Pt, SortKey::Kt, SortKey::Dr, SortKey::Morton] {
            assert_eq!(sort_jet(&jet, key), jet);
        }
    }

    #[test]
    fn hand_ranked_kt() {
        // kt = pt * dr: 1.0, 0.5, 4.0, 0.1, 2.6
        let parts = vec![
            p(2.0, 0.3, 0.4),
            p(10.0, 0.0, 0.05),
            p(8.0, 0.0, -0.5),
            p(1.0, 0.06, 0.08),
            p(2.0, 1.2, 0.5),
        ];
        let sorted = sort_jet(&Jet::new(parts.clone(), 0), SortKey::Kt);
        let expect = [2, 4, 0, 1, 3].map(|i| parts[i]);
        assert_eq!(sorted.particles, expect);
    }

    #[test]
    fn pads_stay_last() {
        let jet = Jet::new(vec![p(1.0, 0.1, 0.1), Particle::pad(), Particle::pad()], 0);
        let s = sort_jet(&jet, SortKey::Morton);
        assert!(s.padding_is_suffix());
    }

    #[test]
    fn truncate_keeps_highest() {
        let parts: Vec<Particle> = (0..200).map(|i| p(1.5 + i as f64, 0.01, 0.02)).collect();
        let t = truncate_pad(&Jet::new(parts, 0), 150, 1.0);
        assert_eq!(t.particles.len(), 150);
        assert!(t.particles.iter().all(|q| q.pt >= 51.5));
    }

    #[test]
    fn truncate_empty_and_threshold() {
        let t = truncate_pad(&Jet::default(), 4, 1.0);
        assert_eq!(t.particles, vec![Particle::pad(); 4]);
        let t = truncate_pad(&Jet::new(vec![p(0.5, 0.1, 0.1), p(2.0, 0.1, 0.1)], 0), 3, 1.0);
        assert_eq!(t.multiplicity(), 1);
    }
}
