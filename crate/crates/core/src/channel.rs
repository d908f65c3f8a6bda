//! Narrowband Saleh-Valenzuela channel for a BS equipped with a uniform
//! linear array, the DFT beam codebook, and the beam-selection oracle.
//!
//! Everything in here is a pure function of its inputs and works in 64-bit
//! complex arithmetic; the oracle is the ground truth for every metric the
//! evaluation harness reports.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("angle of departure {0} rad is outside the open sector (-pi/2, pi/2)")]
    AodOutOfSector(f64),
    #[error("beam index {index} out of range for a codebook of {num_beams} beams")]
    BeamIndex { index: usize, num_beams: usize },
    #[error("shape mismatch: expected length {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("invalid channel: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ChannelError>;

/// One propagation path of a snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathComponent {
    pub aod_rad: f64,
    pub complex_gain: Complex64,
    /// Linear-scale path loss, strictly positive.
    pub path_loss: f64,
}

impl PathComponent {
    pub fn new(aod_rad: f64, complex_gain: Complex64, path_loss: f64) -> Result<Self> {
        check_aod(aod_rad)?;
        if !(path_loss > 0.0) || !path_loss.is_finite() {
            return Err(ChannelError::Invalid(format!(
                "path loss must be positive and finite, got {path_loss}"
            )));
        }
        Ok(Self {
            aod_rad,
            complex_gain,
            path_loss,
        })
    }

    /// Effective amplitude `|alpha| * sqrt(1 / rho)`.
    pub fn amplitude(&self) -> f64 {
        self.complex_gain.norm() * (1.0 / self.path_loss).sqrt()
    }
}

/// Multipath state of one 16 ms slot. `paths[0]` is the LOS path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSnapshot {
    pub slot_index: usize,
    pub paths: Vec<PathComponent>,
}

impl ChannelSnapshot {
    pub fn new(slot_index: usize, paths: Vec<PathComponent>) -> Result<Self> {
        let snap = Self { slot_index, paths };
        snap.validate()?;
        Ok(snap)
    }

    /// Checks the path list is nonempty, every path is well formed and the
    /// LOS path dominates.
    pub fn validate(&self) -> Result<()> {
        let los = self
            .paths
            .first()
            .ok_or_else(|| ChannelError::Invalid("snapshot has no paths".into()))?;
        for p in &self.paths {
            check_aod(p.aod_rad)?;
            if !(p.path_loss > 0.0) {
                return Err(ChannelError::Invalid(format!(
                    "path loss must be positive, got {}",
                    p.path_loss
                )));
            }
        }
        let los_amp = los.amplitude();
        if let Some(p) = self.paths[1..].iter().find(|p| p.amplitude() > los_amp) {
            return Err(ChannelError::Invalid(format!(
                "LOS amplitude {los_amp} is not dominant (NLOS path at {} rad has {})",
                p.aod_rad,
                p.amplitude()
            )));
        }
        Ok(())
    }

    pub fn los(&self) -> &PathComponent {
        &self.paths[0]
    }
}

/// DFT codebook of `num_beams` beams for an `num_antennas`-element ULA.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub num_antennas: usize,
    pub num_beams: usize,
    pub antenna_spacing_over_wavelength: f64,
}

impl Codebook {
    /// Half-wavelength spaced codebook.
    pub fn new(num_antennas: usize, num_beams: usize) -> Result<Self> {
        Self::with_spacing(num_antennas, num_beams, 0.5)
    }

    pub fn with_spacing(num_antennas: usize, num_beams: usize, spacing: f64) -> Result<Self> {
        if num_antennas == 0 || num_beams == 0 {
            return Err(ChannelError::Invalid(format!(
                "codebook needs at least one antenna and one beam (M={num_antennas}, Q={num_beams})"
            )));
        }
        if !(spacing > 0.0) {
            return Err(ChannelError::Invalid(format!(
                "antenna spacing must be positive, got {spacing}"
            )));
        }
        Ok(Self {
            num_antennas,
            num_beams,
            antenna_spacing_over_wavelength: spacing,
        })
    }

    pub fn beam(&self, q: usize) -> Result<Vec<Complex64>> {
        codebook_beam(q, self)
    }
}

fn check_aod(aod_rad: f64) -> Result<()> {
    if aod_rad.is_finite() && aod_rad.abs() < FRAC_PI_2 {
        Ok(())
    } else {
        Err(ChannelError::AodOutOfSector(aod_rad))
    }
}

/// ULA response `exp(j 2 pi m (d/lambda) sin(aod))`, m = 0..M-1, at d = lambda/2.
pub fn steering_vector(aod_rad: f64, m_antennas: usize) -> Result<Vec<Complex64>> {
    steering_vector_with_spacing(aod_rad, m_antennas, 0.5)
}

pub fn steering_vector_with_spacing(
    aod_rad: f64,
    m_antennas: usize,
    spacing: f64,
) -> Result<Vec<Complex64>> {
    check_aod(aod_rad)?;
    if m_antennas == 0 {
        return Err(ChannelError::Invalid("array needs at least one antenna".into()));
    }
    let phase_step = 2.0 * PI * spacing * aod_rad.sin();
    Ok((0..m_antennas)
        .map(|m| {
            if m == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::from_polar(1.0, phase_step * m as f64)
            }
        })
        .collect())
}

/// Beam position `q / Q` that a half-wavelength ULA steers toward `aod_rad`:
/// `sin(aod) / 2`, wrapped into `[0, 1)`.
pub fn spatial_frequency(aod_rad: f64) -> f64 {
    (0.5 * aod_rad.sin()).rem_euclid(1.0)
}

/// The q-th DFT beam, `(1/sqrt(M)) exp(j 2 pi m q / Q)`.
pub fn codebook_beam(q: usize, cb: &Codebook) -> Result<Vec<Complex64>> {
    if q >= cb.num_beams {
        return Err(ChannelError::BeamIndex {
            index: q,
            num_beams: cb.num_beams,
        });
    }
    let m_total = cb.num_antennas;
    let scale = 1.0 / (m_total as f64).sqrt();
    let q_total = cb.num_beams as u64;
    Ok((0..m_total)
        .map(|m| {
            // Reduce m*q mod Q in integers so the phase stays exact for large arrays.
            let k = (m as u64 * q as u64) % q_total;
            let phase = 2.0 * PI * k as f64 / q_total as f64;
            Complex64::from_polar(scale, phase)
        })
        .collect())
}

/// `h = sum_l sqrt(1/rho_l) alpha_l conj(a(phi_l))`.
pub fn channel_vector(snap: &ChannelSnapshot, m_antennas: usize) -> Result<Vec<Complex64>> {
    let mut h = vec![Complex64::new(0.0, 0.0); m_antennas];
    for path in &snap.paths {
        let a = steering_vector(path.aod_rad, m_antennas)?;
        let coeff = path.complex_gain * (1.0 / path.path_loss).sqrt();
        for (hm, am) in h.iter_mut().zip(&a) {
            *hm += coeff * am.conj();
        }
    }
    Ok(h)
}

/// `|h^T f|^2` with an unconjugated transpose.
pub fn beam_gain(h: &[Complex64], f: &[Complex64]) -> Result<f64> {
    if h.len() != f.len() {
        return Err(ChannelError::Shape {
            expected: h.len(),
            actual: f.len(),
        });
    }
    let inner: Complex64 = h.iter().zip(f).map(|(a, b)| a * b).sum();
    Ok(inner.norm_sqr())
}

/// Gains of every beam in the codebook, indexed by beam.
pub fn gain_scan(h: &[Complex64], cb: &Codebook) -> Result<Vec<f64>> {
    if h.len() != cb.num_antennas {
        return Err(ChannelError::Shape {
            expected: cb.num_antennas,
            actual: h.len(),
        });
    }
    (0..cb.num_beams)
        .map(|q| beam_gain(h, &codebook_beam(q, cb)?))
        .collect()
}

fn argmax_lowest(gains: &[f64]) -> usize {
    let mut best = 0;
    for (q, &g) in gains.iter().enumerate().skip(1) {
        if g > gains[best] {
            best = q;
        }
    }
    best
}

/// Beam index maximizing `|h^T f|^2`; exact ties resolve to the lowest index.
pub fn optimal_beam(h: &[Complex64], cb: &Codebook) -> Result<usize> {
    Ok(argmax_lowest(&gain_scan(h, cb)?))
}

/// Best beam among those within `half_width` (circularly) of `center`.
/// A half-width covering the codebook is a full scan.
pub fn optimal_beam_near(
    h: &[Complex64],
    cb: &Codebook,
    center: usize,
    half_width: usize,
) -> Result<usize> {
    let q_total = cb.num_beams;
    if center >= q_total {
        return Err(ChannelError::BeamIndex {
            index: center,
            num_beams: q_total,
        });
    }
    if 2 * half_width + 1 >= q_total {
        return optimal_beam(h, cb);
    }
    let mut best = center;
    let mut best_gain = beam_gain(h, &codebook_beam(center, cb)?)?;
    // Candidates in ascending index order so ties keep the lowest index.
    let mut candidates: Vec<usize> = (1..=half_width)
        .flat_map(|k| [(center + k) % q_total, (center + q_total - k) % q_total])
        .collect();
    candidates.sort_unstable();
    for q in candidates {
        let g = beam_gain(h, &codebook_beam(q, cb)?)?;
        if g > best_gain || (g == best_gain && q < best) {
            best = q;
            best_gain = g;
        }
    }
    Ok(best)
}

/// Gain of `predicted_q` relative to the optimal beam; 1 for an all-zero channel.
pub fn normalized_gain(h: &[Complex64], predicted_q: usize, cb: &Codebook) -> Result<f64> {
    if predicted_q >= cb.num_beams {
        return Err(ChannelError::BeamIndex {
            index: predicted_q,
            num_beams: cb.num_beams,
        });
    }
    let gains = gain_scan(h, cb)?;
    Ok(ratio_to_best(&gains, predicted_q))
}

/// Normalized gain from a precomputed [`gain_scan`].
pub fn ratio_to_best(gains: &[f64], q: usize) -> f64 {
    let best = gains[argmax_lowest(gains)];
    if best <= 0.0 {
        1.0
    } else {
        (gains[q] / best).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn assert_vec_close(a: &[Complex64], b: &[Complex64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).norm() < tol, "{x} vs {y}");
        }
    }

    fn single_path(aod: f64, gain: f64, loss: f64) -> ChannelSnapshot {
        ChannelSnapshot::new(0, vec![PathComponent::new(aod, c(gain, 0.0), loss).unwrap()]).unwrap()
    }

    #[test]
    fn spatial_frequency_points_at_the_best_beam() {
        let cb = Codebook::new(32, 32).unwrap();
        for aod in [-1.3, -0.4, -0.01, 0.15, 0.7, 1.2] {
            let h = channel_vector(&single_path(aod, 1.0, 1.0), 32).unwrap();
            let gains = gain_scan(&h, &cb).unwrap();
            let best = (0..32).fold(0, |b, q| if gains[q] > gains[b] { q } else { b });
            let q = (spatial_frequency(aod) * 32.0).round() as usize % 32;
            assert_eq!(q, best, "aod {aod}");
        }
    }

    #[test]
    fn steering_examples() {
        assert_vec_close(&steering_vector(0.0, 4).unwrap(), &[c(1.0, 0.0); 4], TOL);
        assert_vec_close(
            &steering_vector(PI / 6.0, 2).unwrap(),
            &[c(1.0, 0.0), c(0.0, 1.0)],
            1e-12,
        );
        assert_eq!(steering_vector(1.2, 1).unwrap(), vec![c(1.0, 0.0)]);
        assert_eq!(steering_vector(0.7, 5).unwrap()[0], c(1.0, 0.0));
    }

    #[test]
    fn steering_rejects_sector_edges() {
        assert!(matches!(
            steering_vector(FRAC_PI_2, 4),
            Err(ChannelError::AodOutOfSector(_))
        ));
        assert!(steering_vector(-FRAC_PI_2, 4).is_err());
        assert!(steering_vector(f64::NAN, 4).is_err());
    }

    #[test]
    fn codebook_examples() {
        let cb = Codebook::new(4, 4).unwrap();
        assert_vec_close(&codebook_beam(0, &cb).unwrap(), &[c(0.5, 0.0); 4], TOL);
        assert_vec_close(
            &codebook_beam(1, &cb).unwrap(),
            &[c(0.5, 0.0), c(0.0, 0.5), c(-0.5, 0.0), c(0.0, -0.5)],
            TOL,
        );
        let cb2 = Codebook::new(2, 4).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_vec_close(&codebook_beam(2, &cb2).unwrap(), &[c(s, 0.0), c(-s, 0.0)], TOL);
        assert_eq!(
            codebook_beam(4, &cb),
            Err(ChannelError::BeamIndex {
                index: 4,
                num_beams: 4
            })
        );
    }

    #[test]
    fn channel_examples() {
        let h = channel_vector(&single_path(0.0, 1.0, 1.0), 4).unwrap();
        assert_vec_close(&h, &[c(1.0, 0.0); 4], TOL);
        let h = channel_vector(&single_path(0.0, 1.0, 4.0), 2).unwrap();
        assert_vec_close(&h, &[c(0.5, 0.0); 2], TOL);
        let p = PathComponent::new(0.0, c(1.0, 0.0), 1.0).unwrap();
        let snap = ChannelSnapshot::new(0, vec![p, p]).unwrap();
        assert_vec_close(&channel_vector(&snap, 2).unwrap(), &[c(2.0, 0.0); 2], TOL);
    }

    #[test]
    fn gain_examples() {
        let cb = Codebook::new(4, 4).unwrap();
        let f0 = codebook_beam(0, &cb).unwrap();
        assert!((beam_gain(&[c(1.0, 0.0); 4], &f0).unwrap() - 4.0).abs() < TOL);
        assert_eq!(beam_gain(&[c(0.0, 0.0); 4], &f0).unwrap(), 0.0);
        let s = 1.0 / 2f64.sqrt();
        let g = beam_gain(&[c(1.0, 0.0), c(-1.0, 0.0)], &[c(s, 0.0), c(s, 0.0)]).unwrap();
        assert!(g.abs() < TOL);
        assert!(matches!(
            beam_gain(&[c(1.0, 0.0)], &f0),
            Err(ChannelError::Shape { .. })
        ));
    }

    #[test]
    fn optimal_beam_examples() {
        let cb = Codebook::new(16, 16).unwrap();
        let h = channel_vector(&single_path(0.0, 1.0, 1.0), 16).unwrap();
        assert_eq!(optimal_beam(&h, &cb).unwrap(), 0);

        let h = channel_vector(&single_path(0.5f64.asin(), 1.0, 1.0), 16).unwrap();
        // independent scan
        let mut best = (0, f64::MIN);
        for q in 0..16 {
            let mut acc = c(0.0, 0.0);
            for m in 0..16 {
                let f = Complex64::from_polar(0.25, 2.0 * PI * (m * q) as f64 / 16.0);
                acc += h[m] * f;
            }
            if acc.norm_sqr() > best.1 {
                best = (q, acc.norm_sqr());
            }
        }
        assert_eq!(best.0, 4);
        assert_eq!(optimal_beam(&h, &cb).unwrap(), 4);

        let zero = vec![c(0.0, 0.0); 8];
        assert_eq!(optimal_beam(&zero, &Codebook::new(8, 8).unwrap()).unwrap(), 0);
    }

    #[test]
    fn normalized_gain_examples() {
        let cb = Codebook::new(16, 16).unwrap();
        let h = channel_vector(&single_path(0.5f64.asin(), 1.0, 1.0), 16).unwrap();
        let q_star = optimal_beam(&h, &cb).unwrap();
        assert_eq!(normalized_gain(&h, q_star, &cb).unwrap(), 1.0);

        let g0 = beam_gain(&h, &codebook_beam(0, &cb).unwrap()).unwrap();
        let g4 = beam_gain(&h, &codebook_beam(4, &cb).unwrap()).unwrap();
        let ng = normalized_gain(&h, 0, &cb).unwrap();
        assert!((ng - g0 / g4).abs() < 1e-12);
        assert!(ng < 1.0);

        let zero = vec![c(0.0, 0.0); 16];
        assert_eq!(normalized_gain(&zero, 7, &cb).unwrap(), 1.0);
        assert!(normalized_gain(&h, 16, &cb).is_err());
    }

    #[test]
    fn neighborhood_search() {
        let cb = Codebook::new(16, 16).unwrap();
        let h = channel_vector(&single_path(0.5f64.asin(), 1.0, 1.0), 16).unwrap();
        assert_eq!(optimal_beam_near(&h, &cb, 2, 8).unwrap(), 4);
        assert_eq!(optimal_beam_near(&h, &cb, 2, 2).unwrap(), 4);
        assert_eq!(optimal_beam_near(&h, &cb, 2, 1).unwrap(), 3);
        assert_eq!(optimal_beam_near(&h, &cb, 9, 0).unwrap(), 9);
    }

    #[test]
    fn nlos_dominance_is_enforced() {
        let los = PathComponent::new(0.1, c(1.0, 0.0), 4.0).unwrap();
        let nlos = PathComponent::new(0.3, c(1.0, 0.0), 1.0).unwrap();
        assert!(ChannelSnapshot::new(0, vec![los, nlos]).is_err());
        assert!(ChannelSnapshot::new(0, vec![]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn path_strategy() -> impl Strategy<Value = PathComponent> {
            (-1.5f64..1.5, -2.0f64..2.0, -2.0f64..2.0, 0.1f64..10.0).prop_map(|(a, re, im, l)| {
                PathComponent {
                    aod_rad: a,
                    complex_gain: c(re, im),
                    path_loss: l,
                }
            })
        }

        proptest! {
            #[test]
            fn codebook_unit_norm(m in 1usize..80, q_total in 1usize..80, q_seed in 0usize..1000) {
                let cb = Codebook::new(m, q_total).unwrap();
                let f = codebook_beam(q_seed % q_total, &cb).unwrap();
                let norm: f64 = f.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-6);
            }

            #[test]
            fn steering_conjugate_symmetry(phi in -1.55f64..1.55, m in 1usize..64) {
                let a = steering_vector(phi, m).unwrap();
                let b = steering_vector(-phi, m).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x.conj() - y).norm() < 1e-9);
                }
            }

            #[test]
            fn channel_is_linear_in_paths(
                p1 in prop::collection::vec(path_strategy(), 1..4),
                p2 in prop::collection::vec(path_strategy(), 1..4),
                m in 1usize..32,
            ) {
                let s1 = ChannelSnapshot { slot_index: 0, paths: p1.clone() };
                let s2 = ChannelSnapshot { slot_index: 0, paths: p2.clone() };
                let both = ChannelSnapshot { slot_index: 0, paths: [p1, p2].concat() };
                let h1 = channel_vector(&s1, m).unwrap();
                let h2 = channel_vector(&s2, m).unwrap();
                let h = channel_vector(&both, m).unwrap();
                for k in 0..m {
                    prop_assert!((h1[k] + h2[k] - h[k]).norm() < 1e-6);
                }
            }

            #[test]
            fn optimum_matches_independent_scan_and_gain_bounds(
                paths in prop::collection::vec(path_strategy(), 1..4),
                m in 1usize..24,
                q_total in 1usize..24,
                pred in 0usize..1000,
            ) {
                let snap = ChannelSnapshot { slot_index: 0, paths };
                let cb = Codebook::new(m, q_total).unwrap();
                let h = channel_vector(&snap, m).unwrap();
                let q_star = optimal_beam(&h, &cb).unwrap();
                let gains: Vec<f64> = (0..q_total)
                    .map(|q| {
                        let mut acc = c(0.0, 0.0);
                        for k in 0..m {
                            let f = Complex64::from_polar(
                                1.0 / (m as f64).sqrt(),
                                2.0 * PI * (k * q) as f64 / q_total as f64,
                            );
                            acc += h[k] * f;
                        }
                        acc.norm_sqr()
                    })
                    .collect();
                let max = gains.iter().cloned().fold(f64::MIN, f64::max);
                prop_assert!(gains[q_star] >= max * (1.0 - 1e-9) - 1e-12);
                let q = pred % q_total;
                let ng = normalized_gain(&h, q, &cb).unwrap();
                prop_assert!((0.0..=1.0).contains(&ng));
                if q == q_star {
                    prop_assert_eq!(ng, 1.0);
                }
            }
        }
    }
}
