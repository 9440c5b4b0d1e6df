//! Parametric energy-deposition model.
//!
//! Each class gets a characteristic topology:
//!
//! - muon-neutrino CC: a long minimum-ionizing track with multiple-scattering
//!   jitter plus a short hadronic cluster at the vertex;
//! - electron-neutrino CC: an electromagnetic shower whose longitudinal
//!   profile follows a gamma distribution in radiation lengths and whose
//!   transverse spread grows with depth, plus the hadronic cluster;
//! - NC: hadronic activity only, sometimes with displaced photon showers
//!   from a neutral pion.
//!
//! Numbers are liquid-argon-like but this is a topology generator, not a
//! transport code.

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal};
use serde::{Deserialize, Serialize};

use super::truth::{Current, EventTruth, Flavor};
use super::DetectorGeometry;

/// Track length per GeV of muon energy, in meters.
pub const MUON_RANGE_M_PER_GEV: f64 = 2.0;
const STEP_M: f64 = 0.0025;
const MIP_DEDX_MEV_PER_M: f64 = 210.0;
const PROTON_DEDX_MEV_PER_M: f64 = 600.0;
const RADIATION_LENGTH_M: f64 = 0.14;
const MOLIERE_RADIUS_M: f64 = 0.0905;
const CRITICAL_ENERGY_MEV: f64 = 32.84;
const PI0_PROBABILITY: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deposit {
    pub position: [f64; 3],
    pub energy_mev: f64,
}

/// Energy deposits for one event together with the vertex they were grown from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DepositCloud {
    pub vertex: [f64; 3],
    pub deposits: Vec<Deposit>,
}

impl DepositCloud {
    pub fn total_energy_mev(&self) -> f64 {
        self.deposits.iter().map(|d| d.energy_mev).sum()
    }

    /// Largest distance from the vertex over all deposits.
    pub fn max_extent_m(&self) -> f64 {
        self.deposits
            .iter()
            .map(|d| distance(d.position, self.vertex))
            .fold(0.0, f64::max)
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn add_scaled(p: [f64; 3], d: [f64; 3], s: f64) -> [f64; 3] {
    [p[0] + d[0] * s, p[1] + d[1] * s, p[2] + d[2] * s]
}

/// Orthonormal pair perpendicular to `d`.
fn perpendicular_basis(d: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(d, helper));
    let v = cross(d, u);
    (u, v)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn direction_from_angles(theta: f64, phi: f64) -> [f64; 3] {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

/// Forward-peaked lepton direction around the beam axis.
fn lepton_direction<R: Rng>(rng: &mut R) -> [f64; 3] {
    let theta = Normal::<f64>::new(0.0, 0.15).unwrap().sample(rng).abs().min(0.38);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    direction_from_angles(theta, phi)
}

fn hadron_direction<R: Rng>(rng: &mut R) -> [f64; 3] {
    let cos_theta: f64 = rng.random_range(-0.5..1.0);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    direction_from_angles(cos_theta.acos(), phi)
}

struct Builder<'a> {
    geometry: &'a DetectorGeometry,
    cloud: DepositCloud,
}

impl Builder<'_> {
    fn push(&mut self, position: [f64; 3], energy_mev: f64) -> bool {
        if energy_mev > 0.0 && self.geometry.contains(position) {
            self.cloud.deposits.push(Deposit { position, energy_mev });
            true
        } else {
            false
        }
    }

    /// Steps a charged track from `start`, stopping at `length` or the detector
    /// boundary. `kick` is the per-step Gaussian scattering angle.
    fn track<R: Rng>(
        &mut self,
        rng: &mut R,
        start: [f64; 3],
        dir: [f64; 3],
        length: f64,
        dedx: f64,
        kick: f64,
    ) {
        let landau = Gamma::new(4.0, 0.25).unwrap();
        let jitter = Normal::new(0.0, kick.max(1e-12)).unwrap();
        let mut pos = start;
        let mut dir = dir;
        let mut travelled = 0.0;
        while travelled < length {
            let step = STEP_M.min(length - travelled);
            let mid = add_scaled(pos, dir, step / 2.0);
            if !self.push(mid, dedx * step * landau.sample(rng)) {
                break;
            }
            pos = add_scaled(pos, dir, step);
            travelled += step;
            if kick > 0.0 {
                let (u, v) = perpendicular_basis(dir);
                let (a, b) = (jitter.sample(rng), jitter.sample(rng));
                dir = normalize([
                    dir[0] + a * u[0] + b * v[0],
                    dir[1] + a * u[1] + b * v[1],
                    dir[2] + a * u[2] + b * v[2],
                ]);
            }
        }
    }

    /// Electromagnetic shower of `energy_mev` starting at `start`.
    fn shower<R: Rng>(&mut self, rng: &mut R, start: [f64; 3], dir: [f64; 3], energy_mev: f64, with_stub: bool) {
        let mut remaining = energy_mev;
        if with_stub {
            // Ionization of the primary before the cascade develops.
            let stub = RADIATION_LENGTH_M * rng.random_range(0.3..1.0);
            let stub_energy = (stub * MIP_DEDX_MEV_PER_M).min(0.2 * energy_mev);
            self.track(rng, start, dir, stub, stub_energy / stub, 0.0);
            remaining -= stub_energy;
        }
        let t_max = ((energy_mev / CRITICAL_ENERGY_MEV).ln() - 0.5).max(0.5);
        let b = 0.5;
        let a = b * t_max + 1.0;
        let depth = Gamma::new(a, 1.0 / b).unwrap();
        let spots = (remaining / 2.0).clamp(30.0, 4000.0) as usize;
        let per_spot = remaining / spots as f64;
        let (u, v) = perpendicular_basis(dir);
        let unit = Normal::new(0.0, 1.0).unwrap();
        // Depth beyond which the sparse tail is dropped (containment cut).
        let t_cut = 3.0 * t_max + 2.0;
        for _ in 0..spots {
            let t = loop {
                let t = depth.sample(rng);
                if t <= t_cut {
                    break t;
                }
            };
            let sigma = 0.004 + 0.25 * MOLIERE_RADIUS_M * (t / t_max);
            let (du, dv) = (unit.sample(rng) * sigma, unit.sample(rng) * sigma);
            let along = t * RADIATION_LENGTH_M;
            let p = [
                start[0] + dir[0] * along + u[0] * du + v[0] * dv,
                start[1] + dir[1] * along + u[1] * du + v[1] * dv,
                start[2] + dir[2] * along + u[2] * du + v[2] * dv,
            ];
            self.push(p, per_spot * rng.random_range(0.5..1.5));
        }
    }

    /// Hadronic activity of `energy_gev` around the vertex: a few short,
    /// heavily ionizing prongs and a compact blob carrying the rest.
    fn hadronic<R: Rng>(&mut self, rng: &mut R, vertex: [f64; 3], energy_gev: f64) {
        let total = energy_gev * 1000.0;
        let n_prongs = 1 + (rng.random::<f64>() * (1.0 + 1.5 * energy_gev)).floor().min(4.0) as usize;
        let max_len = 0.10 + 0.25 * energy_gev.min(2.0);
        let mut used = 0.0;
        for _ in 0..n_prongs {
            let len = rng.random_range(0.03..max_len);
            let dedx = PROTON_DEDX_MEV_PER_M * rng.random_range(0.7..1.3);
            if used + len * dedx > 0.8 * total {
                break;
            }
            used += len * dedx;
            let dir = hadron_direction(rng);
            self.track(rng, vertex, dir, len, dedx, 0.01);
        }
        let blob = total - used;
        let spots = (blob / 3.0).clamp(10.0, 1500.0) as usize;
        let sigma = 0.015 + 0.02 * energy_gev.sqrt();
        let normal = Normal::new(0.0, sigma).unwrap();
        for _ in 0..spots {
            let p = [
                vertex[0] + normal.sample(rng),
                vertex[1] + normal.sample(rng),
                vertex[2] + normal.sample(rng).abs() * 0.8,
            ];
            self.push(p, blob / spots as f64 * rng.random_range(0.5..1.5));
        }
    }
}

/// Grows the deposit cloud for `truth`. The result is a pure function of
/// `(truth, rng_seed, geometry)`.
pub fn deposit_event(truth: &EventTruth, rng_seed: u64, geometry: &DetectorGeometry) -> DepositCloud {
    let mut rng = crate::seed::rng(rng_seed, &[0x6465_706f]);
    let mut b = Builder { geometry, cloud: DepositCloud { vertex: truth.vertex, deposits: Vec::new() } };
    let energy = truth.energy_gev;
    match truth.current {
        Current::CC => {
            let inelasticity = rng.random_range(0.05..0.5);
            let lepton = energy * (1.0 - inelasticity);
            let dir = lepton_direction(&mut rng);
            match truth.flavor {
                Flavor::NuMu => {
                    let length = MUON_RANGE_M_PER_GEV * lepton;
                    let kick = 13.6 / (lepton * 1000.0) * (STEP_M / RADIATION_LENGTH_M).sqrt();
                    b.track(&mut rng, truth.vertex, dir, length, MIP_DEDX_MEV_PER_M, kick);
                }
                Flavor::NuE => b.shower(&mut rng, truth.vertex, dir, lepton * 1000.0, true),
            }
            b.hadronic(&mut rng, truth.vertex, energy * inelasticity);
        }
        Current::NC => {
            let visible = energy * rng.random_range(0.2..=0.8);
            let mut hadronic = visible;
            if rng.random::<f64>() < PI0_PROBABILITY {
                let pi0 = 0.3 * visible;
                hadronic -= pi0;
                let gap = Exp::new(1.0 / (RADIATION_LENGTH_M * 9.0 / 7.0)).unwrap();
                let dir = hadron_direction(&mut rng);
                let split: f64 = rng.random_range(0.2..0.8);
                for (share, sign) in [(split, 1.0), (1.0 - split, -1.0)] {
                    let d = normalize([dir[0] * sign + 0.3, dir[1] * sign, dir[2].abs() + 0.2]);
                    let start = add_scaled(truth.vertex, d, gap.sample(&mut rng));
                    b.shower(&mut rng, start, d, pi0 * share * 1000.0, false);
                }
            }
            b.hadronic(&mut rng, truth.vertex, hadronic);
        }
    }
    if b.cloud.deposits.is_empty() {
        // Guarantees a nonempty cloud even if everything stepped outside.
        let e = energy * 1000.0 * 0.1;
        b.push(truth.vertex, e);
    }
    b.cloud
}
