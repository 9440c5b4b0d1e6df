use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DetectorGeometry, EventGenError};
use crate::InteractionClass;

/// Minimum sampled neutrino energy in GeV.
pub const ENERGY_FLOOR_GEV: f64 = 0.5;
/// Maximum neutrino energy in GeV.
pub const ENERGY_CEIL_GEV: f64 = 10.0;
/// Inset from every detector face for sampled vertices, in meters.
pub const VERTEX_MARGIN_M: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    NuE,
    NuMu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Current {
    CC,
    NC,
}

/// Generator-level ground truth for one event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventTruth {
    pub flavor: Flavor,
    pub current: Current,
    pub energy_gev: f64,
    pub vertex: [f64; 3],
    pub interaction_class: InteractionClass,
}

impl EventTruth {
    pub fn new(flavor: Flavor, current: Current, energy_gev: f64, vertex: [f64; 3]) -> Self {
        Self { flavor, current, energy_gev, vertex, interaction_class: classify(flavor, current) }
    }

    /// Checks the class is consistent and the energy is in range.
    pub fn is_consistent(&self) -> bool {
        self.interaction_class == classify(self.flavor, self.current)
            && self.energy_gev > 0.0
            && self.energy_gev <= ENERGY_CEIL_GEV
    }
}

pub fn classify(flavor: Flavor, current: Current) -> InteractionClass {
    match (flavor, current) {
        (Flavor::NuE, Current::CC) => InteractionClass::NueCc,
        (Flavor::NuMu, Current::CC) => InteractionClass::NumuCc,
        (_, Current::NC) => InteractionClass::Nc,
    }
}

/// Event composition: charged- vs neutral-current fractions and the share of
/// electron-flavour events (applied to both currents).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionSpec {
    pub cc_fraction: f64,
    pub nc_fraction: f64,
    pub nue_share: f64,
}

impl Default for CompositionSpec {
    fn default() -> Self {
        Self { cc_fraction: 0.74, nc_fraction: 0.26, nue_share: 0.5 }
    }
}

impl CompositionSpec {
    pub fn validate(&self) -> Result<(), EventGenError> {
        for (name, v) in [
            ("cc_fraction", self.cc_fraction),
            ("nc_fraction", self.nc_fraction),
            ("nue_share", self.nue_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(EventGenError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        let sum = self.cc_fraction + self.nc_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(EventGenError::Config(format!(
                "composition fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Expected fraction of each interaction class, in class-index order.
    pub fn class_fractions(&self) -> [f64; 3] {
        [
            self.cc_fraction * self.nue_share,
            self.cc_fraction * (1.0 - self.nue_share),
            self.nc_fraction,
        ]
    }
}

/// Draws one event's truth. Energy is uniform in (0.5, 10] GeV and the vertex
/// uniform inside the detector inset by [`VERTEX_MARGIN_M`].
pub fn sample_truth(
    rng_seed: u64,
    composition: &CompositionSpec,
    geometry: &DetectorGeometry,
) -> Result<EventTruth, EventGenError> {
    composition.validate()?;
    let mut rng = crate::seed::rng(rng_seed, &[0x7472_7574]);
    let current = if rng.random::<f64>() < composition.cc_fraction { Current::CC } else { Current::NC };
    let flavor = if rng.random::<f64>() < composition.nue_share { Flavor::NuE } else { Flavor::NuMu };
    // random() is in [0, 1), so 1 - u is in (0, 1] and the energy in (floor, ceil].
    let u: f64 = rng.random();
    let energy = ENERGY_FLOOR_GEV + (ENERGY_CEIL_GEV - ENERGY_FLOOR_GEV) * (1.0 - u);
    let mut vertex = [0.0; 3];
    for (v, extent) in vertex.iter_mut().zip(geometry.extent()) {
        let lo = VERTEX_MARGIN_M.min(extent / 2.0);
        *v = rng.random_range(lo..=extent - lo);
    }
    Ok(EventTruth::new(flavor, current, energy, vertex))
}
