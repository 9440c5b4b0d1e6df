//! Toy neutrino event generator.
//!
//! An event is a pure function of `(base_seed, event_id, geometry,
//! composition)`: truth sampling, deposit growth and rendering each draw from
//! their own derived RNG stream, so disjoint id ranges can be generated on
//! any number of workers and concatenated without changing a single byte.

mod deposit;
mod geometry;
pub mod probe;
mod render;
mod truth;

pub use deposit::{deposit_event, Deposit, DepositCloud, MUON_RANGE_M_PER_GEV};
pub use geometry::{DetectorGeometry, RenderPitch};
pub use render::{
    encode_intensity, pixel_to_detector, project_and_render, quantize, render_energy, EnergyMap, Grid,
    PixelMapPair, Plane, INTENSITY_E0_MEV, INTENSITY_EMAX_MEV,
};
pub use truth::{
    classify, sample_truth, CompositionSpec, Current, EventTruth, Flavor, ENERGY_CEIL_GEV,
    ENERGY_FLOOR_GEV, VERTEX_MARGIN_M,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventGenError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Everything needed to generate events deterministically.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub geometry: DetectorGeometry,
    pub composition: CompositionSpec,
    pub base_seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), EventGenError> {
        self.geometry.validate()?;
        self.composition.validate()
    }
}

/// Generates event `event_id`.
pub fn generate_event(config: &GeneratorConfig, event_id: u64) -> Result<PixelMapPair, EventGenError> {
    let truth_seed = crate::seed::derive(config.base_seed, &[event_id, 0]);
    let deposit_seed = crate::seed::derive(config.base_seed, &[event_id, 1]);
    let truth = sample_truth(truth_seed, &config.composition, &config.geometry)?;
    let cloud = deposit_event(&truth, deposit_seed, &config.geometry);
    project_and_render(&cloud, &config.geometry, truth, event_id)
}

/// Generates the id range `[start, end)` using the data-parallel layer.
pub fn generate_range(config: &GeneratorConfig, start: u64, end: u64) -> Result<Vec<PixelMapPair>, EventGenError> {
    config.validate()?;
    crate::par::map_range(start, end, |id| generate_event(config, id)).into_iter().collect()
}

/// Streaming generator over `[0, n_events)`. Events are produced in chunks of
/// `chunk` ids (each chunk generated in parallel), so resident memory is
/// bounded by the chunk size rather than `n_events`.
pub struct DatasetStream {
    config: GeneratorConfig,
    next_id: u64,
    n_events: u64,
    chunk: u64,
    buffer: std::vec::IntoIter<PixelMapPair>,
}

impl Iterator for DatasetStream {
    type Item = Result<PixelMapPair, EventGenError>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Some(pair) = self.buffer.next() {
            return Some(Ok(pair));
        }
        if self.next_id >= self.n_events {
            return None;
        }
        let end = (self.next_id + self.chunk).min(self.n_events);
        match generate_range(&self.config, self.next_id, end) {
            Ok(events) => {
                self.next_id = end;
                self.buffer = events.into_iter();
                self.buffer.next().map(Ok)
            }
            Err(e) => {
                self.next_id = self.n_events;
                Some(Err(e))
            }
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.n_events - self.next_id) as usize + self.buffer.len();
        (left, Some(left))
    }
}

pub fn generate_dataset(config: GeneratorConfig, n_events: u64) -> Result<DatasetStream, EventGenError> {
    if n_events == 0 {
        return Err(EventGenError::Config("n_events must be positive".into()));
    }
    config.validate()?;
    let chunk = (4 * crate::par::current_num_threads()).max(8) as u64;
    Ok(DatasetStream { config, next_id: 0, n_events, chunk, buffer: Vec::new().into_iter() })
}
