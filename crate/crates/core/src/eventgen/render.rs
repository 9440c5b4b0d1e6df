use super::deposit::DepositCloud;
use super::truth::EventTruth;
use super::{DetectorGeometry, EventGenError};

/// Charge scale of the logarithmic intensity encoding, MeV.
pub const INTENSITY_E0_MEV: f64 = 0.5;
/// Per-pixel energy mapped to full scale (255), MeV.
pub const INTENSITY_EMAX_MEV: f64 = 500.0;

/// Square 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub size: usize,
    pub data: Vec<u8>,
}

impl Grid {
    pub fn zeros(size: usize) -> Self {
        Self { size, data: vec![0; size * size] }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.size + col]
    }

    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// `(row, col)` of every nonzero pixel.
    pub fn nonzero_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i / self.size, i % self.size))
    }
}

/// Pre-quantization energy image in MeV per rendered pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    pub size: usize,
    pub data: Vec<f64>,
}

impl EnergyMap {
    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Two views of one event: the universal model input.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMapPair {
    pub event_id: u64,
    pub truth: EventTruth,
    /// Rows index x, columns index z.
    pub view_xz: Grid,
    /// Rows index y, columns index z.
    pub view_yz: Grid,
}

impl PixelMapPair {
    pub fn views(&self) -> [&Grid; 2] {
        [&self.view_xz, &self.view_yz]
    }
}

/// Projection plane of a view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    XZ,
    YZ,
}

impl Plane {
    fn transverse_axis(self) -> usize {
        match self {
            Plane::XZ => 0,
            Plane::YZ => 1,
        }
    }
}

/// Native-pitch pixel index of a coordinate along one axis.
fn native_index(coord: f64, pitch: f64) -> i64 {
    (coord / pitch).floor() as i64
}

/// Rendered pixel index: native index summed into blocks of `factor`.
fn rendered_index(coord: f64, geometry: &DetectorGeometry) -> i64 {
    native_index(coord, geometry.native_pitch).div_euclid(geometry.downsample_factor())
}

/// Bins the cloud into the crop window of one plane, before quantization.
pub fn render_energy(cloud: &DepositCloud, geometry: &DetectorGeometry, plane: Plane) -> EnergyMap {
    let size = geometry.crop_size;
    let half = (size / 2) as i64;
    let axis = plane.transverse_axis();
    let center_row = rendered_index(cloud.vertex[axis], geometry);
    let center_col = rendered_index(cloud.vertex[2], geometry);
    let mut data = vec![0.0; size * size];
    for d in &cloud.deposits {
        let row = rendered_index(d.position[axis], geometry) - center_row + half;
        let col = rendered_index(d.position[2], geometry) - center_col + half;
        if (0..size as i64).contains(&row) && (0..size as i64).contains(&col) {
            data[row as usize * size + col as usize] += d.energy_mev;
        }
    }
    EnergyMap { size, data }
}

/// Logarithmic intensity encoding of a per-pixel energy. Any positive energy
/// maps to at least 1 so a deposit is never rounded away.
pub fn encode_intensity(energy_mev: f64) -> u8 {
    if energy_mev <= 0.0 {
        return 0;
    }
    let frac = ((1.0 + energy_mev / INTENSITY_E0_MEV).ln() / (1.0 + INTENSITY_EMAX_MEV / INTENSITY_E0_MEV).ln())
        .min(1.0);
    ((255.0 * frac).round() as u8).max(1)
}

pub fn quantize(map: &EnergyMap) -> Grid {
    Grid { size: map.size, data: map.data.iter().map(|&e| encode_intensity(e)).collect() }
}

/// Projects the cloud onto both planes and renders the centered crops.
pub fn project_and_render(
    cloud: &DepositCloud,
    geometry: &DetectorGeometry,
    truth: EventTruth,
    event_id: u64,
) -> Result<PixelMapPair, EventGenError> {
    if cloud.deposits.is_empty() {
        return Err(EventGenError::InvalidInput("cannot render an empty deposit cloud".into()));
    }
    geometry.validate()?;
    Ok(PixelMapPair {
        event_id,
        truth,
        view_xz: quantize(&render_energy(cloud, geometry, Plane::XZ)),
        view_yz: quantize(&render_energy(cloud, geometry, Plane::YZ)),
    })
}

/// Detector coordinate (transverse, z) of the lower corner of a rendered pixel.
pub fn pixel_to_detector(
    row: usize,
    col: usize,
    vertex: [f64; 3],
    geometry: &DetectorGeometry,
    plane: Plane,
) -> (f64, f64) {
    let half = (geometry.crop_size / 2) as i64;
    let pitch = geometry.pixel_pitch();
    let axis = plane.transverse_axis();
    let r = rendered_index(vertex[axis], geometry) + row as i64 - half;
    let c = rendered_index(vertex[2], geometry) + col as i64 - half;
    (r as f64 * pitch, c as f64 * pitch)
}
