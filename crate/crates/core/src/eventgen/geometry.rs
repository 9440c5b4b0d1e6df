use serde::{Deserialize, Serialize};

use super::EventGenError;

/// Which pitch the rendered views are binned at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RenderPitch {
    /// Bin at the readout pitch; a 512 crop then spans 2.56 m.
    #[default]
    Native,
    /// Sum native pixels into `coarse_pitch` bins before cropping.
    Coarse,
}

/// Detector volume and readout description. Lengths are in meters.
///
/// The volume spans `[0, width_x] × [0, height_y] × [0, length_z]` with the
/// beam travelling along +z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorGeometry {
    pub width_x: f64,
    pub height_y: f64,
    pub length_z: f64,
    pub native_pitch: f64,
    pub coarse_pitch: f64,
    pub crop_size: usize,
    pub render_pitch: RenderPitch,
}

impl Default for DetectorGeometry {
    fn default() -> Self {
        Self {
            width_x: 2.0,
            height_y: 2.0,
            length_z: 7.0,
            native_pitch: 0.005,
            coarse_pitch: 0.05,
            crop_size: 512,
            render_pitch: RenderPitch::Native,
        }
    }
}

impl DetectorGeometry {
    pub fn validate(&self) -> Result<(), EventGenError> {
        let dims = [
            ("width_x", self.width_x),
            ("height_y", self.height_y),
            ("length_z", self.length_z),
            ("native_pitch", self.native_pitch),
            ("coarse_pitch", self.coarse_pitch),
        ];
        for (name, v) in dims {
            if !(v.is_finite() && v > 0.0) {
                return Err(EventGenError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let ratio = self.coarse_pitch / self.native_pitch;
        if (ratio - ratio.round()).abs() > 1e-6 || ratio.round() < 1.0 {
            return Err(EventGenError::Config(format!(
                "coarse_pitch {} is not an integer multiple of native_pitch {}",
                self.coarse_pitch, self.native_pitch
            )));
        }
        if self.crop_size == 0 || self.crop_size % 2 != 0 {
            return Err(EventGenError::Config(format!(
                "crop_size must be a positive even integer, got {}",
                self.crop_size
            )));
        }
        Ok(())
    }

    /// Number of native pixels summed per rendered pixel along each axis.
    pub fn downsample_factor(&self) -> i64 {
        match self.render_pitch {
            RenderPitch::Native => 1,
            RenderPitch::Coarse => (self.coarse_pitch / self.native_pitch).round() as i64,
        }
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.native_pitch * self.downsample_factor() as f64
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.width_x, self.height_y, self.length_z]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        p.iter().zip(self.extent()).all(|(&c, e)| (0.0..=e).contains(&c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let g = DetectorGeometry::default();
        g.validate().unwrap();
        assert_eq!(g.downsample_factor(), 1);
        let coarse = DetectorGeometry { render_pitch: RenderPitch::Coarse, ..g };
        assert_eq!(coarse.downsample_factor(), 10);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let g = DetectorGeometry { crop_size: 511, ..Default::default() };
        assert!(g.validate().is_err());
        let g = DetectorGeometry { coarse_pitch: 0.012, ..Default::default() };
        assert!(g.validate().is_err());
        let g = DetectorGeometry { width_x: 0.0, ..Default::default() };
        assert!(g.validate().is_err());
    }
}
