use serde::{Deserialize, Serialize};

use super::CnnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu6,
    HardSwish,
}

/// One inverted residual block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub expansion: usize,
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub use_se: bool,
    pub activation: Activation,
}

impl BlockSpec {
    pub const fn new(expansion: usize, kernel: usize, out_channels: usize, stride: usize, use_se: bool, activation: Activation) -> Self {
        Self { expansion, kernel, out_channels, stride, use_se, activation }
    }

    fn validate(&self, at: &str) -> Result<(), CnnError> {
        if self.expansion < 1 {
            return Err(CnnError::Config(format!("{at}: expansion must be >= 1")));
        }
        if !matches!(self.kernel, 3 | 5) {
            return Err(CnnError::Config(format!("{at}: kernel must be 3 or 5, got {}", self.kernel)));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(CnnError::Config(format!("{at}: stride must be 1 or 2, got {}", self.stride)));
        }
        if self.out_channels == 0 {
            return Err(CnnError::Config(format!("{at}: out_channels must be positive")));
        }
        Ok(())
    }
}

/// Siamese network layout. Both views run through the same stem and branch
/// blocks (one parameter set); their outputs are concatenated channel-wise
/// and processed by the trunk, pooled, and classified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CnnConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub branch_blocks: Vec<BlockSpec>,
    pub trunk_blocks: Vec<BlockSpec>,
    pub head_hidden: usize,
    pub dropout_rate: f64,
    pub n_classes: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        use Activation::{HardSwish as HS, Relu6 as R6};
        Self {
            input_size: 512,
            stem_channels: 16,
            stem_kernel: 5,
            stem_stride: 4,
            branch_blocks: vec![
                BlockSpec::new(1, 3, 16, 2, false, R6),
                BlockSpec::new(4, 3, 24, 2, false, R6),
                BlockSpec::new(4, 5, 40, 2, true, HS),
                BlockSpec::new(6, 5, 80, 2, true, HS),
            ],
            trunk_blocks: vec![
                BlockSpec::new(4, 5, 160, 2, true, HS),
                BlockSpec::new(6, 5, 160, 1, true, HS),
                BlockSpec::new(6, 5, 256, 1, true, HS),
                BlockSpec::new(4, 3, 256, 1, true, HS),
            ],
            head_hidden: 128,
            dropout_rate: 0.2,
            n_classes: crate::NUM_CLASSES,
        }
    }
}

/// Output side length of a strided convolution with `kernel / 2` padding.
pub fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size + 2 * (kernel / 2) - kernel) / stride + 1
}

impl CnnConfig {
    /// Same layout at a small input size and width, for fast tests.
    pub fn tiny() -> Self {
        use Activation::{HardSwish as HS, Relu6 as R6};
        Self {
            input_size: 32,
            stem_channels: 4,
            stem_kernel: 3,
            stem_stride: 2,
            branch_blocks: vec![BlockSpec::new(1, 3, 4, 2, false, R6), BlockSpec::new(2, 5, 6, 2, true, HS)],
            trunk_blocks: vec![BlockSpec::new(2, 3, 8, 2, true, HS), BlockSpec::new(2, 3, 8, 1, true, R6)],
            head_hidden: 8,
            dropout_rate: 0.2,
            n_classes: crate::NUM_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<(), CnnError> {
        if self.n_classes != crate::NUM_CLASSES {
            return Err(CnnError::Config(format!("n_classes must be {}", crate::NUM_CLASSES)));
        }
        if self.stem_channels == 0 || self.head_hidden == 0 || self.input_size == 0 {
            return Err(CnnError::Config("stem_channels, head_hidden and input_size must be positive".into()));
        }
        if self.stem_kernel % 2 == 0 || self.stem_stride == 0 || self.stem_kernel < self.stem_stride {
            return Err(CnnError::Config(format!(
                "stem kernel {} must be odd and cover stride {}",
                self.stem_kernel, self.stem_stride
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(CnnError::Config(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        if self.branch_blocks.is_empty() {
            return Err(CnnError::Config("at least one branch block is required".into()));
        }
        for (i, b) in self.branch_blocks.iter().enumerate() {
            b.validate(&format!("branch block {i}"))?;
        }
        for (i, b) in self.trunk_blocks.iter().enumerate() {
            b.validate(&format!("trunk block {i}"))?;
        }
        let mut size = conv_out(self.input_size, self.stem_kernel, self.stem_stride);
        for (i, b) in self.branch_blocks.iter().chain(&self.trunk_blocks).enumerate() {
            if size < 2 && b.stride == 2 {
                return Err(CnnError::Config(format!(
                    "spatial underflow: block {i} halves a {size}×{size} map of a {} input",
                    self.input_size
                )));
            }
            size = conv_out(size, b.kernel, b.stride);
        }
        Ok(())
    }

    /// Spatial side length after the branch blocks.
    pub fn branch_output_size(&self) -> usize {
        let s = conv_out(self.input_size, self.stem_kernel, self.stem_stride);
        self.branch_blocks.iter().fold(s, |s, b| conv_out(s, b.kernel, b.stride))
    }

    pub fn branch_channels(&self) -> usize {
        self.branch_blocks.last().map_or(self.stem_channels, |b| b.out_channels)
    }

    pub fn trunk_channels(&self) -> usize {
        self.trunk_blocks.last().map_or(2 * self.branch_channels(), |b| b.out_channels)
    }
}

/// Optimization recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRecipe {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            batch_size: 16,
            max_epochs: 300,
            early_stop_patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<(), CnnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CnnError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(CnnError::Config("batch_size, max_epochs and early_stop_patience must be positive".into()));
        }
        Ok(())
    }
}
