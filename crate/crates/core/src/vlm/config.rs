use serde::{Deserialize, Serialize};

use super::VlmError;

/// Identifier of the seeded, randomly initialised stand-in backbone.
pub const TINY_BACKBONE_ID: &str = "tiny-vlm";
/// The 11B vision-instruct preset; documented, not loadable at desk scale.
pub const LLAMA_11B_VISION_ID: &str = "meta-llama/Llama-3.2-11B-Vision-Instruct";

/// Shape of a decoder-only backbone with a linear image projector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    /// Each view is pooled to a `pool_grid × pool_grid` map before patching.
    pub pool_grid: usize,
    /// Side length, in pooled cells, of one image patch token.
    pub patch_cells: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self { d_model: 256, n_layers: 2, n_heads: 4, mlp_hidden: 1024, pool_grid: 16, patch_cells: 4, max_seq_len: 256, init_seed: 0 }
    }

    /// Published shape of the 11B vision-instruct model's language tower.
    pub fn llama_11b_vision() -> Self {
        Self {
            d_model: 4096,
            n_layers: 40,
            n_heads: 32,
            mlp_hidden: 14336,
            pool_grid: 448 / 14,
            patch_cells: 1,
            max_seq_len: 8192,
            init_seed: 0,
        }
    }

    pub fn preset(id: &str) -> Option<Self> {
        match id {
            TINY_BACKBONE_ID => Some(Self::tiny()),
            LLAMA_11B_VISION_ID => Some(Self::llama_11b_vision()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), VlmError> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.mlp_hidden == 0 {
            return Err(VlmError::Config("backbone dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(VlmError::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if self.pool_grid == 0 || self.patch_cells == 0 || self.pool_grid % self.patch_cells != 0 {
            return Err(VlmError::Config("pool_grid must be a positive multiple of patch_cells".into()));
        }
        Ok(())
    }

    pub fn patches_per_view(&self) -> usize {
        let p = self.pool_grid / self.patch_cells;
        p * p
    }

    pub fn image_tokens(&self) -> usize {
        2 * self.patches_per_view()
    }

    /// Input width of the image projector: mean and max per pooled cell.
    pub fn patch_features(&self) -> usize {
        2 * self.patch_cells * self.patch_cells
    }

    /// Parameters in the transformer linears, excluding embeddings and head.
    pub fn linear_params(&self) -> u64 {
        let d = self.d_model as u64;
        self.n_layers as u64 * (4 * d * d + 2 * d * self.mlp_hidden as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Linear outputs rounded to bfloat16 with f32 accumulation.
    Bf16,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub base_model_id: String,
    pub quantization_bits: u8,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    /// Module-name suffixes that receive adapters, e.g. `attn.q`.
    pub target_modules: Vec<String>,
    pub trainable_fraction_max: f64,
    /// Base weights are stored in 4-bit form when their f32 size exceeds this.
    pub memory_budget_mb: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            base_model_id: TINY_BACKBONE_ID.into(),
            quantization_bits: 4,
            lora_rank: 16,
            lora_alpha: 32.0,
            lora_dropout: 0.05,
            target_modules: ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"].map(String::from).to_vec(),
            trainable_fraction_max: 0.05,
            memory_budget_mb: 512.0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<(), VlmError> {
        if self.lora_rank == 0 {
            return Err(VlmError::Config("lora_rank must be at least 1".into()));
        }
        if self.quantization_bits != 4 {
            return Err(VlmError::Config(format!("only 4-bit quantization is supported, got {}", self.quantization_bits)));
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return Err(VlmError::Config("lora_alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(VlmError::Config("lora_dropout must be in [0, 1)".into()));
        }
        if !(self.trainable_fraction_max > 0.0 && self.trainable_fraction_max <= 1.0) {
            return Err(VlmError::Config("trainable_fraction_max must be in (0, 1]".into()));
        }
        if self.target_modules.is_empty() {
            return Err(VlmError::Config("target_modules is empty".into()));
        }
        Ok(())
    }

    pub fn scale(&self) -> f32 {
        (self.lora_alpha / self.lora_rank as f64) as f32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftRecipe {
    pub per_device_batch: usize,
    pub grad_accumulation: usize,
    pub devices: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub lr_decay: LrDecay,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    /// Caps the number of optimizer steps; records are cycled if needed.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub precision: Precision,
    /// Adapter checkpoint cadence in optimizer steps (0 disables).
    pub checkpoint_every: usize,
    /// Host memory available for training; checked before the first step.
    pub memory_limit_mb: f64,
    pub seed: u64,
}

impl Default for SftRecipe {
    fn default() -> Self {
        Self {
            per_device_batch: 1,
            grad_accumulation: 8,
            devices: 1,
            learning_rate: 2e-4,
            warmup_ratio: 0.03,
            lr_decay: LrDecay::Constant,
            grad_clip_norm: 0.3,
            epochs: 1,
            max_steps: None,
            weight_decay: 0.0,
            precision: Precision::Bf16,
            checkpoint_every: 0,
            memory_limit_mb: 4096.0,
            seed: 0,
        }
    }
}

impl SftRecipe {
    pub fn effective_batch(&self) -> usize {
        self.per_device_batch * self.grad_accumulation * self.devices
    }

    pub fn validate(&self) -> Result<(), VlmError> {
        if self.per_device_batch == 0 || self.grad_accumulation == 0 || self.devices == 0 || self.epochs == 0 {
            return Err(VlmError::Config("batch sizes, devices and epochs must be positive".into()));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("grad_clip_norm", self.grad_clip_norm), ("memory_limit_mb", self.memory_limit_mb)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(VlmError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(VlmError::Config("warmup_ratio must be in [0, 1)".into()));
        }
        if self.max_steps == Some(0) {
            return Err(VlmError::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    /// Optimizer steps for `n_records` records.
    pub fn total_steps(&self, n_records: usize) -> usize {
        self.max_steps.unwrap_or_else(|| (n_records * self.epochs).div_ceil(self.effective_batch()).max(1))
    }

    pub fn warmup_steps(&self, total: usize) -> usize {
        // Guard against 0.03 · 1000 landing just above 30 in floating point.
        (self.warmup_ratio * total as f64 - 1e-9).ceil().max(0.0) as usize
    }

    /// Learning rate applied at 0-based optimizer step `step`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = self.warmup_steps(total);
        if step < warmup {
            return self.learning_rate * step as f64 / warmup as f64;
        }
        match self.lr_decay {
            LrDecay::Constant => self.learning_rate,
            LrDecay::Linear => {
                let span = total.saturating_sub(warmup).max(1) as f64;
                self.learning_rate * (1.0 - (step - warmup) as f64 / span).max(0.0)
            }
        }
    }
}
