//! Base loading and adapter attachment.

use rand::Rng;

use super::backbone::{LoraSlot, VlmModel};
use super::config::{AdapterConfig, BackboneConfig, LLAMA_11B_VISION_ID, TINY_BACKBONE_ID};
use super::VlmError;

/// Instantiates a base model by id. Only the stand-in backbone is
/// constructible locally; `config` overrides its preset shape.
pub fn load_base(base_model_id: &str, config: Option<BackboneConfig>) -> Result<VlmModel, VlmError> {
    match base_model_id {
        TINY_BACKBONE_ID => VlmModel::stand_in(base_model_id, config.unwrap_or_else(BackboneConfig::tiny)),
        LLAMA_11B_VISION_ID => Err(VlmError::Unavailable(format!(
            "{base_model_id} is a documented preset; its weights are not bundled. Use `{TINY_BACKBONE_ID}` locally"
        ))),
        other => Err(VlmError::Config(format!("unknown base model id `{other}`"))),
    }
}

fn matches(name: &str, pattern: &str) -> bool {
    name == pattern || name.strip_suffix(pattern).is_some_and(|head| head.ends_with('.'))
}

/// Loads `base_model_id` and attaches adapters per `config`.
pub fn attach_adapters(base_model_id: &str, config: &AdapterConfig) -> Result<VlmModel, VlmError> {
    attach_adapters_to(load_base(base_model_id, None)?, config)
}

/// Attaches fresh adapters to every linear whose name matches a target
/// pattern, quantizing the base first when it exceeds the memory budget.
pub fn attach_adapters_to(mut model: VlmModel, config: &AdapterConfig) -> Result<VlmModel, VlmError> {
    config.validate()?;
    if model.adapter_config.is_some() {
        return Err(VlmError::Config("model already carries adapters".into()));
    }
    let dense_mb = model.frozen_bytes() as f64 / (1024.0 * 1024.0);
    if dense_mb > config.memory_budget_mb {
        model.quantize_linears();
    }
    let mut offset = 0;
    let mut shapes = Vec::new();
    for linear in model.linears_mut() {
        if config.target_modules.iter().any(|p| matches(&linear.name, p)) {
            let r = config.lora_rank;
            let slot = LoraSlot { a: offset, b: offset + r * linear.inp, rank: r };
            offset = slot.b + linear.out * r;
            linear.lora = Some(slot);
            shapes.push((slot, linear.inp));
        }
    }
    if shapes.is_empty() {
        let names: Vec<&str> = model.linears().map(|l| l.name.as_str()).collect();
        return Err(VlmError::Config(format!(
            "target patterns {:?} matched no modules; available: {names:?}",
            config.target_modules
        )));
    }
    let mut adapters = vec![0.0f32; offset];
    let mut rng = crate::seed::rng(model.config.init_seed, &[0xADA9]);
    for (slot, inp) in shapes {
        let bound = 1.0 / (inp as f32).sqrt();
        adapters[slot.a..slot.b].iter_mut().for_each(|a| *a = rng.random_range(-bound..bound));
    }
    model.adapters = adapters;
    model.adapter_config = Some(config.clone());
    let trainable = model.trainable_param_count() as f64;
    let fraction = trainable / (trainable + model.frozen_param_count() as f64);
    if fraction > config.trainable_fraction_max {
        return Err(VlmError::Config(format!(
            "trainable fraction {fraction:.4} exceeds the maximum {}; lower lora_rank or target fewer modules",
            config.trainable_fraction_max
        )));
    }
    Ok(model)
}

/// Trainable share of all parameters.
pub fn trainable_fraction(model: &VlmModel) -> f64 {
    let t = model.trainable_param_count() as f64;
    t / (t + model.frozen_param_count() as f64)
}

/// Names of the adapted linears in attachment order.
pub fn adapted_modules(model: &VlmModel) -> Vec<String> {
    model.linears().filter(|l| l.lora.is_some()).map(|l| l.name.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank(r: usize) -> AdapterConfig {
        AdapterConfig { lora_rank: r, lora_alpha: 2.0 * r as f64, ..Default::default() }
    }

    #[test]
    fn tiny_rank_eight_stays_under_five_percent() {
        let m = attach_adapters(TINY_BACKBONE_ID, &rank(8)).unwrap();
        // Independent count: each adapted linear adds r·(in + out).
        let d = m.config.d_model as u64;
        let f = m.config.mlp_hidden as u64;
        let per_layer = 8 * (4 * 2 * d + 2 * (d + f));
        assert_eq!(m.trainable_param_count(), m.config.n_layers as u64 * per_layer);
        let frac = trainable_fraction(&m);
        assert!(frac < 0.05, "{frac}");
        assert_eq!(adapted_modules(&m).len(), 6 * m.config.n_layers);
        assert!(!m.is_quantized());
    }

    #[test]
    fn default_rank_exceeds_budget_on_tiny_backbone() {
        let err = attach_adapters(TINY_BACKBONE_ID, &AdapterConfig::default()).unwrap_err();
        assert!(matches!(err, VlmError::Config(ref m) if m.contains("trainable fraction")), "{err}");
    }

    #[test]
    fn rank_zero_and_unmatched_patterns_are_rejected() {
        assert!(matches!(attach_adapters(TINY_BACKBONE_ID, &rank(0)), Err(VlmError::Config(_))));
        let cfg = AdapterConfig { target_modules: vec!["attn.qkv".into()], ..rank(8) };
        let err = attach_adapters(TINY_BACKBONE_ID, &cfg).unwrap_err();
        assert!(err.to_string().contains("matched no modules"));
        // Suffix matching respects name boundaries.
        assert!(matches("layers.0.attn.q", "attn.q"));
        assert!(!matches("layers.0.attn.q", "n.q"));
    }

    #[test]
    fn oversized_base_is_quantized() {
        let cfg = AdapterConfig { memory_budget_mb: 0.5, ..rank(8) };
        let m = attach_adapters(TINY_BACKBONE_ID, &cfg).unwrap();
        assert!(m.is_quantized());
        let dense = attach_adapters(TINY_BACKBONE_ID, &rank(8)).unwrap();
        assert!(m.frozen_bytes() * 3 < dense.frozen_bytes());
    }

    #[test]
    fn large_preset_is_documented_not_loadable() {
        assert!(matches!(load_base(LLAMA_11B_VISION_ID, None), Err(VlmError::Unavailable(_))));
        assert!(matches!(load_base("nope", None), Err(VlmError::Config(_))));
        let c = BackboneConfig::preset(LLAMA_11B_VISION_ID).unwrap();
        assert!(c.linear_params() > 5_000_000_000);
    }
}
