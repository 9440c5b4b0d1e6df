use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::cnn::CnnModel;
use crate::eventgen::PixelMapPair;
use crate::vlm::VlmClassifier;
use crate::Prediction;

/// Anything that maps one event to a prediction.
pub trait Classifier {
    fn classify_pair(&self, pair: &PixelMapPair) -> Result<Prediction, String>;
}

impl Classifier for CnnModel {
    fn classify_pair(&self, pair: &PixelMapPair) -> Result<Prediction, String> {
        self.predict(pair).map_err(|e| e.to_string())
    }
}

impl Classifier for VlmClassifier {
    fn classify_pair(&self, pair: &PixelMapPair) -> Result<Prediction, String> {
        self.classify(pair).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceProfile {
    /// Peak resident memory of the process over the measured calls.
    pub memory_mb: f64,
    /// Mean wall time of one measured call.
    pub ms_per_sample: f64,
    /// Sample standard deviation; absent with a single measured call.
    pub ms_std: Option<f64>,
    pub n_measure: usize,
}

/// Times `n_measure` serial calls after `n_warmup` untimed ones, cycling
/// through `samples`. Memory is the process high-water mark, reset before
/// the measured calls where the kernel allows it.
pub fn resource_profile<C: Classifier + ?Sized>(
    classifier: &C,
    samples: &[PixelMapPair],
    n_warmup: usize,
    n_measure: usize,
) -> Result<ResourceProfile, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    if n_measure == 0 {
        return Err(EvalError::InvalidArgument("n_measure must be positive".into()));
    }
    let call = |i: usize| {
        classifier
            .classify_pair(&samples[i % samples.len()])
            .map_err(|reason| EvalError::Classifier { index: i % samples.len(), reason })
    };
    for i in 0..n_warmup {
        call(i)?;
    }
    reset_peak_rss();
    let mut times = Vec::with_capacity(n_measure);
    for i in 0..n_measure {
        let start = Instant::now();
        call(n_warmup + i)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / n_measure as f64;
    let ms_std = (n_measure > 1)
        .then(|| (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n_measure - 1) as f64).sqrt());
    Ok(ResourceProfile { memory_mb: peak_rss_mb().unwrap_or(0.0), ms_per_sample: mean, ms_std, n_measure })
}

fn reset_peak_rss() {
    let _ = std::fs::write("/proc/self/clear_refs", "5");
}

fn status_kb(field: &str) -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with(field))?;
    line[field.len()..].trim().trim_end_matches("kB").trim().parse().ok()
}

fn peak_rss_mb() -> Option<f64> {
    status_kb("VmHWM:").or_else(|| status_kb("VmRSS:")).map(|kb| kb / 1024.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::CnnConfig;
    use crate::eventgen::{generate_range, DetectorGeometry, GeneratorConfig, RenderPitch};

    struct Fixed(u64);

    impl Classifier for Fixed {
        fn classify_pair(&self, _: &PixelMapPair) -> Result<Prediction, String> {
            let mut acc = 0u64;
            for i in 0..self.0 {
                acc = acc.wrapping_mul(6364136223846793005).wrapping_add(i);
            }
            std::hint::black_box(acc);
            Ok(Prediction {
                class: crate::InteractionClass::Nc,
                confidences: [0.0, 0.0, 1.0],
                raw_logp: [f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0],
                latency_ms: 0.0,
            })
        }
    }

    struct Failing;

    impl Classifier for Failing {
        fn classify_pair(&self, _: &PixelMapPair) -> Result<Prediction, String> {
            Err("broken".into())
        }
    }

    fn samples(n: u64) -> Vec<PixelMapPair> {
        let mut cfg = GeneratorConfig::default();
        cfg.geometry = DetectorGeometry { crop_size: 32, render_pitch: RenderPitch::Coarse, ..DetectorGeometry::default() };
        generate_range(&cfg, 0, n).unwrap()
    }

    #[test]
    fn single_measurement_has_no_spread() {
        let p = resource_profile(&Fixed(1000), &samples(1), 0, 1).unwrap();
        assert_eq!(p.n_measure, 1);
        assert!(p.ms_std.is_none());
        assert!(p.ms_per_sample >= 0.0);
        assert!(p.memory_mb > 0.0);
    }

    #[test]
    fn repeated_profiles_are_stable() {
        let model = CnnModel::new(CnnConfig::tiny(), 3).unwrap();
        let data = samples(2);
        let a = resource_profile(&model, &data, 2, 10).unwrap();
        let b = resource_profile(&model, &data, 2, 10).unwrap();
        let ratio = a.ms_per_sample / b.ms_per_sample;
        assert!((1.0 / 3.0..=3.0).contains(&ratio), "{a:?} vs {b:?}");
        assert!(a.ms_std.is_some());
    }

    #[test]
    fn errors_name_the_sample() {
        let err = resource_profile(&Failing, &samples(1), 0, 1).unwrap_err();
        assert!(matches!(err, EvalError::Classifier { index: 0, .. }));
        assert!(matches!(resource_profile(&Fixed(1), &[], 0, 1), Err(EvalError::Empty)));
        assert!(matches!(resource_profile(&Fixed(1), &samples(1), 0, 0), Err(EvalError::InvalidArgument(_))));
    }
}
