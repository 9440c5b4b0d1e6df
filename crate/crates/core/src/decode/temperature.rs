use super::DecodeError;

/// Temperature used for confidence extraction.
pub const DEFAULT_TEMPERATURE: f64 = 5.0;

/// `softmax(T · raw_logp)`, computed with max-subtraction.
///
/// For log-probabilities this equals `p_i^T / Σ_j p_j^T`, so `T > 1`
/// sharpens toward the argmax and `T = 1` renormalizes `p`.
pub fn temperature_rescale(raw_logp: &[f64], temperature: f64) -> Result<Vec<f64>, DecodeError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(DecodeError::Domain(format!("temperature must be positive and finite, got {temperature}")));
    }
    if raw_logp.is_empty() {
        return Err(DecodeError::Domain("empty score vector".into()));
    }
    if let Some(v) = raw_logp.iter().find(|v| !v.is_finite()) {
        return Err(DecodeError::Domain(format!("non-finite log-probability {v}")));
    }
    let scaled: Vec<f64> = raw_logp.iter().map(|l| temperature * l).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / sum).collect())
}
