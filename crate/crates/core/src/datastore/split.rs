use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::InteractionClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.85, val_fraction: 0.10, test_fraction: 0.05, split_seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(DataError::Config(format!("split fractions must lie in [0, 1]: {fr:?}")));
        }
        let sum: f64 = fr.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Config(format!("split fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Event ids per partition, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl SplitIndices {
    pub fn test_hash(&self) -> String {
        super::ids_hash(&self.test)
    }
}

/// Stratified deterministic partition. Within each class the ids are
/// shuffled with a class-specific stream of `split_seed`, then the first
/// `round(n·test)` go to test and the next `round(n·val)` to validation.
pub fn split(labels: &[(u64, InteractionClass)], spec: &SplitSpec) -> Result<SplitIndices, DataError> {
    spec.validate()?;
    let mut out = SplitIndices { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for class in InteractionClass::ALL {
        let mut ids: Vec<u64> = labels.iter().filter(|(_, c)| *c == class).map(|(id, _)| *id).collect();
        ids.sort_unstable();
        let mut rng = crate::seed::rng(spec.split_seed, &[class.index() as u64]);
        ids.shuffle(&mut rng);
        let n = ids.len() as f64;
        let n_test = ((n * spec.test_fraction).round() as usize).min(ids.len());
        let n_val = ((n * spec.val_fraction).round() as usize).min(ids.len() - n_test);
        out.test.extend_from_slice(&ids[..n_test]);
        out.val.extend_from_slice(&ids[n_test..n_test + n_val]);
        out.train.extend_from_slice(&ids[n_test + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}
