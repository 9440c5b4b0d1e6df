//! Linear separability probe: multinomial logistic regression over per-view
//! pixel counts and second moments. Used to check that toy labels are
//! learnable before any deep model is blamed for failing to learn them.

use super::{Grid, PixelMapPair};
use crate::NUM_CLASSES;

pub const FEATURES_PER_VIEW: usize = 7;

fn view_features(grid: &Grid, out: &mut Vec<f64>) {
    let (mut n, mut sum, mut sr, mut sc, mut srr, mut scc, mut src) = (0.0f64, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, &v) in grid.data.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let w = f64::from(v);
        let (r, c) = ((i / grid.size) as f64, (i % grid.size) as f64);
        n += 1.0;
        sum += w;
        sr += w * r;
        sc += w * c;
        srr += w * r * r;
        scc += w * c * c;
        src += w * r * c;
    }
    if sum == 0.0 {
        out.extend([0.0; FEATURES_PER_VIEW]);
        return;
    }
    let (mr, mc) = (sr / sum, sc / sum);
    let vr = (srr / sum - mr * mr).max(0.0);
    let vc = (scc / sum - mc * mc).max(0.0);
    let cov = src / sum - mr * mc;
    let tr = vr + vc;
    let det = (vr * vc - cov * cov).max(0.0);
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, (tr / 2.0 - disc).max(0.0));
    out.extend([
        n.ln_1p(),
        sum.ln_1p(),
        (sum / n).ln(),
        vr.sqrt().ln_1p(),
        vc.sqrt().ln_1p(),
        l1.sqrt().ln_1p(),
        (l2.sqrt() / (l1.sqrt() + 1e-9)),
    ]);
}

pub fn features(pair: &PixelMapPair) -> Vec<f64> {
    let mut f = Vec::with_capacity(2 * FEATURES_PER_VIEW);
    view_features(&pair.view_xz, &mut f);
    view_features(&pair.view_yz, &mut f);
    f
}

/// Standardized softmax-regression probe.
pub struct LinearProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    weights: Vec<[f64; NUM_CLASSES]>,
    bias: [f64; NUM_CLASSES],
}

impl LinearProbe {
    pub fn fit(samples: &[(Vec<f64>, usize)], epochs: usize, lr: f64) -> Self {
        let dim = samples[0].0.len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        let mut std = vec![0.0; dim];
        for (x, _) in samples {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
        }
        for (x, _) in samples {
            std.iter_mut().zip(x).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-9));
        let mut probe = Self { mean, std, weights: vec![[0.0; NUM_CLASSES]; dim], bias: [0.0; NUM_CLASSES] };
        for _ in 0..epochs {
            let mut gw = vec![[0.0; NUM_CLASSES]; dim];
            let mut gb = [0.0; NUM_CLASSES];
            for (x, y) in samples {
                let z = probe.standardize(x);
                let p = probe.probabilities_std(&z);
                for k in 0..NUM_CLASSES {
                    let g = p[k] - f64::from(u8::from(k == *y));
                    gb[k] += g / n;
                    for (gw_j, z_j) in gw.iter_mut().zip(&z) {
                        gw_j[k] += g * z_j / n;
                    }
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                for k in 0..NUM_CLASSES {
                    w[k] -= lr * g[k];
                }
            }
            for k in 0..NUM_CLASSES {
                probe.bias[k] -= lr * gb[k];
            }
        }
        probe
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn probabilities_std(&self, z: &[f64]) -> [f64; NUM_CLASSES] {
        let mut logits = self.bias;
        for (w, v) in self.weights.iter().zip(z) {
            for k in 0..NUM_CLASSES {
                logits[k] += w[k] * v;
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = logits.map(|l| (l - max).exp());
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        p
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::class::argmax(&self.probabilities_std(&self.standardize(x)))
    }

    pub fn accuracy(&self, samples: &[(Vec<f64>, usize)]) -> f64 {
        samples.iter().filter(|(x, y)| self.predict(x) == *y).count() as f64 / samples.len() as f64
    }
}

/// Trains the probe on one event set and scores it on another.
pub fn separability_accuracy(train: &[PixelMapPair], test: &[PixelMapPair]) -> f64 {
    let to_samples = |events: &[PixelMapPair]| -> Vec<(Vec<f64>, usize)> {
        crate::par::map(events, |e| (features(e), e.truth.interaction_class.index()))
    };
    let probe = LinearProbe::fit(&to_samples(train), 400, 0.5);
    probe.accuracy(&to_samples(test))
}
