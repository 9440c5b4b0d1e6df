use std::path::Path;
use std::time::Instant;

use rand::Rng;

use super::block::{BlockCache, BlockLayout};
use super::config::{Activation, CnnConfig};
use super::layout::{Dense, Init, ParamLayout};
use super::ops::{self, Fmap};
use super::CnnError;
use crate::class::{argmax, InteractionClass, Prediction};
use crate::eventgen::{Grid, PixelMapPair};

const STEM_ACT: Activation = Activation::HardSwish;
const HEAD_ACT: Activation = Activation::HardSwish;
const CKPT_KIND: &str = "nuvision-cnn";

/// Loss and correctness of one training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleGrad {
    pub loss: f64,
    pub correct: bool,
}

#[derive(Debug, Clone)]
pub struct CnnModel {
    pub config: CnnConfig,
    layout: ParamLayout,
    stem: Dense,
    branch: Vec<BlockLayout>,
    trunk: Vec<BlockLayout>,
    fc1: Dense,
    fc2: Dense,
    pub params: Vec<f32>,
}

struct BranchCache {
    col: Vec<f32>,
    stem_pre: Fmap,
    blocks: Vec<BlockCache>,
}

impl CnnModel {
    /// Builds the network and draws initial weights from `seed`.
    pub fn new(config: CnnConfig, seed: u64) -> Result<Self, CnnError> {
        let mut model = Self::skeleton(config)?;
        model.params = model.layout.initialize(&mut crate::seed::rng(seed, &[0xC0DE]));
        Ok(model)
    }

    pub fn from_params(config: CnnConfig, params: Vec<f32>) -> Result<Self, CnnError> {
        let mut model = Self::skeleton(config)?;
        if params.len() != model.layout.total {
            return Err(CnnError::InvalidInput(format!(
                "parameter vector has {} values, layout needs {}",
                params.len(),
                model.layout.total
            )));
        }
        model.params = params;
        Ok(model)
    }

    fn skeleton(config: CnnConfig) -> Result<Self, CnnError> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let k = config.stem_kernel;
        let stem = layout.dense(
            "stem",
            config.stem_channels,
            k,
            &[k],
            Init::Normal { fan_in: k * k, gain: 2f64.sqrt() },
            Init::Const(0.0),
        );
        let mut cin = config.stem_channels;
        let mut branch = Vec::new();
        for (i, spec) in config.branch_blocks.iter().enumerate() {
            branch.push(BlockLayout::allocate(&mut layout, &format!("branch.{i}"), spec, cin));
            cin = spec.out_channels;
        }
        cin *= 2;
        let mut trunk = Vec::new();
        for (i, spec) in config.trunk_blocks.iter().enumerate() {
            trunk.push(BlockLayout::allocate(&mut layout, &format!("trunk.{i}"), spec, cin));
            cin = spec.out_channels;
        }
        let h = config.head_hidden;
        let fc1 =
            layout.dense("head.fc1", h, cin, &[], Init::Normal { fan_in: cin, gain: 2f64.sqrt() }, Init::Const(0.0));
        let fc2 =
            layout.dense("head.fc2", config.n_classes, h, &[], Init::Normal { fan_in: h, gain: 1.0 }, Init::Const(0.0));
        Ok(Self { config, layout, stem, branch, trunk, fc1, fc2, params: Vec::new() })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Scales 8-bit intensities to `[0, 1]`.
    pub fn input_from_grid(&self, grid: &Grid) -> Result<Vec<f32>, CnnError> {
        if grid.size != self.config.input_size || grid.data.len() != grid.size * grid.size {
            return Err(CnnError::InvalidInput(format!(
                "expected a {0}×{0} view, got {1}×{1}",
                self.config.input_size, grid.size
            )));
        }
        Ok(grid.data.iter().map(|&v| f32::from(v) / 255.0).collect())
    }

    fn check_view(&self, view: &[f32]) -> Result<(), CnnError> {
        let n = self.config.input_size * self.config.input_size;
        if view.len() != n {
            return Err(CnnError::InvalidInput(format!("view has {} values, expected {n}", view.len())));
        }
        Ok(())
    }

    /// Output of the shared stem and branch blocks for one view.
    pub fn branch_features(&self, view: &[f32]) -> Result<Fmap, CnnError> {
        self.check_view(view)?;
        let p = &self.params;
        let (w, b) = self.stem.get(p);
        let (pre, _) = ops::stem_forward(view, self.config.input_size, w, b, self.config.stem_kernel, self.config.stem_stride);
        let mut x = ops::activate(&pre, STEM_ACT);
        for block in &self.branch {
            x = block.infer(p, &x);
        }
        Ok(x)
    }

    fn concat(a: Fmap, b: Fmap) -> Fmap {
        let mut data = a.data;
        data.extend_from_slice(&b.data);
        Fmap { c: a.c + b.c, h: a.h, w: a.w, data }
    }

    fn pool(x: &Fmap) -> Fmap {
        let plane = x.plane();
        let data = x.data.chunks_exact(plane).map(|c| c.iter().sum::<f32>() / plane as f32).collect();
        Fmap { c: x.c, h: 1, w: 1, data }
    }

    /// Branch outputs of both views stacked channel-wise, XZ first.
    pub fn joint_features(&self, xz: &[f32], yz: &[f32]) -> Result<Fmap, CnnError> {
        Ok(Self::concat(self.branch_features(xz)?, self.branch_features(yz)?))
    }

    /// Class logits for a pair of views, without dropout.
    pub fn logits(&self, xz: &[f32], yz: &[f32]) -> Result<Vec<f32>, CnnError> {
        let joint = self.joint_features(xz, yz)?;
        let p = &self.params;
        let x = self.trunk.iter().fold(joint, |x, block| block.infer(p, &x));
        let (w, b) = self.fc1.get(p);
        let h = ops::activate(&ops::pointwise_forward(&Self::pool(&x), w, b), HEAD_ACT);
        let (w, b) = self.fc2.get(p);
        Ok(ops::pointwise_forward(&h, w, b).data)
    }

    pub fn predict(&self, pair: &PixelMapPair) -> Result<Prediction, CnnError> {
        let xz = self.input_from_grid(&pair.view_xz)?;
        let yz = self.input_from_grid(&pair.view_yz)?;
        let start = Instant::now();
        let logits = self.logits(&xz, &yz)?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        let logp = crate::linalg::log_softmax(&logits);
        if logp.iter().any(|v| !v.is_finite()) {
            return Err(CnnError::InvalidInput(format!("event {} produced non-finite logits", pair.event_id)));
        }
        let raw_logp = [logp[0], logp[1], logp[2]];
        let confidences = raw_logp.map(f64::exp);
        let class = InteractionClass::from_index(argmax(&raw_logp)).expect("three classes");
        Ok(Prediction { class, confidences, raw_logp, latency_ms })
    }

    fn branch_forward(&self, view: &[f32]) -> (Fmap, BranchCache) {
        let p = &self.params;
        let (w, b) = self.stem.get(p);
        let (stem_pre, col) =
            ops::stem_forward(view, self.config.input_size, w, b, self.config.stem_kernel, self.config.stem_stride);
        let mut x = ops::activate(&stem_pre, STEM_ACT);
        let mut blocks = Vec::with_capacity(self.branch.len());
        for block in &self.branch {
            let (y, cache) = block.forward(p, x);
            blocks.push(cache);
            x = y;
        }
        (x, BranchCache { col, stem_pre, blocks })
    }

    fn branch_backward(&self, cache: &BranchCache, mut grad: Fmap, g: &mut [f32]) {
        for (block, c) in self.branch.iter().zip(&cache.blocks).rev() {
            grad = block.backward(&self.params, c, &grad, g);
        }
        ops::activate_backward(&cache.stem_pre, STEM_ACT, &mut grad.data);
        let (gw, gb) = self.stem.get_mut(g);
        ops::stem_backward(&cache.col, &grad, gw, gb);
    }

    /// Cross-entropy loss of one example; its gradient is added to `grads`.
    /// `dropout_seed` enables head dropout with a mask drawn from that seed.
    pub fn accumulate_gradient(
        &self,
        xz: &[f32],
        yz: &[f32],
        label: usize,
        dropout_seed: Option<u64>,
        grads: &mut [f32],
    ) -> Result<SampleGrad, CnnError> {
        self.check_view(xz)?;
        self.check_view(yz)?;
        if label >= self.config.n_classes {
            return Err(CnnError::InvalidInput(format!("label {label} out of range")));
        }
        if grads.len() != self.params.len() {
            return Err(CnnError::InvalidInput("gradient buffer does not match parameter count".into()));
        }
        let p = &self.params;
        let (fa, ca) = self.branch_forward(xz);
        let (fb, cb) = self.branch_forward(yz);
        let split = fa.data.len();
        let mut x = Self::concat(fa, fb);
        let mut trunk_caches = Vec::with_capacity(self.trunk.len());
        for block in &self.trunk {
            let (y, cache) = block.forward(p, x);
            trunk_caches.push(cache);
            x = y;
        }
        let pooled = Self::pool(&x);
        let (w1, b1) = self.fc1.get(p);
        let h_pre = ops::pointwise_forward(&pooled, w1, b1);
        let mut h = ops::activate(&h_pre, HEAD_ACT);
        let rate = self.config.dropout_rate as f32;
        let mask: Vec<f32> = match dropout_seed {
            Some(seed) if rate > 0.0 => {
                let mut rng = crate::seed::rng(seed, &[0xD0]);
                (0..h.c).map(|_| if rng.random::<f32>() < rate { 0.0 } else { 1.0 / (1.0 - rate) }).collect()
            }
            _ => vec![1.0; h.c],
        };
        h.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        let (w2, b2) = self.fc2.get(p);
        let logits = ops::pointwise_forward(&h, w2, b2);
        let logp = crate::linalg::log_softmax(&logits.data);
        let loss = -logp[label];
        let correct = argmax(&logp) == label;

        let mut d_logits = logits.clone();
        for (i, d) in d_logits.data.iter_mut().enumerate() {
            *d = (logp[i].exp() - if i == label { 1.0 } else { 0.0 }) as f32;
        }
        let (gw, gb) = self.fc2.get_mut(grads);
        let mut d_h = ops::pointwise_backward(&h, w2, &d_logits, gw, gb);
        d_h.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        ops::activate_backward(&h_pre, HEAD_ACT, &mut d_h.data);
        let (gw, gb) = self.fc1.get_mut(grads);
        let d_pool = ops::pointwise_backward(&pooled, w1, &d_h, gw, gb);
        let plane = x.plane();
        let mut grad = x.same_shape();
        for (c, d) in d_pool.data.iter().enumerate() {
            grad.data[c * plane..(c + 1) * plane].fill(d / plane as f32);
        }
        for (block, cache) in self.trunk.iter().zip(&trunk_caches).rev() {
            grad = block.backward(p, cache, &grad, grads);
        }
        let half = grad.c / 2;
        let tail = grad.data.split_off(split);
        let ga = Fmap { c: half, h: grad.h, w: grad.w, data: grad.data };
        let gb = Fmap { c: half, h: ga.h, w: ga.w, data: tail };
        self.branch_backward(&ca, ga, grads);
        self.branch_backward(&cb, gb, grads);
        Ok(SampleGrad { loss, correct })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<(), CnnError> {
        let meta = serde_json::json!({ "kind": CKPT_KIND, "config": self.config, "extra": extra });
        crate::ckpt::save(path, &meta, &[("params", &self.params)])?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), CnnError> {
        let mut ck = crate::ckpt::load(path)?;
        if ck.meta["kind"] != CKPT_KIND {
            return Err(CnnError::InvalidInput(format!("{} is not a CNN checkpoint", path.display())));
        }
        let config: CnnConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| CnnError::InvalidInput(format!("checkpoint config: {e}")))?;
        let params = ck.take("params", path)?;
        let extra = ck.meta["extra"].take();
        Ok((Self::from_params(config, params)?, extra))
    }

    /// Index range of a named tensor.
    pub fn param_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.layout.entries.iter().find(|e| e.name == name).map(|e| e.range())
    }
}
