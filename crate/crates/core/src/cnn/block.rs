//! Inverted residual block: optional 1×1 expansion, depthwise convolution,
//! optional squeeze-and-excitation, linear 1×1 projection, and an identity
//! shortcut when shapes allow.

use super::config::BlockSpec;
use super::layout::{Dense, Init, ParamLayout};
use super::ops::{self, Fmap, SeGrads, SeParams};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SeLayout {
    pub fc1: Dense,
    pub fc2: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockLayout {
    pub spec: BlockSpec,
    pub expand: Option<Dense>,
    pub depthwise: Dense,
    pub se: Option<SeLayout>,
    pub project: Dense,
    pub residual: bool,
}

/// Squeeze width for a block with `hidden` channels.
pub(crate) fn se_width(hidden: usize) -> usize {
    (hidden / 4).max(8)
}

impl BlockLayout {
    pub fn allocate(layout: &mut ParamLayout, name: &str, spec: &BlockSpec, cin: usize) -> Self {
        let hidden = cin * spec.expansion;
        let he = |fan_in| Init::Normal { fan_in, gain: 2f64.sqrt() };
        let zero = Init::Const(0.0);
        let expand = (spec.expansion > 1).then(|| layout.dense(&format!("{name}.expand"), hidden, cin, &[], he(cin), zero));
        let k = spec.kernel;
        let depthwise = layout.dense(&format!("{name}.depthwise"), hidden, k, &[k], he(k * k), zero);
        let se = spec.use_se.then(|| {
            let r = se_width(hidden);
            SeLayout {
                fc1: layout.dense(&format!("{name}.se.fc1"), r, hidden, &[], he(hidden), zero),
                // A bias of 3 opens the hard-sigmoid gate fully at initialization.
                fc2: layout.dense(&format!("{name}.se.fc2"), hidden, r, &[], Init::Normal { fan_in: r, gain: 0.5 }, Init::Const(3.0)),
            }
        });
        let residual = spec.stride == 1 && cin == spec.out_channels;
        let gain = if residual { 0.25 } else { 1.0 };
        let project =
            layout.dense(&format!("{name}.project"), spec.out_channels, hidden, &[], Init::Normal { fan_in: hidden, gain }, zero);
        Self { spec: spec.clone(), expand, depthwise, se, project, residual }
    }
}

/// Activations retained for the backward pass.
pub(crate) struct BlockCache {
    input: Fmap,
    expand_pre: Option<Fmap>,
    expand_act: Option<Fmap>,
    dw_pre: Fmap,
    dw_act: Fmap,
    se: Option<(ops::SeCache, Fmap)>,
}

fn se_params<'a>(se: &SeLayout, p: &'a [f32]) -> SeParams<'a> {
    let (w1, b1) = se.fc1.get(p);
    let (w2, b2) = se.fc2.get(p);
    SeParams { w1, b1, w2, b2 }
}

impl BlockLayout {
    /// Forward pass without retaining intermediates.
    pub fn infer(&self, p: &[f32], x: &Fmap) -> Fmap {
        let act = self.spec.activation;
        let expanded;
        let dw_in = match &self.expand {
            Some(e) => {
                let (w, b) = e.get(p);
                expanded = ops::activate(&ops::pointwise_forward(x, w, b), act);
                &expanded
            }
            None => x,
        };
        let (w, b) = self.depthwise.get(p);
        let mut h = ops::activate(&ops::depthwise_forward(dw_in, w, b, self.spec.kernel, self.spec.stride), act);
        if let Some(se) = &self.se {
            h = ops::se_forward(&h, &se_params(se, p)).0;
        }
        let (w, b) = self.project.get(p);
        let mut y = ops::pointwise_forward(&h, w, b);
        if self.residual {
            crate::linalg::add_assign(&mut y.data, &x.data);
        }
        y
    }

    pub fn forward(&self, p: &[f32], input: Fmap) -> (Fmap, BlockCache) {
        let act = self.spec.activation;
        let (expand_pre, expand_act) = match &self.expand {
            Some(e) => {
                let (w, b) = e.get(p);
                let pre = ops::pointwise_forward(&input, w, b);
                let a = ops::activate(&pre, act);
                (Some(pre), Some(a))
            }
            None => (None, None),
        };
        let (w, b) = self.depthwise.get(p);
        let dw_pre = ops::depthwise_forward(expand_act.as_ref().unwrap_or(&input), w, b, self.spec.kernel, self.spec.stride);
        let dw_act = ops::activate(&dw_pre, act);
        let se = self.se.as_ref().map(|se| ops::se_forward(&dw_act, &se_params(se, p)));
        let (w, b) = self.project.get(p);
        let mut y = ops::pointwise_forward(se.as_ref().map_or(&dw_act, |s| &s.0), w, b);
        if self.residual {
            crate::linalg::add_assign(&mut y.data, &input.data);
        }
        let se = se.map(|(out, cache)| (cache, out));
        (y, BlockCache { input, expand_pre, expand_act, dw_pre, dw_act, se })
    }

    /// Accumulates parameter gradients into `g` and returns the input gradient.
    pub fn backward(&self, p: &[f32], cache: &BlockCache, grad_out: &Fmap, g: &mut [f32]) -> Fmap {
        let act = self.spec.activation;
        let project_in = cache.se.as_ref().map_or(&cache.dw_act, |s| &s.1);
        let (w, _) = self.project.get(p);
        let (gw, gb) = self.project.get_mut(g);
        let mut grad = ops::pointwise_backward(project_in, w, grad_out, gw, gb);
        if let (Some(se), Some((se_cache, _))) = (&self.se, &cache.se) {
            let sp = se_params(se, p);
            // fc1 precedes fc2 in the flat layout.
            let (lo, hi) = g.split_at_mut(se.fc2.offset);
            let (gw1, gb1) = se.fc1.get_mut(lo);
            let fc2_local = Dense { offset: 0, ..se.fc2 };
            let (gw2, gb2) = fc2_local.get_mut(hi);
            grad = ops::se_backward(&cache.dw_act, &sp, se_cache, &grad, SeGrads { w1: gw1, b1: gb1, w2: gw2, b2: gb2 });
        }
        ops::activate_backward(&cache.dw_pre, act, &mut grad.data);
        let dw_in = cache.expand_act.as_ref().unwrap_or(&cache.input);
        let (w, _) = self.depthwise.get(p);
        let (gw, gb) = self.depthwise.get_mut(g);
        let mut grad = ops::depthwise_backward(dw_in, w, &grad, self.spec.kernel, self.spec.stride, gw, gb);
        if let (Some(e), Some(pre)) = (&self.expand, &cache.expand_pre) {
            ops::activate_backward(pre, act, &mut grad.data);
            let (w, _) = e.get(p);
            let (gw, gb) = e.get_mut(g);
            grad = ops::pointwise_backward(&cache.input, w, &grad, gw, gb);
        }
        if self.residual {
            crate::linalg::add_assign(&mut grad.data, &grad_out.data);
        }
        grad
    }
}
