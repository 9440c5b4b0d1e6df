//! Flat parameter storage with named, contiguous slots.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Location of one named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Zero-mean normal with std `gain / sqrt(fan_in)`.
    Normal { fan_in: usize, gain: f64 },
    Const(f32),
}

/// Weight followed by bias, stored contiguously.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dense {
    pub offset: usize,
    pub w_len: usize,
    pub b_len: usize,
}

impl Dense {
    pub fn end(&self) -> usize {
        self.offset + self.w_len + self.b_len
    }

    pub fn get<'a>(&self, p: &'a [f32]) -> (&'a [f32], &'a [f32]) {
        p[self.offset..self.end()].split_at(self.w_len)
    }

    pub fn get_mut<'a>(&self, p: &'a mut [f32]) -> (&'a mut [f32], &'a mut [f32]) {
        p[self.offset..self.end()].split_at_mut(self.w_len)
    }
}

/// Every tensor in allocation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    pub entries: Vec<ParamInfo>,
    pub(crate) inits: Vec<Init>,
    pub total: usize,
}

impl ParamLayout {
    pub(crate) fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.total;
        let info = ParamInfo { name, offset, shape };
        self.total += info.len();
        self.entries.push(info);
        self.inits.push(init);
        offset
    }

    pub(crate) fn dense(&mut self, name: &str, rows: usize, cols: usize, extra: &[usize], w: Init, b: Init) -> Dense {
        let mut shape = vec![rows, cols];
        shape.extend_from_slice(extra);
        let w_len: usize = shape.iter().product();
        let offset = self.add(format!("{name}.weight"), shape, w);
        self.add(format!("{name}.bias"), vec![rows], b);
        Dense { offset, w_len, b_len: rows }
    }

    pub fn initialize<R: Rng>(&self, rng: &mut R) -> Vec<f32> {
        let mut params = vec![0.0f32; self.total];
        for (info, init) in self.entries.iter().zip(&self.inits) {
            let slot = &mut params[info.range()];
            match *init {
                Init::Const(v) => slot.fill(v),
                Init::Normal { fan_in, gain } => {
                    let dist = Normal::new(0.0f64, gain / (fan_in.max(1) as f64).sqrt()).expect("finite std");
                    slot.iter_mut().for_each(|x| *x = dist.sample(rng) as f32);
                }
            }
        }
        params
    }

    /// Name of the tensor holding flat index `i`.
    pub fn name_of(&self, i: usize) -> Option<&str> {
        self.entries.iter().find(|e| e.range().contains(&i)).map(|e| e.name.as_str())
    }

    /// First tensor with a non-finite value, with that value's local index.
    pub fn first_non_finite(&self, values: &[f32]) -> Option<(String, usize)> {
        let i = values.iter().position(|v| !v.is_finite())?;
        let e = self.entries.iter().find(|e| e.range().contains(&i))?;
        Some((e.name.clone(), i - e.offset))
    }
}
