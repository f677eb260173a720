//! Flat parameter storage.
//!
//! All trainable parameters of a model live in one `Vec<f64>`; layers hold
//! `Slot`s (offset + length) into it. Gradients use a parallel buffer with
//! identical layout, which makes the optimizer, gradient clipping, and
//! checkpoint IO operate on plain slices.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A contiguous parameter region inside a store.
#[derive(Debug, Clone, Copy)]
pub struct Slot {
    pub off: usize,
    pub len: usize,
}

impl Slot {
    pub fn slice<'a>(&self, ps: &'a [f64]) -> &'a [f64] {
        &ps[self.off..self.off + self.len]
    }

    pub fn slice_mut<'a>(&self, ps: &'a mut [f64]) -> &'a mut [f64] {
        &mut ps[self.off..self.off + self.len]
    }

    pub fn mat<'a>(&self, ps: &'a [f64], rows: usize, cols: usize) -> ArrayView2<'a, f64> {
        debug_assert_eq!(rows * cols, self.len);
        ArrayView2::from_shape((rows, cols), self.slice(ps)).unwrap()
    }

    pub fn mat_mut<'a>(
        &self,
        ps: &'a mut [f64],
        rows: usize,
        cols: usize,
    ) -> ArrayViewMut2<'a, f64> {
        debug_assert_eq!(rows * cols, self.len);
        ArrayViewMut2::from_shape((rows, cols), self.slice_mut(ps)).unwrap()
    }

    pub fn vec<'a>(&self, ps: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from_shape(self.len, self.slice(ps)).unwrap()
    }

    pub fn vec_mut<'a>(&self, ps: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from_shape(self.len, self.slice_mut(ps)).unwrap()
    }
}

/// Accumulates initialized parameters while a model is being wired up.
pub struct StoreBuilder {
    data: Vec<f64>,
}

impl StoreBuilder {
    pub fn new() -> Self {
        StoreBuilder { data: Vec::new() }
    }

    /// Allocates `len` parameters initialized to `value`.
    pub fn alloc_const(&mut self, len: usize, value: f64) -> Slot {
        let off = self.data.len();
        self.data.resize(off + len, value);
        Slot { off, len }
    }

    /// Allocates `len` parameters drawn from N(0, std^2).
    pub fn alloc_normal(&mut self, len: usize, std: f64, rng: &mut ChaCha8Rng) -> Slot {
        let off = self.data.len();
        self.data.reserve(len);
        for _ in 0..len {
            let z: f64 = rng.sample(StandardNormal);
            self.data.push(z * std);
        }
        Slot { off, len }
    }

    pub fn finish(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl Default for StoreBuilder {
    fn default() -> Self {
        Self::new()
    }
}
