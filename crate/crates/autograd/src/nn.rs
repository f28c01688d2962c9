//! Parameter-binding helpers and the convolution layer used by every net.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// A graph plus the parameter store being bound into it.
#[derive(Clone, Copy)]
pub struct Scope<'a> {
    pub g: &'a Graph,
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Scope<'a> {
    pub fn new(g: &'a Graph, store: &'a ParamStore, trainable: bool) -> Self {
        Scope { g, store, trainable }
    }

    pub fn frozen(g: &'a Graph, store: &'a ParamStore) -> Self {
        Scope {
            g,
            store,
            trainable: false,
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.g.param(self.store, id, self.trainable)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-initialised conv with zero bias; `pad` defaults to `kernel / 2`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add_he(format!("{name}.w"), &[out_ch, in_ch, kernel, kernel], fan_in, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]));
        Conv2d {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    /// Conv whose weights start at zero (residual output layers).
    pub fn zeros(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[out_ch, in_ch, kernel, kernel]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]));
        Conv2d {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, s: Scope<'_>, x: Var) -> Var {
        s.g.conv2d(x, s.p(self.w), Some(s.p(self.b)), self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }
}
