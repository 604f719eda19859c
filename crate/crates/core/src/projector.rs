//! Per-scale projection heads mapping encoder features into the shared
//! embedding space where the contrastive terms are evaluated.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Ctx, ParamStore};

/// A batch of dense features at one output stride.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap<'t> {
    pub tensor: Var<'t>,
    pub stride: usize,
}

impl<'t> FeatureMap<'t> {
    pub fn new(tensor: Var<'t>, stride: usize) -> Self {
        Self { tensor, stride }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.tensor.shape();
        (s[2], s[3])
    }
}

/// Two `conv1x1 -> ReLU -> BN` blocks at the input width followed by a linear
/// `conv1x1` to `dim` channels.
#[derive(Debug, Clone)]
pub struct Projector {
    blocks: [(Conv, BatchNorm); 2],
    out: Conv,
    in_ch: usize,
    dim: usize,
}

impl Projector {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        name: &str,
        in_ch: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let block = |i: usize, params: &mut ParamStore, buffers: &mut ParamStore, rng: &mut R| {
            let conv = Conv::new(params, &format!("{name}.block{i}.conv"), in_ch, in_ch, 1, 1, 0, rng);
            let bn = BatchNorm::new(params, buffers, &format!("{name}.block{i}.bn"), in_ch);
            (conv, bn)
        };
        let b0 = block(0, params, buffers, rng);
        let b1 = block(1, params, buffers, rng);
        let out = Conv::new(params, &format!("{name}.out"), in_ch, dim, 1, 1, 0, rng);
        Self {
            blocks: [b0, b1],
            out,
            in_ch,
            dim,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[(Conv, BatchNorm); 2] {
        &self.blocks
    }

    pub fn output(&self) -> &Conv {
        &self.out
    }

    /// Projects a feature map; spatial size and stride are preserved.
    pub fn project<'t>(&self, ctx: &Ctx<'t, '_>, features: &FeatureMap<'t>) -> Result<FeatureMap<'t>> {
        if features.channels() != self.in_ch {
            return Err(Error::Shape {
                op: "project",
                lhs: features.tensor.shape(),
                rhs: vec![self.in_ch],
            });
        }
        let mut x = features.tensor;
        for (conv, bn) in &self.blocks {
            x = conv.forward(ctx, &x)?.relu();
            x = bn.forward(ctx, &x)?;
        }
        let z = self.out.forward(ctx, &x)?;
        Ok(FeatureMap::new(z, features.stride))
    }
}
