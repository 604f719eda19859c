//! Named parameter storage and the few layers the host model is built from.

use std::cell::RefCell;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named tensors. Used both for trainable parameters and for
/// non-trainable buffers such as running batch-norm statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor on the tape as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.param(v)).collect()
    }

    /// Replaces all values, checking names and shapes agree.
    pub fn load(&mut self, names: &[String], values: Vec<Tensor>) -> Result<()> {
        if names != self.names.as_slice() || values.len() != self.values.len() {
            return Err(Error::Checkpoint("parameter names do not match the model".into()));
        }
        for (cur, new) in self.values.iter().zip(&values) {
            if cur.shape() != new.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter shape {:?} does not match stored {:?}",
                    cur.shape(),
                    new.shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }
}

/// Running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Forward-pass context: bound parameters, read-only buffers, mode, and the
/// batch statistics collected for a later running-stat update.
pub struct Ctx<'t, 'm> {
    pub tape: &'t Tape,
    pub params: &'m [Var<'t>],
    pub buffers: &'m ParamStore,
    pub training: bool,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

impl<'t, 'm> Ctx<'t, 'm> {
    pub fn new(tape: &'t Tape, params: &'m [Var<'t>], buffers: &'m ParamStore, training: bool) -> Self {
        Self {
            tape,
            params,
            buffers,
            training,
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.params[id.0]
    }

    /// Batch statistics gathered so far, to be folded in once the context
    /// (and its borrow of the buffers) is gone.
    pub fn take_bn_updates(&self) -> BnUpdates {
        BnUpdates(std::mem::take(&mut *self.bn_updates.borrow_mut()))
    }
}

pub struct BnUpdates(Vec<BnUpdate>);

impl BnUpdates {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Folds the batch statistics into the running estimates.
    pub fn apply(self, buffers: &mut ParamStore) {
        for u in self.0 {
            for (r, b) in buffers.get_mut(u.mean).data_mut().iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in buffers.get_mut(u.var).data_mut().iter_mut().zip(&u.batch_var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Kaiming-uniform (fan-in) weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[out_ch, in_ch, kernel, kernel], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        x.conv2d(&ctx.param(self.weight), &ctx.param(self.bias), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(params: &mut ParamStore, buffers: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: buffers.add(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: buffers.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        if ctx.training {
            let out = x.batchnorm2d_train(&g, &b)?;
            ctx.bn_updates.borrow_mut().push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: out.mean,
                batch_var: out.var_unbiased,
            });
            Ok(out.output)
        } else {
            x.batchnorm2d_eval(
                &g,
                &b,
                ctx.buffers.get(self.running_mean).data(),
                ctx.buffers.get(self.running_var).data(),
            )
        }
    }
}
