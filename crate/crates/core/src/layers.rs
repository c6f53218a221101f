//! Parameterized building blocks and the per-step forward context.

use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::params::{ParamId, ParamStore, Role};
use crate::rng::StreamRng;
use crate::tensor::{Mode, Padding, RunningStats, Tape, Tensor, Var};

/// One forward pass: a fresh tape plus lazily bound parameters.
///
/// Batch-norm running statistics are updated in the store as train-mode
/// forwards run.
pub struct Forward<'a> {
    pub tape: Tape,
    pub mode: Mode,
    store: &'a mut ParamStore,
    bound: Vec<Option<Var>>,
    dropout: StreamRng,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a mut ParamStore, mode: Mode, dropout: StreamRng) -> Self {
        let bound = vec![None; store.len()];
        Self {
            tape: Tape::new(),
            mode,
            store,
            bound,
            dropout,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let p = self.store.get(id);
        let t = p.tensor.clone().with_requires_grad(p.kind.trainable());
        let v = self.tape.leaf(t);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn dropout(&mut self, x: Var, rate: f32) -> Result<Var> {
        self.tape.dropout(x, rate, self.mode, &mut self.dropout)
    }

    /// Run backward from `loss` and return per-parameter gradients indexed
    /// like the store. Unused parameters get `None`.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Option<Vec<f32>>>> {
        self.tape.backward(loss)?;
        let mut grads = vec![None; self.bound.len()];
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                grads[i] = self.tape.take_grad(*v);
            }
        }
        Ok(grads)
    }

    fn stats(&self, bn: &BatchNorm) -> RunningStats {
        RunningStats {
            mean: self.store.tensor(bn.mean).data().to_vec(),
            var: self.store.tensor(bn.var).data().to_vec(),
            tracked: self.store.tensor(bn.tracked).data()[0] as u64,
        }
    }

    fn write_stats(&mut self, bn: &BatchNorm, stats: RunningStats) {
        self.store
            .get_mut(bn.mean)
            .tensor
            .data_mut()
            .copy_from_slice(&stats.mean);
        self.store
            .get_mut(bn.var)
            .tensor
            .data_mut()
            .copy_from_slice(&stats.var);
        self.store.get_mut(bn.tracked).tensor.data_mut()[0] = stats.tracked as f32;
    }
}

pub(crate) fn normal_tensor(shape: Vec<usize>, std: f32, rng: &mut StreamRng) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("finite positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Square-kernel convolution with same padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub stride: usize,
}

impl Conv2d {
    /// He-normal initialized kernel.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: Role,
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let std = (2.0 / (kernel * kernel * cin) as f32).sqrt();
        let w = normal_tensor(vec![kernel, kernel, cin, cout], std, rng);
        Ok(Self {
            weight: store.insert(format!("{name}.weight"), role, w)?,
            stride,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        f.tape.conv2d(x, w, self.stride, Padding::Same)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
    pub tracked: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, role: Role, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), role, Tensor::ones(vec![channels]))?,
            beta: store.insert(format!("{name}.beta"), role, Tensor::zeros(vec![channels]))?,
            mean: store.insert(format!("{name}.running_mean"), role, Tensor::zeros(vec![channels]))?,
            var: store.insert(format!("{name}.running_var"), role, Tensor::ones(vec![channels]))?,
            tracked: store.insert(format!("{name}.tracked"), role, Tensor::zeros(vec![1]))?,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        let mut stats = f.stats(self);
        let mode = f.mode;
        let y = f.tape.batch_norm(x, g, b, &mut stats, mode)?;
        if mode == Mode::Train {
            f.write_stats(self, stats);
        }
        Ok(y)
    }
}

/// `y = x·W + b` over the last axis, `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: Role,
        input: usize,
        output: usize,
        std: f32,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let w = normal_tensor(vec![input, output], std, rng);
        Ok(Self {
            weight: store.insert(format!("{name}.weight"), role, w)?,
            bias: store.insert(format!("{name}.bias"), role, Tensor::zeros(vec![output]))?,
            input,
            output,
        })
    }

    /// Applies to `[.. × input]`, flattening leading axes.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x).to_vec();
        let rows = f.tape.value(x).len() / self.input;
        let flat = if shape.len() == 2 {
            x
        } else {
            f.tape.reshape(x, &[rows, self.input])?
        };
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        let y = f.tape.matmul(flat, w)?;
        let y = f.tape.add_bias(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().expect("non-empty shape") = self.output;
            f.tape.reshape(y, &out)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, role: Role, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), role, Tensor::ones(vec![dim]))?,
            beta: store.insert(format!("{name}.beta"), role, Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        f.tape.layer_norm(x, g, b)
    }
}
