#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use selfie::encoder::PatchNetConfig;
use selfie::layers::Forward;
use selfie::model::{init_pretrain_model, ModelConfig, PretrainModel};
use selfie::pool::{AttentionConfig, Positional};
use selfie::params::{ParamKind, ParamStore};
use selfie::rng::{Site, Streams};
use selfie::{Mode, Tape, Tensor, Var};

pub mod cases;

pub const FD_EPS: f32 = 1e-3;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f32 = StandardNormal.sample(&mut rng);
        v
    })
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Worst per-input relative error between backprop gradients and central
/// differences.
///
/// `build` records a scalar loss from the input vars. The numeric side
/// re-evaluates the forward on constants only, so it shares nothing with the
/// backward rules under test.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f32>> = vars.iter().map(|&v| tape.grad(v).expect("grad").to_vec()).collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.data(loss)[0] as f64
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            let (hi, lo) = (orig + FD_EPS, orig - FD_EPS);
            probe[i].data_mut()[j] = hi;
            let up = eval(&probe);
            probe[i].data_mut()[j] = lo;
            let down = eval(&probe);
            probe[i].data_mut()[j] = orig;
            numeric.push((up - down) / (hi as f64 - lo as f64));
        }
        let analytic: Vec<f64> = grad.iter().map(|&g| g as f64).collect();
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Contract an arbitrary output with fixed random weights so every output
/// element contributes to the scalar loss.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let w = randn(tape.shape(y), seed);
    let w = tape.constant(w);
    let prod = tape.mul(y, w).unwrap();
    tape.sum(prod).unwrap()
}

pub struct ParamGrad {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl ParamGrad {
    pub fn rel_err(&self) -> f64 {
        rel_err(&self.analytic, &self.numeric)
    }

    pub fn norm(&self) -> f64 {
        self.numeric.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Backprop against central differences for every trainable parameter that
/// receives a gradient.
///
/// `build` records a scalar loss through a [`Forward`]. Each evaluation runs
/// on a fresh copy of `store` with the same dropout stream, so normalization
/// statistics and dropout masks are identical across probes.
pub fn store_gradcheck<F>(store: &ParamStore, mode: Mode, eps: f32, build: F) -> Vec<ParamGrad>
where
    F: Fn(&mut Forward) -> Var,
{
    let stream = || Streams::new(99).stream(Site::Dropout, 0);
    let mut scratch = store.clone();
    let mut f = Forward::new(&mut scratch, mode, stream());
    let loss = build(&mut f);
    let grads = f.backward(loss).expect("backward");

    let eval = |probe: &ParamStore| -> f64 {
        let mut scratch = probe.clone();
        let mut f = Forward::new(&mut scratch, mode, stream());
        let loss = build(&mut f);
        f.tape.data(loss)[0] as f64
    };

    let mut probe = store.clone();
    let mut out = Vec::new();
    for (id, grad) in store.ids().zip(&grads) {
        let Some(grad) = grad else { continue };
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..grad.len() {
            let orig = store.tensor(id).data()[j];
            let (hi, lo) = (orig + eps, orig - eps);
            probe.get_mut(id).tensor.data_mut()[j] = hi;
            let up = eval(&probe);
            probe.get_mut(id).tensor.data_mut()[j] = lo;
            let down = eval(&probe);
            probe.get_mut(id).tensor.data_mut()[j] = orig;
            numeric.push((up - down) / (hi as f64 - lo as f64));
        }
        out.push(ParamGrad {
            name: store.get(id).name.clone(),
            analytic: grad.iter().map(|&g| g as f64).collect(),
            numeric,
        });
    }
    out
}

/// Norm-wise error over all parameters concatenated.
pub fn global_rel_err(grads: &[ParamGrad]) -> f64 {
    let a: Vec<f64> = grads.iter().flat_map(|g| g.analytic.iter().copied()).collect();
    let n: Vec<f64> = grads.iter().flat_map(|g| g.numeric.iter().copied()).collect();
    rel_err(&a, &n)
}

/// Smallest model that still exercises every component: 8×8 images, a 2×2
/// grid of 4×4 patches, one block per group and one attention block.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        image_size: [8, 8],
        patchnet: PatchNetConfig {
            in_channels: 3,
            stem_channels: 4,
            block_counts: [1, 1, 1],
            group_channels: [4, 4, 8],
            patch_size: 4,
        },
        attention: AttentionConfig {
            n_blocks: 1,
            hidden: 16,
            intermediate: 8,
            heads: 2,
            dropout_rate: 0.1,
            positional: Positional::Auto,
            encoder_positions: true,
        },
        shared_query_table: true,
        cross_image_negatives: false,
    }
}

/// Micro pretraining model with pool weights widened from their 0.02 init,
/// so attention is far from uniform and every pool gradient is well above
/// finite-difference noise.
pub fn micro_model(seed: u64) -> (PretrainModel, ParamStore) {
    let mut store = ParamStore::new();
    let model = init_pretrain_model(&micro_config(), &mut store, &mut Streams::new(seed).stream(Site::Init, 0))
        .expect("micro model");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.name.starts_with("pool.") && p.kind == ParamKind::Weight {
            let gain = if p.name.ends_with(".q.weight") || p.name.ends_with(".k.weight") { 80.0 } else { 15.0 };
            p.tensor.data_mut().iter_mut().for_each(|x| *x *= gain);
        }
    }
    (model, store)
}

pub fn images(n: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
    (0..n).map(|i| randn(&[h, w, 3], seed * 1000 + i as u64)).collect()
}
