//! Patch network shape, independence and gradient properties.

mod common;

use common::{global_rel_err, randn, store_gradcheck};
use selfie::encoder::{init_patch_network, PatchNet, PatchNetConfig};
use selfie::layers::Forward;
use selfie::params::{ParamStore, Role};
use selfie::rng::{Site, Streams};
use selfie::{Mode, Tensor};

fn build(cfg: &PatchNetConfig, seed: u64) -> (PatchNet, ParamStore) {
    let mut store = ParamStore::new();
    let net = init_patch_network(cfg, &mut store, &mut Streams::new(seed).stream(Site::Init, 0)).unwrap();
    (net, store)
}

fn encode(net: &PatchNet, store: &mut ParamStore, patches: &Tensor, mode: Mode) -> Tensor {
    let mut f = Forward::new(store, mode, Streams::new(0).stream(Site::Dropout, 0));
    let h = net.encode(&mut f, patches).unwrap();
    f.tape.value(h).clone()
}

/// Independent count: stem conv, per block two BNs and two 3×3 convs plus a
/// 1×1 projection whenever width or stride changes, and the final BN.
fn analytic_param_count(cfg: &PatchNetConfig) -> usize {
    let mut total = 9 * cfg.in_channels * cfg.stem_channels;
    let mut cin = cfg.stem_channels;
    for g in 0..3 {
        let c = cfg.group_channels[g];
        for b in 0..cfg.block_counts[g] {
            let stride = if g > 0 && b == 0 { 2 } else { 1 };
            total += 2 * cin + 9 * cin * c + 2 * c + 9 * c * c;
            if cin != c || stride != 1 {
                total += cin * c;
            }
            cin = c;
        }
    }
    total + 2 * cin
}

#[test]
fn desk_parameter_count_matches_analytic() {
    let cfg = PatchNetConfig::desk(8);
    let (_, store) = build(&cfg, 1);
    assert_eq!(store.trainable_count(), analytic_param_count(&cfg));
    assert_eq!(store.trainable_count(), 174_416);
    let (_, again) = build(&cfg, 1);
    assert_eq!(store, again);
}

#[test]
fn every_trunk_tensor_carries_a_transfer_role() {
    let (_, store) = build(&PatchNetConfig::desk(8), 2);
    for (_, p) in store.iter() {
        let ok = matches!(p.role, Role::Group(1..=3)) || (p.role == Role::Post && p.name.starts_with("patchnet.post"));
        assert!(ok, "{} has role {}", p.name, p.role);
    }
}

#[test]
fn output_shape() {
    let (net, mut store) = build(&PatchNetConfig::desk(8), 3);
    let out = encode(&net, &mut store, &randn(&[2, 12, 8, 8, 3], 4), Mode::Train);
    assert_eq!(out.shape(), &[2, 12, 64]);
    assert!(out.data().iter().all(|x| x.is_finite()));
    let err = {
        let mut f = Forward::new(&mut store, Mode::Eval, Streams::new(0).stream(Site::Dropout, 0));
        net.encode(&mut f, &randn(&[2, 12, 4, 4, 3], 4)).unwrap_err()
    };
    assert!(err.to_string().contains("encode_patches"), "{err}");
}

/// Running statistics away from their defaults, so eval mode is not a
/// plain identity normalization.
fn perturb_stats(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id);
        if p.name.ends_with("running_mean") {
            p.tensor = randn(p.tensor.shape(), 100 + k as u64);
            p.tensor.data_mut().iter_mut().for_each(|x| *x *= 0.3);
        } else if p.name.ends_with("running_var") {
            p.tensor = randn(p.tensor.shape(), 100 + k as u64);
            p.tensor.data_mut().iter_mut().for_each(|x| *x = 1.0 + 0.5 * x.abs());
        } else if p.name.ends_with("tracked") {
            p.tensor.data_mut()[0] = 1.0;
        }
    }
}

#[test]
fn duplicate_patches_get_equal_features_in_eval_mode() {
    let (net, mut store) = build(&PatchNetConfig::desk(8), 5);
    perturb_stats(&mut store);
    let mut data = randn(&[1, 5, 8, 8, 3], 6).into_data();
    let len = 8 * 8 * 3;
    let first: Vec<f32> = data[..len].to_vec();
    data[3 * len..4 * len].copy_from_slice(&first);
    let out = encode(&net, &mut store, &Tensor::new(vec![1, 5, 8, 8, 3], data).unwrap(), Mode::Eval);
    assert_eq!(out.data()[..64], out.data()[3 * 64..4 * 64]);
}

#[test]
fn permuting_patches_permutes_features_in_eval_mode() {
    let (net, mut store) = build(&PatchNetConfig::desk(8), 7);
    perturb_stats(&mut store);
    let x = randn(&[1, 6, 8, 8, 3], 8);
    let perm = [4, 0, 5, 2, 1, 3];
    let len = 8 * 8 * 3;
    let mut shuffled = Vec::with_capacity(x.len());
    for &i in &perm {
        shuffled.extend_from_slice(&x.data()[i * len..(i + 1) * len]);
    }
    let a = encode(&net, &mut store, &x, Mode::Eval);
    let b = encode(&net, &mut store, &Tensor::new(vec![1, 6, 8, 8, 3], shuffled).unwrap(), Mode::Eval);
    for (slot, &i) in perm.iter().enumerate() {
        assert_eq!(b.data()[slot * 64..(slot + 1) * 64], a.data()[i * 64..(i + 1) * 64]);
    }
}

#[test]
fn gradient_check_through_residual_blocks() {
    let cfg = PatchNetConfig {
        in_channels: 2,
        stem_channels: 3,
        block_counts: [1, 1, 1],
        group_channels: [3, 4, 4],
        patch_size: 4,
    };
    let (net, store) = build(&cfg, 9);
    let patches = randn(&[2, 3, 4, 4, 2], 10);
    let grads = store_gradcheck(&store, Mode::Train, 3e-4, |f| {
        let h = net.encode(f, &patches).unwrap();
        common::project(&mut f.tape, h, 11)
    });
    let global = global_rel_err(&grads);
    assert!(global < 1e-2, "end-to-end relative error {global:.3e}");
    for g in grads.iter().filter(|g| g.norm() > 0.1) {
        assert!(g.rel_err() < 1e-2, "{}: {:.3e}", g.name, g.rel_err());
    }
}
