use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use selfie::tensor::{Padding, RunningStats};
use selfie::Mode;

use super::{gradcheck, project, randn};

pub const OP_TOL: f64 = 1e-3;
pub const CHAIN_TOL: f64 = 1e-2;

pub struct GradCase {
    pub name: &'static str,
    pub err: f64,
    pub tol: f64,
}

/// False for NaN errors as well as large ones.
pub fn within(err: f64, tol: f64) -> bool {
    err < tol
}

impl GradCase {
    pub fn passes(&self) -> bool {
        within(self.err, self.tol)
    }
}

fn case(name: &'static str, err: f64, tol: f64) -> GradCase {
    GradCase { name, err, tol }
}

/// Every differentiable tape operation against central differences.
pub fn op_gradient_cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    out.push(case(
        "matmul",
        gradcheck(&[randn(&[3, 4], 1), randn(&[4, 2], 2)], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, 3)
        }),
        OP_TOL,
    ));
    for trans_b in [false, true] {
        let b_shape: &[usize] = if trans_b { &[2, 4, 3] } else { &[2, 3, 4] };
        out.push(case(
            if trans_b { "bmm (b transposed)" } else { "bmm" },
            gradcheck(&[randn(&[2, 5, 3], 4), randn(b_shape, 5)], |t, v| {
                let y = t.bmm(v[0], v[1], trans_b).unwrap();
                project(t, y, 6)
            }),
            OP_TOL,
        ));
    }
    out.push(case(
        "add/add_bias/mul/scale",
        gradcheck(&[randn(&[3, 4], 7), randn(&[3, 4], 8), randn(&[4], 9)], |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let b = t.add_bias(a, v[2]).unwrap();
            let c = t.mul(b, v[0]).unwrap();
            let d = t.scale(c, -0.7).unwrap();
            project(t, d, 10)
        }),
        OP_TOL,
    ));
    out.push(case(
        "relu",
        gradcheck(&[randn(&[5, 6], 11)], |t, v| {
            let y = t.relu(v[0]).unwrap();
            project(t, y, 12)
        }),
        OP_TOL,
    ));
    out.push(case(
        "gelu",
        gradcheck(&[randn(&[5, 6], 13)], |t, v| {
            let y = t.gelu(v[0]).unwrap();
            project(t, y, 14)
        }),
        OP_TOL,
    ));
    out.push(case(
        "permute/reshape/concat/gather",
        gradcheck(&[randn(&[2, 3, 4], 15), randn(&[1, 3, 4], 16)], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1]).unwrap();
            let r = t.reshape(p, &[8, 3]).unwrap();
            let r = t.reshape(r, &[2, 3, 4]).unwrap();
            let c = t.concat_rows(&[r, v[1]]).unwrap();
            let g = t.gather(c, &[2, 0, 2, 1]).unwrap();
            project(t, g, 17)
        }),
        OP_TOL,
    ));
    out.push(case(
        "sum/mean",
        gradcheck(&[randn(&[4, 3], 18)], |t, v| {
            let s = t.sum(v[0]).unwrap();
            let m = t.mean(v[0]).unwrap();
            let s2 = t.mul(s, m).unwrap();
            t.sum(s2).unwrap()
        }),
        OP_TOL,
    ));
    for (name, stride, padding, k) in [
        ("conv2d 3x3 same", 1, Padding::Same, 3),
        ("conv2d 3x3 same stride 2", 2, Padding::Same, 3),
        ("conv2d 3x3 valid", 1, Padding::Valid, 3),
        ("conv2d 1x1 stride 2", 2, Padding::Same, 1),
    ] {
        out.push(case(
            name,
            gradcheck(&[randn(&[2, 5, 5, 2], 19), randn(&[k, k, 2, 3], 20)], |t, v| {
                let y = t.conv2d(v[0], v[1], stride, padding).unwrap();
                project(t, y, 21)
            }),
            OP_TOL,
        ));
    }
    out.push(case(
        "spatial_avg_pool",
        gradcheck(&[randn(&[2, 3, 3, 4], 22)], |t, v| {
            let y = t.spatial_avg_pool(v[0]).unwrap();
            project(t, y, 23)
        }),
        OP_TOL,
    ));
    for (name, mode) in [("batch_norm train", Mode::Train), ("batch_norm eval", Mode::Eval)] {
        out.push(case(
            name,
            gradcheck(&[randn(&[2, 4, 4, 3], 24), randn(&[3], 25), randn(&[3], 26)], |t, v| {
                let mut stats = RunningStats::new(3);
                stats.tracked = 1;
                stats.var = vec![0.5, 1.5, 2.0];
                let y = t.batch_norm(v[0], v[1], v[2], &mut stats, mode).unwrap();
                project(t, y, 27)
            }),
            OP_TOL,
        ));
    }
    out.push(case(
        "layer_norm",
        gradcheck(&[randn(&[4, 6], 28), randn(&[6], 29), randn(&[6], 30)], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            project(t, y, 31)
        }),
        OP_TOL,
    ));
    out.push(case(
        "softmax",
        gradcheck(&[randn(&[3, 5], 32)], |t, v| {
            let y = t.softmax(v[0]).unwrap();
            project(t, y, 33)
        }),
        OP_TOL,
    ));
    out.push(case(
        "softmax_cross_entropy",
        gradcheck(&[randn(&[4, 5], 34)], |t, v| t.softmax_cross_entropy(v[0], &[0, 4, 2, 2]).unwrap()),
        OP_TOL,
    ));
    out.push(case(
        "dropout",
        gradcheck(&[randn(&[6, 5], 35)], |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(36);
            let y = t.dropout(v[0], 0.3, Mode::Train, &mut rng).unwrap();
            project(t, y, 37)
        }),
        OP_TOL,
    ));
    out.push(case(
        "bn→relu→conv residual",
        gradcheck(
            &[
                randn(&[2, 4, 4, 3], 38),
                randn(&[3], 39),
                randn(&[3], 40),
                randn(&[3, 3, 3, 3], 41),
            ],
            |t, v| {
                let mut stats = RunningStats::new(3);
                let a = t.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train).unwrap();
                let a = t.relu(a).unwrap();
                let c = t.conv2d(a, v[3], 1, Padding::Same).unwrap();
                let r = t.add(c, v[0]).unwrap();
                let p = t.spatial_avg_pool(r).unwrap();
                project(t, p, 42)
            },
        ),
        CHAIN_TOL,
    ));
    out
}
