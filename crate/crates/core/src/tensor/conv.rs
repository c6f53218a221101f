use super::kernels::{gemm, Im2col};
use super::tape::{Contributions, Nodes, Op};
use super::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size `ceil(in / stride)`.
    Same,
    /// No padding: output `(in - k) / stride + 1`.
    Valid,
}

/// Output geometry of an NHWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn compute(
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let axis = |size: usize, k: usize| -> Result<(usize, usize)> {
            match padding {
                Padding::Valid => {
                    if k > size {
                        return Err(Error::invalid(
                            "conv2d",
                            format!("kernel {k} exceeds input extent {size}: zero-size output"),
                        ));
                    }
                    Ok(((size - k) / stride + 1, 0))
                }
                Padding::Same => {
                    let out = size.div_ceil(stride);
                    let total = ((out - 1) * stride + k).saturating_sub(size);
                    if k > size + total {
                        return Err(Error::invalid("conv2d", "kernel exceeds padded input"));
                    }
                    Ok((out, total / 2))
                }
            }
        };
        let (out_h, pad_top) = axis(in_h, kh)?;
        let (out_w, pad_left) = axis(in_w, kw)?;
        Ok(Self {
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }
}

impl Tape {
    /// Cross-correlation of `x: [N×H×W×Cin]` with `w: [kh×kw×Cin×Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if sx[3] != sw[2] {
            return Err(Error::invalid(
                "conv2d",
                format!("input has {} channels but kernel expects {}", sx[3], sw[2]),
            ));
        }
        let geo = ConvGeometry::compute(sx[1], sx[2], sw[0], sw[1], stride, padding)?;
        let geom = Im2col {
            n: sx[0],
            h: sx[1],
            w: sx[2],
            cin: sx[3],
            kh: sw[0],
            kw: sw[1],
            stride,
            pad_top: geo.pad_top,
            pad_left: geo.pad_left,
            oh: geo.out_h,
            ow: geo.out_w,
        };
        let cout = sw[3];
        let mut out = vec![0.0; geom.rows() * cout];
        let xd = self.data(x);
        let expanded;
        let cols: &[f32] = if geom.is_identity() {
            xd
        } else {
            expanded = geom.expand(xd);
            &expanded
        };
        gemm(geom.rows(), geom.cols(), cout, cols, false, self.data(w), false, &mut out, false);
        self.push(
            Op::Conv2d { x, w, geom, cout },
            vec![geom.n, geom.oh, geom.ow, cout],
            out,
        )
    }

    /// Mean over the spatial axes: `[N×H×W×C] → [N×C]`.
    pub fn spatial_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid("spatial_avg_pool", format!("expected NHWC input, got {s:?}")));
        }
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * c);
        for b in 0..n {
            let mut acc = vec![0.0f64; c];
            for p in 0..hw {
                let base = (b * hw + p) * c;
                acc.iter_mut()
                    .zip(&xd[base..base + c])
                    .for_each(|(a, v)| *a += *v as f64);
            }
            out.extend(acc.into_iter().map(|v| (v / hw as f64) as f32));
        }
        self.push(Op::AvgPool { x, n, hw, c }, vec![n, c], out)
    }
}

pub(super) fn conv2d_backward(
    nodes: &Nodes,
    x: Var,
    w: Var,
    geom: &Im2col,
    cout: usize,
    g: &[f32],
) -> Contributions {
    let mut out = Vec::new();
    if nodes.needs(w) {
        let xd = nodes.data(x);
        let expanded;
        let cols: &[f32] = if geom.is_identity() {
            xd
        } else {
            expanded = geom.expand(xd);
            &expanded
        };
        let mut dw = vec![0.0; geom.cols() * cout];
        gemm(geom.cols(), geom.rows(), cout, cols, true, g, false, &mut dw, false);
        out.push((w, dw));
    }
    if nodes.needs(x) {
        let mut dcols = vec![0.0; geom.rows() * geom.cols()];
        gemm(geom.rows(), cout, geom.cols(), g, false, nodes.data(w), true, &mut dcols, false);
        if geom.is_identity() {
            out.push((x, dcols));
        } else {
            let mut dx = vec![0.0; nodes.value(x).len()];
            geom.fold(&dcols, &mut dx);
            out.push((x, dx));
        }
    }
    out
}

pub(super) fn avg_pool_backward(x: Var, n: usize, hw: usize, c: usize, g: &[f32]) -> Contributions {
    let scale = 1.0 / hw as f32;
    let mut dx = vec![0.0; n * hw * c];
    for b in 0..n {
        for p in 0..hw {
            let base = (b * hw + p) * c;
            dx[base..base + c]
                .iter_mut()
                .zip(&g[b * c..(b + 1) * c])
                .for_each(|(d, v)| *d = v * scale);
        }
    }
    vec![(x, dx)]
}
