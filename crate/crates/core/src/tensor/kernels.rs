//! Raw float kernels shared by the tape ops.

/// `c = op(a)·op(b)` (or `c += ...` when `accumulate`), where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored in its
/// untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to the extent implied by
    // its dimensions and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial layout of one NHWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Im2col {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Im2col {
    pub fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    pub fn cols(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Whether the column matrix is the input itself.
    pub fn is_identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    pub fn expand(&self, x: &[f32]) -> Vec<f32> {
        let cols = self.cols();
        let mut out = vec![0.0f32; self.rows() * cols];
        for b in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = ((b * self.oh + oy) * self.ow + ox) * cols;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            let dst = row + (ky * self.kw + kx) * self.cin;
                            out[dst..dst + self.cin].copy_from_slice(&x[src..src + self.cin]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Im2col::expand`]: scatter-add columns back onto the input.
    pub fn fold(&self, cols_buf: &[f32], dx: &mut [f32]) {
        let cols = self.cols();
        for b in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = ((b * self.oh + oy) * self.ow + ox) * cols;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let dst = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            let src = row + (ky * self.kw + kx) * self.cin;
                            for (d, s) in dx[dst..dst + self.cin]
                                .iter_mut()
                                .zip(&cols_buf[src..src + self.cin])
                            {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}
