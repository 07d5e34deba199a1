//! Dense CPU kernels: row-major GEMM and im2col convolutions.

/// Geometry of a 2-d cross-correlation from `in_c × in_h × in_w` to
/// `out_c × out_h × out_w` with a square `k × k` kernel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(in_c: usize, in_h: usize, in_w: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1 && k >= 1);
        let out_h = (in_h + 2 * pad - k) / stride + 1;
        let out_w = (in_w + 2 * pad - k) / stride + 1;
        ConvGeom { in_c, in_h, in_w, out_c, out_h, out_w, k, stride, pad }
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = op(a) · op(b) + beta · c` for row-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], ta: bool, b: &[f32], tb: bool, c: &mut [f32], beta: f32) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices were checked to hold exactly the strided extents above.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn im2col(g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let l = g.col_cols();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        *v = if ix < 0 || ix >= g.in_w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f32], x: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let l = g.col_cols();
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `x: n × in_c × in_h × in_w`, `w: out_c × in_c × k × k`.
pub(crate) fn conv2d_forward(g: &ConvGeom, n: usize, x: &[f32], w: &[f32]) -> Vec<f32> {
    let (rows, l) = (g.col_rows(), g.col_cols());
    let in_sz = g.in_c * g.in_h * g.in_w;
    let out_sz = g.out_c * l;
    let mut out = vec![0f32; n * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0f32; rows * l] };
    for i in 0..n {
        let xi = &x[i * in_sz..(i + 1) * in_sz];
        let b: &[f32] = if g.is_pointwise() {
            xi
        } else {
            im2col(g, xi, &mut cols);
            &cols
        };
        gemm(g.out_c, rows, l, w, false, b, false, &mut out[i * out_sz..(i + 1) * out_sz], 0.0);
    }
    out
}

/// Adjoint of [`conv2d_forward`] in its input: `gout: n × out_c × out_h × out_w`.
pub(crate) fn conv2d_backward_input(g: &ConvGeom, n: usize, gout: &[f32], w: &[f32]) -> Vec<f32> {
    let (rows, l) = (g.col_rows(), g.col_cols());
    let in_sz = g.in_c * g.in_h * g.in_w;
    let out_sz = g.out_c * l;
    let mut dx = vec![0f32; n * in_sz];
    let mut cols = vec![0f32; rows * l];
    for i in 0..n {
        let gi = &gout[i * out_sz..(i + 1) * out_sz];
        if g.is_pointwise() {
            gemm(rows, g.out_c, l, w, true, gi, false, &mut dx[i * in_sz..(i + 1) * in_sz], 0.0);
        } else {
            gemm(rows, g.out_c, l, w, true, gi, false, &mut cols, 0.0);
            col2im_add(g, &cols, &mut dx[i * in_sz..(i + 1) * in_sz]);
        }
    }
    dx
}

/// Kernel gradient: `sum_i gout_i · im2col(x_i)^T`, shaped `out_c × in_c × k × k`.
pub(crate) fn conv2d_backward_weight(g: &ConvGeom, n: usize, x: &[f32], gout: &[f32]) -> Vec<f32> {
    let (rows, l) = (g.col_rows(), g.col_cols());
    let in_sz = g.in_c * g.in_h * g.in_w;
    let out_sz = g.out_c * l;
    let mut dw = vec![0f32; g.out_c * rows];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0f32; rows * l] };
    for i in 0..n {
        let xi = &x[i * in_sz..(i + 1) * in_sz];
        let b: &[f32] = if g.is_pointwise() {
            xi
        } else {
            im2col(g, xi, &mut cols);
            &cols
        };
        gemm(g.out_c, l, rows, &gout[i * out_sz..(i + 1) * out_sz], false, b, true, &mut dw, 1.0);
    }
    dw
}
