//! Raw forward/backward kernels on `[H, W, C]` buffers.

/// Strided matrix view handed to the GEMM routine.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn rowmajor(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, with `c` row-major with row
/// stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    let a_end = (m as isize - 1) * a.rs + (k as isize - 1) * a.cs;
    let b_end = (k as isize - 1) * b.rs + (n as isize - 1) * b.cs;
    assert!(a_end >= 0 && (a_end as usize) < a.data.len(), "gemm: lhs out of bounds");
    assert!(b_end >= 0 && (b_end as usize) < b.data.len(), "gemm: rhs out of bounds");
    assert!((m - 1) * ldc + n <= c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin_g()
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.groups == 1
    }

    fn depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    /// Input coordinate read by tap `(ky, kx)` for output `(y, x)`.
    #[inline]
    fn src(&self, y: usize, x: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let py = (self.kh / 2 * self.dilation) as isize;
        let px = (self.kw / 2 * self.dilation) as isize;
        let sy = y as isize + (ky * self.dilation) as isize - py;
        let sx = x as isize + (kx * self.dilation) as isize - px;
        if sy < 0 || sx < 0 || sy >= self.h as isize || sx >= self.w as isize {
            None
        } else {
            Some((sy as usize, sx as usize))
        }
    }

    fn im2col(&self, input: &[f64], group: usize, col: &mut [f64]) {
        let cin_g = self.cin_g();
        let patch = self.patch();
        col.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..self.h {
            for x in 0..self.w {
                let row = &mut col[(y * self.w + x) * patch..][..patch];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some((sy, sx)) = self.src(y, x, ky, kx) {
                            let s = (sy * self.w + sx) * self.cin + group * cin_g;
                            let d = (ky * self.kw + kx) * cin_g;
                            row[d..d + cin_g].copy_from_slice(&input[s..s + cin_g]);
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f64], group: usize, grad_in: &mut [f64]) {
        let cin_g = self.cin_g();
        let patch = self.patch();
        for y in 0..self.h {
            for x in 0..self.w {
                let row = &col[(y * self.w + x) * patch..][..patch];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        if let Some((sy, sx)) = self.src(y, x, ky, kx) {
                            let s = (sy * self.w + sx) * self.cin + group * cin_g;
                            let d = (ky * self.kw + kx) * cin_g;
                            for c in 0..cin_g {
                                grad_in[s + c] += row[d + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let hw = g.h * g.w;
    let mut out = vec![0.0; hw * g.cout];
    if g.pointwise() {
        gemm(
            hw,
            g.cin,
            g.cout,
            1.0,
            MatRef::rowmajor(input, g.cin),
            MatRef::rowmajor(kernel, g.cout),
            0.0,
            &mut out,
            g.cout,
        );
        return out;
    }
    if g.depthwise() {
        for y in 0..g.h {
            for x in 0..g.w {
                let o = &mut out[(y * g.w + x) * g.cout..][..g.cout];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((sy, sx)) = g.src(y, x, ky, kx) {
                            let i = &input[(sy * g.w + sx) * g.cin..][..g.cin];
                            let k = &kernel[(ky * g.kw + kx) * g.cout..][..g.cout];
                            for c in 0..g.cout {
                                o[c] += i[c] * k[c];
                            }
                        }
                    }
                }
            }
        }
        return out;
    }
    let patch = g.patch();
    let cout_g = g.cout_g();
    let mut col = vec![0.0; hw * patch];
    for grp in 0..g.groups {
        g.im2col(input, grp, &mut col);
        gemm(
            hw,
            patch,
            cout_g,
            1.0,
            MatRef::rowmajor(&col, patch),
            MatRef {
                data: &kernel[grp * cout_g..],
                rs: g.cout as isize,
                cs: 1,
            },
            0.0,
            &mut out[grp * cout_g..],
            g.cout,
        );
    }
    out
}

/// Returns `(d input, d kernel)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hw = g.h * g.w;
    let mut gin = vec![0.0; hw * g.cin];
    let mut gk = vec![0.0; kernel.len()];
    if g.pointwise() {
        // dX = dY * K^T ; dK = X^T * dY
        gemm(
            hw,
            g.cout,
            g.cin,
            1.0,
            MatRef::rowmajor(grad_out, g.cout),
            MatRef::rowmajor(kernel, g.cout).t(),
            0.0,
            &mut gin,
            g.cin,
        );
        gemm(
            g.cin,
            hw,
            g.cout,
            1.0,
            MatRef::rowmajor(input, g.cin).t(),
            MatRef::rowmajor(grad_out, g.cout),
            0.0,
            &mut gk,
            g.cout,
        );
        return (gin, gk);
    }
    if g.depthwise() {
        for y in 0..g.h {
            for x in 0..g.w {
                let go = &grad_out[(y * g.w + x) * g.cout..][..g.cout];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((sy, sx)) = g.src(y, x, ky, kx) {
                            let base = (sy * g.w + sx) * g.cin;
                            let kbase = (ky * g.kw + kx) * g.cout;
                            for c in 0..g.cout {
                                gin[base + c] += go[c] * kernel[kbase + c];
                                gk[kbase + c] += go[c] * input[base + c];
                            }
                        }
                    }
                }
            }
        }
        return (gin, gk);
    }
    let patch = g.patch();
    let cout_g = g.cout_g();
    let mut col = vec![0.0; hw * patch];
    let mut dcol = vec![0.0; hw * patch];
    for grp in 0..g.groups {
        g.im2col(input, grp, &mut col);
        let go = MatRef {
            data: &grad_out[grp * cout_g..],
            rs: g.cout as isize,
            cs: 1,
        };
        // dK_g (patch x cout_g) = col^T * dY_g
        gemm(
            patch,
            hw,
            cout_g,
            1.0,
            MatRef::rowmajor(&col, patch).t(),
            go,
            0.0,
            &mut gk[grp * cout_g..],
            g.cout,
        );
        // dcol (hw x patch) = dY_g * K_g^T
        gemm(
            hw,
            cout_g,
            patch,
            1.0,
            go,
            MatRef {
                data: &kernel[grp * cout_g..],
                rs: 1,
                cs: g.cout as isize,
            },
            0.0,
            &mut dcol,
            patch,
        );
        g.col2im_add(&dcol, grp, &mut gin);
    }
    (gin, gk)
}

/// 2x2 max pooling. Odd extents are padded on the right/bottom by edge
/// replication, which leaves the window maximum unchanged. Returns the pooled
/// values and, per output element, the flat input index that won.
pub(crate) fn max_pool2x(input: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = vec![0.0; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let y = (2 * oy + dy).min(h - 1);
                        let x = (2 * ox + dx).min(w - 1);
                        let i = (y * w + x) * c + ch;
                        if best_i == usize::MAX || input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg, oh, ow)
}

/// Source taps for 2x bilinear upsampling along one axis (half-pixel
/// centers, clamped at the borders).
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let t = src - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

pub(crate) fn upsample2x(input: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let ow = 2 * w;
    let mut out = vec![0.0; 4 * h * w * c];
    for (oy, &(y0, y1, a)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, b)) in tx.iter().enumerate() {
            let o = &mut out[(oy * ow + ox) * c..][..c];
            let taps = [
                (y0, x0, (1.0 - a) * (1.0 - b)),
                (y0, x1, (1.0 - a) * b),
                (y1, x0, a * (1.0 - b)),
                (y1, x1, a * b),
            ];
            for (y, x, wgt) in taps {
                let i = &input[(y * w + x) * c..][..c];
                for ch in 0..c {
                    o[ch] += wgt * i[ch];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(grad_out: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let ow = 2 * w;
    let mut gin = vec![0.0; h * w * c];
    for (oy, &(y0, y1, a)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, b)) in tx.iter().enumerate() {
            let go = &grad_out[(oy * ow + ox) * c..][..c];
            let taps = [
                (y0, x0, (1.0 - a) * (1.0 - b)),
                (y0, x1, (1.0 - a) * b),
                (y1, x0, a * (1.0 - b)),
                (y1, x1, a * b),
            ];
            for (y, x, wgt) in taps {
                let gi = &mut gin[(y * w + x) * c..][..c];
                for ch in 0..c {
                    gi[ch] += wgt * go[ch];
                }
            }
        }
    }
    gin
}
