// Raw kernels shared by the tape's forward and backward passes.

/// Strided view of a row-major-ish matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `[rows, cols]` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `out[m, n] = beta * out + a[m, k] @ b[k, n]`, `out` row-major `[m, n]`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, out: &mut [f64], beta: f64) {
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_index(m, k) < a.data.len());
    assert!(b.max_index(k, n) < b.data.len());
    // SAFETY: the asserts above bound every element dgemm touches in `a`,
    // `b`, and `out`; the three buffers do not alias (shared vs unique borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Transposed point convolution, kernel and stride `r`:
/// `out[r*n + s, j] = sum_i x[n, i] * w[s, i, j] + b[j]`.
///
/// The accumulation order (ascending `i` from zero, bias last) is part of the
/// contract so the result equals a straightforward loop exactly.
pub(crate) fn deconv_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, cin: usize, cout: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * r * cout];
    for p in 0..n {
        let xr = &x[p * cin..(p + 1) * cin];
        for s in 0..r {
            let row = &mut out[(p * r + s) * cout..(p * r + s + 1) * cout];
            for (i, &xi) in xr.iter().enumerate() {
                let wr = &w[(s * cin + i) * cout..(s * cin + i + 1) * cout];
                for (o, &wv) in row.iter_mut().zip(wr) {
                    *o += xi * wv;
                }
            }
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    out
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
