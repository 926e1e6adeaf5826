/// Strided view of a row-major (or transposed) matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], offset: usize, rs: usize, cs: usize) -> Self {
        Self { data, offset, rs, cs }
    }

    /// Plain row-major matrix with `cols` columns.
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self::new(data, 0, cols, 1)
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self::new(data, 0, 1, cols)
    }
}

fn last_index(offset: usize, r: usize, c: usize, rs: usize, cs: usize) -> usize {
    if r == 0 || c == 0 {
        offset
    } else {
        offset + (r - 1) * rs + (c - 1) * cs
    }
}

/// Plain loops for few rows or a short inner dimension, where packing
/// dominates the blocked kernel.
#[allow(clippy::too_many_arguments)]
fn gemm_small(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: Mat<'_>,
    b: Mat<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    let mut row = vec![0.0; n];
    for i in 0..m {
        row.fill(0.0);
        let ai = a.offset + i * a.rs;
        if b.cs == 1 {
            for p in 0..k {
                let av = a.data[ai + p * a.cs];
                let bp = &b.data[b.offset + p * b.rs..b.offset + p * b.rs + n];
                for (r, bv) in row.iter_mut().zip(bp) {
                    *r += av * bv;
                }
            }
        } else {
            for (j, r) in row.iter_mut().enumerate() {
                let bj = b.offset + j * b.cs;
                *r = (0..k).map(|p| a.data[ai + p * a.cs] * b.data[bj + p * b.rs]).sum();
            }
        }
        for (j, r) in row.iter().enumerate() {
            let ci = &mut c[c_off + i * rsc + j * csc];
            *ci = if beta == 0.0 { alpha * r } else { alpha * r + beta * *ci };
        }
    }
}

/// `C = alpha * A(m×k) * B(k×n) + beta * C`, with `C` addressed as
/// `c[c_off + i * rsc + j * csc]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: Mat<'_>,
    b: Mat<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || last_index(a.offset, m, k, a.rs, a.cs) < a.data.len());
    assert!(k == 0 || last_index(b.offset, k, n, b.rs, b.cs) < b.data.len());
    assert!(last_index(c_off, m, n, rsc, csc) < c.len());
    if m <= 4 || k <= 4 {
        gemm_small(m, k, n, alpha, a, b, beta, c, c_off, rsc, csc);
    } else {
        gemm_blocked(m, k, n, alpha, a, b, beta, c, c_off, rsc, csc);
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_blocked(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: Mat<'_>,
    b: Mat<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    // SAFETY: every address touched is within the slices, checked by `gemm`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}
