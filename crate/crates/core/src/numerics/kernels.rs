//! Strided GEMM wrapper used by matmul, linear layers, and attention.

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    data: &'a [f64],
    offset: usize,
    rs: usize,
    cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rs: usize, cs: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rs,
            cs,
        }
    }

    pub fn at(data: &'a [f64], offset: usize, rs: usize, cs: usize) -> Self {
        MatRef {
            data,
            offset,
            rs,
            cs,
        }
    }

    /// View of the same storage with rows and columns swapped.
    pub fn t(self) -> Self {
        MatRef {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

/// `c = alpha * a * b + beta * c` where `a` is m×k, `b` is k×n and `c` is a
/// contiguous row-major m×n buffer.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
) {
    gemm_strided(m, k, n, alpha, a, b, beta, c, 0, n, 1);
}

/// As [`gemm`] but with an explicitly strided output.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    c_offset: usize,
    c_rs: usize,
    c_cs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c_offset + i * c_rs + j * c_cs;
                c[idx] *= beta;
            }
        }
        return;
    }
    // Bounds: the furthest element each operand touches must be in range.
    let last_a = a.offset + (m - 1) * a.rs + (k - 1) * a.cs;
    let last_b = b.offset + (k - 1) * b.rs + (n - 1) * b.cs;
    let last_c = c_offset + (m - 1) * c_rs + (n - 1) * c_cs;
    assert!(last_a < a.data.len(), "gemm: lhs view out of bounds");
    assert!(last_b < b.data.len(), "gemm: rhs view out of bounds");
    assert!(last_c < c.len(), "gemm: output view out of bounds");
    // SAFETY: all strided accesses were bounds-checked above and the output
    // does not alias the inputs (it is a distinct &mut borrow).
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
            c.as_mut_ptr().add(c_offset),
            c_rs as isize,
            c_cs as isize,
        );
    }
}
