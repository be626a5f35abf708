/// Largest linear offset touched by a strided `[rows, cols]` view.
fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not used");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

#[allow(clippy::too_many_arguments)]
pub(super) fn check_bounds(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    rsa: isize,
    csa: isize,
    b_len: usize,
    rsb: isize,
    csb: isize,
    c_len: usize,
) {
    assert!(extent(m, k, rsa, csa) <= a_len, "gemm: lhs out of bounds");
    assert!(extent(k, n, rsb, csb) <= b_len, "gemm: rhs out of bounds");
    assert!(m * n <= c_len, "gemm: output out of bounds");
}

/// Strides of a matrix stored row-major as `[rows, cols]`, viewed either
/// directly or transposed.
pub(super) fn strides(stored_cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, stored_cols as isize)
    } else {
        (stored_cols as isize, 1)
    }
}
