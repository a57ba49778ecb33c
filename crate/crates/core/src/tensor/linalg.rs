use super::Element;

/// Row-major `C = op(A) · op(B)` (or `C += ...` when `accumulate`).
///
/// `A` is `m × k` (stored `k × m` when `trans_a`), `B` is `k × n` (stored
/// `n × k` when `trans_b`) and `C` is `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Element>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "lhs too short for {m}x{k}");
    assert!(b.len() >= k * n, "rhs too short for {k}x{n}");
    assert!(c.len() >= m * n, "output too short for {m}x{n}");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every access made with these strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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
