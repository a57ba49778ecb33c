use crate::tensor::Element;

/// Squash nonlinearity: `(‖s‖² / (1 + ‖s‖²)) · s / ‖s‖`, with `squash(0) = 0`.
///
/// The result points along `s` and has length strictly below one.
pub fn squash<T: Element>(s: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); s.len()];
    squash_into(s, &mut out);
    out
}

pub(crate) fn squash_into<T: Element>(s: &[T], out: &mut [T]) {
    let sq = s.iter().fold(T::zero(), |acc, &x| acc + x * x);
    if sq == T::zero() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let norm = sq.sqrt();
    let scale = sq / (T::one() + sq) / norm;
    for (o, &x) in out.iter_mut().zip(s) {
        *o = x * scale;
    }
}

/// Vector-Jacobian product of [`squash`] at `s`.
///
/// With `n = ‖s‖` the Jacobian is `g(n)·I + (g'(n)/n)·s sᵀ` where
/// `g(n) = n / (1 + n²)`. At `s = 0` the Jacobian vanishes.
pub fn squash_backward<T: Element>(s: &[T], upstream: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); s.len()];
    squash_backward_into(s, upstream, &mut out);
    out
}

pub(crate) fn squash_backward_into<T: Element>(s: &[T], upstream: &[T], out: &mut [T]) {
    let sq = s.iter().fold(T::zero(), |acc, &x| acc + x * x);
    if sq == T::zero() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let one = T::one();
    let norm = sq.sqrt();
    let denom = one + sq;
    let diag = norm / denom;
    let radial = (one - sq) / (denom * denom * norm);
    let proj = s.iter().zip(upstream).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    for ((o, &x), &g) in out.iter_mut().zip(s).zip(upstream) {
        *o = diag * g + radial * proj * x;
    }
}
