//! Vote computation and dynamic routing by agreement between the primary
//! capsules and the class capsules.

use super::squash::{squash_backward_into, squash_into};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-pair predictions `û[i, j] = W[i, j] · u[i]`.
///
/// `u` is `[N, Din]` (or `[J, N, Din]` for a batch), `weights` is
/// `[N, M, Dout, Din]`; the result is `[N, M, Dout]` (or `[J, N, M, Dout]`).
pub fn votes<T: Element>(u: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, n, din) = vote_input_dims(u)?;
    let (m, dout) = check_weights(weights, n, din)?;
    let mut out = vec![T::zero(); batch * n * m * dout];
    let w = weights.data();
    for b in 0..batch {
        for i in 0..n {
            let ui = &u.data()[(b * n + i) * din..(b * n + i + 1) * din];
            for j in 0..m {
                let wij = &w[(i * m + j) * dout * din..(i * m + j + 1) * dout * din];
                let dst = &mut out[((b * n + i) * m + j) * dout..((b * n + i) * m + j + 1) * dout];
                for (o, row) in dst.iter_mut().zip(wij.chunks_exact(din)) {
                    *o = row.iter().zip(ui).fold(T::zero(), |acc, (&a, &x)| acc + a * x);
                }
            }
        }
    }
    let mut shape = u.shape()[..u.rank() - 1].to_vec();
    shape.extend([m, dout]);
    Tensor::new(shape, out)?.checked("votes")
}

/// Gradients of [`votes`] with respect to `u` and the transform weights.
pub fn votes_backward<T: Element>(
    upstream: &Tensor<T>,
    u: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, n, din) = vote_input_dims(u)?;
    let (m, dout) = check_weights(weights, n, din)?;
    if upstream.len() != batch * n * m * dout {
        return Err(Error::shape(
            "votes_backward",
            format!("upstream {:?} for {batch}x{n}x{m}x{dout} votes", upstream.shape()),
        ));
    }
    let mut grad_u = Tensor::zeros(u.shape());
    let mut grad_w = Tensor::zeros(weights.shape());
    let w = weights.data();
    let g = upstream.data();
    for b in 0..batch {
        for i in 0..n {
            let ui = &u.data()[(b * n + i) * din..(b * n + i + 1) * din];
            let gu = &mut grad_u.data_mut()[(b * n + i) * din..(b * n + i + 1) * din];
            for j in 0..m {
                let off = (i * m + j) * dout * din;
                let gij = &g[((b * n + i) * m + j) * dout..((b * n + i) * m + j + 1) * dout];
                for (r, &gr) in gij.iter().enumerate() {
                    let row = &w[off + r * din..off + (r + 1) * din];
                    for (x, &wv) in gu.iter_mut().zip(row) {
                        *x += gr * wv;
                    }
                }
            }
            for j in 0..m {
                let off = (i * m + j) * dout * din;
                let gij = &g[((b * n + i) * m + j) * dout..((b * n + i) * m + j + 1) * dout];
                let gw = &mut grad_w.data_mut()[off..off + dout * din];
                for (r, &gr) in gij.iter().enumerate() {
                    for (x, &uv) in gw[r * din..(r + 1) * din].iter_mut().zip(ui) {
                        *x += gr * uv;
                    }
                }
            }
        }
    }
    Ok((grad_u.checked("votes_backward")?, grad_w.checked("votes_backward")?))
}

fn vote_input_dims<T: Element>(u: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *u.shape() {
        [n, d] => Ok((1, n, d)),
        [b, n, d] => Ok((b, n, d)),
        _ => Err(Error::shape("votes", format!("capsule input must be rank 2 or 3, got {:?}", u.shape()))),
    }
}

fn check_weights<T: Element>(weights: &Tensor<T>, n: usize, din: usize) -> Result<(usize, usize)> {
    match *weights.shape() {
        [wn, m, dout, wd] if wn == n && wd == din => Ok((m, dout)),
        _ => Err(Error::shape(
            "votes",
            format!("weights {:?} do not fit {n} capsules of dim {din}", weights.shape()),
        )),
    }
}

/// Intermediate state of one routing run, one entry per iteration.
#[derive(Debug, Clone)]
pub struct RoutingTrace<T> {
    /// Coupling coefficients `c` used in each iteration, `[N, M]`.
    pub couplings: Vec<Tensor<T>>,
    /// Weighted vote sums `s` before squashing, `[M, D]`.
    pub sums: Vec<Tensor<T>>,
    /// Class capsule outputs `v`, `[M, D]`.
    pub outputs: Vec<Tensor<T>>,
}

impl<T: Element> RoutingTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("at least one routing iteration")
    }

    pub fn final_couplings(&self) -> &Tensor<T> {
        self.couplings.last().expect("at least one routing iteration")
    }
}

fn routing_dims<T: Element>(votes: &Tensor<T>, iterations: usize) -> Result<(usize, usize, usize)> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("routing needs at least one iteration".into()));
    }
    match *votes.shape() {
        [n, m, d] => Ok((n, m, d)),
        _ => Err(Error::shape("route", format!("votes must be [N, M, D], got {:?}", votes.shape()))),
    }
}

fn softmax_rows<T: Element>(logits: &[T], m: usize, out: &mut [T]) {
    for (b, c) in logits.chunks_exact(m).zip(out.chunks_exact_mut(m)) {
        let max = b.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
        let mut total = T::zero();
        for (ci, &bi) in c.iter_mut().zip(b) {
            *ci = (bi - max).exp();
            total += *ci;
        }
        for ci in c.iter_mut() {
            *ci = *ci / total;
        }
    }
}

/// Routing by agreement over a single sample's votes `[N, M, D]`.
///
/// Logits start at zero. Each iteration takes couplings as the softmax of
/// the logits over class capsules, forms `s_j = Σ_i c_ij û_ij`, squashes it
/// into `v_j` and, on all but the last iteration, adds the agreement
/// `û_ij · v_j` to the logits.
pub fn route_traced<T: Element>(votes: &Tensor<T>, iterations: usize) -> Result<RoutingTrace<T>> {
    let (n, m, d) = routing_dims(votes, iterations)?;
    let u = votes.data();
    let mut logits = vec![T::zero(); n * m];
    let mut trace = RoutingTrace {
        couplings: Vec::with_capacity(iterations),
        sums: Vec::with_capacity(iterations),
        outputs: Vec::with_capacity(iterations),
    };
    for it in 0..iterations {
        let mut c = vec![T::zero(); n * m];
        softmax_rows(&logits, m, &mut c);
        let mut s = vec![T::zero(); m * d];
        for i in 0..n {
            for j in 0..m {
                let cij = c[i * m + j];
                let uij = &u[(i * m + j) * d..(i * m + j + 1) * d];
                for (sv, &uv) in s[j * d..(j + 1) * d].iter_mut().zip(uij) {
                    *sv += cij * uv;
                }
            }
        }
        let mut v = vec![T::zero(); m * d];
        for (sj, vj) in s.chunks_exact(d).zip(v.chunks_exact_mut(d)) {
            squash_into(sj, vj);
        }
        if it + 1 < iterations {
            for i in 0..n {
                for j in 0..m {
                    let uij = &u[(i * m + j) * d..(i * m + j + 1) * d];
                    let agreement = uij
                        .iter()
                        .zip(&v[j * d..(j + 1) * d])
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    logits[i * m + j] += agreement;
                }
            }
        }
        trace.couplings.push(Tensor::new([n, m], c)?.checked("route")?);
        trace.sums.push(Tensor::new([m, d], s)?);
        trace.outputs.push(Tensor::new([m, d], v)?.checked("route")?);
    }
    Ok(trace)
}

/// Final class capsule outputs `[M, D]` and couplings `[N, M]`.
pub fn route<T: Element>(votes: &Tensor<T>, iterations: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut trace = route_traced(votes, iterations)?;
    let v = trace.outputs.pop().expect("non-empty trace");
    let c = trace.couplings.pop().expect("non-empty trace");
    Ok((v, c))
}

/// Gradient with respect to the votes of a traced routing run, treating the
/// whole unrolled procedure (couplings included) as differentiable.
pub fn route_backward<T: Element>(votes: &Tensor<T>, trace: &RoutingTrace<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    let iterations = trace.outputs.len();
    let (n, m, d) = routing_dims(votes, iterations)?;
    grad_output.expect_shape(&[m, d], "route_backward")?;
    let u = votes.data();
    let mut grad_u = vec![T::zero(); n * m * d];
    // Gradient flowing into the logits produced by the iteration being unwound.
    let mut grad_logits: Option<Vec<T>> = None;

    for it in (0..iterations).rev() {
        let c = trace.couplings[it].data();
        let s = trace.sums[it].data();
        let v = trace.outputs[it].data();

        let mut grad_v = if it + 1 == iterations {
            grad_output.data().to_vec()
        } else {
            vec![T::zero(); m * d]
        };
        if let Some(gb) = &grad_logits {
            // b_next = b + û·v
            for i in 0..n {
                for j in 0..m {
                    let g = gb[i * m + j];
                    let off = (i * m + j) * d;
                    for k in 0..d {
                        grad_u[off + k] += g * v[j * d + k];
                        grad_v[j * d + k] += g * u[off + k];
                    }
                }
            }
        }

        let mut grad_s = vec![T::zero(); m * d];
        for j in 0..m {
            squash_backward_into(&s[j * d..(j + 1) * d], &grad_v[j * d..(j + 1) * d], &mut grad_s[j * d..(j + 1) * d]);
        }

        let mut grad_c = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                let off = (i * m + j) * d;
                let cij = c[i * m + j];
                let mut acc = T::zero();
                for k in 0..d {
                    grad_u[off + k] += cij * grad_s[j * d + k];
                    acc += u[off + k] * grad_s[j * d + k];
                }
                grad_c[i * m + j] = acc;
            }
        }

        // Logits feeding this iteration are the previous logits plus nothing
        // else, so the incoming logit gradient passes straight through.
        let mut gb_prev = grad_logits.take().unwrap_or_else(|| vec![T::zero(); n * m]);
        for i in 0..n {
            let ci = &c[i * m..(i + 1) * m];
            let gi = &grad_c[i * m..(i + 1) * m];
            let dot = ci.iter().zip(gi).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            for j in 0..m {
                gb_prev[i * m + j] += ci[j] * (gi[j] - dot);
            }
        }
        grad_logits = Some(gb_prev);
    }
    Tensor::new([n, m, d], grad_u)?.checked("route_backward")
}
