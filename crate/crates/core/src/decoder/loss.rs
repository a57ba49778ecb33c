//! Reconstruction losses, their gradients, and image-quality metrics.
//!
//! Every function accepts single images (`[H, W]` or `[H, W, 1]`) or batches
//! (`[J, H, W, 1]`). Losses are means over all pixels of all images, which for
//! equally sized images is also the mean of the per-image losses.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Clamp applied to reconstructions before taking logarithms in BCE.
pub const BCE_EPSILON: f64 = 1e-7;

/// Splits an image tensor into `(planes, height, width)`.
fn planes<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] | [h, w, 1] => Ok((1, h, w)),
        [j, h, w, 1] => Ok((j, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected [H, W], [H, W, 1] or [J, H, W, 1], got {:?}", t.shape()),
        )),
    }
}

fn check_pair<T: Element>(x: &Tensor<T>, y: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    x.expect_same_shape(y, op)?;
    let dims = planes(x, op)?;
    if x.is_empty() {
        return Err(Error::shape(op, "empty image"));
    }
    Ok(dims)
}

fn pixel_pairs<'a, T: Element>(x: &'a Tensor<T>, y: &'a Tensor<T>) -> impl Iterator<Item = (f64, f64)> + 'a {
    x.data().iter().zip(y.data()).map(|(a, b)| (a.as_f64(), b.as_f64()))
}

fn from_f64<T: Element>(shape: &[usize], data: Vec<f64>) -> Result<Tensor<T>> {
    Tensor::new(shape.to_vec(), data.into_iter().map(T::from_f64_lossy).collect())
}

pub fn mse<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_pair(x, y, "mse")?;
    let sum = pixel_pairs(x, y).fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b));
    Ok(sum / x.len() as f64)
}

pub fn mse_gradient<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(x, y, "mse")?;
    let n = x.len() as f64;
    from_f64(x.shape(), pixel_pairs(x, y).map(|(a, b)| 2.0 * (a - b) / n).collect())
}

pub fn l1<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_pair(x, y, "l1")?;
    let sum = pixel_pairs(x, y).fold(0.0, |acc, (a, b)| acc + (a - b).abs());
    Ok(sum / x.len() as f64)
}

/// Subgradient of [`l1`], zero where `x = y`.
pub fn l1_gradient<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(x, y, "l1")?;
    let n = x.len() as f64;
    let sign = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
    from_f64(x.shape(), pixel_pairs(x, y).map(|(a, b)| sign(a - b) / n).collect())
}

/// Binary cross-entropy `−mean(y·ln x + (1−y)·ln(1−x))` with `x` clamped to
/// `[ε, 1−ε]`.
pub fn bce<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_pair(x, y, "bce")?;
    let sum = pixel_pairs(x, y).fold(0.0, |acc, (a, b)| {
        let a = a.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        acc - (b * a.ln() + (1.0 - b) * (1.0 - a).ln())
    });
    Ok(sum / x.len() as f64)
}

/// Gradient of [`bce`]; zero wherever the clamp is active.
pub fn bce_gradient<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(x, y, "bce")?;
    let n = x.len() as f64;
    from_f64(
        x.shape(),
        pixel_pairs(x, y)
            .map(|(a, b)| {
                if a <= BCE_EPSILON || a >= 1.0 - BCE_EPSILON {
                    0.0
                } else {
                    (-(b / a) + (1.0 - b) / (1.0 - a)) / n
                }
            })
            .collect(),
    )
}

/// Constants of the structural similarity index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of pixel values.
    pub range: f64,
    /// Side of the square Gaussian window; must be odd.
    pub window: usize,
    pub sigma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
            window: 11,
            sigma: 1.5,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }

    fn taps(&self) -> Result<Vec<f64>> {
        if self.window.is_multiple_of(2) || self.sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "SSIM window must be odd with positive sigma, got {} and {}",
                self.window, self.sigma
            )));
        }
        let r = (self.window / 2) as f64;
        Ok((0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect())
    }
}

/// Normalized Gaussian window filter on one `h × w` plane. At the border the
/// weights are renormalized over the part of the window inside the image.
/// The 2-D window is separable and so is its renormalization, since the
/// valid support is always a rectangle.
struct Window {
    taps: Vec<f64>,
}

impl Window {
    fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    fn norm(&self, i: usize, n: usize) -> f64 {
        let r = self.radius();
        (0..self.taps.len())
            .filter(|&k| i + k >= r && i + k - r < n)
            .fold(0.0, |acc, k| acc + self.taps[k])
    }

    /// One axis of the filter (`transpose` applies its adjoint) over `count`
    /// lines of length `n`, with elements `stride` apart and lines `step` apart.
    #[allow(clippy::too_many_arguments)]
    fn axis(&self, src: &[f64], dst: &mut [f64], n: usize, stride: usize, count: usize, step: usize, transpose: bool) {
        let r = self.radius();
        let norms: Vec<f64> = (0..n).map(|i| self.norm(i, n)).collect();
        dst.iter_mut().for_each(|d| *d = 0.0);
        for line in 0..count {
            let base = line * step;
            for i in 0..n {
                for (k, &t) in self.taps.iter().enumerate() {
                    if i + k < r || i + k - r >= n {
                        continue;
                    }
                    let q = i + k - r;
                    let wgt = t / norms[i];
                    if transpose {
                        dst[base + q * stride] += wgt * src[base + i * stride];
                    } else {
                        dst[base + i * stride] += wgt * src[base + q * stride];
                    }
                }
            }
        }
    }

    fn apply(&self, plane: &[f64], h: usize, w: usize, transpose: bool) -> Vec<f64> {
        let mut tmp = vec![0.0; h * w];
        let mut out = vec![0.0; h * w];
        if transpose {
            self.axis(plane, &mut tmp, h, w, w, 1, true);
            self.axis(&tmp, &mut out, w, 1, h, w, true);
        } else {
            self.axis(plane, &mut tmp, w, 1, h, w, false);
            self.axis(&tmp, &mut out, h, w, w, 1, false);
        }
        out
    }
}

struct SsimStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    map: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

fn ssim_plane(win: &Window, x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams) -> SsimStats {
    let sq = |v: &[f64]| v.iter().map(|a| a * a).collect::<Vec<_>>();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = win.apply(x, h, w, false);
    let mu_y = win.apply(y, h, w, false);
    let ex2 = win.apply(&sq(x), h, w, false);
    let ey2 = win.apply(&sq(y), h, w, false);
    let exy = win.apply(&xy, h, w, false);
    let (c1, c2) = (p.c1(), p.c2());
    let n = h * w;
    let mut s = SsimStats {
        mu_x,
        mu_y,
        map: vec![0.0; n],
        a1: vec![0.0; n],
        a2: vec![0.0; n],
        b1: vec![0.0; n],
        b2: vec![0.0; n],
    };
    for i in 0..n {
        let (mx, my) = (s.mu_x[i], s.mu_y[i]);
        s.a1[i] = 2.0 * mx * my + c1;
        s.a2[i] = 2.0 * (exy[i] - mx * my) + c2;
        s.b1[i] = mx * mx + my * my + c1;
        s.b2[i] = (ex2[i] - mx * mx) + (ey2[i] - my * my) + c2;
        s.map[i] = (s.a1[i] * s.a2[i]) / (s.b1[i] * s.b2[i]);
    }
    s
}

fn as_f64_vec<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

/// Mean SSIM and the per-pixel SSIM map.
#[derive(Debug, Clone)]
pub struct Ssim {
    pub mean: f64,
    pub map: Tensor<f64>,
}

/// Structural similarity with a Gaussian window, computed per pixel.
pub fn ssim<T: Element>(x: &Tensor<T>, y: &Tensor<T>, p: &SsimParams) -> Result<Ssim> {
    let (count, h, w) = check_pair(x, y, "ssim")?;
    let win = Window { taps: p.taps()? };
    let (xs, ys) = (as_f64_vec(x), as_f64_vec(y));
    let mut map = Vec::with_capacity(xs.len());
    for j in 0..count {
        let r = j * h * w..(j + 1) * h * w;
        map.extend(ssim_plane(&win, &xs[r.clone()], &ys[r], h, w, p).map);
    }
    let mean = map.iter().sum::<f64>() / map.len() as f64;
    Ok(Ssim {
        mean,
        map: Tensor::new(x.shape().to_vec(), map)?,
    })
}

/// Structural dissimilarity `mean(1 − SSIM(p))`.
pub fn dssim<T: Element>(x: &Tensor<T>, y: &Tensor<T>, p: &SsimParams) -> Result<f64> {
    let s = ssim(x, y, p)?;
    Ok(s.map.data().iter().map(|v| 1.0 - v).sum::<f64>() / s.map.len() as f64)
}

/// Gradient of [`dssim`] with respect to `x`.
pub fn dssim_gradient<T: Element>(x: &Tensor<T>, y: &Tensor<T>, p: &SsimParams) -> Result<Tensor<T>> {
    let (count, h, w) = check_pair(x, y, "dssim")?;
    let win = Window { taps: p.taps()? };
    let (xs, ys) = (as_f64_vec(x), as_f64_vec(y));
    let scale = -1.0 / xs.len() as f64;
    let mut grad = Vec::with_capacity(xs.len());
    for j in 0..count {
        let r = j * h * w..(j + 1) * h * w;
        let (xp, yp) = (&xs[r.clone()], &ys[r]);
        let s = ssim_plane(&win, xp, yp, h, w, p);
        let n = h * w;
        let (mut g_mu, mut g_ex2, mut g_exy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let (mx, my, v) = (s.mu_x[i], s.mu_y[i], s.map[i] * scale);
            g_mu[i] = v * (2.0 * my / s.a1[i] - 2.0 * my / s.a2[i] - 2.0 * mx / s.b1[i] + 2.0 * mx / s.b2[i]);
            g_ex2[i] = -v / s.b2[i];
            g_exy[i] = 2.0 * v / s.a2[i];
        }
        let g_mu = win.apply(&g_mu, h, w, true);
        let g_ex2 = win.apply(&g_ex2, h, w, true);
        let g_exy = win.apply(&g_exy, h, w, true);
        for i in 0..n {
            grad.push(g_mu[i] + 2.0 * xp[i] * g_ex2[i] + yp[i] * g_exy[i]);
        }
    }
    from_f64(x.shape(), grad)
}

/// PSNR in dB for a given mean squared error and unit peak value; `+∞` when
/// the error is zero.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Peak signal-to-noise ratio of `x` against `y` for images in `[0, 1]`;
/// `+∞` for identical images.
pub fn psnr<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

/// Per-pixel choice between two reconstructions: whichever is closer to the
/// target, `a` on ties.
pub fn combine_two<T: Element>(a: &Tensor<T>, b: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_same_shape(b, "combine_two")?;
    a.expect_same_shape(target, "combine_two")?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(target.data())
        .map(|((&pa, &pb), &t)| if (pa - t).abs() <= (pb - t).abs() { pa } else { pb })
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// A reconstruction loss a decoder can be trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReconLossKind {
    Mse,
    L1,
    Dssim,
    Bce,
}

impl ReconLossKind {
    pub const ALL: [ReconLossKind; 4] = [Self::Mse, Self::L1, Self::Dssim, Self::Bce];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mse => "mse",
            Self::L1 => "l1",
            Self::Dssim => "dssim",
            Self::Bce => "bce",
        }
    }

    /// Loss of reconstruction `x` against target `y`.
    pub fn value<T: Element>(self, x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
        match self {
            Self::Mse => mse(x, y),
            Self::L1 => l1(x, y),
            Self::Dssim => dssim(x, y, &SsimParams::default()),
            Self::Bce => bce(x, y),
        }
    }

    /// Gradient of [`ReconLossKind::value`] with respect to `x`.
    pub fn gradient<T: Element>(self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Self::Mse => mse_gradient(x, y),
            Self::L1 => l1_gradient(x, y),
            Self::Dssim => dssim_gradient(x, y, &SsimParams::default()),
            Self::Bce => bce_gradient(x, y),
        }
    }
}

impl fmt::Display for ReconLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReconLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Self::Mse),
            "l1" | "mae" => Ok(Self::L1),
            "dssim" | "ssim" => Ok(Self::Dssim),
            "bce" => Ok(Self::Bce),
            other => Err(Error::Config(format!(
                "unknown reconstruction loss `{other}` (expected mse, l1, dssim or bce)"
            ))),
        }
    }
}
