use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Unsharp-mask settings. `radius` is the Gaussian σ in pixels and
/// `threshold` is on the 0–255 scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnsharpParams {
    pub radius: f64,
    pub threshold: f64,
    pub repeats: usize,
    pub amount: f64,
}

impl Default for UnsharpParams {
    fn default() -> Self {
        Self {
            radius: 1.0,
            threshold: 1.0,
            repeats: 10,
            amount: 1.0,
        }
    }
}

impl UnsharpParams {
    fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::InvalidArgument("unsharp repeats must be at least 1".into()));
        }
        if !(self.radius >= 1.0) || !(self.threshold >= 0.0) || !(self.amount > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "unsharp needs radius >= 1, threshold >= 0 and amount > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Normalized Gaussian taps out to `ceil(3σ)`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur with edge pixels replicated outward.
pub fn gaussian_blur(image: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as i64;
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = taps
                .iter()
                .enumerate()
                .fold(0.0, |acc, (k, &t)| acc + t * image[y * w + clamp(x as i64 + k as i64 - r, w)]);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .fold(0.0, |acc, (k, &t)| acc + t * rows[clamp(y as i64 + k as i64 - r, h) * w + x]);
        }
    }
    out
}

/// Repeated unsharp masking of one `h × w` image with values in `[0, 1]`.
///
/// Each pass adds `amount·(image − blur)` at pixels where that difference
/// exceeds the threshold, clamping to `[0, 1]`.
pub fn unsharp_mask(image: &[f64], h: usize, w: usize, p: &UnsharpParams) -> Result<Vec<f64>> {
    p.validate()?;
    if image.len() != h * w {
        return Err(Error::shape("unsharp_mask", format!("{} pixels for {h}x{w}", image.len())));
    }
    let threshold = p.threshold / 255.0;
    let mut img = image.to_vec();
    for _ in 0..p.repeats {
        let blur = gaussian_blur(&img, h, w, p.radius);
        for (v, b) in img.iter_mut().zip(blur) {
            let diff = *v - b;
            if diff.abs() > threshold {
                *v = (*v + p.amount * diff).clamp(0.0, 1.0);
            }
        }
    }
    Ok(img)
}

/// [`unsharp_mask`] applied to every image of a `[J, H, W, 1]` batch.
pub fn unsharp_batch<T: Element>(images: &Tensor<T>, p: &UnsharpParams) -> Result<Tensor<T>> {
    let (h, w) = match *images.shape() {
        [_, h, w, 1] => (h, w),
        _ => return Err(Error::shape("unsharp_batch", format!("expected [J, H, W, 1], got {:?}", images.shape()))),
    };
    let mut out = Vec::with_capacity(images.len());
    for img in images.data().chunks_exact(h * w) {
        let img: Vec<f64> = img.iter().map(|v| v.as_f64()).collect();
        out.extend(unsharp_mask(&img, h, w, p)?.into_iter().map(T::from_f64_lossy));
    }
    Tensor::new(images.shape().to_vec(), out)
}
