//! Structural similarity with an 11x11 Gaussian window (σ = 1.5), computed
//! per channel with zero padding so the map has the image's size, plus its
//! analytic gradient with respect to the first image.

use crate::error::{Error, Result};
use crate::par;
use crate::scene::Image;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

pub fn window_weights() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut w: [f64; WINDOW] = std::array::from_fn(|i| {
        let d = i as f64 - half;
        (-d * d / (2.0 * SIGMA * SIGMA)).exp()
    });
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Separable zero-padded convolution of a single `w x h` plane.
fn blur(plane: &[f64], w: usize, h: usize, kernel: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kw) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kw * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kw) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kw * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(3).copied().collect()
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    Ok(())
}

struct ChannelStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn stats(x: &[f64], y: &[f64], w: usize, h: usize, kernel: &[f64; WINDOW]) -> ChannelStats {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    ChannelStats {
        mu_x: blur(x, w, h, kernel),
        mu_y: blur(y, w, h, kernel),
        exx: blur(&xx, w, h, kernel),
        eyy: blur(&yy, w, h, kernel),
        exy: blur(&xy, w, h, kernel),
    }
}

#[inline]
fn ssim_terms(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64) -> (f64, f64, f64, f64) {
    let a1 = 2.0 * mx * my + C1;
    let a2 = 2.0 * (exy - mx * my) + C2;
    let b1 = mx * mx + my * my + C1;
    let b2 = (exx - mx * mx) + (eyy - my * my) + C2;
    (a1, a2, b1, b2)
}

/// Mean SSIM over all pixels and channels. `x` is the test image, `y` the reference.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    check_dims(x, y)?;
    ssim_parallel(x, y, true)
}

pub(crate) fn ssim_parallel(x: &Image, y: &Image, parallel: bool) -> Result<f64> {
    check_dims(x, y)?;
    let (w, h) = x.dims();
    if w * h == 0 {
        return Ok(1.0);
    }
    let kernel = window_weights();
    let sums = par::map_indexed(3, parallel, |ch| {
        let s = stats(&channel(x, ch), &channel(y, ch), w, h, &kernel);
        (0..w * h)
            .map(|i| {
                let (a1, a2, b1, b2) =
                    ssim_terms(s.mu_x[i], s.mu_y[i], s.exx[i], s.eyy[i], s.exy[i]);
                a1 * a2 / (b1 * b2)
            })
            .sum::<f64>()
    });
    Ok(sums.iter().sum::<f64>() / (3 * w * h) as f64)
}

/// Mean SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &Image, y: &Image, parallel: bool) -> Result<(f64, Image)> {
    check_dims(x, y)?;
    let (w, h) = x.dims();
    let n = (3 * w * h) as f64;
    let kernel = window_weights();
    let per_channel = par::map_indexed(3, parallel, |ch| {
        let xc = channel(x, ch);
        let yc = channel(y, ch);
        let s = stats(&xc, &yc, w, h, &kernel);
        let mut total = 0.0;
        let mut d_mu = vec![0.0; w * h];
        let mut d_exx = vec![0.0; w * h];
        let mut d_exy = vec![0.0; w * h];
        for i in 0..w * h {
            let (mx, my) = (s.mu_x[i], s.mu_y[i]);
            let (a1, a2, b1, b2) = ssim_terms(mx, my, s.exx[i], s.eyy[i], s.exy[i]);
            let val = a1 * a2 / (b1 * b2);
            total += val;
            // Partials of the map value w.r.t. the blurred statistics of x.
            d_mu[i] =
                (2.0 * my * a2 - 2.0 * my * a1) / (b1 * b2) - val * (2.0 * mx / b1 - 2.0 * mx / b2);
            d_exx[i] = -val / b2;
            d_exy[i] = 2.0 * a1 / (b1 * b2);
        }
        // The zero-padded symmetric blur is self-adjoint.
        let g_mu = blur(&d_mu, w, h, &kernel);
        let g_exx = blur(&d_exx, w, h, &kernel);
        let g_exy = blur(&d_exy, w, h, &kernel);
        let grad: Vec<f64> = (0..w * h)
            .map(|i| (g_mu[i] + 2.0 * xc[i] * g_exx[i] + yc[i] * g_exy[i]) / n)
            .collect();
        (total, grad)
    });
    let mut out = Image::new(w, h);
    let mut total = 0.0;
    for (ch, (t, g)) in per_channel.into_iter().enumerate() {
        total += t;
        for (i, v) in g.into_iter().enumerate() {
            out.data[i * 3 + ch] = v;
        }
    }
    Ok((total / n, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| rng.random::<f64>()).collect(),
        }
    }

    /// Direct per-window evaluation: for each pixel and channel, gather the
    /// 11x11 neighbourhood with zero padding and compute weighted moments.
    fn naive_ssim(x: &Image, y: &Image) -> f64 {
        let (w, h) = x.dims();
        let half = (WINDOW / 2) as f64;
        let g1: Vec<f64> = (0..WINDOW)
            .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SIGMA * SIGMA)).exp())
            .collect();
        let norm: f64 = g1.iter().sum();
        let mut total = 0.0;
        for ch in 0..3 {
            for py in 0..h {
                for px in 0..w {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for ky in 0..WINDOW {
                        for kx in 0..WINDOW {
                            let qx = px as isize + kx as isize - 5;
                            let qy = py as isize + ky as isize - 5;
                            let wgt = g1[kx] * g1[ky] / (norm * norm);
                            let (a, b) =
                                if qx >= 0 && qy >= 0 && (qx as usize) < w && (qy as usize) < h {
                                    (
                                        x.pixel(qx as usize, qy as usize)[ch],
                                        y.pixel(qx as usize, qy as usize)[ch],
                                    )
                                } else {
                                    (0.0, 0.0)
                                };
                            mx += wgt * a;
                            my += wgt * b;
                            sxx += wgt * a * a;
                            syy += wgt * b * b;
                            sxy += wgt * a * b;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cxy = sxy - mx * my;
                    total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2))
                        / ((mx * mx + my * my + C1) * (vx + vy + C2));
                }
            }
        }
        total / (3 * w * h) as f64
    }

    #[test]
    fn identical_images() {
        let a = random_image(16, 12, 1);
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn matches_sliding_window_oracle() {
        for seed in 0..3 {
            let a = random_image(19, 14, seed);
            let b = random_image(19, 14, seed + 100);
            assert_abs_diff_eq!(ssim(&a, &b).unwrap(), naive_ssim(&a, &b), epsilon = 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = random_image(13, 9, 5);
        let b = random_image(13, 9, 6);
        let (_, g) = ssim_with_grad(&a, &b, false).unwrap();
        let h = 1e-6;
        for i in [0, 7, 50, 200, 350] {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(g.data[i], fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn dimension_mismatch() {
        assert!(ssim(&Image::new(4, 4), &Image::new(4, 5)).is_err());
    }
}
