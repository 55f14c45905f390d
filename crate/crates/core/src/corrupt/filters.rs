//! Planar image kernels shared by the corruption definitions. Planes are
//! row-major `f64` buffers; every spatial lookup clamps at the border.

use rand::Rng;

use crate::imgio::ImageBuffer;
use crate::synth::value_noise;

#[derive(Debug, Clone)]
pub struct Planes {
    pub h: usize,
    pub w: usize,
    pub ch: Vec<Vec<f64>>,
}

impl Planes {
    pub fn from_image(img: &ImageBuffer) -> Self {
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let mut ch = vec![vec![0.0; h * w]; c];
        for (p, px) in img.data().chunks_exact(c).enumerate() {
            for k in 0..c {
                ch[k][p] = px[k] as f64;
            }
        }
        Self { h, w, ch }
    }

    pub fn to_image(&self) -> ImageBuffer {
        let c = self.ch.len();
        let mut data = vec![0f32; self.h * self.w * c];
        for p in 0..self.h * self.w {
            for k in 0..c {
                data[p * c + k] = self.ch[k][p] as f32;
            }
        }
        ImageBuffer::from_clamped(self.h, self.w, c, data).expect("shape preserved")
    }

    pub fn map_planes(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        Self {
            h: self.h,
            w: self.w,
            ch: self.ch.iter().map(|p| f(p)).collect(),
        }
    }
}

#[inline]
fn at(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    plane[y * w + x]
}

pub fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (ty, tx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let top = at(plane, h, w, y0, x0) * (1.0 - tx) + at(plane, h, w, y0, x0 + 1) * tx;
    let bot = at(plane, h, w, y0 + 1, x0) * (1.0 - tx) + at(plane, h, w, y0 + 1, x0 + 1) * tx;
    top * (1.0 - ty) + bot * ty
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * at(plane, h, w, y as isize, x as isize + k as isize - r))
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * at(&tmp, h, w, y as isize + k as isize - r, x as isize))
                .sum();
        }
    }
    out
}

/// Square kernel of odd side, row-major, applied as correlation.
#[derive(Debug, Clone)]
pub struct Kernel {
    pub side: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    fn normalized(side: usize, weights: Vec<f64>) -> Self {
        let s: f64 = weights.iter().sum();
        Self {
            side,
            weights: weights.into_iter().map(|v| v / s).collect(),
        }
    }

    /// Disk of the given radius with 4x4 supersampled edge coverage.
    pub fn disk(radius: f64) -> Self {
        let r = radius.ceil() as isize;
        let side = (2 * r + 1) as usize;
        let mut wts = Vec::with_capacity(side * side);
        for y in -r..=r {
            for x in -r..=r {
                let mut hits = 0;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let py = y as f64 + (sy as f64 + 0.5) / 4.0 - 0.5;
                        let px = x as f64 + (sx as f64 + 0.5) / 4.0 - 0.5;
                        if py * py + px * px <= radius * radius {
                            hits += 1;
                        }
                    }
                }
                wts.push(hits as f64);
            }
        }
        Self::normalized(side, wts)
    }

    /// Centered line segment of half-length `radius` at `angle` radians,
    /// splatted bilinearly.
    pub fn line(radius: f64, angle: f64) -> Self {
        let r = radius.ceil() as isize + 1;
        let side = (2 * r + 1) as usize;
        let mut wts = vec![0.0; side * side];
        let steps = (radius * 8.0).ceil().max(1.0) as isize;
        for s in -steps..=steps {
            let t = radius * s as f64 / steps as f64;
            let (py, px) = (t * angle.sin() + r as f64, t * angle.cos() + r as f64);
            let (y0, x0) = (py.floor(), px.floor());
            let (ty, tx) = (py - y0, px - x0);
            for (dy, wy) in [(0usize, 1.0 - ty), (1, ty)] {
                for (dx, wx) in [(0usize, 1.0 - tx), (1, tx)] {
                    let (yy, xx) = (y0 as usize + dy, x0 as usize + dx);
                    if yy < side && xx < side {
                        wts[yy * side + xx] += wy * wx;
                    }
                }
            }
        }
        Self::normalized(side, wts)
    }

    pub fn apply(&self, plane: &[f64], h: usize, w: usize) -> Vec<f64> {
        let r = (self.side / 2) as isize;
        let taps: Vec<(isize, isize, f64)> = self
            .weights
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(k, v)| {
                (
                    (k / self.side) as isize - r,
                    (k % self.side) as isize - r,
                    *v,
                )
            })
            .collect();
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = taps
                    .iter()
                    .map(|(dy, dx, v)| v * at(plane, h, w, y as isize + dy, x as isize + dx))
                    .sum();
            }
        }
        out
    }
}

/// Resamples at `(y, x) -> center + (p - center) / zoom`.
pub fn zoom(plane: &[f64], h: usize, w: usize, factor: f64) -> Vec<f64> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = cy + (y as f64 - cy) / factor;
            let sx = cx + (x as f64 - cx) / factor;
            out[y * w + x] = bilinear(plane, h, w, sy, sx);
        }
    }
    out
}

/// Area-weighted resampling matrix from `n` to `m` samples (`m <= n`).
fn area_weights(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n as f64 / m as f64;
    (0..m)
        .map(|i| {
            let (lo, hi) = (i as f64 * ratio, (i + 1) as f64 * ratio);
            let mut row = Vec::new();
            let mut k = lo.floor() as usize;
            while (k as f64) < hi && k < n {
                let overlap = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                if overlap > 0.0 {
                    row.push((k, overlap / ratio));
                }
                k += 1;
            }
            row
        })
        .collect()
}

/// Box-filtered downscale to `scale` of the size, nearest-neighbour upscale.
pub fn pixelate(plane: &[f64], h: usize, w: usize, scale: f64) -> Vec<f64> {
    let dh = ((h as f64 * scale).round() as usize).clamp(1, h);
    let dw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let (ry, rx) = (area_weights(h, dh), area_weights(w, dw));
    let mut small = vec![0.0; dh * dw];
    for (i, wy) in ry.iter().enumerate() {
        for (j, wx) in rx.iter().enumerate() {
            let mut acc = 0.0;
            for (y, a) in wy {
                for (x, b) in wx {
                    acc += a * b * plane[y * w + x];
                }
            }
            small[i * dw + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let sy = (((y as f64 + 0.5) * dh as f64 / h as f64) as usize).min(dh - 1);
        for x in 0..w {
            let sx = (((x as f64 + 0.5) * dw as f64 / w as f64) as usize).min(dw - 1);
            out[y * w + x] = small[sy * dw + sx];
        }
    }
    out
}

/// Smooth random displacement field with maximum magnitude `alpha`.
pub fn displacement_field(
    h: usize,
    w: usize,
    alpha: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> (Vec<f64>, Vec<f64>) {
    let mut raw = || -> Vec<f64> {
        let v: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        gaussian_blur(&v, h, w, sigma)
    };
    let (dy, dx) = (raw(), raw());
    let peak = dy
        .iter()
        .zip(&dx)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .fold(0.0f64, f64::max);
    let s = if peak > 0.0 { alpha / peak } else { 0.0 };
    (
        dy.into_iter().map(|v| v * s).collect(),
        dx.into_iter().map(|v| v * s).collect(),
    )
}

pub fn warp(plane: &[f64], h: usize, w: usize, dy: &[f64], dx: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            out[p] = bilinear(plane, h, w, y as f64 + dy[p], x as f64 + dx[p]);
        }
    }
    out
}

/// Diamond-square plasma on a `2^k` grid covering `h x w`, scaled to `[0,1]`.
pub fn plasma(h: usize, w: usize, decay: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n = h.max(w).max(4).next_power_of_two();
    let stride = n + 1;
    let mut g = vec![0.0f64; stride * stride];
    let mut amp = 1.0;
    let mut step = n;
    while step > 1 {
        let half = step / 2;
        // diamond: square centers
        for y in (half..n).step_by(step) {
            for x in (half..n).step_by(step) {
                let avg = (g[(y - half) * stride + x - half]
                    + g[(y - half) * stride + x + half]
                    + g[(y + half) * stride + x - half]
                    + g[(y + half) * stride + x + half])
                    / 4.0;
                g[y * stride + x] = avg + amp * rng.random_range(-1.0..1.0);
            }
        }
        // square: edge midpoints
        for y in (0..=n).step_by(half) {
            let x0 = if (y / half) % 2 == 0 { half } else { 0 };
            for x in (x0..=n).step_by(step) {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                for (oy, ox) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let yy = y as isize + oy * half as isize;
                    let xx = x as isize + ox * half as isize;
                    if (0..=n as isize).contains(&yy) && (0..=n as isize).contains(&xx) {
                        sum += g[yy as usize * stride + xx as usize];
                        cnt += 1.0;
                    }
                }
                g[y * stride + x] = sum / cnt + amp * rng.random_range(-1.0..1.0);
            }
        }
        amp /= decay;
        step = half;
    }
    let mut out: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| g[y * stride + x])
        .collect();
    normalize(&mut out);
    out
}

pub fn normalize(v: &mut [f64]) {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(*x), hi.max(*x))
        });
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
    }
}

/// Ridged multi-octave noise: thin bright veins on a hazy base.
pub fn frost_texture(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut acc = vec![0.0; h * w];
    for (cell, weight) in [(2usize, 0.2), (4, 0.3), (8, 0.3), (16, 0.2)] {
        let n = value_noise(h, w, cell, rng);
        for (a, v) in acc.iter_mut().zip(n) {
            let ridge = 1.0 - (2.0 * v - 1.0).abs();
            *a += weight * ridge.powi(3);
        }
    }
    normalize(&mut acc);
    acc.iter().map(|v| 0.35 + 0.65 * v).collect()
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h / 6.0, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}
