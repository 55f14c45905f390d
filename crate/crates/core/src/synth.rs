//! Seeded synthetic textures and stereo scenes with known disparity.

use rand::Rng;

use crate::imgio::{DisparityMap, ImageBuffer, StereoSample};
use crate::rng::substream;

pub(crate) fn value_noise(h: usize, w: usize, cell: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn gray_texture(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let octaves = [(1usize, 0.45), (2, 0.3), (4, 0.25)];
    let mut acc = vec![0.0; h * w];
    for (cell, weight) in octaves {
        for (a, v) in acc.iter_mut().zip(value_noise(h, w, cell, rng)) {
            *a += weight * v;
        }
    }
    // stretch to use most of the range
    let (lo, hi) = acc
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    let span = (hi - lo).max(1e-9);
    acc.iter().map(|v| 0.05 + 0.9 * (v - lo) / span).collect()
}

/// Multi-octave value-noise texture in `[0.05, 0.95]`.
pub fn texture(h: usize, w: usize, channels: usize, seed: u64) -> ImageBuffer {
    let mut rng = substream(seed, &["texture"]);
    let base = gray_texture(h, w, &mut rng);
    let mut data = vec![0f32; h * w * channels];
    if channels == 1 {
        data.iter_mut().zip(&base).for_each(|(d, v)| *d = *v as f32);
    } else {
        let tints: Vec<Vec<f64>> = (0..channels)
            .map(|_| gray_texture(h, w, &mut rng))
            .collect();
        for p in 0..h * w {
            for c in 0..channels {
                data[p * channels + c] = (0.6 * base[p] + 0.4 * tints[c][p]) as f32;
            }
        }
    }
    ImageBuffer::new(h, w, channels, data).expect("texture in range")
}

/// Fronto-parallel scene: `right(i, j) = left(i, j + d)`, ground truth `d`
/// everywhere. Pixels with `j < d` see content the right camera never
/// observed but are still marked valid.
pub fn shifted_pair(
    id: &str,
    h: usize,
    w: usize,
    channels: usize,
    d: usize,
    seed: u64,
) -> StereoSample {
    let wide = texture(h, w + d, channels, seed);
    let crop = |x0: usize| {
        let mut data = Vec::with_capacity(h * w * channels);
        for y in 0..h {
            for x in x0..x0 + w {
                for c in 0..channels {
                    data.push(wide.get(y, x, c));
                }
            }
        }
        ImageBuffer::new(h, w, channels, data).expect("crop in range")
    };
    let gt = DisparityMap::filled(h, w, d as f32).expect("finite");
    StereoSample::new(id, crop(0), crop(d), gt).expect("matching shapes")
}

/// `n` shifted pairs with disparities drawn from `1..=max_shift`.
pub fn shifted_suite(
    name: &str,
    n: usize,
    h: usize,
    w: usize,
    channels: usize,
    max_shift: usize,
    seed: u64,
) -> Vec<StereoSample> {
    let mut rng = substream(seed, &["suite", name]);
    (0..n)
        .map(|i| {
            let d = rng.random_range(1..=max_shift.max(1));
            let s = rng.random::<u64>();
            shifted_pair(&format!("{name}/{i}"), h, w, channels, d, s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textures_are_seeded() {
        assert_eq!(texture(8, 9, 3, 1), texture(8, 9, 3, 1));
        assert_ne!(texture(8, 9, 3, 1), texture(8, 9, 3, 2));
    }

    #[test]
    fn shifted_pair_geometry() {
        let s = shifted_pair("s", 6, 10, 1, 3, 4);
        for y in 0..6 {
            for x in 3..10 {
                assert_eq!(s.left.get(y, x, 0), s.right.get(y, x - 3, 0));
            }
        }
        assert!(s.gt.values().iter().all(|v| *v == 3.0));
    }
}
