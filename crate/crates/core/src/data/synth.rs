use std::f64::consts::PI;

use super::preprocess::SegSample;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Foreground fraction bounds of a synthetic mask.
pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Squared normalized radius of point `(x, y)`; ≤ 1 inside.
    pub fn radius2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v
    }

    fn random(side: f64, rng: &mut Rng) -> Self {
        let mut span = |lo: f64, hi: f64| lo + (hi - lo) * rng.uniform();
        Self {
            cx: span(0.15, 0.85) * side,
            cy: span(0.15, 0.85) * side,
            a: span(0.06, 0.24) * side,
            b: span(0.06, 0.24) * side,
            theta: span(0.0, PI),
        }
    }
}

/// Analytic union-of-ellipses indicator sampled at pixel centres.
pub fn ellipse_mask(ellipses: &[Ellipse], side: usize) -> Vec<f32> {
    let mut m = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            m.push(ellipses.iter().any(|e| e.radius2(px, py) <= 1.0) as u8 as f32);
        }
    }
    m
}

fn render(ellipses: &[Ellipse], side: usize, rng: &mut Rng) -> Vec<f32> {
    let base = [0.55 + 0.1 * rng.uniform(), 0.28 + 0.08 * rng.uniform(), 0.22 + 0.06 * rng.uniform()];
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let f = 2.0 * PI * (1.0 + 5.0 * rng.uniform()) / side as f64;
            let dir = PI * rng.uniform();
            (f * dir.cos(), f * dir.sin(), 2.0 * PI * rng.uniform())
        })
        .collect();
    let tint = [0.9 + 0.1 * rng.uniform(), 0.45 + 0.15 * rng.uniform(), 0.4 + 0.1 * rng.uniform()];
    let plane = side * side;
    let mut img = vec![0.0f32; 3 * plane];
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let texture: f64 = waves.iter().map(|(fx, fy, ph)| (fx * px + fy * py + ph).sin()).sum::<f64>() / 3.0;
            let inside = ellipses.iter().map(|e| e.radius2(px, py)).fold(f64::INFINITY, f64::min);
            for c in 0..3 {
                let bg = base[c] + 0.08 * texture;
                let v = if inside <= 1.0 {
                    // brighter toward the blob centre
                    tint[c] * (0.75 + 0.25 * (1.0 - inside))
                } else {
                    bg
                };
                let noisy = v + 0.02 * rng.normal();
                img[c * plane + y * side + x] = noisy.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// One synthetic sample: 1-3 filled ellipses on a textured background,
/// redrawn until the foreground fraction lies in the declared bounds.
pub fn synth_sample(id: impl Into<String>, side: usize, rng: &mut Rng) -> Result<(SegSample, Vec<Ellipse>)> {
    if side < 8 {
        return Err(Error::InvalidArgument(format!("synthetic side {side} is too small")));
    }
    loop {
        let count = 1 + rng.below(3);
        let ellipses: Vec<Ellipse> = (0..count).map(|_| Ellipse::random(side as f64, rng)).collect();
        let mask = ellipse_mask(&ellipses, side);
        let frac = mask.iter().sum::<f32>() as f64 / mask.len() as f64;
        if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            continue;
        }
        let image = render(&ellipses, side, rng);
        let s = SegSample::new(id, Tensor::from_vec(image, &[3, side, side])?, Tensor::from_vec(mask, &[1, side, side])?)?;
        return Ok((s, ellipses));
    }
}

/// `n` samples with ids `synth_0000`, `synth_0001`, …; each sample draws
/// from its own stream split off `rng`.
pub fn synth_dataset(n: usize, side: usize, rng: &mut Rng) -> Result<Vec<SegSample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs at least one sample".into()));
    }
    (0..n)
        .map(|i| Ok(synth_sample(format!("synth_{i:04}"), side, &mut rng.split())?.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_matches_ellipse_indicator() {
        let mut r = Rng::new(0);
        let (s, ells) = synth_sample("a", 64, &mut r).unwrap();
        let m = s.mask.to_vec();
        for y in 0..64 {
            for x in 0..64 {
                let inside = ells.iter().any(|e| e.radius2(x as f64 + 0.5, y as f64 + 0.5) <= 1.0);
                assert_eq!(m[y * 64 + x] == 1.0, inside);
            }
        }
    }

    #[test]
    fn foreground_fraction_bounds() {
        let mut r = Rng::new(1);
        for i in 0..1000 {
            let (s, _) = synth_sample(i.to_string(), 32, &mut r).unwrap();
            let frac = s.mask.to_vec().iter().sum::<f32>() as f64 / 1024.0;
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac));
        }
    }

    #[test]
    fn seed_determinism() {
        let a = synth_dataset(3, 48, &mut Rng::new(7)).unwrap();
        let b = synth_dataset(3, 48, &mut Rng::new(7)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.image.bitwise_eq(&y.image) && x.mask.bitwise_eq(&y.mask));
        }
        assert!(synth_dataset(0, 48, &mut Rng::new(7)).is_err());
    }
}
