#![allow(dead_code)]

use std::f64::consts::PI;

/// Trapezoid rule on `[-half, half]`; spectrally accurate for smooth integrands
/// with Gaussian tails.
pub fn trapezoid(f: impl Fn(f64) -> f64, half: f64, points: usize) -> f64 {
    let h = 2.0 * half / points as f64;
    (0..=points)
        .map(|k| {
            let x = -half + k as f64 * h;
            let w = if k == 0 || k == points { 0.5 } else { 1.0 };
            w * f(x)
        })
        .sum::<f64>()
        * h
}

/// Hermite functions by the normalized three-term recurrence, written
/// independently of the library.
pub fn oracle_e(n: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let mut prev = 0.0;
    let mut cur = (2.0 * PI).powf(-0.25) * (-x * x / 4.0).exp();
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = cur;
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    out
}
