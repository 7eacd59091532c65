#![allow(dead_code)]

use ovcd::feature::FeatureMap;
use ovcd::mask::InstanceMask;

/// Corner-aligned source position of output index `o`, as an integer part and
/// an exact fraction, using integer arithmetic only.
fn tap(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    if n_in == 1 || n_out == 1 {
        return (0, 0, 0.0);
    }
    let num = o * (n_in - 1);
    let den = n_out - 1;
    let lo = num / den;
    let rem = num % den;
    let hi = if rem == 0 { lo } else { lo + 1 };
    (lo, hi, rem as f64 / den as f64)
}

/// Upsampled feature at one pixel, evaluated directly.
pub fn upsampled_at(f: &FeatureMap, y: usize, x: usize, h: usize, w: usize) -> Vec<f64> {
    let (y0, y1, fy) = tap(y, f.height(), h);
    let (x0, x1, fx) = tap(x, f.width(), w);
    (0..f.dim())
        .map(|c| {
            let v = |yy: usize, xx: usize| f.at(yy, xx)[c] as f64;
            v(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + v(y0, x1) * (1.0 - fy) * fx
                + v(y1, x0) * fy * (1.0 - fx)
                + v(y1, x1) * fy * fx
        })
        .collect()
}

/// Masked mean by upsampling every foreground pixel separately.
pub fn pool_oracle(f: &FeatureMap, mask: &InstanceMask, h: usize, w: usize) -> Vec<f64> {
    let mut sum = vec![0.0; f.dim()];
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                n += 1;
                for (s, v) in sum.iter_mut().zip(upsampled_at(f, y, x, h, w)) {
                    *s += v;
                }
            }
        }
    }
    sum.iter().map(|s| s / n as f64).collect()
}

pub fn pixel_count(m: &InstanceMask) -> usize {
    let (h, w) = m.dims();
    (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| m.get(y, x)).count()
}

pub fn overlap_count(a: &InstanceMask, b: &InstanceMask) -> usize {
    let (h, w) = a.dims();
    (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).filter(|&(y, x)| a.get(y, x) && b.get(y, x)).count()
}

pub fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 { 0.0 } else { (dot / (na * nb)).clamp(-1.0, 1.0) }
}

/// F1 implied by IoU over the same counts, in percent.
pub fn f1_of(iou: f64) -> f64 {
    200.0 * iou / (100.0 + iou)
}
