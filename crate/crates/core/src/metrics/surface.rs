//! Average symmetric surface distance via exact Euclidean distance
//! transforms.

use crate::error::{Error, Result};

/// Foreground voxels with at least one background 6-neighbour; voxels on
/// the volume border count as touching background.
pub fn boundary(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [d, h, w] = shape;
    assert_eq!(mask.len(), d * h * w);
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = idx(z, y, x);
                if !mask[i] {
                    continue;
                }
                let on_border =
                    z == 0 || y == 0 || x == 0 || z == d - 1 || y == h - 1 || x == w - 1;
                out[i] = on_border
                    || !mask[idx(z - 1, y, x)]
                    || !mask[idx(z + 1, y, x)]
                    || !mask[idx(z, y - 1, x)]
                    || !mask[idx(z, y + 1, x)]
                    || !mask[idx(z, y, x - 1)]
                    || !mask[idx(z, y, x + 1)];
            }
        }
    }
    out
}

/// One-dimensional squared distance transform of sampled function `f` on a
/// grid with the given spacing (lower envelope of parabolas).
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    let s2 = spacing * spacing;
    v.clear();
    z.clear();
    let key = |q: usize| f[q] + s2 * (q * q) as f64;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = (key(q) - key(p)) / (2.0 * s2 * (q - p) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        let dp = p as f64 - q as f64;
        *o = s2 * dp * dp + f[q];
    }
}

/// Squared distance (in mm²) from every voxel to the nearest `feature`
/// voxel, exact for anisotropic spacing.
pub fn squared_distance_transform(
    feature: &[bool],
    shape: [usize; 3],
    spacing: [f64; 3],
) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut g: Vec<f64> = feature
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let mut v = Vec::new();
    let mut z = Vec::new();
    let len = [d, h, w];
    let stride = [h * w, w, 1];
    for axis in (0..3).rev() {
        let n = len[axis];
        let mut line = vec![0f64; n];
        let mut out = vec![0f64; n];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..len[others[0]] {
            for j in 0..len[others[1]] {
                let base = i * stride[others[0]] + j * stride[others[1]];
                for (k, l) in line.iter_mut().enumerate() {
                    *l = g[base + k * stride[axis]];
                }
                edt_1d(&line, spacing[axis], &mut out, &mut v, &mut z);
                for (k, o) in out.iter().enumerate() {
                    g[base + k * stride[axis]] = *o;
                }
            }
        }
    }
    g
}

/// Mean distance from the surface of `a` to the surface of `b`.
fn directed(a_surface: &[bool], b_dt: &[f64]) -> f64 {
    let (sum, n) = a_surface
        .iter()
        .zip(b_dt)
        .filter(|(&s, _)| s)
        .fold((0.0, 0usize), |(sum, n), (_, &d)| (sum + d.sqrt(), n + 1));
    sum / n as f64
}

/// Average symmetric surface distance in millimetres.
pub fn assd(pred: &[bool], gt: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    let n: usize = shape.iter().product();
    if pred.len() != n || gt.len() != n {
        return Err(Error::Shape(format!(
            "masks of {} and {} voxels for shape {shape:?}",
            pred.len(),
            gt.len()
        )));
    }
    if !pred.iter().any(|&v| v) {
        return Err(Error::EmptyMask("prediction"));
    }
    if !gt.iter().any(|&v| v) {
        return Err(Error::EmptyMask("ground truth"));
    }
    let sp = boundary(pred, shape);
    let sg = boundary(gt, shape);
    let dt_p = squared_distance_transform(&sp, shape, spacing);
    let dt_g = squared_distance_transform(&sg, shape, spacing);
    Ok((directed(&sp, &dt_g) + directed(&sg, &dt_p)) / 2.0)
}
