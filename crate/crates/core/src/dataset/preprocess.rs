//! Intensity normalization, isotropic resampling and label merging.

use serde::{Deserialize, Serialize};

use super::nifti_io::Volume;
use crate::error::{Error, Result};

/// Voxels over which z-score statistics are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMask {
    /// Nonzero voxels of the raw image (skull-stripped data).
    #[default]
    Nonzero,
    FullVolume,
}

impl NormMask {
    pub fn select(self, values: &[f32]) -> Vec<bool> {
        match self {
            NormMask::Nonzero => values.iter().map(|&v| v != 0.0).collect(),
            NormMask::FullVolume => vec![true; values.len()],
        }
    }
}

/// Standardizes `values` to zero mean and unit population standard
/// deviation over `mask`; voxels outside the mask become zero.
pub fn zscore(values: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if values.len() != mask.len() {
        return Err(Error::Shape(format!(
            "z-score mask has {} voxels, volume has {}",
            mask.len(),
            values.len()
        )));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n < 2 {
        return Err(Error::ZeroVariance);
    }
    let mean = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .sum::<f64>()
        / n as f64;
    let var = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() || std <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(values
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - mean) / std } else { 0.0 })
        .collect())
}

/// Applies [`zscore`] to an `f32` volume using the given mask policy.
pub fn normalize_volume(values: &[f32], mask: NormMask) -> Result<Vec<f32>> {
    let sel = mask.select(values);
    let as64: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    let out = zscore(&as64, &sel)?;
    let out: Vec<f32> = out.into_iter().map(|v| v as f32).collect();
    if let Some(bad) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("voxel {bad} after normalization")));
    }
    Ok(out)
}

/// Collapses all lesion classes (any value > 0) into a single foreground label.
pub fn merge_labels(values: &[f32]) -> Vec<f32> {
    values
        .iter()
        .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

fn needs_resampling(spacing: [f64; 3], target: [f64; 3]) -> bool {
    spacing
        .iter()
        .zip(&target)
        .any(|(s, t)| (s - t).abs() > 1e-3 * t)
}

/// Resampled grid extent for `shape` at `spacing` onto `target` spacing.
pub fn resampled_shape(shape: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    if !needs_resampling(spacing, target) {
        return shape;
    }
    [0, 1, 2].map(|i| ((shape[i] as f64 * spacing[i] / target[i]).round() as usize).max(1))
}

/// Resamples onto a grid with `target` spacing; voxel centres of both grids
/// share the origin of voxel 0.
pub fn resample(vol: &Volume, target: [f64; 3], interp: Interpolation) -> Volume {
    if !needs_resampling(vol.spacing, target) {
        return Volume {
            spacing: target,
            ..vol.clone()
        };
    }
    let out_shape = resampled_shape(vol.shape, vol.spacing, target);
    let [d, h, w] = vol.shape;
    let scale = [0, 1, 2].map(|i| target[i] / vol.spacing[i]);
    let at = |z: usize, y: usize, x: usize| vol.data[(z * h + y) * w + x];
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for oz in 0..out_shape[0] {
        for oy in 0..out_shape[1] {
            for ox in 0..out_shape[2] {
                let pos = [
                    oz as f64 * scale[0],
                    oy as f64 * scale[1],
                    ox as f64 * scale[2],
                ];
                let lim = [d, h, w];
                let v = match interp {
                    Interpolation::Nearest => {
                        let idx = [0, 1, 2].map(|i| (pos[i].round() as usize).min(lim[i] - 1));
                        at(idx[0], idx[1], idx[2])
                    }
                    Interpolation::Trilinear => {
                        let mut lo = [0usize; 3];
                        let mut hi = [0usize; 3];
                        let mut frac = [0f64; 3];
                        for i in 0..3 {
                            let p = pos[i].min((lim[i] - 1) as f64);
                            lo[i] = p.floor() as usize;
                            hi[i] = (lo[i] + 1).min(lim[i] - 1);
                            frac[i] = p - lo[i] as f64;
                        }
                        let mut acc = 0.0f64;
                        for corner in 0..8 {
                            let pick = |i: usize| corner >> (2 - i) & 1 == 1;
                            let mut wgt = 1.0;
                            let mut idx = [0usize; 3];
                            for i in 0..3 {
                                if pick(i) {
                                    wgt *= frac[i];
                                    idx[i] = hi[i];
                                } else {
                                    wgt *= 1.0 - frac[i];
                                    idx[i] = lo[i];
                                }
                            }
                            if wgt != 0.0 {
                                acc += wgt * at(idx[0], idx[1], idx[2]) as f64;
                            }
                        }
                        acc as f32
                    }
                };
                data.push(v);
            }
        }
    }
    Volume {
        shape: out_shape,
        spacing: target,
        data,
    }
}
