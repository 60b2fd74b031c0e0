//! CT-style intensity preprocessing and geometric reshaping: intensity
//! windowing, grey erosion masking, exponential normalization, and the
//! resize/crop chain that brings scans to a cubic grid.
//!
//! Intensity stages compute in f64 and round to the f32 voxel storage at
//! stage boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::volume::{Dims, LabelVolume, Volume};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Intensity window lower bound (raw scanner units).
    pub vmin: f64,
    /// Intensity window upper bound.
    pub vmax: f64,
    /// Exponent coefficient of the normalization stage.
    pub exp_coef: f64,
    /// Grey-erosion window, in (x, y, z) voxels.
    pub erosion_window: [usize; 3],
    /// Stabilizer added to the standard deviation.
    pub std_epsilon: f64,
    /// Standardized values are clamped to this magnitude before exp.
    pub exp_clamp: f64,
    /// Final grid size (x, y, z).
    pub target_dims: [usize; 3],
    /// Intermediate XY size before border cropping.
    pub xy_resize: usize,
    /// Voxels removed from each XY border after the resize.
    pub xy_border_crop: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            vmin: 1100.0,
            vmax: 1600.0,
            exp_coef: 1.3,
            erosion_window: [2, 2, 1],
            std_epsilon: 1e-6,
            exp_clamp: 20.0,
            target_dims: [128, 128, 128],
            xy_resize: 192,
            xy_border_crop: 32,
        }
    }
}

impl PreprocessConfig {
    /// Identity-geometry config for cubic grids of side `n`: the intensity
    /// chain runs unchanged, the resize/crop stage is a no-op.
    pub fn identity_geometry(n: usize) -> Self {
        PreprocessConfig {
            target_dims: [n, n, n],
            xy_resize: n,
            xy_border_crop: 0,
            ..PreprocessConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vmin >= self.vmax {
            return Err(SegError::InvalidConfig(format!(
                "vmin {} must be < vmax {}",
                self.vmin, self.vmax
            )));
        }
        if self.exp_coef <= 0.0 {
            return Err(SegError::InvalidConfig("exp_coef must be > 0".into()));
        }
        if self.erosion_window.iter().any(|&w| w == 0) {
            return Err(SegError::InvalidConfig(
                "erosion window components must be >= 1".into(),
            ));
        }
        if self.std_epsilon <= 0.0 || self.exp_clamp <= 0.0 {
            return Err(SegError::InvalidConfig(
                "std_epsilon and exp_clamp must be > 0".into(),
            ));
        }
        if 2 * self.xy_border_crop >= self.xy_resize {
            return Err(SegError::InvalidConfig(format!(
                "crop {} removes the whole {}-voxel XY extent",
                self.xy_border_crop, self.xy_resize
            )));
        }
        let after_crop = self.xy_resize - 2 * self.xy_border_crop;
        if after_crop != self.target_dims[0] || after_crop != self.target_dims[1] {
            return Err(SegError::InvalidConfig(format!(
                "xy_resize {} - 2*{} = {} does not match target XY dims {:?}",
                self.xy_resize, self.xy_border_crop, after_crop, self.target_dims
            )));
        }
        if self.target_dims.iter().any(|&d| d == 0) {
            return Err(SegError::InvalidConfig("target dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Zeroes voxels strictly below `vmin` or strictly above `vmax`.
pub fn clip_window(v: &Volume, vmin: f64, vmax: f64) -> Volume {
    let data = v
        .data
        .iter()
        .map(|&x| {
            let xf = x as f64;
            if xf < vmin || xf > vmax {
                0.0
            } else {
                x
            }
        })
        .collect();
    Volume {
        dims: v.dims,
        data,
        spacing: v.spacing,
    }
}

#[inline]
fn reflect(mut i: isize, n: isize) -> usize {
    // Symmetric reflection that repeats the edge sample: for n = 4,
    // indices -2 -1 0 1 2 3 4 5 map to 1 0 0 1 2 3 3 2.
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

fn erode_axis(data: &mut Vec<f32>, dims: Dims, axis: usize, w: usize) {
    if w == 1 {
        return;
    }
    let n = [dims.nx, dims.ny, dims.nz][axis];
    let lo = -((w / 2) as isize);
    let hi = (w - w / 2) as isize - 1;
    let stride = match axis {
        0 => 1,
        1 => dims.nx,
        _ => dims.nx * dims.ny,
    };
    let mut out = data.clone();
    let (outer, inner) = match axis {
        0 => (dims.nz * dims.ny, dims.nx),
        1 => (dims.nz, dims.nx * dims.ny),
        _ => (1, dims.len()),
    };
    // Lines along `axis` start at base indices enumerated by the other axes.
    for block in 0..outer {
        let base = match axis {
            0 => block * dims.nx,
            1 => block * dims.nx * dims.ny,
            _ => 0,
        };
        let lanes = match axis {
            0 => 1,
            _ => inner / n,
        };
        for lane in 0..lanes {
            let start = base + lane;
            for i in 0..n {
                let mut m = f32::INFINITY;
                for o in lo..=hi {
                    let j = reflect(i as isize + o, n as isize);
                    let v = data[start + j * stride];
                    if v < m {
                        m = v;
                    }
                }
                out[start + i * stride] = m;
            }
        }
    }
    *data = out;
}

/// Moving-minimum filter over a rectangular window.
///
/// Even window lengths cover offsets `{-w/2, .., w/2 - 1}` (leading-edge
/// bias); boundaries reflect with the edge sample repeated.
pub fn grey_erosion(v: &Volume, window: [usize; 3]) -> Result<Volume> {
    if window.iter().any(|&w| w == 0) {
        return Err(SegError::InvalidArgument(
            "erosion window components must be >= 1".into(),
        ));
    }
    let dims = [v.dims.nx, v.dims.ny, v.dims.nz];
    for a in 0..3 {
        if window[a] > dims[a] {
            return Err(SegError::InvalidArgument(format!(
                "erosion window {:?} exceeds volume dims {:?} on axis {a}",
                window, dims
            )));
        }
    }
    let mut data = v.data.clone();
    for a in 0..3 {
        erode_axis(&mut data, v.dims, a, window[a]);
    }
    Ok(Volume {
        dims: v.dims,
        data,
        spacing: v.spacing,
    })
}

/// Zeroes voxels of `v` wherever `eroded` is zero.
pub fn mask_zero(v: &Volume, eroded: &Volume) -> Result<Volume> {
    if v.dims != eroded.dims {
        return Err(SegError::DimMismatch(format!(
            "mask_zero dims {:?} vs {:?}",
            v.dims, eroded.dims
        )));
    }
    let data = v
        .data
        .iter()
        .zip(eroded.data.iter())
        .map(|(&x, &m)| if m == 0.0 { 0.0 } else { x })
        .collect();
    Ok(Volume {
        dims: v.dims,
        data,
        spacing: v.spacing,
    })
}

/// Standardize-exponentiate-rescale: subtract twice the mean, divide by
/// (std + eps), clamp, apply `exp(coef * x)` and min-max rescale to [0, 1].
///
/// A constant input (fully masked scan) yields the all-zero volume.
pub fn normalize_exp(v: &Volume, exp_coef: f64, std_epsilon: f64, exp_clamp: f64) -> Volume {
    let n = v.data.len();
    let mut out = Volume::zeros(v.dims);
    out.spacing = v.spacing;
    if n == 0 {
        return out;
    }
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let var = v
        .data
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return out; // degenerate: constant after masking
    }
    let denom = std + std_epsilon;
    let mut buf = Vec::with_capacity(n);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in &v.data {
        let z = ((x as f64 - 2.0 * mean) / denom).clamp(-exp_clamp, exp_clamp);
        let e = (exp_coef * z).exp();
        lo = lo.min(e);
        hi = hi.max(e);
        buf.push(e);
    }
    if hi == lo {
        return out; // clamp saturated everything to one value
    }
    let range = hi - lo;
    for (o, e) in out.data.iter_mut().zip(buf.into_iter()) {
        *o = ((e - lo) / range) as f32;
    }
    out
}

#[derive(Clone, Copy)]
enum Interp {
    Trilinear,
    Nearest,
}

/// Separable 1-D resample along one axis with the half-pixel convention.
fn resize_axis_f64(
    src: &[f64],
    src_dims: [usize; 3],
    axis: usize,
    new_n: usize,
    interp: Interp,
) -> (Vec<f64>, [usize; 3]) {
    let old_n = src_dims[axis];
    let mut dst_dims = src_dims;
    dst_dims[axis] = new_n;
    if new_n == old_n {
        return (src.to_vec(), dst_dims);
    }
    let scale = old_n as f64 / new_n as f64;
    let src_stride = match axis {
        0 => 1,
        1 => src_dims[0],
        _ => src_dims[0] * src_dims[1],
    };
    let dst_stride = match axis {
        0 => 1,
        1 => dst_dims[0],
        _ => dst_dims[0] * dst_dims[1],
    };
    let mut dst = vec![0.0f64; dst_dims[0] * dst_dims[1] * dst_dims[2]];
    let lanes: Vec<(usize, usize)> = {
        // (src_base, dst_base) for each line along `axis`.
        let mut v = Vec::new();
        let (d0, d1, d2) = (src_dims[0], src_dims[1], src_dims[2]);
        match axis {
            0 => {
                for z in 0..d2 {
                    for y in 0..d1 {
                        v.push((d0 * (y + d1 * z), new_n * (y + d1 * z)));
                    }
                }
            }
            1 => {
                for z in 0..d2 {
                    for x in 0..d0 {
                        v.push((x + d0 * d1 * z, x + d0 * new_n * z));
                    }
                }
            }
            _ => {
                for y in 0..d1 {
                    for x in 0..d0 {
                        v.push((x + d0 * y, x + d0 * y));
                    }
                }
            }
        }
        v
    };
    for (sb, db) in lanes {
        for i in 0..new_n {
            let pos = (i as f64 + 0.5) * scale - 0.5;
            let value = match interp {
                Interp::Trilinear => {
                    let p = pos.clamp(0.0, (old_n - 1) as f64);
                    let i0 = p.floor() as usize;
                    let i1 = (i0 + 1).min(old_n - 1);
                    let frac = p - i0 as f64;
                    src[sb + i0 * src_stride] * (1.0 - frac) + src[sb + i1 * src_stride] * frac
                }
                Interp::Nearest => {
                    let j = (((i as f64 + 0.5) * scale).floor() as isize)
                        .clamp(0, old_n as isize - 1) as usize;
                    src[sb + j * src_stride]
                }
            };
            dst[db + i * dst_stride] = value;
        }
    }
    (dst, dst_dims)
}

fn crop_xy_f64(src: &[f64], dims: [usize; 3], crop: usize) -> (Vec<f64>, [usize; 3]) {
    if crop == 0 {
        return (src.to_vec(), dims);
    }
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let (cx, cy) = (nx - 2 * crop, ny - 2 * crop);
    let mut out = Vec::with_capacity(cx * cy * nz);
    for z in 0..nz {
        for y in 0..cy {
            let row = (crop + y) * nx + z * nx * ny + crop;
            out.extend_from_slice(&src[row..row + cx]);
        }
    }
    (out, [cx, cy, nz])
}

fn resize_crop_f64(
    data: Vec<f64>,
    dims: [usize; 3],
    cfg: &PreprocessConfig,
    interp: Interp,
) -> Result<(Vec<f64>, [usize; 3])> {
    cfg.validate()?;
    let (d, dims) = resize_axis_f64(&data, dims, 0, cfg.xy_resize, interp);
    let (d, dims) = resize_axis_f64(&d, dims, 1, cfg.xy_resize, interp);
    let (d, dims) = crop_xy_f64(&d, dims, cfg.xy_border_crop);
    let (d, dims) = resize_axis_f64(&d, dims, 2, cfg.target_dims[2], interp);
    Ok((d, dims))
}

/// Resizes the XY plane to `xy_resize`, removes `xy_border_crop` voxels from
/// each XY border, and resizes Z to the target extent. Trilinear.
pub fn resize_crop(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    let data: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
    let (d, dims) = resize_crop_f64(data, [v.dims.nx, v.dims.ny, v.dims.nz], cfg, Interp::Trilinear)?;
    let mut out = Volume::new(
        Dims::new(dims[0], dims[1], dims[2]),
        d.into_iter().map(|x| x as f32).collect(),
    )?;
    out.spacing = v.spacing;
    Ok(out)
}

/// Label-volume overload of [`resize_crop`]: nearest-neighbor resampling,
/// which preserves label validity.
pub fn resize_crop_labels(lv: &LabelVolume, cfg: &PreprocessConfig) -> Result<LabelVolume> {
    let data: Vec<f64> = lv.labels.iter().map(|&l| l as f64).collect();
    let (d, dims) = resize_crop_f64(data, [lv.dims.nx, lv.dims.ny, lv.dims.nz], cfg, Interp::Nearest)?;
    LabelVolume::new(
        Dims::new(dims[0], dims[1], dims[2]),
        d.into_iter().map(|x| x as u8).collect(),
    )
}

/// The full chain: resize/crop, intensity window, grey erosion, mask, and
/// exponential normalization. Deterministic; output values lie in [0, 1].
pub fn preprocess_pipeline(v: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    let resized = resize_crop(v, cfg)?;
    let clipped = clip_window(&resized, cfg.vmin, cfg.vmax);
    let eroded = grey_erosion(&clipped, cfg.erosion_window)?;
    let masked = mask_zero(&clipped, &eroded)?;
    Ok(normalize_exp(
        &masked,
        cfg.exp_coef,
        cfg.std_epsilon,
        cfg.exp_clamp,
    ))
}
