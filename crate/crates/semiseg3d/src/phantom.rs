//! Synthetic vascular phantoms: cubic volumes containing two curved tubes
//! (true and false lumen), an optional thrombus blob attached to the false
//! lumen, and bright distractor blobs in the background.
//!
//! Intensities are on a raw-scanner-like scale so phantoms can run through
//! the full preprocessing chain. Generation is a pure function of
//! `(seed, dims, params)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::seed;
use crate::volume::{Dims, LabelVolume, Volume};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    /// Base tube radii in voxels (jittered per phantom).
    pub tl_radius: f64,
    pub fl_radius: f64,
    /// Relative radius jitter, drawn in `[1 - j, 1 + j]`.
    pub radius_jitter: f64,
    /// Lateral wiggle amplitudes of the tube centerlines, in voxels.
    pub wiggle_x: f64,
    pub wiggle_y: f64,
    /// Thrombus blob radius and per-phantom occurrence probability.
    pub flt_radius: f64,
    pub flt_probability: f64,
    /// Count range and radius of background distractor blobs.
    pub distractor_count: [usize; 2],
    pub distractor_radius: f64,
    /// Additive Gaussian noise level (raw units).
    pub noise_std: f64,
    /// Material intensity levels (raw units).
    pub background_level: f64,
    pub tl_level: f64,
    pub fl_level: f64,
    pub flt_level: f64,
    pub distractor_level: f64,
    /// Per-phantom global intensity shift range (+/-).
    pub level_shift: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            tl_radius: 2.6,
            fl_radius: 3.2,
            radius_jitter: 0.2,
            wiggle_x: 1.5,
            wiggle_y: 3.5,
            flt_radius: 2.2,
            flt_probability: 0.68,
            distractor_count: [2, 6],
            distractor_radius: 2.0,
            noise_std: 30.0,
            background_level: 900.0,
            tl_level: 1480.0,
            fl_level: 1280.0,
            flt_level: 1180.0,
            distractor_level: 1400.0,
            level_shift: 40.0,
        }
    }
}

impl PhantomParams {
    /// Parameters scaled for small grids (shorter radii and wiggle).
    pub fn for_side(n: usize) -> Self {
        let s = n as f64 / 32.0;
        let base = PhantomParams::default();
        PhantomParams {
            tl_radius: (base.tl_radius * s).max(1.0),
            fl_radius: (base.fl_radius * s).max(1.2),
            flt_radius: (base.flt_radius * s).max(1.0),
            wiggle_x: base.wiggle_x * s,
            wiggle_y: base.wiggle_y * s,
            distractor_radius: (base.distractor_radius * s).max(1.0),
            ..base
        }
    }

    fn max_tube_extent(&self) -> f64 {
        let r_max = self.tl_radius.max(self.fl_radius) * (1.0 + self.radius_jitter);
        r_max + self.wiggle_x.max(self.wiggle_y)
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        if !dims.is_cubic() {
            return Err(SegError::NotCubic(dims.nx, dims.ny, dims.nz));
        }
        let n = dims.nx as f64;
        if self.tl_radius < 0.5 || self.fl_radius < 0.5 {
            return Err(SegError::InvalidArgument("tube radii must be >= 0.5".into()));
        }
        if !(0.0..=1.0).contains(&self.flt_probability) {
            return Err(SegError::InvalidArgument(
                "flt_probability must lie in [0, 1]".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(SegError::InvalidArgument("noise_std must be >= 0".into()));
        }
        // Tube centers sit at 0.30 n and 0.70 n; both tubes plus wiggle and
        // jittered radii must stay inside the grid and apart from each other.
        let extent = self.max_tube_extent();
        if 0.30 * n - extent < 1.0 || 0.30 * n + extent > n - 2.0 {
            return Err(SegError::InvalidArgument(format!(
                "tube radius/wiggle too large for a {dims:?} grid"
            )));
        }
        let jitter = 1.0 + self.radius_jitter;
        let separation = 0.40 * n
            - 2.0 * self.wiggle_x
            - (self.tl_radius + self.fl_radius) * jitter;
        if separation < 1.0 {
            return Err(SegError::InvalidArgument(format!(
                "tubes would overlap on a {dims:?} grid (separation margin {separation:.2})"
            )));
        }
        let contrast = (self.tl_level - self.background_level)
            .abs()
            .min((self.fl_level - self.background_level).abs())
            .min((self.flt_level - self.background_level).abs());
        if self.noise_std > 0.0 && contrast < 3.0 * self.noise_std {
            return Err(SegError::InvalidArgument(format!(
                "tube/background contrast {contrast} below 3x noise std {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

const MAT_BACKGROUND: u8 = 0;
const MAT_TL: u8 = 1;
const MAT_FL: u8 = 2;
const MAT_FLT: u8 = 3;
const MAT_DISTRACTOR: u8 = 4;

struct TubePath {
    cx0: f64,
    cy0: f64,
    ax: f64,
    ay: f64,
    kx: f64,
    ky: f64,
    px: f64,
    py: f64,
    radius: f64,
}

impl TubePath {
    fn center(&self, z: f64, n: f64) -> (f64, f64) {
        let tx = 2.0 * std::f64::consts::PI * self.kx * z / n + self.px;
        let ty = 2.0 * std::f64::consts::PI * self.ky * z / n + self.py;
        (self.cx0 + self.ax * tx.sin(), self.cy0 + self.ay * ty.sin())
    }
}

fn draw_tube(rng: &mut ChaCha8Rng, params: &PhantomParams, center_frac: f64, base_radius: f64, n: f64) -> TubePath {
    let two_pi = 2.0 * std::f64::consts::PI;
    TubePath {
        cx0: center_frac * n,
        cy0: 0.5 * n,
        ax: params.wiggle_x * rng.random_range(0.5..1.0),
        ay: params.wiggle_y * rng.random_range(0.5..1.0),
        kx: rng.random_range(0.5..1.5),
        ky: rng.random_range(0.5..1.5),
        px: rng.random_range(0.0..two_pi),
        py: rng.random_range(0.0..two_pi),
        radius: base_radius * rng.random_range(1.0 - params.radius_jitter..1.0 + params.radius_jitter),
    }
}

fn stamp_sphere(material: &mut [u8], dims: Dims, center: (f64, f64, f64), radius: f64, mat: u8, keep: u8) {
    let n = dims.nx as isize;
    let r2 = radius * radius;
    let lo = |c: f64| ((c - radius).floor() as isize).max(0);
    let hi = |c: f64| ((c + radius).ceil() as isize).min(n - 1);
    for z in lo(center.2)..=hi(center.2) {
        for y in lo(center.1)..=hi(center.1) {
            for x in lo(center.0)..=hi(center.0) {
                let dx = x as f64 - center.0;
                let dy = y as f64 - center.1;
                let dz = z as f64 - center.2;
                if dx * dx + dy * dy + dz * dz <= r2 {
                    let idx = dims.index(x as usize, y as usize, z as usize);
                    if material[idx] != keep {
                        material[idx] = mat;
                    }
                }
            }
        }
    }
}

/// Generates one phantom: a deterministic (Volume, LabelVolume) pair with
/// labels 1 (TL), 2 (FL) and, in a seed-dependent fraction of phantoms,
/// 3 (FLT attached to the FL tube).
pub fn generate_phantom(
    seed: u64,
    dims: Dims,
    params: &PhantomParams,
) -> Result<(Volume, LabelVolume)> {
    params.validate(dims)?;
    let n = dims.nx;
    let nf = n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let tl = draw_tube(&mut rng, params, 0.30, params.tl_radius, nf);
    let fl = draw_tube(&mut rng, params, 0.70, params.fl_radius, nf);
    let level_shift = rng.random_range(-params.level_shift..=params.level_shift);

    // Material map: tubes first, thrombus and distractors stamped after.
    let mut material = vec![MAT_BACKGROUND; dims.len()];
    for z in 0..n {
        let (c1x, c1y) = tl.center(z as f64, nf);
        let (c2x, c2y) = fl.center(z as f64, nf);
        let r1sq = tl.radius * tl.radius;
        let r2sq = fl.radius * fl.radius;
        for y in 0..n {
            let d1y = y as f64 - c1y;
            let d2y = y as f64 - c2y;
            for x in 0..n {
                let d1x = x as f64 - c1x;
                let d2x = x as f64 - c2x;
                let idx = dims.index(x, y, z);
                if d1x * d1x + d1y * d1y <= r1sq {
                    material[idx] = MAT_TL;
                } else if d2x * d2x + d2y * d2y <= r2sq {
                    material[idx] = MAT_FL;
                }
            }
        }
    }

    // Thrombus blob attached to the FL wall, never carving into the TL.
    let has_flt = rng.random_range(0.0..1.0) < params.flt_probability;
    if has_flt {
        let zc = rng.random_range(0.25 * nf..0.75 * nf);
        let theta = rng.random_range(0.0..2.0 * std::f64::consts::PI);
        let (cx, cy) = fl.center(zc, nf);
        let r = params.flt_radius;
        let center = (
            (cx + 0.7 * fl.radius * theta.cos()).clamp(r + 1.0, nf - r - 2.0),
            (cy + 0.7 * fl.radius * theta.sin()).clamp(r + 1.0, nf - r - 2.0),
            zc.clamp(r + 1.0, nf - r - 2.0),
        );
        stamp_sphere(&mut material, dims, center, r, MAT_FLT, MAT_TL);
    }

    // Distractor blobs: background structures whose intensity also lies in
    // the clip window, so intensity alone cannot isolate the tubes.
    let n_distractors = rng.random_range(params.distractor_count[0]..=params.distractor_count[1]);
    let rd = params.distractor_radius;
    for _ in 0..n_distractors {
        for _attempt in 0..50 {
            let bx = rng.random_range(rd + 1.0..nf - rd - 2.0);
            let by = rng.random_range(rd + 1.0..nf - rd - 2.0);
            let bz = rng.random_range(rd + 1.0..nf - rd - 2.0);
            let clear = |tube: &TubePath| -> bool {
                let z0 = ((bz - rd).floor() as usize).min(n - 1);
                let z1 = ((bz + rd).ceil() as usize).min(n - 1);
                (z0..=z1).all(|z| {
                    let (cx, cy) = tube.center(z as f64, nf);
                    let dx = bx - cx;
                    let dy = by - cy;
                    (dx * dx + dy * dy).sqrt() > tube.radius + rd + 1.5
                })
            };
            if clear(&tl) && clear(&fl) {
                stamp_sphere(&mut material, dims, (bx, by, bz), rd, MAT_DISTRACTOR, MAT_TL);
                break;
            }
        }
    }

    // Intensities: material level + global shift + per-voxel noise.
    let levels = [
        params.background_level,
        params.tl_level,
        params.fl_level,
        params.flt_level,
        params.distractor_level,
    ];
    let mut data = Vec::with_capacity(dims.len());
    if params.noise_std > 0.0 {
        let normal = Normal::new(0.0, params.noise_std).expect("valid std");
        for &m in &material {
            let v = levels[m as usize] + level_shift + normal.sample(&mut rng);
            data.push(v as f32);
        }
    } else {
        for &m in &material {
            data.push((levels[m as usize] + level_shift) as f32);
        }
    }

    let labels: Vec<u8> = material
        .into_iter()
        .map(|m| if m == MAT_DISTRACTOR { 0 } else { m })
        .collect();
    Ok((Volume::new(dims, data)?, LabelVolume::new(dims, labels)?))
}

/// Generates `count` phantoms with per-item seeds derived from `base_seed`.
pub fn generate_corpus(
    count: usize,
    dims: Dims,
    params: &PhantomParams,
    base_seed: u64,
) -> Result<Vec<(String, Volume, LabelVolume)>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (v, lv) = generate_phantom(seed::mix(base_seed, i as u64), dims, params)?;
        out.push((format!("phantom-{i:04}"), v, lv));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{LABEL_FL, LABEL_FLT, LABEL_TL};

    fn side16() -> (Dims, PhantomParams) {
        (Dims::cubic(16), PhantomParams::for_side(16))
    }

    #[test]
    fn same_seed_is_identical() {
        let (dims, params) = side16();
        let (v1, l1) = generate_phantom(7, dims, &params).unwrap();
        let (v2, l2) = generate_phantom(7, dims, &params).unwrap();
        assert_eq!(v1.data, v2.data);
        assert_eq!(l1.labels, l2.labels);
        let (v3, _) = generate_phantom(8, dims, &params).unwrap();
        assert_ne!(v1.data, v3.data);
    }

    #[test]
    fn zero_noise_makes_tube_one_constant() {
        let (dims, mut params) = side16();
        params.noise_std = 0.0;
        let (v, l) = generate_phantom(3, dims, &params).unwrap();
        let tube_vals: Vec<f32> = l
            .labels
            .iter()
            .zip(v.data.iter())
            .filter(|&(&l, _)| l == LABEL_TL)
            .map(|(_, &x)| x)
            .collect();
        assert!(!tube_vals.is_empty());
        assert!(tube_vals.iter().all(|&x| x == tube_vals[0]));
    }

    #[test]
    fn non_cubic_dims_rejected() {
        let params = PhantomParams::for_side(16);
        assert!(matches!(
            generate_phantom(0, Dims::new(16, 16, 8), &params).unwrap_err(),
            SegError::NotCubic(16, 16, 8)
        ));
    }

    #[test]
    fn oversized_radii_rejected() {
        let dims = Dims::cubic(16);
        let params = PhantomParams {
            tl_radius: 6.0,
            fl_radius: 6.0,
            ..PhantomParams::default()
        };
        assert!(generate_phantom(0, dims, &params).is_err());
    }

    #[test]
    fn tubes_are_present_and_disjoint() {
        let (dims, params) = side16();
        for seed in 0..20u64 {
            let (_, l) = generate_phantom(seed, dims, &params).unwrap();
            let tl = l.labels.iter().filter(|&&x| x == LABEL_TL).count();
            let fl = l.labels.iter().filter(|&&x| x == LABEL_FL).count();
            assert!(tl > 10, "seed {seed}: TL has only {tl} voxels");
            assert!(fl > 10, "seed {seed}: FL has only {fl} voxels");
        }
    }

    #[test]
    fn flt_attaches_to_fl_when_present() {
        let (dims, params) = side16();
        let mut seen = false;
        for seed in 0..30u64 {
            let (_, l) = generate_phantom(seed, dims, &params).unwrap();
            let flt: Vec<usize> = l
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &x)| x == LABEL_FLT)
                .map(|(i, _)| i)
                .collect();
            if flt.is_empty() {
                continue;
            }
            seen = true;
            // Some FLT voxel must touch an FL voxel (6-neighborhood).
            let n = dims.nx;
            let touches = flt.iter().any(|&i| {
                let (x, y, z) = (i % n, (i / n) % n, i / (n * n));
                let mut adjacent = false;
                let mut check = |xx: usize, yy: usize, zz: usize| {
                    if l.at(xx, yy, zz) == LABEL_FL {
                        adjacent = true;
                    }
                };
                if x > 0 { check(x - 1, y, z) }
                if x + 1 < n { check(x + 1, y, z) }
                if y > 0 { check(x, y - 1, z) }
                if y + 1 < n { check(x, y + 1, z) }
                if z > 0 { check(x, y, z - 1) }
                if z + 1 < n { check(x, y, z + 1) }
                adjacent
            });
            assert!(touches, "seed {seed}: FLT blob detached from FL");
        }
        assert!(seen, "no phantom with FLT among 30 seeds");
    }

    #[test]
    fn flt_fraction_tracks_probability() {
        let (dims, params) = side16();
        let mut with_flt = 0;
        for seed in 0..100u64 {
            let (_, l) = generate_phantom(seed, dims, &params).unwrap();
            if l.labels.iter().any(|&x| x == LABEL_FLT) {
                with_flt += 1;
            }
        }
        let fraction = with_flt as f64 / 100.0;
        assert!(
            (fraction - 0.68).abs() <= 0.15,
            "observed FLT fraction {fraction}"
        );
    }

    #[test]
    fn contrast_exceeds_three_sigma() {
        let (dims, params) = side16();
        let (v, l) = generate_phantom(5, dims, &params).unwrap();
        // Mean background vs mean tube intensity, against the noise level.
        let mut bg = (0.0f64, 0usize);
        let mut tube = (0.0f64, 0usize);
        for (&lab, &x) in l.labels.iter().zip(v.data.iter()) {
            if lab == 0 {
                bg = (bg.0 + x as f64, bg.1 + 1);
            } else {
                tube = (tube.0 + x as f64, tube.1 + 1);
            }
        }
        let contrast = (tube.0 / tube.1 as f64 - bg.0 / bg.1 as f64).abs();
        assert!(
            contrast >= 3.0 * params.noise_std,
            "contrast {contrast} below 3 sigma"
        );
    }

    #[test]
    fn corpus_ids_are_stable() {
        let (dims, params) = side16();
        let corpus = generate_corpus(3, dims, &params, 0).unwrap();
        assert_eq!(corpus[0].0, "phantom-0000");
        assert_eq!(corpus[2].0, "phantom-0002");
        let again = generate_corpus(3, dims, &params, 0).unwrap();
        assert_eq!(corpus[1].1.data, again[1].1.data);
    }
}
