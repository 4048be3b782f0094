//! Synthetic scans: smooth background with a few bright ellipsoidal lesions.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pipeline::{MaskVolume, Volume};

/// Target voxels per lesion; the lesion count is derived from it.
const VOXELS_PER_LESION: f64 = 64.0;
const MAX_LESIONS: usize = 6;
const LESION_CONTRAST: f32 = 0.6;
/// Accepted relative deviation of the realized positive count.
const TOLERANCE: f64 = 0.25;

struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.centre[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn bounds(&self, extents: [usize; 3]) -> [(usize, usize); 3] {
        std::array::from_fn(|a| {
            let lo = (self.centre[a] - self.radii[a]).floor().max(0.0) as usize;
            let hi = ((self.centre[a] + self.radii[a]).ceil() as usize).min(extents[a] - 1);
            (lo, hi)
        })
    }

    fn voxels(&self, extents: [usize; 3]) -> Vec<[usize; 3]> {
        let [(z0, z1), (y0, y1), (x0, x1)] = self.bounds(extents);
        let mut out = Vec::new();
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if self.contains([z, y, x]) {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

/// `count` deterministic scan/mask pairs with about `lesion_ratio` positive voxels
/// each (within ±25%).
pub fn gen_synthetic(seed: u64, count: usize, extents: [usize; 3], lesion_ratio: f64) -> Result<Vec<(Volume, MaskVolume)>> {
    if !(lesion_ratio > 0.0 && lesion_ratio < 1.0) {
        return Err(Error::Contract(format!("lesion ratio {lesion_ratio} must lie in (0, 1)")));
    }
    let total: usize = extents.iter().product();
    let target = lesion_ratio * total as f64;
    if target < 1.0 || lesion_ratio > 0.25 || extents.iter().any(|&e| e < 3) {
        return Err(Error::Contract(format!(
            "lesion ratio {lesion_ratio} is infeasible for extents {extents:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| one_scan(&mut rng, extents, target)).collect()
}

fn one_scan(rng: &mut ChaCha8Rng, extents: [usize; 3], target: f64) -> Result<(Volume, MaskVolume)> {
    let [d, h, w] = extents;
    // Low-frequency background: a few random separable cosine modes.
    let modes: Vec<([f64; 3], [f64; 3], f64)> = (0..4)
        .map(|_| {
            let freq = [rng.gen_range(0.0..1.5), rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)];
            let phase = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
            (freq, phase, rng.gen_range(0.03..0.08))
        })
        .collect();
    let noise: Vec<f32> = (0..d * h * w).map(|_| rng.gen_range(-0.02..0.02)).collect();
    let mut scan = Volume::from_fn(extents, |z, y, x| {
        let coords = [z as f64 / d as f64, y as f64 / h as f64, x as f64 / w as f64];
        let smooth: f64 = modes
            .iter()
            .map(|(f, p, a)| a * (0..3).map(|i| (2.0 * PI * f[i] * coords[i] + p[i]).cos()).product::<f64>())
            .sum();
        (0.3 + smooth) as f32 + noise[(z * h + y) * w + x]
    })
    .data()
    .to_vec();

    let mut mask = vec![0u8; d * h * w];
    let lesions = ((target / VOXELS_PER_LESION).round() as usize).clamp(1, MAX_LESIONS);
    let share = target / lesions as f64;
    let mut placed = 0usize;
    for _ in 0..lesions {
        let aspect: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.8..1.25));
        let mut scale = (share * 3.0 / (4.0 * PI * aspect.iter().product::<f64>())).cbrt();
        let mut found = None;
        for _ in 0..64 {
            let radii: [f64; 3] = std::array::from_fn(|a| scale * aspect[a]);
            if (0..3).any(|a| 2.0 * radii[a] + 1.0 > extents[a] as f64) {
                scale *= 0.9;
                continue;
            }
            let centre = std::array::from_fn(|a| rng.gen_range(radii[a]..=(extents[a] as f64 - 1.0 - radii[a])));
            let e = Ellipsoid { centre, radii };
            let voxels = e.voxels(extents);
            let n = voxels.len() as f64;
            if n == 0.0 || (n - share).abs() > 0.1 * share {
                // Re-fit the size to the realized count and try again.
                scale *= (share / n.max(1.0)).cbrt().clamp(0.7, 1.4);
                continue;
            }
            if voxels.iter().any(|&[z, y, x]| mask[(z * h + y) * w + x] == 1) {
                continue;
            }
            found = Some(voxels);
            break;
        }
        if let Some(voxels) = found {
            for [z, y, x] in voxels {
                let i = (z * h + y) * w + x;
                mask[i] = 1;
                scan[i] += LESION_CONTRAST;
                placed += 1;
            }
        }
    }
    if (placed as f64 - target).abs() > TOLERANCE * target {
        return Err(Error::Contract(format!(
            "could not place lesions of about {target:.0} voxels in extents {extents:?}"
        )));
    }
    Ok((Volume::new(extents, scan)?, MaskVolume::new(extents, mask)?))
}
