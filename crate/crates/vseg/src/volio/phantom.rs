//! Synthetic subjects: concentric ellipsoid shells with the nesting the
//! label schema expects (enhancing core innermost, then necrotic shell, then
//! edema outermost), rendered into a 4-channel volume with per-label mean
//! intensities plus seeded Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabelMap, VolError, Volume};

/// Per-channel mean intensity by class index (background, necrotic core,
/// edema, enhancing). Every channel separates all four classes, with
/// different orderings across channels.
const CLASS_MEANS: [[f64; 4]; 4] = [
    [1.0, 3.0, 2.0, 4.0],
    [1.0, 4.0, 3.0, 2.0],
    [1.0, 2.0, 4.0, 3.0],
    [1.0, 2.5, 3.5, 4.5],
];

const CHANNEL_NAMES: [&str; 4] = ["T1", "T2", "FLAIR", "T1ce"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Grid extents (x, y, z); each must be at least 8.
    pub grid_size: [usize; 3],
    /// Ellipsoid center in voxel coordinates.
    pub center: [f64; 3],
    /// Shell radii in voxels, strictly decreasing: whole tumor, tumor core,
    /// enhancing core.
    pub radii: [f64; 3],
    /// Standard deviation of the additive Gaussian intensity noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), VolError> {
        if self.grid_size.iter().any(|&g| g < 8) {
            return Err(VolError::Spec(format!(
                "grid_size components must be at least 8, got {:?}",
                self.grid_size
            )));
        }
        let [r_wt, r_tc, r_et] = self.radii;
        if !(r_wt > r_tc && r_tc > r_et && r_et > 0.0) {
            return Err(VolError::Spec(format!(
                "radii must be strictly decreasing and positive, got {:?}",
                self.radii
            )));
        }
        if !self.radii.iter().all(|r| r.is_finite())
            || !self.center.iter().all(|c| c.is_finite())
        {
            return Err(VolError::Spec("center and radii must be finite".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(VolError::Spec(format!(
                "noise_sigma must be a finite non-negative value, got {}",
                self.noise_sigma
            )));
        }
        for a in 0..3 {
            let lo = self.center[a] - r_wt;
            let hi = self.center[a] + r_wt;
            if lo < 0.0 || hi > (self.grid_size[a] - 1) as f64 {
                return Err(VolError::Spec(format!(
                    "outer radius {r_wt} around center {:?} leaves grid {:?} on axis {a}",
                    self.center, self.grid_size
                )));
            }
        }
        Ok(())
    }
}

/// Renders the phantom. Deterministic: a given spec always produces the
/// same volume and label map.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMap), VolError> {
    spec.validate()?;
    let [gx, gy, gz] = spec.grid_size;
    let n = gx * gy * gz;

    let mut labels = vec![0u8; n];
    let r2 = [
        spec.radii[0] * spec.radii[0],
        spec.radii[1] * spec.radii[1],
        spec.radii[2] * spec.radii[2],
    ];
    let mut idx = 0usize;
    for z in 0..gz {
        for y in 0..gy {
            for x in 0..gx {
                let dx = x as f64 - spec.center[0];
                let dy = y as f64 - spec.center[1];
                let dz = z as f64 - spec.center[2];
                let d2 = dx * dx + dy * dy + dz * dz;
                labels[idx] = if d2 <= r2[2] {
                    4
                } else if d2 <= r2[1] {
                    1
                } else if d2 <= r2[0] {
                    2
                } else {
                    0
                };
                idx += 1;
            }
        }
    }
    let map = LabelMap::new(spec.grid_size, [1.0; 3], labels)?;

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(4 * n);
    for means in &CLASS_MEANS {
        for &label in map.data() {
            let class = super::class_index(label).expect("label map is valid");
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push((means[class] + spec.noise_sigma * noise) as f32);
        }
    }
    let volume = Volume::new(
        4,
        spec.grid_size,
        [1.0; 3],
        CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        data,
    )?;
    Ok((volume, map))
}
