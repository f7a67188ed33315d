//! Volumes, label maps, regions, and their file formats.
//!
//! A [`Volume`] is a multi-channel 3D float grid with voxel spacing in mm; a
//! [`LabelMap`] is a 3D grid over the label set {0, 1, 2, 4}. Evaluation
//! works on three nested regions derived from labels:
//!
//! * enhancing tumor `ET = {4}`
//! * tumor core     `TC = {1, 4}`
//! * whole tumor    `WT = {1, 2, 4}`
//!
//! so `ET ⊆ TC ⊆ WT` holds as voxel sets on any map.
//!
//! Buffers are channel-major with x fastest within each channel, matching
//! the on-disk payload order exactly.

mod format;
mod phantom;

pub use format::{read_labelmap, read_volume, write_labelmap, write_volume};
pub use phantom::{generate_phantom, PhantomSpec};

use std::fmt;

/// On-disk label values, in ascending order. Class indices for training are
/// positions in this array: 0 -> 0, 1 -> 1, 2 -> 2, 4 -> 3.
pub const LABELS: [u8; 4] = [0, 1, 2, 4];

/// Contiguous class index of a label value.
pub fn class_index(label: u8) -> Option<usize> {
    LABELS.iter().position(|&l| l == label)
}

/// Label value of a contiguous class index.
pub fn label_of_class(class: usize) -> Option<u8> {
    LABELS.get(class).copied()
}

#[derive(Debug)]
pub enum VolError {
    Io(std::io::Error),
    /// The bytes are not a volume file at all (bad magic, bad dtype...).
    Format(String),
    /// The file started out right but ends early or inconsistently.
    Corrupt(String),
    /// Values violate a domain invariant (non-finite, bad label, ...).
    Validation(String),
    /// A channel cannot be standardized (all zero or constant).
    DegenerateChannel(String),
    /// A phantom spec is self-inconsistent or does not fit its grid.
    Spec(String),
}

impl fmt::Display for VolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolError::Io(e) => write!(f, "i/o error: {e}"),
            VolError::Format(m) => write!(f, "format error: {m}"),
            VolError::Corrupt(m) => write!(f, "corrupt file: {m}"),
            VolError::Validation(m) => write!(f, "validation error: {m}"),
            VolError::DegenerateChannel(m) => write!(f, "degenerate channel: {m}"),
            VolError::Spec(m) => write!(f, "phantom spec error: {m}"),
        }
    }
}

impl std::error::Error for VolError {}

impl From<std::io::Error> for VolError {
    fn from(e: std::io::Error) -> Self {
        VolError::Io(e)
    }
}

/// Multi-channel 3D float grid with voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    channels: usize,
    dims: [usize; 3],
    spacing: [f32; 3],
    channel_names: Vec<String>,
    data: Vec<f32>,
}

impl Volume {
    /// Validates all invariants: positive extents and spacing, at least one
    /// channel, one name per channel, finite values, matching buffer length.
    pub fn new(
        channels: usize,
        dims: [usize; 3],
        spacing: [f32; 3],
        channel_names: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self, VolError> {
        if channels == 0 {
            return Err(VolError::Validation("volume needs at least one channel".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(VolError::Validation(format!(
                "volume extents must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolError::Validation(format!(
                "spacing components must be positive and finite, got {spacing:?}"
            )));
        }
        if channel_names.len() != channels {
            return Err(VolError::Validation(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                channels
            )));
        }
        let expected = channels * dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(VolError::Validation(format!(
                "buffer holds {} values, dims need {expected}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(VolError::Validation("volume contains non-finite values".into()));
        }
        Ok(Volume {
            channels,
            dims,
            spacing,
            channel_names,
            data,
        })
    }

    /// Default channel names "ch0", "ch1", ...
    pub fn default_channel_names(channels: usize) -> Vec<String> {
        (0..channels).map(|i| format!("ch{i}")).collect()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Spatial extents (x, y, z).
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn spacing_f64(&self) -> [f64; 3] {
        [
            self.spacing[0] as f64,
            self.spacing[1] as f64,
            self.spacing[2] as f64,
        ]
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn voxels_per_channel(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// One channel's values, x fastest.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels_per_channel();
        &self.data[c * n..(c + 1) * n]
    }

    /// Flat offset of (c, x, y, z).
    pub fn offset(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        let [dx, dy, _] = self.dims;
        ((c * self.dims[2] + z) * dy + y) * dx + x
    }

    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.offset(c, x, y, z)]
    }
}

/// 3D categorical grid over the label set {0, 1, 2, 4}, with the voxel
/// spacing carried along for surface-distance metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<u8>) -> Result<Self, VolError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolError::Validation(format!(
                "label map extents must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolError::Validation(format!(
                "spacing components must be positive and finite, got {spacing:?}"
            )));
        }
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(VolError::Validation(format!(
                "buffer holds {} values, dims {dims:?} need {}",
                data.len(),
                dims[0] * dims[1] * dims[2]
            )));
        }
        if let Some(bad) = data.iter().find(|v| class_index(**v).is_none()) {
            return Err(VolError::Validation(format!(
                "label value {bad} outside the label set {LABELS:?}"
            )));
        }
        Ok(LabelMap {
            dims,
            spacing,
            data,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn spacing_f64(&self) -> [f64; 3] {
        [
            self.spacing[0] as f64,
            self.spacing[1] as f64,
            self.spacing[2] as f64,
        ]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    /// Flat offset of (x, y, z), x fastest.
    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.offset(x, y, z)]
    }

    /// Voxel count per label value, keyed by class index.
    pub fn label_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for &v in &self.data {
            counts[class_index(v).expect("validated at construction")] += 1;
        }
        counts
    }
}

/// Binary 3D mask, same layout as a [`LabelMap`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self, VolError> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(VolError::Validation(format!(
                "mask buffer holds {} values, dims {dims:?} need {}",
                data.len(),
                dims[0] * dims[1] * dims[2]
            )));
        }
        Ok(Mask { dims, data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[(z * self.dims[1] + y) * self.dims[0] + x]
    }
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "UPPERCASE")]
pub enum RegionName {
    Et,
    Tc,
    Wt,
}

impl fmt::Display for RegionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionName::Et => write!(f, "ET"),
            RegionName::Tc => write!(f, "TC"),
            RegionName::Wt => write!(f, "WT"),
        }
    }
}

/// A named subset of labels evaluated as one structure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub name: RegionName,
    pub member_labels: Vec<u8>,
}

impl Region {
    pub fn et() -> Region {
        Region {
            name: RegionName::Et,
            member_labels: vec![4],
        }
    }

    pub fn tc() -> Region {
        Region {
            name: RegionName::Tc,
            member_labels: vec![1, 4],
        }
    }

    pub fn wt() -> Region {
        Region {
            name: RegionName::Wt,
            member_labels: vec![1, 2, 4],
        }
    }

    /// The three evaluation regions, smallest first.
    pub fn all() -> [Region; 3] {
        [Region::et(), Region::tc(), Region::wt()]
    }
}

/// Mask of voxels whose label belongs to the region.
pub fn extract_region(map: &LabelMap, region: &Region) -> Mask {
    let data = map
        .data()
        .iter()
        .map(|v| region.member_labels.contains(v))
        .collect();
    Mask {
        dims: map.dims(),
        data,
    }
}

/// Z-scores each channel over its nonzero voxels; zero voxels stay zero.
///
/// Mean and standard deviation (population form) are accumulated in f64;
/// after the transform the nonzero voxels of each channel have mean 0 and
/// standard deviation 1 up to f32 rounding.
pub fn standardize_intensity(v: &Volume) -> Result<Volume, VolError> {
    let n = v.voxels_per_channel();
    let mut out = Vec::with_capacity(v.data().len());
    for c in 0..v.channels() {
        let ch = v.channel(c);
        let nonzero: Vec<f64> = ch.iter().filter(|x| **x != 0.0).map(|x| *x as f64).collect();
        if nonzero.len() < 2 {
            return Err(VolError::DegenerateChannel(format!(
                "channel {c} has {} nonzero voxels, need at least 2",
                nonzero.len()
            )));
        }
        let mean = nonzero.iter().sum::<f64>() / nonzero.len() as f64;
        let var = nonzero.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nonzero.len() as f64;
        if var == 0.0 {
            return Err(VolError::DegenerateChannel(format!(
                "channel {c} is constant over its nonzero voxels"
            )));
        }
        let inv_std = 1.0 / var.sqrt();
        out.extend(ch.iter().map(|&x| {
            if x == 0.0 {
                0.0
            } else {
                ((x as f64 - mean) * inv_std) as f32
            }
        }));
    }
    debug_assert_eq!(out.len(), v.channels() * n);
    Volume::new(
        v.channels(),
        v.dims(),
        v.spacing(),
        v.channel_names().to_vec(),
        out,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_map(values: Vec<u8>) -> LabelMap {
        let side = (values.len() as f64).cbrt().round() as usize;
        assert_eq!(side * side * side, values.len());
        LabelMap::new([side; 3], [1.0; 3], values).unwrap()
    }

    #[test]
    fn label_map_rejects_values_outside_label_set() {
        assert!(LabelMap::new([1, 1, 2], [1.0; 3], vec![0, 3]).is_err());
        assert!(LabelMap::new([1, 1, 2], [1.0; 3], vec![0, 4]).is_ok());
    }

    #[test]
    fn class_index_maps_labels_to_contiguous_indices() {
        assert_eq!(class_index(0), Some(0));
        assert_eq!(class_index(1), Some(1));
        assert_eq!(class_index(2), Some(2));
        assert_eq!(class_index(4), Some(3));
        assert_eq!(class_index(3), None);
        for c in 0..4 {
            assert_eq!(class_index(label_of_class(c).unwrap()), Some(c));
        }
    }

    #[test]
    fn ed_voxel_is_only_in_whole_tumor() {
        let m = tiny_map(vec![2]);
        assert!(!extract_region(&m, &Region::et()).at(0, 0, 0));
        assert!(!extract_region(&m, &Region::tc()).at(0, 0, 0));
        assert!(extract_region(&m, &Region::wt()).at(0, 0, 0));
    }

    #[test]
    fn et_voxel_is_in_all_regions() {
        let m = tiny_map(vec![4]);
        assert!(extract_region(&m, &Region::et()).at(0, 0, 0));
        assert!(extract_region(&m, &Region::tc()).at(0, 0, 0));
        assert!(extract_region(&m, &Region::wt()).at(0, 0, 0));
    }

    #[test]
    fn background_map_gives_empty_masks() {
        let m = tiny_map(vec![0; 8]);
        for r in Region::all() {
            assert!(extract_region(&m, &r).is_empty());
        }
    }

    #[test]
    fn standardize_two_distinct_values_gives_plus_minus_one() {
        // Nonzero values {2, 4}: mean 3, population stddev 1.
        let v = Volume::new(
            1,
            [2, 2, 1],
            [1.0; 3],
            vec!["ch0".into()],
            vec![2.0, 4.0, 0.0, 0.0],
        )
        .unwrap();
        let s = standardize_intensity(&v).unwrap();
        assert_eq!(s.data(), &[-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn standardize_is_idempotent_within_tolerance() {
        let vals: Vec<f32> = (0..64)
            .map(|i| if i % 5 == 0 { 0.0 } else { (i as f32 * 0.37).sin() * 9.0 + 20.0 })
            .collect();
        let v = Volume::new(1, [4, 4, 4], [1.0; 3], vec!["ch0".into()], vals).unwrap();
        let once = standardize_intensity(&v).unwrap();
        let twice = standardize_intensity(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn standardize_rejects_degenerate_channels() {
        let all_zero = Volume::new(1, [2, 2, 1], [1.0; 3], vec!["ch0".into()], vec![0.0; 4]).unwrap();
        assert!(matches!(
            standardize_intensity(&all_zero),
            Err(VolError::DegenerateChannel(_))
        ));
        let constant =
            Volume::new(1, [2, 2, 1], [1.0; 3], vec!["ch0".into()], vec![7.0; 4]).unwrap();
        assert!(matches!(
            standardize_intensity(&constant),
            Err(VolError::DegenerateChannel(_))
        ));
    }

    #[test]
    fn standardized_moments_are_zero_and_one() {
        let vals: Vec<f32> = (0..27).map(|i| i as f32 * 1.7 + 3.0).collect();
        let v = Volume::new(1, [3, 3, 3], [1.0; 3], vec!["ch0".into()], vals).unwrap();
        let s = standardize_intensity(&v).unwrap();
        let nz: Vec<f64> = s.data().iter().filter(|x| **x != 0.0).map(|x| *x as f64).collect();
        let mean = nz.iter().sum::<f64>() / nz.len() as f64;
        let var = nz.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nz.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    proptest! {
        // ET ⊆ TC ⊆ WT voxelwise on arbitrary label maps.
        #[test]
        fn region_masks_are_nested(values in proptest::collection::vec(
            prop_oneof![Just(0u8), Just(1u8), Just(2u8), Just(4u8)], 27)
        ) {
            let m = LabelMap::new([3, 3, 3], [1.0; 3], values).unwrap();
            let et = extract_region(&m, &Region::et());
            let tc = extract_region(&m, &Region::tc());
            let wt = extract_region(&m, &Region::wt());
            for i in 0..27 {
                prop_assert!(!et.data[i] || tc.data[i]);
                prop_assert!(!tc.data[i] || wt.data[i]);
            }
        }
    }
}
