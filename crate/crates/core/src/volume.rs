//! Voxel patient volumes: intensity and label grids, nearest-neighbour
//! sampling, the on-disk header/raw format and body-mask extraction.
//!
//! Grids are stored x-fastest: `index = x + nx * (y + ny * z)`.
//! The physical position of voxel `(i, j, k)` is `origin + (i, j, k) * spacing`,
//! i.e. `origin` is the centre of the first voxel.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::morphology;

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 4095;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("size mismatch in {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("bad header {path}: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("invalid voxel data: {0}")]
    InvalidData(String),
    #[error("position ({x:.3}, {y:.3}, {z:.3}) mm is outside the volume")]
    OutOfBounds { x: f64, y: f64, z: f64 },
    #[error("body mask is empty after thresholding at {threshold} HU")]
    EmptyMask { threshold: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tissue classes known to the haptic model. The discriminants are the
/// on-disk label codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum TissueLabel {
    Air = 0,
    Skin = 1,
    FatSoft = 2,
    Bone = 3,
    Fascia = 4,
    Liver = 5,
    HepBlood = 6,
    HepBile = 7,
    Unlabeled = 255,
}

impl TissueLabel {
    /// Every label that has a row in the haptic table.
    pub const TISSUES: [TissueLabel; 8] = [
        TissueLabel::Air,
        TissueLabel::Skin,
        TissueLabel::FatSoft,
        TissueLabel::Bone,
        TissueLabel::Fascia,
        TissueLabel::Liver,
        TissueLabel::HepBlood,
        TissueLabel::HepBile,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => TissueLabel::Air,
            1 => TissueLabel::Skin,
            2 => TissueLabel::FatSoft,
            3 => TissueLabel::Bone,
            4 => TissueLabel::Fascia,
            5 => TissueLabel::Liver,
            6 => TissueLabel::HepBlood,
            7 => TissueLabel::HepBile,
            255 => TissueLabel::Unlabeled,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueLabel::Air => "air",
            TissueLabel::Skin => "skin",
            TissueLabel::FatSoft => "fat_soft",
            TissueLabel::Bone => "bone",
            TissueLabel::Fascia => "fascia",
            TissueLabel::Liver => "liver",
            TissueLabel::HepBlood => "hep_blood",
            TissueLabel::HepBile => "hep_bile",
            TissueLabel::Unlabeled => "unlabeled",
        }
    }

    pub fn is_labeled(self) -> bool {
        self != TissueLabel::Unlabeled
    }
}

impl std::fmt::Display for TissueLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Grid shape and physical placement shared by all per-voxel arrays of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Self {
        Geometry {
            dims,
            spacing,
            origin,
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn in_grid(&self, c: [i64; 3]) -> bool {
        (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < self.dims[a])
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Physical position of a voxel centre, in mm.
    pub fn center(&self, c: [usize; 3]) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + c[0] as f64 * self.spacing[0],
            self.origin[1] + c[1] as f64 * self.spacing[1],
            self.origin[2] + c[2] as f64 * self.spacing[2],
        )
    }

    /// Continuous index coordinates of a physical position (voxel centres at integers).
    pub fn continuous_index(&self, pos: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            (pos.x - self.origin[0]) / self.spacing[0],
            (pos.y - self.origin[1]) / self.spacing[1],
            (pos.z - self.origin[2]) / self.spacing[2],
        )
    }

    /// Nearest voxel to `pos`. Exact midpoints between two centres resolve to
    /// the lower index, so voxel `i` owns the half-open interval `(i - 1/2, i + 1/2]`.
    pub fn nearest_voxel(&self, pos: &Vector3<f64>) -> Result<[usize; 3], VolumeError> {
        let c = self.continuous_index(pos);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = round_half_down(c[a]);
            if !r.is_finite() || r < 0.0 || r >= self.dims[a] as f64 {
                return Err(VolumeError::OutOfBounds {
                    x: pos.x,
                    y: pos.y,
                    z: pos.z,
                });
            }
            out[a] = r as usize;
        }
        Ok(out)
    }

    pub fn nearest_index(&self, pos: &Vector3<f64>) -> Result<usize, VolumeError> {
        let [i, j, k] = self.nearest_voxel(pos)?;
        Ok(self.index(i, j, k))
    }

    pub fn contains(&self, pos: &Vector3<f64>) -> bool {
        self.nearest_voxel(pos).is_ok()
    }

    /// In-grid 6-neighbours of a voxel.
    pub fn neighbors6(&self, c: [usize; 3]) -> impl Iterator<Item = [usize; 3]> + '_ {
        const OFFS: [[i64; 3]; 6] = [
            [-1, 0, 0],
            [1, 0, 0],
            [0, -1, 0],
            [0, 1, 0],
            [0, 0, -1],
            [0, 0, 1],
        ];
        OFFS.iter().filter_map(move |o| {
            let n = [c[0] as i64 + o[0], c[1] as i64 + o[1], c[2] as i64 + o[2]];
            self.in_grid(n)
                .then(|| [n[0] as usize, n[1] as usize, n[2] as usize])
        })
    }

    /// True when the voxel touches the grid border.
    pub fn on_border(&self, c: [usize; 3]) -> bool {
        (0..3).any(|a| c[a] == 0 || c[a] + 1 == self.dims[a])
    }

    fn validate(&self) -> Result<(), String> {
        if self.dims.contains(&0) {
            return Err("dims must be positive".into());
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s <= 10.0)) {
            return Err(format!("spacing {:?} outside (0, 10] mm", self.spacing));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err("origin must be finite".into());
        }
        Ok(())
    }
}

/// Round to nearest integer; ties go to the lower integer.
#[inline]
pub fn round_half_down(x: f64) -> f64 {
    (x - 0.5).ceil()
}

/// An undeformed patient: HU intensities and tissue labels on a regular grid.
/// Immutable once built; share it behind an `Arc` for concurrent readers.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume {
    pub geometry: Geometry,
    pub intensities: Vec<i16>,
    pub labels: Vec<TissueLabel>,
}

impl VoxelVolume {
    pub fn new(
        geometry: Geometry,
        intensities: Vec<i16>,
        labels: Vec<TissueLabel>,
    ) -> Result<Self, VolumeError> {
        geometry.validate().map_err(VolumeError::InvalidData)?;
        let n = geometry.len();
        if intensities.len() != n || labels.len() != n {
            return Err(VolumeError::InvalidData(format!(
                "grid has {n} voxels but got {} intensities and {} labels",
                intensities.len(),
                labels.len()
            )));
        }
        if let Some(hu) = intensities.iter().find(|&&v| !(HU_MIN..=HU_MAX).contains(&v)) {
            return Err(VolumeError::InvalidData(format!(
                "HU value {hu} outside [{HU_MIN}, {HU_MAX}]"
            )));
        }
        Ok(VoxelVolume {
            geometry,
            intensities,
            labels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    /// Same intensities, different label grid.
    pub fn with_labels(&self, labels: Vec<TissueLabel>) -> Result<Self, VolumeError> {
        VoxelVolume::new(self.geometry, self.intensities.clone(), labels)
    }

    pub fn sample_label(&self, pos: &Vector3<f64>) -> Result<TissueLabel, VolumeError> {
        Ok(self.labels[self.geometry.nearest_index(pos)?])
    }

    pub fn sample_intensity(&self, pos: &Vector3<f64>) -> Result<f64, VolumeError> {
        Ok(self.intensities[self.geometry.nearest_index(pos)?] as f64)
    }

    pub fn label_at(&self, c: [usize; 3]) -> TissueLabel {
        self.labels[self.geometry.index(c[0], c[1], c[2])]
    }

    pub fn count_label(&self, label: TissueLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Reads a JSON header and the raw files it references.
    pub fn load(header_path: impl AsRef<Path>) -> Result<Self, VolumeError> {
        let header_path = header_path.as_ref();
        let text = fs::read_to_string(header_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => VolumeError::MissingFile(header_path.to_path_buf()),
            _ => VolumeError::Io(e),
        })?;
        let header: VolumeHeader =
            serde_json::from_str(&text).map_err(|e| VolumeError::BadHeader {
                path: header_path.to_path_buf(),
                reason: e.to_string(),
            })?;
        let geometry = Geometry::new(header.dims, header.spacing, header.origin);
        geometry.validate().map_err(|reason| VolumeError::BadHeader {
            path: header_path.to_path_buf(),
            reason,
        })?;
        let base = header_path.parent().unwrap_or_else(|| Path::new("."));
        let n = geometry.len();

        let ipath = base.join(&header.intensity_file);
        let raw = read_raw(&ipath, n * 2)?;
        let intensities: Vec<i16> = raw
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();

        let labels = match &header.label_file {
            Some(name) => {
                let lpath = base.join(name);
                let raw = read_raw(&lpath, n)?;
                raw.iter()
                    .map(|&c| {
                        TissueLabel::from_code(c).ok_or_else(|| {
                            VolumeError::InvalidData(format!("unknown label code {c} in {}", lpath.display()))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?
            }
            None => vec![TissueLabel::Unlabeled; n],
        };
        VoxelVolume::new(geometry, intensities, labels)
    }

    /// Writes `<stem>.json`, `<stem>.i16` and `<stem>.u8` next to each other.
    /// Returns the header path.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf, VolumeError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let header = VolumeHeader {
            dims: self.geometry.dims,
            spacing: self.geometry.spacing,
            origin: self.geometry.origin,
            intensity_file: format!("{stem}.i16"),
            label_file: Some(format!("{stem}.u8")),
        };
        let mut raw = Vec::with_capacity(self.intensities.len() * 2);
        for v in &self.intensities {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&header.intensity_file), raw)?;
        let codes: Vec<u8> = self.labels.iter().map(|l| l.code()).collect();
        fs::write(dir.join(header.label_file.as_ref().unwrap()), codes)?;
        let path = dir.join(format!("{stem}.json"));
        fs::write(
            &path,
            serde_json::to_string_pretty(&header).expect("header serializes"),
        )?;
        Ok(path)
    }
}

fn read_raw(path: &Path, expected: usize) -> Result<Vec<u8>, VolumeError> {
    let raw = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => VolumeError::MissingFile(path.to_path_buf()),
        _ => VolumeError::Io(e),
    })?;
    if raw.len() != expected {
        return Err(VolumeError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: raw.len(),
        });
    }
    Ok(raw)
}

/// On-disk volume header. Intensities are little-endian `i16`, labels are `u8` codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub intensity_file: String,
    #[serde(default)]
    pub label_file: Option<String>,
}

/// The patient's body box: one 26-connected component with enclosed holes filled.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyMask {
    pub geometry: Geometry,
    pub mask: Vec<bool>,
    pub voxel_count: usize,
}

impl BodyMask {
    pub fn from_mask(geometry: Geometry, mask: Vec<bool>) -> Self {
        let voxel_count = mask.iter().filter(|&&m| m).count();
        BodyMask {
            geometry,
            mask,
            voxel_count,
        }
    }

    /// Body mask derived from labels: every non-air voxel, holes filled.
    pub fn from_labels(volume: &VoxelVolume) -> Self {
        let fg: Vec<bool> = volume
            .labels
            .iter()
            .map(|&l| l != TissueLabel::Air && l != TissueLabel::Unlabeled)
            .collect();
        let filled = morphology::fill_holes(&fg, &volume.geometry);
        BodyMask::from_mask(volume.geometry, filled)
    }

    #[inline]
    pub fn contains_index(&self, index: usize) -> bool {
        self.mask[index]
    }

    pub fn contains(&self, pos: &Vector3<f64>) -> bool {
        self.geometry
            .nearest_index(pos)
            .map(|i| self.mask[i])
            .unwrap_or(false)
    }
}

/// Removes non-body objects: threshold, one 6-neighbourhood opening, keep the
/// largest 26-connected component, fill enclosed holes.
pub fn extract_body_mask(v: &VoxelVolume, air_threshold: f64) -> Result<BodyMask, VolumeError> {
    let g = &v.geometry;
    let fg: Vec<bool> = v
        .intensities
        .iter()
        .map(|&hu| hu as f64 > air_threshold)
        .collect();
    if !fg.iter().any(|&b| b) {
        return Err(VolumeError::EmptyMask {
            threshold: air_threshold,
        });
    }
    let opened = morphology::dilate6(&morphology::erode6(&fg, g), g);
    let largest = morphology::largest_component26(&opened, g).ok_or(VolumeError::EmptyMask {
        threshold: air_threshold,
    })?;
    let filled = morphology::fill_holes(&largest, g);
    Ok(BodyMask::from_mask(*g, filled))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dims: [usize; 3]) -> VoxelVolume {
        let g = Geometry::new(dims, [1.0; 3], [0.0; 3]);
        let n = g.len();
        let intensities = (0..n).map(|i| (i as i16) * 10 - 1000).collect();
        let labels = (0..n)
            .map(|i| TissueLabel::from_code((i % 8) as u8).unwrap())
            .collect();
        VoxelVolume::new(g, intensities, labels).unwrap()
    }

    #[test]
    fn load_two_cubed_volume() {
        let dir = tempfile::tempdir().unwrap();
        let header = r#"{"dims":[2,2,2],"spacing":[1,1,1],"origin":[0,0,0],"intensity_file":"a.i16"}"#;
        std::fs::write(dir.path().join("h.json"), header).unwrap();
        std::fs::write(dir.path().join("a.i16"), vec![0u8; 16]).unwrap();
        let v = VoxelVolume::load(dir.path().join("h.json")).unwrap();
        assert_eq!(v.intensities.len(), 8);
        assert!(v.labels.iter().all(|&l| l == TissueLabel::Unlabeled));
    }

    #[test]
    fn short_raw_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let header = r#"{"dims":[2,2,2],"spacing":[1,1,1],"origin":[0,0,0],"intensity_file":"a.i16"}"#;
        std::fs::write(dir.path().join("h.json"), header).unwrap();
        std::fs::write(dir.path().join("a.i16"), vec![0u8; 15]).unwrap();
        match VoxelVolume::load(dir.path().join("h.json")) {
            Err(VolumeError::SizeMismatch { expected, found, .. }) => {
                assert_eq!((expected, found), (16, 15))
            }
            other => panic!("expected SizeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_and_bad_headers() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            VoxelVolume::load(dir.path().join("nope.json")),
            Err(VolumeError::MissingFile(_))
        ));
        std::fs::write(dir.path().join("h.json"), "{\"dims\": 3}").unwrap();
        assert!(matches!(
            VoxelVolume::load(dir.path().join("h.json")),
            Err(VolumeError::BadHeader { .. })
        ));
        let header = r#"{"dims":[2,2,2],"spacing":[1,1,1],"origin":[0,0,0],"intensity_file":"gone.i16"}"#;
        std::fs::write(dir.path().join("h2.json"), header).unwrap();
        assert!(matches!(
            VoxelVolume::load(dir.path().join("h2.json")),
            Err(VolumeError::MissingFile(_))
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let v = tiny([3, 4, 5]);
        let dir = tempfile::tempdir().unwrap();
        let h = v.save(dir.path(), "vol").unwrap();
        let back = VoxelVolume::load(&h).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn nearest_sampling_tie_goes_to_lower_index() {
        let v = tiny([4, 1, 1]);
        let at = |x: f64| v.sample_label(&Vector3::new(x, 0.0, 0.0)).unwrap();
        assert_eq!(at(1.0), v.labels[1]);
        assert_eq!(at(1.5), v.labels[1]);
        assert_eq!(at(1.5000001), v.labels[2]);
        assert_eq!(at(-0.4999), v.labels[0]);
        assert!(matches!(
            v.sample_label(&Vector3::new(-0.5, 0.0, 0.0)),
            Err(VolumeError::OutOfBounds { .. })
        ));
        assert!(v.sample_label(&Vector3::new(3.5, 0.0, 0.0)).is_ok());
        assert!(v.sample_label(&Vector3::new(3.51, 0.0, 0.0)).is_err());
    }

    #[test]
    fn intensity_sampling() {
        let g = Geometry::new([3, 3, 3], [0.8, 0.8, 1.0], [10.0, 0.0, -5.0]);
        let mut hu = vec![40i16; 27];
        hu[0] = -1000;
        let v = VoxelVolume::new(g, hu, vec![TissueLabel::Unlabeled; 27]).unwrap();
        assert_eq!(v.sample_intensity(&Vector3::new(10.0, 0.0, -5.0)).unwrap(), -1000.0);
        let p = Vector3::new(11.3, 0.9, -3.7);
        assert_eq!(v.sample_intensity(&p).unwrap(), 40.0);
        assert_eq!(v.sample_intensity(&p).unwrap(), v.sample_intensity(&p).unwrap());
    }

    #[test]
    fn rejects_out_of_range_hu() {
        let g = Geometry::new([1, 1, 1], [1.0; 3], [0.0; 3]);
        assert!(VoxelVolume::new(g, vec![-2000], vec![TissueLabel::Air]).is_err());
    }

    fn cube_volume() -> VoxelVolume {
        // 10^3 body cube, a disjoint 3^3 cable blob, a 2^3 enclosed air pocket
        let g = Geometry::new([24, 24, 24], [1.0; 3], [0.0; 3]);
        let mut hu = vec![-1000i16; g.len()];
        for k in 2..12 {
            for j in 2..12 {
                for i in 2..12 {
                    hu[g.index(i, j, k)] = 40;
                }
            }
        }
        for k in 5..7 {
            for j in 5..7 {
                for i in 5..7 {
                    hu[g.index(i, j, k)] = -1000;
                }
            }
        }
        for k in 17..20 {
            for j in 17..20 {
                for i in 17..20 {
                    hu[g.index(i, j, k)] = 200;
                }
            }
        }
        let n = g.len();
        VoxelVolume::new(g, hu, vec![TissueLabel::Unlabeled; n]).unwrap()
    }

    #[test]
    fn body_mask_keeps_largest_component_and_fills_pocket() {
        let v = cube_volume();
        let g = v.geometry;
        let m = extract_body_mask(&v, -500.0).unwrap();
        // flood-fill oracle from the border through sub-threshold voxels
        let mut outside = vec![false; g.len()];
        let mut stack: Vec<[usize; 3]> = Vec::new();
        for idx in 0..g.len() {
            let c = g.coords(idx);
            if g.on_border(c) && v.intensities[idx] <= -500 {
                outside[idx] = true;
                stack.push(c);
            }
        }
        while let Some(c) = stack.pop() {
            for n in g.neighbors6(c) {
                let ni = g.index(n[0], n[1], n[2]);
                if !outside[ni] && v.intensities[ni] <= -500 {
                    outside[ni] = true;
                    stack.push(n);
                }
            }
        }
        for k in 0..24 {
            for j in 0..24 {
                for i in 0..24 {
                    let idx = g.index(i, j, k);
                    let in_cube = (2..12).contains(&i) && (2..12).contains(&j) && (2..12).contains(&k);
                    // opening with a cross trims the box's convex edges
                    let faces = [i, j, k].iter().filter(|&&c| c == 2 || c == 11).count();
                    if m.mask[idx] {
                        assert!(in_cube, "voxel {i},{j},{k} outside the cube");
                    }
                    if in_cube && faces < 2 {
                        assert!(m.mask[idx], "voxel {i},{j},{k} missing");
                        assert!(!outside[idx]);
                    }
                }
            }
        }
        assert!(m.voxel_count > 850 && m.voxel_count <= 1000);
        // the pocket voxels are inside the filled mask but not reachable from outside
        assert!(m.mask[g.index(5, 5, 5)] && v.intensities[g.index(5, 5, 5)] == -1000);
    }

    #[test]
    fn uniform_air_is_empty_mask() {
        let g = Geometry::new([4, 4, 4], [1.0; 3], [0.0; 3]);
        let v = VoxelVolume::new(g, vec![-1000; 64], vec![TissueLabel::Air; 64]).unwrap();
        assert!(matches!(
            extract_body_mask(&v, -500.0),
            Err(VolumeError::EmptyMask { .. })
        ));
    }

    #[test]
    fn body_mask_idempotent_under_remasking() {
        let v = cube_volume();
        let m = extract_body_mask(&v, -500.0).unwrap();
        let masked: Vec<i16> = v
            .intensities
            .iter()
            .zip(&m.mask)
            .map(|(&hu, &inside)| if inside { hu } else { HU_MIN })
            .collect();
        let v2 = VoxelVolume::new(v.geometry, masked, v.labels.clone()).unwrap();
        assert_eq!(extract_body_mask(&v2, -500.0).unwrap(), m);
    }
}
