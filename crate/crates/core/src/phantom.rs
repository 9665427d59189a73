//! Synthetic patient volumes with ground-truth labels and a seeded
//! segmentation-degradation operator.
//!
//! Geometry is given in mm in the physical frame of the grid (origin 0).
//! The body is an elliptic cylinder along z with flat caps; layer depths are
//! measured from the outside of the body with an exact distance transform.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::{edt, signed_distance};
use crate::tissue::{Classifier, HapticTable, LabelProvider};
use crate::volume::{BodyMask, Geometry, TissueLabel, VolumeError, VoxelVolume, HU_MAX, HU_MIN};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("bad phantom geometry: {0}")]
    BadGeometry(String),
    #[error("bad intensity model: {0}")]
    BadIntensity(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Tissue(#[from] crate::tissue::TissueError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    pub mean: f64,
    pub sd: f64,
}

/// Default HU models per tissue.
pub fn default_intensities() -> BTreeMap<TissueLabel, IntensityModel> {
    use TissueLabel::*;
    [
        (Air, -1000.0, 8.0),
        (Skin, -60.0, 30.0),
        (FatSoft, 20.0, 40.0),
        (Bone, 700.0, 150.0),
        (Fascia, 80.0, 30.0),
        (Liver, 60.0, 20.0),
        (HepBlood, 120.0, 25.0),
        (HepBile, 10.0, 15.0),
    ]
    .into_iter()
    .map(|(l, mean, sd)| (l, IntensityModel { mean, sd }))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    /// Axis position in the x-y plane, mm.
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    /// Half-open extent along z, mm.
    pub z_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RibSpec {
    pub count: usize,
    /// Tube radius, mm.
    pub radius: f64,
    /// Clear width between neighbouring ribs, mm.
    pub gap: f64,
    /// Depth of the rib axes below the lateral body surface, mm.
    pub depth: f64,
    /// z of the middle of the rib cage, mm.
    pub z_center: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidSpec {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Voxels shallower than this depth below the body surface are cut off.
    pub min_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeSpec {
    pub radius: f64,
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereSpec {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    pub intensities: BTreeMap<TissueLabel, IntensityModel>,
    pub body: BodySpec,
    pub skin_thickness: f64,
    /// Depth at which the fascia starts, mm.
    pub fascia_depth: f64,
    pub fascia_thickness: f64,
    pub ribs: RibSpec,
    /// Replace the ribs by a closed bone shell at the rib depth.
    #[serde(default)]
    pub bone_shell: bool,
    pub liver: EllipsoidSpec,
    pub vessels: Vec<TubeSpec>,
    pub bile: Vec<TubeSpec>,
    #[serde(default)]
    pub air_pocket: Option<SphereSpec>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [128, 112, 80],
            spacing: [1.0, 1.0, 1.0],
            seed: 7,
            intensities: default_intensities(),
            body: BodySpec {
                center: [64.0, 56.0],
                semi_axes: [56.0, 46.0],
                z_range: [6.0, 74.0],
            },
            skin_thickness: 2.0,
            fascia_depth: 8.0,
            fascia_thickness: 3.0,
            ribs: RibSpec {
                count: 3,
                radius: 3.0,
                gap: 16.0,
                depth: 14.5,
                z_center: 40.0,
            },
            bone_shell: false,
            liver: EllipsoidSpec {
                center: [88.0, 56.0, 40.0],
                semi_axes: [34.0, 34.0, 28.0],
                min_depth: 19.0,
            },
            vessels: vec![
                TubeSpec {
                    radius: 2.0,
                    points: vec![[66.0, 74.0, 24.0], [72.0, 70.0, 40.0], [68.0, 74.0, 56.0]],
                },
                TubeSpec {
                    radius: 1.5,
                    points: vec![[80.0, 34.0, 22.0], [84.0, 32.0, 58.0]],
                },
            ],
            bile: vec![
                TubeSpec {
                    radius: 2.5,
                    points: vec![[70.0, 52.0, 29.0], [84.0, 56.0, 29.0], [96.0, 58.0, 31.0]],
                },
                TubeSpec {
                    radius: 2.5,
                    points: vec![[70.0, 58.0, 51.0], [84.0, 55.0, 51.0], [96.0, 52.0, 49.0]],
                },
            ],
            air_pocket: Some(SphereSpec {
                center: [30.0, 56.0, 40.0],
                radius: 4.0,
            }),
        }
    }
}

impl PhantomSpec {
    /// The same phantom with the ribs replaced by a closed bone shell.
    pub fn bone_shell(mut self) -> Self {
        self.bone_shell = true;
        self
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.dims, self.spacing, [0.0; 3])
    }

    /// z positions of the rib axes.
    pub fn rib_centers(&self) -> Vec<f64> {
        let r = &self.ribs;
        let pitch = r.gap + 2.0 * r.radius;
        (0..r.count)
            .map(|i| r.z_center + (i as f64 - (r.count as f64 - 1.0) / 2.0) * pitch)
            .collect()
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::BadGeometry(m));
        if self.dims.contains(&0) {
            return bad("dims must be positive".into());
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s <= 10.0)) {
            return bad("spacing outside (0, 10] mm".into());
        }
        let ext: Vec<f64> = (0..3)
            .map(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
            .collect();
        let b = &self.body;
        if b.semi_axes.iter().any(|&s| !(s > 0.0))
            || b.center[0] - b.semi_axes[0] < 0.0
            || b.center[0] + b.semi_axes[0] > ext[0]
            || b.center[1] - b.semi_axes[1] < 0.0
            || b.center[1] + b.semi_axes[1] > ext[1]
            || !(b.z_range[0] >= 0.0 && b.z_range[0] < b.z_range[1] && b.z_range[1] <= ext[2] + 0.5)
        {
            return bad("body does not fit the grid".into());
        }
        if !(self.skin_thickness > 0.0
            && self.fascia_depth > self.skin_thickness
            && self.fascia_thickness > 0.0)
        {
            return bad("need 0 < skin thickness < fascia depth and positive fascia thickness".into());
        }
        if !self.bone_shell {
            if self.ribs.count < 2 {
                return bad("at least two ribs are needed to leave an intercostal gap".into());
            }
            if !(self.ribs.gap > 0.0) {
                return bad("rib gap must be positive".into());
            }
        }
        if !(self.ribs.radius > 0.0) {
            return bad("rib radius must be positive".into());
        }
        if self.liver.semi_axes.iter().any(|&s| !(s > 0.0)) {
            return bad("liver semi-axes must be positive".into());
        }
        for t in self.vessels.iter().chain(&self.bile) {
            if !(t.radius > 0.0) || t.points.is_empty() {
                return bad("tubes need a positive radius and at least one point".into());
            }
        }
        if self.bile.is_empty() {
            return bad("no bile tube".into());
        }
        for l in TissueLabel::TISSUES {
            match self.intensities.get(&l) {
                Some(m) if m.sd >= 0.0 && m.mean.is_finite() => {}
                _ => {
                    return Err(PhantomError::BadIntensity(format!(
                        "missing or invalid intensity model for {l}"
                    )))
                }
            }
        }
        Ok(())
    }
}

fn ellipse_inside(b: &BodySpec, p: &Vector3<f64>) -> bool {
    let u = (p.x - b.center[0]) / b.semi_axes[0];
    let v = (p.y - b.center[1]) / b.semi_axes[1];
    u * u + v * v <= 1.0
}

fn ellipsoid_inside(e: &EllipsoidSpec, p: &Vector3<f64>) -> bool {
    (0..3)
        .map(|a| {
            let u = (p[a] - e.center[a]) / e.semi_axes[a];
            u * u
        })
        .sum::<f64>()
        <= 1.0
}

fn segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

/// Indices of voxels within `radius` of the tube polyline.
fn tube_voxels(g: &Geometry, t: &TubeSpec) -> Vec<usize> {
    let pts: Vec<Vector3<f64>> = t.points.iter().map(|p| Vector3::from(*p)).collect();
    let segs: Vec<(Vector3<f64>, Vector3<f64>)> = if pts.len() == 1 {
        vec![(pts[0], pts[0])]
    } else {
        pts.windows(2).map(|w| (w[0], w[1])).collect()
    };
    let mut hit = vec![false; g.len()];
    let mut out = Vec::new();
    for (a, b) in &segs {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for ax in 0..3 {
            let mn = a[ax].min(b[ax]) - t.radius;
            let mx = a[ax].max(b[ax]) + t.radius;
            let s = g.spacing[ax];
            lo[ax] = ((mn / s).floor().max(0.0)) as usize;
            hi[ax] = ((mx / s).ceil().max(0.0) as usize).min(g.dims[ax] - 1);
        }
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    let idx = g.index(i, j, k);
                    if hit[idx] {
                        continue;
                    }
                    if segment_distance(&g.center([i, j, k]), a, b) <= t.radius {
                        hit[idx] = true;
                        out.push(idx);
                    }
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Rasterizes the spec into ground-truth labels.
pub fn rasterize(spec: &PhantomSpec) -> Result<Vec<TissueLabel>, PhantomError> {
    use TissueLabel::*;
    spec.validate()?;
    let g = spec.geometry();
    let n = g.len();
    let body: Vec<bool> = (0..n)
        .map(|i| {
            let p = g.center(g.coords(i));
            ellipse_inside(&spec.body, &p) && p.z >= spec.body.z_range[0] && p.z < spec.body.z_range[1]
        })
        .collect();
    let outside: Vec<bool> = body.iter().map(|&b| !b).collect();
    let depth = edt(&outside, &g);

    // lateral depth, ignoring the caps, for the rib hoops
    let [nx, ny, _] = g.dims;
    let g2 = Geometry::new([nx, ny, 1], g.spacing, [0.0; 3]);
    let out2: Vec<bool> = (0..nx * ny)
        .map(|i| !ellipse_inside(&spec.body, &g2.center(g2.coords(i))))
        .collect();
    let lateral = edt(&out2, &g2);

    let fascia_end = spec.fascia_depth + spec.fascia_thickness;
    let ribs = spec.rib_centers();
    let mut labels = vec![Air; n];
    for idx in 0..n {
        if !body[idx] {
            continue;
        }
        let d = depth[idx];
        labels[idx] = if d <= spec.skin_thickness {
            Skin
        } else if d < spec.fascia_depth {
            FatSoft
        } else if d < fascia_end {
            Fascia
        } else {
            FatSoft
        };
    }

    for idx in 0..n {
        if !body[idx] || depth[idx] < fascia_end {
            continue;
        }
        let c = g.coords(idx);
        let is_bone = if spec.bone_shell {
            (depth[idx] - spec.ribs.depth).abs() <= spec.ribs.radius
        } else {
            let dl = lateral[g2.index(c[0], c[1], 0)];
            let z = g.center(c).z;
            ribs.iter().any(|zc| {
                let a = dl - spec.ribs.depth;
                let b = z - zc;
                a * a + b * b <= spec.ribs.radius * spec.ribs.radius
            })
        };
        if is_bone {
            labels[idx] = Bone;
        }
    }

    let liver: Vec<bool> = (0..n)
        .map(|idx| {
            body[idx]
                && depth[idx] >= spec.liver.min_depth
                && labels[idx] != Bone
                && ellipsoid_inside(&spec.liver, &g.center(g.coords(idx)))
        })
        .collect();
    for idx in 0..n {
        if liver[idx] {
            labels[idx] = Liver;
        }
    }
    for t in &spec.vessels {
        for idx in tube_voxels(&g, t) {
            if liver[idx] {
                labels[idx] = HepBlood;
            }
        }
    }
    for (i, t) in spec.bile.iter().enumerate() {
        let vox = tube_voxels(&g, t);
        if vox.is_empty() {
            return Err(PhantomError::BadGeometry(format!("bile tube {i} covers no voxel")));
        }
        if let Some(&bad) = vox.iter().find(|&&idx| !liver[idx]) {
            let c = g.coords(bad);
            return Err(PhantomError::BadGeometry(format!(
                "bile tube {i} leaves the liver at voxel {c:?}"
            )));
        }
        for idx in vox {
            labels[idx] = HepBile;
        }
    }
    if let Some(p) = &spec.air_pocket {
        let c = Vector3::from(p.center);
        for idx in 0..n {
            if body[idx] && (g.center(g.coords(idx)) - c).norm() <= p.radius {
                if labels[idx] == HepBile {
                    return Err(PhantomError::BadGeometry("air pocket overlaps a bile tube".into()));
                }
                labels[idx] = Air;
            }
        }
    }
    Ok(labels)
}

/// Draws one HU value per voxel from its tissue's Gaussian, in raster order.
pub fn draw_intensities(
    labels: &[TissueLabel],
    models: &BTreeMap<TissueLabel, IntensityModel>,
    seed: u64,
) -> Result<Vec<i16>, PhantomError> {
    let mut dists = [None; 8];
    for l in TissueLabel::TISSUES {
        let m = models
            .get(&l)
            .ok_or_else(|| PhantomError::BadIntensity(format!("no model for {l}")))?;
        dists[l.code() as usize] = Some(
            Normal::new(m.mean, m.sd).map_err(|e| PhantomError::BadIntensity(e.to_string()))?,
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels
        .iter()
        .map(|&l| {
            let d = dists
                .get(l.code() as usize)
                .copied()
                .flatten()
                .ok_or_else(|| PhantomError::BadIntensity(format!("cannot draw for {l}")))?;
            let v: f64 = d.sample(&mut rng);
            Ok(v.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16)
        })
        .collect()
}

/// Full-label phantom volume. Pure in `spec`.
pub fn generate(spec: &PhantomSpec) -> Result<VoxelVolume, PhantomError> {
    let labels = rasterize(spec)?;
    let hu = draw_intensities(&labels, &spec.intensities, spec.seed)?;
    Ok(VoxelVolume::new(spec.geometry(), hu, labels)?)
}

/// Bone-shell variant of `spec`: no intercostal window at all.
pub fn generate_bone_shell(spec: &PhantomSpec) -> Result<VoxelVolume, PhantomError> {
    generate(&spec.clone().bone_shell())
}

/// Planar layers stacked along x on a 3×3 cross-section (y, z spacing 1 mm).
/// Intensities are the default means without noise. The body spans from the
/// first to the last non-air layer, so air layers in between are internal.
pub fn layered_slab_volume(
    layers: &[(TissueLabel, usize)],
    spacing_x: f64,
) -> Result<(VoxelVolume, BodyMask), PhantomError> {
    let nx: usize = layers.iter().map(|l| l.1).sum();
    if nx == 0 {
        return Err(PhantomError::BadGeometry("empty slab".into()));
    }
    let g = Geometry::new([nx, 3, 3], [spacing_x, 1.0, 1.0], [0.0; 3]);
    let mut row = Vec::with_capacity(nx);
    for &(l, w) in layers {
        if !l.is_labeled() {
            return Err(PhantomError::BadGeometry("slab layers must be labeled".into()));
        }
        row.extend(std::iter::repeat_n(l, w));
    }
    let means = default_intensities();
    let first = row.iter().position(|&l| l != TissueLabel::Air);
    let last = row.iter().rposition(|&l| l != TissueLabel::Air);
    let n = g.len();
    let mut labels = Vec::with_capacity(n);
    let mut hu = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for idx in 0..n {
        let x = g.coords(idx)[0];
        let l = row[x];
        labels.push(l);
        hu.push(means[&l].mean as i16);
        mask.push(matches!((first, last), (Some(f), Some(e)) if x >= f && x <= e));
    }
    let v = VoxelVolume::new(g, hu, labels)?;
    Ok((v, BodyMask::from_mask(g, mask)))
}

/// Full-segmentation classifier over a layered slab with the default table.
pub fn layered_slab(layers: &[(TissueLabel, usize)], spacing_x: f64) -> Result<Classifier, PhantomError> {
    let (v, body) = layered_slab_volume(layers, spacing_x)?;
    let provider = LabelProvider::full_segmentation(&v);
    Ok(Classifier::new(
        Arc::new(v),
        provider,
        Arc::new(body),
        HapticTable::default(),
    )?)
}

/// Moves every voxel of `label` by a whole-voxel offset. Vacated voxels get
/// `fill`; the moved structure overwrites whatever it lands on. Voxels moved
/// off the grid are dropped.
pub fn shift_structure(
    labels: &[TissueLabel],
    g: &Geometry,
    label: TissueLabel,
    shift: [i64; 3],
    fill: TissueLabel,
) -> Vec<TissueLabel> {
    let mut out: Vec<TissueLabel> = labels
        .iter()
        .map(|&l| if l == label { fill } else { l })
        .collect();
    for (idx, &l) in labels.iter().enumerate() {
        if l != label {
            continue;
        }
        let c = g.coords(idx);
        let t = [c[0] as i64 + shift[0], c[1] as i64 + shift[1], c[2] as i64 + shift[2]];
        if g.in_grid(t) {
            out[g.index(t[0] as usize, t[1] as usize, t[2] as usize)] = label;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyStructures {
    pub fascia: bool,
    pub liver: bool,
    pub hep_blood: bool,
    pub hep_bile: bool,
}

impl Default for KeyStructures {
    fn default() -> Self {
        KeyStructures {
            fascia: true,
            liver: true,
            hep_blood: true,
            hep_bile: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    /// Boundary displacement standard deviation, mm.
    pub sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub structures: KeyStructures,
    /// Wavelength range of the displacement field, mm.
    #[serde(default = "default_wavelengths")]
    pub wavelengths: [f64; 2],
}

fn default_wavelengths() -> [f64; 2] {
    [20.0, 60.0]
}

impl Default for DegradeSpec {
    fn default() -> Self {
        DegradeSpec {
            sigma: 1.0,
            seed: 11,
            structures: KeyStructures::default(),
            wavelengths: default_wavelengths(),
        }
    }
}

const WAVES: usize = 4;

/// Smooth zero-mean displacement field with standard deviation `sigma`:
/// a sum of a few plane waves with random directions and phases.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    sigma: f64,
    waves: Vec<(Vector3<f64>, f64)>,
}

impl DisplacementField {
    pub fn new(sigma: f64, wavelengths: [f64; 2], rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..WAVES)
            .map(|_| {
                let mut d: Vector3<f64> = Vector3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                if d.norm() == 0.0 {
                    d = Vector3::x();
                }
                let lambda = rng.random_range(wavelengths[0]..=wavelengths[1]);
                let omega = d.normalize() * (2.0 * std::f64::consts::PI / lambda);
                let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                (omega, phase)
            })
            .collect();
        DisplacementField { sigma, waves }
    }

    pub fn at(&self, p: &Vector3<f64>) -> f64 {
        let s: f64 = self.waves.iter().map(|(w, ph)| (w.dot(p) + ph).sin()).sum();
        self.sigma * (2.0 / WAVES as f64).sqrt() * s
    }
}

/// Keeps only the enabled key structures, each with its boundary pushed
/// along the normal by a smooth seeded displacement. Everything else becomes
/// `Unlabeled`. Ground-truth bone is never painted over.
pub fn degrade(labels: &[TissueLabel], g: &Geometry, d: &DegradeSpec) -> Result<Vec<TissueLabel>, PhantomError> {
    use TissueLabel::*;
    if !(d.sigma >= 0.0 && d.sigma.is_finite()) {
        return Err(PhantomError::BadGeometry(format!("degradation sigma {} < 0", d.sigma)));
    }
    if !(d.wavelengths[0] > 0.0 && d.wavelengths[0] <= d.wavelengths[1]) {
        return Err(PhantomError::BadGeometry("bad wavelength range".into()));
    }
    let mut out = vec![Unlabeled; labels.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let keys: [(bool, &[TissueLabel], TissueLabel); 4] = [
        (d.structures.fascia, &[Fascia], Fascia),
        (d.structures.liver, &[Liver, HepBlood, HepBile], Liver),
        (d.structures.hep_blood, &[HepBlood], HepBlood),
        (d.structures.hep_bile, &[HepBile], HepBile),
    ];
    for (enabled, members, paint) in keys {
        // draw for every structure so toggling one leaves the others unchanged
        let field = DisplacementField::new(d.sigma, d.wavelengths, &mut rng);
        if !enabled {
            continue;
        }
        let mask: Vec<bool> = labels.iter().map(|l| members.contains(l)).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let moved: Vec<bool> = if d.sigma == 0.0 {
            mask
        } else {
            let sd = signed_distance(&mask, g);
            (0..labels.len())
                .map(|i| sd[i] < field.at(&g.center(g.coords(i))))
                .collect()
        };
        for (i, m) in moved.into_iter().enumerate() {
            if m && labels[i] != Bone {
                out[i] = paint;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use TissueLabel::*;

    fn small_spec() -> PhantomSpec {
        // a half-size phantom keeps the unit tests quick
        PhantomSpec {
            dims: [64, 56, 40],
            spacing: [2.0, 2.0, 2.0],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = small_spec();
        let a = generate(&s).unwrap();
        let b = generate(&s).unwrap();
        assert_eq!(a, b);
        let mut s2 = s.clone();
        s2.seed += 1;
        assert_ne!(generate(&s2).unwrap().intensities, a.intensities);
        assert_eq!(generate(&s2).unwrap().labels, a.labels);
    }

    #[test]
    fn every_tissue_is_present() {
        let v = generate(&small_spec()).unwrap();
        for l in TissueLabel::TISSUES {
            assert!(v.count_label(l) > 0, "{l} missing");
        }
        assert_eq!(v.count_label(Unlabeled), 0);
    }

    #[test]
    fn air_sample_mean_within_three_standard_errors() {
        let s = small_spec();
        let v = generate(&s).unwrap();
        let air: Vec<f64> = v
            .intensities
            .iter()
            .zip(&v.labels)
            .filter(|(_, &l)| l == Air)
            .map(|(&h, _)| h as f64)
            .collect();
        let m = air.iter().sum::<f64>() / air.len() as f64;
        let model = s.intensities[&Air];
        // rounding to integer HU adds a uniform error of variance 1/12
        let se = (model.sd * model.sd + 1.0 / 12.0).sqrt() / (air.len() as f64).sqrt();
        assert!((m - model.mean).abs() <= 3.0 * se, "mean {m}");
    }

    #[test]
    fn bile_outside_liver_is_rejected() {
        let mut s = small_spec();
        s.bile[0].points = vec![[10.0, 56.0, 40.0], [20.0, 56.0, 40.0]];
        assert!(matches!(generate(&s), Err(PhantomError::BadGeometry(_))));
        let mut s = small_spec();
        s.ribs.count = 1;
        assert!(matches!(generate(&s), Err(PhantomError::BadGeometry(_))));
    }

    #[test]
    fn shift_moves_structure() {
        let (v, _) = layered_slab_volume(&[(Air, 2), (FatSoft, 4), (Fascia, 3), (FatSoft, 6)], 1.0).unwrap();
        let g = v.geometry;
        let s = shift_structure(&v.labels, &g, Fascia, [2, 0, 0], FatSoft);
        let row: Vec<TissueLabel> = (0..15).map(|x| s[g.index(x, 1, 1)]).collect();
        let fascia: Vec<usize> = (0..15).filter(|&x| row[x] == Fascia).collect();
        assert_eq!(fascia, vec![8, 9, 10]);
        assert_eq!(row[6], FatSoft);
    }

    #[test]
    fn zero_sigma_degradation_keeps_key_masks() {
        let v = generate(&small_spec()).unwrap();
        let d = DegradeSpec {
            sigma: 0.0,
            ..DegradeSpec::default()
        };
        let p = degrade(&v.labels, &v.geometry, &d).unwrap();
        for (gt, got) in v.labels.iter().zip(&p) {
            match gt {
                Fascia | Liver | HepBlood | HepBile => assert_eq!(gt, got),
                _ => assert_eq!(*got, Unlabeled),
            }
        }
        let none = DegradeSpec {
            structures: KeyStructures {
                fascia: false,
                liver: false,
                hep_blood: false,
                hep_bile: false,
            },
            ..DegradeSpec::default()
        };
        assert!(degrade(&v.labels, &v.geometry, &none)
            .unwrap()
            .iter()
            .all(|&l| l == Unlabeled));
    }

    #[test]
    fn degradation_displacement_is_bounded_and_spares_bone() {
        let v = generate(&small_spec()).unwrap();
        let g = v.geometry;
        let sigma = 1.0;
        let d = DegradeSpec {
            sigma,
            ..DegradeSpec::default()
        };
        let p = degrade(&v.labels, &g, &d).unwrap();
        for (gt, got) in v.labels.iter().zip(&p) {
            if *gt == Bone {
                assert_eq!(*got, Unlabeled);
            }
        }
        // per-voxel surface distance oracle on the liver organ mask
        let orig: Vec<bool> = v.labels.iter().map(|l| matches!(l, Liver | HepBlood | HepBile)).collect();
        let new: Vec<bool> = p.iter().map(|l| matches!(l, Liver | HepBlood | HepBile)).collect();
        let sd = signed_distance(&orig, &g);
        let bound = sigma * (2.0 * WAVES as f64).sqrt();
        let mut changed = 0usize;
        let mut total = 0.0;
        for i in 0..orig.len() {
            if orig[i] != new[i] && v.labels[i] != Bone {
                assert!(sd[i].abs() <= bound, "voxel moved {} mm", sd[i]);
                changed += 1;
                total += sd[i].abs();
            }
        }
        assert!(changed > 0);
        assert!(total / changed as f64 <= 2.0 * sigma);
    }

    #[test]
    fn displacement_field_has_requested_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = 0.0;
        let mut n = 0.0;
        for _ in 0..200 {
            let f = DisplacementField::new(1.0, [20.0, 60.0], &mut rng);
            for i in 0..20 {
                let v = f.at(&Vector3::new(i as f64 * 7.0, 3.0 * i as f64, 1.0));
                acc += v * v;
                n += 1.0;
            }
        }
        let rms = (acc / n).sqrt();
        assert!((rms - 1.0).abs() < 0.15, "rms {rms}");
    }
}
