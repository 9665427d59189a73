//! Exact Euclidean distance transform (separable lower-envelope method) with
//! anisotropic voxel spacing.

use crate::volume::Geometry;

/// Squared distance (mm²) from every voxel centre to the nearest feature voxel
/// centre. Feature voxels get 0. With no feature voxel at all, every entry is
/// `f64::INFINITY`.
pub fn edt_squared(features: &[bool], g: &Geometry) -> Vec<f64> {
    assert_eq!(features.len(), g.len());
    let mut d: Vec<f64> = features
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let [nx, ny, nz] = g.dims;
    let max_n = nx.max(ny).max(nz);
    let mut line = vec![0.0; max_n];
    let mut out = vec![0.0; max_n];
    let mut scratch = Envelope::with_capacity(max_n);

    for axis in 0..3 {
        let n = g.dims[axis];
        let s = g.spacing[axis];
        let (stride, others): (usize, Vec<usize>) = match axis {
            0 => (1, (0..ny * nz).map(|r| r * nx).collect()),
            1 => (
                nx,
                (0..nz)
                    .flat_map(|k| (0..nx).map(move |i| i + nx * ny * k))
                    .collect(),
            ),
            _ => (nx * ny, (0..nx * ny).collect()),
        };
        for base in others {
            for (q, l) in line.iter_mut().take(n).enumerate() {
                *l = d[base + q * stride];
            }
            scratch.transform(&line[..n], &mut out[..n], s);
            for q in 0..n {
                d[base + q * stride] = out[q];
            }
        }
    }
    d
}

/// Distance (mm) to the nearest feature voxel.
pub fn edt(features: &[bool], g: &Geometry) -> Vec<f64> {
    edt_squared(features, g).into_iter().map(f64::sqrt).collect()
}

/// Signed distance to a mask boundary (mm): negative inside, positive outside,
/// with the zero level half a voxel from each boundary voxel centre.
pub fn signed_distance(mask: &[bool], g: &Geometry) -> Vec<f64> {
    let outside: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let to_outside = edt(&outside, g);
    let to_inside = edt(mask, g);
    let half = 0.5 * g.min_spacing();
    mask.iter()
        .enumerate()
        .map(|(i, &m)| {
            if m {
                -(to_outside[i] - half)
            } else {
                to_inside[i] - half
            }
        })
        .collect()
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }

    /// 1D squared distance: out[q] = min_p (s (q - p))² + f[p].
    fn transform(&mut self, f: &[f64], out: &mut [f64], s: f64) {
        let n = f.len();
        let s2 = s * s;
        let mut k: usize = 0;
        let mut first = None;
        for (q, &fq) in f.iter().enumerate() {
            if fq.is_finite() {
                first = Some(q);
                break;
            }
        }
        let Some(first) = first else {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        };
        self.v[0] = first;
        self.z[0] = f64::NEG_INFINITY;
        self.z[1] = f64::INFINITY;
        for q in first + 1..n {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                let p = self.v[k];
                let qf = q as f64;
                let pf = p as f64;
                // intersection of parabolas rooted at p and q, in index units
                let sx = ((f[q] / s2 + qf * qf) - (f[p] / s2 + pf * pf)) / (2.0 * (qf - pf));
                // z[0] is -inf, so k never underflows
                if sx <= self.z[k] {
                    k -= 1;
                    continue;
                }
                k += 1;
                self.v[k] = q;
                self.z[k] = sx;
                self.z[k + 1] = f64::INFINITY;
                break;
            }
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while self.z[k + 1] < qf {
                k += 1;
            }
            let p = self.v[k] as f64;
            *o = s2 * (qf - p) * (qf - p) + f[self.v[k]];
        }
    }
}
