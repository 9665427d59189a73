//! Binary 3D morphology on flat x-fastest grids: 6-neighbourhood erosion and
//! dilation, 26-connected component selection and hole filling.
//!
//! Voxels outside the grid count as background.

use std::collections::VecDeque;

use crate::volume::Geometry;

const N6: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

fn offsets26() -> Vec<[i64; 3]> {
    let mut v = Vec::with_capacity(26);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dx, dy, dz) != (0, 0, 0) {
                    v.push([dx, dy, dz]);
                }
            }
        }
    }
    v
}

#[inline]
fn shifted(g: &Geometry, c: [usize; 3], o: [i64; 3]) -> Option<usize> {
    let n = [c[0] as i64 + o[0], c[1] as i64 + o[1], c[2] as i64 + o[2]];
    g.in_grid(n)
        .then(|| g.index(n[0] as usize, n[1] as usize, n[2] as usize))
}

pub fn erode6(mask: &[bool], g: &Geometry) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        if !mask[idx] {
            continue;
        }
        let c = g.coords(idx);
        *o = N6
            .iter()
            .all(|&off| shifted(g, c, off).map(|n| mask[n]).unwrap_or(false));
    }
    out
}

pub fn dilate6(mask: &[bool], g: &Geometry) -> Vec<bool> {
    let mut out = mask.to_vec();
    for idx in 0..mask.len() {
        if !mask[idx] {
            continue;
        }
        let c = g.coords(idx);
        for &off in &N6 {
            if let Some(n) = shifted(g, c, off) {
                out[n] = true;
            }
        }
    }
    out
}

/// Labels 26-connected foreground components. Returns per-voxel component ids
/// (0 = background, components numbered from 1 in raster order of their first
/// voxel) and the size of each component.
pub fn label_components26(mask: &[bool], g: &Geometry) -> (Vec<u32>, Vec<usize>) {
    let offs = offsets26();
    let mut ids = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || ids[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[start] = id;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(cur) = queue.pop_front() {
            size += 1;
            let c = g.coords(cur);
            for &off in &offs {
                if let Some(n) = shifted(g, c, off) {
                    if mask[n] && ids[n] == 0 {
                        ids[n] = id;
                        queue.push_back(n);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (ids, sizes)
}

/// Keeps only the largest 26-connected component; ties go to the component
/// found first in raster order. `None` when the mask is empty.
pub fn largest_component26(mask: &[bool], g: &Geometry) -> Option<Vec<bool>> {
    let (ids, sizes) = label_components26(mask, g);
    let (best, _) = sizes
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, usize)>, (i, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((i, s)),
        })?;
    let keep = best as u32 + 1;
    Some(ids.iter().map(|&id| id == keep).collect())
}

/// Sets every background voxel that is not 6-connected to the grid border
/// through background voxels.
pub fn fill_holes(mask: &[bool], g: &Geometry) -> Vec<bool> {
    let mut reached = vec![false; mask.len()];
    let mut queue = VecDeque::new();
    for idx in 0..mask.len() {
        if !mask[idx] && g.on_border(g.coords(idx)) {
            reached[idx] = true;
            queue.push_back(idx);
        }
    }
    while let Some(cur) = queue.pop_front() {
        let c = g.coords(cur);
        for &off in &N6 {
            if let Some(n) = shifted(g, c, off) {
                if !mask[n] && !reached[n] {
                    reached[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    reached.iter().map(|&r| !r).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(n: usize) -> Geometry {
        Geometry::new([n, n, n], [1.0; 3], [0.0; 3])
    }

    #[test]
    fn opening_removes_one_voxel_cable() {
        let g = g(9);
        let mut m = vec![false; g.len()];
        for i in 0..9 {
            m[g.index(i, 4, 4)] = true;
        }
        let opened = dilate6(&erode6(&m, &g), &g);
        assert!(opened.iter().all(|&b| !b));
    }

    #[test]
    fn diagonal_voxels_are_one_component() {
        let g = g(4);
        let mut m = vec![false; g.len()];
        m[g.index(0, 0, 0)] = true;
        m[g.index(1, 1, 1)] = true;
        m[g.index(3, 3, 0)] = true;
        let (_, sizes) = label_components26(&m, &g);
        assert_eq!(sizes, vec![2, 1]);
    }

    #[test]
    fn hole_fill_closes_enclosed_cavity_only() {
        let g = g(7);
        let mut m = vec![false; g.len()];
        for k in 1..6 {
            for j in 1..6 {
                for i in 1..6 {
                    m[g.index(i, j, k)] = true;
                }
            }
        }
        m[g.index(3, 3, 3)] = false;
        // a channel to the outside keeps this one open
        m[g.index(1, 3, 3)] = false;
        m[g.index(2, 3, 3)] = false;
        let filled = fill_holes(&m, &g);
        assert!(!filled[g.index(3, 3, 3)]);
        m[g.index(1, 3, 3)] = true;
        let filled = fill_holes(&m, &g);
        assert!(filled[g.index(3, 3, 3)] && filled[g.index(2, 3, 3)]);
        assert!(!filled[g.index(0, 0, 0)]);
    }
}
