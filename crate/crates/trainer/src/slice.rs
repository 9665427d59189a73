use base64::Engine as _;

use needlesim::volume::{TissueLabel, VoxelVolume};

use crate::protocol::{Axis, OverlayRun, Slice};

/// Soft-tissue window, HU.
pub const DEFAULT_WINDOW: [f64; 2] = [-160.0, 240.0];

/// Image plane axes `(column, row)` for a slice normal to `axis`.
fn plane(axis: Axis) -> (usize, usize, usize) {
    match axis {
        Axis::X => (1, 2, 0),
        Axis::Y => (0, 2, 1),
        Axis::Z => (0, 1, 2),
    }
}

pub fn grey(hu: f64, window: [f64; 2]) -> u8 {
    let t = (hu - window[0]) / (window[1] - window[0]);
    (t.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Window-levelled slice, optionally with run-length label overlay
/// (air omitted). `None` when the index is outside the grid.
pub fn extract(v: &VoxelVolume, axis: Axis, index: usize, overlay: bool, window: [f64; 2]) -> Option<Slice> {
    let g = &v.geometry;
    let (cu, cv, cn) = plane(axis);
    if index >= g.dims[cn] {
        return None;
    }
    let (w, h) = (g.dims[cu], g.dims[cv]);
    let mut pixels = Vec::with_capacity(w * h);
    let mut runs = Vec::new();
    for row in 0..h {
        let mut open: Option<OverlayRun> = None;
        for col in 0..w {
            let mut c = [0usize; 3];
            c[cu] = col;
            c[cv] = row;
            c[cn] = index;
            let i = g.index(c[0], c[1], c[2]);
            pixels.push(grey(v.intensities[i] as f64, window));
            if !overlay {
                continue;
            }
            let l = v.labels[i];
            match &mut open {
                Some(r) if r.label == l => r.len += 1,
                _ => {
                    runs.extend(open.take());
                    if l != TissueLabel::Air && l.is_labeled() {
                        open = Some(OverlayRun {
                            row,
                            start: col,
                            len: 1,
                            label: l,
                        });
                    }
                }
            }
        }
        runs.extend(open);
    }
    Some(Slice {
        axis,
        index,
        width: w,
        height: h,
        window,
        pixels: base64::engine::general_purpose::STANDARD.encode(&pixels),
        overlay: overlay.then_some(runs),
    })
}
