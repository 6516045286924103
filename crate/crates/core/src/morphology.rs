//! Binary morphology shared by post-processing and centerline refinement.
//!
//! Everything outside the grid is treated as background.

use std::collections::VecDeque;

use crate::volume::{BinaryVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [[isize; 3]] {
        match self {
            Connectivity::Six => &OFFSETS_6,
            Connectivity::Eighteen => &OFFSETS_18,
            Connectivity::TwentySix => &OFFSETS_26,
        }
    }
}

const fn build_offsets<const N: usize>(max_l1: isize) -> [[isize; 3]; N] {
    let mut out = [[0isize; 3]; N];
    let mut n = 0;
    let mut dz: isize = -1;
    while dz <= 1 {
        let mut dy: isize = -1;
        while dy <= 1 {
            let mut dx: isize = -1;
            while dx <= 1 {
                let l1 = dx.abs() + dy.abs() + dz.abs();
                if l1 != 0 && l1 <= max_l1 {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
}

pub static OFFSETS_6: [[isize; 3]; 6] = build_offsets::<6>(1);
pub static OFFSETS_18: [[isize; 3]; 18] = build_offsets::<18>(2);
pub static OFFSETS_26: [[isize; 3]; 26] = build_offsets::<26>(3);

/// Connected-component labels: 0 for voxels not selected by `select`,
/// `1..=n` otherwise. Returns the labels and per-component sizes
/// (`sizes[k - 1]` for label `k`).
pub fn label_where<T>(
    vol: &Volume<T>,
    conn: Connectivity,
    select: impl Fn(&T) -> bool,
) -> (Vec<u32>, Vec<usize>) {
    let dims = vol.dims();
    let mut labels = vec![0u32; vol.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..vol.len() {
        if labels[start] != 0 || !select(&vol.voxels()[start]) {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let [x, y, z] = vol.coords(i);
            for d in conn.offsets() {
                let (nx, ny, nz) = (x as isize + d[0], y as isize + d[1], z as isize + d[2]);
                if nx < 0 || ny < 0 || nz < 0 {
                    continue;
                }
                let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                if nx >= dims[0] || ny >= dims[1] || nz >= dims[2] {
                    continue;
                }
                let j = vol.index(nx, ny, nz);
                if labels[j] == 0 && select(&vol.voxels()[j]) {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Foreground components.
pub fn label_components(vol: &BinaryVolume, conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    label_where(vol, conn, |&v| v)
}

pub fn count_components(vol: &BinaryVolume, conn: Connectivity) -> usize {
    label_components(vol, conn).1.len()
}

/// Sets to foreground every 6-connected background region that does not
/// touch the grid border.
pub fn fill_holes(vol: &BinaryVolume) -> BinaryVolume {
    let dims = vol.dims();
    let mut reach = vec![false; vol.len()];
    let mut queue = VecDeque::new();
    for i in 0..vol.len() {
        let [x, y, z] = vol.coords(i);
        let on_border = x == 0 || y == 0 || z == 0 || x + 1 == dims[0] || y + 1 == dims[1] || z + 1 == dims[2];
        if on_border && !vol.voxels()[i] {
            reach[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let [x, y, z] = vol.coords(i);
        for d in &OFFSETS_6 {
            if let Some(j) = vol.checked_index(x as isize + d[0], y as isize + d[1], z as isize + d[2]) {
                if !reach[j] && !vol.voxels()[j] {
                    reach[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    let mut out = vol.clone();
    for (o, r) in out.voxels_mut().iter_mut().zip(reach) {
        *o = !r;
    }
    out
}

/// 2D hole filling on every z slice (4-connected background).
pub fn fill_holes_slices(vol: &BinaryVolume) -> BinaryVolume {
    let [nx, ny, nz] = vol.dims();
    let mut out = vol.clone();
    let mut reach = vec![false; nx * ny];
    let mut queue = VecDeque::new();
    for z in 0..nz {
        let slice = vol.slice(z);
        reach.iter_mut().for_each(|r| *r = false);
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * y;
                if (x == 0 || y == 0 || x + 1 == nx || y + 1 == ny) && !slice[i] {
                    reach[i] = true;
                    queue.push_back((x, y));
                }
            }
        }
        while let Some((x, y)) = queue.pop_front() {
            let (x, y) = (x as isize, y as isize);
            for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (qx, qy) = (x + dx, y + dy);
                if qx < 0 || qy < 0 || qx >= nx as isize || qy >= ny as isize {
                    continue;
                }
                let j = qx as usize + nx * qy as usize;
                if !reach[j] && !slice[j] {
                    reach[j] = true;
                    queue.push_back((qx as usize, qy as usize));
                }
            }
        }
        for (o, r) in out.slice_mut(z).iter_mut().zip(&reach) {
            *o = !r;
        }
    }
    out
}

/// Integer offsets with Euclidean norm `<= radius`.
pub fn ball_offsets(radius: f64) -> Vec<[isize; 3]> {
    let r = radius.floor() as isize;
    let r2 = radius * radius;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if (dx * dx + dy * dy + dz * dz) as f64 <= r2 + 1e-9 {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Dilation by a spherical structuring element.
pub fn dilate_ball(vol: &BinaryVolume, radius: f64) -> BinaryVolume {
    let offsets = ball_offsets(radius);
    let mut out = vol.map(|_| false);
    for i in 0..vol.len() {
        if !vol.voxels()[i] {
            continue;
        }
        let [x, y, z] = vol.coords(i);
        for d in &offsets {
            if let Some(j) = vol.checked_index(x as isize + d[0], y as isize + d[1], z as isize + d[2]) {
                out.voxels_mut()[j] = true;
            }
        }
    }
    out
}

/// Number of foreground voxels in each zero-padded 3x3x3 neighbourhood
/// (centre included).
pub fn box_counts_3x3x3(vol: &BinaryVolume) -> Volume<u8> {
    let [nx, ny, nz] = vol.dims();
    let src: Vec<u8> = vol.voxels().iter().map(|&b| b as u8).collect();
    let mut a = vec![0u8; src.len()];
    let mut b = vec![0u8; src.len()];
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut s = src[idx(x, y, z)];
                if x > 0 {
                    s += src[idx(x - 1, y, z)];
                }
                if x + 1 < nx {
                    s += src[idx(x + 1, y, z)];
                }
                a[idx(x, y, z)] = s;
            }
        }
    }
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut s = a[idx(x, y, z)];
                if y > 0 {
                    s += a[idx(x, y - 1, z)];
                }
                if y + 1 < ny {
                    s += a[idx(x, y + 1, z)];
                }
                b[idx(x, y, z)] = s;
            }
        }
    }
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut s = b[idx(x, y, z)];
                if z > 0 {
                    s += b[idx(x, y, z - 1)];
                }
                if z + 1 < nz {
                    s += b[idx(x, y, z + 1)];
                }
                a[idx(x, y, z)] = s;
            }
        }
    }
    Volume::new(vol.dims(), vol.spacing(), a).expect("same geometry")
}

/// 3x3x3 mean filter followed by a 0.5 threshold: a voxel is foreground iff
/// at least 14 of its 27 zero-padded neighbourhood voxels are.
pub fn majority_3x3x3(vol: &BinaryVolume) -> BinaryVolume {
    box_counts_3x3x3(vol).map(|&c| c >= 14)
}

/// Drops components (under `conn`) with fewer than `min_voxels` voxels.
pub fn remove_small_components(vol: &BinaryVolume, min_voxels: usize, conn: Connectivity) -> BinaryVolume {
    let (labels, sizes) = label_components(vol, conn);
    let mut out = vol.clone();
    for (o, &l) in out.voxels_mut().iter_mut().zip(&labels) {
        if l != 0 && sizes[l as usize - 1] < min_voxels {
            *o = false;
        }
    }
    out
}
