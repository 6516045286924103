//! Topology-preserving 3D thinning after Lee, Kashyap and Chu.
//!
//! Border voxels are peeled in six directional sub-iterations. A voxel is
//! deleted when it is not an endpoint, its removal leaves the Euler
//! characteristic of the (26, 6) cubical complex unchanged, and its 26
//! neighbours stay in a single 26-connected component. Candidates of a
//! sub-iteration are re-checked one by one before deletion so that
//! simultaneous removal cannot split the object.

use std::sync::OnceLock;

use crate::volume::BinaryVolume;

const CENTER: usize = 13;

#[inline]
fn pos(dx: isize, dy: isize, dz: isize) -> usize {
    ((dx + 1) + 3 * (dy + 1) + 9 * (dz + 1)) as usize
}

struct Tables {
    /// 26-adjacency between positions of the 3x3x3 neighbourhood, centre
    /// excluded.
    adjacency: [u32; 27],
    /// Neighbourhood positions of each octant's 7 non-centre voxels,
    /// in bit order of `euler`.
    octants: [[usize; 7]; 8],
    /// 8 x change of the local Euler characteristic at an octant's shared
    /// vertex when the centre voxel is removed, indexed by the other seven.
    euler: [i8; 128],
}

/// 8 x the vertex-local Euler characteristic of a 2x2x2 configuration
/// (bit `a + 2b + 4c` for the voxel on side `(a, b, c)` of the vertex).
/// Each incident edge, face and cube counts with weight 1/2, 1/4, 1/8.
fn local_euler8(conf: u8) -> i32 {
    let has = |a: usize, b: usize, c: usize| conf >> (a + 2 * b + 4 * c) & 1 == 1;
    let vertex = (conf != 0) as i32;
    let mut edges = 0;
    for side in 0..2 {
        edges += (0..4).any(|k| has(side, k & 1, k >> 1)) as i32;
        edges += (0..4).any(|k| has(k & 1, side, k >> 1)) as i32;
        edges += (0..4).any(|k| has(k & 1, k >> 1, side)) as i32;
    }
    let mut faces = 0;
    for s in 0..2 {
        for t in 0..2 {
            faces += (has(s, t, 0) || has(s, t, 1)) as i32;
            faces += (has(s, 0, t) || has(s, 1, t)) as i32;
            faces += (has(0, s, t) || has(1, s, t)) as i32;
        }
    }
    let cubes = conf.count_ones() as i32;
    8 * vertex - 4 * edges + 2 * faces - cubes
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let mut adjacency = [0u32; 27];
        let coords = |p: usize| [(p % 3) as isize, (p / 3 % 3) as isize, (p / 9) as isize];
        for p in 0..27 {
            for q in 0..27 {
                let (a, b) = (coords(p), coords(q));
                let cheb = (0..3).map(|i| (a[i] - b[i]).abs()).max().unwrap();
                if p != q && p != CENTER && q != CENTER && cheb == 1 {
                    adjacency[p] |= 1 << q;
                }
            }
        }
        let mut octants = [[0usize; 7]; 8];
        for (o, oct) in octants.iter_mut().enumerate() {
            let s = [
                if o & 1 == 0 { -1 } else { 1 },
                if o & 2 == 0 { -1 } else { 1 },
                if o & 4 == 0 { -1 } else { 1 },
            ];
            for bit in 1..8 {
                let (a, b, c) = ((bit & 1) as isize, (bit >> 1 & 1) as isize, (bit >> 2) as isize);
                oct[bit - 1] = pos(a * s[0], b * s[1], c * s[2]);
            }
        }
        let mut euler = [0i8; 128];
        for (k, e) in euler.iter_mut().enumerate() {
            let conf = (k as u8) << 1;
            *e = (local_euler8(conf | 1) - local_euler8(conf)) as i8;
        }
        Tables {
            adjacency,
            octants,
            euler,
        }
    })
}

fn euler_invariant(nb: u32) -> bool {
    let t = tables();
    let mut sum = 0i32;
    for oct in &t.octants {
        let mut k = 0usize;
        for (bit, &p) in oct.iter().enumerate() {
            k |= ((nb >> p & 1) as usize) << bit;
        }
        sum += t.euler[k] as i32;
    }
    sum == 0
}

/// The 26 neighbours (centre bit ignored) form exactly one 26-component.
fn single_component(nb: u32) -> bool {
    let t = tables();
    let objects = nb & !(1 << CENTER);
    if objects == 0 {
        return false;
    }
    let mut reached = 1u32 << objects.trailing_zeros();
    let mut frontier = reached;
    while frontier != 0 {
        let p = frontier.trailing_zeros() as usize;
        frontier &= frontier - 1;
        let new = t.adjacency[p] & objects & !reached;
        reached |= new;
        frontier |= new;
    }
    reached == objects
}

/// Whether deleting the centre of neighbourhood `nb` preserves topology.
pub(crate) fn is_simple(nb: u32) -> bool {
    euler_invariant(nb) && single_component(nb)
}

/// Zero-padded working copy with linear neighbour offsets.
pub(crate) struct Padded {
    pub dims: [usize; 3],
    pub data: Vec<u8>,
    pub offsets: [isize; 27],
}

impl Padded {
    pub fn new(vol: &BinaryVolume) -> Self {
        let [nx, ny, nz] = vol.dims();
        let dims = [nx + 2, ny + 2, nz + 2];
        let mut data = vec![0u8; dims[0] * dims[1] * dims[2]];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if *vol.get(x, y, z) {
                        data[(x + 1) + dims[0] * ((y + 1) + dims[1] * (z + 1))] = 1;
                    }
                }
            }
        }
        let mut offsets = [0isize; 27];
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    offsets[pos(dx, dy, dz)] = dx + dims[0] as isize * (dy + dims[1] as isize * dz);
                }
            }
        }
        Self { dims, data, offsets }
    }

    #[inline]
    pub fn neighbourhood(&self, i: usize) -> u32 {
        let mut nb = 0u32;
        for (p, &o) in self.offsets.iter().enumerate() {
            nb |= (self.data[(i as isize + o) as usize] as u32) << p;
        }
        nb
    }

    pub fn foreground(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|&i| self.data[i] != 0).collect()
    }

    pub fn write_back(&self, template: &BinaryVolume) -> BinaryVolume {
        let [px, py, _] = self.dims;
        let mut out = template.map(|_| false);
        let [nx, ny, nz] = template.dims();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if self.data[(x + 1) + px * ((y + 1) + py * (z + 1))] != 0 {
                        out.set(x, y, z, true);
                    }
                }
            }
        }
        out
    }
}

/// Thins `seg` to a one-voxel-wide 26-connected skeleton. Components,
/// cavities and tunnels are preserved.
pub fn thin3d(seg: &BinaryVolume) -> BinaryVolume {
    let mut img = Padded::new(seg);
    let directions = [
        pos(0, -1, 0),
        pos(0, 1, 0),
        pos(1, 0, 0),
        pos(-1, 0, 0),
        pos(0, 0, 1),
        pos(0, 0, -1),
    ];
    let mut alive = img.foreground();
    let mut candidates = Vec::new();
    loop {
        let mut removed = 0;
        for &dir in &directions {
            candidates.clear();
            for &i in &alive {
                if img.data[i] == 0 {
                    continue;
                }
                let nb = img.neighbourhood(i);
                if nb >> dir & 1 == 1 {
                    continue;
                }
                // endpoints keep their branch from shrinking
                if (nb & !(1 << CENTER)).count_ones() == 1 {
                    continue;
                }
                if is_simple(nb) {
                    candidates.push(i);
                }
            }
            for &i in &candidates {
                img.data[i] = 0;
                if single_component(img.neighbourhood(i)) {
                    removed += 1;
                } else {
                    img.data[i] = 1;
                }
            }
        }
        alive.retain(|&i| img.data[i] != 0);
        if removed == 0 {
            break;
        }
    }
    img.write_back(seg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::{count_components, Connectivity};
    use proptest::prelude::*;

    fn nb_from(points: &[(isize, isize, isize)]) -> u32 {
        points.iter().fold(1 << CENTER, |m, &(x, y, z)| m | 1 << pos(x, y, z))
    }

    #[test]
    fn lone_voxel_changes_euler_characteristic() {
        assert_eq!(local_euler8(1), 1);
        // a vertex buried inside the object contributes nothing
        assert_eq!(local_euler8(0xff), 0);
        assert!(!euler_invariant(nb_from(&[])));
    }

    #[test]
    fn chain_interior_is_not_simple_but_tip_is() {
        assert!(!is_simple(nb_from(&[(-1, 0, 0), (1, 0, 0)])));
        assert!(is_simple(nb_from(&[(-1, 0, 0)])));
        // corner of an L: removal keeps its two neighbours 26-adjacent
        assert!(is_simple(nb_from(&[(-1, 0, 0), (0, 1, 0)])));
    }

    #[test]
    fn removing_a_plug_that_opens_a_cavity_is_rejected() {
        // centre of a full 3x3x3 block except itself would create a cavity
        let all: Vec<_> = (0..27)
            .filter(|&p| p != CENTER)
            .map(|p| ((p % 3) as isize - 1, (p / 3 % 3) as isize - 1, (p / 9) as isize - 1))
            .collect();
        assert!(!is_simple(nb_from(&all)));
    }

    #[test]
    fn thin_chain_unchanged() {
        let v = BinaryVolume::from_fn([9, 5, 5], [1.0; 3], |x, y, z| y == 2 && z == 2 && (1..8).contains(&x)).unwrap();
        assert_eq!(thin3d(&v), v);
    }

    #[test]
    fn cylinder_thins_to_axis() {
        let (cx, cy) = (8.0, 8.0);
        let v = BinaryVolume::from_fn([17, 17, 40], [1.0; 3], |x, y, _| {
            (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= 9.0
        })
        .unwrap();
        let s = thin3d(&v);
        assert!(s.count() > 0);
        assert_eq!(count_components(&s, Connectivity::TwentySix), 1);
        for i in 0..s.len() {
            if s.voxels()[i] {
                let [x, y, _] = s.coords(i);
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                assert!(d <= 1.0, "skeleton voxel at distance {d}");
            }
        }
    }

    #[test]
    fn empty_and_full_block() {
        let e = BinaryVolume::filled([4, 4, 4], [1.0; 3], false).unwrap();
        assert_eq!(thin3d(&e).count(), 0);
        let b = BinaryVolume::filled([5, 5, 5], [1.0; 3], true).unwrap();
        let s = thin3d(&b);
        assert!(s.count() >= 1);
        assert_eq!(count_components(&s, Connectivity::TwentySix), 1);
    }

    /// 6-connected background components, counting the outside as one.
    fn background_components(v: &BinaryVolume) -> usize {
        let [nx, ny, nz] = v.dims();
        let padded = BinaryVolume::from_fn([nx + 2, ny + 2, nz + 2], [1.0; 3], |x, y, z| {
            let inside = (1..=nx).contains(&x) && (1..=ny).contains(&y) && (1..=nz).contains(&z);
            !(inside && *v.get(x - 1, y - 1, z - 1))
        })
        .unwrap();
        count_components(&padded, Connectivity::Six)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn thinning_preserves_components_and_leaves_no_interior(bits in proptest::collection::vec(any::<bool>(), 512)) {
            let v = BinaryVolume::new([8, 8, 8], [1.0; 3], bits).unwrap();
            let s = thin3d(&v);
            prop_assert_eq!(count_components(&s, Connectivity::TwentySix), count_components(&v, Connectivity::TwentySix));
            prop_assert_eq!(background_components(&s), background_components(&v));
            let img = Padded::new(&s);
            for i in img.foreground() {
                prop_assert!(img.neighbourhood(i) != u32::MAX >> 5);
            }
            for i in 0..v.len() {
                prop_assert!(!s.voxels()[i] || v.voxels()[i]);
            }
        }
    }
}
