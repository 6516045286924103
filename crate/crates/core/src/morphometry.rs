//! Per-segment diameter, length and tortuosity, capillary filtering and
//! Kruskal–Wallis group comparisons.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::centerline::{CenterlineGraph, Edge};
use crate::error::{Error, Result};
use crate::volume::{BinaryVolume, ScalarVolume, Volume};

/// Strict upper bound on the mean diameter of a capillary.
pub const CAPILLARY_MAX_DIAMETER_UM: f64 = 10.0;

/// Group assignments enumerated for an exact Kruskal–Wallis p-value.
pub const EXACT_ENUMERATION_LIMIT: u64 = 200_000;

/// 1D squared distance transform (Felzenszwalb–Huttenlocher lower envelope)
/// of `f` sampled every `step` units.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let s2 = step * step;
    let pos = |q: usize| q as f64;
    let mut k = 0usize;
    // first finite sample seeds the envelope
    let Some(first) = (0..n).find(|&q| f[q].is_finite()) else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] / s2 + pos(q) * pos(q)) - (f[p] / s2 + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = (pos(q) - pos(v[k])) * step;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every grid position to the nearest seed.
/// With `outside_is_seed`, every position just past the grid border is a
/// seed as well. Without any seed the result is infinite everywhere.
pub(crate) fn squared_edt(dims: [usize; 3], spacing: [f64; 3], seed: impl Fn(usize) -> bool, outside_is_seed: bool) -> Vec<f64> {
    let pad = outside_is_seed as usize;
    let [nx, ny, nz] = dims;
    let pd = [nx + 2 * pad, ny + 2 * pad, nz + 2 * pad];
    let idx = |x: usize, y: usize, z: usize| x + pd[0] * (y + pd[1] * z);
    let mut d = vec![if outside_is_seed { 0.0f64 } else { f64::INFINITY }; pd[0] * pd[1] * pd[2]];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                d[idx(x + pad, y + pad, z + pad)] = if seed(i) { 0.0 } else { f64::INFINITY };
            }
        }
    }
    let longest = pd.iter().copied().max().unwrap();
    let (mut line, mut out) = (vec![0.0; longest], vec![0.0; longest]);
    let (mut v, mut zb) = (vec![0usize; longest], vec![0.0; longest + 1]);
    for axis in 0..3 {
        let n = pd[axis];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..pd[b] {
            for i in 0..pd[a] {
                let at = |t: usize| {
                    let mut c = [0usize; 3];
                    c[axis] = t;
                    c[a] = i;
                    c[b] = j;
                    idx(c[0], c[1], c[2])
                };
                for t in 0..n {
                    line[t] = d[at(t)];
                }
                edt_1d(&line[..n], spacing[axis], &mut out[..n], &mut v, &mut zb);
                for t in 0..n {
                    d[at(t)] = out[t];
                }
            }
        }
    }
    if pad == 0 {
        return d;
    }
    let mut cropped = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                cropped.push(d[idx(x + 1, y + 1, z + 1)]);
            }
        }
    }
    cropped
}

/// Exact Euclidean distance (in physical units) from every foreground voxel
/// to the nearest background voxel; background voxels get 0. Space outside
/// the grid counts as background, so with an all-foreground volume each
/// voxel's value is its distance to the first voxel position past the
/// border.
pub fn distance_transform(seg: &BinaryVolume) -> ScalarVolume {
    let d = squared_edt(seg.dims(), seg.spacing(), |i| !seg.voxels()[i], true);
    Volume::new(seg.dims(), seg.spacing(), d.iter().map(|v| v.sqrt() as f32).collect()).expect("same geometry")
}

/// Like [`distance_transform`] but only background voxels inside the grid
/// count, so vessels cut by the volume faces are not thinned near the border.
/// Falls back to [`distance_transform`] when the grid has no background.
pub fn interior_distance_transform(seg: &BinaryVolume) -> ScalarVolume {
    if seg.voxels().iter().all(|&v| v) {
        return distance_transform(seg);
    }
    let d = squared_edt(seg.dims(), seg.spacing(), |i| !seg.voxels()[i], false);
    Volume::new(seg.dims(), seg.spacing(), d.iter().map(|v| v.sqrt() as f32).collect()).expect("same geometry")
}

/// Twice the mean distance-transform value along the edge path.
pub fn segment_diameter(edge: &Edge, dt: &ScalarVolume) -> Result<f64> {
    if edge.path.is_empty() {
        return Err(Error::Empty("edge has an empty path".into()));
    }
    let dims = dt.dims();
    let mut sum = 0.0;
    for p in &edge.path {
        if (0..3).any(|a| p[a] >= dims[a]) {
            return Err(Error::DimensionMismatch(format!("path voxel {p:?} outside {dims:?}")));
        }
        sum += *dt.get(p[0], p[1], p[2]) as f64;
    }
    Ok(2.0 * sum / edge.path.len() as f64)
}

/// Path length over endpoint distance. Closed cycles have no chord and are
/// reported as `Degenerate`.
pub fn tortuosity(edge: &Edge, spacing: [f64; 3]) -> Result<f64> {
    let (a, b) = match (edge.path.first(), edge.path.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Empty("edge has an empty path".into())),
    };
    let chord = (0..3)
        .map(|k| ((a[k] as f64 - b[k] as f64) * spacing[k]).powi(2))
        .sum::<f64>()
        .sqrt();
    if chord == 0.0 {
        return Err(Error::Degenerate("closed cycle has no endpoint distance".into()));
    }
    Ok(edge.length_um / chord)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: usize,
    pub group: String,
    pub diameter_um: f64,
    pub length_um: f64,
    /// Empty for closed cycles.
    pub tortuosity: Option<f64>,
}

/// One record per graph edge.
pub fn measure_segments(graph: &CenterlineGraph, dt: &ScalarVolume, group: &str) -> Result<Vec<SegmentRecord>> {
    graph
        .edges
        .iter()
        .enumerate()
        .map(|(id, e)| {
            let tort = match tortuosity(e, dt.spacing()) {
                Ok(t) => Some(t),
                Err(Error::Degenerate(_)) => None,
                Err(other) => return Err(other),
            };
            Ok(SegmentRecord {
                id,
                group: group.to_string(),
                diameter_um: segment_diameter(e, dt)?,
                length_um: e.length_um,
                tortuosity: tort,
            })
        })
        .collect()
}

/// Keeps segments with mean diameter strictly below 10 µm.
pub fn filter_capillaries(records: &[SegmentRecord]) -> Vec<SegmentRecord> {
    records
        .iter()
        .filter(|r| r.diameter_um < CAPILLARY_MAX_DIAMETER_UM)
        .cloned()
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KruskalWallis {
    /// Tie-corrected statistic.
    pub h: f64,
    /// Exact permutation p-value when the number of group assignments is
    /// at most [`EXACT_ENUMERATION_LIMIT`], otherwise the chi-square p.
    pub p: f64,
    /// Chi-square upper tail with `k - 1` degrees of freedom.
    pub p_asymptotic: f64,
    pub exact: bool,
}

/// Average ranks (1-based) of the pooled values and the tie correction
/// factor `1 - sum(t^3 - t) / (N^3 - N)`.
fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let nf = n as f64;
    (ranks, 1.0 - ties / (nf * nf * nf - nf))
}

fn h_statistic(rank_sums: &[f64], sizes: &[usize], n: usize, correction: f64) -> f64 {
    let nf = n as f64;
    let s: f64 = rank_sums.iter().zip(sizes).map(|(r, &k)| r * r / k as f64).sum();
    (12.0 / (nf * (nf + 1.0)) * s - 3.0 * (nf + 1.0)) / correction
}

fn multinomial(sizes: &[usize]) -> Option<u64> {
    let mut acc: u64 = 1;
    let mut total = 0u64;
    for &k in sizes {
        for i in 1..=k as u64 {
            total += 1;
            // acc * total / i stays integral: running product of binomials
            acc = acc.checked_mul(total)? / i;
        }
    }
    Some(acc)
}

/// Counts assignments of pooled ranks to groups with H >= `h_obs`.
fn exact_count(ranks: &[f64], sizes: &[usize], correction: f64, h_obs: f64) -> (u64, u64) {
    fn rec(
        item: usize,
        ranks: &[f64],
        sizes: &[usize],
        left: &mut [usize],
        sums: &mut [f64],
        correction: f64,
        h_obs: f64,
        counts: &mut (u64, u64),
    ) {
        if item == ranks.len() {
            counts.1 += 1;
            let h = h_statistic(sums, sizes, ranks.len(), correction);
            if h >= h_obs - 1e-9 * h_obs.abs().max(1.0) {
                counts.0 += 1;
            }
            return;
        }
        for g in 0..sizes.len() {
            if left[g] == 0 {
                continue;
            }
            left[g] -= 1;
            sums[g] += ranks[item];
            rec(item + 1, ranks, sizes, left, sums, correction, h_obs, counts);
            sums[g] -= ranks[item];
            left[g] += 1;
        }
    }
    let mut left = sizes.to_vec();
    let mut sums = vec![0.0; sizes.len()];
    let mut counts = (0, 0);
    rec(0, ranks, sizes, &mut left, &mut sums, correction, h_obs, &mut counts);
    counts
}

/// Kruskal–Wallis H test across two or more groups.
pub fn kruskal_wallis(groups: &[&[f64]]) -> Result<KruskalWallis> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("Kruskal-Wallis needs at least two groups".into()));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Empty("a group has no samples".into()));
    }
    let pooled: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("samples must be finite".into()));
    }
    let n = pooled.len();
    if n < 3 {
        return Err(Error::InvalidArgument("Kruskal-Wallis needs at least 3 samples in total".into()));
    }
    let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
    let (ranks, correction) = midranks(&pooled);
    if correction <= 0.0 {
        // every value identical
        return Ok(KruskalWallis {
            h: 0.0,
            p: 1.0,
            p_asymptotic: 1.0,
            exact: true,
        });
    }
    let mut sums = vec![0.0; groups.len()];
    let mut at = 0;
    for (g, &k) in sizes.iter().enumerate() {
        sums[g] = ranks[at..at + k].iter().sum();
        at += k;
    }
    let h = h_statistic(&sums, &sizes, n, correction).max(0.0);
    let chi = ChiSquared::new((groups.len() - 1) as f64).expect("df >= 1");
    let p_asymptotic = chi.sf(h).clamp(0.0, 1.0);
    let (p, exact) = match multinomial(&sizes) {
        Some(m) if m <= EXACT_ENUMERATION_LIMIT => {
            let (hits, total) = exact_count(&ranks, &sizes, correction, h);
            (hits as f64 / total as f64, true)
        }
        _ => (p_asymptotic, false),
    };
    Ok(KruskalWallis {
        h,
        p,
        p_asymptotic,
        exact,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[serde(rename = "diameter_um")]
    Diameter,
    #[serde(rename = "length_um")]
    Length,
    Tortuosity,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Diameter, Metric::Length, Metric::Tortuosity];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Diameter => "diameter_um",
            Metric::Length => "length_um",
            Metric::Tortuosity => "tortuosity",
        }
    }

    /// Value of this metric for a record; cycles have no tortuosity.
    pub fn value(self, r: &SegmentRecord) -> Option<f64> {
        match self {
            Metric::Diameter => Some(r.diameter_um),
            Metric::Length => Some(r.length_um),
            Metric::Tortuosity => r.tortuosity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub group_a: String,
    pub group_b: String,
    pub metric: String,
    pub delta_mu: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub p_raw: f64,
    pub p_bonferroni: f64,
}

/// Values of `metric` per group, groups in order of first appearance.
pub fn group_values(records: &[SegmentRecord], metric: Metric) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for r in records {
        let Some(v) = metric.value(r) else { continue };
        match out.iter_mut().find(|(g, _)| *g == r.group) {
            Some((_, vals)) => vals.push(v),
            None => out.push((r.group.clone(), vec![v])),
        }
    }
    out
}

/// Pairwise Kruskal–Wallis tests between all groups with Bonferroni
/// correction over the number of pairs.
pub fn compare_groups(groups: &[(String, Vec<f64>)], metric: &str) -> Result<Vec<ComparisonResult>> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("need at least two groups to compare".into()));
    }
    let m = groups.len() * (groups.len() - 1) / 2;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut out = Vec::with_capacity(m);
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let (a, b) = (&groups[i], &groups[j]);
            let kw = kruskal_wallis(&[&a.1, &b.1])?;
            out.push(ComparisonResult {
                group_a: a.0.clone(),
                group_b: b.0.clone(),
                metric: metric.to_string(),
                delta_mu: (mean(&a.1) - mean(&b.1)).abs(),
                h: kw.h,
                p_raw: kw.p,
                p_bonferroni: (m as f64 * kw.p).min(1.0),
            });
        }
    }
    Ok(out)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::csv_at(path, e))?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const SEGMENT_COLUMNS: [&str; 5] = ["id", "group", "diameter_um", "length_um", "tortuosity"];
pub const COMPARISON_COLUMNS: [&str; 7] = ["group_a", "group_b", "metric", "delta_mu", "H", "p_raw", "p_bonferroni"];

pub fn write_segments_csv(path: &Path, records: &[SegmentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv_at(path, e))?;
    w.write_record(SEGMENT_COLUMNS)?;
    for r in records {
        let t = r.tortuosity.map(|t| t.to_string()).unwrap_or_default();
        w.write_record([
            r.id.to_string(),
            r.group.clone(),
            r.diameter_um.to_string(),
            r.length_um.to_string(),
            t,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_segments_csv(path: &Path) -> Result<Vec<SegmentRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv_at(path, e))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_comparisons_csv(path: &Path, rows: &[ComparisonResult]) -> Result<()> {
    write_rows(path, rows, &COMPARISON_COLUMNS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centerline::build_graph;
    use proptest::prelude::*;

    fn brute_dt(seg: &BinaryVolume) -> Vec<f64> {
        let [nx, ny, nz] = seg.dims();
        let s = seg.spacing();
        let mut bg = Vec::new();
        for z in -1..=nz as isize {
            for y in -1..=ny as isize {
                for x in -1..=nx as isize {
                    let inside = x >= 0 && y >= 0 && z >= 0 && (x as usize) < nx && (y as usize) < ny && (z as usize) < nz;
                    if !inside || !*seg.get(x as usize, y as usize, z as usize) {
                        bg.push([x, y, z]);
                    }
                }
            }
        }
        (0..seg.len())
            .map(|i| {
                if !seg.voxels()[i] {
                    return 0.0;
                }
                let c = seg.coords(i);
                bg.iter()
                    .map(|b| (0..3).map(|a| ((b[a] - c[a] as isize) as f64 * s[a]).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    }

    #[test]
    fn interior_transform_ignores_faces() {
        // slab crossing the x faces: interior distance only sees y/z walls
        let seg = Volume::from_fn([10, 9, 9], [1.0; 3], |_, y, z| (2..7).contains(&y) && (2..7).contains(&z)).unwrap();
        let border = distance_transform(&seg);
        let inner = interior_distance_transform(&seg);
        assert_eq!(*border.get(0, 4, 4), 1.0);
        assert_eq!(*inner.get(0, 4, 4), 3.0);
        assert_eq!(*inner.get(5, 4, 4), *border.get(5, 4, 4));
        let full = BinaryVolume::filled([4, 4, 4], [1.0; 3], true).unwrap();
        assert_eq!(interior_distance_transform(&full), distance_transform(&full));
    }

    #[test]
    fn single_voxel_and_full_volume() {
        let mut v = BinaryVolume::filled([5, 5, 5], [2.0; 3], false).unwrap();
        v.set(2, 2, 2, true);
        assert_eq!(*distance_transform(&v).get(2, 2, 2), 2.0);
        let full = BinaryVolume::filled([5, 6, 7], [1.0; 3], true).unwrap();
        let dt = distance_transform(&full);
        assert_eq!(*dt.get(0, 3, 3), 1.0);
        assert_eq!(*dt.get(2, 3, 3), 3.0);
    }

    #[test]
    fn cylinder_diameter() {
        let v = BinaryVolume::from_fn([32, 32, 32], [1.0; 3], |x, y, _| {
            (x as f64 - 16.0).powi(2) + (y as f64 - 16.0).powi(2) <= 16.0
        })
        .unwrap();
        let dt = distance_transform(&v);
        let brute = brute_dt(&v);
        for (a, b) in dt.voxels().iter().zip(&brute) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
        let axis = *dt.get(16, 16, 16);
        assert!((4.0..=5.0).contains(&axis));
        let edge = Edge {
            n1: 0,
            n2: 1,
            path: (4..28).map(|z| [16, 16, z]).collect(),
            length_um: 23.0,
        };
        let d = segment_diameter(&edge, &dt).unwrap();
        assert!((d - 8.0).abs() <= 1.0, "diameter {d}");
    }

    #[test]
    fn one_voxel_tube_has_diameter_two() {
        let v = BinaryVolume::from_fn([12, 5, 5], [1.0; 3], |_, y, z| y == 2 && z == 2).unwrap();
        let g = build_graph(&v, [1.0; 3]);
        let d = segment_diameter(&g.edges[0], &distance_transform(&v)).unwrap();
        assert!((d - 2.0).abs() < 1e-9);
    }

    #[test]
    fn diameter_is_unit_consistent() {
        let coarse = BinaryVolume::from_fn([16, 16, 8], [1.0; 3], |x, y, _| {
            (x as f64 - 8.0).powi(2) + (y as f64 - 8.0).powi(2) <= 9.0
        })
        .unwrap();
        let fine = BinaryVolume::from_fn([32, 32, 16], [0.5; 3], |x, y, _| {
            (x as f64 / 2.0 - 8.0).powi(2) + (y as f64 / 2.0 - 8.0).powi(2) <= 9.0
        })
        .unwrap();
        let e1 = Edge { n1: 0, n2: 1, path: (2..6).map(|z| [8, 8, z]).collect(), length_um: 3.0 };
        let e2 = Edge { n1: 0, n2: 1, path: (4..12).map(|z| [16, 16, z]).collect(), length_um: 3.5 };
        let d1 = segment_diameter(&e1, &distance_transform(&coarse)).unwrap();
        let d2 = segment_diameter(&e2, &distance_transform(&fine)).unwrap();
        assert!((d1 - d2).abs() <= 1.0, "{d1} vs {d2}");
    }

    #[test]
    fn tortuosity_cases() {
        let straight = Edge { n1: 0, n2: 1, path: (0..11).map(|x| [x, 0, 0]).collect(), length_um: 10.0 };
        assert_eq!(tortuosity(&straight, [1.0; 3]).unwrap(), 1.0);
        let mut l: Vec<[usize; 3]> = (0..=10).map(|x| [x, 0, 0]).collect();
        l.extend((1..=10).map(|y| [10, y, 0]));
        let len = crate::centerline::path_length(&l, [1.0; 3]);
        let edge = Edge { n1: 0, n2: 1, path: l, length_um: len };
        assert!((tortuosity(&edge, [1.0; 3]).unwrap() - 20.0 / 200f64.sqrt()).abs() < 1e-12);
        let cycle = Edge { n1: 0, n2: 0, path: vec![[1, 1, 1], [2, 1, 1], [1, 1, 1]], length_um: 2.0 };
        assert!(matches!(tortuosity(&cycle, [1.0; 3]), Err(Error::Degenerate(_))));
    }

    fn rec(d: f64) -> SegmentRecord {
        SegmentRecord { id: 0, group: "a".into(), diameter_um: d, length_um: 1.0, tortuosity: Some(1.0) }
    }

    #[test]
    fn capillary_threshold_is_strict() {
        let kept = filter_capillaries(&[rec(9.99), rec(10.0), rec(3.0), rec(12.0)]);
        assert_eq!(kept.iter().map(|r| r.diameter_um).collect::<Vec<_>>(), vec![9.99, 3.0]);
        assert!(filter_capillaries(&[]).is_empty());
    }

    #[test]
    fn kw_reference_values() {
        let same = kruskal_wallis(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]).unwrap();
        assert!(same.h.abs() < 1e-12);
        assert!((same.p - 1.0).abs() < 1e-12);
        let sep = kruskal_wallis(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        assert!((sep.h - 3.857142857).abs() < 1e-6);
        assert!((sep.p_asymptotic - 0.0495).abs() < 1e-4);
        assert!(sep.exact);
        // 2 of the 20 splits are as extreme
        assert!((sep.p - 0.1).abs() < 1e-12);
        let flat = kruskal_wallis(&[&[2.0, 2.0], &[2.0]]).unwrap();
        assert_eq!((flat.h, flat.p), (0.0, 1.0));
        assert!(kruskal_wallis(&[&[1.0], &[]]).is_err());
        assert!(kruskal_wallis(&[&[1.0], &[2.0]]).is_err());
    }

    #[test]
    fn large_samples_fall_back_to_chi_square() {
        let a: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..40).map(|i| i as f64 + 7.5).collect();
        let kw = kruskal_wallis(&[&a, &b]).unwrap();
        assert!(!kw.exact);
        assert_eq!(kw.p, kw.p_asymptotic);
    }

    #[test]
    fn pairwise_comparisons() {
        let groups: Vec<(String, Vec<f64>)> = (0..4)
            .map(|g| (format!("g{g}"), (0..6).map(|i| (i * 3 + g) as f64).collect()))
            .collect();
        let rows = compare_groups(&groups, "diameter_um").unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.p_raw));
            assert_eq!(r.p_bonferroni, (6.0 * r.p_raw).min(1.0));
        }
        let ident = vec![("a".to_string(), vec![1.0, 2.0, 3.0]), ("b".to_string(), vec![1.0, 2.0, 3.0])];
        let r = compare_groups(&ident, "x").unwrap();
        assert_eq!(r[0].delta_mu, 0.0);
        assert_eq!(r[0].p_bonferroni, 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("segments.csv");
        let mut r2 = rec(4.25);
        r2.id = 1;
        r2.tortuosity = None;
        let records = vec![rec(3.5), r2];
        write_segments_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "id,group,diameter_um,length_um,tortuosity");
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("4.25"));
        assert_eq!(read_segments_csv(&path).unwrap(), records);

        let cpath = dir.path().join("comparisons.csv");
        write_comparisons_csv(&cpath, &[]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&cpath).unwrap().trim(),
            "group_a,group_b,metric,delta_mu,H,p_raw,p_bonferroni"
        );
        let rows = compare_groups(&[("a".into(), vec![1.0, 2.0]), ("b".into(), vec![3.0, 4.0])], "length_um").unwrap();
        write_comparisons_csv(&cpath, &rows).unwrap();
        let text = std::fs::read_to_string(&cpath).unwrap();
        assert!(text.starts_with("group_a,group_b,metric,delta_mu,H,p_raw,p_bonferroni\n"));
    }

    proptest! {
        #[test]
        fn dt_matches_brute_force(bits in proptest::collection::vec(proptest::bool::weighted(0.7), 120), sx in 0.5f64..2.0) {
            let v = BinaryVolume::new([6, 5, 4], [sx, 1.0, 1.5], bits).unwrap();
            let dt = distance_transform(&v);
            for (a, b) in dt.voxels().iter().zip(brute_dt(&v)) {
                prop_assert!((*a as f64 - b).abs() < 1e-5);
            }
        }

        #[test]
        fn kw_is_rank_invariant(a in proptest::collection::vec(-50.0f64..50.0, 2..6), b in proptest::collection::vec(-50.0f64..50.0, 2..6)) {
            let k1 = kruskal_wallis(&[&a, &b]).unwrap();
            let f = |v: &Vec<f64>| v.iter().map(|x| x.powi(3) + 4.0).collect::<Vec<_>>();
            let k2 = kruskal_wallis(&[&f(&a), &f(&b)]).unwrap();
            prop_assert!((k1.h - k2.h).abs() < 1e-9);
            prop_assert!(k1.h >= 0.0);
            prop_assert!((k1.p - k2.p).abs() < 1e-12);
        }
    }
}
