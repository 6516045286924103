//! Library stages chained on synthetic phantoms with known truth.

use proptest::prelude::*;
use vesselseg::centerline::{build_graph, extract_centerline};
use vesselseg::metrics::evaluate;
use vesselseg::morphometry::{interior_distance_transform, measure_segments};
use vesselseg::motion::{correct_stack, DemonsConfig};
use vesselseg::phantom::{generate, PhantomSpec};
use vesselseg::segment::postprocess;
use vesselseg::volume::{normalize_percentile, Volume};

fn neighbour_mse(v: &Volume<f32>, z: usize) -> f64 {
    let (sa, sb) = (v.slice(z), v.slice(z - 1));
    sa.iter().zip(sb).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / sa.len() as f64
}

#[test]
fn motion_correction_aligns_neighbouring_slices() {
    let spec = PhantomSpec {
        dims: [48, 48, 6],
        tubes: 4,
        motion_amplitude: 2.0,
        noise_sigma: 0.01,
        rbc_per_100um: 0.0,
        seed: 3,
        ..Default::default()
    };
    let ph = generate(&spec).unwrap();
    let corrected = correct_stack(&ph.image, &DemonsConfig::default()).unwrap();
    let (mut before, mut after) = (0.0, 0.0);
    for z in 1..spec.dims[2] {
        before += neighbour_mse(ph.image.grid(), z);
        after += neighbour_mse(corrected.volume.grid(), z);
    }
    assert!(after < before, "neighbour mse before {before}, after {after}");
    assert_eq!(corrected.volume.grid().slice(0), ph.image.grid().slice(0));
}

#[test]
fn straight_tube_morphometry_matches_truth() {
    let r = 4.0;
    let spec = PhantomSpec {
        dims: [56, 40, 40],
        tubes: 1,
        radius_range: [r, r],
        step_angle_deg: 0.0,
        seed: 11,
        ..Default::default()
    };
    let ph = generate(&spec).unwrap();
    let skel = extract_centerline(&ph.gt).unwrap();
    let graph = build_graph(&skel, ph.gt.spacing());
    let dt = interior_distance_transform(&ph.gt);
    let records = measure_segments(&graph, &dt, "tube").unwrap();
    let longest = records
        .iter()
        .max_by(|a, b| a.length_um.total_cmp(&b.length_um))
        .expect("at least one segment");
    assert!((longest.diameter_um - 2.0 * r).abs() <= 1.5, "diameter {}", longest.diameter_um);
    let truth = &ph.tubes[0];
    assert!(
        (longest.length_um - truth.length_um).abs() <= 0.2 * truth.length_um,
        "length {} vs {}",
        longest.length_um,
        truth.length_um
    );
}

#[test]
fn postprocessing_keeps_a_clean_mask_mostly_intact() {
    let ph = generate(&PhantomSpec { dims: [40, 40, 24], tubes: 3, seed: 5, ..Default::default() }).unwrap();
    let own = evaluate(&ph.gt, &ph.gt, None).unwrap();
    assert_eq!(own.dice, Some(1.0));
    assert_eq!(own.mhd_boundary, Some(0.0));
    let cleaned = postprocess(&ph.gt, 10).unwrap();
    let report = evaluate(&ph.gt, &cleaned, None).unwrap();
    assert!(report.dice.unwrap() > 0.9, "dice {:?}", report.dice);
}

#[test]
fn normalized_phantom_is_unit_range() {
    let ph = generate(&PhantomSpec { dims: [32, 32, 16], tubes: 2, seed: 2, ..Default::default() }).unwrap();
    let unit = normalize_percentile(&ph.image, 1.0, 99.0).unwrap();
    assert!(unit.grid().voxels().iter().all(|v| (0.0..=1.0).contains(v)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn phantom_invariants(seed in 0u64..1000, tubes in 0usize..4, amp in 0.0f64..2.0) {
        let spec = PhantomSpec { dims: [28, 28, 12], tubes, motion_amplitude: amp, seed, ..Default::default() };
        let Ok(ph) = generate(&spec) else { return Ok(()) };
        prop_assert_eq!(ph.tubes.len(), tubes);
        prop_assert_eq!(ph.motion.len(), spec.dims[2]);
        prop_assert!(ph.motion.iter().all(|f| f.max_magnitude() <= amp + 1e-9));
        prop_assert!(ph.image.grid().voxels().iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert_eq!(ph.gt.count() == 0, tubes == 0);
        for t in &ph.tubes {
            prop_assert!(t.tortuosity >= 1.0 - 1e-9);
            prop_assert!(t.chord_um <= t.length_um + 1e-9);
        }
        let again = generate(&spec).unwrap();
        prop_assert_eq!(again.image.grid().voxels(), ph.image.grid().voxels());
    }
}
