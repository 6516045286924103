//! Analytic gradients against a central-difference oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselseg::net::{masked_cross_entropy, parse_arch, ArchOptions, Mode, Model, NetSpec, Params};

fn loss_at(model: &Model<f64>, x: &[f64], labels: &[bool], seed: u64, mask: &[bool]) -> f64 {
    let out = model.forward_sample(x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    // mask held at its unperturbed value, as in training
    out.probs
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, &y), _)| {
            let p = p[1].clamp(1e-7, 1.0 - 1e-7);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

fn max_relative_error(spec: NetSpec, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = Params::<f64>::he_init(&spec, seed);
    let x: Vec<f64> = (0..spec.fov_voxels()).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<bool> = (0..spec.roi_voxels()).map(|_| rng.random::<bool>()).collect();
    let drop_seed = 77;
    let model = Model::new(spec.clone(), params.clone()).unwrap();
    let out = model.forward_sample(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(drop_seed)).unwrap();
    let p_fg: Vec<f64> = out.probs.iter().map(|p| p[1]).collect();
    let ml = masked_cross_entropy(&p_fg, &labels).unwrap();
    let mut grads = params.zeros_like();
    model.backward_sample(out.cache.as_ref().unwrap(), &ml.grad_logits, &mut grads).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = model.clone();
    for a in 0..params.arrays.len() {
        for i in 0..params.arrays[a].data.len() {
            let orig = params.arrays[a].data[i];
            probe.params_mut().arrays[a].data[i] = orig + h;
            let up = loss_at(&probe, &x, &labels, drop_seed, &ml.mask);
            probe.params_mut().arrays[a].data[i] = orig - h;
            let down = loss_at(&probe, &x, &labels, drop_seed, &ml.mask);
            probe.params_mut().arrays[a].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.arrays[a].data[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn pooled_dense_spec_matches_finite_differences() {
    let opts = ArchOptions {
        fov: [7, 7, 3],
        roi: [3, 3, 1],
        channels_early: 8,
        channels_late: 8,
        hidden_width: 16,
        dropout: 0.5,
    };
    let spec = parse_arch("C 3x3x3 - P - NN", &opts).unwrap();
    let (worst, checked) = max_relative_error(spec.clone(), 3);
    assert_eq!(checked, Params::<f64>::zeros(&spec).len());
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn deeper_spec_matches_finite_differences() {
    let opts = ArchOptions {
        fov: [9, 9, 5],
        roi: [1, 1, 1],
        channels_early: 3,
        channels_late: 4,
        hidden_width: 6,
        dropout: 0.3,
    };
    let spec = parse_arch("2*C 3x3x3 - P - C 3x3 - P - 2*NN", &opts).unwrap();
    let (worst, _) = max_relative_error(spec, 5);
    assert!(worst < 1e-4, "max relative error {worst:e}");
}
