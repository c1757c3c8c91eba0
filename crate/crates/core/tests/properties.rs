use proptest::prelude::*;

use osflow::flow::{integrate, FlowOptions, Scheme};
use osflow::kernels::{sup_distance_kernels, Kernel, KernelVec};
use osflow::measures::{atomic_tv_distance, DiscreteMeasureVec};
use osflow::moduli::{bihari_bound, ComposedModulus, ModulusSpec};
use osflow::sampling::AxisBox;
use osflow::scenario::ScenarioSpec;
use osflow::stability::{flow_sup_distance, q_zeta, run_twins, CloudSpec, TwinSpec};

fn measure(k: usize, atoms: &[(usize, f64, f64)]) -> DiscreteMeasureVec {
    let mut m = DiscreteMeasureVec::empty(k, 1);
    for &(i, x, w) in atoms {
        m.push(i % k, &[x], w);
    }
    m
}

fn atoms(k: usize) -> impl Strategy<Value = Vec<(usize, f64, f64)>> {
    prop::collection::vec((0..k, -2.0..2.0f64, 0.01..1.0f64), 1..12)
}

/// One-dimensional scenario driven only by `u`, so translations commute with the flow.
fn scenario(atoms: &[(usize, f64, f64)], k: usize, sat: f64) -> ScenarioSpec {
    let initial: Vec<String> =
        atoms.iter().map(|&(i, x, w)| format!(r#"{{"species": {}, "pos": [{x:?}], "w": {w:?}}}"#, i % k)).collect();
    let gain = vec!["1.0"; k].join(", ");
    let text = format!(
        r#"{{"schema": 1, "name": "p", "horizon": 0.5, "dim": 1, "species": {k},
        "velocity": {{"family": "linear_u", "params": {{"gain": [{gain}], "sat": {sat:?}}}, "sup_bound": {sat:?},
                     "modulus": {{"family": "linear", "scale": 1.0}}}},
        "kernels": {{"entries": {{"family": "gaussian", "params": {{"sigma": 0.5, "height": 1.0}}}},
                    "modulus": {{"family": "linear", "scale": 2.0}}, "sup_bound": 1.0}},
        "initial": [{}]}}"#,
        initial.join(", ")
    );
    ScenarioSpec::from_json(&text).unwrap()
}

fn gaussians(k: usize, sigma: f64) -> KernelVec {
    KernelVec::uniform(k, Kernel::Gaussian { sigma, height: 1.0 }, ModulusSpec::linear(4.0).unwrap(), 1.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tv_distance_is_a_metric(a in atoms(2), b in atoms(2), c in atoms(2)) {
        let (a, b, c) = (measure(2, &a), measure(2, &b), measure(2, &c));
        let ab = atomic_tv_distance(&a, &b, 0.0).unwrap();
        prop_assert!((ab - atomic_tv_distance(&b, &a, 0.0).unwrap()).abs() <= 1e-15 * ab);
        prop_assert_eq!(atomic_tv_distance(&a, &a, 0.0).unwrap(), 0.0);
        let ac = atomic_tv_distance(&a, &c, 0.0).unwrap();
        let cb = atomic_tv_distance(&c, &b, 0.0).unwrap();
        prop_assert!(ab <= ac + cb + 1e-12);
        prop_assert!(ab <= a.tv_norm().total + b.tv_norm().total + 1e-12);
    }

    #[test]
    fn convolution_is_linear_and_bounded(a in atoms(2), b in atoms(2), x in -3.0..3.0f64, c in 0.0..5.0f64) {
        let kv = gaussians(2, 0.7);
        let (ma, mb) = (measure(2, &a), measure(2, &b));
        let scaled: Vec<_> = a.iter().map(|&(i, p, w)| (i, p, c * w)).collect();
        let ua = ma.convolve_at(&kv, 0, &[x]);
        let ub = mb.convolve_at(&kv, 0, &[x]);
        let us = measure(2, &scaled).convolve_at(&kv, 0, &[x]);
        let uu = ma.union(&mb).unwrap().convolve_at(&kv, 0, &[x]);
        for j in 0..2 {
            prop_assert!((us[j] - c * ua[j]).abs() <= 1e-12 * (1.0 + c * ua[j].abs()));
            prop_assert!((uu[j] - ua[j] - ub[j]).abs() <= 1e-12 * (1.0 + uu[j].abs()));
            prop_assert!(ua[j].abs() <= ma.tv_norm().per_species[j] + 1e-12);
        }
    }

    #[test]
    fn bihari_bound_is_monotone(scale in 0.5..3.0f64, a in 0.1..3.0f64, m in 1e-8..1e-2f64, f in 1.0..10.0f64, t in 0.1..1.0f64) {
        let c = ComposedModulus::plain(ModulusSpec::log_linear(scale).unwrap());
        let base = bihari_bound(&c, a, m, t).unwrap();
        prop_assert!(base > 0.0);
        prop_assert!(bihari_bound(&c, a, m * f, t).unwrap() >= base);
        prop_assert!(bihari_bound(&c, a, m, t * 1.5).unwrap() >= base);
        prop_assert_eq!(bihari_bound(&c, a, 0.0, t).unwrap(), 0.0);
    }

    #[test]
    fn sampled_sup_distance_grows_with_samples(s1 in 0.2..1.0f64, w in 0.3..2.0f64, n in 1u64..200) {
        let eta = gaussians(1, s1);
        let nu = KernelVec::uniform(1, Kernel::Hat { width: w, height: 1.0 }, ModulusSpec::linear(4.0).unwrap(), 1.0).unwrap();
        let region = AxisBox::cube(1, 3.0);
        let small = sup_distance_kernels(&eta, &nu, &region, n).unwrap();
        let large = sup_distance_kernels(&eta, &nu, &region, 2 * n).unwrap();
        prop_assert!(!small.exact);
        prop_assert!(small.value <= large.value);
        prop_assert!(large.value <= 1.0 + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn atoms_respect_the_speed_bound(a in atoms(2), sat in 0.1..2.0f64) {
        let s = scenario(&a, 2, sat);
        let traj = integrate(&s, FlowOptions::new(0.05, Scheme::Rk4), &[]).unwrap();
        prop_assert!(traj.mass_is_constant());
        prop_assert!(traj.max_speed <= sat + 1e-12);
        let start = traj.initial();
        for snap in &traj.snapshots {
            for (s0, st) in start.species.iter().zip(&snap.measure.species) {
                for (x0, xt) in s0.positions.iter().zip(&st.positions) {
                    prop_assert!((xt - x0).abs() <= sat * snap.t + 1e-12);
                }
            }
        }
    }

    #[test]
    fn flow_commutes_with_translation(a in atoms(1), shift in -5.0..5.0f64) {
        let moved: Vec<_> = a.iter().map(|&(i, x, w)| (i, x + shift, w)).collect();
        let opts = FlowOptions::new(0.05, Scheme::Rk4);
        let t0 = integrate(&scenario(&a, 1, 0.8), opts, &[]).unwrap();
        let t1 = integrate(&scenario(&moved, 1, 0.8), opts, &[]).unwrap();
        for (s0, s1) in t0.snapshots.iter().zip(&t1.snapshots) {
            for (x0, x1) in s0.measure.species[0].positions.iter().zip(&s1.measure.species[0].positions) {
                prop_assert!((x1 - x0 - shift).abs() <= 1e-9 * (1.0 + shift.abs()));
            }
        }
    }

    #[test]
    fn cloud_average_is_below_the_sup(a in atoms(2), b in atoms(2)) {
        let k = 2;
        let tw = TwinSpec::new(
            scenario(&a, k, 0.6),
            scenario(&b, k, 0.6),
            CloudSpec { lo: Some(vec![-3.0]), hi: Some(vec![3.0]), resolution: 8, coarse: false },
        ).unwrap();
        let run = run_twins(&tw, FlowOptions::new(0.1, Scheme::Rk2)).unwrap();
        let q = q_zeta(&run).unwrap();
        let (sup, _) = flow_sup_distance(&run).unwrap();
        prop_assert_eq!(q[0], 0.0);
        for (qn, sn) in q.iter().zip(&sup) {
            prop_assert!(*qn <= k as f64 * sn + 1e-12);
        }
    }
}
