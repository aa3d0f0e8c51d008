use std::sync::Arc;

use proptest::prelude::*;

use eafe::disorder::{sample_couplings, CouplingConfig, CouplingDistribution, Purpose, SeedSpec};
use eafe::exactsolve::{AxisBoundary, BoundaryCondition, GibbsSpec, Solver};
use eafe::fluctuation::{BcRule, EnsembleSpec, Geometry};
use eafe::harness::{default_experiment, ExperimentConfig};
use eafe::interface::{interface_free_energy, interface_free_energy_direct, StatePair};
use eafe::lattice::{incident_edges, Region, Site};

fn couplings(region: &Region, seed: u64) -> CouplingConfig {
    sample_couplings(
        &CouplingDistribution::default(),
        &Arc::new(incident_edges(region)),
        SeedSpec::new(seed, 0, Purpose::Couplings),
    )
}

fn bc_for(region: &Region, k: usize) -> BoundaryCondition {
    let d = region.dim();
    match k % 5 {
        0 => BoundaryCondition::free(d),
        1 => BoundaryCondition::periodic(d),
        2 => BoundaryCondition::antiperiodic(d, d - 1),
        3 => BoundaryCondition::fixed_uniform(region, -1),
        _ => {
            let mut axes = vec![AxisBoundary::Free; d];
            axes[0] = AxisBoundary::Periodic;
            BoundaryCondition::mixed(axes)
        }
    }
}

fn pair(window: [usize; 2], margin: usize, beta: f64, seed: u64, k: usize) -> StatePair {
    let g = Geometry::centered(&window, margin);
    let bx = g.box_region().unwrap();
    let w = g.window_region().unwrap();
    let rules = [BcRule::Free, BcRule::Periodic, BcRule::FixedPlus, BcRule::Antiperiodic { axis: 0 }];
    let a = rules[k % 4].resolve(&bx).unwrap();
    let b = rules[(k / 4) % 4].resolve(&bx).unwrap();
    StatePair::from_rules(&bx, &w, couplings(&bx, seed), beta, a, b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn enumeration_matches_transfer(l0 in 1usize..5, l1 in 1usize..4, k in 0usize..5, beta in 0.0f64..2.5, seed in any::<u64>()) {
        let region = Region::open(&[l0, l1]).unwrap();
        let spec = GibbsSpec::new(&region, couplings(&region, seed), beta, bc_for(&region, k)).unwrap();
        let a = Solver::enumeration().solve(&spec).unwrap();
        let b = Solver::transfer().solve(&spec).unwrap();
        prop_assert!((a.log_z - b.log_z).abs() <= 1e-9 * a.log_z.abs().max(1.0));
        for (x, y) in a.correlations().iter().zip(b.correlations()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn gauge_flip_preserves_log_z(l0 in 2usize..5, l1 in 2usize..4, periodic in any::<bool>(), site in 0usize..16, seed in any::<u64>()) {
        let region = Region::open(&[l0, l1]).unwrap();
        let bc = if periodic { BoundaryCondition::periodic(2) } else { BoundaryCondition::free(2) };
        let j = couplings(&region, seed);
        let s = region.site_at(site % region.site_count());
        let mut flipped = j.clone();
        let ext = region.extents();
        for (e, v) in j.iter() {
            // wrapped target; open-box wrap edges are closed by the boundary condition
            let t = Site::new(
                e.target().coords().iter().zip(ext).map(|(&c, &n)| c.rem_euclid(n as i64)).collect::<Vec<_>>(),
            );
            if !region.contains(&t) {
                continue;
            }
            if (e.origin == s) != (t == s) {
                flipped = flipped.with_value(e, -v).unwrap();
            }
        }
        let a = Solver::default().log_z(&GibbsSpec::new(&region, j, 1.3, bc.clone()).unwrap()).unwrap();
        let b = Solver::default().log_z(&GibbsSpec::new(&region, flipped, 1.3, bc).unwrap()).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn swap_negates_free_energy(w0 in 1usize..4, w1 in 1usize..3, beta in 0.0f64..2.0, seed in any::<u64>(), k in 0usize..16) {
        let p = pair([w0, w1], 1, beta, seed, k);
        let f = interface_free_energy(&p, &Solver::default()).unwrap().value;
        let g = interface_free_energy(&p.swapped(), &Solver::default()).unwrap().value;
        prop_assert!((f + g).abs() <= 1e-10);
    }

    #[test]
    fn free_energy_within_boundary_bound(w0 in 1usize..4, w1 in 1usize..3, beta in 0.0f64..3.0, seed in any::<u64>(), k in 0usize..16) {
        let p = pair([w0, w1], 1, beta, seed, k);
        let f = interface_free_energy(&p, &Solver::default()).unwrap().value;
        let nu: f64 = p.boundary().unwrap().iter().map(|e| p.couplings().get(e).unwrap().abs()).sum();
        prop_assert!(f.abs() <= 4.0 * beta * nu + 1e-9);
    }

    #[test]
    fn direct_route_agrees(w0 in 1usize..4, w1 in 1usize..3, beta in 0.0f64..2.0, seed in any::<u64>(), k in 0usize..16) {
        let p = pair([w0, w1], 1, beta, seed, k);
        let f = interface_free_energy(&p, &Solver::default()).unwrap().value;
        let d = interface_free_energy_direct(&p, &Solver::default()).unwrap();
        prop_assert!((f - d).abs() <= 1e-9 * f.abs().max(1.0));
    }

    #[test]
    fn couplings_jsonl_round_trip(l0 in 1usize..6, l1 in 1usize..5, seed in any::<u64>()) {
        let region = Region::open(&[l0, l1]).unwrap();
        let j = couplings(&region, seed);
        let mut buf = Vec::new();
        j.write_jsonl(&region, &mut buf).unwrap();
        let back = CouplingConfig::read_jsonl(&buf[..]).unwrap();
        prop_assert_eq!(back.edges(), j.edges());
        prop_assert_eq!(back.values(), j.values());
    }

    #[test]
    fn config_toml_round_trip(w in prop::sample::select(vec![2usize, 4]), m in 0usize..3, beta in 0.0f64..4.0, n in 2usize..500, seed in any::<u64>(), kind in 0usize..5) {
        let kinds = ["ensemble", "bounds", "probe", "martingale", "scaling"];
        let mut spec = EnsembleSpec::free_vs_periodic(&[w, w], beta, n, seed);
        spec.geometry = Geometry::centered(&[w, w], m.max(1));
        let c = ExperimentConfig {
            id: format!("p{kind}"),
            ensemble: Some(spec),
            experiment: default_experiment(kinds[kind]).unwrap(),
            ..ExperimentConfig::default()
        };
        let text = c.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn same_seed_same_couplings(seed in any::<u64>(), r in any::<u32>()) {
        let region = Region::open(&[3, 3]).unwrap();
        let edges = Arc::new(incident_edges(&region));
        let d = CouplingDistribution::default();
        let a = sample_couplings(&d, &edges, SeedSpec::new(seed, r as u64, Purpose::Couplings));
        let b = sample_couplings(&d, &edges, SeedSpec::new(seed, r as u64, Purpose::Couplings));
        let c = sample_couplings(&d, &edges, SeedSpec::new(seed, r as u64 + 1, Purpose::Couplings));
        prop_assert_eq!(a.values(), b.values());
        prop_assert_ne!(a.values(), c.values());
    }
}
