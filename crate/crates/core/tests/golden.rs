//! Fixed-seed values pinned from a reference run. A change here means the
//! sampling streams, the solvers or the estimators changed.

use eafe::fluctuation::*;
use eafe::stats::BootstrapSpec;

fn spec(n: usize) -> EnsembleSpec {
    let mut s = EnsembleSpec::free_vs_periodic(&[3, 3], 1.0, n, 0);
    s.bootstrap = BootstrapSpec::default();
    s
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * b.abs().max(1e-3)
}

#[test]
fn first_realization_free_energy() {
    let e = Ensemble::new(spec(200)).unwrap();
    let f = realization_free_energy(&e, 0).unwrap().value;
    assert!(close(f, -0.09596460755764014), "{f}");
}

#[test]
fn ensemble_variance_free_vs_periodic() {
    let e = Ensemble::new(spec(200)).unwrap();
    let (_, v) = ensemble_variance(&e).unwrap();
    assert!(close(v.estimate, 0.135267950775261), "{v:?}");
    assert!(close(v.mean, -0.040213392837020176), "{v:?}");
    assert!(close(v.ci_low, 0.10216483889933334), "{v:?}");
    assert!(close(v.ci_high, 0.17044845229168157), "{v:?}");
}

#[test]
fn probe_density() {
    let e = Ensemble::new(spec(200)).unwrap();
    let (_, p) = incongruence_probe(&e, &[0.01]).unwrap();
    let d = &p.rows[0].density;
    assert!(close(d.estimate, 0.8605), "{d:?}");
    assert!(close(d.ci_low, 0.84974375), "{d:?}");
    assert!(close(d.ci_high, 0.871375), "{d:?}");
}

#[test]
fn scaling_exponents() {
    let r = variance_scaling(&spec(200), &[2, 3, 4]).unwrap();
    let v = r.fit_volume.unwrap();
    let b = r.fit_boundary.unwrap();
    assert!(close(v.exponent, -0.12264389978146473), "{v:?}");
    assert!(close(v.ci_low, -0.3574231985564086), "{v:?}");
    assert!(close(v.ci_high, 0.1393927145225993), "{v:?}");
    assert!(close(b.exponent, -0.2452877995629294), "{b:?}");
    assert!(close(b.ci_high, 0.2787854290451986), "{b:?}");
}
