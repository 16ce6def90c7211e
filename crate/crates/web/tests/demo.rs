use covsteer_web::{Demo, DemoSettings};

fn solved() -> Demo {
    Demo::solve(&DemoSettings::default()).expect("default demo solves")
}

#[test]
fn default_settings_reach_the_target() {
    let demo = solved();
    let s = demo.summary();
    assert_eq!(s.mean.len(), s.horizon + 1);
    assert_eq!(s.mean[0], [1.5, 3.5]);
    let end = s.mean[s.horizon];
    assert!((end[0] - s.target[0]).abs() < 1e-6 && (end[1] - s.target[1]).abs() < 1e-6);
    assert!(
        s.worst_chance_slack > -1e-7,
        "chance slack {}",
        s.worst_chance_slack
    );
    assert!(
        s.terminal_cov_slack > -1e-7,
        "terminal slack {}",
        s.terminal_cov_slack
    );
    assert!(s.objective.is_finite() && s.objective > 0.0);
    assert_eq!(s.constraints.len(), 2);
}

#[test]
fn ellipses_grow_with_sigma() {
    let demo = solved();
    let one = demo.ellipses(1.0);
    let three = demo.ellipses(3.0);
    let mean = demo.summary().mean;
    assert_eq!(one.len(), mean.len());
    for ((a, b), c) in one.iter().zip(&three).zip(&mean) {
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(b) {
            for i in 0..2 {
                assert!(((q[i] - c[i]) - 3.0 * (p[i] - c[i])).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn simulation_is_seeded_and_shaped() {
    let demo = solved();
    let a = demo.simulate(500, 3, 7).unwrap();
    let b = demo.simulate(500, 3, 7).unwrap();
    assert_eq!(a.rates, b.rates);
    assert_eq!(a.paths, b.paths);
    assert_eq!(a.rates.len(), 13);
    assert_eq!(a.paths.len(), 7);
    for path in &a.paths {
        assert_eq!(path.len(), 13);
    }
    assert!(a.rates.iter().all(|r| (0.0..=1.0).contains(r)));
    assert!(a.max_rate <= 0.02, "max rate {}", a.max_rate);
    let c = demo.simulate(500, 4, 7).unwrap();
    assert_ne!(a.paths, c.paths);
}

#[test]
fn banded_policy_is_no_cheaper() {
    let full = solved().summary().objective;
    let banded = Demo::solve(&DemoSettings {
        bandwidth: Some(1),
        ..Default::default()
    })
    .unwrap()
    .summary()
    .objective;
    assert!(banded >= full * (1.0 - 1e-6), "{banded} < {full}");
}

#[test]
fn bad_settings_are_rejected() {
    let bad = |s: DemoSettings| Demo::solve(&s).err().expect("rejected");
    assert!(bad(DemoSettings {
        horizon: 1,
        ..Default::default()
    })
    .contains("horizon"));
    assert!(bad(DemoSettings {
        bound_scale: 0.0,
        ..Default::default()
    })
    .contains("bound scale"));
    // A bound far below the filter error cannot be met.
    let tight = bad(DemoSettings {
        bound_scale: 1e-4,
        ..Default::default()
    });
    assert!(!tight.is_empty());
    assert!(solved().simulate(0, 1, 1).is_err());
}
