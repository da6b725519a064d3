use obsflow::datagen::{burn_in, sample_nu0};
use obsflow::dynsys::{flow, integrate_rk4, ks_integrate_etdrk4, lorenz63_rhs, lorenz96_rhs, Etdrk4};
use obsflow::observability::{check_observability, Reduction, SystemField, DEFAULT_RANK_TOLERANCE};
use obsflow::SystemSpec;

const L: f64 = 32.0 * std::f64::consts::PI;

fn ks_initial(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = L * i as f64 / n as f64;
            (x / 16.0).cos() * (1.0 + (x / 16.0).sin())
        })
        .collect()
}

#[test]
fn zero_length_integration_returns_initial_state() {
    let spec = SystemSpec::lorenz63(&[0]).unwrap();
    let b = integrate_rk4(&spec, &[1.0, 2.0, 3.0], 0.5, 0.5, 0.01).unwrap();
    assert_eq!(b.len(), 1);
    assert_eq!(b.states.row(0).to_vec(), vec![1.0, 2.0, 3.0]);
}

#[test]
fn lorenz63_fixed_points_are_stationary() {
    let (sigma, rho, beta) = (10.0, 28.0, 8.0 / 3.0);
    let c = (beta * (rho - 1.0f64)).sqrt();
    for p in [[0.0, 0.0, 0.0], [c, c, rho - 1.0], [-c, -c, rho - 1.0]] {
        let f = lorenz63_rhs(&p, sigma, rho, beta).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-12), "{f:?}");
        let spec = SystemSpec::lorenz63(&[0]).unwrap();
        let x = flow(&spec, &p, 1.0, 0.01).unwrap().x;
        assert!(x.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-10));
    }
}

#[test]
fn lorenz96_uniform_state_is_equilibrium() {
    let f = lorenz96_rhs(&[8.0; 40], 8.0).unwrap();
    assert!(f.iter().all(|&v| v == 0.0));
}

#[test]
fn ks_preserves_spatial_mean() {
    let u0 = ks_initial(128);
    let b = ks_integrate_etdrk4(&u0, L, 0.25, 400).unwrap();
    let mean0 = u0.iter().sum::<f64>() / 128.0;
    for row in b.states.rows() {
        assert!((row.sum() / 128.0 - mean0).abs() < 1e-10);
    }
    assert!(b.states.iter().all(|v| v.is_finite() && v.abs() < 10.0));
}

#[test]
fn ks_spectral_round_trip() {
    let s = Etdrk4::new(64, L, 0.1).unwrap();
    let u = ks_initial(64);
    let back = s.to_physical(&s.to_spectral(&u));
    assert!(u.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-13));
}

#[test]
fn burn_in_lands_in_attractor_box() {
    let spec = SystemSpec::lorenz63(&[0]).unwrap();
    let pts = sample_nu0(&spec, 4, 20).unwrap();
    for p in burn_in(&spec, &pts, 20.0) {
        let p = p.unwrap();
        assert!(p[0].abs() <= 25.0 && p[1].abs() <= 35.0 && (0.0..=55.0).contains(&p[2]), "{p:?}");
    }
}

/// Observing z alone passes the local rank test (the determinant is
/// `2σy² − 2x²(ρ − z)` up to sign) but cannot separate `(x, y, z)` from
/// `(−x, −y, z)`: both produce the same z record.
#[test]
fn z_record_is_blind_to_reflection() {
    let spec = SystemSpec::lorenz63(&[2]).unwrap();
    let field = SystemField::new(&spec).unwrap();
    let x = burn_in(&spec, &sample_nu0(&spec, 8, 1).unwrap(), 10.0).remove(0).unwrap();
    let r = check_observability(&field, &field.to_pq(&x), 2, &Reduction::IdentityExtension, DEFAULT_RANK_TOLERANCE)
        .unwrap();
    assert!(r.satisfied);
    let a = integrate_rk4(&spec, &x, 0.0, 3.0, 0.02).unwrap();
    let b = integrate_rk4(&spec, &[-x[0], -x[1], x[2]], 0.0, 3.0, 0.02).unwrap();
    assert_eq!(a.project_p(), b.project_p());
    assert!((a.states[[10, 0]] + b.states[[10, 0]]).abs() < 1e-12);
    assert!(a.states[[10, 0]].abs() > 1e-3);

    let axis = check_observability(&field, &[7.0, 0.0, 0.0], 2, &Reduction::IdentityExtension, DEFAULT_RANK_TOLERANCE)
        .unwrap();
    assert!(!axis.satisfied);
}

#[test]
fn lorenz96_partial_observation_is_full_rank() {
    let spec = SystemSpec::lorenz96(8.0, 40, &obsflow::datagen::l96_observed()).unwrap();
    let field = SystemField::new(&spec).unwrap();
    let x = burn_in(&spec, &sample_nu0(&spec, 2, 1).unwrap(), 5.0).remove(0).unwrap();
    let observed = obsflow::datagen::l96_observed();
    let (d, dp) = (40, observed.len());
    // Keep every observation and the time derivative of each observed
    // component just to the right of a hidden one.
    let mut rows: Vec<usize> = (0..dp).collect();
    rows.extend(
        observed.iter().enumerate().filter(|(_, &j)| !observed.contains(&((j + d - 1) % d))).map(|(k, _)| dp + k),
    );
    assert_eq!(rows.len(), d);
    let select = nalgebra::DMatrix::from_fn(d, 2 * dp, |i, j| if rows[i] == j { 1.0 } else { 0.0 });
    let at = field.to_pq(&x);
    let r = check_observability(&field, &at, 1, &Reduction::Matrix(select), DEFAULT_RANK_TOLERANCE).unwrap();
    assert!(r.satisfied, "rank {}", r.rank);

    // The leading rows only see the hidden u39, one direction short.
    let lead = check_observability(&field, &at, 1, &Reduction::IdentityExtension, DEFAULT_RANK_TOLERANCE).unwrap();
    assert_eq!(lead.rank, 31);
}
