use super::*;
use crate::design::{BlockDesign, BlockType};
use crate::geometry::{AcquisitionGrid, AffineMap, RigidMotion};
use crate::lattice::{Lattice, LatticeRegion};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn alternating(n_each: usize, len: f64) -> BlockDesign {
    let kinds: Vec<BlockType> = (0..2 * n_each)
        .map(|k| if k % 2 == 0 { BlockType::A } else { BlockType::B })
        .collect();
    BlockDesign::from_sequence(&kinds, len, 0.0).unwrap()
}

fn obs(time: f64, value: f64, slice: usize, voxel: usize) -> Observation {
    Observation {
        time,
        location: Point3::origin(),
        value,
        cycle: 0,
        slice,
        voxel,
    }
}

fn random_session(rng: &mut ChaCha8Rng, moving: bool) -> ScanSession {
    let grid = AcquisitionGrid::ascending([6, 5], 4, [3.0, 3.0, 4.0], 2.0).unwrap();
    let design = alternating(3, 10.0);
    let cycles = 30;
    let motions = (0..cycles)
        .map(|c| {
            if moving {
                RigidMotion::from_axis_angle(
                    Vector3::new(0.2, 0.3, 1.0),
                    0.02 * (c as f64 * 0.7).sin(),
                    Vector3::new((c as f64 * 0.3).sin() * 1.5, 0.4 * c as f64 / 30.0, -(c as f64 * 0.2).cos()),
                )
            } else {
                RigidMotion::identity()
            }
        })
        .collect();
    let values = (0..cycles * grid.voxels_per_cycle())
        .map(|_| 100.0 + rng.random_range(-1.0..1.0))
        .collect();
    ScanSession::new(grid, motions, design, AffineMap::identity(), values, "s").unwrap()
}

#[test]
fn intercept_only_gives_weighted_mean() {
    let data = [(obs(0.0, 1.0, 0, 0), 1.0), (obs(1.0, 4.0, 0, 0), 2.0), (obs(2.0, 10.0, 0, 0), 0.5)];
    let r = fit_grouped(&data, &[1.0], &[1.0], &FitOptions::default(), |_| Ok(vec![1.0])).unwrap();
    let want = (1.0 + 8.0 + 5.0) / 3.5;
    assert!((r.fit.alpha_hat - want).abs() < 1e-12);
    assert!((r.fit.beta_hat - want).abs() < 1e-12);
}

fn dense_wls(rows: &[Vec<f64>], w: &[f64], y: &[f64]) -> Vec<f64> {
    let p = rows[0].len();
    let mut xtwx = DMatrix::<f64>::zeros(p, p);
    let mut xtwy = DVector::<f64>::zeros(p);
    for ((r, wi), yi) in rows.iter().zip(w).zip(y) {
        for a in 0..p {
            xtwy[a] += wi * r[a] * yi;
            for b in 0..p {
                xtwx[(a, b)] += wi * r[a] * r[b];
            }
        }
    }
    (xtwx.try_inverse().unwrap() * xtwy).iter().copied().collect()
}

#[test]
fn matches_dense_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 100 {
        let n_each = rng.random_range(1..5);
        let design = alternating(n_each, 10.0);
        let model = match rng.random_range(0..3) {
            0 => ModelSpec::Nested,
            1 => ModelSpec::TaskLinearTime,
            _ => ModelSpec::TaskBspline { df: rng.random_range(4..7) },
        };
        let p = model.n_coefficients(&design);
        let n = rng.random_range(p..=50);
        let dur = design.total_duration();
        let mut data = Vec::new();
        for k in 0..n {
            // Duplicate some times to exercise grouping.
            let t = if k > 0 && rng.random_bool(0.3) {
                data.last().map(|(o, _): &(Observation, f64)| o.time).unwrap()
            } else {
                rng.random_range(0.0..dur)
            };
            data.push((obs(t, rng.random_range(-10.0..10.0), 0, k), rng.random_range(0.05..2.0)));
        }
        let Ok(fit) = wls_fit(&data, &model, &design) else {
            continue;
        };
        let rows: Vec<Vec<f64>> = data.iter().map(|(o, _)| design_row(&model, &design, o.time).unwrap().values).collect();
        let w: Vec<f64> = data.iter().map(|d| d.1).collect();
        let y: Vec<f64> = data.iter().map(|d| d.0.value).collect();
        let want = dense_wls(&rows, &w, &y);
        for (a, b) in fit.coefficients.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{model:?}: {a} vs {b}");
        }
        checked += 1;
    }
}

#[test]
fn equal_weights_is_ordinary_least_squares() {
    let design = alternating(4, 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<_> = (0..60)
        .map(|k| (obs(k as f64 * 1.3, rng.random_range(0.0..5.0), 0, 0), 3.0))
        .collect();
    let fit = wls_fit(&data, &ModelSpec::TaskLinearTime, &design).unwrap();
    let rows: Vec<Vec<f64>> = data.iter().map(|(o, _)| vec![1.0, indicator_value(&design, o.time), o.time]).collect();
    let y: Vec<f64> = data.iter().map(|d| d.0.value).collect();
    let want = dense_wls(&rows, &[1.0; 60], &y);
    for (a, b) in fit.coefficients.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }
}

fn indicator_value(design: &BlockDesign, t: f64) -> f64 {
    if indicator(design, t).unwrap() {
        1.0
    } else {
        0.0
    }
}

#[test]
fn underdetermined_and_rank_deficient() {
    let design = alternating(2, 10.0);
    let two = [(obs(1.0, 1.0, 0, 0), 1.0), (obs(12.0, 2.0, 0, 0), 1.0)];
    assert!(matches!(
        wls_fit(&two, &ModelSpec::TaskLinearTime, &design),
        Err(FitError::Underdetermined { n: 2, p: 3 })
    ));
    // All observations inside A blocks: the task column equals the intercept.
    let only_a: Vec<_> = (0..10).map(|k| (obs(k as f64, k as f64, 0, 0), 1.0)).collect();
    assert!(matches!(
        wls_fit(&only_a, &ModelSpec::TaskLinearTime, &design),
        Err(FitError::RankDeficient { .. })
    ));
}

#[test]
fn grouped_variance_equals_per_observation_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let design = alternating(3, 10.0);
    let data: Vec<_> = (0..120)
        .map(|k| {
            let t = (k / 4) as f64 * 2.0;
            (obs(t, rng.random_range(0.0..5.0), 0, k % 4), rng.random_range(0.1..1.0))
        })
        .collect();
    for mode in [VarianceMode::Sandwich, VarianceMode::Classical] {
        let r = wls_fit_with(&data, &ModelSpec::TaskLinearTime, &design, &FitOptions { variance: mode }).unwrap();
        let x = DMatrix::from_fn(data.len(), 3, |i, c| design_row(&ModelSpec::TaskLinearTime, &design, data[i].0.time).unwrap().values[c]);
        let w: Vec<f64> = data.iter().map(|d| d.1).collect();
        let mut resid = vec![0.0; data.len()];
        for (k, &i) in r.order.iter().enumerate() {
            resid[i] = r.residuals[k];
        }
        let v = beta_variance(&x, &w, &resid, &[0.0, 1.0, 0.0], mode).unwrap();
        assert!((v - r.fit.var_beta_hat).abs() <= 1e-10 * v);
    }
}

#[test]
fn variance_properties() {
    let x = DMatrix::from_fn(20, 2, |i, c| if c == 0 { 1.0 } else { i as f64 });
    let w = vec![1.0; 20];
    assert_eq!(beta_variance(&x, &w, &[0.0; 20], &[0.0, 1.0], VarianceMode::Sandwich).unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 2000;
    let x = DMatrix::from_fn(n, 3, |i, c| match c {
        0 => 1.0,
        1 => ((i / 50) % 2) as f64,
        _ => i as f64 / n as f64,
    });
    let e: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let y: Vec<f64> = e.clone();
    let sol = crate::linalg::weighted_least_squares(&x, &vec![1.0; n], &y).unwrap();
    let fitted = &x * &sol.coefficients;
    let resid: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();
    let c = [0.0, 1.0, 0.0];
    let sandwich = beta_variance(&x, &vec![1.0; n], &resid, &c, VarianceMode::Sandwich).unwrap();
    let s2 = resid.iter().map(|r| r * r).sum::<f64>() / (n as f64 - 3.0);
    let classical = s2 * sol.xtwx_inv[(1, 1)];
    assert!((sandwich / classical - 1.0).abs() < 0.1, "{sandwich} vs {classical}");
    let via_mode = beta_variance(&x, &vec![1.0; n], &resid, &c, VarianceMode::Classical).unwrap();
    assert!((via_mode - classical).abs() < 1e-12 * classical);

    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
    for mode in [VarianceMode::Sandwich, VarianceMode::Classical] {
        let a = beta_variance(&x, &w, &resid, &c, mode).unwrap();
        let b = beta_variance(&x, &w2, &resid, &c, mode).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
    }
}

#[test]
fn t_statistic_examples() {
    let mut fit = PointFit {
        coefficients: vec![],
        alpha_hat: 0.0,
        beta_hat: 15.0,
        sigma2_hat: 1.0,
        var_beta_hat: 1.953f64.powi(2),
        t_value: None,
        n_obs: 10,
        n_effective: 10.0,
        dw: None,
        df: 8.0,
    };
    assert!((t_statistic(&fit).unwrap() - 7.68).abs() < 0.005);
    fit.beta_hat = 0.0;
    assert_eq!(t_statistic(&fit).unwrap(), 0.0);
    fit.var_beta_hat = 0.0;
    assert_eq!(t_statistic(&fit), Err(FitError::ZeroVariance));
}

#[test]
fn scaling_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let design = alternating(3, 10.0);
    let data: Vec<_> = (0..200)
        .map(|k| (obs(k as f64 * 0.3, rng.random_range(90.0..110.0), 0, 0), rng.random_range(0.1..1.0)))
        .collect();
    let model = ModelSpec::TaskLinearTime;
    let base = wls_fit(&data, &model, &design).unwrap();
    let c = 7.3;
    let scaled_y: Vec<_> = data.iter().map(|(o, w)| (Observation { value: o.value * c, ..*o }, *w)).collect();
    let scaled_w: Vec<_> = data.iter().map(|(o, w)| (*o, w * c)).collect();
    let fy = wls_fit(&scaled_y, &model, &design).unwrap();
    let fw = wls_fit(&scaled_w, &model, &design).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300);
    assert!(close(fy.beta_hat, c * base.beta_hat));
    assert!(close(fy.alpha_hat, c * base.alpha_hat));
    assert!(close(fy.sigma2_hat.sqrt(), c * base.sigma2_hat.sqrt()));
    assert!(close(fy.t_value.unwrap(), base.t_value.unwrap()));
    assert!(close(fy.dw.unwrap(), base.dw.unwrap()));
    for (a, b) in fw.coefficients.iter().zip(&base.coefficients) {
        assert!(close(*a, *b));
    }
    assert!(close(fw.t_value.unwrap(), base.t_value.unwrap()));
    assert!(close(fw.dw.unwrap(), base.dw.unwrap()));
}

#[test]
fn durbin_watson_examples() {
    assert_eq!(durbin_watson(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
    assert_eq!(durbin_watson(&[1.0, -1.0, 1.0, -1.0]).unwrap(), 3.0);
    assert_eq!(durbin_watson(&[0.0; 5]), Err(DurbinWatsonError::AllZero));
    assert_eq!(durbin_watson(&[1.0, 2.0]), Err(DurbinWatsonError::TooFew(2)));
}

#[test]
fn durbin_watson_white_noise_mean_near_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut total = 0.0;
    for _ in 0..100 {
        let e: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dw = durbin_watson(&e).unwrap();
        assert!((0.0..=4.0).contains(&dw));
        total += dw;
    }
    let mean = total / 100.0;
    assert!((1.96..=2.04).contains(&mean), "{mean}");
}

/// Exhaustive scan over every (cycle, slice, voxel) of the session.
fn brute_force(session: &ScanSession, center: &Point3, scheme: &WeightScheme) -> Vec<(usize, usize, usize, f64)> {
    let grid = session.grid();
    let [nx, ny] = grid.in_plane_shape();
    let mut out = Vec::new();
    for cycle in 0..session.cycles() {
        for slice in 0..grid.slice_count() {
            let t = grid.acquisition_time(cycle, slice);
            if indicator(session.design(), t).is_none() || session.is_excluded(cycle) {
                continue;
            }
            for j in 0..ny {
                for i in 0..nx {
                    let loc = session.motions()[cycle].inverse_apply(&grid.voxel_center(i, j, slice));
                    let w = scheme.weight(center, &loc);
                    if w > 0.0 {
                        out.push((cycle, slice, i + nx * j, w));
                    }
                }
            }
        }
    }
    out
}

#[test]
fn collect_observations_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for moving in [false, true] {
        let mut session = random_session(&mut rng, moving);
        session.exclude_cycle(4).unwrap();
        let scheme = WeightScheme::gaussian(2.3, 3.0).unwrap();
        for _ in 0..5 {
            let center = Point3::new(rng.random_range(-6.0..6.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let got = collect_observations(&session, &center, &scheme);
            let mut want = brute_force(&session, &center, &scheme);
            let mut got_keys: Vec<_> = got.iter().map(|(o, w)| (o.cycle, o.slice, o.voxel, *w)).collect();
            got_keys.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
            want.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
            assert_eq!(got_keys, want);
            assert!(got.windows(2).all(|w| w[0].0.time <= w[1].0.time));
            assert!(got.iter().all(|(o, _)| o.cycle != 4));
        }
    }
}

#[test]
fn collect_observations_geometric_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let session = random_session(&mut rng, false);
    let grid = session.grid();
    let center = grid.voxel_center(3, 2, 1);
    let scheme = WeightScheme::gaussian(2.3, 3.0).unwrap();
    let got = collect_observations(&session, &center, &scheme);
    let [nx, ny] = grid.in_plane_shape();
    let mut voxels = 0;
    for k in 0..grid.slice_count() {
        for j in 0..ny {
            for i in 0..nx {
                if (grid.voxel_center(i, j, k) - center).norm() <= 6.9 {
                    voxels += 1;
                }
            }
        }
    }
    let mut defined = 0;
    for c in 0..session.cycles() {
        for k in 0..grid.slice_count() {
            if indicator(session.design(), grid.acquisition_time(c, k)).is_some() {
                defined += 1;
            }
        }
    }
    // Every slice of a cycle is defined together here, so count = cycles_defined × voxels.
    assert_eq!(defined % grid.slice_count(), 0);
    assert_eq!(got.len(), defined / grid.slice_count() * voxels);

    let tiny = WeightScheme::gaussian(2.3, 1e-9).unwrap();
    let off = center + Vector3::new(0.7, 0.1, 0.2);
    assert!(collect_observations(&session, &off, &tiny).is_empty());
}

#[test]
fn field_single_point_matches_direct_fit_and_is_order_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let session = random_session(&mut rng, true);
    let scheme = WeightScheme::gaussian(2.3, 3.0).unwrap();
    let model = ModelSpec::TaskLinearTime;
    let lat = Lattice::new([0.5, -1.0, 0.3], [2.0; 3], [1, 1, 1]).unwrap();
    let mask = LatticeRegion::full(&lat);
    let psi = AffineMap::translation(Vector3::new(0.2, 0.1, -0.3));
    let field = fit_field(&session, &lat, &mask, &scheme, &model, &psi, FitOptions::default()).unwrap();
    let direct = wls_fit(
        &collect_observations(&session, &psi.apply(&lat.point(0)), &scheme),
        &model,
        session.design(),
    )
    .unwrap();
    assert_eq!(field.fits[0], Some(Ok(direct)));

    let lat = Lattice::new([-3.0, -3.0, -3.0], [2.0; 3], [4, 4, 4]).unwrap();
    let mask = LatticeRegion::ball(&lat, &Point3::origin(), 3.0);
    let field = fit_field(&session, &lat, &mask, &scheme, &model, &psi, FitOptions::default()).unwrap();
    let ctx = FitContext::new(&session, &scheme, &model, FitOptions::default()).unwrap();
    for i in (0..lat.len()).rev() {
        let want = mask.contains(i).then(|| ctx.fit_at(&psi.apply(&lat.point(i))).map(|r| r.fit));
        assert_eq!(field.fits[i], want);
    }
}
