//! Level-set neighbourhoods `U_ε(x)`, epsilon and delta errors, and the
//! numerical certification of ε-niceness.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use crate::geometry::Point3;
use crate::lattice::{LatticeRegion, ScalarField};

use super::{WeightError, WeightScheme};

fn lattice_index(beta: &ScalarField, x: &Point3) -> Result<usize, WeightError> {
    let lat = beta.lattice();
    let idx = lat.nearest(x).ok_or(WeightError::NotOnLattice)?;
    let tol = 1e-6 * lat.spacing.iter().copied().fold(f64::INFINITY, f64::min);
    if (lat.point(idx) - x).norm() > tol {
        return Err(WeightError::NotOnLattice);
    }
    Ok(idx)
}

/// `|β(r) − β(x)|` by trilinear interpolation.
pub fn native_divergence(beta: &ScalarField, r: &Point3, x: &Point3) -> Result<f64, WeightError> {
    Ok((beta.try_sample(r)? - beta.try_sample(x)?).abs())
}

/// Connected component of `{r : |β(r) − β(x)| ≤ ε}` containing the lattice point `x`.
pub fn u_epsilon(beta: &ScalarField, x: &Point3, epsilon: f64) -> Result<LatticeRegion, WeightError> {
    let idx = lattice_index(beta, x)?;
    Ok(u_epsilon_index(beta, idx, epsilon))
}

/// [`u_epsilon`] for a lattice index.
pub fn u_epsilon_index(beta: &ScalarField, x: usize, epsilon: f64) -> LatticeRegion {
    let lat = beta.lattice();
    let bx = beta.value(x);
    let mut region = LatticeRegion::empty(lat);
    region.insert(x);
    let mut queue = VecDeque::from([x]);
    while let Some(i) = queue.pop_front() {
        for n in lat.neighbours6(i) {
            if !region.contains(n) && (beta.value(n) - bx).abs() <= epsilon {
                region.insert(n);
                queue.push_back(n);
            }
        }
    }
    region
}

/// `max_{r ∈ region} |β(r) − β(x)|`.
pub fn epsilon_error(beta: &ScalarField, region: &LatticeRegion, x: &Point3) -> Result<f64, WeightError> {
    if !region.fits(beta.lattice()) {
        return Err(crate::lattice::LatticeError::LatticeMismatch.into());
    }
    let idx = lattice_index(beta, x)?;
    if !region.contains(idx) {
        return Err(WeightError::NotInRegion);
    }
    let bx = beta.value(idx);
    Ok(region
        .indices()
        .map(|i| (beta.value(i) - bx).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaError {
    pub value: f64,
    /// Weighted mass of lattice points in the support, `Σ ω_r` (unnormalized).
    pub normalizer: f64,
    pub support_points: usize,
    /// Normalized weight carried by support points on the lattice boundary;
    /// a proxy for the quadrature error from truncating the support.
    pub boundary_mass: f64,
}

struct Support {
    indices: Vec<usize>,
    weights: Vec<f64>,
    total: f64,
}

fn support(scheme: &WeightScheme, beta: &ScalarField, x: &Point3) -> Result<Support, WeightError> {
    let lat = beta.lattice();
    let radius = scheme.query_radius();
    let candidates: Vec<usize> = if radius.is_finite() {
        lat.within(x, radius)
    } else {
        (0..lat.len()).collect()
    };
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    for i in candidates {
        let w = scheme.weight(x, &lat.point(i));
        if w > 0.0 {
            indices.push(i);
            weights.push(w);
        }
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(WeightError::EmptySupport);
    }
    Ok(Support {
        indices,
        weights,
        total,
    })
}

/// `|∫_{supp ω^x \ V} ω_r^x β(r) dr|` with `ω^x` normalized to unit integral,
/// both integrals taken as Riemann sums over the lattice of `beta`.
pub fn delta_error(
    scheme: &WeightScheme,
    beta: &ScalarField,
    region: &LatticeRegion,
    x: &Point3,
) -> Result<DeltaError, WeightError> {
    let lat = beta.lattice();
    if !region.fits(lat) {
        return Err(crate::lattice::LatticeError::LatticeMismatch.into());
    }
    let s = support(scheme, beta, x)?;
    let mut outside = 0.0;
    let mut boundary = 0.0;
    for (&i, &w) in s.indices.iter().zip(&s.weights) {
        if !region.contains(i) {
            outside += w * beta.value(i);
        }
        if lat.on_boundary(i) {
            boundary += w;
        }
    }
    Ok(DeltaError {
        value: (outside / s.total).abs(),
        normalizer: s.total,
        support_points: s.indices.len(),
        boundary_mass: boundary / s.total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonReport {
    pub epsilon: f64,
    pub nice: bool,
    /// Index into the candidate list of the witness, or of the best failing candidate.
    pub witness: Option<usize>,
    pub witness_region: String,
    pub delta_error: f64,
    pub contained: bool,
}

/// Searches `candidates` for `V ⊆ U_ε(x)` with `δ_V ≤ ε`.
pub fn epsilon_nice_check(
    scheme: &WeightScheme,
    beta: &ScalarField,
    x: &Point3,
    epsilon: f64,
    candidates: &[(String, LatticeRegion)],
) -> Result<EpsilonReport, WeightError> {
    if candidates.is_empty() {
        return Err(WeightError::EmptyCandidates);
    }
    let idx = lattice_index(beta, x)?;
    let u = u_epsilon_index(beta, idx, epsilon);
    let mut best: Option<(usize, f64, bool)> = None;
    for (k, (_, v)) in candidates.iter().enumerate() {
        if !v.contains(idx) {
            return Err(WeightError::NotInRegion);
        }
        let contained = v.is_subset_of(&u);
        let d = delta_error(scheme, beta, v, x)?.value;
        if contained && d <= epsilon {
            return Ok(EpsilonReport {
                epsilon,
                nice: true,
                witness: Some(k),
                witness_region: candidates[k].0.clone(),
                delta_error: d,
                contained: true,
            });
        }
        let better = match best {
            None => true,
            Some((_, bd, bc)) => (contained && !bc) || (contained == bc && d < bd),
        };
        if better {
            best = Some((k, d, contained));
        }
    }
    let (k, d, contained) = best.expect("non-empty candidates");
    Ok(EpsilonReport {
        epsilon,
        nice: false,
        witness: Some(k),
        witness_region: candidates[k].0.clone(),
        delta_error: d,
        contained,
    })
}

/// Candidate ladder: lattice balls of the given radii around `x` and the
/// level sets `U_ε(x)` for each `ε` in `levels`.
pub fn default_candidates(
    beta: &ScalarField,
    x: &Point3,
    radii: &[f64],
    levels: &[f64],
) -> Result<Vec<(String, LatticeRegion)>, WeightError> {
    let idx = lattice_index(beta, x)?;
    let lat = beta.lattice();
    let mut out = Vec::with_capacity(radii.len() + levels.len());
    for &r in radii {
        out.push((format!("ball(r={r} mm)"), LatticeRegion::ball(lat, x, r)));
    }
    for &e in levels {
        out.push((format!("U_eps(eps={e})"), u_epsilon_index(beta, idx, e)));
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// For every lattice point `r`, the smallest `ε` with `r ∈ U_ε(x)`: the
/// minimax path cost from `x` where each point costs `|β(r) − β(x)|`.
pub fn connected_divergence(beta: &ScalarField, x: usize) -> Vec<f64> {
    let lat = beta.lattice();
    let bx = beta.value(x);
    let mut dist = vec![f64::INFINITY; lat.len()];
    dist[x] = 0.0;
    let mut heap = BinaryHeap::from([HeapItem(0.0, x)]);
    while let Some(HeapItem(d, i)) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        for n in lat.neighbours6(i) {
            let nd = d.max((beta.value(n) - bx).abs());
            if nd < dist[n] {
                dist[n] = nd;
                heap.push(HeapItem(nd, n));
            }
        }
    }
    dist
}

/// Smallest `ε` for which the scheme is certified ε-nice at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonOmega {
    pub value: f64,
    pub witness_region: String,
    pub delta_error: f64,
}

/// Certifies `ε_ω(x)` over the ladder of level sets `U_b(x)` (every distinct
/// breakpoint `b`) and lattice balls of the given radii.
///
/// For fixed `ε` the admissible candidates are the level sets `U_b` with
/// `b ≤ ε` and the balls contained in `U_ε`; the scan returns the smallest
/// `ε` whose best admissible delta error does not exceed it.
pub fn epsilon_omega(
    scheme: &WeightScheme,
    beta: &ScalarField,
    x: &Point3,
    radii: &[f64],
) -> Result<EpsilonOmega, WeightError> {
    let idx = lattice_index(beta, x)?;
    let lat = beta.lattice();
    let dist = connected_divergence(beta, idx);
    let s = support(scheme, beta, x)?;
    let total_moment: f64 = s
        .indices
        .iter()
        .zip(&s.weights)
        .map(|(&i, &w)| w * beta.value(i))
        .sum();

    struct Ball {
        eps: f64,
        delta: f64,
        label: String,
    }
    let mut balls: Vec<Ball> = radii
        .iter()
        .map(|&r| {
            let region = LatticeRegion::ball(lat, x, r);
            // Smallest level set containing the whole ball.
            let eps = region.indices().map(|i| dist[i]).fold(0.0, f64::max);
            let inside: f64 = s
                .indices
                .iter()
                .zip(&s.weights)
                .filter(|(i, _)| region.contains(**i))
                .map(|(&i, &w)| w * beta.value(i))
                .sum();
            Ball {
                eps,
                delta: ((total_moment - inside) / s.total).abs(),
                label: format!("ball(r={r} mm)"),
            }
        })
        .collect();
    balls.sort_by(|a, b| a.eps.total_cmp(&b.eps));

    let mut breakpoints: Vec<f64> = dist.iter().copied().filter(|d| d.is_finite()).collect();
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup();

    let mut order: Vec<usize> = (0..s.indices.len()).collect();
    order.sort_by(|&a, &b| dist[s.indices[a]].total_cmp(&dist[s.indices[b]]));

    let mut inside = 0.0;
    let mut cursor = 0;
    let mut ball_cursor = 0;
    let mut best = (f64::INFINITY, String::new());
    for (k, &b) in breakpoints.iter().enumerate() {
        while cursor < order.len() && dist[s.indices[order[cursor]]] <= b {
            let j = order[cursor];
            inside += s.weights[j] * beta.value(s.indices[j]);
            cursor += 1;
        }
        let du = ((total_moment - inside) / s.total).abs();
        if du < best.0 {
            best = (du, format!("U_eps(eps={b})"));
        }
        while ball_cursor < balls.len() && balls[ball_cursor].eps <= b {
            let ball = &balls[ball_cursor];
            if ball.delta < best.0 {
                best = (ball.delta, ball.label.clone());
            }
            ball_cursor += 1;
        }
        let next = breakpoints.get(k + 1).copied().unwrap_or(f64::INFINITY);
        if best.0 <= b || best.0 < next {
            return Ok(EpsilonOmega {
                value: best.0.max(b),
                witness_region: best.1,
                delta_error: best.0,
            });
        }
    }
    // Unreachable on a connected lattice: the last level set is the whole lattice.
    Err(WeightError::EmptySupport)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Lattice;
    use crate::weights::{DivergenceMap, Kernel};
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn lattice(n: usize) -> Lattice {
        Lattice::new([0.0; 3], [1.0; 3], [n, n, n]).unwrap()
    }

    fn step_field() -> ScalarField {
        ScalarField::from_fn(lattice(8), |p| if p.x < 3.5 { 0.0 } else { 10.0 })
    }

    #[test]
    fn u_epsilon_examples() {
        let ramp = ScalarField::from_fn(lattice(6), |p| p.x + 10.0 * p.y + 100.0 * p.z);
        let x = Point3::new(2.0, 2.0, 2.0);
        assert_eq!(u_epsilon(&ramp, &x, 0.0).unwrap().len(), 1);
        assert_eq!(u_epsilon(&ramp, &x, 1e4).unwrap().len(), 216);

        let step = step_field();
        let left = u_epsilon(&step, &Point3::new(1.0, 3.0, 3.0), 1.0).unwrap();
        let expected = LatticeRegion::from_predicate(step.lattice(), |i| step.lattice().point(i).x < 3.5);
        assert_eq!(left, expected);
        assert!(u_epsilon(&step, &Point3::new(1.5, 3.0, 3.0), 1.0).is_err());
    }

    #[test]
    fn epsilon_error_examples() {
        let c = 2.0;
        let ramp = ScalarField::from_fn(lattice(9), |p| c * p.x);
        let x = Point3::new(4.0, 4.0, 4.0);
        let single = LatticeRegion::from_indices(ramp.lattice(), [ramp.lattice().nearest(&x).unwrap()]);
        assert_eq!(epsilon_error(&ramp, &single, &x).unwrap(), 0.0);
        for rho in [1.0, 2.0, 3.0] {
            let ball = LatticeRegion::ball(ramp.lattice(), &x, rho);
            assert!((epsilon_error(&ramp, &ball, &x).unwrap() - c * rho).abs() < 1e-12);
        }
        let away = LatticeRegion::ball(ramp.lattice(), &Point3::new(0.0, 0.0, 0.0), 1.0);
        assert_eq!(epsilon_error(&ramp, &away, &x), Err(WeightError::NotInRegion));
    }

    #[test]
    fn native_divergence_outside_domain_errors() {
        let f = ScalarField::from_fn(lattice(4), |p| 3.0 * p.x);
        let x = Point3::new(1.0, 1.0, 1.0);
        assert!((native_divergence(&f, &Point3::new(2.5, 1.0, 1.0), &x).unwrap() - 4.5).abs() < 1e-9);
        assert!(native_divergence(&f, &Point3::new(9.0, 1.0, 1.0), &x).is_err());
    }

    #[test]
    fn delta_error_examples() {
        let s = WeightScheme::gaussian(1.0, 3.0).unwrap();
        let lat = lattice(9);
        let x = Point3::new(4.0, 4.0, 4.0);
        let ones = ScalarField::from_fn(lat.clone(), |_| 1.0);
        let zeros = ScalarField::from_fn(lat.clone(), |_| 0.0);
        let supp = LatticeRegion::from_predicate(&lat, |i| s.weight(&x, &lat.point(i)) > 0.0);
        assert_eq!(delta_error(&s, &ones, &supp, &x).unwrap().value, 0.0);
        let ball = LatticeRegion::ball(&lat, &x, 1.0);
        assert_eq!(delta_error(&s, &zeros, &ball, &x).unwrap().value, 0.0);
    }

    #[test]
    fn delta_error_gaussian_tail_matches_chi_square() {
        let sigma = 1.0;
        let scheme = WeightScheme::gaussian(sigma, f64::INFINITY).unwrap();
        let h = sigma / 6.0;
        let n = 61;
        let lat = Lattice::centered(Point3::origin(), [h; 3], [n, n, n]).unwrap();
        let ones = ScalarField::from_fn(lat.clone(), |_| 1.0);
        let x = Point3::origin();
        for rho in [1.0, 1.5, 2.0] {
            let ball = LatticeRegion::ball(&lat, &x, rho * sigma);
            let d = delta_error(&scheme, &ones, &ball, &x).unwrap();
            let tail = ChiSquared::new(3.0).unwrap().sf(rho * rho);
            assert!((d.value - tail).abs() < 0.01, "rho {rho}: {} vs {tail}", d.value);
            assert!(d.boundary_mass < 1e-4);
        }
    }

    #[test]
    fn epsilon_nice_examples() {
        let lat = lattice(11);
        let x = Point3::new(5.0, 5.0, 5.0);
        let zero = ScalarField::from_fn(lat.clone(), |_| 0.0);
        let s = WeightScheme::gaussian(1.5, 3.0).unwrap();
        let cands = default_candidates(&zero, &x, &[1.0, 2.0], &[0.1]).unwrap();
        assert!(epsilon_nice_check(&s, &zero, &x, 0.1, &cands).unwrap().nice);
        assert_eq!(epsilon_nice_check(&s, &zero, &x, 0.1, &[]), Err(WeightError::EmptyCandidates));

        // Plateau of radius 2.5 around x, zero elsewhere... with a heavy tail outside.
        let plateau = ScalarField::from_fn(lat.clone(), |p| {
            if (p - x).norm() <= 1.5 {
                5.0
            } else {
                10.0
            }
        });
        let heavy = WeightScheme::new(
            Kernel::table(vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5], 1.0).unwrap(),
            DivergenceMap::scaled_euclidean(5.0).unwrap(),
        );
        let cands = default_candidates(&plateau, &x, &[0.5, 1.0, 1.5], &[0.0, 0.5]).unwrap();
        let rep = epsilon_nice_check(&heavy, &plateau, &x, 0.5, &cands).unwrap();
        assert!(!rep.nice);
        assert!(rep.contained);
        assert!(rep.delta_error > 0.5);

        let tight = WeightScheme::gaussian(1.0, 1.0).unwrap();
        let wide = ScalarField::from_fn(lat, |p| if (p - x).norm() <= 3.0 { 5.0 } else { 10.0 });
        let cands = default_candidates(&wide, &x, &[1.0, 2.0], &[0.0]).unwrap();
        let rep = epsilon_nice_check(&tight, &wide, &x, 0.01, &cands).unwrap();
        assert!(rep.nice && rep.contained);
        assert_eq!(rep.delta_error, 0.0);
    }

    /// Brute-force oracle for ε_ω: for every candidate threshold evaluate all
    /// admissible candidates by explicit flood fill and delta error.
    fn epsilon_omega_oracle(scheme: &WeightScheme, beta: &ScalarField, x: &Point3, radii: &[f64]) -> f64 {
        let lat = beta.lattice();
        let idx = lat.nearest(x).unwrap();
        let bx = beta.value(idx);
        let mut levels: Vec<f64> = (0..lat.len()).map(|i| (beta.value(i) - bx).abs()).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let mut deltas: Vec<(f64, f64)> = Vec::new(); // (threshold at which admissible, delta)
        for &b in &levels {
            let u = u_epsilon_index(beta, idx, b);
            deltas.push((b, delta_error(scheme, beta, &u, x).unwrap().value));
        }
        for &r in radii {
            let ball = LatticeRegion::ball(lat, x, r);
            let e = epsilon_error(beta, &ball, x).unwrap();
            deltas.push((e, delta_error(scheme, beta, &ball, x).unwrap().value));
        }
        // ε is certified iff some candidate with admissibility threshold ≤ ε has δ ≤ ε.
        deltas
            .iter()
            .map(|&(t, d)| t.max(d))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn epsilon_omega_matches_oracle() {
        let lat = lattice(7);
        let x = Point3::new(3.0, 3.0, 3.0);
        let fields = [
            ScalarField::from_fn(lat.clone(), |_| 5.0),
            ScalarField::from_fn(lat.clone(), |p| if p.x < 2.5 { 0.0 } else { 4.0 }),
            ScalarField::from_fn(lat.clone(), |p| 0.7 * p.x - 0.3 * p.y + (p.z * 1.3).sin()),
            ScalarField::from_fn(lat.clone(), |p| if (p - x).norm() < 1.8 { 3.0 } else { -1.0 }),
        ];
        let scheme = WeightScheme::gaussian(1.2, 3.0).unwrap();
        for f in &fields {
            let got = epsilon_omega(&scheme, f, &x, &[1.0, 2.0]).unwrap();
            let want = epsilon_omega_oracle(&scheme, f, &x, &[1.0, 2.0]);
            assert!((got.value - want).abs() < 1e-12, "{} vs {want}", got.value);
        }
        assert_eq!(epsilon_omega(&scheme, &fields[0], &x, &[]).unwrap().value, 0.0);
    }

    #[test]
    fn connected_divergence_thresholds_reproduce_flood_fill() {
        let lat = lattice(6);
        let f = ScalarField::from_fn(lat.clone(), |p| (p.x * 1.1).sin() * 3.0 + (p.y - p.z).cos());
        let idx = lat.index([2, 3, 1]);
        let d = connected_divergence(&f, idx);
        for eps in [0.0, 0.2, 0.7, 1.5, 3.0, 10.0] {
            let by_threshold = LatticeRegion::from_predicate(&lat, |i| d[i] <= eps);
            assert_eq!(by_threshold, u_epsilon_index(&f, idx, eps));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn u_epsilon_is_monotone_and_bounded(
            values in proptest::collection::vec(-5.0f64..5.0, 125),
            i in 0usize..125,
            e0 in 0.0f64..3.0,
            de in 0.0f64..3.0,
        ) {
            let f = ScalarField::new(lattice(5), values).unwrap();
            let small = u_epsilon_index(&f, i, e0);
            let large = u_epsilon_index(&f, i, e0 + de);
            prop_assert!(small.is_subset_of(&large));
            let x = f.lattice().point(i);
            prop_assert!(epsilon_error(&f, &small, &x).unwrap() <= e0);
        }

        #[test]
        fn delta_error_monotone_for_nonnegative_beta(
            values in proptest::collection::vec(0.0f64..5.0, 125),
            r1 in 0.5f64..2.0,
            dr in 0.0f64..2.0,
        ) {
            let f = ScalarField::new(lattice(5), values).unwrap();
            let x = Point3::new(2.0, 2.0, 2.0);
            let s = WeightScheme::gaussian(1.0, 3.0).unwrap();
            let v = LatticeRegion::ball(f.lattice(), &x, r1);
            let w = LatticeRegion::ball(f.lattice(), &x, r1 + dr);
            let dv = delta_error(&s, &f, &v, &x).unwrap().value;
            let dw = delta_error(&s, &f, &w, &x).unwrap().value;
            prop_assert!(dv + 1e-12 >= dw);
        }
    }
}
