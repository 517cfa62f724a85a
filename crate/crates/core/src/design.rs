//! Near-optimal experimental designs, guesses built from them, and Euclidean-ball nets.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{fit_psi, FeatureMap, PolicyParams};
use crate::error::{Error, Result};
use crate::linalg::{norm, quad_form, stack_rows, to_dvec, RANK_RTOL};
use crate::mdp::{Policy, StagedMdp};

/// `ceil(4 d max(0, ln ln d) + 16)`.
pub fn d_zero(d: usize) -> usize {
    let d = d.max(1) as f64;
    let lnln = if d > 1.0 { d.ln().ln().max(0.0) } else { 0.0 };
    (4.0 * d * lnln + 16.0).ceil() as usize
}

/// Slack allowed on the `2d` bound and on the kernel condition when verifying a design.
pub const DESIGN_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    pub support: Vec<Vec<f64>>,
    /// Position of each support vector in the input.
    pub support_indices: Vec<usize>,
    pub weights: Vec<f64>,
    /// `sum_i weights[i] x_i x_i^T`, row-major.
    pub design_matrix: Vec<Vec<f64>>,
    /// Largest `||x||^2` in the pseudo-inverse design norm over the input.
    pub worst_norm: f64,
    pub rank: usize,
    pub iterations: usize,
}

impl DesignResult {
    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.design_matrix.len();
        DMatrix::from_fn(d, d, |i, j| self.design_matrix[i][j])
    }
}

fn design_matrix(points: &[&[f64]], weights: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for (x, &w) in points.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let v = to_dvec(x);
        m += w * &v * v.transpose();
    }
    m
}

/// Frank–Wolfe (Wolfe–Atwood with away steps) on the D-optimal objective.
///
/// Works in an orthonormal basis of the span of the inputs, stops once every
/// input has `||x||^2_{V^+} <= rank * (1 + tol)`, then drops zero weights and,
/// if needed, keeps the `d_zero(d)` heaviest support points. The returned
/// design is verified against both near-optimality conditions.
pub fn approx_optimal_design(
    vectors: &[Vec<f64>],
    tol: f64,
    max_iters: usize,
) -> Result<DesignResult> {
    if vectors.is_empty() {
        return Err(Error::Domain("design needs at least one vector".into()));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Structure(
            "design vectors have mixed dimensions".into(),
        ));
    }

    // exact duplicates carry no information for the design
    let mut unique: Vec<usize> = Vec::new();
    for (i, v) in vectors.iter().enumerate() {
        if !unique.iter().any(|&j| vectors[j] == *v) {
            unique.push(i);
        }
    }

    let stacked = stack_rows(unique.iter().map(|&i| vectors[i].as_slice()), d);
    let svd = stacked.clone().svd(false, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = smax * RANK_RTOL * unique.len().max(d) as f64;
    let v_t = svd.v_t.expect("requested");
    let basis_rows: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > eps)
        .collect();
    let r = basis_rows.len();

    let basis = DMatrix::from_fn(r, d, |i, j| v_t[(basis_rows[i], j)]);
    let (weights, iterations) = if r == 0 {
        let mut w = vec![0.0; unique.len()];
        w[0] = 1.0;
        (w, 0)
    } else {
        let ys: Vec<DVector<f64>> = unique
            .iter()
            .map(|&i| &basis * to_dvec(&vectors[i]))
            .collect();
        wolfe_atwood(&ys, r, tol, max_iters)?
    };

    // keep positive weights, then the heaviest d0 if the support is still too large
    let mut order: Vec<usize> = (0..unique.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order.truncate(d_zero(d));
    order.sort_unstable();
    let total: f64 = order.iter().map(|&i| weights[i]).sum();
    let support_indices: Vec<usize> = order.iter().map(|&i| unique[i]).collect();
    let support: Vec<Vec<f64>> = support_indices
        .iter()
        .map(|&i| vectors[i].clone())
        .collect();
    let final_weights: Vec<f64> = order.iter().map(|&i| weights[i] / total).collect();

    let refs: Vec<&[f64]> = support.iter().map(|v| v.as_slice()).collect();
    let m = design_matrix(&refs, &final_weights, d);
    let worst_norm = verify_design(vectors, &basis, &m)?;
    Ok(DesignResult {
        design_matrix: (0..d)
            .map(|i| (0..d).map(|j| m[(i, j)]).collect())
            .collect(),
        support,
        support_indices,
        weights: final_weights,
        worst_norm,
        rank: r,
        iterations,
    })
}

fn wolfe_atwood(
    ys: &[DVector<f64>],
    r: usize,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = ys.len();
    let mut weights = vec![0.0; n];
    for i in greedy_basis(ys, r) {
        weights[i] = 1.0 / r as f64;
    }
    let rf = r as f64;
    let mut worst = f64::INFINITY;
    for it in 0..max_iters {
        let mut m = DMatrix::zeros(r, r);
        for (y, &w) in ys.iter().zip(&weights) {
            if w > 0.0 {
                m += w * y * y.transpose();
            }
        }
        let minv = match m.clone().cholesky() {
            Some(c) => c.inverse(),
            None => {
                return Err(Error::DesignNonConvergence {
                    iters: it,
                    worst: f64::INFINITY,
                })
            }
        };
        let g: Vec<f64> = ys.iter().map(|y| quad_form(&minv, y)).collect();
        let (jmax, gmax) =
            g.iter().cloned().enumerate().fold(
                (0, f64::MIN),
                |acc, (i, x)| {
                    if x > acc.1 {
                        (i, x)
                    } else {
                        acc
                    }
                },
            );
        worst = gmax;
        if gmax <= rf * (1.0 + tol) {
            return Ok((weights, it));
        }
        let (jmin, gmin) = g
            .iter()
            .cloned()
            .enumerate()
            .filter(|&(i, _)| weights[i] > 0.0)
            .fold(
                (usize::MAX, f64::MAX),
                |acc, (i, x)| if x < acc.1 { (i, x) } else { acc },
            );
        let away = jmin != usize::MAX && weights[jmin] < 1.0 && rf - gmin > gmax - rf;
        if away {
            let rho = weights[jmin];
            let lower = -rho / (1.0 - rho);
            let step = if gmin > 1.0 {
                ((gmin - rf) / (rf * (gmin - 1.0))).max(lower)
            } else {
                lower
            };
            for w in weights.iter_mut() {
                *w *= 1.0 - step;
            }
            weights[jmin] += step;
            if step == lower {
                weights[jmin] = 0.0;
            }
        } else {
            let step = (gmax - rf) / (rf * (gmax - 1.0));
            for w in weights.iter_mut() {
                *w *= 1.0 - step;
            }
            weights[jmax] += step;
        }
    }
    Err(Error::DesignNonConvergence {
        iters: max_iters,
        worst,
    })
}

/// Indices of `r` linearly independent vectors, chosen by largest residual norm.
fn greedy_basis(ys: &[DVector<f64>], r: usize) -> Vec<usize> {
    let mut residual: Vec<DVector<f64>> = ys.to_vec();
    let mut chosen = Vec::with_capacity(r);
    for _ in 0..r {
        let (best, _) = residual
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .fold((usize::MAX, -1.0), |acc, (i, v)| {
                let nv = v.norm();
                if nv > acc.1 {
                    (i, nv)
                } else {
                    acc
                }
            });
        let q = residual[best].normalize();
        chosen.push(best);
        for v in residual.iter_mut() {
            let c = v.dot(&q);
            *v -= c * &q;
        }
    }
    chosen
}

/// Checks both near-optimality conditions inside the span `basis` (orthonormal
/// rows) the design was built in, and returns the worst pseudo-inverse norm.
fn verify_design(vectors: &[Vec<f64>], basis: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<f64> {
    let d = m.nrows();
    let r = basis.nrows();
    let m_r = basis * m * basis.transpose();
    let m_inv = if r == 0 {
        DMatrix::zeros(0, 0)
    } else {
        m_r.cholesky()
            .ok_or_else(|| {
                Error::DesignVerification("design matrix is singular on the input span".into())
            })?
            .inverse()
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vectors.iter().enumerate() {
        let x = to_dvec(v);
        let y = basis * &x;
        let off_span = (&x - basis.transpose() * &y).norm();
        if off_span > DESIGN_TOL * x.norm().max(1.0) {
            return Err(Error::DesignVerification(format!(
                "input {i} has a component of size {off_span:.3e} in the kernel"
            )));
        }
        if r > 0 {
            worst = worst.max(quad_form(&m_inv, &y));
        }
    }
    if worst > 2.0 * d as f64 + DESIGN_TOL {
        return Err(Error::DesignVerification(format!(
            "worst squared norm {worst:.6} exceeds 2d = {}",
            2 * d
        )));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuessPanel {
    pub stage: usize,
    /// Exactly `d_zero(d)` vectors.
    pub vectors: Vec<Vec<f64>>,
}

/// Per-stage parameter panels for stages `1..horizon`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Guess {
    pub radius: f64,
    pub panels: Vec<GuessPanel>,
}

impl Guess {
    pub fn zeros(horizon: usize, d: usize, radius: f64) -> Self {
        let d0 = d_zero(d);
        Self {
            radius,
            panels: (1..horizon)
                .map(|stage| GuessPanel {
                    stage,
                    vectors: vec![vec![0.0; d]; d0],
                })
                .collect(),
        }
    }

    /// Panel vectors of `stage`, or an empty slice outside `1..horizon`.
    pub fn panel(&self, stage: usize) -> &[Vec<f64>] {
        self.panels
            .iter()
            .find(|p| p.stage == stage)
            .map(|p| p.vectors.as_slice())
            .unwrap_or(&[])
    }

    pub fn validate(&self, horizon: usize, d: usize) -> Result<()> {
        let d0 = d_zero(d);
        if self.panels.len() != horizon.saturating_sub(1) {
            return Err(Error::Structure(format!(
                "guess has {} panels, expected {}",
                self.panels.len(),
                horizon.saturating_sub(1)
            )));
        }
        for (i, p) in self.panels.iter().enumerate() {
            if p.stage != i + 1 {
                return Err(Error::Structure(format!(
                    "panel {i} is for stage {}",
                    p.stage
                )));
            }
            if p.vectors.len() != d0 {
                return Err(Error::Structure(format!(
                    "panel {} has {} vectors, not {d0}",
                    p.stage,
                    p.vectors.len()
                )));
            }
            for v in &p.vectors {
                if v.len() != d {
                    return Err(Error::Structure("panel vector has wrong dimension".into()));
                }
                if norm(v) > self.radius + 1e-9 {
                    return Err(Error::Structure(format!(
                        "panel vector outside radius {}",
                        self.radius
                    )));
                }
            }
        }
        Ok(())
    }
}

pub const DESIGN_MAX_ITERS: usize = 100_000;
pub const DESIGN_FW_TOL: f64 = 1e-3;

/// Builds the guess from the fitted parameters of `policies`.
pub fn build_true_guess(mdp: &StagedMdp, fm: &FeatureMap, policies: &[Policy]) -> Result<Guess> {
    if policies.is_empty() {
        return Err(Error::Domain("policy sample must be nonempty".into()));
    }
    let params: Result<Vec<PolicyParams>> = policies.iter().map(|p| fit_psi(mdp, fm, p)).collect();
    guess_from_params(mdp.horizon, fm.d, &params?)
}

/// Design over `{params[i].theta[k]}` at each stage `k in 1..horizon`, zero-padded to `d_zero(d)`.
pub fn guess_from_params(horizon: usize, d: usize, params: &[PolicyParams]) -> Result<Guess> {
    let radius = params.iter().map(|p| p.l2_bound).fold(0.0, f64::max);
    let d0 = d_zero(d);
    let mut panels = Vec::with_capacity(horizon.saturating_sub(1));
    for stage in 1..horizon {
        let thetas: Vec<Vec<f64>> = params.iter().map(|p| p.theta[stage].clone()).collect();
        let design = approx_optimal_design(&thetas, DESIGN_FW_TOL, DESIGN_MAX_ITERS)?;
        let mut vectors = design.support;
        vectors.resize(d0, vec![0.0; d]);
        panels.push(GuessPanel { stage, vectors });
    }
    Ok(Guess { radius, panels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallNet {
    pub points: Vec<Vec<f64>>,
    /// `(1 + 2 radius / xi)^d * 4^d`.
    pub cardinality_bound: f64,
}

/// Grid net of the ball of `radius` in dimension `d` with covering radius `xi`.
///
/// Grid spacing is `2 xi / sqrt(d)`; grid points within `radius + xi` of the
/// origin are kept and those outside the ball are projected onto it, which
/// never increases their distance to ball points.
pub fn epsilon_net(radius: f64, d: usize, xi: f64, cap: usize) -> Result<BallNet> {
    if !(radius > 0.0) || !(xi > 0.0) || d == 0 {
        return Err(Error::Domain(
            "radius and xi must be positive, d at least 1".into(),
        ));
    }
    let cardinality_bound = ((1.0 + 2.0 * radius / xi) * 4.0).powi(d as i32);
    if radius <= xi {
        return Ok(BallNet {
            points: vec![vec![0.0; d]],
            cardinality_bound,
        });
    }
    let spacing = 2.0 * xi / (d as f64).sqrt();
    let k = ((radius + xi) / spacing).ceil() as i64;
    let side = (2 * k + 1) as f64;
    if side.powi(d as i32) > 1e8 {
        return Err(Error::NetTooLarge {
            count: usize::MAX,
            cap,
        });
    }
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut idx = vec![-k; d];
    loop {
        let g: Vec<f64> = idx.iter().map(|&i| i as f64 * spacing).collect();
        let ng = norm(&g);
        if ng <= radius + xi {
            let p = if ng > radius {
                g.iter().map(|x| x * radius / ng).collect()
            } else {
                g
            };
            if !points.contains(&p) {
                points.push(p);
                if points.len() > cap {
                    return Err(Error::NetTooLarge {
                        count: points.len(),
                        cap,
                    });
                }
            }
        }
        // odometer increment
        let mut pos = 0;
        loop {
            if pos == d {
                let count = points.len();
                if count as f64 > cardinality_bound {
                    return Err(Error::NetTooLarge {
                        count,
                        cap: cardinality_bound as usize,
                    });
                }
                return Ok(BallNet {
                    points,
                    cardinality_bound,
                });
            }
            idx[pos] += 1;
            if idx[pos] <= k {
                break;
            }
            idx[pos] = -k;
            pos += 1;
        }
    }
}

/// Finite guess candidates: the true guess, then the all-zero guess, then
/// noisy copies (Gaussian noise of scale `spread` per panel vector, projected
/// back into the guess ball), at most `count_cap` in total.
pub fn guess_grid(true_guess: &Guess, spread: f64, count_cap: usize, seed: u64) -> Vec<Guess> {
    let mut out = vec![true_guess.clone()];
    if count_cap <= 1 {
        return out;
    }
    let d = true_guess
        .panels
        .first()
        .and_then(|p| p.vectors.first())
        .map(|v| v.len())
        .unwrap_or(0);
    let mut zero = true_guess.clone();
    for p in zero.panels.iter_mut() {
        for v in p.vectors.iter_mut() {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    out.push(zero);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = true_guess.radius;
    while out.len() < count_cap {
        let mut g = true_guess.clone();
        for p in g.panels.iter_mut() {
            for v in p.vectors.iter_mut() {
                for x in v.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x += spread * z;
                }
                let nv = norm(v);
                if nv > radius {
                    let scale = if nv > 0.0 { radius / nv } else { 0.0 };
                    v.iter_mut().for_each(|x| *x *= scale);
                }
            }
        }
        debug_assert!(d == 0 || g.panels[0].vectors[0].len() == d);
        out.push(g);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{gen_linear_mdp, policy_sample, uniform_stage_sizes};
    use crate::mdp::RewardKind;

    #[test]
    fn d_zero_values() {
        assert_eq!(d_zero(1), 16);
        assert_eq!(d_zero(2), 16);
        assert_eq!(d_zero(4), 22);
        let mut prev = 0;
        for d in 1..200 {
            assert!(d_zero(d) >= prev);
            prev = d_zero(d);
        }
    }

    #[test]
    fn standard_basis_design_is_uniform() {
        let d = 4;
        let basis: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let res = approx_optimal_design(&basis, 1e-6, 1000).unwrap();
        assert_eq!(res.support.len(), d);
        for w in &res.weights {
            assert!((w - 0.25).abs() < 1e-12);
        }
        assert!((res.worst_norm - d as f64).abs() < 1e-9);
    }

    #[test]
    fn single_vector_design() {
        let res = approx_optimal_design(&[vec![0.3, -0.4]], 1e-6, 100).unwrap();
        assert_eq!(res.weights, vec![1.0]);
        assert!((res.worst_norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn duplicates_do_not_change_design() {
        let base = vec![vec![1.0, 0.2], vec![-0.3, 0.9], vec![0.5, 0.5]];
        let mut dup = base.clone();
        dup.push(base[1].clone());
        dup.insert(0, base[2].clone());
        let a = approx_optimal_design(&base, 1e-6, 10_000).unwrap();
        let b = approx_optimal_design(&dup, 1e-6, 10_000).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.design_matrix[i][j] - b.design_matrix[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rank_deficient_input_stays_in_span() {
        // all inputs on the line spanned by (1, 2, 0)
        let vs: Vec<Vec<f64>> = [0.5, -1.0, 2.0]
            .iter()
            .map(|&c| vec![c, 2.0 * c, 0.0])
            .collect();
        let res = approx_optimal_design(&vs, 1e-6, 1000).unwrap();
        assert_eq!(res.rank, 1);
        assert!(res.worst_norm <= 1.0 + 1e-6);
    }

    #[test]
    fn zero_inputs_give_trivial_design() {
        let res = approx_optimal_design(&[vec![0.0, 0.0], vec![0.0, 0.0]], 1e-6, 10).unwrap();
        assert_eq!(res.rank, 0);
        assert_eq!(res.worst_norm, 0.0);
    }

    #[test]
    fn random_clouds_satisfy_conditions() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 1..6 {
            let vs: Vec<Vec<f64>> = (0..200)
                .map(|_| (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
                .collect();
            let res = approx_optimal_design(&vs, DESIGN_FW_TOL, DESIGN_MAX_ITERS).unwrap();
            assert!(res.support.len() <= d_zero(d));
            assert!(res.worst_norm <= 2.0 * d as f64);
            assert!((res.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn true_guess_panels_come_from_the_sample() {
        let (mdp, fm) = gen_linear_mdp(
            2,
            &uniform_stage_sizes(3, 3),
            2,
            RewardKind::DeterministicMean,
            1,
        )
        .unwrap();
        let (pols, _) = policy_sample(&mdp, 50, 2);
        let g = build_true_guess(&mdp, &fm, &pols).unwrap();
        g.validate(mdp.horizon, fm.d).unwrap();
        let params: Vec<PolicyParams> = pols
            .iter()
            .map(|p| fit_psi(&mdp, &fm, p).unwrap())
            .collect();
        for panel in &g.panels {
            for v in &panel.vectors {
                let zero = v.iter().all(|&x| x == 0.0);
                assert!(zero || params.iter().any(|p| &p.theta[panel.stage] == v));
            }
        }
        assert_eq!(g, build_true_guess(&mdp, &fm, &pols).unwrap());
    }

    #[test]
    fn net_small_cases() {
        let net = epsilon_net(0.5, 3, 0.5, 10).unwrap();
        assert_eq!(net.points, vec![vec![0.0; 3]]);
        let net = epsilon_net(1.0, 1, 0.5, 100).unwrap();
        assert!(net.points.len() <= 5);
        for i in 0..=200 {
            let x = -1.0 + i as f64 / 100.0;
            assert!(net.points.iter().any(|p| (p[0] - x).abs() <= 0.5 + 1e-12));
        }
    }

    #[test]
    fn net_cap_is_enforced() {
        assert!(matches!(
            epsilon_net(10.0, 3, 0.1, 50),
            Err(Error::NetTooLarge { .. })
        ));
    }

    #[test]
    fn guess_grid_shapes() {
        let g = Guess {
            radius: 1.0,
            panels: vec![GuessPanel {
                stage: 1,
                vectors: {
                    let mut v = vec![vec![0.0, 0.0]; 16];
                    v[0] = vec![0.6, 0.0];
                    v
                },
            }],
        };
        assert_eq!(guess_grid(&g, 0.3, 1, 0), vec![g.clone()]);
        let grid = guess_grid(&g, 0.3, 6, 0);
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[0], g);
        for c in &grid {
            c.validate(2, 2).unwrap();
        }
        let flat = guess_grid(&g, 0.0, 4, 0);
        assert_eq!(flat[2], g);
        assert_eq!(flat[3], g);
    }
}
