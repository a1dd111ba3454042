use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};

use nestcrt::correlation::{BlockDims, CorrelationParams};
use nestcrt::datagen::{generate_binary, make_layout, Dataset, PanelSizeModel};
use nestcrt::design::{variance_sigma_beta2, DesignSpec, Link, OutcomeModel, RandLevel};
use nestcrt::estimation::{fit, fit_detailed, Estimator, FitOptions, FitStatus, WorkingCorrelation};

fn binary_data(n: usize, dims: (usize, usize, usize), alphas: [f64; 3], p: (f64, f64), seed: u64) -> Dataset {
    let dims = BlockDims::new(dims.0, dims.1, dims.2).unwrap();
    let layout = make_layout(n, dims, 0.5, RandLevel::Cluster, None, seed).unwrap();
    let corr = CorrelationParams::new(alphas[0], alphas[1], alphas[2]).unwrap();
    generate_binary(&layout, &corr, p.0, p.1, seed ^ 0x5eed).unwrap()
}

/// Stacked estimating equations for a logit binary model, built densely:
/// the beta score and the MAEE pair-class moment equations.
fn stacked_equations(data: &Dataset, theta: &[f64; 5]) -> Option<[f64; 5]> {
    let beta = [theta[0], theta[1]];
    let alpha = [theta[2], theta[3], theta[4]];
    let expit = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut pieces = Vec::new();
    let mut omega_sum = DMatrix::<f64>::zeros(2, 2);
    for c in &data.clusters {
        let n = c.y.len();
        let r = c.shape.dense_correlation(alpha);
        let mut d = DMatrix::<f64>::zeros(n, 2);
        let mut a = DVector::<f64>::zeros(n);
        let mut resid = DVector::<f64>::zeros(n);
        for j in 0..n {
            let t = c.treat[j] as f64;
            let mu = expit(beta[0] + beta[1] * t);
            let v = mu * (1.0 - mu);
            d[(j, 0)] = v;
            d[(j, 1)] = v * t;
            a[j] = v.sqrt();
            resid[j] = c.y[j] - mu;
        }
        let a_half = DMatrix::from_diagonal(&a);
        let vinv = (&a_half * r * &a_half).try_inverse()?;
        omega_sum += d.transpose() * &vinv * &d;
        pieces.push((d, vinv, resid, a));
    }
    let bread = omega_sum.try_inverse()?;
    let mut score = DVector::<f64>::zeros(2);
    let mut sums = [0.0; 3];
    let mut counts = [0.0; 3];
    for (c, (d, vinv, resid, a)) in data.clusters.iter().zip(&pieces) {
        score += d.transpose() * vinv * resid;
        let n = resid.len();
        let h = d * &bread * d.transpose() * vinv;
        let adjusted = (DMatrix::<f64>::identity(n, n) - h).try_inverse()? * resid;
        let e: Vec<f64> = (0..n).map(|j| adjusted[j] / a[j]).collect();
        let raw: Vec<f64> = (0..n).map(|j| resid[j] / a[j]).collect();
        let idx: Vec<(usize, usize, usize)> = c.shape.indices().collect();
        for i in 0..n {
            for j in i + 1..n {
                let class = if idx[i].0 != idx[j].0 {
                    2
                } else if idx[i].1 != idx[j].1 {
                    1
                } else {
                    0
                };
                sums[class] += 0.5 * (e[i] * raw[j] + raw[i] * e[j]);
                counts[class] += 1.0;
            }
        }
    }
    Some([
        score[0],
        score[1],
        sums[0] / counts[0] - alpha[0],
        sums[1] / counts[1] - alpha[1],
        sums[2] / counts[2] - alpha[2],
    ])
}

/// Damped Newton with a central-difference Jacobian.
fn newton_root(data: &Dataset, start: [f64; 5]) -> [f64; 5] {
    let norm = |g: &[f64; 5]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = start;
    let mut g = stacked_equations(data, &x).unwrap();
    for _ in 0..100 {
        if norm(&g) < 1e-13 {
            break;
        }
        let mut jac = DMatrix::<f64>::zeros(5, 5);
        for k in 0..5 {
            let h = 1e-6;
            let (mut up, mut dn) = (x, x);
            up[k] += h;
            dn[k] -= h;
            let (gu, gd) = (stacked_equations(data, &up).unwrap(), stacked_equations(data, &dn).unwrap());
            for i in 0..5 {
                jac[(i, k)] = (gu[i] - gd[i]) / (2.0 * h);
            }
        }
        let step = jac.lu().solve(&DVector::from_row_slice(&g)).unwrap();
        let mut t = 1.0;
        loop {
            let cand: [f64; 5] = std::array::from_fn(|k| x[k] - t * step[k]);
            if let Some(gc) = stacked_equations(data, &cand) {
                if norm(&gc) < norm(&g) || t < 1e-6 {
                    x = cand;
                    g = gc;
                    break;
                }
            }
            t *= 0.5;
        }
    }
    assert!(norm(&g) < 1e-10, "oracle did not converge: {g:?}");
    x
}

#[test]
fn small_fit_matches_generic_root_finder() {
    let mut checked = 0;
    for seed in 0..40u64 {
        let data = binary_data(4, (2, 2, 2), [0.3, 0.15, 0.05], (0.3, 0.6), seed);
        let Ok(f) = fit(&data, WorkingCorrelation::ExtendedNested, &FitOptions::default()) else {
            continue;
        };
        if !f.converged() {
            continue;
        }
        let a = f.alpha.unwrap();
        let root = newton_root(&data, [f.beta[0] + 0.05, f.beta[1] - 0.05, a[0] * 0.9, a[1] * 0.9, a[2] * 0.9]);
        for (k, est) in [f.beta[0], f.beta[1], a[0], a[1], a[2]].into_iter().enumerate() {
            assert!((est - root[k]).abs() <= 1e-6, "seed {seed} component {k}: {est} vs {}", root[k]);
        }
        checked += 1;
        if checked == 5 {
            break;
        }
    }
    assert_eq!(checked, 5);
}

#[test]
fn working_structures_agree_on_balanced_data() {
    let opts = FitOptions::default();
    for seed in 0..10u64 {
        let data = binary_data(12, (2, 3, 5), [0.15, 0.08, 0.02], (0.2, 0.5), 100 + seed);
        let ind = fit(&data, WorkingCorrelation::Independence, &opts).unwrap();
        let ene = fit(&data, WorkingCorrelation::ExtendedNested, &opts).unwrap();
        assert!(ind.converged() && ene.converged());
        for k in 0..2 {
            assert_abs_diff_eq!(ind.beta[k], ene.beta[k], epsilon = 1e-8);
        }
        let (ci, ce) = (ind.covariances.unwrap(), ene.covariances.unwrap());
        for e in [Estimator::Bc0, Estimator::Bc1, Estimator::Bc2, Estimator::Avg, Estimator::Bc3] {
            for i in 0..2 {
                for j in 0..2 {
                    assert_abs_diff_eq!(ci.get(e)[i][j], ce.get(e)[i][j], epsilon = 1e-8);
                }
            }
        }
    }
}

#[test]
fn model_based_variance_at_true_alpha_is_closed_form() {
    let alphas = [0.15, 0.08, 0.02];
    let dims = BlockDims::new(2, 3, 5).unwrap();
    let corr = CorrelationParams::new(alphas[0], alphas[1], alphas[2]).unwrap();
    for seed in 0..5u64 {
        let data = binary_data(10, (2, 3, 5), alphas, (0.2, 0.5), 300 + seed);
        let f = fit(&data, WorkingCorrelation::Fixed { alphas }, &FitOptions::default()).unwrap();
        assert!(f.converged());
        let expit = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (p0, p1) = (expit(f.beta[0]), expit(f.beta[0] + f.beta[1]));
        let controls = data.clusters.iter().filter(|c| c.treat[0] == 0).count();
        let n = data.n_clusters() as f64;
        let spec = DesignSpec::new(dims, corr, OutcomeModel::binary(Link::Logit, p0, p1).unwrap())
            .with_allocation(controls as f64 / n);
        let sigma2 = variance_sigma_beta2(&spec).unwrap();
        assert_abs_diff_eq!(f.covariances.unwrap().mb[1][1], sigma2 / n, epsilon = 1e-8);
    }
}

#[test]
fn additive_correction_decomposes_and_vanishes() {
    let data = binary_data(200, (2, 3, 5), [0.1, 0.02, 0.01], (0.2, 0.5), 77);
    let f = fit(&data, WorkingCorrelation::Independence, &FitOptions::default()).unwrap();
    assert!(f.converged());
    let c = f.covariances.unwrap();
    let n = 200.0;
    let obs = data.n_obs() as f64;
    let scale = (obs - 1.0) / (obs - 2.0) * n / (n - 1.0);
    let delta = 2.0 / (n - 2.0);
    let extra = c.bc4[1][1] - scale * c.bc0[1][1];
    // BC4 - c BC0 = delta * phi * MB with phi >= 1
    let phi = extra / (delta * c.mb[1][1]);
    assert!(phi >= 1.0 - 1e-9, "{phi}");
    assert!(extra.abs() <= 1e-3, "{extra}");
    let relative = extra / (scale * c.bc0[1][1]);
    eprintln!("BC4 relative gap from c*BC0 at N=200: {relative:.3e}");
}

#[test]
fn sandwich_ordering_and_equation_residuals() {
    let opts = FitOptions::default();
    let mut fits = 0;
    for seed in 0..30u64 {
        let data = binary_data(14, (2, 3, 5), [0.4, 0.1, 0.03], (0.2, 0.5), 500 + seed);
        for w in [WorkingCorrelation::Independence, WorkingCorrelation::ExtendedNested] {
            let f = fit(&data, w, &opts).unwrap();
            if !f.converged() {
                continue;
            }
            fits += 1;
            assert!(f.ee_residual <= 1e-8, "{}", f.ee_residual);
            let c = f.covariances.unwrap();
            assert!(c.bc0[1][1] <= c.bc1[1][1] && c.bc1[1][1] <= c.bc2[1][1]);
        }
    }
    assert!(fits >= 58);
}

#[test]
fn unbalanced_clusters_fit() {
    let dims = BlockDims::new(2, 3, 5).unwrap();
    let panel = PanelSizeModel::new(5.0, 1.0).unwrap();
    let layout = make_layout(16, dims, 0.5, RandLevel::Cluster, Some(&panel), 4).unwrap();
    let corr = CorrelationParams::new(0.15, 0.08, 0.02).unwrap();
    let data = generate_binary(&layout, &corr, 0.1, 0.3, 9).unwrap();
    assert!(!data.is_balanced());
    let (f, internals) = fit_detailed(&data, WorkingCorrelation::ExtendedNested, &FitOptions::default()).unwrap();
    assert_eq!(f.status, FitStatus::Converged);
    assert!(f.ee_residual <= 1e-8);
    assert_eq!(internals.unwrap().scores.len(), 16);
}

#[test]
fn maee_alpha_is_nearly_unbiased() {
    // average of alpha_hat over replications sits within 3 MC standard errors
    let truth = [0.15, 0.08, 0.02];
    let opts = FitOptions::default();
    let mut est: Vec<[f64; 5]> = Vec::new();
    for seed in 0..2000u64 {
        let data = binary_data(10, (2, 3, 5), truth, (0.3, 0.3), 10_000 + seed);
        let f = fit(&data, WorkingCorrelation::ExtendedNested, &opts).unwrap();
        if f.converged() {
            let a = f.alpha.unwrap();
            est.push([f.beta[0], f.beta[1], a[0], a[1], a[2]]);
        }
    }
    let m = est.len() as f64;
    assert!(m >= 1980.0);
    let target = [(0.3f64 / 0.7).ln(), 0.0, truth[0], truth[1], truth[2]];
    for k in 0..5 {
        let mean = est.iter().map(|e| e[k]).sum::<f64>() / m;
        let sd = (est.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        let z = (mean - target[k]) / (sd / m.sqrt());
        eprintln!("component {k}: mean {mean:.5} target {:.5} z {z:.2}", target[k]);
        // beta1 carries the usual O(1/N) logit bias, checked loosely
        if k == 0 {
            assert!((mean - target[k]).abs() < 0.05);
        } else {
            assert!(z.abs() < 3.0, "component {k}: z = {z}");
        }
    }
}
