//! Vector autoregression by per-equation least squares, and orthogonalised
//! impulse responses.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarModel {
    pub names: Vec<String>,
    pub lags: usize,
    pub intercept: DVector<f64>,
    /// `coefficients[k]` is `A_{k+1}`; row `i` is the equation for variable `i`.
    pub coefficients: Vec<DMatrix<f64>>,
    /// Standard errors laid out like `coefficients`.
    pub std_errors: Vec<DMatrix<f64>>,
    pub intercept_std_errors: DVector<f64>,
    /// Residual covariance with degrees-of-freedom correction.
    pub sigma: DMatrix<f64>,
    /// Observations used in estimation (series length minus lags).
    pub n_obs: usize,
}

impl VarModel {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Companion matrix of the VAR(p) written as a VAR(1).
    pub fn companion(&self) -> DMatrix<f64> {
        let m = self.dim();
        let p = self.lags;
        let mut c = DMatrix::zeros(m * p, m * p);
        for (k, a) in self.coefficients.iter().enumerate() {
            c.view_mut((0, k * m), (m, m)).copy_from(a);
        }
        for k in 1..p {
            c.view_mut((k * m, (k - 1) * m), (m, m))
                .copy_from(&DMatrix::identity(m, m));
        }
        c
    }

    pub fn spectral_radius(&self) -> f64 {
        self.companion()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    pub fn is_stable(&self) -> bool {
        self.spectral_radius() < 1.0
    }
}

fn regressor_names(names: &[String], lags: usize) -> Vec<String> {
    let mut out = vec!["const".to_owned()];
    for k in 1..=lags {
        for n in names {
            out.push(format!("{n}.l{k}"));
        }
    }
    out
}

/// Design matrix rows for `t in start..T`: `[1, y_{t-1}, ..., y_{t-p}]`.
fn design(data: &[Vec<f64>], lags: usize, start: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = data[0].len();
    let rows = data.len() - start;
    let k = 1 + m * lags;
    let mut x = DMatrix::zeros(rows, k);
    let mut y = DMatrix::zeros(rows, m);
    for (r, t) in (start..data.len()).enumerate() {
        x[(r, 0)] = 1.0;
        for lag in 1..=lags {
            for j in 0..m {
                x[(r, 1 + (lag - 1) * m + j)] = data[t - lag][j];
            }
        }
        for j in 0..m {
            y[(r, j)] = data[t][j];
        }
    }
    (x, y)
}

struct Fit {
    beta: DMatrix<f64>,
    residuals: DMatrix<f64>,
    xtx_inv: DMatrix<f64>,
}

fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>, regressors: &[String]) -> Result<Fit> {
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..r.ncols()).map(|j| x.column(j).norm()).fold(0.0, f64::max);
    let collinear: Vec<String> = (0..r.ncols())
        .filter(|&j| r[(j, j)].abs() <= 1e-9 * scale.max(1.0))
        .map(|j| regressors[j].clone())
        .collect();
    if !collinear.is_empty() {
        return Err(Error::Singular(collinear));
    }
    let q = qr.q();
    let qty = q.transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular(vec!["<triangular solve>".to_owned()]))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(r.nrows(), r.ncols()))
        .ok_or_else(|| Error::Singular(vec!["<triangular solve>".to_owned()]))?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let residuals = y - x * &beta;
    Ok(Fit {
        beta,
        residuals,
        xtx_inv,
    })
}

fn check_input(data: &[Vec<f64>], names: &[String], lags: usize) -> Result<()> {
    if lags == 0 {
        return Err(Error::Parameter("VAR needs at least one lag".into()));
    }
    let m = names.len();
    if m == 0 {
        return Err(Error::Parameter("VAR needs at least one variable".into()));
    }
    if data.iter().any(|row| row.len() != m) {
        return Err(Error::Parameter("every observation needs one value per variable".into()));
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("series contain gaps or non-finite values".into()));
    }
    if data.len() <= m * lags + 1 {
        return Err(Error::Parameter(format!(
            "series length {} must exceed m*p + 1 = {}",
            data.len(),
            m * lags + 1
        )));
    }
    Ok(())
}

/// Fits a VAR(`lags`) to `data`, one row per time step and one column per
/// variable.
pub fn fit_var(data: &[Vec<f64>], names: &[String], lags: usize) -> Result<VarModel> {
    check_input(data, names, lags)?;
    fit_from(data, names, lags, lags)
}

fn fit_from(data: &[Vec<f64>], names: &[String], lags: usize, start: usize) -> Result<VarModel> {
    let m = names.len();
    let (x, y) = design(data, lags, start);
    let n_obs = x.nrows();
    let dof = n_obs as i64 - (m * lags) as i64 - 1;
    if dof <= 0 {
        return Err(Error::Parameter("not enough observations for the lag order".into()));
    }
    let fit = least_squares(&x, &y, &regressor_names(names, lags))?;
    let sigma = fit.residuals.transpose() * &fit.residuals / dof as f64;

    let mut coefficients = Vec::with_capacity(lags);
    let mut std_errors = Vec::with_capacity(lags);
    for k in 0..lags {
        let mut a = DMatrix::zeros(m, m);
        let mut se = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                let row = 1 + k * m + j;
                a[(i, j)] = fit.beta[(row, i)];
                se[(i, j)] = (sigma[(i, i)] * fit.xtx_inv[(row, row)]).max(0.0).sqrt();
            }
        }
        coefficients.push(a);
        std_errors.push(se);
    }
    let intercept = DVector::from_iterator(m, (0..m).map(|i| fit.beta[(0, i)]));
    let intercept_std_errors = DVector::from_iterator(
        m,
        (0..m).map(|i| (sigma[(i, i)] * fit.xtx_inv[(0, 0)]).max(0.0).sqrt()),
    );
    Ok(VarModel {
        names: names.to_vec(),
        lags,
        intercept,
        coefficients,
        std_errors,
        intercept_std_errors,
        sigma,
        n_obs,
    })
}

/// Picks the lag order in `1..=max_lags` minimising Akaike's criterion on a
/// common estimation sample. Returns the order and the criterion per order.
pub fn select_lag_aic(data: &[Vec<f64>], names: &[String], max_lags: usize) -> Result<(usize, Vec<f64>)> {
    check_input(data, names, max_lags)?;
    let m = names.len() as f64;
    let mut scores = Vec::with_capacity(max_lags);
    for p in 1..=max_lags {
        let model = fit_from(data, names, p, max_lags)?;
        let t = model.n_obs as f64;
        let dof = t - m * p as f64 - 1.0;
        let sigma_ml = &model.sigma * (dof / t);
        let det = sigma_ml.determinant();
        if det <= 0.0 {
            return Err(Error::NotPositiveDefinite);
        }
        scores.push(det.ln() + 2.0 * m * (m * p as f64 + 1.0) / t);
    }
    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i + 1)
        .unwrap_or(1);
    Ok((best, scores))
}

/// Orthogonalised impulse responses. `responses[h][(i, j)]` is the response
/// of variable `i`, `h` steps after a one-standard-deviation shock to
/// variable `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Irf {
    pub names: Vec<String>,
    pub responses: Vec<DMatrix<f64>>,
    /// False when the model is not stable; responses are still reported.
    pub stable: bool,
}

impl Irf {
    pub fn horizon(&self) -> usize {
        self.responses.len()
    }

    pub fn series(&self, shock: usize, response: usize) -> Vec<f64> {
        self.responses.iter().map(|r| r[(response, shock)]).collect()
    }
}

/// Responses at steps `0..horizon`, using the lower Cholesky factor of the
/// residual covariance in variable order.
pub fn irf(model: &VarModel, horizon: usize) -> Result<Irf> {
    let m = model.dim();
    let chol = model
        .sigma
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();

    let mut phi: Vec<DMatrix<f64>> = Vec::with_capacity(horizon);
    for h in 0..horizon {
        let mut acc = if h == 0 {
            DMatrix::identity(m, m)
        } else {
            DMatrix::zeros(m, m)
        };
        for j in 1..=h.min(model.lags) {
            acc += &phi[h - j] * &model.coefficients[j - 1];
        }
        phi.push(acc);
    }
    Ok(Irf {
        names: model.names.clone(),
        responses: phi.iter().map(|p| p * &l).collect(),
        stable: model.is_stable(),
    })
}

/// Long format: `step,shock,response,value`.
pub fn write_irf_csv<W: Write>(irf: &Irf, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["step", "shock", "response", "value"])?;
    for (h, r) in irf.responses.iter().enumerate() {
        for (j, shock) in irf.names.iter().enumerate() {
            for (i, resp) in irf.names.iter().enumerate() {
                w.write_record([&h.to_string(), shock, resp, &r[(i, j)].to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn names(m: usize) -> Vec<String> {
        (0..m).map(|i| format!("y{i}")).collect()
    }

    #[test]
    fn constant_series_is_singular() {
        let data: Vec<Vec<f64>> = (0..30).map(|t| vec![5.0, t as f64 * 0.3 + (t % 3) as f64]).collect();
        match fit_var(&data, &names(2), 1) {
            Err(Error::Singular(cols)) => assert_eq!(cols, vec!["y0.l1".to_owned()]),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn short_series_is_rejected() {
        let data = vec![vec![1.0, 2.0]; 5];
        assert!(matches!(fit_var(&data, &names(2), 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn diagonal_system_has_no_spillover() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = vec![vec![0.0, 0.0]];
        for t in 1..400 {
            let prev: &Vec<f64> = &data[t - 1];
            let e0: f64 = StandardNormal.sample(&mut rng);
            let e1: f64 = StandardNormal.sample(&mut rng);
            data.push(vec![0.5 * prev[0] + e0, -0.3 * prev[1] + e1]);
        }
        let mut model = fit_var(&data, &names(2), 1).unwrap();
        // Force the exactly decoupled case.
        model.coefficients[0][(0, 1)] = 0.0;
        model.coefficients[0][(1, 0)] = 0.0;
        model.sigma[(0, 1)] = 0.0;
        model.sigma[(1, 0)] = 0.0;
        let r = irf(&model, 12).unwrap();
        for h in 0..12 {
            assert_eq!(r.responses[h][(1, 0)], 0.0);
            assert_eq!(r.responses[h][(0, 1)], 0.0);
        }
        let l = model.sigma.clone().cholesky().unwrap().l();
        assert_eq!(r.responses[0], l);
    }

    #[test]
    fn non_positive_definite_sigma_is_an_error() {
        let model = VarModel {
            names: names(2),
            lags: 1,
            intercept: DVector::zeros(2),
            coefficients: vec![DMatrix::zeros(2, 2)],
            std_errors: vec![DMatrix::zeros(2, 2)],
            intercept_std_errors: DVector::zeros(2),
            sigma: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            n_obs: 10,
        };
        assert!(matches!(irf(&model, 3), Err(Error::NotPositiveDefinite)));
    }

    #[test]
    fn companion_of_var2() {
        let model = VarModel {
            names: names(1),
            lags: 2,
            intercept: DVector::zeros(1),
            coefficients: vec![DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 0.2)],
            std_errors: vec![DMatrix::zeros(1, 1); 2],
            intercept_std_errors: DVector::zeros(1),
            sigma: DMatrix::identity(1, 1),
            n_obs: 10,
        };
        assert_eq!(model.companion(), DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 1.0, 0.0]));
        // Roots of z^2 - 0.5 z - 0.2.
        let expected = (0.5 + (0.25f64 + 0.8).sqrt()) / 2.0;
        assert!((model.spectral_radius() - expected).abs() < 1e-12);
        let r = irf(&model, 4).unwrap();
        let s = r.series(0, 0);
        assert_eq!(s[0], 1.0);
        assert!((s[1] - 0.5).abs() < 1e-15);
        assert!((s[2] - (0.25 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn aic_rejects_underfitted_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data = vec![vec![0.0], vec![0.0]];
        for t in 2..600 {
            let e: f64 = StandardNormal.sample(&mut rng);
            data.push(vec![0.2 * data[t - 1][0] + 0.6 * data[t - 2][0] + e]);
        }
        let (p, scores) = select_lag_aic(&data, &names(1), 4).unwrap();
        assert!(p >= 2, "{scores:?}");
        assert!(scores[0] - scores[1] > 0.3);

        // Order one by the normal equations on the common sample.
        let ys: Vec<f64> = data.iter().map(|r| r[0]).collect();
        let (y, x): (Vec<f64>, Vec<f64>) = (4..ys.len()).map(|t| (ys[t], ys[t - 1])).unzip();
        let t = y.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / t, y.iter().sum::<f64>() / t);
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let slope = sxy / sxx;
        let icpt = my - slope * mx;
        let ssr: f64 = x.iter().zip(&y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
        let expected = (ssr / t).ln() + 2.0 * 2.0 / t;
        assert!((scores[0] - expected).abs() < 1e-9);
    }
}
