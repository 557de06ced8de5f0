#![allow(dead_code)]

use nalgebra::DVector;

/// Mean, covariance and standard errors of both, from i.i.d. vector samples.
pub struct Moments {
    pub n: usize,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub cov_se: Vec<Vec<f64>>,
}

pub fn moments(samples: &[DVector<f64>]) -> Moments {
    let n = samples.len();
    let d = samples[0].len();
    let nf = n as f64;
    let mean: Vec<f64> = (0..d).map(|i| samples.iter().map(|x| x[i]).sum::<f64>() / nf).collect();
    let mut cov = vec![vec![0.0; d]; d];
    let mut cov_se = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let prods: Vec<f64> = samples.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).collect();
            let m = prods.iter().sum::<f64>() / nf;
            let var = prods.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (nf - 1.0);
            cov[i][j] = m * nf / (nf - 1.0);
            cov_se[i][j] = (var / nf).sqrt();
        }
    }
    let mean_se = (0..d).map(|i| (cov[i][i] / nf).sqrt()).collect();
    Moments {
        n,
        mean,
        mean_se,
        cov,
        cov_se,
    }
}

/// Largest standardized difference between the means and covariances of two samples.
pub fn max_z(a: &Moments, b: &Moments) -> f64 {
    let d = a.mean.len();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let se = (a.mean_se[i].powi(2) + b.mean_se[i].powi(2)).sqrt();
        worst = worst.max((a.mean[i] - b.mean[i]).abs() / se);
        for j in 0..d {
            let se = (a.cov_se[i][j].powi(2) + b.cov_se[i][j].powi(2)).sqrt();
            worst = worst.max((a.cov[i][j] - b.cov[i][j]).abs() / se);
        }
    }
    worst
}
