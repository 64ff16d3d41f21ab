//! Least-squares fit of `L(D) = A·D^(−b) + C` by Levenberg–Marquardt.
//!
//! The fit runs on `x = D / D_ref` with `D_ref` the geometric mean of the
//! inputs, in the unconstrained coordinates `(ln A', softplus⁻¹ b,
//! softplus⁻¹ C)`; `A = A'·D_ref^b` is restored at the end. Each start of a
//! fixed grid is refined and the lowest residual wins (ties: first start).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XKind {
    Flops,
    Tokens,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r_squared: f64,
    pub ss_res: f64,
    pub residuals: Vec<f64>,
    pub x_kind: XKind,
    pub start_index: usize,
    pub iterations: usize,
}

const A_GRID: [f64; 3] = [0.1, 1.0, 10.0];
const B_GRID: [f64; 4] = [0.1, 0.3, 0.5, 1.0];
const MAX_ITERS: usize = 2000;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Problem<'a> {
    x: &'a [f64],
    l: &'a [f64],
}

impl Problem<'_> {
    fn params(p: [f64; 3]) -> (f64, f64, f64) {
        (p[0].exp(), softplus(p[1]), softplus(p[2]))
    }

    fn ss(&self, p: [f64; 3]) -> f64 {
        let (a, b, c) = Self::params(p);
        self.x
            .iter()
            .zip(self.l)
            .map(|(&x, &l)| {
                let r = l - a * x.powf(-b) - c;
                r * r
            })
            .sum()
    }

    /// `(JᵀJ, Jᵀr)` for residuals `r = L − f`.
    fn normal_equations(&self, p: [f64; 3]) -> ([[f64; 3]; 3], [f64; 3]) {
        let (a, b, c) = Self::params(p);
        let (sb, sc) = (sigmoid(p[1]), sigmoid(p[2]));
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (&x, &l) in self.x.iter().zip(self.l) {
            let pw = a * x.powf(-b);
            let r = l - pw - c;
            let j = [pw, -pw * x.ln() * sb, sc];
            for i in 0..3 {
                jtr[i] += j[i] * r;
                for k in 0..3 {
                    jtj[i][k] += j[i] * j[k];
                }
            }
        }
        (jtj, jtr)
    }
}

fn solve3(m: [[f64; 3]; 3], v: [f64; 3]) -> Option<[f64; 3]> {
    let mut a = [[0.0; 4]; 3];
    for i in 0..3 {
        a[i][..3].copy_from_slice(&m[i]);
        a[i][3] = v[i];
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..4 {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    Some([a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]])
}

struct Refined {
    p: [f64; 3],
    ss: f64,
    iterations: usize,
    converged: bool,
}

fn refine(prob: &Problem, mut p: [f64; 3], ss_scale: f64) -> Refined {
    let mut ss = prob.ss(p);
    let mut mu = 1e-3;
    for it in 0..MAX_ITERS {
        let (jtj, jtr) = prob.normal_equations(p);
        let grad = jtr.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad <= 1e-15 * ss_scale.max(1e-300) || ss <= 1e-30 * ss_scale {
            return Refined { p, ss, iterations: it, converged: true };
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut m = jtj;
            for (i, row) in m.iter_mut().enumerate() {
                row[i] += mu * jtj[i][i].max(1e-12);
            }
            let Some(step) = solve3(m, jtr) else {
                mu *= 10.0;
                continue;
            };
            let cand = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
            let cand_ss = prob.ss(cand);
            if cand_ss.is_finite() && cand_ss <= ss {
                let step_norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
                let gain = ss - cand_ss;
                p = cand;
                ss = cand_ss;
                mu = (mu / 3.0).max(1e-15);
                accepted = true;
                if step_norm < 1e-14 * (1.0 + p.iter().map(|v| v * v).sum::<f64>().sqrt())
                    || gain <= 1e-18 * ss_scale
                {
                    return Refined { p, ss, iterations: it + 1, converged: true };
                }
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            // no downhill step at any damping: a stationary point
            return Refined { p, ss, iterations: it + 1, converged: true };
        }
    }
    Refined { p, ss, iterations: MAX_ITERS, converged: false }
}

/// Fit `L = A·D^(−b) + C` to `(D, L)` points.
pub fn fit_power_law(points: &[(f64, f64)], x_kind: XKind) -> Result<PowerLawFit> {
    if points.len() < 4 {
        return Err(Error::Config(format!("power-law fit needs at least 4 points, got {}", points.len())));
    }
    if let Some(&(d, l)) = points.iter().find(|(d, l)| !(d.is_finite() && *d > 0.0 && l.is_finite() && *l > 0.0)) {
        return Err(Error::Config(format!("power-law fit needs positive finite points, got ({d}, {l})")));
    }
    let d_ref = (points.iter().map(|(d, _)| d.ln()).sum::<f64>() / points.len() as f64).exp();
    let x: Vec<f64> = points.iter().map(|(d, _)| d / d_ref).collect();
    let l: Vec<f64> = points.iter().map(|&(_, l)| l).collect();
    let mean = l.iter().sum::<f64>() / l.len() as f64;
    let ss_tot: f64 = l.iter().map(|v| (v - mean) * (v - mean)).sum();
    let l_min = l.iter().copied().fold(f64::INFINITY, f64::min);

    if ss_tot <= f64::EPSILON * mean * mean * l.len() as f64 {
        // flat curve: the power-law term vanishes
        return Ok(PowerLawFit {
            a: 0.0,
            b: 0.0,
            c: mean,
            r_squared: 1.0,
            ss_res: 0.0,
            residuals: l.iter().map(|v| v - mean).collect(),
            x_kind,
            start_index: 0,
            iterations: 0,
        });
    }

    let prob = Problem { x: &x, l: &l };
    let ss_scale = ss_tot.max(l.iter().map(|v| v * v).sum::<f64>() * 1e-12);
    let mut best: Option<(usize, Refined)> = None;
    let mut index = 0;
    for &a0 in &A_GRID {
        for &b0 in &B_GRID {
            for c0 in [0.0, l_min / 2.0, 0.99 * l_min] {
                let start = [a0.ln(), softplus_inv(b0), softplus_inv(c0.max(1e-12))];
                let r = refine(&prob, start, ss_scale);
                let better = match &best {
                    None => r.ss.is_finite(),
                    Some((_, b)) => r.ss < b.ss,
                };
                if better {
                    best = Some((index, r));
                }
                index += 1;
            }
        }
    }
    let (start_index, r) = best.ok_or(Error::FitDiverged {
        starts: index,
        best_ss_res: f64::INFINITY,
        best_a: f64::NAN,
        best_b: f64::NAN,
        best_c: f64::NAN,
    })?;
    let (a_n, b, c) = Problem::params(r.p);
    let a = a_n * d_ref.powf(b);
    if !r.converged || !a.is_finite() {
        return Err(Error::FitDiverged {
            starts: index,
            best_ss_res: r.ss,
            best_a: a,
            best_b: b,
            best_c: c,
        });
    }
    let residuals: Vec<f64> = points.iter().map(|&(d, l)| l - a * d.powf(-b) - c).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    Ok(PowerLawFit {
        a,
        b,
        c,
        r_squared: 1.0 - ss_res / ss_tot,
        ss_res,
        residuals,
        x_kind,
        start_index,
        iterations: r.iterations,
    })
}

#[derive(Deserialize)]
struct Row {
    x: f64,
    loss: f64,
}

/// Read `(x, loss)` points from a CSV with header `x,loss`.
pub fn read_fit_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => Error::Format { what: "fit csv".into(), detail: e.to_string() },
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Format { what: "fit csv".into(), detail: e.to_string() })?
        .clone();
    if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "loss" {
        return Err(Error::Format {
            what: "fit csv".into(),
            detail: format!("expected header `x,loss`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    rdr.deserialize::<Row>()
        .map(|r| {
            r.map(|r| (r.x, r.loss))
                .map_err(|e| Error::Format { what: "fit csv".into(), detail: e.to_string() })
        })
        .collect()
}
