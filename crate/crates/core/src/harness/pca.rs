use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Scalar;

use super::{HarnessError, TrajectoryLog};

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 10_000;
/// Eigenvalues below this fraction of the trace count as zero.
const RANK_TOL: f64 = 1e-12;

/// Top eigenpairs of a symmetric matrix by power iteration with deflation,
/// in decreasing order. Vectors have unit norm and a positive
/// largest-magnitude entry.
pub fn power_eigen<S: Scalar>(matrix: &[Vec<S>], k: usize, tol: S, max_iter: usize) -> Vec<(S, Vec<S>)> {
    let n = matrix.len();
    let mut m: Vec<Vec<S>> = matrix.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0050_4341);
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(n) {
        let mut v: Vec<S> = (0..n).map(|_| S::lit(rng.random_range(-1.0..1.0))).collect();
        normalize(&mut v);
        let mut lambda = S::zero();
        for _ in 0..max_iter {
            let mut w = mat_vec(&m, &v);
            let norm = norm(&w);
            if norm == S::zero() {
                lambda = S::zero();
                break;
            }
            w.iter_mut().for_each(|x| *x = *x / norm);
            fix_sign(&mut w);
            let delta = w.iter().zip(&v).fold(S::zero(), |acc, (a, b)| acc.max((*a - *b).abs()));
            v = w;
            lambda = dot(&v, &mat_vec(&m, &v));
            if delta < tol {
                break;
            }
        }
        fix_sign(&mut v);
        for (i, row) in m.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = *x - lambda * v[i] * v[j];
            }
        }
        out.push((lambda, v));
    }
    out
}

fn mat_vec<S: Scalar>(m: &[Vec<S>], v: &[S]) -> Vec<S> {
    m.iter().map(|row| dot(row, v)).collect()
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (x, y)| acc + *x * *y)
}

fn norm<S: Scalar>(v: &[S]) -> S {
    dot(v, v).sqrt()
}

fn normalize<S: Scalar>(v: &mut [S]) {
    let n = norm(v);
    v.iter_mut().for_each(|x| *x = *x / n);
}

fn fix_sign<S: Scalar>(v: &mut [S]) {
    let pivot = v.iter().copied().fold(S::zero(), |best, x| if x.abs() > best.abs() { x } else { best });
    if pivot < S::zero() {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Principal components of one stacked trajectory (rows: epochs).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupProjection<S> {
    pub group: String,
    /// Sample variance along each component.
    pub variances: Vec<S>,
    /// Per epoch, one coordinate per component.
    pub coords: Vec<Vec<S>>,
    /// Components with nonzero variance.
    pub rank: usize,
}

/// Centers `rows` and projects them onto their top `dims` principal
/// components. The eigenproblem is solved on the `n × n` Gram matrix,
/// which shares its nonzero spectrum with the covariance.
pub fn project<S: Scalar>(group: &str, rows: &[Vec<S>], dims: usize) -> GroupProjection<S> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    let mut mean = vec![S::zero(); p];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m = *m + *x;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / S::lit(n as f64));
    let centered: Vec<Vec<S>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(x, m)| *x - *m).collect()).collect();
    let gram: Vec<Vec<S>> = centered.iter().map(|a| centered.iter().map(|b| dot(a, b)).collect()).collect();
    let trace = (0..n).fold(S::zero(), |acc, i| acc + gram[i][i]);
    let pairs = power_eigen(&gram, dims, S::lit(POWER_TOL), POWER_MAX_ITER);
    let denom = S::lit((n.max(2) - 1) as f64);
    let mut coords = vec![vec![S::zero(); dims]; n];
    let mut variances = vec![S::zero(); dims];
    let mut rank = 0;
    for (c, (lambda, u)) in pairs.iter().enumerate() {
        if trace == S::zero() || *lambda <= trace * S::lit(RANK_TOL) {
            break;
        }
        rank += 1;
        variances[c] = *lambda / denom;
        let s = lambda.sqrt();
        for (r, row) in coords.iter_mut().enumerate() {
            row[c] = s * u[r];
        }
    }
    GroupProjection { group: group.to_string(), variances, coords, rank }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub dims: usize,
    pub groups: Vec<GroupProjection<f64>>,
}

impl PcaResult {
    pub fn warnings(&self) -> Vec<String> {
        self.groups
            .iter()
            .filter(|g| g.rank < self.dims)
            .map(|g| format!("group {} has rank {} below {} dims; trailing components are 0", g.group, g.rank, self.dims))
            .collect()
    }

    /// `epoch,group,c1..` rows behind `#` warning lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for w in self.warnings() {
            out.push_str(&format!("# warning: {w}\n"));
        }
        out.push_str("epoch,group");
        for c in 1..=self.dims {
            out.push_str(&format!(",c{c}"));
        }
        out.push('\n');
        for g in &self.groups {
            for (epoch, row) in g.coords.iter().enumerate() {
                out.push_str(&format!("{epoch},{}", g.group));
                for x in row {
                    out.push_str(&format!(",{:.6}", clean_zero(*x)));
                }
                out.push('\n');
            }
        }
        out
    }
}

fn clean_zero(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x
    }
}

/// Per-group projection of a trajectory log.
pub fn pca_trajectory(log: &TrajectoryLog, dims: usize) -> Result<PcaResult, HarnessError> {
    if dims == 0 {
        return Err(HarnessError::Config("analysis.pca_dims: must be positive".into()));
    }
    let mut groups = Vec::new();
    for (name, rows) in &log.groups {
        if rows.len() < dims + 1 {
            return Err(HarnessError::Runtime(format!(
                "group {name}: {} epochs logged, {} needed for {dims} components",
                rows.len(),
                dims + 1
            )));
        }
        groups.push(project(name, rows, dims));
    }
    Ok(PcaResult { dims, groups })
}
