use rayon::prelude::*;

use crate::linalg::{Matrix, Vector};

use super::SolverError;

const MAX_ITER: usize = 150;
const STEP_FRACTION: f64 = 0.99;
const FALLBACK_CENTERING: f64 = 0.1;
const REG: f64 = 1e-12;
const MU_FLOOR: f64 = 1e-3;
const STALL_ITERATIONS: usize = 20;

/// One block of a block-angular LP: `A v + B y = d`, `v ≥ 0`, cost `cᵀv`.
#[derive(Debug, Clone)]
pub struct LpBlock {
    pub a: Matrix,
    pub b: Matrix,
    pub d: Vector,
    pub c: Vector,
}

/// `min Σ c_rᵀv_r + c_yᵀy  s.t.  A_r v_r + B_r y = d_r,  v_r ≥ 0,  y free`.
#[derive(Debug, Clone)]
pub struct BlockLp {
    pub blocks: Vec<LpBlock>,
    pub c_y: Vector,
}

#[derive(Debug, Clone)]
pub struct BlockLpSolution {
    pub v: Vec<Vector>,
    pub y: Vector,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub converged: bool,
    pub iterations: usize,
}

struct Iterate {
    v: Vec<Vector>,
    z: Vec<Vector>,
    pi: Vec<Vector>,
    y: Vector,
}

impl BlockLp {
    fn validate(&self) -> Result<(), SolverError> {
        let p = self.c_y.len();
        for (r, blk) in self.blocks.iter().enumerate() {
            let (m, n) = blk.a.shape();
            if blk.b.shape() != (m, p) || blk.d.len() != m || blk.c.len() != n {
                return Err(SolverError::DimensionMismatch(format!("block {r}")));
            }
        }
        Ok(())
    }

    fn residuals(&self, it: &Iterate) -> (Vec<Vector>, Vec<Vector>, Vector) {
        let rp: Vec<Vector> = self.blocks.par_iter().zip(it.v.par_iter())
            .map(|(b, v)| &b.a * v + &b.b * &it.y - &b.d)
            .collect();
        let rd: Vec<Vector> = self.blocks.par_iter().zip(it.pi.par_iter()).zip(it.z.par_iter())
            .map(|((b, pi), z)| b.a.transpose() * pi + z - &b.c)
            .collect();
        let mut ry = -&self.c_y;
        for (b, pi) in self.blocks.iter().zip(&it.pi) {
            ry += b.b.transpose() * pi;
        }
        (rp, rd, ry)
    }

    fn objective(&self, it: &Iterate) -> f64 {
        self.blocks.iter().zip(&it.v).map(|(b, v)| b.c.dot(v)).sum::<f64>() + self.c_y.dot(&it.y)
    }
}

struct BlockFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    minv_b: Matrix,
}

/// Primal-dual interior point method exploiting block-angular structure.
///
/// The normal equations decouple per block; the coupling variables `y` are
/// eliminated through a dense Schur complement of size `dim(y)`.
pub fn solve_block_lp(lp: &BlockLp, tol: f64) -> Result<BlockLpSolution, SolverError> {
    lp.validate()?;
    let p = lp.c_y.len();
    let nb = lp.blocks.len();
    let mut it = Iterate {
        v: lp.blocks.iter().map(|b| Vector::from_element(b.a.ncols(), 1.0)).collect(),
        z: lp.blocks.iter().map(|b| Vector::from_element(b.a.ncols(), 1.0)).collect(),
        pi: lp.blocks.iter().map(|b| Vector::zeros(b.a.nrows())).collect(),
        y: Vector::zeros(p),
    };
    let nv: usize = lp.blocks.iter().map(|b| b.a.ncols()).sum();
    let scale_p = 1.0 + lp.blocks.iter().map(|b| b.d.amax()).fold(0.0, f64::max);
    let scale_d = 1.0 + lp.blocks.iter().map(|b| b.c.amax()).fold(lp.c_y.amax(), f64::max);

    let mut converged = false;
    let mut iterations = 0;
    let (mut pres, mut dres, mut gap) = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut best = (f64::INFINITY, 0, it.v.clone(), it.y.clone(), (pres, dres, gap));
    for k in 0..MAX_ITER {
        iterations = k;
        let (rp, rd, ry) = lp.residuals(&it);
        pres = rp.iter().map(|r| r.amax()).fold(0.0, f64::max) / scale_p;
        dres = rd.iter().map(|r| r.amax()).fold(ry.amax(), f64::max) / scale_d;
        let comp: f64 = it.v.iter().zip(&it.z).map(|(v, z)| v.dot(z)).sum();
        let mu = comp / nv as f64;
        gap = comp / (1.0 + lp.objective(&it).abs());
        if pres <= tol && dres <= tol && gap <= tol {
            converged = true;
            break;
        }
        let merit = pres.max(dres).max(gap);
        if merit < best.0 {
            best = (merit, k, it.v.clone(), it.y.clone(), (pres, dres, gap));
        } else if k - best.1 > STALL_ITERATIONS {
            break;
        }

        let factors: Vec<BlockFactor> = lp.blocks.par_iter().enumerate()
            .map(|(r, b)| {
                let d = it.v[r].component_div(&it.z[r]);
                let mut ad = b.a.clone();
                for j in 0..ad.ncols() {
                    ad.column_mut(j).scale_mut(d[j]);
                }
                let mut m = &ad * b.a.transpose();
                let reg = REG * (1.0 + m.diagonal().amax());
                for i in 0..m.nrows() {
                    m[(i, i)] += reg;
                }
                let chol = m.cholesky().ok_or_else(|| SolverError::Failure(format!("block {r} normal matrix not positive definite")))?;
                let minv_b = chol.solve(&b.b);
                Ok(BlockFactor { chol, minv_b })
            })
            .collect::<Result<_, SolverError>>()?;
        let mut schur = Matrix::zeros(p, p);
        for (b, f) in lp.blocks.iter().zip(&factors) {
            schur += b.b.transpose() * &f.minv_b;
        }
        let sreg = 1e-10 * (1.0 + schur.diagonal().amax());
        for i in 0..p {
            schur[(i, i)] += sreg;
        }
        let schur_lu = schur.lu();

        let direction = |rc: &[Vector]| -> Option<(Vec<Vector>, Vec<Vector>, Vector)> {
            // g_r = −r_p − A D (r_d − V⁻¹ r_c)
            let g: Vec<Vector> = (0..nb).into_par_iter().map(|r| {
                let b = &lp.blocks[r];
                let d = it.v[r].component_div(&it.z[r]);
                let inner = Vector::from_iterator(d.len(), (0..d.len()).map(|j| d[j] * (rd[r][j] - rc[r][j] / it.v[r][j])));
                -&rp[r] - &b.a * inner
            }).collect();
            let mut rhs = ry.clone();
            for r in 0..nb {
                rhs += lp.blocks[r].b.transpose() * factors[r].chol.solve(&g[r]);
            }
            let dy = schur_lu.solve(&rhs)?;
            let out: Vec<(Vector, Vector)> = (0..nb).into_par_iter().map(|r| {
                let b = &lp.blocks[r];
                let dpi = factors[r].chol.solve(&(&g[r] - &b.b * &dy));
                let atdpi = b.a.transpose() * &dpi;
                let n = it.v[r].len();
                let dv = Vector::from_iterator(n, (0..n).map(|j| {
                    it.v[r][j] / it.z[r][j] * (atdpi[j] + rd[r][j] - rc[r][j] / it.v[r][j])
                }));
                let dz = Vector::from_iterator(n, (0..n).map(|j| (-rc[r][j] - it.z[r][j] * dv[j]) / it.v[r][j]));
                (dpi, Vector::from_iterator(2 * n, dv.iter().chain(dz.iter()).copied()))
            }).collect();
            let mut dpis = Vec::with_capacity(nb);
            let mut dvz = Vec::with_capacity(nb);
            for (a, b) in out {
                dpis.push(a);
                dvz.push(b);
            }
            Some((dpis, dvz, dy))
        };

        let rc_aff: Vec<Vector> = it.v.iter().zip(&it.z).map(|(v, z)| v.component_mul(z)).collect();
        let Some((_, dvz_a, _)) = direction(&rc_aff) else { break };
        let (ap_aff, ad_aff) = step_lengths(&it, &dvz_a);
        let (ap_aff, ad_aff) = (ap_aff.min(1.0), ad_aff.min(1.0));
        let mut comp_aff = 0.0;
        for r in 0..nb {
            let n = it.v[r].len();
            for j in 0..n {
                comp_aff += (it.v[r][j] + ap_aff * dvz_a[r][j]) * (it.z[r][j] + ad_aff * dvz_a[r][n + j]);
            }
        }
        let mut sigma = (comp_aff / nv as f64 / mu).powi(3);
        if !sigma.is_finite() || ap_aff.min(ad_aff) < 1e-8 {
            sigma = FALLBACK_CENTERING;
        }
        // keep complementarity from outrunning primal feasibility
        let sigma = sigma.max((MU_FLOOR * pres * scale_p / mu).min(1.0)).min(1.0);
        let rc: Vec<Vector> = (0..nb).map(|r| {
            let n = it.v[r].len();
            Vector::from_iterator(n, (0..n).map(|j| {
                it.v[r][j] * it.z[r][j] + dvz_a[r][j] * dvz_a[r][n + j] - sigma * mu
            }))
        }).collect();
        let Some((dpi, dvz, dy)) = direction(&rc) else { break };
        let (ap, ad) = step_lengths(&it, &dvz);
        let (ap, ad) = ((STEP_FRACTION * ap).min(1.0), (STEP_FRACTION * ad).min(1.0));
        for r in 0..nb {
            let n = it.v[r].len();
            for j in 0..n {
                it.v[r][j] += ap * dvz[r][j];
                it.z[r][j] += ad * dvz[r][n + j];
            }
            it.pi[r] += &dpi[r] * ad;
        }
        it.y += &dy * ap;
        iterations = k + 1;
        if !it.y.iter().all(|x| x.is_finite()) {
            return Err(SolverError::Failure("block LP iterate diverged".into()));
        }
    }

    if !converged && best.0.is_finite() {
        it.v = best.2;
        it.y = best.3;
        (pres, dres, gap) = best.4;
    }
    Ok(BlockLpSolution {
        objective: lp.objective(&it),
        v: it.v,
        y: it.y,
        primal_residual: pres,
        dual_residual: dres,
        gap,
        converged,
        iterations,
    })
}

/// Largest primal and dual steps keeping `v` and `z` nonnegative.
fn step_lengths(it: &Iterate, dvz: &[Vector]) -> (f64, f64) {
    let (mut ap, mut ad) = (f64::INFINITY, f64::INFINITY);
    for r in 0..it.v.len() {
        let n = it.v[r].len();
        for j in 0..n {
            let dv = dvz[r][j];
            let dz = dvz[r][n + j];
            if dv < 0.0 {
                ap = ap.min(-it.v[r][j] / dv);
            }
            if dz < 0.0 {
                ad = ad.min(-it.z[r][j] / dz);
            }
        }
    }
    (ap, ad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{solve_qp, QpProblem};

    #[test]
    fn matches_dense_solver() {
        // max y s.t. a_rᵀv_r + y = d_r, v_r ≥ 0, so y ≤ min_r d_r
        let blocks = vec![
            LpBlock { a: Matrix::from_row_slice(1, 2, &[1.0, 1.0]), b: Matrix::from_row_slice(1, 1, &[1.0]), d: Vector::from_row_slice(&[2.0]), c: Vector::zeros(2) },
            LpBlock { a: Matrix::from_row_slice(1, 2, &[1.0, 2.0]), b: Matrix::from_row_slice(1, 1, &[1.0]), d: Vector::from_row_slice(&[3.0]), c: Vector::zeros(2) },
        ];
        let lp = BlockLp { blocks, c_y: Vector::from_row_slice(&[-1.0]) };
        let sol = solve_block_lp(&lp, 1e-10).unwrap();
        assert!(sol.converged);
        assert!((sol.y[0] - 2.0).abs() < 1e-7, "{}", sol.y[0]);

        // same problem in dense form: vars (v11, v12, v21, v22, y)
        let mut a_eq = Matrix::zeros(2, 5);
        a_eq[(0, 0)] = 1.0; a_eq[(0, 1)] = 1.0; a_eq[(0, 4)] = 1.0;
        a_eq[(1, 2)] = 1.0; a_eq[(1, 3)] = 2.0; a_eq[(1, 4)] = 1.0;
        let mut a_in = Matrix::zeros(4, 5);
        for i in 0..4 { a_in[(i, i)] = -1.0; }
        let mut f = Vector::zeros(5);
        f[4] = -1.0;
        let dense = solve_qp(&QpProblem::lp(f).with_equalities(a_eq, Vector::from_row_slice(&[2.0, 3.0])).with_inequalities(a_in, Vector::zeros(4))).unwrap();
        assert!((dense.x[4] - sol.y[0]).abs() < 1e-6);
    }
}
