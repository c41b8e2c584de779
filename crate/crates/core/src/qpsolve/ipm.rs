//! Mehrotra predictor-corrector interior point iteration with Ruiz
//! equilibration, active-set polishing and a phase-one infeasibility check.

use nalgebra::{DMatrix, DVector};

use super::ldl::BandedKkt;
use super::sparse::Csr;
use super::{kkt_residuals, FarkasCertificate, QpProblem, QpSettings, QpSolution, QpStatus, WarmStart};

const TIGHT: f64 = 1e-10;
const STEP_TO_BOUNDARY: f64 = 0.995;
const KKT_REG: f64 = 1e-9;
const PIVOT_EPS: f64 = 1e-13;
const PIVOT_REG: f64 = 1e-8;
const REFINE: usize = 3;
const STALL_WINDOW: usize = 25;
const DIVERGENCE: f64 = 1e13;
const FALLBACK_SIGMA: f64 = 0.3;
const NEIGHBOURHOOD: f64 = 1e-3;
const BACKTRACK: usize = 20;

/// Stateless apart from its settings; one value per worker is fine.
#[derive(Debug, Clone, Default)]
pub struct QpSolver {
    pub settings: QpSettings,
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings }
    }

    pub fn solve(&self, p: &QpProblem, warm: Option<&WarmStart>) -> QpSolution {
        if let Some(sol) = trivially_infeasible_bounds(p) {
            return sol;
        }
        let scaled = Scaled::new(p, self.settings.ruiz_iterations);
        let max_iter = self
            .settings
            .max_iter
            .unwrap_or_else(|| (10 * p.dim() * p.dim()).max(100));
        let raw = interior_point(&scaled, warm, &self.settings, max_iter);

        match raw.outcome {
            Outcome::Converged | Outcome::Acceptable => {
                let mut sol = scaled.unscale(&raw, p, QpStatus::Optimal);
                let ipm_res = kkt_residuals(p, &sol);
                if self.settings.polish {
                    if let Some(pol) = polish(&scaled, &raw, p) {
                        let pol_res = kkt_residuals(p, &pol);
                        let rel = |r: &super::KktResiduals| r.max() / (1.0 + r.scale);
                        if rel(&pol_res) <= rel(&ipm_res).max(TIGHT) {
                            sol = QpSolution {
                                iterations: raw.iterations,
                                ..pol
                            };
                        }
                    }
                }
                let res = kkt_residuals(p, &sol);
                let tol = self.settings.eps_rel.max(self.settings.eps_abs);
                if !res.within(tol) {
                    sol.status = QpStatus::MaxIterations;
                }
                sol
            }
            Outcome::Stalled | Outcome::Diverged | Outcome::MaxIter => {
                // a stalled iterate often still identifies the active set
                if self.settings.polish && raw.outcome != Outcome::Diverged {
                    if let Some(pol) = polish(&scaled, &raw, p) {
                        if kkt_residuals(p, &pol).within(self.settings.eps_rel.max(self.settings.eps_abs)) {
                            return QpSolution {
                                iterations: raw.iterations,
                                ..pol
                            };
                        }
                    }
                }
                if let Some(cert) = phase_one(p, &self.settings) {
                    let mut sol = scaled.unscale(&raw, p, QpStatus::Infeasible);
                    sol.certificate = Some(cert);
                    return sol;
                }
                let mut sol = scaled.unscale(&raw, p, QpStatus::MaxIterations);
                if raw.primal_diverged || is_unbounded_ray(p, &sol.z) {
                    sol.status = QpStatus::Unbounded;
                }
                sol
            }
        }
    }
}

/// Whether `z / ‖z‖∞` is a direction of unbounded descent: feasible for the
/// homogeneous constraints, in the null space of `Q`, and decreasing `cᵀz`.
fn is_unbounded_ray(p: &QpProblem, z: &DVector<f64>) -> bool {
    let norm = z.amax();
    if norm <= 1e3 * (1.0 + p.data_scale()) {
        return false;
    }
    let d = z / norm;
    let tol = 1e-6;
    let qmax = p.q().amax();
    (p.q() * &d).amax() <= tol * (1.0 + qmax)
        && p.c().dot(&d) < -tol * p.c().amax()
        && (p.a_eq() * &d).amax() <= tol * (1.0 + p.a_eq().amax())
        && (p.a_in() * &d).iter().all(|&v| v <= tol * (1.0 + p.a_in().amax()))
        && (0..p.dim()).all(|j| {
            (!p.lb()[j].is_finite() || d[j] >= -tol) && (!p.ub()[j].is_finite() || d[j] <= tol)
        })
}

fn trivially_infeasible_bounds(p: &QpProblem) -> Option<QpSolution> {
    let n = p.dim();
    let j = (0..n).find(|&j| p.lb()[j] > p.ub()[j])?;
    let mut y_lb = DVector::zeros(n);
    let mut y_ub = DVector::zeros(n);
    y_lb[j] = 1.0;
    y_ub[j] = 1.0;
    let z = DVector::zeros(n);
    Some(QpSolution {
        status: QpStatus::Infeasible,
        objective: p.objective(&z),
        z,
        y_eq: DVector::zeros(p.n_eq()),
        y_in: DVector::zeros(p.n_in()),
        y_lb: y_lb.clone(),
        y_ub: y_ub.clone(),
        iterations: 0,
        polished: false,
        certificate: Some(FarkasCertificate {
            y_eq: DVector::zeros(p.n_eq()),
            y_in: DVector::zeros(p.n_in()),
            y_lb,
            y_ub,
        }),
    })
}

/// Equilibrated copy of a problem: `z = ρ D ẑ`, rows scaled by `E`,
/// objective scaled by `cs`. `ρ` brings right-hand sides and bounds to
/// order one; multipliers are unaffected by it.
struct Scaled {
    n: usize,
    q: Csr,
    c: Vec<f64>,
    a_eq: Csr,
    b_eq: Vec<f64>,
    a_in: Csr,
    b_in: Vec<f64>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    lower: Vec<usize>,
    upper: Vec<usize>,
    d: Vec<f64>,
    e_eq: Vec<f64>,
    e_in: Vec<f64>,
    cs: f64,
    rho: f64,
    /// Unscaled magnitudes used in termination tests.
    pscale: f64,
    cnorm: f64,
}

fn clamp_scale(v: f64) -> f64 {
    if v < 1e-8 {
        1.0
    } else {
        (1.0 / v.sqrt()).clamp(1e-4, 1e4)
    }
}

impl Scaled {
    fn new(p: &QpProblem, ruiz: usize) -> Self {
        let n = p.dim();
        let mut q = Csr::from_dense(p.q());
        let mut c: Vec<f64> = p.c().iter().copied().collect();
        let mut a_eq = Csr::from_dense(p.a_eq());
        let mut a_in = Csr::from_dense(p.a_in());
        let mut d = vec![1.0; n];
        let mut e_eq = vec![1.0; a_eq.nrows];
        let mut e_in = vec![1.0; a_in.nrows];

        for _ in 0..ruiz {
            let mut col = vec![0.0f64; n];
            for i in 0..n {
                for (j, v) in q.row(i) {
                    col[j] = col[j].max(v.abs());
                }
            }
            let row_scale = |a: &Csr, col: &mut [f64]| -> Vec<f64> {
                (0..a.nrows)
                    .map(|i| {
                        let mut m = 0.0f64;
                        for (j, v) in a.row(i) {
                            m = m.max(v.abs());
                            col[j] = col[j].max(v.abs());
                        }
                        clamp_scale(m)
                    })
                    .collect()
            };
            let re = row_scale(&a_eq, &mut col);
            let ri = row_scale(&a_in, &mut col);
            let dc: Vec<f64> = col.iter().map(|&v| clamp_scale(v)).collect();
            for i in 0..n {
                let (cols, vals) = q.row_mut(i);
                for (v, &j) in vals.iter_mut().zip(cols) {
                    *v *= dc[i] * dc[j];
                }
                c[i] *= dc[i];
                d[i] *= dc[i];
            }
            for (a, r, e) in [(&mut a_eq, &re, &mut e_eq), (&mut a_in, &ri, &mut e_in)] {
                for i in 0..a.nrows {
                    let (cols, vals) = a.row_mut(i);
                    for (v, &j) in vals.iter_mut().zip(cols) {
                        *v *= r[i] * dc[j];
                    }
                    e[i] *= r[i];
                }
            }
        }

        let finite = |v: &f64| if v.is_finite() { v.abs() } else { 0.0 };
        let mut b_eq: Vec<f64> = p.b_eq().iter().zip(&e_eq).map(|(b, e)| b * e).collect();
        let mut b_in: Vec<f64> = p.b_in().iter().zip(&e_in).map(|(b, e)| b * e).collect();
        let mut lb: Vec<f64> = p.lb().iter().zip(&d).map(|(l, d)| l / d).collect();
        let mut ub: Vec<f64> = p.ub().iter().zip(&d).map(|(u, d)| u / d).collect();
        let rho = b_eq
            .iter()
            .chain(&b_in)
            .chain(&lb)
            .chain(&ub)
            .map(finite)
            .fold(1.0f64, f64::max)
            .min(1e8);
        for v in b_eq.iter_mut().chain(b_in.iter_mut()).chain(lb.iter_mut()).chain(ub.iter_mut()) {
            *v /= rho;
        }
        q.val.iter_mut().for_each(|v| *v *= rho);

        let mut qcol_mean = 0.0;
        if n > 0 {
            let mut col = vec![0.0f64; n];
            for i in 0..n {
                for (j, v) in q.row(i) {
                    col[j] = col[j].max(v.abs());
                }
            }
            qcol_mean = col.iter().sum::<f64>() / n as f64;
        }
        let cmax = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let denom = qcol_mean.max(cmax);
        let cs = if denom < 1e-8 { 1.0 } else { (1.0 / denom).clamp(1e-6, 1e6) };
        q.val.iter_mut().for_each(|v| *v *= cs);
        c.iter_mut().for_each(|v| *v *= cs);

        let lower = (0..n).filter(|&j| lb[j].is_finite()).collect();
        let upper = (0..n).filter(|&j| ub[j].is_finite()).collect();
        let pscale = p
            .b_eq()
            .amax()
            .max(p.b_in().amax())
            .max(p.lb().iter().map(finite).fold(0.0, f64::max))
            .max(p.ub().iter().map(finite).fold(0.0, f64::max));
        Self {
            n,
            q,
            c,
            a_eq,
            b_eq,
            a_in,
            b_in,
            lb,
            ub,
            lower,
            upper,
            d,
            e_eq,
            e_in,
            cs,
            rho,
            pscale,
            cnorm: p.c().amax(),
        }
    }

    fn me(&self) -> usize {
        self.b_eq.len()
    }
    fn mi(&self) -> usize {
        self.b_in.len()
    }

    fn unscale(&self, it: &Iterate, p: &QpProblem, status: QpStatus) -> QpSolution {
        let n = self.n;
        let z = DVector::from_iterator(n, it.z.iter().zip(&self.d).map(|(z, d)| z * d * self.rho));
        let y_eq = DVector::from_iterator(
            self.me(),
            it.y.iter().zip(&self.e_eq).map(|(y, e)| y * e / self.cs),
        );
        let y_in = DVector::from_iterator(
            self.mi(),
            it.lam.iter().zip(&self.e_in).map(|(y, e)| y * e / self.cs),
        );
        let mut y_lb = DVector::zeros(n);
        let mut y_ub = DVector::zeros(n);
        for (k, &j) in self.lower.iter().enumerate() {
            y_lb[j] = it.ml[k] / (self.d[j] * self.cs);
        }
        for (k, &j) in self.upper.iter().enumerate() {
            y_ub[j] = it.mu[k] / (self.d[j] * self.cs);
        }
        QpSolution {
            status,
            objective: p.objective(&z),
            z,
            y_eq,
            y_in,
            y_lb,
            y_ub,
            iterations: it.iterations,
            polished: false,
            certificate: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Converged,
    Acceptable,
    Stalled,
    Diverged,
    MaxIter,
}

#[derive(Debug, Clone)]
struct Iterate {
    z: Vec<f64>,
    y: Vec<f64>,
    lam: Vec<f64>,
    s: Vec<f64>,
    tl: Vec<f64>,
    ml: Vec<f64>,
    tu: Vec<f64>,
    mu: Vec<f64>,
    iterations: usize,
    outcome: Outcome,
    primal_diverged: bool,
}

struct Residuals {
    rd: Vec<f64>,
    req: Vec<f64>,
    rin: Vec<f64>,
    rl: Vec<f64>,
    ru: Vec<f64>,
    qz: Vec<f64>,
}

impl Iterate {
    fn residuals(&self, sc: &Scaled, r: &mut Residuals) {
        let n = sc.n;
        sc.q.mul(&self.z, &mut r.qz);
        for j in 0..n {
            r.rd[j] = r.qz[j] + sc.c[j];
        }
        sc.a_eq.mul_t_add(&self.y, &mut r.rd);
        sc.a_in.mul_t_add(&self.lam, &mut r.rd);
        for (k, &j) in sc.lower.iter().enumerate() {
            r.rd[j] -= self.ml[k];
            r.rl[k] = self.z[j] - sc.lb[j] - self.tl[k];
        }
        for (k, &j) in sc.upper.iter().enumerate() {
            r.rd[j] += self.mu[k];
            r.ru[k] = self.z[j] + self.tu[k] - sc.ub[j];
        }
        sc.a_eq.mul(&self.z, &mut r.req);
        for (v, b) in r.req.iter_mut().zip(&sc.b_eq) {
            *v -= b;
        }
        sc.a_in.mul(&self.z, &mut r.rin);
        for i in 0..sc.mi() {
            r.rin[i] += self.s[i] - sc.b_in[i];
        }
    }

    fn complementarity(&self) -> (f64, usize) {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let total = dot(&self.s, &self.lam) + dot(&self.tl, &self.ml) + dot(&self.tu, &self.mu);
        (total, self.s.len() + self.tl.len() + self.tu.len())
    }
}

fn max_step(x: &[f64], dx: &[f64], alpha: f64) -> f64 {
    x.iter().zip(dx).fold(alpha, |a, (&x, &dx)| if dx < 0.0 { a.min(-x / dx) } else { a })
}

fn interior_point(sc: &Scaled, warm: Option<&WarmStart>, settings: &QpSettings, max_iter: usize) -> Iterate {
    let n = sc.n;
    let (me, mi) = (sc.me(), sc.mi());
    let (nl, nu) = (sc.lower.len(), sc.upper.len());

    let mut z: Vec<f64> = match warm {
        Some(w) if w.z.len() == n => w.z.iter().zip(&sc.d).map(|(z, d)| z / (d * sc.rho)).collect(),
        _ => vec![0.0; n],
    };
    for j in 0..n {
        z[j] = z[j].clamp(sc.lb[j], sc.ub[j]);
    }
    let mut ain_z = vec![0.0; mi];
    sc.a_in.mul(&z, &mut ain_z);
    let mut it = Iterate {
        s: (0..mi).map(|i| (sc.b_in[i] - ain_z[i]).max(1.0)).collect(),
        lam: vec![1.0; mi],
        tl: sc.lower.iter().map(|&j| (z[j] - sc.lb[j]).max(1.0)).collect(),
        ml: vec![1.0; nl],
        tu: sc.upper.iter().map(|&j| (sc.ub[j] - z[j]).max(1.0)).collect(),
        mu: vec![1.0; nu],
        y: vec![0.0; me],
        z,
        iterations: 0,
        outcome: Outcome::MaxIter,
        primal_diverged: false,
    };

    // KKT layout: [z (n) | λ (mi) | y (me)]
    let dim = n + mi + me;
    let mut edges = Vec::new();
    for i in 0..n {
        for (j, _) in sc.q.row(i) {
            if j < i {
                edges.push((i, j));
            }
        }
    }
    for r in 0..mi {
        for (j, _) in sc.a_in.row(r) {
            edges.push((n + r, j));
        }
    }
    for r in 0..me {
        for (j, _) in sc.a_eq.row(r) {
            edges.push((n + mi + r, j));
        }
    }
    let signs: Vec<f64> = (0..dim).map(|i| if i < n { 1.0 } else { -1.0 }).collect();
    let mut kkt = BandedKkt::new(dim, &edges, &signs);

    let mut r = Residuals {
        rd: vec![0.0; n],
        req: vec![0.0; me],
        rin: vec![0.0; mi],
        rl: vec![0.0; nl],
        ru: vec![0.0; nu],
        qz: vec![0.0; n],
    };
    let mut rhs = vec![0.0; dim];
    let mut dbox = vec![0.0; n];
    // Newton directions: (dz, dλ, dy) from the KKT solve, the rest recovered.
    let mut ds = vec![0.0; mi];
    let mut dtl = vec![0.0; nl];
    let mut dml = vec![0.0; nl];
    let mut dtu = vec![0.0; nu];
    let mut dmu = vec![0.0; nu];
    let mut ds_aff = vec![0.0; mi];
    let mut dlam_aff = vec![0.0; mi];
    let mut dtl_aff = vec![0.0; nl];
    let mut dml_aff = vec![0.0; nl];
    let mut dtu_aff = vec![0.0; nu];
    let mut dmu_aff = vec![0.0; nu];
    let mut rsl = vec![0.0; mi];
    let mut rtl = vec![0.0; nl];
    let mut rtu = vec![0.0; nu];

    let mut best_merit = f64::INFINITY;
    let mut best_at = 0usize;

    for iter in 0..=max_iter {
        it.iterations = iter;
        it.residuals(sc, &mut r);
        let (gap_total, m) = it.complementarity();
        let mu_avg = if m > 0 { gap_total / m as f64 } else { 0.0 };

        // Termination measured in the original units.
        let mut prim = 0.0f64;
        for (v, e) in r.req.iter().zip(&sc.e_eq) {
            prim = prim.max((v / e).abs());
        }
        for (v, e) in r.rin.iter().zip(&sc.e_in) {
            prim = prim.max((v / e).abs());
        }
        for (k, &j) in sc.lower.iter().enumerate() {
            prim = prim.max((r.rl[k] * sc.d[j]).abs());
        }
        for (k, &j) in sc.upper.iter().enumerate() {
            prim = prim.max((r.ru[k] * sc.d[j]).abs());
        }
        prim *= sc.rho;
        let mut dual = 0.0f64;
        let mut qz_norm = 0.0f64;
        for j in 0..n {
            let w = sc.d[j] * sc.cs;
            dual = dual.max((r.rd[j] / w).abs());
            qz_norm = qz_norm.max((r.qz[j] / w).abs());
        }
        let obj: f64 = (0..n)
            .map(|j| (0.5 * r.qz[j] + sc.c[j]) * it.z[j])
            .sum::<f64>()
            * sc.rho
            / sc.cs;
        let gap = gap_total * sc.rho / sc.cs;
        let pden = 1.0 + sc.pscale;
        let dden = 1.0 + sc.cnorm.max(qz_norm);
        let gden = 1.0 + obj.abs();
        let merit = (prim / pden).max(dual / dden).max(gap / gden);

        if !merit.is_finite() {
            it.outcome = Outcome::Diverged;
            break;
        }
        if prim <= TIGHT * pden && dual <= TIGHT * dden && gap <= TIGHT * gden {
            it.outcome = Outcome::Converged;
            break;
        }
        let znorm = it.z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let ynorm = it
            .y
            .iter()
            .chain(&it.lam)
            .chain(&it.ml)
            .chain(&it.mu)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if znorm > DIVERGENCE || ynorm > DIVERGENCE {
            it.outcome = Outcome::Diverged;
            it.primal_diverged = znorm > DIVERGENCE;
            break;
        }
        if merit < 0.5 * best_merit {
            best_merit = merit;
            best_at = iter;
        } else if iter - best_at > STALL_WINDOW {
            let acceptable = prim <= settings.eps_abs + settings.eps_rel * sc.pscale
                && dual <= settings.eps_abs + settings.eps_rel * sc.cnorm.max(qz_norm)
                && gap <= settings.eps_abs + settings.eps_rel * obj.abs();
            it.outcome = if acceptable { Outcome::Acceptable } else { Outcome::Stalled };
            break;
        }
        if iter == max_iter {
            it.outcome = Outcome::MaxIter;
            break;
        }

        // Assemble and factor the reduced KKT matrix.
        kkt.clear();
        dbox.iter_mut().for_each(|v| *v = 0.0);
        for (k, &j) in sc.lower.iter().enumerate() {
            dbox[j] += it.ml[k] / it.tl[k];
        }
        for (k, &j) in sc.upper.iter().enumerate() {
            dbox[j] += it.mu[k] / it.tu[k];
        }
        for i in 0..n {
            for (j, v) in sc.q.row(i) {
                if j <= i {
                    kkt.add(i, j, v);
                }
            }
            kkt.add(i, i, dbox[i]);
        }
        for row in 0..mi {
            for (j, v) in sc.a_in.row(row) {
                kkt.add(n + row, j, v);
            }
            kkt.add(n + row, n + row, -it.s[row] / it.lam[row]);
        }
        for row in 0..me {
            for (j, v) in sc.a_eq.row(row) {
                kkt.add(n + mi + row, j, v);
            }
        }
        kkt.factorize(KKT_REG, PIVOT_EPS, PIVOT_REG);

        // Predictor, then corrector with the same factorization.
        let mut alpha = 1.0;
        let mut sigma = 0.0;
        for phase in 0..3 {
            if phase == 0 {
                for i in 0..mi {
                    rsl[i] = it.s[i] * it.lam[i];
                }
                for k in 0..nl {
                    rtl[k] = it.tl[k] * it.ml[k];
                }
                for k in 0..nu {
                    rtu[k] = it.tu[k] * it.mu[k];
                }
            } else {
                if m == 0 {
                    break;
                }
                let mut gap_aff = 0.0;
                for i in 0..mi {
                    gap_aff += (it.s[i] + alpha * ds_aff[i]) * (it.lam[i] + alpha * dlam_aff[i]);
                }
                for k in 0..nl {
                    gap_aff += (it.tl[k] + alpha * dtl_aff[k]) * (it.ml[k] + alpha * dml_aff[k]);
                }
                for k in 0..nu {
                    gap_aff += (it.tu[k] + alpha * dtu_aff[k]) * (it.mu[k] + alpha * dmu_aff[k]);
                }
                // phase 2 only runs when the corrected step was rejected:
                // plain centering, no second-order term
                let second = if phase == 1 { 1.0 } else { 0.0 };
                sigma = if phase == 1 {
                    (gap_aff / gap_total).clamp(0.0, 1.0).powi(3)
                } else {
                    sigma.max(FALLBACK_SIGMA)
                };
                let target = sigma * mu_avg;
                for i in 0..mi {
                    rsl[i] = it.s[i] * it.lam[i] + second * ds_aff[i] * dlam_aff[i] - target;
                }
                for k in 0..nl {
                    rtl[k] = it.tl[k] * it.ml[k] + second * dtl_aff[k] * dml_aff[k] - target;
                }
                for k in 0..nu {
                    rtu[k] = it.tu[k] * it.mu[k] + second * dtu_aff[k] * dmu_aff[k] - target;
                }
            }

            for j in 0..n {
                rhs[j] = -r.rd[j];
            }
            for (k, &j) in sc.lower.iter().enumerate() {
                rhs[j] -= (rtl[k] + it.ml[k] * r.rl[k]) / it.tl[k];
            }
            for (k, &j) in sc.upper.iter().enumerate() {
                rhs[j] -= (-rtu[k] + it.mu[k] * r.ru[k]) / it.tu[k];
            }
            for i in 0..mi {
                rhs[n + i] = -r.rin[i] + rsl[i] / it.lam[i];
            }
            for i in 0..me {
                rhs[n + mi + i] = -r.req[i];
            }
            kkt.solve(&mut rhs, REFINE);
            let (dz, rest) = rhs.split_at(n);
            let (dlam, _dy) = rest.split_at(mi);

            for i in 0..mi {
                ds[i] = (-rsl[i] - it.s[i] * dlam[i]) / it.lam[i];
            }
            for (k, &j) in sc.lower.iter().enumerate() {
                dtl[k] = dz[j] + r.rl[k];
                dml[k] = (-rtl[k] - it.ml[k] * dtl[k]) / it.tl[k];
            }
            for (k, &j) in sc.upper.iter().enumerate() {
                dtu[k] = -r.ru[k] - dz[j];
                dmu[k] = (-rtu[k] - it.mu[k] * dtu[k]) / it.tu[k];
            }
            let mut a = 1.0 / STEP_TO_BOUNDARY;
            a = max_step(&it.s, &ds, a);
            a = max_step(&it.lam, dlam, a);
            a = max_step(&it.tl, &dtl, a);
            a = max_step(&it.ml, &dml, a);
            a = max_step(&it.tu, &dtu, a);
            a = max_step(&it.mu, &dmu, a);
            if phase == 0 {
                alpha = a.min(1.0);
                ds_aff.copy_from_slice(&ds);
                dlam_aff.copy_from_slice(dlam);
                dtl_aff.copy_from_slice(&dtl);
                dml_aff.copy_from_slice(&dml);
                dtu_aff.copy_from_slice(&dtu);
                dmu_aff.copy_from_slice(&dmu);
                if m == 0 {
                    break;
                }
            } else {
                alpha = (STEP_TO_BOUNDARY * a).min(1.0);
                if phase == 2 {
                    break;
                }
                // accept the corrected step unless it fails to reduce the
                // average complementarity
                let mut after = 0.0;
                for i in 0..mi {
                    after += (it.s[i] + alpha * ds[i]) * (it.lam[i] + alpha * dlam[i]);
                }
                for k in 0..nl {
                    after += (it.tl[k] + alpha * dtl[k]) * (it.ml[k] + alpha * dml[k]);
                }
                for k in 0..nu {
                    after += (it.tu[k] + alpha * dtu[k]) * (it.mu[k] + alpha * dmu[k]);
                }
                if after <= (1.0 - 0.01 * alpha) * gap_total {
                    break;
                }
            }
        }
        if m == 0 {
            alpha = 1.0;
        } else {
            // stay in a wide neighbourhood of the central path and make progress
            let dlam = &rhs[n..n + mi];
            for _ in 0..BACKTRACK {
                let mut total = 0.0;
                let mut least = f64::INFINITY;
                let mut pairs = |x: &[f64], dx: &[f64], y: &[f64], dy: &[f64]| {
                    for i in 0..x.len() {
                        let v = (x[i] + alpha * dx[i]) * (y[i] + alpha * dy[i]);
                        total += v;
                        least = least.min(v);
                    }
                };
                pairs(&it.s, &ds, &it.lam, dlam);
                pairs(&it.tl, &dtl, &it.ml, &dml);
                pairs(&it.tu, &dtu, &it.mu, &dmu);
                let decrease = total <= (1.0 - 0.01 * alpha * (1.0 - sigma)) * gap_total;
                if least >= NEIGHBOURHOOD * total / m as f64 && decrease {
                    break;
                }
                alpha *= 0.8;
            }
        }

        let (dz, rest) = rhs.split_at(n);
        let (dlam, dy) = rest.split_at(mi);
        let step = |x: &mut [f64], dx: &[f64]| {
            for (x, dx) in x.iter_mut().zip(dx) {
                *x += alpha * dx;
            }
        };
        step(&mut it.z, dz);
        step(&mut it.y, dy);
        step(&mut it.lam, dlam);
        step(&mut it.s, &ds);
        step(&mut it.tl, &dtl);
        step(&mut it.ml, &dml);
        step(&mut it.tu, &dtu);
        step(&mut it.mu, &dmu);
    }
    it
}

/// Solves the equality-constrained problem on the active set guessed from
/// the interior point iterate. Returns `None` when the guess is inconsistent.
fn polish(sc: &Scaled, it: &Iterate, p: &QpProblem) -> Option<QpSolution> {
    let n = sc.n;
    let (me, mi) = (sc.me(), sc.mi());

    // Bound activity: 0 free, -1 at lower, +1 at upper.
    let mut fixed = vec![0i8; n];
    let mut zfix = vec![0.0; n];
    for (k, &j) in sc.lower.iter().enumerate() {
        if it.ml[k] > it.tl[k] {
            fixed[j] = -1;
            zfix[j] = sc.lb[j];
        }
    }
    for (k, &j) in sc.upper.iter().enumerate() {
        if it.mu[k] > it.tu[k] && fixed[j] == 0 {
            fixed[j] = 1;
            zfix[j] = sc.ub[j];
        }
    }
    let active_in: Vec<usize> = (0..mi).filter(|&i| it.lam[i] > it.s[i]).collect();
    let free: Vec<usize> = (0..n).filter(|&j| fixed[j] == 0).collect();
    let mut pos = vec![usize::MAX; n];
    for (k, &j) in free.iter().enumerate() {
        pos[j] = k;
    }
    let nf = free.len();
    let rows: Vec<(&Csr, usize, f64)> = (0..me)
        .map(|r| (&sc.a_eq, r, sc.b_eq[r]))
        .chain(active_in.iter().map(|&r| (&sc.a_in, r, sc.b_in[r])))
        .collect();
    let nr = rows.len();
    let dim = nf + nr;

    let mut edges = Vec::new();
    for &i in &free {
        for (j, _) in sc.q.row(i) {
            if j < i && pos[j] != usize::MAX {
                edges.push((pos[i], pos[j]));
            }
        }
    }
    for (k, (a, r, _)) in rows.iter().enumerate() {
        for (j, _) in a.row(*r) {
            if pos[j] != usize::MAX {
                edges.push((nf + k, pos[j]));
            }
        }
    }
    let signs: Vec<f64> = (0..dim).map(|i| if i < nf { 1.0 } else { -1.0 }).collect();
    let mut kkt = BandedKkt::new(dim, &edges, &signs);
    let mut rhs = vec![0.0; dim];
    for &i in &free {
        rhs[pos[i]] = -sc.c[i];
        for (j, v) in sc.q.row(i) {
            if pos[j] != usize::MAX {
                if j <= i {
                    kkt.add(pos[i], pos[j], v);
                }
            } else {
                rhs[pos[i]] -= v * zfix[j];
            }
        }
    }
    for (k, (a, r, b)) in rows.iter().enumerate() {
        rhs[nf + k] = *b;
        for (j, v) in a.row(*r) {
            if pos[j] != usize::MAX {
                kkt.add(nf + k, pos[j], v);
            } else {
                rhs[nf + k] -= v * zfix[j];
            }
        }
    }
    kkt.factorize(1e-11, PIVOT_EPS, PIVOT_REG);
    kkt.solve(&mut rhs, 20);
    if rhs.iter().any(|v| !v.is_finite()) {
        return None;
    }

    let mut pz = zfix;
    for (k, &j) in free.iter().enumerate() {
        pz[j] = rhs[k];
    }
    let mut py = vec![0.0; me];
    let mut plam = vec![0.0; mi];
    for (k, (_, r, _)) in rows.iter().enumerate() {
        if k < me {
            py[*r] = rhs[nf + k];
        } else {
            plam[*r] = rhs[nf + k].max(0.0);
        }
    }
    // Bound multipliers from stationarity.
    let mut g = vec![0.0; n];
    sc.q.mul(&pz, &mut g);
    for j in 0..n {
        g[j] += sc.c[j];
    }
    sc.a_eq.mul_t_add(&py, &mut g);
    sc.a_in.mul_t_add(&plam, &mut g);
    let mut pml = vec![0.0; sc.lower.len()];
    let mut pmu = vec![0.0; sc.upper.len()];
    for (k, &j) in sc.lower.iter().enumerate() {
        if fixed[j] == -1 {
            pml[k] = g[j].max(0.0);
        }
    }
    for (k, &j) in sc.upper.iter().enumerate() {
        if fixed[j] == 1 {
            pmu[k] = (-g[j]).max(0.0);
        }
    }
    let pit = Iterate {
        z: pz,
        y: py,
        lam: plam,
        s: Vec::new(),
        tl: Vec::new(),
        ml: pml,
        tu: Vec::new(),
        mu: pmu,
        iterations: it.iterations,
        outcome: it.outcome,
        primal_diverged: false,
    };
    let mut sol = sc.unscale(&pit, p, QpStatus::Optimal);
    sol.polished = true;
    Some(sol)
}

/// Phase-one problem: minimize total constraint violation subject to the
/// bounds. Returns a Farkas certificate when the violation is positive.
fn phase_one(p: &QpProblem, settings: &QpSettings) -> Option<FarkasCertificate> {
    let n = p.dim();
    let (me, mi) = (p.n_eq(), p.n_in());
    let nv = n + 2 * me + mi;
    let mut c = DVector::zeros(nv);
    for k in n..nv {
        c[k] = 1.0;
    }
    let mut a_eq = DMatrix::zeros(me, nv);
    for r in 0..me {
        for j in 0..n {
            a_eq[(r, j)] = p.a_eq()[(r, j)];
        }
        a_eq[(r, n + r)] = 1.0;
        a_eq[(r, n + me + r)] = -1.0;
    }
    let mut a_in = DMatrix::zeros(mi, nv);
    for r in 0..mi {
        for j in 0..n {
            a_in[(r, j)] = p.a_in()[(r, j)];
        }
        a_in[(r, n + 2 * me + r)] = -1.0;
    }
    let mut lb = DVector::zeros(nv);
    let mut ub = DVector::from_element(nv, f64::INFINITY);
    for j in 0..n {
        lb[j] = p.lb()[j];
        ub[j] = p.ub()[j];
    }
    let aux = QpProblem::linear(c)
        .ok()?
        .with_equalities(a_eq, p.b_eq().clone())
        .ok()?
        .with_inequalities(a_in, p.b_in().clone())
        .ok()?
        .with_bounds(lb, ub)
        .ok()?;
    let scaled = Scaled::new(&aux, settings.ruiz_iterations);
    let raw = interior_point(&scaled, None, settings, 500);
    if !matches!(raw.outcome, Outcome::Converged | Outcome::Acceptable) {
        return None;
    }
    let sol = scaled.unscale(&raw, &aux, QpStatus::Optimal);
    let viol_tol = settings.eps_abs + settings.eps_rel * (1.0 + p.data_scale());
    if sol.objective <= viol_tol {
        return None;
    }
    let cert = FarkasCertificate {
        y_eq: sol.y_eq.clone(),
        y_in: sol.y_in.clone(),
        y_lb: DVector::from_iterator(n, sol.y_lb.iter().take(n).copied()),
        y_ub: DVector::from_iterator(n, sol.y_ub.iter().take(n).copied()),
    };
    Some(cert)
}
