//! Dense two-phase tableau simplex for small linear programs.
//!
//! Problems are maximized. Each row is scaled to unit max-norm and flipped to a
//! non-negative right-hand side before phase 1; duals are reported against the
//! caller's original rows.

use thiserror::Error;

const PIVOT_TOL: f64 = 1e-9;
const DEGENERATE_STREAK: usize = 50;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LpError {
    #[error("malformed problem: {0}")]
    Shape(String),
    #[error("simplex did not terminate within {0} pivots")]
    NumericalFailure(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub relation: Relation,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LpProblem {
    /// Coefficients of the maximized objective.
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    /// Per-variable lower bounds; empty means all zero.
    pub lower_bounds: Vec<f64>,
}

impl LpProblem {
    pub fn maximize(objective: Vec<f64>) -> Self {
        Self { objective, constraints: Vec::new(), lower_bounds: Vec::new() }
    }

    pub fn constrain(&mut self, coeffs: Vec<f64>, relation: Relation, rhs: f64) -> &mut Self {
        self.constraints.push(Constraint { coeffs, relation, rhs });
        self
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Primal values; empty unless optimal.
    pub x: Vec<f64>,
    /// One dual per constraint; empty unless optimal.
    pub duals: Vec<f64>,
    /// Objective value; `NaN` unless optimal.
    pub objective: f64,
    pub iterations: usize,
}

impl LpSolution {
    fn degenerate(status: LpStatus, iterations: usize) -> Self {
        Self { status, x: Vec::new(), duals: Vec::new(), objective: f64::NAN, iterations }
    }
}

struct Tableau {
    m: usize,
    width: usize,
    /// `m` rows of `width` entries; the last entry of each row is the rhs.
    rows: Vec<f64>,
    /// Reduced costs `c_B B^-1 A_j - c_j`; the last entry is the objective value.
    d: Vec<f64>,
    basis: Vec<usize>,
    iterations: usize,
    cap: usize,
}

enum Outcome {
    Optimal,
    Unbounded,
}

impl Tableau {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.rows[i * self.width + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.rows[i * self.width + self.width - 1]
    }

    fn price(&mut self, cost: &[f64]) {
        let w = self.width;
        self.d.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..w - 1 {
            self.d[j] = -cost[j];
        }
        for i in 0..self.m {
            let cb = cost[self.basis[i]];
            if cb != 0.0 {
                let row = &self.rows[i * w..(i + 1) * w];
                for (dj, a) in self.d.iter_mut().zip(row) {
                    *dj += cb * a;
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.width;
        let inv = 1.0 / self.at(r, c);
        for v in &mut self.rows[r * w..(r + 1) * w] {
            *v *= inv;
        }
        self.rows[r * w + c] = 1.0;
        let pivot_row: Vec<f64> = self.rows[r * w..(r + 1) * w].to_vec();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.rows[i * w + c];
            if f != 0.0 {
                let row = &mut self.rows[i * w..(i + 1) * w];
                for (a, p) in row.iter_mut().zip(&pivot_row) {
                    *a -= f * p;
                }
                row[c] = 0.0;
            }
        }
        let f = self.d[c];
        if f != 0.0 {
            for (a, p) in self.d.iter_mut().zip(&pivot_row) {
                *a -= f * p;
            }
            self.d[c] = 0.0;
        }
        self.basis[r] = c;
    }

    /// Runs primal simplex over columns `0..n_enter`. Dantzig pricing, switching
    /// permanently to Bland's rule after a streak of degenerate pivots.
    fn run(&mut self, n_enter: usize, d_tol: f64) -> Result<Outcome, LpError> {
        let mut bland = false;
        let mut streak = 0usize;
        loop {
            let mut enter = None;
            let mut best = -d_tol;
            for j in 0..n_enter {
                let dj = self.d[j];
                if dj < -d_tol {
                    if bland {
                        enter = Some(j);
                        break;
                    }
                    if dj < best {
                        best = dj;
                        enter = Some(j);
                    }
                }
            }
            let Some(c) = enter else { return Ok(Outcome::Optimal) };

            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let a = self.at(i, c);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i).max(0.0) / a;
                    match leave {
                        None => leave = Some((i, ratio)),
                        Some((r, best_ratio)) => {
                            let slack = 1e-12 * best_ratio.abs().max(1.0);
                            if ratio < best_ratio - slack
                                || (ratio <= best_ratio + slack && self.basis[i] < self.basis[r])
                            {
                                leave = Some((i, ratio));
                            }
                        }
                    }
                }
            }
            let Some((r, ratio)) = leave else { return Ok(Outcome::Unbounded) };

            self.iterations += 1;
            if self.iterations > self.cap {
                return Err(LpError::NumericalFailure(self.cap));
            }
            if ratio <= 1e-12 {
                streak += 1;
                if streak > DEGENERATE_STREAK {
                    bland = true;
                }
            } else {
                streak = 0;
            }
            self.pivot(r, c);
        }
    }
}

/// Solves `max c.x` subject to the problem's rows and `x >= lower_bounds`.
pub fn solve_lp(problem: &LpProblem) -> Result<LpSolution, LpError> {
    let n = problem.objective.len();
    let m = problem.constraints.len();
    if problem.objective.iter().any(|c| !c.is_finite()) {
        return Err(LpError::Shape("objective has non-finite coefficients".into()));
    }
    let lb: Vec<f64> = if problem.lower_bounds.is_empty() {
        vec![0.0; n]
    } else if problem.lower_bounds.len() == n {
        problem.lower_bounds.clone()
    } else {
        return Err(LpError::Shape("lower bounds length differs from variable count".into()));
    };
    if lb.iter().any(|l| !l.is_finite()) {
        return Err(LpError::Shape("lower bounds must be finite".into()));
    }

    // Normalized rows: shifted by lb, scaled, rhs >= 0.
    let mut rows = Vec::with_capacity(m);
    let mut factor = Vec::with_capacity(m);
    for (i, con) in problem.constraints.iter().enumerate() {
        if con.coeffs.len() != n {
            return Err(LpError::Shape(format!("constraint {i} has {} coefficients, expected {n}", con.coeffs.len())));
        }
        if !con.rhs.is_finite() || con.coeffs.iter().any(|a| !a.is_finite()) {
            return Err(LpError::Shape(format!("constraint {i} is not finite")));
        }
        let rhs = con.rhs - con.coeffs.iter().zip(&lb).map(|(a, l)| a * l).sum::<f64>();
        let scale = con.coeffs.iter().fold(0.0f64, |acc, a| acc.max(a.abs()));
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let sign = if rhs < 0.0 { -1.0 } else { 1.0 };
        let relation = match (con.relation, sign < 0.0) {
            (Relation::Le, true) => Relation::Ge,
            (Relation::Ge, true) => Relation::Le,
            (r, _) => r,
        };
        let k = sign / scale;
        rows.push((con.coeffs.iter().map(|a| a * k).collect::<Vec<_>>(), relation, rhs * k));
        factor.push(k);
    }

    // Column layout: structural | slack/surplus | artificial.
    let n_slack = rows.iter().filter(|r| r.1 != Relation::Eq).count();
    let n_art = rows.iter().filter(|r| r.1 != Relation::Le).count();
    let art_start = n + n_slack;
    let n_cols = art_start + n_art;
    let width = n_cols + 1;
    let mut tab = vec![0.0; m * width];
    let mut basis = vec![0; m];
    let mut dual_col = vec![0; m];
    let (mut next_slack, mut next_art) = (n, art_start);
    for (i, (coeffs, rel, rhs)) in rows.iter().enumerate() {
        let row = &mut tab[i * width..(i + 1) * width];
        row[..n].copy_from_slice(coeffs);
        row[n_cols] = *rhs;
        match rel {
            Relation::Le => {
                row[next_slack] = 1.0;
                basis[i] = next_slack;
                dual_col[i] = next_slack;
                next_slack += 1;
            }
            Relation::Ge => {
                row[next_slack] = -1.0;
                next_slack += 1;
                row[next_art] = 1.0;
                basis[i] = next_art;
                dual_col[i] = next_art;
                next_art += 1;
            }
            Relation::Eq => {
                row[next_art] = 1.0;
                basis[i] = next_art;
                dual_col[i] = next_art;
                next_art += 1;
            }
        }
    }

    let mut t = Tableau {
        m,
        width,
        rows: tab,
        d: vec![0.0; width],
        basis,
        iterations: 0,
        cap: 20_000 + 50 * (m + n_cols),
    };

    if n_art > 0 {
        let mut cost = vec![0.0; n_cols];
        cost[art_start..].iter_mut().for_each(|c| *c = -1.0);
        t.price(&cost);
        t.run(n_cols, 1e-11)?;
        let infeas = -t.d[n_cols];
        let rhs_scale = 1.0 + rows.iter().map(|r| r.2).fold(0.0, f64::max);
        if infeas > 1e-9 * rhs_scale {
            return Ok(LpSolution::degenerate(LpStatus::Infeasible, t.iterations));
        }
        // Drive zero-level artificials out of the basis where possible.
        for i in 0..m {
            if t.basis[i] >= art_start {
                let mut best: Option<(usize, f64)> = None;
                for j in 0..art_start {
                    let a = t.at(i, j).abs();
                    if a > 1e-7 && best.is_none_or(|(_, b)| a > b) {
                        best = Some((j, a));
                    }
                }
                if let Some((j, _)) = best {
                    t.pivot(i, j);
                }
            }
        }
    }

    let mut cost = vec![0.0; n_cols];
    cost[..n].copy_from_slice(&problem.objective);
    t.price(&cost);
    let c_scale = problem.objective.iter().fold(1.0f64, |acc, c| acc.max(c.abs()));
    match t.run(art_start, 1e-9 * c_scale)? {
        Outcome::Unbounded => return Ok(LpSolution::degenerate(LpStatus::Unbounded, t.iterations)),
        Outcome::Optimal => {}
    }

    let mut x = lb;
    for i in 0..m {
        let j = t.basis[i];
        if j < n {
            x[j] += t.rhs(i).max(0.0);
        }
    }
    let duals = (0..m).map(|i| t.d[dual_col[i]] * factor[i]).collect();
    let objective = problem.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(LpSolution { status: LpStatus::Optimal, x, duals, objective, iterations: t.iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lp(obj: &[f64], rows: &[(&[f64], Relation, f64)]) -> LpProblem {
        let mut p = LpProblem::maximize(obj.to_vec());
        for (a, r, b) in rows {
            p.constrain(a.to_vec(), *r, *b);
        }
        p
    }

    #[test]
    fn single_bound() {
        let s = solve_lp(&lp(&[1.0], &[(&[1.0], Relation::Le, 5.0)])).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 5.0).abs() < 1e-12);
        assert!((s.duals[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_variable_vertex() {
        let p = lp(
            &[3.0, 2.0],
            &[(&[1.0, 1.0], Relation::Le, 4.0), (&[1.0, 3.0], Relation::Le, 6.0)],
        );
        let s = solve_lp(&p).unwrap();
        assert!((s.objective - 12.0).abs() < 1e-9);
        assert!((s.x[0] - 4.0).abs() < 1e-9 && s.x[1].abs() < 1e-9);
        let oracle = enumerate_vertices(&p).unwrap();
        assert!((oracle - 12.0).abs() < 1e-9);
    }

    #[test]
    fn detects_infeasible() {
        let s = solve_lp(&lp(&[1.0], &[(&[1.0], Relation::Le, 1.0), (&[1.0], Relation::Ge, 2.0)])).unwrap();
        assert_eq!(s.status, LpStatus::Infeasible);
    }

    #[test]
    fn detects_unbounded() {
        let s = solve_lp(&lp(&[1.0, 1.0], &[(&[1.0, -1.0], Relation::Le, 1.0)])).unwrap();
        assert_eq!(s.status, LpStatus::Unbounded);
    }

    #[test]
    fn equality_and_lower_bounds() {
        // max x + 2y, x + y = 3, x >= 1, y >= 0.5  => x = 1, y = 2
        let mut p = lp(&[1.0, 2.0], &[(&[1.0, 1.0], Relation::Eq, 3.0)]);
        p.lower_bounds = vec![1.0, 0.5];
        let s = solve_lp(&p).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-9);
        assert!((s.x[1] - 2.0).abs() < 1e-9);
        assert!((s.objective - 5.0).abs() < 1e-9);
        assert!((s.duals[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn redundant_equalities() {
        let p = lp(
            &[1.0, 1.0],
            &[
                (&[1.0, -1.0], Relation::Eq, 0.0),
                (&[2.0, -2.0], Relation::Eq, 0.0),
                (&[1.0, 0.0], Relation::Le, 2.0),
            ],
        );
        let s = solve_lp(&p).unwrap();
        assert!((s.objective - 4.0).abs() < 1e-9);
    }

    #[test]
    fn ge_row_has_nonpositive_dual() {
        // max -x s.t. x >= 2  => dual of the >= row is -1
        let s = solve_lp(&lp(&[-1.0], &[(&[1.0], Relation::Ge, 2.0)])).unwrap();
        assert!((s.x[0] - 2.0).abs() < 1e-12);
        assert!((s.duals[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_ragged_rows() {
        assert!(matches!(
            solve_lp(&lp(&[1.0, 1.0], &[(&[1.0], Relation::Le, 1.0)])),
            Err(LpError::Shape(_))
        ));
    }

    /// Vertex enumeration over all n-subsets of the tight rows (constraints plus
    /// non-negativity). Returns the best feasible vertex objective.
    fn enumerate_vertices(p: &LpProblem) -> Option<f64> {
        let n = p.n_vars();
        let mut planes: Vec<(Vec<f64>, f64)> = p.constraints.iter().map(|c| (c.coeffs.clone(), c.rhs)).collect();
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            planes.push((e, 0.0));
        }
        let k = planes.len();
        let mut best: Option<f64> = None;
        let mut idx: Vec<usize> = (0..n).collect();
        loop {
            let a: Vec<Vec<f64>> = idx.iter().map(|&i| planes[i].0.clone()).collect();
            let b: Vec<f64> = idx.iter().map(|&i| planes[i].1).collect();
            if let Some(x) = gauss(a, b) {
                let feasible = x.iter().all(|v| *v >= -1e-9)
                    && p.constraints.iter().all(|c| {
                        let lhs: f64 = c.coeffs.iter().zip(&x).map(|(a, v)| a * v).sum();
                        match c.relation {
                            Relation::Le => lhs <= c.rhs + 1e-9,
                            Relation::Ge => lhs >= c.rhs - 1e-9,
                            Relation::Eq => (lhs - c.rhs).abs() <= 1e-9,
                        }
                    });
                if feasible {
                    let v: f64 = p.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
                    best = Some(best.map_or(v, |b: f64| b.max(v)));
                }
            }
            // next combination
            let mut i = n;
            loop {
                if i == 0 {
                    return best;
                }
                i -= 1;
                if idx[i] < k - n + i {
                    idx[i] += 1;
                    for j in i + 1..n {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    fn gauss(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
            if a[piv][col].abs() < 1e-10 {
                return None;
            }
            a.swap(col, piv);
            b.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..n {
                        a[r][c] -= f * a[col][c];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
        Some((0..n).map(|i| b[i] / a[i][i]).collect())
    }

    fn random_lp() -> impl Strategy<Value = LpProblem> {
        (1usize..=6, 1usize..=5).prop_flat_map(|(n, m)| {
            (
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec((prop::collection::vec(-3.0f64..3.0, n), 0u8..3, 0.0f64..10.0), m),
            )
                .prop_map(move |(obj, rows)| {
                    let mut p = LpProblem::maximize(obj);
                    // Origin-feasible rows keep the problem feasible; a box keeps it bounded.
                    for (a, kind, b) in rows {
                        match kind {
                            0 => p.constrain(a, Relation::Le, b),
                            1 => {
                                let neg: Vec<f64> = a.iter().map(|v| -v).collect();
                                p.constrain(neg, Relation::Ge, -b)
                            }
                            _ => p.constrain(a.iter().map(|v| v.abs()).collect(), Relation::Le, b),
                        };
                    }
                    for j in 0..n {
                        let mut e = vec![0.0; n];
                        e[j] = 1.0;
                        p.constrain(e, Relation::Le, 4.0);
                    }
                    p
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn matches_vertex_enumeration(p in random_lp()) {
            let s = solve_lp(&p).unwrap();
            prop_assert_eq!(s.status, LpStatus::Optimal);
            let oracle = enumerate_vertices(&p).unwrap();
            prop_assert!((s.objective - oracle).abs() <= 1e-7 * oracle.abs().max(1.0),
                "simplex {} vs oracle {}", s.objective, oracle);
        }

        #[test]
        fn primal_dual_certificate(p in random_lp()) {
            let s = solve_lp(&p).unwrap();
            prop_assert_eq!(s.status, LpStatus::Optimal);
            let mut dual_obj = 0.0;
            let mut aty = vec![0.0; p.n_vars()];
            for (c, &y) in p.constraints.iter().zip(&s.duals) {
                let lhs: f64 = c.coeffs.iter().zip(&s.x).map(|(a, v)| a * v).sum();
                match c.relation {
                    Relation::Le => {
                        prop_assert!(lhs <= c.rhs + 1e-7);
                        prop_assert!(y >= -1e-9);
                    }
                    Relation::Ge => {
                        prop_assert!(lhs >= c.rhs - 1e-7);
                        prop_assert!(y <= 1e-9);
                    }
                    Relation::Eq => prop_assert!((lhs - c.rhs).abs() <= 1e-7),
                }
                prop_assert!((y * (lhs - c.rhs)).abs() <= 1e-6);
                dual_obj += y * c.rhs;
                for (acc, a) in aty.iter_mut().zip(&c.coeffs) {
                    *acc += y * a;
                }
            }
            for (j, (&r, &c)) in aty.iter().zip(&p.objective).enumerate() {
                // Reduced cost is non-negative for x >= 0 columns and zero on the support.
                prop_assert!(r - c >= -1e-7, "column {} dual infeasible", j);
                prop_assert!(((r - c) * s.x[j]).abs() <= 1e-6);
            }
            prop_assert!((dual_obj - s.objective).abs() <= 1e-6 * s.objective.abs().max(1.0));
        }
    }
}
