//! Python bindings: instances travel as JSON text, results as dicts.

#[pyo3::pymodule]
mod pitplan_py {
    use pitplan::blockmodel::{generate_synthetic as generate, instance_from_json, instance_to_json, Instance};
    use pitplan::colgen::{run_dw, DwConfig};
    use pitplan::evaluate::{check_feasible, Evaluator, Schedule};
    use pitplan::metaheuristic::{epsilon_schedule, hybrid_optimize, EpsilonKind, HybridConfig};
    use pitplan::rng::{derive_seed, tag};
    use pitplan::saa::{self, branch_and_bound_exact, run_saa, BnbLimits, SaaConfig, SaaMethod};
    use pitplan::scenario::{sample_lognormal, ScenarioSet};
    use pyo3::exceptions::PyValueError;
    use pyo3::prelude::*;
    use pyo3::types::PyDict;

    fn err(e: impl std::fmt::Display) -> PyErr {
        PyValueError::new_err(e.to_string())
    }

    fn parse(instance: &str) -> PyResult<Instance> {
        instance_from_json(instance).map_err(err)
    }

    fn scenarios(inst: &Instance, n: usize, shock_sigma: f64, seed: u64) -> PyResult<ScenarioSet> {
        sample_lognormal(inst, n, shock_sigma, derive_seed(seed, &[tag::SCENARIO])).map_err(err)
    }

    /// Seeded synthetic instance as JSON.
    #[pyfunction]
    #[pyo3(signature = (n_blocks, grid, n_periods, n_modes=2, seed=0))]
    fn generate_synthetic(n_blocks: usize, grid: (usize, usize, usize), n_periods: usize, n_modes: usize, seed: u64) -> PyResult<String> {
        Ok(instance_to_json(&generate(n_blocks, grid, n_periods, n_modes, seed).map_err(err)?))
    }

    /// Lognormal grade scenarios, one list of block grades per scenario.
    #[pyfunction]
    #[pyo3(signature = (instance, n_scenarios, shock_sigma=0.2, seed=0))]
    fn sample_scenarios(instance: &str, n_scenarios: usize, shock_sigma: f64, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let inst = parse(instance)?;
        Ok(scenarios(&inst, n_scenarios, shock_sigma, seed)?.grades)
    }

    /// Expected NPV of a schedule (`None` = unmined) and its feasibility.
    #[pyfunction]
    #[pyo3(signature = (instance, schedule, n_scenarios=20, shock_sigma=0.2, seed=0))]
    fn evaluate(instance: &str, schedule: Vec<Option<usize>>, n_scenarios: usize, shock_sigma: f64, seed: u64) -> PyResult<(f64, bool)> {
        let inst = parse(instance)?;
        let set = scenarios(&inst, n_scenarios, shock_sigma, seed)?;
        let sched = Schedule { assignment: schedule };
        sched.check_shape(&inst).map_err(err)?;
        let ev = Evaluator::new(&inst, &set, None).map_err(err)?;
        Ok((ev.npv(&sched).map_err(err)?, check_feasible(&inst, &sched).feasible))
    }

    /// Runs `hybrid`, `dw` or `exact` and returns method, npv, feasible and schedule.
    #[pyfunction]
    #[pyo3(signature = (instance, method="hybrid", n_scenarios=20, shock_sigma=0.2, seed=0, max_iters=None))]
    fn optimize<'py>(
        py: Python<'py>,
        instance: &str,
        method: &str,
        n_scenarios: usize,
        shock_sigma: f64,
        seed: u64,
        max_iters: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let inst = parse(instance)?;
        let set = scenarios(&inst, n_scenarios, shock_sigma, seed)?;
        let (schedule, npv) = match method {
            "hybrid" => {
                let mut cfg = HybridConfig { seed, ..Default::default() };
                if let Some(n) = max_iters {
                    cfg.max_iters = n;
                }
                let r = hybrid_optimize(&inst, &set, None, &cfg, None).map_err(err)?;
                (r.schedule, r.npv)
            }
            "dw" => {
                let mut cfg = DwConfig { seed, shock_sigma, ..Default::default() };
                if let Some(n) = max_iters {
                    cfg.max_iters = n;
                }
                let r = run_dw(&inst, &set, None, &cfg, None, None).map_err(err)?;
                (r.schedule, r.npv)
            }
            "exact" => {
                let r = branch_and_bound_exact(&inst, &set, None, &BnbLimits::default()).map_err(err)?;
                (r.schedule, r.objective)
            }
            other => return Err(PyValueError::new_err(format!("unknown method {other}"))),
        };
        let out = PyDict::new(py);
        out.set_item("method", method)?;
        out.set_item("npv", npv)?;
        out.set_item("feasible", check_feasible(&inst, &schedule).feasible)?;
        out.set_item("schedule_hash", schedule.hash())?;
        out.set_item("schedule", schedule.assignment)?;
        Ok(out)
    }

    /// Sample-average-approximation experiment; `method` is `exact`, `hybrid` or `dw`.
    #[pyfunction]
    #[pyo3(signature = (instance, s_in, s_out, replications, method="exact", shock_sigma=0.2, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn saa_bias<'py>(
        py: Python<'py>,
        instance: &str,
        s_in: usize,
        s_out: usize,
        replications: usize,
        method: &str,
        shock_sigma: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let inst = parse(instance)?;
        let method = match method {
            "exact" => SaaMethod::exact(),
            "hybrid" => SaaMethod::Hybrid(HybridConfig::default()),
            "dw" => SaaMethod::Dw(DwConfig::default()),
            other => return Err(PyValueError::new_err(format!("unknown method {other}"))),
        };
        let cfg = SaaConfig { s_in, s_out, replications, method, shock_sigma, seed, force_same_out: false, risk_adjusted: false };
        let res = run_saa(&inst, &cfg).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("bias", res.per_replication.iter().map(|r| r.bias).collect::<Vec<_>>())?;
        if let Some(a) = res.aggregate {
            out.set_item("bias_mean", a.bias_mean)?;
            out.set_item("bias_ci_half_width", a.bias_ci_half_width)?;
            out.set_item("npv_out_mean", a.npv_out_mean)?;
        }
        Ok(out)
    }

    /// p10, p50, p90, cvar10, mean and sd of a sample.
    #[pyfunction]
    fn risk_metrics<'py>(py: Python<'py>, samples: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let m = saa::risk_metrics(&samples).map_err(err)?;
        let out = PyDict::new(py);
        for (k, v) in [("p10", m.p10), ("p50", m.p50), ("p90", m.p90), ("cvar10", m.cvar10), ("mean", m.mean), ("sd", m.sd)] {
            out.set_item(k, v)?;
        }
        Ok(out)
    }

    /// Constraint tolerance at iteration `t`; `kind` is `linear` or `cosine`.
    #[pyfunction]
    #[pyo3(signature = (t, t_max, eps0, kind="linear"))]
    fn epsilon(t: f64, t_max: f64, eps0: f64, kind: &str) -> PyResult<f64> {
        let kind: EpsilonKind = kind.parse().map_err(err)?;
        epsilon_schedule(t, t_max, eps0, kind).map_err(err)
    }
}
