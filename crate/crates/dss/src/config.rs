//! Run configuration, its resolution into a full snapshot, and what-if overrides.

use pitplan::colgen::DwConfig;
use pitplan::metaheuristic::{EpsilonKind, HybridConfig};
use serde::{Deserialize, Serialize};

use crate::error::{DssError, DssResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hybrid,
    Dw,
    Exact,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Hybrid => "hybrid",
            Method::Dw => "dw",
            Method::Exact => "exact",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = DssError;
    fn from_str(s: &str) -> DssResult<Self> {
        match s {
            "hybrid" => Ok(Method::Hybrid),
            "dw" => Ok(Method::Dw),
            "exact" => Ok(Method::Exact),
            other => Err(DssError::InvalidConfig(format!("unknown method {other}"))),
        }
    }
}

/// Turns a run into an SAA experiment with the run's method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaaSettings {
    pub s_in: usize,
    pub s_out: usize,
    pub replications: usize,
}

fn default_scenarios() -> usize {
    20
}
fn default_shock() -> f64 {
    0.2
}
fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub instance_id: String,
    pub method: Method,
    #[serde(default = "default_scenarios")]
    pub scenarios: usize,
    #[serde(default = "default_shock")]
    pub shock_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rl: bool,
    #[serde(default)]
    pub eps0: Option<f64>,
    #[serde(default)]
    pub schedule: Option<EpsilonKind>,
    #[serde(default = "one")]
    pub price_scale: f64,
    #[serde(default = "one")]
    pub capacity_scale: f64,
    /// Scale block economics by spatial uncertainty multipliers.
    #[serde(default)]
    pub risk_adjusted: bool,
    #[serde(default)]
    pub hybrid: Option<HybridConfig>,
    #[serde(default)]
    pub dw: Option<DwConfig>,
    #[serde(default)]
    pub node_limit: Option<u64>,
    #[serde(default)]
    pub saa: Option<SaaSettings>,
}

impl RunConfig {
    pub fn new(instance_id: impl Into<String>, method: Method) -> Self {
        Self {
            instance_id: instance_id.into(),
            method,
            scenarios: default_scenarios(),
            shock_sigma: default_shock(),
            seed: 0,
            rl: false,
            eps0: None,
            schedule: None,
            price_scale: 1.0,
            capacity_scale: 1.0,
            risk_adjusted: false,
            hybrid: None,
            dw: None,
            node_limit: None,
            saa: None,
        }
    }

    /// Fills optimizer sections with defaults and folds the shorthand fields in,
    /// so the stored snapshot is complete.
    pub fn resolve(mut self) -> DssResult<Self> {
        match self.method {
            Method::Hybrid => {
                let mut h = self.hybrid.take().unwrap_or_default();
                if let Some(e) = self.eps0 {
                    h.eps_max = e;
                }
                if let Some(k) = self.schedule {
                    h.eps_kind = k;
                }
                h.seed = self.seed;
                self.eps0 = Some(h.eps_max);
                self.schedule = Some(h.eps_kind);
                self.hybrid = Some(h);
                self.dw = None;
            }
            Method::Dw => {
                let mut d = self.dw.take().unwrap_or_default();
                d.seed = self.seed;
                d.shock_sigma = self.shock_sigma;
                self.dw = Some(d);
                self.hybrid = None;
            }
            Method::Exact => {
                self.hybrid = None;
                self.dw = None;
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> DssResult<()> {
        let bad = |m: &str| Err(DssError::InvalidConfig(m.into()));
        if self.scenarios == 0 {
            return bad("scenarios must be at least 1");
        }
        if !(self.shock_sigma.is_finite() && self.shock_sigma >= 0.0) {
            return bad("shock_sigma must be finite and non-negative");
        }
        if !(self.price_scale.is_finite() && self.price_scale > 0.0) {
            return bad("price_scale must be positive");
        }
        if !(self.capacity_scale.is_finite() && self.capacity_scale > 0.0) {
            return bad("capacity_scale must be positive");
        }
        if let Some(s) = &self.saa {
            if s.s_in == 0 || s.s_out == 0 || s.replications == 0 {
                return bad("saa sizes must be at least 1");
            }
        }
        if let Some(h) = &self.hybrid {
            h.validate().map_err(|e| DssError::InvalidConfig(e.to_string()))?;
        }
        if let Some(d) = &self.dw {
            d.validate().map_err(|e| DssError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let base = self.method.name();
        if self.rl {
            format!("{base}_rl")
        } else {
            base.to_string()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub price_scale: Option<f64>,
    pub capacity_scale: Option<f64>,
    pub n_scenarios: Option<usize>,
    pub eps0: Option<f64>,
    pub schedule: Option<EpsilonKind>,
}

impl Overrides {
    pub fn validate(&self) -> DssResult<()> {
        let bad = |m: &str| Err(DssError::InvalidOverride(m.into()));
        if self.price_scale.is_some_and(|p| !(p.is_finite() && p > 0.0)) {
            return bad("price_scale must be positive");
        }
        if self.capacity_scale.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return bad("capacity_scale must be positive");
        }
        if self.n_scenarios.is_some_and(|n| !(1..=1000).contains(&n)) {
            return bad("n_scenarios must lie in [1, 1000]");
        }
        if self.eps0.is_some_and(|e| !(e.is_finite() && e >= 0.0)) {
            return bad("eps0 must be finite and non-negative");
        }
        Ok(())
    }

    /// The parent's resolved config with overrides replacing its fields.
    pub fn apply(&self, parent: &RunConfig) -> DssResult<RunConfig> {
        self.validate()?;
        let mut c = parent.clone();
        if let Some(p) = self.price_scale {
            c.price_scale = p;
        }
        if let Some(k) = self.capacity_scale {
            c.capacity_scale = k;
        }
        if let Some(n) = self.n_scenarios {
            c.scenarios = n;
        }
        if self.eps0.is_some() || self.schedule.is_some() {
            if c.method != Method::Hybrid {
                return Err(DssError::InvalidOverride("eps0 and schedule apply to hybrid runs only".into()));
            }
            let h = c.hybrid.as_mut().expect("resolved hybrid config");
            if let Some(e) = self.eps0 {
                h.eps_max = e;
                c.eps0 = Some(e);
            }
            if let Some(k) = self.schedule {
                h.eps_kind = k;
                c.schedule = Some(k);
            }
        }
        c.validate().map_err(|e| DssError::InvalidOverride(e.to_string()))?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_folds_shorthand_into_hybrid() {
        let mut c = RunConfig::new("i", Method::Hybrid);
        c.eps0 = Some(3.0);
        c.schedule = Some(EpsilonKind::Cosine);
        c.seed = 9;
        let r = c.resolve().unwrap();
        let h = r.hybrid.unwrap();
        assert_eq!((h.eps_max, h.eps_kind, h.seed), (3.0, EpsilonKind::Cosine, 9));
    }

    #[test]
    fn resolve_is_idempotent() {
        let r = RunConfig::new("i", Method::Dw).resolve().unwrap();
        assert_eq!(r.clone().resolve().unwrap(), r);
    }

    #[test]
    fn empty_overrides_are_identity() {
        let r = RunConfig::new("i", Method::Hybrid).resolve().unwrap();
        assert_eq!(Overrides::default().apply(&r).unwrap(), r);
    }

    #[test]
    fn bad_overrides_are_rejected() {
        let r = RunConfig::new("i", Method::Dw).resolve().unwrap();
        let o = Overrides { capacity_scale: Some(0.0), ..Default::default() };
        assert!(matches!(o.apply(&r), Err(DssError::InvalidOverride(_))));
        let o = Overrides { eps0: Some(1.0), ..Default::default() };
        assert!(matches!(o.apply(&r), Err(DssError::InvalidOverride(_))));
        let o = Overrides { n_scenarios: Some(1001), ..Default::default() };
        assert!(o.validate().is_err());
    }

    #[test]
    fn config_round_trips_with_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"instance_id":"x","method":"exact"}"#).unwrap();
        assert_eq!(c, RunConfig::new("x", Method::Exact));
    }

    proptest::proptest! {
        #[test]
        fn overrides_are_absolute_and_json_stable(
            price in 0.1f64..3.0,
            cap in 0.1f64..3.0,
            n in 1usize..=1000,
            eps in 0.0f64..5.0,
            seed in 0u64..1000,
        ) {
            let mut parent = RunConfig::new("i", Method::Hybrid);
            parent.seed = seed;
            let parent = parent.resolve().unwrap();
            let o = Overrides { price_scale: Some(price), capacity_scale: Some(cap), n_scenarios: Some(n), eps0: Some(eps), schedule: None };
            let once = o.apply(&parent).unwrap();
            proptest::prop_assert_eq!(once.price_scale, price);
            proptest::prop_assert_eq!(once.capacity_scale, cap);
            proptest::prop_assert_eq!(once.scenarios, n);
            proptest::prop_assert_eq!(once.hybrid.as_ref().unwrap().eps_max, eps);
            proptest::prop_assert_eq!(o.apply(&once).unwrap(), once.clone());
            let back: RunConfig = serde_json::from_str(&serde_json::to_string(&once).unwrap()).unwrap();
            proptest::prop_assert_eq!(back, once);
        }
    }
}
