//! Run configuration: JSON file values, then command-line overrides.

use std::path::{Path, PathBuf};

use pse_core::baselines::DEFAULT_MI_M;
use pse_core::{DgpConfig, Estimand, Method, PipelineConfig, PseError, Result, TreatmentProfile};
use serde::{Deserialize, Serialize};

pub const DEFAULT_TRUTH_N: usize = 1_000_000;

/// Everything a run depends on. Every field has a default, so a config file
/// only needs the keys it changes. The `run_manifest.json` written by each
/// command has this same shape and can be passed back through `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Set on manifests; ignored on input.
    pub command: Option<String>,
    pub data: Option<PathBuf>,
    pub descriptor: Option<PathBuf>,
    /// Estimation method for `estimate`.
    pub method: Method,
    /// Methods compared by `simulate`.
    pub methods: Vec<Method>,
    pub mi_m: usize,
    /// Named estimands (`nde`, `nie_k`, `te`, `pse_mk`, `psi(…)`).
    pub estimands: Vec<String>,
    pub profile_a: Option<String>,
    pub profile_b: Option<String>,
    pub seed: u64,
    pub reps: usize,
    /// Sample size of each simulated dataset.
    pub n: usize,
    /// Monte-Carlo draws for `truth`; 0 reports the closed form only.
    pub truth_n: usize,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub pipeline: PipelineConfig,
    pub dgp: DgpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: None,
            data: None,
            descriptor: None,
            method: Method::Sri,
            methods: vec![Method::Sri, Method::Oracle, Method::Cca, Method::Mi { m: DEFAULT_MI_M }],
            mi_m: DEFAULT_MI_M,
            estimands: Vec::new(),
            profile_a: None,
            profile_b: None,
            seed: 2024,
            reps: 100,
            n: 1000,
            truth_n: DEFAULT_TRUTH_N,
            threads: None,
            out: PathBuf::from("pse-out"),
            pipeline: PipelineConfig::default(),
            dgp: DgpConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PseError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PseError::Config(format!("config file {}: {e}", path.display())))
    }

    pub fn check(&self) -> Result<()> {
        self.pipeline.check()?;
        if self.mi_m < 2 {
            return Err(PseError::Config(format!("mi_m must be at least 2, got {}", self.mi_m)));
        }
        if self.threads == Some(0) {
            return Err(PseError::Config("threads must be at least 1".into()));
        }
        if self.profile_b.is_some() && self.profile_a.is_none() {
            return Err(PseError::Config("profile_b needs profile_a".into()));
        }
        Ok(())
    }

    /// `method` with the configured number of imputations applied.
    pub fn resolved_method(&self) -> Method {
        with_mi_m(self.method, self.mi_m)
    }

    pub fn resolved_methods(&self) -> Vec<Method> {
        self.methods.iter().map(|&m| with_mi_m(m, self.mi_m)).collect()
    }

    /// Named estimands plus the explicit profile pair; the full decomposition
    /// when neither is given.
    pub fn resolved_estimands(&self, k: usize) -> Result<Vec<Estimand>> {
        let mut out = Vec::new();
        for s in &self.estimands {
            for part in split_list(s) {
                out.push(Estimand::parse(&part, k)?);
            }
        }
        if let Some(a) = &self.profile_a {
            let a = TreatmentProfile::parse(a, k)?;
            out.push(match &self.profile_b {
                Some(b) => Estimand::Contrast(a, TreatmentProfile::parse(b, k)?),
                None => Estimand::Psi(a),
            });
        }
        if out.is_empty() {
            out = Estimand::decomposition(k);
        }
        Ok(out)
    }
}

fn with_mi_m(method: Method, m: usize) -> Method {
    match method {
        Method::Mi { .. } => Method::Mi { m },
        other => other,
    }
}

/// Splits on commas that are not inside parentheses, so `nde,psi(1,0,1)`
/// yields two items.
pub fn split_list(s: &str) -> Vec<String> {
    let mut parts = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                parts.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    parts.push(cur);
    parts.into_iter().map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}
