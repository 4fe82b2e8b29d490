//! The two-mediator simulation design, its counterfactual truth and the
//! Monte-Carlo harness that tabulates bias, standard error and coverage.
//!
//! RNG contract: every stream is a `ChaCha8Rng` seeded with `seed_from_u64` and
//! then switched to a substream with `set_stream`. Replication `r` of a study with
//! master seed `s` draws its data from `(s, stream r)`; imputation `j` inside that
//! replication uses `(mi_seed(s, r), stream j)`. Results never depend on the
//! thread count because every task owns its stream and outputs are reduced in
//! index order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_method, Method};
use crate::data::{fmt_f64, Dataset, Descriptor, ObservedRecord, TreatmentProfile};
use crate::error::{PseError, Result};
use crate::estimator::Estimand;
use crate::pipeline::PipelineConfig;
use crate::stats::{expit, mean, normal_cdf, sample_sd};

/// `A ~ Bern(expit(intercept + x1 X1 + x2 X2 + x3 X3))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentCoef {
    pub intercept: f64,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
}

/// `M1 = intercept + a A + sin_x1 sin X1 + x1_sq X1² + x2 X2 + x3 X3 + ε3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mediator1Coef {
    pub intercept: f64,
    pub a: f64,
    pub sin_x1: f64,
    pub x1_sq: f64,
    pub x2: f64,
    pub x3: f64,
}

/// `M2 = intercept + a A + x1 X1 + x2_sq X2² + x3 X3 + a_m1 A M1 + ε4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mediator2Coef {
    pub intercept: f64,
    pub a: f64,
    pub x1: f64,
    pub x2_sq: f64,
    pub x3: f64,
    pub a_m1: f64,
}

/// `Y = intercept + a A + m1 M1 + m2 M2 + x1 X1 + x1_sq X1² + sin_x2 sin X2
///      + x2_sq X2² + x3 X3 + a_m1 A M1 + a_m2 A M2 + ε5`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCoef {
    pub intercept: f64,
    pub a: f64,
    pub m1: f64,
    pub m2: f64,
    pub x1: f64,
    pub x1_sq: f64,
    pub sin_x2: f64,
    pub x2_sq: f64,
    pub x3: f64,
    pub a_m1: f64,
    pub a_m2: f64,
}

/// `R ~ Bern(expit(intercept + x1 X1 + x2 X2 + x3 X3 + a_e3 A ε3 + a_e4 A ε4 + e5 ε5))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCoef {
    pub intercept: f64,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub a_e3: f64,
    pub a_e4: f64,
    pub e5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    /// `X1 = Φ(α ε1 + √(1-α²) ε2)` and `Z = Φ(ε1)`.
    pub alpha: f64,
    pub treatment: TreatmentCoef,
    pub mediator1: Mediator1Coef,
    pub mediator2: Mediator2Coef,
    pub outcome: OutcomeCoef,
    pub response: ResponseCoef,
    pub n: usize,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            alpha: 0.6,
            treatment: TreatmentCoef { intercept: -0.1, x1: 1.0, x2: -1.0, x3: 0.2 },
            mediator1: Mediator1Coef { intercept: -1.0, a: 0.5, sin_x1: -2.0, x1_sq: 3.0, x2: -2.0, x3: 1.0 },
            mediator2: Mediator2Coef { intercept: 1.0, a: -0.5, x1: 1.0, x2_sq: 1.0, x3: -1.0, a_m1: -0.5 },
            outcome: OutcomeCoef {
                intercept: -1.0,
                a: 0.5,
                m1: -1.5,
                m2: 1.5,
                x1: 3.0,
                x1_sq: 3.0,
                sin_x2: -3.0,
                x2_sq: 1.0,
                x3: -1.0,
                a_m1: 0.5,
                a_m2: 0.5,
            },
            response: ResponseCoef { intercept: 0.1, x1: -2.0, x2: 1.5, x3: 1.0, a_e3: 0.5, a_e4: -0.5, e5: -0.1 },
            n: 1000,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn check(&self) -> Result<()> {
        // α = 1 makes X1 = Z exactly, which is allowed as a boundary case
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(PseError::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.n == 0 {
            return Err(PseError::Config("n must be at least 1".into()));
        }
        Ok(())
    }

    /// Every coefficient through which the treatment acts set to zero.
    pub fn null_effects(mut self) -> Self {
        self.mediator1.a = 0.0;
        self.mediator2.a = 0.0;
        self.mediator2.a_m1 = 0.0;
        self.outcome.a = 0.0;
        self.outcome.a_m1 = 0.0;
        self.outcome.a_m2 = 0.0;
        self
    }

    fn m1(&self, a: f64, x1: f64, x2: f64, x3: f64, e3: f64) -> f64 {
        let c = &self.mediator1;
        c.intercept + c.a * a + c.sin_x1 * x1.sin() + c.x1_sq * x1 * x1 + c.x2 * x2 + c.x3 * x3 + e3
    }

    fn m2(&self, a: f64, m1: f64, x1: f64, x2: f64, x3: f64, e4: f64) -> f64 {
        let c = &self.mediator2;
        c.intercept + c.a * a + c.x1 * x1 + c.x2_sq * x2 * x2 + c.x3 * x3 + c.a_m1 * a * m1 + e4
    }

    #[allow(clippy::too_many_arguments)]
    fn y(&self, a: f64, m1: f64, m2: f64, x1: f64, x2: f64, x3: f64, e5: f64) -> f64 {
        let c = &self.outcome;
        c.intercept
            + c.a * a
            + c.m1 * m1
            + c.m2 * m2
            + c.x1 * x1
            + c.x1_sq * x1 * x1
            + c.sin_x2 * x2.sin()
            + c.x2_sq * x2 * x2
            + c.x3 * x3
            + c.a_m1 * a * m1
            + c.a_m2 * a * m2
            + e5
    }
}

/// Baseline draws for one unit; everything downstream is a function of these.
#[derive(Debug, Clone, Copy)]
struct Unit {
    e: [f64; 5],
    x1: f64,
    z: f64,
    x2: f64,
    x3: f64,
    u_a: f64,
    u_r: f64,
}

fn draw_unit<R: Rng>(rng: &mut R, alpha: f64) -> Unit {
    let mut e = [0.0; 5];
    for v in &mut e {
        *v = rng.sample(StandardNormal);
    }
    let x2: f64 = rng.random();
    let x3 = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
    let u_a = rng.random();
    let u_r = rng.random();
    Unit {
        x1: normal_cdf(alpha * e[0] + (1.0 - alpha * alpha).sqrt() * e[1]),
        z: normal_cdf(e[0]),
        e,
        x2,
        x3,
        u_a,
        u_r,
    }
}

/// Column layout of the simulated data: shadow `z`, missing `x1`, observed
/// `x2, x3`, mediators `m1`, `m2`.
pub fn dgp_descriptor() -> Descriptor {
    Descriptor {
        k: 2,
        z: vec!["z".into()],
        x_miss: vec!["x1".into()],
        x_obs: vec!["x2".into(), "x3".into()],
        mediators: vec![vec!["m1".into()], vec!["m2".into()]],
        y: "y".into(),
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `config.n` units from `(config.seed, stream)`. Returns the full data
/// (every `r = 1`, true `x1` present) and the observed data (`x1` masked where
/// the response indicator is 0).
pub fn generate_stream(config: &DgpConfig, stream: u64) -> Result<(Dataset, Dataset)> {
    config.check()?;
    let mut rng = stream_rng(config.seed, stream);
    let mut full = Vec::with_capacity(config.n);
    let mut observed = Vec::with_capacity(config.n);
    let tc = &config.treatment;
    let rc = &config.response;
    for _ in 0..config.n {
        let u = draw_unit(&mut rng, config.alpha);
        let a = if u.u_a < expit(tc.intercept + tc.x1 * u.x1 + tc.x2 * u.x2 + tc.x3 * u.x3) { 1u8 } else { 0 };
        let af = f64::from(a);
        let m1 = config.m1(af, u.x1, u.x2, u.x3, u.e[2]);
        let m2 = config.m2(af, m1, u.x1, u.x2, u.x3, u.e[3]);
        let y = config.y(af, m1, m2, u.x1, u.x2, u.x3, u.e[4]);
        let eta = rc.intercept
            + rc.x1 * u.x1
            + rc.x2 * u.x2
            + rc.x3 * u.x3
            + rc.a_e3 * af * u.e[2]
            + rc.a_e4 * af * u.e[3]
            + rc.e5 * u.e[4];
        let r = if u.u_r < expit(eta) { 1u8 } else { 0 };
        let rec = ObservedRecord {
            r: 1,
            z: vec![u.z],
            x_miss: Some(vec![u.x1]),
            x_obs: vec![u.x2, u.x3],
            a,
            m: vec![vec![m1], vec![m2]],
            y,
        };
        observed.push(ObservedRecord { r, x_miss: if r == 1 { rec.x_miss.clone() } else { None }, ..rec.clone() });
        full.push(rec);
    }
    Ok((Dataset::new(full, dgp_descriptor())?, Dataset::new(observed, dgp_descriptor())?))
}

pub fn generate(config: &DgpConfig) -> Result<(Dataset, Dataset)> {
    generate_stream(config, 0)
}

const SIN_ONE_MEAN: f64 = 0.459_697_694_131_860_3; // E sin U = 1 - cos 1 for U ~ U(0,1)

/// `ψ(ā)` in closed form. `X1` and `X2` are marginally uniform and independent
/// of `X3 ~ Bern(1/2)`, and the structural equations are linear in the
/// mediators, so every counterfactual mean reduces to moments of `U(0,1)`.
pub fn closed_form_psi(config: &DgpConfig, profile: &TreatmentProfile) -> Result<f64> {
    if profile.k() != 2 {
        return Err(PseError::Config(format!("the simulation design has K = 2, got profile {profile}")));
    }
    let (a1, a2, a3) = (f64::from(profile.level(1)), f64::from(profile.level(2)), f64::from(profile.level(3)));
    let (eu, eu2, esin, ex3) = (0.5, 1.0 / 3.0, SIN_ONE_MEAN, 0.5);
    let c1 = &config.mediator1;
    let em1 = c1.intercept + c1.a * a1 + c1.sin_x1 * esin + c1.x1_sq * eu2 + c1.x2 * eu + c1.x3 * ex3;
    let c2 = &config.mediator2;
    let em2 = c2.intercept + c2.a * a2 + c2.x1 * eu + c2.x2_sq * eu2 + c2.x3 * ex3 + c2.a_m1 * a2 * em1;
    let c = &config.outcome;
    Ok(c.intercept
        + c.a * a3
        + (c.m1 + c.a_m1 * a3) * em1
        + (c.m2 + c.a_m2 * a3) * em2
        + c.x1 * eu
        + c.x1_sq * eu2
        + c.sin_x2 * esin
        + c.x2_sq * eu2
        + c.x3 * ex3)
}

pub fn closed_form_estimand(config: &DgpConfig, estimand: &Estimand) -> Result<f64> {
    let (a, b) = estimand.profiles(2)?;
    let pa = closed_form_psi(config, &a)?;
    match b {
        None => Ok(pa),
        Some(b) => Ok(pa - closed_form_psi(config, &b)?),
    }
}

/// Monte-Carlo counterfactual means with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    pub big_n: usize,
    pub seed: u64,
    /// `ψ(ā)` and its MCSE, keyed by profile display form.
    pub psi: BTreeMap<String, (f64, f64)>,
    /// NDE, NIE1, NIE2, TE, PSE_M2 with MCSEs.
    pub contrasts: BTreeMap<String, (f64, f64)>,
    /// TE simulated directly as the mean of `Y(1) - Y(0)`.
    pub te_direct: (f64, f64),
}

const PROFILES_K2: [[u8; 3]; 8] =
    [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]];

fn profile_index(p: &TreatmentProfile) -> usize {
    let l = p.levels();
    usize::from(l[0]) * 4 + usize::from(l[1]) * 2 + usize::from(l[2])
}

/// Simulates the nested potential outcomes on `big_n` units with common random
/// numbers across the eight profiles. Blocks of units are drawn from separate
/// substreams and summed in block order.
pub fn true_effects(config: &DgpConfig, big_n: usize, seed: u64) -> Result<TruthTable> {
    config.check()?;
    if big_n < 2 {
        return Err(PseError::Config("truth simulation needs at least 2 draws".into()));
    }
    const BLOCK: usize = 65_536;
    let blocks = big_n.div_ceil(BLOCK);
    // sums of the 8 values, their cross products, and the direct TE draw
    let partial: Vec<([f64; 8], [[f64; 8]; 8], [f64; 2])> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let mut s = [0.0; 8];
            let mut ss = [[0.0; 8]; 8];
            let mut te = [0.0; 2];
            let len = BLOCK.min(big_n - b * BLOCK);
            let mut v = [0.0; 8];
            for _ in 0..len {
                let u = draw_unit(&mut rng, config.alpha);
                for (idx, p) in PROFILES_K2.iter().enumerate() {
                    let (a1, a2, a3) = (f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
                    let m1 = config.m1(a1, u.x1, u.x2, u.x3, u.e[2]);
                    // M2 uses a2 with M1(a1) substituted
                    let m2 = config.m2(a2, m1, u.x1, u.x2, u.x3, u.e[3]);
                    v[idx] = config.y(a3, m1, m2, u.x1, u.x2, u.x3, u.e[4]);
                }
                let y_te = |a: f64| {
                    let m1 = config.m1(a, u.x1, u.x2, u.x3, u.e[2]);
                    let m2 = config.m2(a, m1, u.x1, u.x2, u.x3, u.e[3]);
                    config.y(a, m1, m2, u.x1, u.x2, u.x3, u.e[4])
                };
                let d = y_te(1.0) - y_te(0.0);
                te[0] += d;
                te[1] += d * d;
                for i in 0..8 {
                    s[i] += v[i];
                    for j in 0..8 {
                        ss[i][j] += v[i] * v[j];
                    }
                }
            }
            (s, ss, te)
        })
        .collect();
    let mut s = [0.0; 8];
    let mut ss = [[0.0; 8]; 8];
    let mut te = [0.0; 2];
    for (ps, pss, pte) in &partial {
        for i in 0..8 {
            s[i] += ps[i];
            for j in 0..8 {
                ss[i][j] += pss[i][j];
            }
        }
        te[0] += pte[0];
        te[1] += pte[1];
    }
    let nf = big_n as f64;
    let mean_se = |w: &[f64; 8]| -> (f64, f64) {
        let m: f64 = (0..8).map(|i| w[i] * s[i]).sum::<f64>() / nf;
        let second: f64 = (0..8).flat_map(|i| (0..8).map(move |j| (i, j))).map(|(i, j)| w[i] * w[j] * ss[i][j]).sum::<f64>() / nf;
        let var = (second - m * m).max(0.0) * nf / (nf - 1.0);
        (m, (var / nf).sqrt())
    };
    let mut psi = BTreeMap::new();
    for (idx, p) in PROFILES_K2.iter().enumerate() {
        let mut w = [0.0; 8];
        w[idx] = 1.0;
        psi.insert(TreatmentProfile::new(p.to_vec(), 2)?.to_string(), mean_se(&w));
    }
    let mut contrasts = BTreeMap::new();
    for est in [Estimand::Nde, Estimand::Nie(1), Estimand::Nie(2), Estimand::Te, Estimand::PathThrough(2)] {
        let (a, b) = est.profiles(2)?;
        let mut w = [0.0; 8];
        w[profile_index(&a)] += 1.0;
        if let Some(b) = b {
            w[profile_index(&b)] -= 1.0;
        }
        contrasts.insert(est.to_string(), mean_se(&w));
    }
    let te_mean = te[0] / nf;
    let te_var = (te[1] / nf - te_mean * te_mean).max(0.0) * nf / (nf - 1.0);
    Ok(TruthTable { big_n, seed, psi, contrasts, te_direct: (te_mean, (te_var / nf).sqrt()) })
}

/// Fraction of records with `r = 0`.
pub fn missing_rate(dataset: &Dataset) -> f64 {
    dataset.records.iter().filter(|r| r.r == 0).count() as f64 / dataset.n() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub dgp: DgpConfig,
    pub reps: usize,
    pub methods: Vec<Method>,
    pub estimands: Vec<Estimand>,
    pub master_seed: u64,
    pub pipeline: PipelineConfig,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            dgp: DgpConfig::default(),
            reps: 100,
            methods: vec![Method::Sri, Method::Oracle, Method::Cca, Method::Mi { m: crate::baselines::DEFAULT_MI_M }],
            estimands: Estimand::decomposition(2),
            master_seed: 2024,
            pipeline: PipelineConfig::default(),
        }
    }
}

/// One method on one replication: `(estimate, se, ci_lo, ci_hi)` per estimand,
/// or the error that stopped it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub method: Method,
    pub outcome: std::result::Result<Vec<[f64; 4]>, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandSummary {
    pub estimand: String,
    pub truth: f64,
    pub bias: f64,
    /// Standard deviation of the estimates across replications.
    pub se: f64,
    /// Mean of the estimated standard errors.
    pub mean_se_hat: f64,
    pub cp: f64,
    pub mcse_bias: f64,
    pub mcse_cp: f64,
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub label: String,
    pub failures: usize,
    /// Up to five distinct failure messages.
    pub failure_messages: Vec<String>,
    pub estimands: Vec<EstimandSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub n: usize,
    pub reps: usize,
    pub master_seed: u64,
    pub methods: Vec<MethodSummary>,
    #[serde(skip)]
    pub records: Vec<RepRecord>,
    pub flags: Vec<String>,
}

impl McResult {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// Summary table: one row per method and metric, one column per estimand.
    pub fn write_table_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let Some(first) = self.methods.first() else {
            return Ok(());
        };
        let mut header = vec!["method".to_string(), "n".to_string(), "metric".to_string()];
        header.extend(first.estimands.iter().map(|e| e.estimand.clone()));
        out.write_record(&header)?;
        for m in &self.methods {
            for (metric, pick) in [
                ("bias", (|e: &EstimandSummary| e.bias) as fn(&EstimandSummary) -> f64),
                ("SE", |e| e.se),
                ("CP", |e| e.cp),
            ] {
                let mut row = vec![m.label.clone(), self.n.to_string(), metric.to_string()];
                row.extend(m.estimands.iter().map(|e| fmt_f64(pick(e))));
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Per-replication estimates, for plotting.
    pub fn write_estimates_csv<W: Write>(&self, w: W, estimands: &[Estimand]) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["rep", "method", "estimand", "estimate", "se", "ci_lo", "ci_hi"])?;
        for rec in &self.records {
            if let Ok(rows) = &rec.outcome {
                for (e, v) in estimands.iter().zip(rows) {
                    out.write_record([
                        rec.rep.to_string(),
                        rec.method.label().to_string(),
                        e.to_string(),
                        fmt_f64(v[0]),
                        fmt_f64(v[1]),
                        fmt_f64(v[2]),
                        fmt_f64(v[3]),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_files(&self, dir: &Path, estimands: &[Estimand]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_table_csv(std::fs::File::create(dir.join("mc_table.csv"))?)?;
        self.write_estimates_csv(std::fs::File::create(dir.join("mc_estimates.csv"))?, estimands)?;
        let f = std::fs::File::create(dir.join("mc_result.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)?;
        Ok(())
    }
}

const MI_SALT: u64 = 0x6d69_5f73_6565_6473;

/// Seed of the imputation streams of replication `rep`.
pub fn mi_seed(master_seed: u64, rep: usize) -> u64 {
    stream_rng(master_seed ^ MI_SALT, rep as u64).next_u64()
}

pub fn run_replication(cfg: &McConfig, rep: usize) -> Vec<RepRecord> {
    let dgp = DgpConfig { seed: cfg.master_seed, ..cfg.dgp.clone() };
    let data = generate_stream(&dgp, rep as u64);
    cfg.methods
        .iter()
        .map(|&method| {
            let outcome = match &data {
                Err(e) => Err(e.to_string()),
                Ok((full, observed)) => {
                    run_method(method, observed, Some(full), &cfg.pipeline, &cfg.estimands, mi_seed(cfg.master_seed, rep))
                        .map(|an| {
                            an.estimands
                                .iter()
                                .map(|e| [e.report.psi_hat, e.report.se(), e.report.ci_lo, e.report.ci_hi])
                                .collect()
                        })
                        .map_err(|e| e.to_string())
                }
            };
            RepRecord { rep, method, outcome }
        })
        .collect()
}

pub fn run_monte_carlo(cfg: &McConfig) -> Result<McResult> {
    if cfg.reps == 0 {
        return Err(PseError::Config("reps must be at least 1".into()));
    }
    cfg.dgp.check()?;
    cfg.pipeline.check()?;
    for m in &cfg.methods {
        m.check()?;
    }
    let truth = cfg
        .estimands
        .iter()
        .map(|e| closed_form_estimand(&cfg.dgp, e))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<RepRecord> = (0..cfg.reps).into_par_iter().flat_map_iter(|rep| run_replication(cfg, rep)).collect();
    let mut flags = Vec::new();
    if cfg.reps == 1 {
        flags.push("single replication: empirical SE reported as 0".to_string());
    }
    let methods = cfg
        .methods
        .iter()
        .map(|&method| {
            let mine: Vec<&RepRecord> = records.iter().filter(|r| r.method == method).collect();
            let ok: Vec<&Vec<[f64; 4]>> = mine.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let mut failure_messages: Vec<String> = Vec::new();
            for r in &mine {
                if let Err(msg) = &r.outcome {
                    if failure_messages.len() < 5 && !failure_messages.contains(msg) {
                        failure_messages.push(msg.clone());
                    }
                }
            }
            let estimands = cfg
                .estimands
                .iter()
                .enumerate()
                .map(|(j, e)| summarize(e.to_string(), truth[j], ok.iter().map(|v| v[j])))
                .collect();
            MethodSummary {
                method,
                label: method.label().to_string(),
                failures: mine.len() - ok.len(),
                failure_messages,
                estimands,
            }
        })
        .collect();
    Ok(McResult { n: cfg.dgp.n, reps: cfg.reps, master_seed: cfg.master_seed, methods, records, flags })
}

fn summarize(estimand: String, truth: f64, rows: impl Iterator<Item = [f64; 4]>) -> EstimandSummary {
    let rows: Vec<[f64; 4]> = rows.collect();
    let est: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let covered: Vec<f64> = rows.iter().map(|r| f64::from(u8::from(r[2] <= truth && truth <= r[3]))).collect();
    let n_ok = rows.len();
    if n_ok == 0 {
        return EstimandSummary {
            estimand,
            truth,
            bias: f64::NAN,
            se: f64::NAN,
            mean_se_hat: f64::NAN,
            cp: f64::NAN,
            mcse_bias: f64::NAN,
            mcse_cp: f64::NAN,
            n_ok,
        };
    }
    let se = sample_sd(&est);
    let cp = mean(&covered);
    EstimandSummary {
        estimand,
        truth,
        bias: mean(&est) - truth,
        se,
        mean_se_hat: mean(&rows.iter().map(|r| r[1]).collect::<Vec<_>>()),
        cp,
        mcse_bias: se / (n_ok as f64).sqrt(),
        mcse_cp: (cp * (1.0 - cp) / n_ok as f64).sqrt(),
        n_ok,
    }
}
