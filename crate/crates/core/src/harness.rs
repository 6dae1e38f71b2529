//! Episode runner, metrics, Monte Carlo studies and trace output.

use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{Controller, ControllerConfig, ControllerKind};
use crate::error::{Error, Result};
use crate::forecasting::Forecaster;
use crate::market::{generate_path, AgentMarket, AgentParams, ReturnExpectation, ScenarioConfig, ScenarioKind};
use crate::state::{step_state, MarketObservation, SystemState};

/// Everything needed to replay one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub scenario: ScenarioConfig,
    pub agents: AgentParams,
    pub controller: ControllerConfig,
    /// Starting collateralization `Γ₀`; supply starts at `D₀` and `α₀` at the peg.
    pub initial_collateral_ratio: f64,
}

impl EpisodeConfig {
    /// Scenario preset with its agent defaults and the given controller.
    pub fn new(kind: ScenarioKind, controller: ControllerKind) -> Self {
        Self {
            scenario: ScenarioConfig::preset(kind),
            agents: AgentParams::for_scenario(kind),
            controller: ControllerConfig::new(controller),
            initial_collateral_ratio: 2.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.agents.validate()?;
        self.controller.validate()?;
        if !(self.initial_collateral_ratio > 0.0) {
            return Err(Error::config("initial collateral ratio must be positive"));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> Result<SystemState> {
        let supply = self.scenario.initial_demand;
        let alpha = self.controller.protocol.peg;
        let collateral = self.initial_collateral_ratio * alpha * supply / self.scenario.initial_eth_price;
        SystemState::new(supply, collateral, alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub config: EpisodeConfig,
    pub seed: u64,
}

/// One step: the controller sets `α_t + δα_t`, agents trade against `D_t`,
/// and the market clears.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub demand: f64,
    /// Supply and collateral after the step's trades.
    pub supply: f64,
    pub collateral: f64,
    pub eth_price: f64,
    /// Post-trade price `D_t / S_{t+1}`.
    pub market_price: f64,
    /// Redemption price in force during the step.
    pub redemption_price: f64,
    pub delta_alpha: f64,
    pub delta_arb: f64,
    pub delta_spec: f64,
    pub delta_total: f64,
    /// `C·p_c / (α·S)` after the step.
    pub gamma: f64,
    pub clamped: bool,
    pub solver_iters: usize,
    pub solver_outer: usize,
    pub solver_eps: f64,
    pub solver_kkt: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub header: EpisodeHeader,
    pub records: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn market_prices(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.market_price).collect()
    }

    pub fn redemption_prices(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.redemption_price).collect()
    }
}

fn finite_state(t: usize, s: &SystemState) -> Result<()> {
    if s.supply.is_finite() && s.collateral.is_finite() && s.redemption_price.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite state at step {t}: {s:?}")))
    }
}

pub fn run_episode(config: &EpisodeConfig, seed: u64) -> Result<EpisodeTrace> {
    config.validate()?;
    let path = std::sync::Arc::new(generate_path(&config.scenario, seed)?);
    let forecaster = match config.controller.kind {
        ControllerKind::Stackelberg => Some(Forecaster::for_episode(config.controller.forecaster, &path)?),
        _ => None,
    };
    let mut controller = Controller::new(config.controller.clone(), forecaster)?;
    let mut state = config.initial_state()?;
    let mut market = AgentMarket::new(config.agents, state.supply)?;
    let steps = config.scenario.steps;
    let mut records = Vec::with_capacity(steps);
    for t in 0..steps {
        let demand = path.demand[t];
        let eth_price = path.eth_price[t];
        let observation = MarketObservation {
            stablecoin_price: demand / state.supply,
            collateral_price: eth_price,
            demand,
            realized_delta: records.last().map_or(0.0, |r: &StepRecord| r.delta_total),
        };
        controller.observe(&observation)?;
        let decision = controller.decide(&state, &observation)?;
        if !decision.delta_alpha.is_finite() {
            return Err(Error::Numerical(format!("non-finite decision at step {t}")));
        }
        let expected_return = match config.agents.return_expectation {
            ReturnExpectation::Regime => config.scenario.expected_eth_return(t),
            ReturnExpectation::Realized if t > 0 => eth_price / path.eth_price[t - 1],
            ReturnExpectation::Realized => 1.0,
        };
        let trade = market.step(&state, demand, eth_price, expected_return, decision.delta_alpha)?;
        let price = trade.observation.stablecoin_price;
        state = step_state(&state, decision.delta_alpha, trade.delta_total, price, eth_price)?;
        finite_state(t, &state)?;
        let diag = decision.diagnostics.as_ref();
        records.push(StepRecord {
            t,
            demand,
            supply: state.supply,
            collateral: state.collateral,
            eth_price,
            market_price: price,
            redemption_price: state.redemption_price,
            delta_alpha: decision.delta_alpha,
            delta_arb: trade.delta_arb,
            delta_spec: trade.delta_spec,
            delta_total: trade.delta_total,
            gamma: state.collateral * eth_price / (state.redemption_price * state.supply),
            clamped: trade.clamped,
            solver_iters: diag.map_or(0, |d| d.inner_iterations),
            solver_outer: diag.map_or(0, |d| d.outer_iterations),
            solver_eps: diag.map_or(0.0, |d| d.final_eps),
            solver_kkt: diag.map_or(0.0, |d| d.kkt_residual),
            fallback: diag.is_some_and(|d| d.fallback),
        });
    }
    Ok(EpisodeTrace {
        header: EpisodeHeader {
            config: config.clone(),
            seed,
        },
        records,
    })
}

/// Re-runs the episode recorded in `header`.
pub fn replay(header: &EpisodeHeader) -> Result<EpisodeTrace> {
    run_episode(&header.config, header.seed)
}

// ---- metrics ---------------------------------------------------------------

/// Mean of `|p_t − peg|`.
pub fn p_mad(prices: &[f64], peg: f64) -> Result<f64> {
    if prices.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok(prices.iter().map(|p| (p - peg).abs()).sum::<f64>() / prices.len() as f64)
}

/// Mean of `|p_t − α_t|`.
pub fn r_mad(prices: &[f64], redemption: &[f64]) -> Result<f64> {
    if prices.is_empty() {
        return Err(Error::EmptyTrace);
    }
    crate::error::check_len("redemption prices", prices.len(), redemption.len())?;
    Ok(prices.iter().zip(redemption).map(|(p, a)| (p - a).abs()).sum::<f64>() / prices.len() as f64)
}

pub const REPEG_BAND: f64 = 0.01;
pub const REPEG_PERSISTENCE: usize = 5;

/// First step `t ≥ from` with `|p − peg| ≤ band` for `persistence`
/// consecutive steps starting at `t`.
pub fn time_to_repeg(prices: &[f64], peg: f64, from: usize, band: f64, persistence: usize) -> Option<usize> {
    let inside: Vec<bool> = prices.iter().map(|p| (p - peg).abs() <= band).collect();
    (from..inside.len()).find(|&t| t + persistence <= inside.len() && inside[t..t + persistence].iter().all(|&b| b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryMetrics {
    pub min_gamma: f64,
    pub time_to_repeg: Option<usize>,
    pub solver_failures: usize,
}

pub fn auxiliary_metrics(trace: &EpisodeTrace, band: f64) -> Result<AuxiliaryMetrics> {
    if trace.records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let config = &trace.header.config;
    let from = config.scenario.last_shock_end().unwrap_or(0);
    Ok(AuxiliaryMetrics {
        min_gamma: trace.records.iter().map(|r| r.gamma).fold(f64::INFINITY, f64::min),
        time_to_repeg: time_to_repeg(&trace.market_prices(), config.controller.protocol.peg, from, band, REPEG_PERSISTENCE),
        solver_failures: trace.records.iter().filter(|r| r.fallback).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub p_mad: f64,
    pub r_mad: f64,
    pub min_gamma: f64,
    pub time_to_repeg: Option<usize>,
    pub solver_failures: usize,
}

pub fn run_metrics(trace: &EpisodeTrace) -> Result<RunMetrics> {
    let prices = trace.market_prices();
    let aux = auxiliary_metrics(trace, REPEG_BAND)?;
    Ok(RunMetrics {
        p_mad: p_mad(&prices, trace.header.config.controller.protocol.peg)?,
        r_mad: r_mad(&prices, &trace.redemption_prices())?,
        min_gamma: aux.min_gamma,
        time_to_repeg: aux.time_to_repeg,
        solver_failures: aux.solver_failures,
    })
}

// ---- output ----------------------------------------------------------------

pub const CSV_HEADER: [&str; 13] = [
    "t",
    "demand",
    "supply",
    "collateral",
    "eth_price",
    "market_price",
    "redemption_price",
    "delta_arb",
    "delta_spec",
    "gamma",
    "solver_iters",
    "solver_eps",
    "fallback",
];

pub fn write_csv<W: Write>(trace: &EpisodeTrace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in &trace.records {
        let f = |v: f64| format!("{v:.6}");
        w.write_record([
            r.t.to_string(),
            f(r.demand),
            f(r.supply),
            f(r.collateral),
            f(r.eth_price),
            f(r.market_price),
            f(r.redemption_price),
            f(r.delta_arb),
            f(r.delta_spec),
            f(r.gamma),
            r.solver_iters.to_string(),
            f(r.solver_eps),
            u8::from(r.fallback).to_string(),
        ])
        .map_err(io)?;
    }
    Ok(w.flush()?)
}

/// Writes `<stem>.csv` and the replay header `<stem>.json` into `dir`.
pub fn save_trace(trace: &EpisodeTrace, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let csv = std::fs::File::create(dir.join(format!("{stem}.csv")))?;
    write_csv(trace, std::io::BufWriter::new(csv))?;
    let header = serde_json::to_string_pretty(&trace.header).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(std::fs::write(dir.join(format!("{stem}.json")), header)?)
}

pub fn load_header(path: &Path) -> Result<EpisodeHeader> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

// ---- configuration files ---------------------------------------------------

/// Overlays `patch` onto `base`, table by table.
fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies a TOML overlay to `base`; keys absent from the text keep their
/// values.
pub fn overlay_config<T: Serialize + serde::de::DeserializeOwned>(base: &T, text: &str) -> Result<T> {
    let patch: toml::Value = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
    let mut value = toml::Value::try_from(base).map_err(|e| Error::config(e.to_string()))?;
    merge(&mut value, patch);
    value.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))
}

// ---- Monte Carlo -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub scenarios: Vec<ScenarioConfig>,
    pub controllers: Vec<ControllerKind>,
    pub arb_levels: Vec<f64>,
    pub seeds: usize,
    pub master_seed: u64,
    pub steps: usize,
    /// Template for every episode; the scenario, arbitrage gain, crisis
    /// behavior and controller kind are filled in per cell.
    pub template: EpisodeConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            scenarios: ScenarioKind::STUDY.iter().map(|&k| ScenarioConfig::preset(k)).collect(),
            controllers: ControllerKind::ALL.to_vec(),
            arb_levels: vec![0.0, 50.0],
            seeds: 20,
            master_seed: 2024,
            steps: 100,
            template: EpisodeConfig::new(ScenarioKind::Default, ControllerKind::Stackelberg),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds < 1 {
            return Err(Error::config("a study needs at least one seed"));
        }
        if self.scenarios.is_empty() || self.controllers.is_empty() || self.arb_levels.is_empty() {
            return Err(Error::config("a study needs scenarios, controllers and arbitrage levels"));
        }
        self.template.validate()
    }

    /// Episode config for one cell and controller.
    pub fn episode(&self, scenario: &ScenarioConfig, arb: f64, controller: ControllerKind) -> EpisodeConfig {
        let mut config = self.template.clone();
        config.scenario = scenario.clone().with_steps(self.steps);
        config.agents = AgentParams {
            crisis: AgentParams::for_scenario(scenario.kind).crisis,
            ..self.template.agents
        }
        .with_arbitrage(arb);
        config.controller.kind = controller;
        config
    }

    /// Episode seeds of cell `cell`: the master seed keys a ChaCha stream per
    /// cell, read sequentially. Every controller in a cell sees the same paths.
    pub fn cell_seeds(&self, cell: usize) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(cell as u64);
        (0..self.seeds).map(|_| rng.next_u64()).collect()
    }
}

/// Mean metrics of one controller in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub p_mad: f64,
    pub r_mad: f64,
    pub min_gamma: f64,
    /// Median over seeds; `None` when most seeds never re-peg.
    pub time_to_repeg_median: Option<f64>,
    pub never_repegged: usize,
    /// Seeds whose collateralization fell below the vault minimum `β`.
    pub below_min_ratio: usize,
    pub solver_failures: usize,
    pub episodes: usize,
    pub failed_episodes: usize,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub arbitrage: f64,
    pub scenario: String,
    pub controllers: std::collections::BTreeMap<String, CellSummary>,
    #[serde(skip)]
    pub runs: std::collections::BTreeMap<String, Vec<Option<RunMetrics>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRow {
    pub p_mad: std::collections::BTreeMap<String, f64>,
    pub r_mad: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub cells: Vec<CellResult>,
    /// Average, median and standard deviation of the cell means.
    pub avg: PooledRow,
    pub median: PooledRow,
    pub std_dev: PooledRow,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Sums in sorted order so the result does not depend on the order of `values`.
fn mean(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation.
fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let squares: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    (mean(&squares) * values.len() as f64 / (values.len() - 1) as f64).sqrt()
}

/// Median time to re-peg, counting never-repegged seeds as +∞.
pub fn median_repeg(times: &[Option<usize>]) -> Option<f64> {
    let mut v: Vec<f64> = times.iter().map(|t| t.map_or(f64::INFINITY, |x| x as f64)).collect();
    if v.is_empty() {
        return None;
    }
    let m = median(&mut v);
    m.is_finite().then_some(m)
}

pub fn summarize(runs: &[std::result::Result<RunMetrics, String>], min_ratio: f64) -> CellSummary {
    let ok: Vec<&RunMetrics> = runs.iter().filter_map(|r| r.as_ref().ok()).collect();
    let errors: Vec<String> = runs.iter().filter_map(|r| r.as_ref().err().cloned()).collect();
    let pick = |f: fn(&RunMetrics) -> f64| if ok.is_empty() { f64::NAN } else { mean(&ok.iter().map(|m| f(m)).collect::<Vec<_>>()) };
    let times: Vec<Option<usize>> = ok.iter().map(|m| m.time_to_repeg).collect();
    CellSummary {
        p_mad: pick(|m| m.p_mad),
        r_mad: pick(|m| m.r_mad),
        min_gamma: pick(|m| m.min_gamma),
        time_to_repeg_median: median_repeg(&times),
        never_repegged: times.iter().filter(|t| t.is_none()).count(),
        below_min_ratio: ok.iter().filter(|m| m.min_gamma < min_ratio).count(),
        solver_failures: ok.iter().map(|m| m.solver_failures).sum(),
        episodes: runs.len(),
        failed_episodes: errors.len(),
        errors,
    }
}

/// Runs every (scenario × arbitrage × controller × seed) episode. Individual
/// episode errors are recorded in their cell. `progress` is called after each
/// finished episode with (done, total).
pub fn monte_carlo(study: &StudyConfig, progress: &(dyn Fn(usize, usize) + Sync)) -> Result<StudyReport> {
    study.validate()?;
    let mut jobs = Vec::new();
    for (si, scenario) in study.scenarios.iter().enumerate() {
        for (ai, &arb) in study.arb_levels.iter().enumerate() {
            let cell = si * study.arb_levels.len() + ai;
            let seeds = study.cell_seeds(cell);
            for &controller in &study.controllers {
                for &seed in &seeds {
                    jobs.push((cell, scenario, arb, controller, seed));
                }
            }
        }
    }
    let total = jobs.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::result::Result<RunMetrics, String>> = jobs
        .par_iter()
        .map(|&(_, scenario, arb, controller, seed)| {
            let config = study.episode(scenario, arb, controller);
            let out = run_episode(&config, seed)
                .and_then(|trace| run_metrics(&trace))
                .map_err(|e| format!("seed {seed}: {e}"));
            let n = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            progress(n, total);
            out
        })
        .collect();

    let beta = study.template.controller.speculator.min_collateral_ratio;
    let mut cells = Vec::new();
    for (si, scenario) in study.scenarios.iter().enumerate() {
        for (ai, &arb) in study.arb_levels.iter().enumerate() {
            let cell = si * study.arb_levels.len() + ai;
            let mut controllers = std::collections::BTreeMap::new();
            let mut runs = std::collections::BTreeMap::new();
            for &controller in &study.controllers {
                let mine: Vec<_> = jobs
                    .iter()
                    .zip(&results)
                    .filter(|((c, _, _, k, _), _)| *c == cell && *k == controller)
                    .map(|(_, r)| r.clone())
                    .collect();
                runs.insert(controller.label().to_string(), mine.iter().map(|r| r.as_ref().ok().copied()).collect());
                controllers.insert(controller.label().to_string(), summarize(&mine, beta));
            }
            cells.push(CellResult {
                arbitrage: arb,
                scenario: scenario.kind.label().to_string(),
                controllers,
                runs,
            });
        }
    }
    let pooled = |f: fn(&[f64]) -> f64| -> PooledRow {
        let mut p = std::collections::BTreeMap::new();
        let mut r = std::collections::BTreeMap::new();
        for &controller in &study.controllers {
            let label = controller.label();
            let ps: Vec<f64> = cells.iter().map(|c| c.controllers[label].p_mad).collect();
            let rs: Vec<f64> = cells.iter().map(|c| c.controllers[label].r_mad).collect();
            p.insert(label.to_string(), f(&ps));
            r.insert(label.to_string(), f(&rs));
        }
        PooledRow { p_mad: p, r_mad: r }
    };
    Ok(StudyReport {
        avg: pooled(mean),
        median: pooled(|v| median(&mut v.to_vec())),
        std_dev: pooled(std_dev),
        cells,
    })
}

impl StudyReport {
    /// Plain-text table: one row per (arbitrage, scenario) cell, one
    /// column per controller, then the pooled rows.
    pub fn table(&self, metric: &str) -> String {
        let labels: Vec<&String> = self.cells.first().map(|c| c.controllers.keys().collect()).unwrap_or_default();
        let mut s = format!("{:<10}{:<12}", "arb", "scenario");
        for l in &labels {
            s += &format!("{:>12}", l);
        }
        s.push('\n');
        for c in &self.cells {
            s += &format!("{:<10}{:<12}", c.arbitrage, c.scenario);
            for l in &labels {
                let m = &c.controllers[*l];
                let v = if metric == "r_mad" { m.r_mad } else { m.p_mad };
                s += &format!("{v:>12.6}");
            }
            s.push('\n');
        }
        for (name, row) in [("Avg.", &self.avg), ("Median", &self.median), ("Std. Dev.", &self.std_dev)] {
            s += &format!("{:<22}", name);
            for l in &labels {
                let v = if metric == "r_mad" { row.r_mad[*l] } else { row.p_mad[*l] };
                s += &format!("{v:>12.6}");
            }
            s.push('\n');
        }
        s
    }
}
