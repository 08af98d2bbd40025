//! Discrete-event timeline: staggered periodic SCADA group arrivals against
//! the μPMU tick clock, with per-measurement staleness tracking.
//!
//! Arrival bookkeeping is arithmetic (period and offset per group), so the
//! timeline never stores an event table. True states are materialized
//! lazily: a SCADA group's reading taken at tick u is only computed when
//! some SE instant consumes it, at which point the power flow is solved at
//! u from the recorded load trajectory. Refreshes that are overwritten
//! before any SE instant consumes them are never valued; because
//! measurement noise is a counter-based function of (seed, measurement,
//! acquisition tick), skipping them leaves every other draw unchanged.

use std::collections::{HashMap, VecDeque};

use nalgebra::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{GridModel, PowerFlowSolver, TrueState};
use crate::measurement::{eval_h, MeasKind, MeasSource, MeasurementPlan, MeasurementSample};
use crate::ou::{sample_step, stale_variance, OuLoadState, OuParams};

type Complex64 = Complex<f64>;

/// Staggered arrival schedule for SCADA groups on the μPMU tick clock.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    /// μPMU samples per second; one tick = 1/f_pmu seconds.
    pub f_pmu: u32,
    /// SCADA refresh period in seconds.
    pub scada_period_s: f64,
    /// SCADA refresh period in ticks.
    pub period_ticks: u64,
    pub n_groups: usize,
    /// Per-group first-arrival offsets in ticks, each < period_ticks.
    pub offsets: Vec<u64>,
    pub horizon_ticks: u64,
    /// Inter-group stagger in ticks, ⌊f_pmu/n_groups⌋ scaled.
    pub stagger: u64,
    /// True when >1 groups collapsed onto a common offset (stagger 0).
    pub degenerate: bool,
    /// SE cadence in ticks (1 = every tick).
    pub se_period_ticks: u64,
}

/// Build the maximum-asynchronicity schedule: group g first reports at
/// g·⌊f_pmu/n_groups⌋ ticks (wrapped into the period) and every
/// `scada_period` thereafter. `stagger_scale` scales the stagger factor
/// (1.0 = as far apart as possible; values < 1 reduce asynchronicity).
pub fn build_schedule(
    f_pmu: u32,
    scada_period_s: f64,
    n_groups: usize,
    horizon_s: f64,
    se_period_ticks: u64,
    stagger_scale: f64,
) -> Result<Schedule> {
    if f_pmu == 0 {
        return Err(Error::InvalidArgument("f_pmu must be ≥ 1".into()));
    }
    if !(scada_period_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scada_period must be positive, got {scada_period_s}"
        )));
    }
    if n_groups == 0 {
        return Err(Error::InvalidArgument("n_groups must be ≥ 1".into()));
    }
    if !(horizon_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "horizon must be positive, got {horizon_s}"
        )));
    }
    if se_period_ticks == 0 {
        return Err(Error::InvalidArgument("se_period_ticks must be ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&stagger_scale) {
        return Err(Error::InvalidArgument(format!(
            "stagger_scale must lie in [0, 1], got {stagger_scale}"
        )));
    }
    let period_f = scada_period_s * f_pmu as f64;
    let period_ticks = period_f.round() as u64;
    if period_ticks == 0 || (period_f - period_ticks as f64).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "scada_period of {scada_period_s} s is not a whole number of ticks at f_pmu = {f_pmu}"
        )));
    }
    let stagger = (((f_pmu as u64 / n_groups as u64) as f64) * stagger_scale).floor() as u64;
    let offsets: Vec<u64> = (0..n_groups as u64)
        .map(|g| (g * stagger) % period_ticks)
        .collect();
    let degenerate = n_groups > 1 && stagger == 0;
    Ok(Schedule {
        f_pmu,
        scada_period_s,
        period_ticks,
        n_groups,
        offsets,
        horizon_ticks: (horizon_s * f_pmu as f64).round() as u64,
        stagger,
        degenerate,
        se_period_ticks,
    })
}

impl Schedule {
    /// The synchronized reference schedule: every group refreshes at every
    /// tick, so every sample is fresh at every SE instant. Intentionally
    /// synchronized, so never flagged degenerate.
    pub fn ideal(
        f_pmu: u32,
        n_groups: usize,
        horizon_s: f64,
        se_period_ticks: u64,
    ) -> Result<Schedule> {
        let mut s = build_schedule(
            f_pmu,
            1.0 / f_pmu as f64,
            n_groups,
            horizon_s,
            se_period_ticks,
            0.0,
        )?;
        s.degenerate = false;
        Ok(s)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.f_pmu as f64
    }

    /// First tick at which the estimator may run: every group has reported
    /// and one full SCADA period has elapsed on top of the last offset.
    pub fn eligible_tick(&self) -> u64 {
        self.offsets.iter().copied().max().unwrap_or(0) + self.period_ticks
    }

    pub fn is_se_instant(&self, tick: u64) -> bool {
        tick % self.se_period_ticks == 0 && tick >= self.eligible_tick()
    }

    /// SE instants within the horizon, in order.
    pub fn se_instants(&self) -> impl Iterator<Item = u64> + '_ {
        let first = self.eligible_tick().div_ceil(self.se_period_ticks) * self.se_period_ticks;
        (first..=self.horizon_ticks).step_by(self.se_period_ticks as usize)
    }

    /// Groups whose refresh lands exactly on `tick`.
    pub fn groups_due(&self, tick: u64) -> Vec<usize> {
        (0..self.n_groups)
            .filter(|&g| {
                tick >= self.offsets[g] && (tick - self.offsets[g]) % self.period_ticks == 0
            })
            .collect()
    }

    /// Latest refresh of group g at or before `tick`, if it has reported.
    pub fn last_refresh(&self, g: usize, tick: u64) -> Option<u64> {
        let off = self.offsets[g];
        if tick < off {
            return None;
        }
        Some(tick - (tick - off) % self.period_ticks)
    }

    /// Staleness age of group g at `tick`, in ticks.
    pub fn age(&self, g: usize, tick: u64) -> Option<u64> {
        self.last_refresh(g, tick).map(|u| tick - u)
    }

    /// Event table dump over a tick range:
    /// `tick,event,group_id,age_0,...,age_{G-1}`.
    pub fn events_csv(&self, from_tick: u64, to_tick: u64) -> String {
        let mut out = String::from("tick,event,group_id");
        for g in 0..self.n_groups {
            out.push_str(&format!(",age_{g}"));
        }
        out.push('\n');
        let mut emit = |tick: u64, event: &str, group: String| {
            out.push_str(&format!("{tick},{event},{group}"));
            for g in 0..self.n_groups {
                match self.age(g, tick) {
                    Some(a) => out.push_str(&format!(",{a}")),
                    None => out.push_str(","),
                }
            }
            out.push('\n');
        };
        for tick in from_tick..=to_tick {
            emit(tick, "pmu_refresh", String::new());
            for g in self.groups_due(tick) {
                emit(tick, "scada_group_refresh", g.to_string());
            }
            if self.is_se_instant(tick) {
                emit(tick, "se_instant", String::new());
            }
        }
        out
    }
}

/// How generated measurement noise is scaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseMode {
    /// noise = noise_scale · meter_sigma · N(0,1) — each channel's unit
    /// normal scaled by its own precision.
    SigmaScaled,
    /// noise = noise_scale · N(0,1) — a raw additive normal, identical
    /// scale on every channel.
    RawAdditive,
}

/// Splitmix64 finalizer for carving independent substreams out of one seed.
fn substream_seed(seed: u64, domain: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(domain.wrapping_mul(0xA0761D6478BD642F))
        .wrapping_add(index.wrapping_mul(0x9E3779B97F4A7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

const DOMAIN_OU: u64 = 1;
const DOMAIN_NOISE: u64 = 2;

/// Measurement noise is counter-based: a pure function of
/// (seed, def_index, acquisition tick). Valuing order therefore cannot
/// change any draw, and refreshes that are overwritten unconsumed leave no
/// trace in the random sequence.
fn noise_draw(seed: u64, def_index: usize, tick: u64) -> f64 {
    let s = substream_seed(
        substream_seed(seed, DOMAIN_NOISE, def_index as u64),
        3,
        tick,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    StandardNormal.sample(&mut rng)
}

/// Share of an observed load's complex drift variance that one stale
/// channel inherits. Injection channels split their bus's variance equally
/// between the P and Q axes; each flow channel carries the full sum over
/// the downstream loads it serves.
pub fn staleness_share(kind: MeasKind) -> f64 {
    match kind {
        MeasKind::InjP | MeasKind::InjQ => 0.5,
        MeasKind::FlowP | MeasKind::FlowQ | MeasKind::Vmag => 1.0,
    }
}

struct LoadChannel {
    /// Internal bus index.
    bus: usize,
    params: OuParams,
    state: OuLoadState,
    rng: ChaCha8Rng,
}

/// Per-load OU configuration resolved to internal bus order.
#[derive(Debug, Clone)]
pub struct LoadDynamics {
    /// (internal bus index, params) for every load bus.
    pub per_load: Vec<(usize, OuParams)>,
}

impl LoadDynamics {
    /// Uniform θ with σ_ou set so each load's stationary complex deviation
    /// is `stationary_pct` of its base apparent power.
    pub fn stationary_pct(
        model: &GridModel,
        theta: f64,
        stationary_pct: f64,
        dt: f64,
    ) -> Result<Self> {
        if !(stationary_pct >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "stationary_pct must be ≥ 0, got {stationary_pct}"
            )));
        }
        let mut per_load = Vec::new();
        for bus in model.load_buses() {
            let target_sd = stationary_pct * model.buses[bus].load.norm();
            let sigma = OuParams::sigma_for_stationary_sd(theta, target_sd);
            per_load.push((bus, OuParams::new(theta, sigma, dt)?));
        }
        Ok(LoadDynamics { per_load })
    }

    /// Replace the parameters of one load bus (external id).
    pub fn override_bus(
        &mut self,
        model: &GridModel,
        ext_id: usize,
        params: OuParams,
    ) -> Result<()> {
        let bus = model
            .int_index(ext_id)
            .ok_or_else(|| Error::InvalidArgument(format!("override bus {ext_id} not in case")))?;
        for (b, p) in self.per_load.iter_mut() {
            if *b == bus {
                *p = params;
                return Ok(());
            }
        }
        Err(Error::InvalidArgument(format!(
            "override bus {ext_id} carries no load"
        )))
    }
}

/// The simulation timeline for one scenario: OU load trajectories, lazy
/// true-state materialization, and the live measurement sample buffer.
pub struct Timeline<'a> {
    model: &'a GridModel,
    plan: &'a MeasurementPlan,
    pub schedule: Schedule,
    loads: Vec<LoadChannel>,
    /// Lookup: internal bus index → position in `loads`.
    load_pos: HashMap<usize, usize>,
    seed: u64,
    noise_scale: f64,
    noise_mode: NoiseMode,
    solver: PowerFlowSolver<'a>,
    /// Load trajectory ring: (tick, absolute complex loads, all buses).
    history: VecDeque<(u64, Vec<Complex64>)>,
    history_cap: usize,
    /// Materialized true states by tick.
    state_cache: HashMap<u64, TrueState>,
    samples: Vec<MeasurementSample>,
    /// Last refresh tick actually valued, per group.
    group_valued: Vec<Option<u64>>,
    current_tick: u64,
    /// When set, refreshes are valued at their own tick as the clock
    /// advances instead of at consumption (validation mode; identical
    /// output when no refresh is ever overwritten unconsumed).
    pub eager: bool,
}

impl<'a> Timeline<'a> {
    pub fn new(
        model: &'a GridModel,
        plan: &'a MeasurementPlan,
        schedule: Schedule,
        dynamics: &LoadDynamics,
        seed: u64,
        noise_scale: f64,
        noise_mode: NoiseMode,
        synthetic_seed_samples: &[MeasurementSample],
    ) -> Result<Self> {
        if !(noise_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise_scale must be ≥ 0, got {noise_scale}"
            )));
        }
        if schedule.n_groups != plan.n_groups {
            return Err(Error::InvalidArgument(format!(
                "schedule has {} groups but the plan has {}",
                schedule.n_groups, plan.n_groups
            )));
        }
        let mut loads = Vec::new();
        let mut load_pos = HashMap::new();
        for (i, &(bus, params)) in dynamics.per_load.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, DOMAIN_OU, bus as u64));
            // Stationary initialization: the feeder has been drifting long
            // before the window we simulate.
            let axis_sd = (params.stationary_var() / 2.0).sqrt();
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            // The OU state is the zero-mean deviation; absolute load is
            // base + deviation wherever the trajectory is read.
            let dev = Complex64::new(axis_sd * re, axis_sd * im);
            let state = OuLoadState::anchored(dev, 0);
            loads.push(LoadChannel {
                bus,
                params,
                state,
                rng,
            });
            load_pos.insert(bus, i);
        }

        // Sample placeholders; every live def is valued before first
        // consumption (schedule eligibility guarantees each group reported).
        let mut samples: Vec<MeasurementSample> = plan
            .defs
            .iter()
            .enumerate()
            .map(|(i, d)| MeasurementSample {
                def_index: i,
                value: 0.0,
                acquired_tick: 0,
                variance_state: d.meter_sigma * d.meter_sigma,
            })
            .collect();
        for s in synthetic_seed_samples {
            if plan.defs[s.def_index].source != MeasSource::Synthetic {
                return Err(Error::InvalidArgument(format!(
                    "seed sample {} does not target a synthetic def",
                    s.def_index
                )));
            }
            samples[s.def_index] = *s;
        }

        let history_cap = (schedule.period_ticks + schedule.se_period_ticks + 2) as usize;
        let mut history = VecDeque::with_capacity(history_cap + 1);
        let initial: Vec<Complex64> = {
            let mut v: Vec<Complex64> = model.buses.iter().map(|b| b.load).collect();
            for ch in &loads {
                v[ch.bus] += ch.state.s_now;
            }
            v
        };
        history.push_back((0, initial));

        Ok(Timeline {
            model,
            plan,
            schedule,
            loads,
            load_pos,
            seed,
            noise_scale,
            noise_mode,
            solver: PowerFlowSolver::new(model),
            history,
            history_cap,
            state_cache: HashMap::new(),
            samples,
            group_valued: vec![None; plan.n_groups],
            current_tick: 0,
            eager: false,
        })
    }

    pub fn current_tick(&self) -> u64 {
        self.current_tick
    }

    /// Advance the load trajectories to `tick`, one exact OU transition per
    /// tick. In eager mode, SCADA refreshes are valued as arrivals occur.
    pub fn advance_to(&mut self, tick: u64) -> Result<()> {
        if tick > self.schedule.horizon_ticks {
            return Err(Error::InvalidArgument(format!(
                "tick {tick} past horizon {}",
                self.schedule.horizon_ticks
            )));
        }
        while self.current_tick < tick {
            let t = self.current_tick + 1;
            let mut loads: Vec<Complex64> = self.model.buses.iter().map(|b| b.load).collect();
            for ch in self.loads.iter_mut() {
                ch.state = sample_step(&ch.state, &ch.params, &mut ch.rng);
                loads[ch.bus] += ch.state.s_now;
            }
            self.history.push_back((t, loads));
            while self.history.len() > self.history_cap {
                self.history.pop_front();
            }
            self.current_tick = t;
            if self.eager {
                for g in self.schedule.groups_due(t) {
                    self.value_group(g, t).map_err(|e| e.at_tick(t))?;
                }
            }
        }
        // Old materialized states are never consumed again.
        let keep_from = tick.saturating_sub(self.history_cap as u64);
        self.state_cache.retain(|&u, _| u >= keep_from);
        Ok(())
    }

    fn loads_at(&self, tick: u64) -> Result<&[Complex64]> {
        self.history
            .iter()
            .find(|(t, _)| *t == tick)
            .map(|(_, l)| l.as_slice())
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "load trajectory at tick {tick} fell out of the history window"
                ))
            })
    }

    /// Materialize the true state at `tick` (≤ current), solving ascending
    /// ticks through the warm-started solver.
    pub fn true_state_at(&mut self, tick: u64) -> Result<TrueState> {
        if let Some(st) = self.state_cache.get(&tick) {
            return Ok(st.clone());
        }
        let loads = self.loads_at(tick)?.to_vec();
        let mut st = self.solver.solve(&loads).map_err(|e| e.at_tick(tick))?;
        st.timestamp = tick;
        self.state_cache.insert(tick, st.clone());
        Ok(st)
    }

    /// Value every def of group g against the true state at `tick`.
    fn value_group(&mut self, g: usize, tick: u64) -> Result<()> {
        if self.group_valued[g] == Some(tick) {
            return Ok(());
        }
        let st = self.true_state_at(tick)?;
        let vm = st.vm_vec();
        let va = st.va_vec();
        for i in 0..self.plan.group_defs(g).len() {
            let di = self.plan.group_defs(g)[i];
            let def = &self.plan.defs[di];
            let truth = eval_h(&vm, &va, def, self.model);
            let value = truth + self.noise_for(di, tick);
            self.samples[di] = MeasurementSample {
                def_index: di,
                value,
                acquired_tick: tick,
                variance_state: def.meter_sigma * def.meter_sigma,
            };
        }
        self.group_valued[g] = Some(tick);
        Ok(())
    }

    fn noise_for(&self, def_index: usize, tick: u64) -> f64 {
        let xi = noise_draw(self.seed, def_index, tick);
        match self.noise_mode {
            NoiseMode::SigmaScaled => self.noise_scale * self.plan.defs[def_index].meter_sigma * xi,
            NoiseMode::RawAdditive => self.noise_scale * xi,
        }
    }

    /// Bring the sample buffer to its SE-instant state at `tick`: value any
    /// unconsumed SCADA refreshes (latest per group), refresh synchronized
    /// μPMU channels against the current true state, and set every SCADA
    /// sample's variance to meter variance plus the staleness variance of
    /// its age. Returns the buffer.
    pub fn refresh_for_se(&mut self, tick: u64) -> Result<&[MeasurementSample]> {
        if tick != self.current_tick {
            return Err(Error::InvalidArgument(format!(
                "refresh_for_se at tick {tick} but timeline is at {}",
                self.current_tick
            )));
        }
        if !self.schedule.is_se_instant(tick) {
            return Err(Error::InvalidArgument(format!(
                "tick {tick} is not an SE instant"
            )));
        }
        // Pending SCADA refreshes, oldest first so the warm power-flow
        // solver walks the trajectory monotonically.
        let mut pending: Vec<(u64, usize)> = Vec::new();
        for g in 0..self.plan.n_groups {
            if self.plan.group_defs(g).is_empty() {
                continue;
            }
            let u = self.schedule.last_refresh(g, tick).ok_or_else(|| {
                Error::InvalidArgument(format!("group {g} consumed before its first report"))
            })?;
            if self.group_valued[g] != Some(u) {
                pending.push((u, g));
            }
        }
        pending.sort_unstable();
        for (u, g) in pending {
            self.value_group(g, u).map_err(|e| e.at_tick(tick))?;
        }

        // Synchronized channels read the current state.
        let st = self.true_state_at(tick)?;
        let vm = st.vm_vec();
        let va = st.va_vec();
        for k in 0..self.plan.instant_defs().len() {
            let di = self.plan.instant_defs()[k];
            let def = &self.plan.defs[di];
            let truth = eval_h(&vm, &va, def, self.model);
            let value = truth + self.noise_for(di, tick);
            self.samples[di] = MeasurementSample {
                def_index: di,
                value,
                acquired_tick: tick,
                variance_state: def.meter_sigma * def.meter_sigma,
            };
        }

        // Staleness variances by age. Injections split their bus's complex
        // drift variance equally between the P and Q channels; flow channels
        // each carry the full sum over the downstream loads they serve.
        let dt = self.schedule.dt();
        for (di, def) in self.plan.defs.iter().enumerate() {
            if def.source != MeasSource::Scada {
                continue;
            }
            let age = tick - self.samples[di].acquired_tick;
            let mut var = def.meter_sigma * def.meter_sigma;
            if age > 0 {
                let elapsed = age as f64 * dt;
                let share = staleness_share(def.kind);
                for &bus in &def.observed_loads {
                    let pos = self.load_pos[&bus];
                    var += share * stale_variance(&self.loads[pos].params, elapsed);
                }
            }
            self.samples[di].variance_state = var;
        }
        Ok(&self.samples)
    }

    pub fn samples(&self) -> &[MeasurementSample] {
        &self.samples
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ac_power_flow, parse_case};
    use crate::measurement::{build_plan, GrlTarget, SigmaConfig};
    use crate::ou::variance_update;

    fn reference_model() -> GridModel {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../cases/baranwu33.txt");
        parse_case(&std::fs::read_to_string(path).unwrap()).unwrap()
    }

    const PMU_BUSES: [usize; 11] = [1, 3, 6, 9, 12, 15, 18, 20, 24, 28, 32];

    #[test]
    fn stagger_arithmetic_at_defaults() {
        let s = build_schedule(60, 1.0, 33, 3600.0, 60, 1.0).unwrap();
        assert_eq!(s.stagger, 1, "⌊60/33⌋");
        assert_eq!(s.period_ticks, 60);
        assert_eq!(s.offsets, (0..33).collect::<Vec<u64>>());
        assert!(!s.degenerate);
        assert_eq!(s.eligible_tick(), 32 + 60);
        // Each group refreshes every 60 ticks at its offset.
        for g in 0..33 {
            assert!(s.groups_due(s.offsets[g]).contains(&g));
            assert!(s.groups_due(s.offsets[g] + 60).contains(&g));
            assert!(!s.groups_due(s.offsets[g] + 1).contains(&g));
        }
    }

    #[test]
    fn offsets_wrap_into_period() {
        // 40 groups at stagger 1 into a 30-tick period wrap around.
        let s = build_schedule(60, 0.5, 40, 100.0, 30, 1.0).unwrap();
        assert_eq!(s.period_ticks, 30);
        assert!(s.offsets.iter().all(|&o| o < 30));
        assert_eq!(s.offsets[35], 5);
    }

    #[test]
    fn single_group_is_synchronized() {
        let s = build_schedule(60, 1.0, 1, 100.0, 60, 1.0).unwrap();
        assert_eq!(s.offsets, vec![0]);
        assert!(!s.degenerate);
        assert_eq!(s.eligible_tick(), 60);
    }

    #[test]
    fn zero_stagger_flags_degenerate() {
        let s = build_schedule(10, 1.0, 33, 100.0, 10, 1.0).unwrap();
        assert_eq!(s.stagger, 0);
        assert!(s.degenerate);
        assert!(s.offsets.iter().all(|&o| o == 0));
    }

    #[test]
    fn schedule_rejects_bad_arguments() {
        assert!(build_schedule(0, 1.0, 33, 100.0, 60, 1.0).is_err());
        assert!(build_schedule(60, 0.0, 33, 100.0, 60, 1.0).is_err());
        assert!(build_schedule(60, 1.0, 0, 100.0, 60, 1.0).is_err());
        assert!(build_schedule(60, 1.0, 33, -1.0, 60, 1.0).is_err());
        assert!(build_schedule(60, 1.0, 33, 100.0, 0, 1.0).is_err());
        assert!(build_schedule(60, 1.0, 33, 100.0, 60, 1.5).is_err());
        // 1/3 s is not a whole number of ticks at 10 Hz.
        assert!(build_schedule(10, 1.0 / 3.0, 33, 100.0, 10, 1.0).is_err());
    }

    #[test]
    fn cold_start_excludes_early_ticks() {
        let s = build_schedule(60, 2.0, 33, 600.0, 60, 1.0).unwrap();
        assert_eq!(s.eligible_tick(), 32 + 120);
        assert!(!s.is_se_instant(60));
        assert!(!s.is_se_instant(120));
        assert!(s.is_se_instant(180));
        assert_eq!(s.se_instants().next(), Some(180));
    }

    #[test]
    fn ideal_schedule_is_always_fresh() {
        let s = Schedule::ideal(60, 33, 60.0, 60).unwrap();
        assert_eq!(s.period_ticks, 1);
        assert_eq!(s.n_groups, 33);
        assert!(!s.degenerate);
        for t in s.se_instants() {
            for g in 0..33 {
                assert_eq!(s.age(g, t), Some(0));
            }
        }
    }

    fn timeline_fixture<'a>(
        model: &'a GridModel,
        plan: &'a MeasurementPlan,
        schedule: Schedule,
        seed: u64,
    ) -> Timeline<'a> {
        let dynamics = LoadDynamics::stationary_pct(model, 0.0125, 0.02, schedule.dt()).unwrap();
        Timeline::new(
            model,
            plan,
            schedule,
            &dynamics,
            seed,
            0.5,
            NoiseMode::SigmaScaled,
            &[],
        )
        .unwrap()
    }

    #[test]
    fn refresh_resets_variance_and_staleness_grows() {
        let model = reference_model();
        let plan =
            build_plan(&model, &PMU_BUSES, GrlTarget::Grl3, &SigmaConfig::default()).unwrap();
        // 4 s SCADA so ages at 1 s SE instants cycle 0,60,120,180.
        let schedule = build_schedule(60, 4.0, 33, 120.0, 60, 1.0).unwrap();
        let mut tl = timeline_fixture(&model, &plan, schedule.clone(), 7);

        // Find a SCADA def owned by group 0 (offset 0) with observed loads.
        let di = (0..plan.d())
            .find(|&i| plan.defs[i].group_id == Some(0) && !plan.defs[i].observed_loads.is_empty())
            .unwrap();
        let dt = schedule.dt();
        for t in schedule.se_instants().take(20).collect::<Vec<_>>() {
            tl.advance_to(t).unwrap();
            let samples = tl.refresh_for_se(t).unwrap();
            let s = samples[di];
            let age = t - s.acquired_tick;
            assert_eq!(age, schedule.age(0, t).unwrap());
            let meter_var = plan.defs[di].meter_sigma * plan.defs[di].meter_sigma;
            if age == 0 {
                assert_eq!(s.variance_state, meter_var);
            } else {
                assert!(s.variance_state > meter_var);
                // Closed-form staleness must match the per-tick recursion to
                // 1e-12 (relative to the stationary scale).
                let dynamics = LoadDynamics::stationary_pct(&model, 0.0125, 0.02, dt).unwrap();
                let mut expect = meter_var;
                let share = staleness_share(plan.defs[di].kind);
                for &bus in &plan.defs[di].observed_loads {
                    let params = dynamics
                        .per_load
                        .iter()
                        .find(|(b, _)| *b == bus)
                        .map(|(_, p)| *p)
                        .unwrap();
                    let mut v = 0.0;
                    for _ in 0..age {
                        v = variance_update(v, &params);
                    }
                    expect += share * v;
                }
                let scale = expect.max(1e-30);
                assert!(
                    ((s.variance_state - expect) / scale).abs() <= 1e-12,
                    "variance trace mismatch at age {age}: {} vs {expect}",
                    s.variance_state
                );
            }
        }
    }

    #[test]
    fn pmu_channels_are_always_fresh() {
        let model = reference_model();
        let plan =
            build_plan(&model, &PMU_BUSES, GrlTarget::Grl3, &SigmaConfig::default()).unwrap();
        let schedule = build_schedule(60, 2.0, 33, 60.0, 60, 1.0).unwrap();
        let mut tl = timeline_fixture(&model, &plan, schedule.clone(), 3);
        for t in schedule.se_instants().collect::<Vec<_>>() {
            tl.advance_to(t).unwrap();
            let samples = tl.refresh_for_se(t).unwrap();
            for &di in plan.instant_defs() {
                assert_eq!(samples[di].acquired_tick, t);
                let meter_var = plan.defs[di].meter_sigma * plan.defs[di].meter_sigma;
                assert_eq!(samples[di].variance_state, meter_var);
            }
        }
    }

    #[test]
    fn timeline_is_deterministic() {
        let model = reference_model();
        let plan =
            build_plan(&model, &PMU_BUSES, GrlTarget::Grl3, &SigmaConfig::default()).unwrap();
        let schedule = build_schedule(60, 1.0, 33, 60.0, 60, 1.0).unwrap();
        let mut a = timeline_fixture(&model, &plan, schedule.clone(), 99);
        let mut b = timeline_fixture(&model, &plan, schedule.clone(), 99);
        for t in schedule.se_instants().collect::<Vec<_>>() {
            a.advance_to(t).unwrap();
            b.advance_to(t).unwrap();
            let sa = a.refresh_for_se(t).unwrap().to_vec();
            let sb = b.refresh_for_se(t).unwrap().to_vec();
            assert_eq!(sa, sb);
        }
        // A different seed diverges at the first instant.
        let t0 = schedule.se_instants().next().unwrap();
        let mut c = timeline_fixture(&model, &plan, schedule.clone(), 100);
        let mut d = timeline_fixture(&model, &plan, schedule.clone(), 99);
        c.advance_to(t0).unwrap();
        d.advance_to(t0).unwrap();
        let sc = c.refresh_for_se(t0).unwrap().to_vec();
        let sd = d.refresh_for_se(t0).unwrap().to_vec();
        assert_ne!(sc, sd);
    }

    #[test]
    fn lazy_and_eager_materialization_agree() {
        let model = reference_model();
        let plan =
            build_plan(&model, &PMU_BUSES, GrlTarget::Grl3, &SigmaConfig::default()).unwrap();
        // 1 s SCADA at 1 s SE: every refresh is consumed, so valuing at
        // arrival and valuing at consumption must coincide bitwise.
        let schedule = build_schedule(60, 1.0, 33, 30.0, 60, 1.0).unwrap();
        let mut lazy = timeline_fixture(&model, &plan, schedule.clone(), 17);
        let mut eager = timeline_fixture(&model, &plan, schedule.clone(), 17);
        eager.eager = true;
        for t in schedule.se_instants().collect::<Vec<_>>() {
            lazy.advance_to(t).unwrap();
            eager.advance_to(t).unwrap();
            let sl = lazy.refresh_for_se(t).unwrap().to_vec();
            let se = eager.refresh_for_se(t).unwrap().to_vec();
            for (a, b) in sl.iter().zip(&se) {
                assert_eq!(a.def_index, b.def_index);
                assert_eq!(a.acquired_tick, b.acquired_tick);
                assert_eq!(a.variance_state, b.variance_state);
                // Identical noise draws; the valuing power flows walk the
                // trajectory through different warm-start sequences, so the
                // true values agree only to solver tolerance.
                assert!(
                    (a.value - b.value).abs() <= 1e-7,
                    "def {}: {} vs {}",
                    a.def_index,
                    a.value,
                    b.value
                );
            }
        }
    }

    #[test]
    fn scada_values_are_stale_between_refreshes() {
        let model = reference_model();
        let plan =
            build_plan(&model, &PMU_BUSES, GrlTarget::Grl3, &SigmaConfig::default()).unwrap();
        let schedule = build_schedule(60, 4.0, 33, 120.0, 60, 1.0).unwrap();
        let mut tl = timeline_fixture(&model, &plan, schedule.clone(), 5);
        let di = (0..plan.d())
            .find(|&i| plan.defs[i].group_id == Some(0))
            .unwrap();
        let instants: Vec<u64> = schedule.se_instants().take(8).collect();
        let mut last = None;
        for &t in &instants {
            tl.advance_to(t).unwrap();
            let s = tl.refresh_for_se(t).unwrap()[di];
            if let Some((prev_tick, prev_val)) = last {
                if s.acquired_tick == prev_tick {
                    assert_eq!(s.value, prev_val, "stale value must not change");
                }
            }
            last = Some((s.acquired_tick, s.value));
        }
        // With a 4 s period and 1 s instants, consecutive instants share
        // the same acquisition at least once.
        let mut tl2 = timeline_fixture(&model, &plan, schedule.clone(), 5);
        let mut shared = false;
        let mut prev_acq = None;
        for &t in &instants {
            tl2.advance_to(t).unwrap();
            let s = tl2.refresh_for_se(t).unwrap()[di];
            if prev_acq == Some(s.acquired_tick) {
                shared = true;
            }
            prev_acq = Some(s.acquired_tick);
        }
        assert!(shared);
    }

    #[test]
    fn noiseless_timeline_reproduces_power_flow() {
        let model = reference_model();
        let plan =
            build_plan(&model, &PMU_BUSES, GrlTarget::Grl3, &SigmaConfig::default()).unwrap();
        let schedule = build_schedule(60, 1.0, 33, 10.0, 60, 1.0).unwrap();
        let dynamics = LoadDynamics::stationary_pct(&model, 0.0125, 0.0, schedule.dt()).unwrap();
        let mut tl = Timeline::new(
            &model,
            &plan,
            schedule.clone(),
            &dynamics,
            1,
            0.0,
            NoiseMode::SigmaScaled,
            &[],
        )
        .unwrap();
        let t = schedule.se_instants().next().unwrap();
        tl.advance_to(t).unwrap();
        let samples = tl.refresh_for_se(t).unwrap().to_vec();
        // σ_ou = 0 and zero noise: every sample equals the base power flow.
        let truth = ac_power_flow(&model, &model.base_loads()).unwrap();
        let vm = truth.vm_vec();
        let va = truth.va_vec();
        for (i, s) in samples.iter().enumerate() {
            let want = eval_h(&vm, &va, &plan.defs[i], &model);
            // Warm vs cold solver paths agree to solver tolerance.
            assert!(
                (s.value - want).abs() <= 1e-7,
                "def {i}: {} vs {want}",
                s.value
            );
        }
    }

    #[test]
    fn events_csv_lists_arrivals() {
        // ⌊60/3⌋ = 20-tick stagger: arrivals at 0, 20, 40.
        let s = build_schedule(60, 1.0, 3, 10.0, 60, 1.0).unwrap();
        assert_eq!(s.offsets, vec![0, 20, 40]);
        let csv = s.events_csv(0, 40);
        assert!(csv.starts_with("tick,event,group_id,age_0,age_1,age_2\n"));
        assert!(csv.contains("\n0,scada_group_refresh,0,0,,\n"));
        assert!(csv.contains("\n20,scada_group_refresh,1,20,0,\n"));
        assert!(csv.contains("\n40,scada_group_refresh,2,40,20,0\n"));
    }
}
