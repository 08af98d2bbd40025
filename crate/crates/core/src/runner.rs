//! Scenario orchestration: wire a measurement plan, an arrival schedule,
//! and load dynamics into a full monitoring run, and collect the
//! false-positive and estimation-quality metrics the study reports.

use crate::error::{Error, Result};
use crate::estimator::{two_step_estimate, SeMode};
use crate::grid::{ac_power_flow, GridModel};
use crate::measurement::{build_plan, generate_synthetic, GrlTarget, SigmaConfig, StateIndexer};
use crate::ou::OuParams;
use crate::schedule::{build_schedule, LoadDynamics, NoiseMode, Schedule, Timeline};

/// Default μPMU placement (external bus ids): the substation head plus a
/// spread over the trunk and all three laterals.
pub const DEFAULT_PMU_BUSES: [usize; 11] = [1, 3, 6, 9, 12, 15, 18, 20, 24, 28, 32];

/// How per-load OU diffusion strength is specified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OuSigmaMode {
    /// Stationary complex deviation as a fraction of each load's base
    /// apparent power.
    StationaryPct(f64),
    /// One absolute diffusion coefficient (pu/√s) for every load.
    Absolute(f64),
}

/// Per-bus override of the OU parameters (external bus id).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuOverride {
    pub bus: usize,
    pub theta: f64,
    pub sigma_ou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuConfig {
    /// Mean-reversion rate, 1/s.
    pub theta: f64,
    pub sigma: OuSigmaMode,
    pub overrides: Vec<OuOverride>,
}

impl Default for OuConfig {
    fn default() -> Self {
        OuConfig {
            theta: 0.0125,
            sigma: OuSigmaMode::StationaryPct(0.20),
            overrides: Vec::new(),
        }
    }
}

impl OuConfig {
    pub fn resolve(&self, model: &GridModel, dt: f64) -> Result<LoadDynamics> {
        let mut dyn_ = match self.sigma {
            OuSigmaMode::StationaryPct(pct) => {
                LoadDynamics::stationary_pct(model, self.theta, pct, dt)?
            }
            OuSigmaMode::Absolute(sigma) => {
                let mut per_load = Vec::new();
                for bus in model.load_buses() {
                    per_load.push((bus, OuParams::new(self.theta, sigma, dt)?));
                }
                LoadDynamics { per_load }
            }
        };
        for o in &self.overrides {
            dyn_.override_bus(model, o.bus, OuParams::new(o.theta, o.sigma_ou, dt)?)?;
        }
        Ok(dyn_)
    }
}

/// A gross error injected into one measurement channel: an additive bias of
/// `magnitude_sigmas` meter standard deviations over a closed tick range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrossErrorSpec {
    pub def_index: usize,
    pub magnitude_sigmas: f64,
    pub from_tick: u64,
    pub to_tick: u64,
}

impl GrossErrorSpec {
    pub fn active_at(&self, tick: u64) -> bool {
        self.from_tick <= tick && tick <= self.to_tick
    }
}

/// Everything one scenario run depends on. Two runs with equal configs
/// produce byte-identical outputs; runs differing only in `mode` consume
/// identical load trajectories and noise draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub label: String,
    pub mode: SeMode,
    pub grl: GrlTarget,
    /// μPMU placement, external bus ids.
    pub pmu_buses: Vec<usize>,
    pub scada_period_s: f64,
    pub horizon_s: f64,
    pub seed: u64,
    /// Detection confidence level.
    pub p: f64,
    pub f_pmu: u32,
    pub se_period_ticks: u64,
    pub stagger_scale: f64,
    pub noise_scale: f64,
    pub noise_mode: NoiseMode,
    pub ou: OuConfig,
    pub sigmas: SigmaConfig,
    pub gross_errors: Vec<GrossErrorSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            label: "run".into(),
            mode: SeMode::Traditional,
            grl: GrlTarget::Grl3,
            pmu_buses: DEFAULT_PMU_BUSES.to_vec(),
            scada_period_s: 1.0,
            horizon_s: 21_600.0,
            seed: 1,
            p: 0.95,
            f_pmu: 60,
            se_period_ticks: 60,
            stagger_scale: 1.0,
            // Meter accuracy classes are conservative bounds; instruments in
            // the field run well inside them. The drift, not the noise, is
            // what the schemes must disagree about.
            noise_scale: 0.05,
            noise_mode: NoiseMode::SigmaScaled,
            ou: OuConfig::default(),
            sigmas: SigmaConfig::default(),
            gross_errors: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    /// The arrival schedule this scenario runs under. Ideal mode is the
    /// synchronized reference regardless of the configured SCADA period.
    pub fn schedule(&self, n_groups: usize) -> Result<Schedule> {
        match self.mode {
            SeMode::Ideal => {
                Schedule::ideal(self.f_pmu, n_groups, self.horizon_s, self.se_period_ticks)
            }
            _ => build_schedule(
                self.f_pmu,
                self.scada_period_s,
                n_groups,
                self.horizon_s,
                self.se_period_ticks,
                self.stagger_scale,
            ),
        }
    }
}

/// One SE instant's outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub tick: u64,
    pub j_cme: f64,
    pub threshold: f64,
    pub detected: bool,
    pub se_error: f64,
    pub cum_se_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentMetrics {
    pub rows: Vec<MetricsRow>,
    /// Detections at instants with no gross error active.
    pub fp_count: u64,
    /// Instants with no gross error active.
    pub test_count: u64,
    /// All detections, gross-error instants included.
    pub detections: u64,
    /// Step-2 identifications naming a channel with an active gross error.
    pub suspect_hits: u64,
    /// Largest entrywise state error (magnitude or angle) over the run.
    pub max_state_err: f64,
    pub degenerate_schedule: bool,
}

impl ExperimentMetrics {
    pub fn fpr(&self) -> f64 {
        if self.test_count == 0 {
            0.0
        } else {
            self.fp_count as f64 / self.test_count as f64
        }
    }

    pub fn cum_se_error(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cum_se_error)
    }
}

/// Voltage-profile estimation error: the Euclidean distance between actual
/// and estimated magnitude vectors.
pub fn se_error(v_act: &[f64], v_hat: &[f64]) -> Result<f64> {
    if v_act.len() != v_hat.len() {
        return Err(Error::InvalidArgument(format!(
            "se_error length mismatch: {} vs {}",
            v_act.len(),
            v_hat.len()
        )));
    }
    Ok(v_act
        .iter()
        .zip(v_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Run one scenario end to end.
pub fn run_scenario(model: &GridModel, cfg: &ScenarioConfig) -> Result<ExperimentMetrics> {
    if !(cfg.p > 0.0 && cfg.p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level must lie in (0,1), got {}",
            cfg.p
        )));
    }
    let mut plan = build_plan(model, &cfg.pmu_buses, cfg.grl, &cfg.sigmas)?;
    let base = ac_power_flow(model, &model.base_loads())?;
    let synth = generate_synthetic(&mut plan, &base, model)?;
    for ge in &cfg.gross_errors {
        if ge.def_index >= plan.d() {
            return Err(Error::InvalidArgument(format!(
                "gross error targets def {} but the plan has {} measurements",
                ge.def_index,
                plan.d()
            )));
        }
    }

    let schedule = cfg.schedule(plan.n_groups)?;
    let degenerate_schedule = schedule.degenerate;
    let dynamics = cfg.ou.resolve(model, schedule.dt())?;
    let mut tl = Timeline::new(
        model,
        &plan,
        schedule.clone(),
        &dynamics,
        cfg.seed,
        cfg.noise_scale,
        cfg.noise_mode,
        &synth,
    )?;

    let instants: Vec<u64> = schedule.se_instants().collect();
    if instants.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "horizon of {} s ends before the schedule becomes eligible at tick {}",
            cfg.horizon_s,
            schedule.eligible_tick()
        )));
    }

    let idx = StateIndexer::new(model);
    let n = model.n();
    let mut vm_hat = vec![0.0; n];
    let mut va_hat = vec![0.0; n];
    let mut m = ExperimentMetrics {
        degenerate_schedule,
        ..Default::default()
    };
    let mut cum = 0.0;
    for t in instants {
        tl.advance_to(t)?;
        let mut samples = tl.refresh_for_se(t)?.to_vec();
        let mut ge_active = false;
        for ge in &cfg.gross_errors {
            if ge.active_at(t) {
                ge_active = true;
                samples[ge.def_index].value +=
                    ge.magnitude_sigmas * plan.defs[ge.def_index].meter_sigma;
            }
        }

        let est = two_step_estimate(&plan, &samples, cfg.mode, None, model, cfg.p)
            .map_err(|e| e.at_tick(t))?;

        let truth = tl.true_state_at(t)?;
        idx.unpack_into(&est.x_hat, &mut vm_hat, &mut va_hat);
        let mut err2 = 0.0;
        for i in 0..n {
            let dm = truth.vm(i) - vm_hat[i];
            let da = truth.va(i) - va_hat[i];
            err2 += dm * dm;
            m.max_state_err = m.max_state_err.max(dm.abs()).max(da.abs());
        }
        let err = err2.sqrt();
        cum += err;

        if est.detected {
            m.detections += 1;
        }
        if ge_active {
            if est.detected {
                if let Some(s) = est.suspect_index {
                    if cfg
                        .gross_errors
                        .iter()
                        .any(|g| g.active_at(t) && g.def_index == s)
                    {
                        m.suspect_hits += 1;
                    }
                }
            }
        } else {
            m.test_count += 1;
            if est.detected {
                m.fp_count += 1;
            }
        }

        m.rows.push(MetricsRow {
            tick: t,
            j_cme: est.j_cme,
            threshold: est.threshold,
            detected: est.detected,
            se_error: err,
            cum_se_error: cum,
        });
    }
    Ok(m)
}

/// Per-instant metrics table.
pub fn metrics_csv(m: &ExperimentMetrics) -> String {
    let mut out = String::from("tick,j_cme,threshold,detected,se_error,cum_se_error\n");
    for r in &m.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.tick, r.j_cme, r.threshold, r.detected as u8, r.se_error, r.cum_se_error
        ));
    }
    out
}

/// One cell of a false-positive-rate sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct FprCell {
    pub label: String,
    pub grl: GrlTarget,
    pub mode: SeMode,
    pub scada_period_s: f64,
    pub seed: u64,
    pub fpr: f64,
    pub fp_count: u64,
    pub test_count: u64,
}

impl FprCell {
    pub fn from_metrics(cfg: &ScenarioConfig, m: &ExperimentMetrics) -> FprCell {
        FprCell {
            label: cfg.label.clone(),
            grl: cfg.grl,
            mode: cfg.mode,
            scada_period_s: cfg.scada_period_s,
            seed: cfg.seed,
            fpr: m.fpr(),
            fp_count: m.fp_count,
            test_count: m.test_count,
        }
    }
}

/// Sweep summary table, one row per cell in the given order.
pub fn fpr_summary_csv(cells: &[FprCell]) -> String {
    let mut out = String::from("label,grl,mode,scada_period_s,seed,fpr,fp_count,test_count\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.label,
            c.grl.as_str(),
            c.mode.as_str(),
            c.scada_period_s,
            c.seed,
            c.fpr,
            c.fp_count,
            c.test_count
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_case;

    fn reference_model() -> GridModel {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../cases/baranwu33.txt");
        parse_case(&std::fs::read_to_string(path).unwrap()).unwrap()
    }

    #[test]
    fn se_error_is_euclidean_on_magnitudes() {
        let act = [1.0, 1.0, 1.0];
        let hat = [1.003, 0.996, 1.0];
        let e = se_error(&act, &hat).unwrap();
        assert!((e - 5.0e-3).abs() < 1e-15, "{e}");
        assert!(se_error(&act, &hat[..2]).is_err());
    }

    #[test]
    fn noiseless_ideal_run_recovers_state_exactly() {
        let model = reference_model();
        let cfg = ScenarioConfig {
            mode: SeMode::Ideal,
            horizon_s: 2.0,
            noise_scale: 0.0,
            ou: OuConfig {
                sigma: OuSigmaMode::StationaryPct(0.0),
                ..Default::default()
            },
            ..Default::default()
        };
        let m = run_scenario(&model, &cfg).unwrap();
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.detections, 0);
        assert_eq!(m.fp_count, 0);
        assert_eq!(m.test_count, 2);
        assert!(m.max_state_err <= 1e-6, "max err {}", m.max_state_err);
        assert!(!m.degenerate_schedule);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let model = reference_model();
        let cfg = ScenarioConfig {
            horizon_s: 8.0,
            seed: 42,
            ..Default::default()
        };
        let a = run_scenario(&model, &cfg).unwrap();
        let b = run_scenario(&model, &cfg).unwrap();
        assert_eq!(metrics_csv(&a), metrics_csv(&b));
        assert!(!a.rows.is_empty());
        // Cumulative error never decreases.
        for w in a.rows.windows(2) {
            assert!(w[1].cum_se_error >= w[0].cum_se_error);
        }
        // A different seed produces a different trace.
        let c = run_scenario(
            &model,
            &ScenarioConfig {
                seed: 43,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(metrics_csv(&a), metrics_csv(&c));
    }

    #[test]
    fn modes_share_the_same_generated_world() {
        // Traditional and proposed runs at one seed must disagree only
        // through their weighting: their residual inputs are identical, so
        // a noiseless pair gives identical (zero) error traces.
        let model = reference_model();
        let base = ScenarioConfig {
            horizon_s: 4.0,
            noise_scale: 0.0,
            ou: OuConfig {
                sigma: OuSigmaMode::StationaryPct(0.0),
                ..Default::default()
            },
            ..Default::default()
        };
        let trad = run_scenario(&model, &base).unwrap();
        let prop = run_scenario(
            &model,
            &ScenarioConfig {
                mode: SeMode::Proposed,
                ..base.clone()
            },
        )
        .unwrap();
        assert_eq!(trad.rows.len(), prop.rows.len());
        for (a, b) in trad.rows.iter().zip(&prop.rows) {
            assert_eq!(a.tick, b.tick);
            assert!(a.se_error <= 1e-6 && b.se_error <= 1e-6);
        }
    }

    #[test]
    fn gross_error_instants_do_not_count_as_false_positives() {
        let model = reference_model();
        let plan = build_plan(
            &model,
            &DEFAULT_PMU_BUSES,
            GrlTarget::Grl3,
            &SigmaConfig::default(),
        )
        .unwrap();
        // Pick any SCADA channel; a zero-magnitude "error" exercises the
        // accounting without disturbing detection.
        let di = (0..plan.d())
            .find(|&i| plan.defs[i].group_id.is_some())
            .unwrap();
        let cfg = ScenarioConfig {
            horizon_s: 6.0,
            gross_errors: vec![GrossErrorSpec {
                def_index: di,
                magnitude_sigmas: 0.0,
                from_tick: 180,
                to_tick: 240,
            }],
            ..Default::default()
        };
        let m = run_scenario(&model, &cfg).unwrap();
        // Instants 120..360 step 60 → 5 rows, 2 of them GE-active.
        assert_eq!(m.rows.len(), 5);
        assert_eq!(m.test_count, 3);

        // Out-of-range channel is rejected up front.
        let bad = ScenarioConfig {
            gross_errors: vec![GrossErrorSpec {
                def_index: 10_000,
                magnitude_sigmas: 1.0,
                from_tick: 0,
                to_tick: 1,
            }],
            ..cfg.clone()
        };
        assert!(run_scenario(&model, &bad).is_err());
    }

    #[test]
    fn ou_overrides_apply_per_bus() {
        let model = reference_model();
        let cfg = OuConfig {
            theta: 0.0125,
            sigma: OuSigmaMode::Absolute(0.001),
            overrides: vec![OuOverride {
                bus: 5,
                theta: 0.05,
                sigma_ou: 0.002,
            }],
        };
        let dyn_ = cfg.resolve(&model, 1.0 / 60.0).unwrap();
        let b5 = model.int_index(5).unwrap();
        let (_, p5) = dyn_.per_load.iter().find(|(b, _)| *b == b5).unwrap();
        assert_eq!(p5.theta, 0.05);
        // The substation carries no load, so overriding it is an error.
        let bad = OuConfig {
            overrides: vec![OuOverride {
                bus: 1,
                theta: 0.05,
                sigma_ou: 0.002,
            }],
            ..OuConfig::default()
        };
        assert!(bad.resolve(&model, 1.0 / 60.0).is_err());
    }

    #[test]
    fn fpr_summary_lists_cells_in_order() {
        let cells = vec![
            FprCell {
                label: "a".into(),
                grl: GrlTarget::Grl3,
                mode: SeMode::Traditional,
                scada_period_s: 2.0,
                seed: 7,
                fpr: 0.25,
                fp_count: 1,
                test_count: 4,
            },
            FprCell {
                label: "b".into(),
                grl: GrlTarget::GrlReduced,
                mode: SeMode::Proposed,
                scada_period_s: 4.0,
                seed: 8,
                fpr: 0.0,
                fp_count: 0,
                test_count: 4,
            },
        ];
        let csv = fpr_summary_csv(&cells);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "label,grl,mode,scada_period_s,seed,fpr,fp_count,test_count"
        );
        assert_eq!(lines[1], "a,grl3,traditional,2,7,0.25,1,4");
        assert_eq!(lines[2], "b,grl2.769,proposed,4,8,0,0,4");
    }

    #[test]
    fn large_gross_error_is_flagged_and_identified() {
        let model = reference_model();
        let plan = build_plan(
            &model,
            &DEFAULT_PMU_BUSES,
            GrlTarget::Grl3,
            &SigmaConfig::default(),
        )
        .unwrap();
        // A μPMU channel's own weight is high in both schemes, so an
        // enormous bias on it dominates the objective.
        let di = plan.instant_defs()[0];
        let cfg = ScenarioConfig {
            mode: SeMode::Proposed,
            horizon_s: 4.0,
            gross_errors: vec![GrossErrorSpec {
                def_index: di,
                magnitude_sigmas: 200.0,
                from_tick: 0,
                to_tick: u64::MAX,
            }],
            ..Default::default()
        };
        let m = run_scenario(&model, &cfg).unwrap();
        assert!(m.detections >= 1);
        assert_eq!(m.test_count, 0);
        assert!(m.suspect_hits >= 1, "suspect hits {}", m.suspect_hits);
    }
}
