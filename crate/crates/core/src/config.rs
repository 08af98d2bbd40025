//! Run configuration: a flat key–value text format with section headers,
//! readable and writable without any serialization dependency. The emitted
//! manifest is itself a valid configuration that reproduces the run.
//!
//! ```text
//! [case]
//! path = cases/baranwu33.txt
//!
//! [schedule]
//! scada_periods = 1, 2, 4
//!
//! [run]
//! modes = traditional, proposed
//! seeds = 1, 2, 3
//! ```
//!
//! `#` starts a comment. Unknown sections or keys are rejected with the
//! offending line number, as are duplicate keys.

use crate::error::{Error, Result};
use crate::estimator::SeMode;
use crate::measurement::{GrlTarget, SigmaConfig};
use crate::runner::{
    GrossErrorSpec, OuConfig, OuOverride, OuSigmaMode, ScenarioConfig, DEFAULT_PMU_BUSES,
};
use crate::schedule::NoiseMode;

/// Full experiment description: the scenario grid plus every shared knob.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [case]
    pub case_path: String,
    pub slack_v: Option<f64>,
    // [plan]
    pub grls: Vec<GrlTarget>,
    pub pmu_buses: Vec<usize>,
    pub sigmas: SigmaConfig,
    // [ou]
    pub ou: OuConfig,
    // [schedule]
    pub f_pmu: u32,
    pub scada_periods: Vec<f64>,
    pub se_period_ticks: u64,
    pub stagger_scale: f64,
    // [run]
    pub modes: Vec<SeMode>,
    pub horizon_s: f64,
    pub seeds: Vec<u64>,
    pub p: f64,
    pub noise_scale: f64,
    pub noise_mode: NoiseMode,
    pub gross_errors: Vec<GrossErrorSpec>,
    pub label: String,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            case_path: "cases/baranwu33.txt".into(),
            slack_v: None,
            grls: vec![GrlTarget::Grl3],
            pmu_buses: DEFAULT_PMU_BUSES.to_vec(),
            sigmas: SigmaConfig::default(),
            ou: OuConfig::default(),
            f_pmu: 60,
            scada_periods: vec![1.0],
            se_period_ticks: 60,
            stagger_scale: 1.0,
            modes: vec![SeMode::Traditional],
            horizon_s: 21_600.0,
            seeds: vec![1],
            p: 0.95,
            noise_scale: 0.05,
            noise_mode: NoiseMode::SigmaScaled,
            gross_errors: Vec::new(),
            label: "run".into(),
            output_dir: "out".into(),
        }
    }
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::ConfigParse {
        line,
        msg: msg.into(),
    }
}

fn parse_scalar<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| bad(line, format!("cannot parse value for `{key}`: `{v}`")))
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    let v = v.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|tok| {
            tok.trim().parse::<T>().map_err(|_| {
                bad(
                    line,
                    format!("cannot parse `{}` in list `{key}`", tok.trim()),
                )
            })
        })
        .collect()
}

/// Parse a configuration text. Every key is optional; omitted keys keep
/// their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section = String::new();
    let mut seen: Vec<String> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| bad(lineno, "unterminated section header"))?
                .trim();
            match name {
                "case" | "plan" | "ou" | "schedule" | "run" => section = name.to_string(),
                other => return Err(bad(lineno, format!("unknown section `[{other}]`"))),
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(lineno, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        let qualified = format!("{section}.{key}");
        if seen.contains(&qualified) {
            return Err(bad(lineno, format!("duplicate key `{key}` in [{section}]")));
        }
        seen.push(qualified.clone());

        match qualified.as_str() {
            "case.path" => cfg.case_path = value.to_string(),
            "case.slack_v" => cfg.slack_v = Some(parse_scalar(lineno, key, value)?),

            "plan.grl" => {
                cfg.grls = value
                    .split(',')
                    .map(|tok| {
                        GrlTarget::parse(tok.trim())
                            .ok_or_else(|| bad(lineno, format!("unknown grl `{}`", tok.trim())))
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            "plan.pmu_buses" => cfg.pmu_buses = parse_list(lineno, key, value)?,
            "plan.pmu_sigma_frac" => cfg.sigmas.pmu_frac = parse_scalar(lineno, key, value)?,
            "plan.scada_sigma_frac" => cfg.sigmas.scada_frac = parse_scalar(lineno, key, value)?,
            "plan.synthetic_sigma_frac" => {
                cfg.sigmas.synthetic_frac = parse_scalar(lineno, key, value)?
            }
            "plan.sigma_floor" => cfg.sigmas.floor_mag = parse_scalar(lineno, key, value)?,

            "ou.theta" => cfg.ou.theta = parse_scalar(lineno, key, value)?,
            "ou.sigma_mode" => match value {
                "stationary_pct" => {
                    if let OuSigmaMode::Absolute(v) = cfg.ou.sigma {
                        cfg.ou.sigma = OuSigmaMode::StationaryPct(v);
                    }
                }
                "absolute" => {
                    if let OuSigmaMode::StationaryPct(v) = cfg.ou.sigma {
                        cfg.ou.sigma = OuSigmaMode::Absolute(v);
                    }
                }
                other => return Err(bad(lineno, format!("unknown sigma_mode `{other}`"))),
            },
            "ou.sigma_value" => {
                let v: f64 = parse_scalar(lineno, key, value)?;
                cfg.ou.sigma = match cfg.ou.sigma {
                    OuSigmaMode::StationaryPct(_) => OuSigmaMode::StationaryPct(v),
                    OuSigmaMode::Absolute(_) => OuSigmaMode::Absolute(v),
                };
            }
            "ou.overrides" => {
                cfg.ou.overrides = value
                    .split(',')
                    .filter(|t| !t.trim().is_empty())
                    .map(|tok| {
                        let parts: Vec<&str> = tok.trim().split(':').collect();
                        if parts.len() != 3 {
                            return Err(bad(
                                lineno,
                                format!("override `{}` must be bus:theta:sigma", tok.trim()),
                            ));
                        }
                        Ok(OuOverride {
                            bus: parse_scalar(lineno, key, parts[0])?,
                            theta: parse_scalar(lineno, key, parts[1])?,
                            sigma_ou: parse_scalar(lineno, key, parts[2])?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
            }

            "schedule.f_pmu" => cfg.f_pmu = parse_scalar(lineno, key, value)?,
            "schedule.scada_periods" => cfg.scada_periods = parse_list(lineno, key, value)?,
            "schedule.se_period_ticks" => cfg.se_period_ticks = parse_scalar(lineno, key, value)?,
            "schedule.stagger_scale" => cfg.stagger_scale = parse_scalar(lineno, key, value)?,

            "run.modes" => {
                cfg.modes = value
                    .split(',')
                    .map(|tok| {
                        SeMode::parse(tok.trim())
                            .ok_or_else(|| bad(lineno, format!("unknown mode `{}`", tok.trim())))
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            "run.horizon" => cfg.horizon_s = parse_scalar(lineno, key, value)?,
            "run.seeds" => cfg.seeds = parse_list(lineno, key, value)?,
            "run.confidence" => cfg.p = parse_scalar(lineno, key, value)?,
            "run.noise_scale" => cfg.noise_scale = parse_scalar(lineno, key, value)?,
            "run.noise_mode" => {
                cfg.noise_mode = match value {
                    "sigma_scaled" => NoiseMode::SigmaScaled,
                    "raw_additive" => NoiseMode::RawAdditive,
                    other => return Err(bad(lineno, format!("unknown noise_mode `{other}`"))),
                }
            }
            "run.gross_errors" => {
                cfg.gross_errors = value
                    .split(',')
                    .filter(|t| !t.trim().is_empty())
                    .map(|tok| {
                        let parts: Vec<&str> = tok.trim().split(':').collect();
                        if parts.len() != 4 {
                            return Err(bad(
                                lineno,
                                format!(
                                    "gross error `{}` must be def:sigmas:from_tick:to_tick",
                                    tok.trim()
                                ),
                            ));
                        }
                        Ok(GrossErrorSpec {
                            def_index: parse_scalar(lineno, key, parts[0])?,
                            magnitude_sigmas: parse_scalar(lineno, key, parts[1])?,
                            from_tick: parse_scalar(lineno, key, parts[2])?,
                            to_tick: parse_scalar(lineno, key, parts[3])?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
            }
            "run.label" => cfg.label = value.to_string(),
            "run.output_dir" => cfg.output_dir = value.to_string(),

            _ => {
                return Err(bad(
                    lineno,
                    if section.is_empty() {
                        format!("key `{key}` appears before any section header")
                    } else {
                        format!("unknown key `{key}` in [{section}]")
                    },
                ))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("mode list must not be empty".into()));
        }
        if self.scada_periods.is_empty() {
            return Err(Error::Config("scada_periods must not be empty".into()));
        }
        if self.grls.is_empty() {
            return Err(Error::Config("grl list must not be empty".into()));
        }
        if self.pmu_buses.is_empty() {
            return Err(Error::Config("pmu_buses must not be empty".into()));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Config(format!(
                "confidence must lie in (0,1), got {}",
                self.p
            )));
        }
        Ok(())
    }

    /// Serialize back to configuration text, every key explicit, stable
    /// order. Parsing the result reproduces this value exactly.
    pub fn to_manifest_string(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut out = String::new();
        out.push_str("[case]\n");
        out.push_str(&format!("path = {}\n", self.case_path));
        if let Some(v) = self.slack_v {
            out.push_str(&format!("slack_v = {v}\n"));
        }
        out.push_str("\n[plan]\n");
        out.push_str(&format!(
            "grl = {}\n",
            self.grls
                .iter()
                .map(|g| g.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ));
        out.push_str(&format!(
            "pmu_buses = {}\n",
            self.pmu_buses
                .iter()
                .map(|b| b.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ));
        out.push_str(&format!("pmu_sigma_frac = {}\n", self.sigmas.pmu_frac));
        out.push_str(&format!("scada_sigma_frac = {}\n", self.sigmas.scada_frac));
        out.push_str(&format!(
            "synthetic_sigma_frac = {}\n",
            self.sigmas.synthetic_frac
        ));
        out.push_str(&format!("sigma_floor = {}\n", self.sigmas.floor_mag));
        out.push_str("\n[ou]\n");
        out.push_str(&format!("theta = {}\n", self.ou.theta));
        let (mode, value) = match self.ou.sigma {
            OuSigmaMode::StationaryPct(v) => ("stationary_pct", v),
            OuSigmaMode::Absolute(v) => ("absolute", v),
        };
        out.push_str(&format!("sigma_mode = {mode}\n"));
        out.push_str(&format!("sigma_value = {value}\n"));
        out.push_str(&format!(
            "overrides = {}\n",
            self.ou
                .overrides
                .iter()
                .map(|o| format!("{}:{}:{}", o.bus, o.theta, o.sigma_ou))
                .collect::<Vec<_>>()
                .join(", ")
        ));
        out.push_str("\n[schedule]\n");
        out.push_str(&format!("f_pmu = {}\n", self.f_pmu));
        out.push_str(&format!("scada_periods = {}\n", join(&self.scada_periods)));
        out.push_str(&format!("se_period_ticks = {}\n", self.se_period_ticks));
        out.push_str(&format!("stagger_scale = {}\n", self.stagger_scale));
        out.push_str("\n[run]\n");
        out.push_str(&format!(
            "modes = {}\n",
            self.modes
                .iter()
                .map(|m| m.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ));
        out.push_str(&format!("horizon = {}\n", self.horizon_s));
        out.push_str(&format!(
            "seeds = {}\n",
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ));
        out.push_str(&format!("confidence = {}\n", self.p));
        out.push_str(&format!("noise_scale = {}\n", self.noise_scale));
        out.push_str(&format!(
            "noise_mode = {}\n",
            match self.noise_mode {
                NoiseMode::SigmaScaled => "sigma_scaled",
                NoiseMode::RawAdditive => "raw_additive",
            }
        ));
        out.push_str(&format!(
            "gross_errors = {}\n",
            self.gross_errors
                .iter()
                .map(|g| {
                    format!(
                        "{}:{}:{}:{}",
                        g.def_index, g.magnitude_sigmas, g.from_tick, g.to_tick
                    )
                })
                .collect::<Vec<_>>()
                .join(", ")
        ));
        out.push_str(&format!("label = {}\n", self.label));
        out.push_str(&format!("output_dir = {}\n", self.output_dir));
        out
    }

    /// Resolve one cell of the grid into a runnable scenario.
    pub fn scenario(
        &self,
        mode: SeMode,
        scada_period_s: f64,
        grl: GrlTarget,
        seed: u64,
    ) -> ScenarioConfig {
        let label = format!(
            "{}_{}_{}s_seed{}",
            grl.as_str(),
            mode.as_str(),
            scada_period_s,
            seed
        );
        ScenarioConfig {
            label,
            mode,
            grl,
            pmu_buses: self.pmu_buses.clone(),
            scada_period_s,
            horizon_s: self.horizon_s,
            seed,
            p: self.p,
            f_pmu: self.f_pmu,
            se_period_ticks: self.se_period_ticks,
            stagger_scale: self.stagger_scale,
            noise_scale: self.noise_scale,
            noise_mode: self.noise_mode,
            ou: self.ou.clone(),
            sigmas: self.sigmas,
            gross_errors: self.gross_errors.clone(),
        }
    }

    /// The first cell of the grid (what `run` executes).
    pub fn first_scenario(&self) -> ScenarioConfig {
        let mut s = self.scenario(
            self.modes[0],
            self.scada_periods[0],
            self.grls[0],
            self.seeds[0],
        );
        s.label = self.label.clone();
        s
    }

    /// The full grid: grl × mode × period × seed, in stable order, with
    /// unique labels. Matched seeds across modes give common random
    /// numbers within each comparison.
    pub fn scenario_grid(&self) -> Vec<ScenarioConfig> {
        let mut out = Vec::new();
        for &grl in &self.grls {
            for &mode in &self.modes {
                for &period in &self.scada_periods {
                    for &seed in &self.seeds {
                        out.push(self.scenario(mode, period, grl, seed));
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        assert_eq!(
            parse_config("# only a comment\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn manifest_round_trips_exactly() {
        let cfg = RunConfig {
            case_path: "cases/other.txt".into(),
            slack_v: Some(1.02),
            grls: vec![GrlTarget::Grl3, GrlTarget::GrlReduced],
            pmu_buses: vec![1, 3, 6],
            ou: OuConfig {
                theta: 0.05,
                sigma: OuSigmaMode::Absolute(0.0031),
                overrides: vec![OuOverride {
                    bus: 5,
                    theta: 0.1,
                    sigma_ou: 0.002,
                }],
            },
            scada_periods: vec![1.0, 2.0, 4.0],
            modes: vec![SeMode::Ideal, SeMode::Traditional, SeMode::Proposed],
            horizon_s: 360.5,
            seeds: vec![7, 8, 9],
            p: 0.99,
            noise_scale: 0.25,
            noise_mode: NoiseMode::RawAdditive,
            gross_errors: vec![GrossErrorSpec {
                def_index: 12,
                magnitude_sigmas: 10.0,
                from_tick: 600,
                to_tick: 1200,
            }],
            label: "night_shift".into(),
            output_dir: "results".into(),
            ..RunConfig::default()
        };
        let text = cfg.to_manifest_string();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, cfg);
        // And the manifest of the reparse is byte-identical.
        assert_eq!(back.to_manifest_string(), text);
    }

    #[test]
    fn grid_expansion_covers_the_table() {
        let cfg = RunConfig {
            grls: vec![GrlTarget::Grl3, GrlTarget::GrlReduced],
            modes: vec![SeMode::Traditional, SeMode::Proposed],
            scada_periods: vec![1.0, 2.0, 4.0],
            seeds: vec![1, 2],
            ..RunConfig::default()
        };
        let grid = cfg.scenario_grid();
        assert_eq!(grid.len(), 24);
        let mut labels: Vec<&str> = grid.iter().map(|s| s.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), 24, "labels must be unique");
        assert!(grid.iter().any(|s| s.label == "grl2.769_proposed_4s_seed2"));
    }

    #[test]
    fn sections_and_keys_parse() {
        let text = "\
[case]
path = cases/baranwu33.txt   # shipped feeder
slack_v = 1.01

[plan]
grl = grl3, 2.769
pmu_buses = 1, 3, 6
scada_sigma_frac = 0.02

[ou]
theta = 0.25
sigma_mode = absolute
sigma_value = 0.004
overrides = 5:0.1:0.001

[schedule]
f_pmu = 120
scada_periods = 2, 4
se_period_ticks = 1
stagger_scale = 0.5

[run]
modes = ideal, proposed
horizon = 60
seeds = 4, 5
confidence = 0.9
noise_scale = 1
noise_mode = raw_additive
gross_errors = 3:25:0:100
label = t
output_dir = o
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.slack_v, Some(1.01));
        assert_eq!(cfg.grls, vec![GrlTarget::Grl3, GrlTarget::GrlReduced]);
        assert_eq!(cfg.pmu_buses, vec![1, 3, 6]);
        assert_eq!(cfg.sigmas.scada_frac, 0.02);
        assert_eq!(cfg.ou.sigma, OuSigmaMode::Absolute(0.004));
        assert_eq!(cfg.ou.overrides.len(), 1);
        assert_eq!(cfg.f_pmu, 120);
        assert_eq!(cfg.se_period_ticks, 1);
        assert_eq!(cfg.modes, vec![SeMode::Ideal, SeMode::Proposed]);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.noise_mode, NoiseMode::RawAdditive);
        assert_eq!(cfg.gross_errors.len(), 1);
        assert_eq!(cfg.gross_errors[0].magnitude_sigmas, 25.0);
    }

    #[test]
    fn sigma_mode_order_is_immaterial() {
        let a = parse_config("[ou]\nsigma_mode = absolute\nsigma_value = 0.003\n").unwrap();
        let b = parse_config("[ou]\nsigma_value = 0.003\nsigma_mode = absolute\n").unwrap();
        assert_eq!(a.ou.sigma, OuSigmaMode::Absolute(0.003));
        assert_eq!(b.ou.sigma, OuSigmaMode::Absolute(0.003));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let check = |text: &str, needle: &str, line: usize| {
            match parse_config(text) {
                Err(Error::ConfigParse { line: l, msg }) => {
                    assert_eq!(l, line, "wrong line for {needle}: {msg}");
                    assert!(msg.contains(needle), "`{msg}` missing `{needle}`");
                }
                other => panic!("expected ConfigParse for {needle}, got {other:?}"),
            };
        };
        check("[nope]\n", "unknown section", 1);
        check("[run]\nbogus = 1\n", "unknown key", 2);
        check("[run]\nseeds = 1\nseeds = 2\n", "duplicate", 3);
        check("[run]\nhorizon = abc\n", "cannot parse", 2);
        check("stray = 1\n", "before any section", 1);
        check("[run\n", "unterminated", 1);
        check("[run]\nmodes = warp\n", "unknown mode", 2);
        check("[plan]\ngrl = 5\n", "unknown grl", 2);
    }

    #[test]
    fn validation_rejects_empty_lists() {
        assert!(matches!(
            parse_config("[run]\nseeds =\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_config("[schedule]\nscada_periods =\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_config("[run]\nconfidence = 1.5\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn first_scenario_uses_heads_of_lists() {
        let cfg = parse_config(
            "[schedule]\nscada_periods = 2, 4\n[run]\nmodes = proposed, traditional\nseeds = 9, 10\nlabel = demo\n",
        )
        .unwrap();
        let s = cfg.first_scenario();
        assert_eq!(s.mode, SeMode::Proposed);
        assert_eq!(s.scada_period_s, 2.0);
        assert_eq!(s.seed, 9);
        assert_eq!(s.label, "demo");
    }
}
