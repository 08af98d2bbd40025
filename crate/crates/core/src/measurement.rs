//! Measurement functions h(x), their analytic Jacobian rows, and measurement
//! plans: which quantities are metered, by which technology, in which SCADA
//! group, and at what precision.
//!
//! State convention used everywhere downstream: `x = [θ_i for i ≠ slack
//! (internal bus order), V_i for all i]`, dimension `N = 2n - 1`. The slack
//! angle is the reference and is never a state.
//!
//! Plan construction follows the feeder's grouping rule: every branch
//! contributes its four directed flow channels (P and Q, metered at each
//! end). A μPMU bus claims all channels of its incident branches into its
//! SCADA group; a non-μPMU bus groups its own-end flow pairs (on branches
//! not claimed by a μPMU neighbor) together with its SCADA injection pair.
//! These forced group channels total 4(n-1) + 2(n-p) for p μPMU buses.
//!
//! The remaining budget up to the target count is synchronized: the
//! substation voltage magnitude is always metered (without at least one
//! magnitude channel, uniform magnitude scaling is an exact null direction
//! of the flat-start Jacobian on a shunt-free feeder, and the plan fails
//! its own observability invariant), then placement buses contribute their
//! injection pairs in list order; an odd final unit of budget takes a
//! voltage magnitude at the next placement bus instead, and any leftover
//! deficit is filled by [`generate_synthetic`]. The full target comes out
//! to d = 4(n-1) + 2n + 1 = 3N identically for any placement — GRL 3 —
//! and the reduced target 3N - 15 gives d = 180 (GRL ≈ 2.769) on the
//! 33-bus feeder: injection pairs at the first three placement buses plus
//! a voltage magnitude at the fourth.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{ac_power_flow, radial_orientation, GridModel, TrueState};

// ---------------------------------------------------------------------------
// State vector layout
// ---------------------------------------------------------------------------

/// Mapping between bus quantities and positions in the state vector.
#[derive(Debug, Clone, Copy)]
pub struct StateIndexer {
    pub n: usize,
    pub slack: usize,
}

impl StateIndexer {
    pub fn new(model: &GridModel) -> Self {
        StateIndexer {
            n: model.n(),
            slack: model.slack,
        }
    }

    pub fn n_state(&self) -> usize {
        2 * self.n - 1
    }

    /// Column of bus `i`'s angle, `None` for the slack (reference angle).
    pub fn ang_col(&self, i: usize) -> Option<usize> {
        if i == self.slack {
            None
        } else if i < self.slack {
            Some(i)
        } else {
            Some(i - 1)
        }
    }

    /// Column of bus `i`'s voltage magnitude.
    pub fn mag_col(&self, i: usize) -> usize {
        self.n - 1 + i
    }

    /// Pack polar coordinates into a state vector.
    pub fn pack(&self, vm: &[f64], va: &[f64]) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_state());
        for i in 0..self.n {
            if let Some(c) = self.ang_col(i) {
                x[c] = va[i];
            }
            x[self.mag_col(i)] = vm[i];
        }
        x
    }

    /// Unpack a state vector into polar coordinate buffers (slack angle 0).
    pub fn unpack_into(&self, x: &DVector<f64>, vm: &mut [f64], va: &mut [f64]) {
        for i in 0..self.n {
            va[i] = match self.ang_col(i) {
                Some(c) => x[c],
                None => 0.0,
            };
            vm[i] = x[self.mag_col(i)];
        }
    }

    /// Pack a solved [`TrueState`].
    pub fn pack_state(&self, st: &TrueState) -> DVector<f64> {
        self.pack(&st.vm_vec(), &st.va_vec())
    }

    /// Flat-start state: unit magnitudes (slack at its setpoint), zero angles.
    pub fn flat_x(&self, model: &GridModel) -> DVector<f64> {
        let mut vm = vec![1.0; self.n];
        vm[self.slack] = model.slack_voltage();
        let va = vec![0.0; self.n];
        self.pack(&vm, &va)
    }
}

// ---------------------------------------------------------------------------
// Measurement definitions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasKind {
    FlowP,
    FlowQ,
    InjP,
    InjQ,
    Vmag,
}

impl MeasKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MeasKind::FlowP => "flow_P",
            MeasKind::FlowQ => "flow_Q",
            MeasKind::InjP => "inj_P",
            MeasKind::InjQ => "inj_Q",
            MeasKind::Vmag => "vmag",
        }
    }

    pub fn parse(s: &str) -> Option<MeasKind> {
        match s {
            "flow_P" => Some(MeasKind::FlowP),
            "flow_Q" => Some(MeasKind::FlowQ),
            "inj_P" => Some(MeasKind::InjP),
            "inj_Q" => Some(MeasKind::InjQ),
            "vmag" => Some(MeasKind::Vmag),
            _ => None,
        }
    }
}

/// Where a measurement is taken: a bus quantity, or a branch quantity metered
/// at one end (`at_from` selects the metering end; flow direction is toward
/// the other end).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasLocation {
    Bus(usize),
    Branch { idx: usize, at_from: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasSource {
    Scada,
    Pmu,
    Synthetic,
}

impl MeasSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            MeasSource::Scada => "scada",
            MeasSource::Pmu => "pmu",
            MeasSource::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Option<MeasSource> {
        match s {
            "scada" => Some(MeasSource::Scada),
            "pmu" => Some(MeasSource::Pmu),
            "synthetic" => Some(MeasSource::Synthetic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementDef {
    pub kind: MeasKind,
    pub loc: MeasLocation,
    pub source: MeasSource,
    /// SCADA group index (the owning bus's internal index), `None` for
    /// synchronized or synthetic measurements.
    pub group_id: Option<usize>,
    /// Meter precision σ_i, pu.
    pub meter_sigma: f64,
    /// Internal indices of load buses whose drift this measurement observes;
    /// drives the staleness-variance mapping for SCADA sources.
    pub observed_loads: Vec<usize>,
}

/// One live reading of a measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementSample {
    pub def_index: usize,
    /// Measured value, pu.
    pub value: f64,
    /// μPMU tick at which the value was acquired.
    pub acquired_tick: u64,
    /// Effective variance right now: meter variance plus accumulated
    /// staleness variance.
    pub variance_state: f64,
}

/// Meter-precision model: per-technology standard deviations expressed as
/// fractions of each measurement's base-case magnitude, with a floor on the
/// magnitude so near-zero channels keep a usable weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaConfig {
    pub pmu_frac: f64,
    pub scada_frac: f64,
    pub synthetic_frac: f64,
    /// Magnitude floor (pu) under the fractions.
    pub floor_mag: f64,
}

impl Default for SigmaConfig {
    fn default() -> Self {
        SigmaConfig {
            // Matched metered classes keep the empirical |z|/100 screening
            // weights proportional to the true precisions, so the
            // synchronized reference fit stays the minimum-variance one and
            // scheme differences isolate the staleness handling.
            pmu_frac: 0.019,
            scada_frac: 0.019,
            // Well above the metered classes: synthetic values are model
            // predictions, not readings.
            synthetic_frac: 0.05,
            floor_mag: 0.001,
        }
    }
}

impl SigmaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pmu_frac", self.pmu_frac),
            ("scada_frac", self.scada_frac),
            ("synthetic_frac", self.synthetic_frac),
            ("floor_mag", self.floor_mag),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "sigma config: {name} must be > 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn sigma_for(&self, source: MeasSource, base_magnitude: f64) -> f64 {
        let frac = match source {
            MeasSource::Pmu => self.pmu_frac,
            MeasSource::Scada => self.scada_frac,
            MeasSource::Synthetic => self.synthetic_frac,
        };
        frac * base_magnitude.abs().max(self.floor_mag)
    }
}

/// Redundancy target of a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrlTarget {
    /// Full plan, d = 3N: all flow channels, all injections, substation
    /// voltage.
    Grl3,
    /// Reduced plan, d = 3N - 15: the synchronized-channel budget shrinks
    /// to injection pairs at the first three placement buses plus one extra
    /// voltage magnitude (d = 180, GRL ≈ 2.769 on the 33-bus feeder).
    GrlReduced,
}

impl GrlTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            GrlTarget::Grl3 => "grl3",
            GrlTarget::GrlReduced => "grl2.769",
        }
    }

    pub fn parse(s: &str) -> Option<GrlTarget> {
        match s {
            "3" | "grl3" => Some(GrlTarget::Grl3),
            "2.769" | "grl2.769" | "reduced" => Some(GrlTarget::GrlReduced),
            _ => None,
        }
    }
}

/// An ordered, immutable measurement set over a model.
#[derive(Debug, Clone)]
pub struct MeasurementPlan {
    pub defs: Vec<MeasurementDef>,
    /// State dimension N = 2n - 1.
    pub n_state: usize,
    /// Number of SCADA groups (= bus count; a group may be empty).
    pub n_groups: usize,
    /// Target measurement count (defaults to the built count; synthetic
    /// generation fills any deficit up to this).
    pub target_d: usize,
    pub sigma_cfg: SigmaConfig,
    /// Def indices per SCADA group.
    group_defs: Vec<Vec<usize>>,
    /// Def indices refreshed at every SE instant (μPMU-sourced).
    instant_defs: Vec<usize>,
}

impl MeasurementPlan {
    /// Assemble a plan from explicit defs, indexing groups and verifying
    /// observability against the model.
    pub fn from_defs(
        defs: Vec<MeasurementDef>,
        model: &GridModel,
        sigma_cfg: SigmaConfig,
    ) -> Result<Self> {
        for (i, def) in defs.iter().enumerate() {
            if !(def.meter_sigma > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "def {i}: meter_sigma must be > 0"
                )));
            }
        }
        let mut plan = MeasurementPlan {
            target_d: defs.len(),
            defs,
            n_state: model.state_dim(),
            n_groups: model.n(),
            sigma_cfg,
            group_defs: Vec::new(),
            instant_defs: Vec::new(),
        };
        plan.rebuild_index();
        check_observability(&plan, model)?;
        Ok(plan)
    }

    pub fn d(&self) -> usize {
        self.defs.len()
    }

    pub fn grl(&self) -> f64 {
        self.defs.len() as f64 / self.n_state as f64
    }

    pub fn group_defs(&self, g: usize) -> &[usize] {
        &self.group_defs[g]
    }

    pub fn instant_defs(&self) -> &[usize] {
        &self.instant_defs
    }

    pub fn meter_sigmas(&self) -> Vec<f64> {
        self.defs.iter().map(|d| d.meter_sigma).collect()
    }

    fn rebuild_index(&mut self) {
        self.group_defs = vec![Vec::new(); self.n_groups];
        self.instant_defs.clear();
        for (i, def) in self.defs.iter().enumerate() {
            match (def.source, def.group_id) {
                (MeasSource::Scada, Some(g)) => self.group_defs[g].push(i),
                (MeasSource::Pmu, _) => self.instant_defs.push(i),
                // Synthetic readings are valued once at creation and are
                // never refreshed by the timeline.
                (MeasSource::Synthetic, _) => {}
                (MeasSource::Scada, None) => unreachable!("scada def without group"),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// h(x) and Jacobian rows
// ---------------------------------------------------------------------------

/// Evaluate one measurement function at a polar state. Exact nonlinear
/// expressions throughout — no linearization.
pub fn eval_h(vm: &[f64], va: &[f64], def: &MeasurementDef, model: &GridModel) -> f64 {
    match (def.kind, def.loc) {
        (MeasKind::Vmag, MeasLocation::Bus(i)) => vm[i],
        (MeasKind::InjP, MeasLocation::Bus(i)) => {
            let mut acc = 0.0;
            for &(k, yik) in model.y_row(i) {
                let th = va[i] - va[k];
                let (s, c) = th.sin_cos();
                acc += vm[k] * (yik.re * c + yik.im * s);
            }
            vm[i] * acc
        }
        (MeasKind::InjQ, MeasLocation::Bus(i)) => {
            let mut acc = 0.0;
            for &(k, yik) in model.y_row(i) {
                let th = va[i] - va[k];
                let (s, c) = th.sin_cos();
                acc += vm[k] * (yik.re * s - yik.im * c);
            }
            vm[i] * acc
        }
        (MeasKind::FlowP, MeasLocation::Branch { idx, at_from }) => {
            let (f, t, g, b, _bc) = branch_ends(model, idx, at_from);
            let th = va[f] - va[t];
            let (s, c) = th.sin_cos();
            g * vm[f] * vm[f] - vm[f] * vm[t] * (g * c + b * s)
        }
        (MeasKind::FlowQ, MeasLocation::Branch { idx, at_from }) => {
            let (f, t, g, b, bc) = branch_ends(model, idx, at_from);
            let th = va[f] - va[t];
            let (s, c) = th.sin_cos();
            -(b + bc) * vm[f] * vm[f] - vm[f] * vm[t] * (g * s - b * c)
        }
        (kind, loc) => unreachable!("malformed measurement def: {kind:?} at {loc:?}"),
    }
}

/// Metering-end view of a branch: (metered bus, far bus, g, b, half-shunt).
fn branch_ends(model: &GridModel, idx: usize, at_from: bool) -> (usize, usize, f64, f64, f64) {
    let br = &model.branches[idx];
    let y = br.y_series();
    let (f, t) = if at_from {
        (br.from, br.to)
    } else {
        (br.to, br.from)
    };
    (f, t, y.re, y.im, br.b_sh / 2.0)
}

/// Analytic gradient of one measurement function, written as sparse
/// (column, value) pairs into `out` (cleared first). Columns follow
/// [`StateIndexer`]; the slack angle never appears.
pub fn jacobian_row(
    vm: &[f64],
    va: &[f64],
    def: &MeasurementDef,
    model: &GridModel,
    idx: &StateIndexer,
    out: &mut Vec<(usize, f64)>,
) {
    out.clear();
    match (def.kind, def.loc) {
        (MeasKind::Vmag, MeasLocation::Bus(i)) => {
            out.push((idx.mag_col(i), 1.0));
        }
        (MeasKind::InjP, MeasLocation::Bus(i)) | (MeasKind::InjQ, MeasLocation::Bus(i)) => {
            let is_p = def.kind == MeasKind::InjP;
            let vi = vm[i];
            // Running P_i and Q_i accumulate alongside the off-diagonal terms.
            let mut p_i = 0.0;
            let mut q_i = 0.0;
            let mut g_ii = 0.0;
            let mut b_ii = 0.0;
            for &(k, yik) in model.y_row(i) {
                let (g, b) = (yik.re, yik.im);
                let th = va[i] - va[k];
                let (s, c) = th.sin_cos();
                p_i += vm[k] * (g * c + b * s);
                q_i += vm[k] * (g * s - b * c);
                if k == i {
                    g_ii = g;
                    b_ii = b;
                    continue;
                }
                let (d_ang, d_mag) = if is_p {
                    (vi * vm[k] * (g * s - b * c), vi * (g * c + b * s))
                } else {
                    (-vi * vm[k] * (g * c + b * s), vi * (g * s - b * c))
                };
                if let Some(col) = idx.ang_col(k) {
                    out.push((col, d_ang));
                }
                out.push((idx.mag_col(k), d_mag));
            }
            p_i *= vi;
            q_i *= vi;
            let (d_ang_own, d_mag_own) = if is_p {
                (-q_i - b_ii * vi * vi, p_i / vi + g_ii * vi)
            } else {
                (p_i - g_ii * vi * vi, q_i / vi - b_ii * vi)
            };
            if let Some(col) = idx.ang_col(i) {
                out.push((col, d_ang_own));
            }
            out.push((idx.mag_col(i), d_mag_own));
        }
        (MeasKind::FlowP, MeasLocation::Branch { idx: e, at_from }) => {
            let (f, t, g, b, _bc) = branch_ends(model, e, at_from);
            let th = va[f] - va[t];
            let (s, c) = th.sin_cos();
            let common = vm[f] * vm[t] * (g * s - b * c);
            if let Some(col) = idx.ang_col(f) {
                out.push((col, common));
            }
            if let Some(col) = idx.ang_col(t) {
                out.push((col, -common));
            }
            out.push((idx.mag_col(f), 2.0 * g * vm[f] - vm[t] * (g * c + b * s)));
            out.push((idx.mag_col(t), -vm[f] * (g * c + b * s)));
        }
        (MeasKind::FlowQ, MeasLocation::Branch { idx: e, at_from }) => {
            let (f, t, g, b, bc) = branch_ends(model, e, at_from);
            let th = va[f] - va[t];
            let (s, c) = th.sin_cos();
            let common = vm[f] * vm[t] * (g * c + b * s);
            if let Some(col) = idx.ang_col(f) {
                out.push((col, -common));
            }
            if let Some(col) = idx.ang_col(t) {
                out.push((col, common));
            }
            out.push((
                idx.mag_col(f),
                -2.0 * (b + bc) * vm[f] - vm[t] * (g * s - b * c),
            ));
            out.push((idx.mag_col(t), -vm[f] * (g * s - b * c)));
        }
        (kind, loc) => unreachable!("malformed measurement def: {kind:?} at {loc:?}"),
    }
}

/// A random operating state near flat start: magnitudes within ±2.5% of
/// 1 pu, angles within ±25 mrad, slack angle pinned at zero. The regime
/// where Jacobian validation sweeps should probe.
pub fn random_state<R: Rng + ?Sized>(model: &GridModel, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let n = model.n();
    let mut vm = vec![0.0; n];
    let mut va = vec![0.0; n];
    for i in 0..n {
        vm[i] = 1.0 + 0.05 * (rng.gen::<f64>() - 0.5);
        va[i] = 0.05 * (rng.gen::<f64>() - 0.5);
    }
    va[model.slack] = 0.0;
    (vm, va)
}

/// Largest deviation between the analytic Jacobian and a central finite
/// difference at (vm, va), over every measurement row and state coordinate,
/// relative to each row's largest derivative (floored at 1).
pub fn jacobian_fd_max_error(
    plan: &MeasurementPlan,
    model: &GridModel,
    vm: &[f64],
    va: &[f64],
) -> f64 {
    let idx = StateIndexer::new(model);
    let h = 1e-6;
    let x0 = idx.pack(vm, va);
    let mut vmb = vm.to_vec();
    let mut vab = va.to_vec();
    let mut row = Vec::new();
    let mut worst = 0.0_f64;
    for def in &plan.defs {
        jacobian_row(vm, va, def, model, &idx, &mut row);
        let mut dense = vec![0.0; idx.n_state()];
        for &(c, v) in &row {
            dense[c] = v;
        }
        let mut fd = vec![0.0; idx.n_state()];
        for c in 0..idx.n_state() {
            let mut xp = x0.clone();
            xp[c] += h;
            idx.unpack_into(&xp, &mut vmb, &mut vab);
            let fp = eval_h(&vmb, &vab, def, model);
            let mut xm = x0.clone();
            xm[c] -= h;
            idx.unpack_into(&xm, &mut vmb, &mut vab);
            let fm = eval_h(&vmb, &vab, def, model);
            fd[c] = (fp - fm) / (2.0 * h);
        }
        let scale = fd.iter().fold(1.0_f64, |a, &b| a.max(b.abs()));
        for c in 0..idx.n_state() {
            worst = worst.max((dense[c] - fd[c]).abs() / scale);
        }
    }
    worst
}

/// Additive Gaussian measurement noise: `value + σ·ξ`, ξ ~ N(0,1). A draw is
/// consumed even at σ = 0 so RNG streams advance identically in noiseless
/// validation runs.
pub fn apply_noise<R: Rng + ?Sized>(true_value: f64, sigma: f64, rng: &mut R) -> f64 {
    debug_assert!(sigma >= 0.0);
    let xi: f64 = StandardNormal.sample(rng);
    true_value + sigma * xi
}

// ---------------------------------------------------------------------------
// Plan construction
// ---------------------------------------------------------------------------

/// Build a measurement plan for the model under the feeder grouping rule.
///
/// `pmu_buses` are external bus ids (order matters for the reduced target:
/// the first four keep their μPMU injection pairs). The base-case power flow
/// is solved internally to size each meter's σ.
pub fn build_plan(
    model: &GridModel,
    pmu_buses: &[usize],
    target: GrlTarget,
    sigma_cfg: &SigmaConfig,
) -> Result<MeasurementPlan> {
    sigma_cfg.validate()?;
    let n = model.n();
    let mut is_pmu = vec![false; n];
    let mut pmu_int = Vec::with_capacity(pmu_buses.len());
    for &ext in pmu_buses {
        let i = model.int_index(ext).ok_or_else(|| {
            Error::InvalidArgument(format!("μPMU bus {ext} does not exist in the case"))
        })?;
        if is_pmu[i] {
            return Err(Error::InvalidArgument(format!(
                "μPMU bus {ext} listed twice"
            )));
        }
        is_pmu[i] = true;
        pmu_int.push(i);
    }

    let radial = radial_orientation(model)?;
    let base_state = ac_power_flow(model, &model.base_loads())?;
    let vm = base_state.vm_vec();
    let va = base_state.va_vec();

    // Flow-channel ownership per branch end.
    // claimed[g] lists (branch, at_from) channels whose P/Q pair belongs to
    // group g.
    let mut claimed: Vec<Vec<(usize, bool)>> = vec![Vec::new(); n];
    for (e, br) in model.branches.iter().enumerate() {
        if !br.in_service {
            continue;
        }
        match (is_pmu[br.from], is_pmu[br.to]) {
            (true, true) => {
                claimed[br.from].push((e, true));
                claimed[br.to].push((e, false));
            }
            (true, false) => {
                claimed[br.from].push((e, true));
                claimed[br.from].push((e, false));
            }
            (false, true) => {
                claimed[br.to].push((e, true));
                claimed[br.to].push((e, false));
            }
            (false, false) => {
                claimed[br.from].push((e, true));
                claimed[br.to].push((e, false));
            }
        }
    }

    let observed_for_inj = |bus: usize| -> Vec<usize> {
        if bus == model.slack {
            // The slack injection balances the entire feeder.
            model.load_buses()
        } else if model.buses[bus].load.norm() > 0.0 {
            vec![bus]
        } else {
            Vec::new()
        }
    };

    let mut defs: Vec<MeasurementDef> = Vec::new();
    let push = |kind: MeasKind,
                loc: MeasLocation,
                source: MeasSource,
                group_id: Option<usize>,
                observed: Vec<usize>,
                defs: &mut Vec<MeasurementDef>| {
        let probe = MeasurementDef {
            kind,
            loc,
            source,
            group_id,
            meter_sigma: 1.0,
            observed_loads: observed,
        };
        let base_val = eval_h(&vm, &va, &probe, model);
        let meter_sigma = sigma_cfg.sigma_for(source, base_val);
        defs.push(MeasurementDef {
            meter_sigma,
            ..probe
        });
    };

    // SCADA groups in bus order: claimed flow pairs, then the group's own
    // injection pair if the bus has no μPMU.
    for g in 0..n {
        let mut channels = claimed[g].clone();
        channels.sort_unstable_by_key(|&(e, at_from)| (e, !at_from));
        for (e, at_from) in channels {
            let observed = radial.downstream_loads[e].clone();
            push(
                MeasKind::FlowP,
                MeasLocation::Branch { idx: e, at_from },
                MeasSource::Scada,
                Some(g),
                observed.clone(),
                &mut defs,
            );
            push(
                MeasKind::FlowQ,
                MeasLocation::Branch { idx: e, at_from },
                MeasSource::Scada,
                Some(g),
                observed,
                &mut defs,
            );
        }
        if !is_pmu[g] {
            let observed = observed_for_inj(g);
            push(
                MeasKind::InjP,
                MeasLocation::Bus(g),
                MeasSource::Scada,
                Some(g),
                observed.clone(),
                &mut defs,
            );
            push(
                MeasKind::InjQ,
                MeasLocation::Bus(g),
                MeasSource::Scada,
                Some(g),
                observed,
                &mut defs,
            );
        }
    }

    // Synchronized channels fill the budget between the forced group
    // channels and the target count.
    let target_count = match target {
        GrlTarget::Grl3 => 3 * model.state_dim(),
        GrlTarget::GrlReduced => (3 * model.state_dim()).saturating_sub(15),
    };
    if target_count < defs.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "target of {target_count} measurements is below the {} forced group \
             channels plus the substation voltage",
            defs.len()
        )));
    }
    let mut budget = target_count - defs.len();

    // The substation voltage magnitude anchors the magnitude scale; every
    // plan carries it.
    push(
        MeasKind::Vmag,
        MeasLocation::Bus(model.slack),
        MeasSource::Pmu,
        None,
        Vec::new(),
        &mut defs,
    );
    budget -= 1;
    let mut vmag_at = vec![model.slack];

    // Only the full-redundancy plan streams μPMU injection pairs; the
    // reduced plan leaves its remaining deficit to synthetic injection
    // pairs (static model predictions placed by generate_synthetic), the
    // classical way a thin telemetry set is padded up to observability.
    let mut placement = pmu_int.iter();
    if target == GrlTarget::Grl3 {
        while budget >= 2 {
            let Some(&i) = placement.next() else { break };
            let observed = observed_for_inj(i);
            push(
                MeasKind::InjP,
                MeasLocation::Bus(i),
                MeasSource::Pmu,
                None,
                observed.clone(),
                &mut defs,
            );
            push(
                MeasKind::InjQ,
                MeasLocation::Bus(i),
                MeasSource::Pmu,
                None,
                observed,
                &mut defs,
            );
            budget -= 2;
        }
    }
    if budget % 2 == 1 {
        // An odd unit of budget takes a voltage channel: the μPMU's native
        // phasor magnitude at the next placement bus (falling back to any
        // placement bus without one).
        let extra = placement
            .by_ref()
            .copied()
            .chain(pmu_int.iter().copied())
            .find(|i| !vmag_at.contains(i))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "target of {target_count} measurements has odd parity and no \
                     placement bus is left to contribute a voltage channel"
                ))
            })?;
        push(
            MeasKind::Vmag,
            MeasLocation::Bus(extra),
            MeasSource::Pmu,
            None,
            Vec::new(),
            &mut defs,
        );
        vmag_at.push(extra);
        budget -= 1;
    }
    // Any even leftover is a synthetic-measurement deficit, filled later by
    // generate_synthetic against a base state.
    debug_assert_eq!(defs.len() + budget, target_count);

    let mut plan = MeasurementPlan {
        defs,
        n_state: model.state_dim(),
        n_groups: n,
        target_d: target_count,
        sigma_cfg: *sigma_cfg,
        group_defs: Vec::new(),
        instant_defs: Vec::new(),
    };
    plan.rebuild_index();
    check_observability(&plan, model)?;
    Ok(plan)
}

/// Verify the plan determines every state: d >= N, the flat-start gain matrix
/// admits a Cholesky factorization, and the smallest singular value of H
/// clears 1e-6. Errors name the least-covered buses.
pub fn check_observability(plan: &MeasurementPlan, model: &GridModel) -> Result<()> {
    let idx = StateIndexer::new(model);
    let nst = plan.n_state;
    if plan.defs.len() < nst {
        return Err(Error::Observability(format!(
            "plan has {} measurements for {} states",
            plan.defs.len(),
            nst
        )));
    }
    let mut vm = vec![1.0; model.n()];
    vm[model.slack] = model.slack_voltage();
    let va = vec![0.0; model.n()];

    let mut h = DMatrix::zeros(plan.defs.len(), nst);
    let mut row = Vec::new();
    for (r, def) in plan.defs.iter().enumerate() {
        jacobian_row(&vm, &va, def, model, &idx, &mut row);
        for &(c, v) in &row {
            h[(r, c)] = v;
        }
    }

    let sigma_min = h
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    if !(sigma_min > 1e-6) {
        // Name the buses whose columns carry the least signal.
        let mut norms: Vec<(f64, usize)> = (0..model.n())
            .map(|i| {
                let c = idx.mag_col(i);
                let mag_norm = h.column(c).norm();
                let ang_norm = idx
                    .ang_col(i)
                    .map(|c| h.column(c).norm())
                    .unwrap_or(f64::INFINITY);
                (mag_norm.min(ang_norm), i)
            })
            .collect();
        norms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let weak: Vec<String> = norms
            .iter()
            .take(3)
            .map(|&(_, i)| model.buses[i].id.to_string())
            .collect();
        return Err(Error::Observability(format!(
            "plan is numerically unobservable (σ_min = {sigma_min:.3e}); weakest coverage near buses {}",
            weak.join(", ")
        )));
    }

    // Gain-matrix positive definiteness with meter weights.
    let mut gain: DMatrix<f64> = DMatrix::zeros(nst, nst);
    for (r, def) in plan.defs.iter().enumerate() {
        let w = 1.0 / (def.meter_sigma * def.meter_sigma);
        let hr = h.row(r);
        for c1 in 0..nst {
            let v1 = hr[c1];
            if v1 == 0.0 {
                continue;
            }
            for c2 in c1..nst {
                gain[(c1, c2)] += w * v1 * hr[c2];
            }
        }
    }
    for c1 in 0..nst {
        for c2 in (c1 + 1)..nst {
            gain[(c2, c1)] = gain[(c1, c2)];
        }
    }
    if nalgebra::Cholesky::new(gain).is_none() {
        return Err(Error::Observability(
            "flat-start gain matrix is not positive definite".into(),
        ));
    }
    Ok(())
}

/// Fill a plan's deficit (target_d above the built count) with synthetic
/// injection pairs at the lowest-redundancy buses, valued from `base_state`.
///
/// Candidate buses are ranked by the minimum innovation index of their
/// incident measurements at a flat start — low II marks a region where the
/// estimate leans hardest on single measurements. Returns the samples for
/// the appended defs (empty when there is no deficit).
pub fn generate_synthetic(
    plan: &mut MeasurementPlan,
    base_state: &TrueState,
    model: &GridModel,
) -> Result<Vec<MeasurementSample>> {
    if plan.defs.len() >= plan.target_d {
        return Ok(Vec::new());
    }

    // Innovation indices at a flat start under meter weights.
    let idx = StateIndexer::new(model);
    let mut vm = vec![1.0; model.n()];
    vm[model.slack] = model.slack_voltage();
    let va = vec![0.0; model.n()];
    let mut h = DMatrix::zeros(plan.defs.len(), plan.n_state);
    let mut row = Vec::new();
    for (r, def) in plan.defs.iter().enumerate() {
        jacobian_row(&vm, &va, def, model, &idx, &mut row);
        for &(c, v) in &row {
            h[(r, c)] = v;
        }
    }
    let weights: Vec<f64> = plan
        .defs
        .iter()
        .map(|d| 1.0 / (d.meter_sigma * d.meter_sigma))
        .collect();
    let mut gain: DMatrix<f64> = DMatrix::zeros(plan.n_state, plan.n_state);
    for r in 0..plan.defs.len() {
        let hr = h.row(r);
        for c1 in 0..plan.n_state {
            if hr[c1] == 0.0 {
                continue;
            }
            for c2 in 0..plan.n_state {
                gain[(c1, c2)] += weights[r] * hr[c1] * hr[c2];
            }
        }
    }
    let ginv = nalgebra::Cholesky::new(gain)
        .ok_or_else(|| Error::Observability("gain matrix singular in synthetic ranking".into()))?
        .inverse();
    let min_ii_at = |bus: usize| -> f64 {
        let mut min_ii = f64::INFINITY;
        for (r, def) in plan.defs.iter().enumerate() {
            let touches = match def.loc {
                MeasLocation::Bus(b) => b == bus,
                MeasLocation::Branch { idx: e, .. } => {
                    model.branches[e].from == bus || model.branches[e].to == bus
                }
            };
            if !touches {
                continue;
            }
            let hr = h.row(r).transpose();
            let k = (weights[r] * (hr.transpose() * &ginv * &hr)[(0, 0)]).clamp(0.0, 1.0);
            let ii = if k >= 1.0 - 1e-12 {
                0.0
            } else if k <= 0.0 {
                f64::INFINITY
            } else {
                ((1.0 - k) / k).sqrt()
            };
            min_ii = min_ii.min(ii);
        }
        if min_ii.is_infinite() {
            // Uncovered bus: most deficient of all.
            -1.0
        } else {
            min_ii
        }
    };

    let mut ranked: Vec<(f64, usize)> = (0..model.n())
        .filter(|&b| b != model.slack)
        .map(|b| (min_ii_at(b), b))
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    let has_synth = |plan: &MeasurementPlan, bus: usize| {
        plan.defs
            .iter()
            .any(|d| d.source == MeasSource::Synthetic && d.loc == MeasLocation::Bus(bus))
    };

    let bvm = base_state.vm_vec();
    let bva = base_state.va_vec();
    let mut samples = Vec::new();
    let mut rank_iter = ranked.iter();
    while plan.defs.len() < plan.target_d {
        let &(_, bus) = rank_iter.next().ok_or_else(|| {
            Error::InvalidArgument("synthetic generation exhausted candidate buses".into())
        })?;
        if has_synth(plan, bus) {
            continue;
        }
        let observed = if model.buses[bus].load.norm() > 0.0 {
            vec![bus]
        } else {
            Vec::new()
        };
        for kind in [MeasKind::InjP, MeasKind::InjQ] {
            let probe = MeasurementDef {
                kind,
                loc: MeasLocation::Bus(bus),
                source: MeasSource::Synthetic,
                group_id: None,
                meter_sigma: 1.0,
                observed_loads: observed.clone(),
            };
            let value = eval_h(&bvm, &bva, &probe, model);
            let meter_sigma = plan.sigma_cfg.sigma_for(MeasSource::Synthetic, value);
            let def = MeasurementDef {
                meter_sigma,
                ..probe
            };
            samples.push(MeasurementSample {
                def_index: plan.defs.len(),
                value,
                acquired_tick: base_state.timestamp,
                variance_state: meter_sigma * meter_sigma,
            });
            plan.defs.push(def);
        }
    }
    plan.rebuild_index();
    check_observability(plan, model)?;
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Plan CSV export/import
// ---------------------------------------------------------------------------

fn location_str(loc: &MeasLocation, model: &GridModel) -> String {
    match *loc {
        MeasLocation::Bus(i) => format!("bus{}", model.buses[i].id),
        MeasLocation::Branch { idx, at_from } => {
            let br = &model.branches[idx];
            let (a, b) = if at_from {
                (br.from, br.to)
            } else {
                (br.to, br.from)
            };
            format!("{}->{}", model.buses[a].id, model.buses[b].id)
        }
    }
}

/// Serialize a plan in the documented CSV schema:
/// `def_index,kind,location,source,group_id,meter_sigma`.
pub fn plan_to_csv(plan: &MeasurementPlan, model: &GridModel) -> String {
    let mut out = String::from("def_index,kind,location,source,group_id,meter_sigma\n");
    for (i, def) in plan.defs.iter().enumerate() {
        let group = def
            .group_id
            .map(|g| model.buses[g].id.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i,
            def.kind.as_str(),
            location_str(&def.loc, model),
            def.source.as_str(),
            group,
            def.meter_sigma
        ));
    }
    out
}

/// Parse a plan from the CSV schema. `observed_loads` is reconstructed from
/// the model's radial orientation, so a round trip reproduces the plan
/// exactly.
pub fn plan_from_csv(text: &str, model: &GridModel) -> Result<MeasurementPlan> {
    let radial = radial_orientation(model)?;
    let mut defs = Vec::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "def_index,kind,location,source,group_id,meter_sigma" => {}
        _ => {
            return Err(Error::InvalidArgument(
                "plan CSV: missing or malformed header".into(),
            ))
        }
    }
    for (lineno, line) in lines {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "plan CSV line {line_no}: expected 6 columns"
            )));
        }
        let want_idx: usize = cols[0].parse().map_err(|_| {
            Error::InvalidArgument(format!("plan CSV line {line_no}: bad def_index"))
        })?;
        if want_idx != defs.len() {
            return Err(Error::InvalidArgument(format!(
                "plan CSV line {line_no}: def_index out of order"
            )));
        }
        let kind = MeasKind::parse(cols[1]).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "plan CSV line {line_no}: unknown kind '{}'",
                cols[1]
            ))
        })?;
        let source = MeasSource::parse(cols[3]).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "plan CSV line {line_no}: unknown source '{}'",
                cols[3]
            ))
        })?;
        let loc = parse_location(cols[2], model).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "plan CSV line {line_no}: unresolvable location '{}'",
                cols[2]
            ))
        })?;
        let group_id = if cols[4].is_empty() {
            None
        } else {
            let ext: usize = cols[4].parse().map_err(|_| {
                Error::InvalidArgument(format!("plan CSV line {line_no}: bad group_id"))
            })?;
            Some(model.int_index(ext).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "plan CSV line {line_no}: group bus {ext} not in case"
                ))
            })?)
        };
        let meter_sigma: f64 = cols[5].parse().map_err(|_| {
            Error::InvalidArgument(format!("plan CSV line {line_no}: bad meter_sigma"))
        })?;
        if !(meter_sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "plan CSV line {line_no}: meter_sigma must be > 0"
            )));
        }
        let observed_loads = match loc {
            MeasLocation::Bus(b) if matches!(kind, MeasKind::InjP | MeasKind::InjQ) => {
                if b == model.slack {
                    model.load_buses()
                } else if model.buses[b].load.norm() > 0.0 {
                    vec![b]
                } else {
                    Vec::new()
                }
            }
            MeasLocation::Branch { idx, .. } => radial.downstream_loads[idx].clone(),
            _ => Vec::new(),
        };
        defs.push(MeasurementDef {
            kind,
            loc,
            source,
            group_id,
            meter_sigma,
            observed_loads,
        });
    }

    MeasurementPlan::from_defs(defs, model, SigmaConfig::default())
}

fn parse_location(s: &str, model: &GridModel) -> Option<MeasLocation> {
    if let Some(ext) = s.strip_prefix("bus") {
        let ext: usize = ext.parse().ok()?;
        return Some(MeasLocation::Bus(model.int_index(ext)?));
    }
    let (a, b) = s.split_once("->")?;
    let a = model.int_index(a.parse().ok()?)?;
    let b = model.int_index(b.parse().ok()?)?;
    for (e, br) in model.branches.iter().enumerate() {
        if br.from == a && br.to == b {
            return Some(MeasLocation::Branch {
                idx: e,
                at_from: true,
            });
        }
        if br.from == b && br.to == a {
            return Some(MeasLocation::Branch {
                idx: e,
                at_from: false,
            });
        }
    }
    None
}
