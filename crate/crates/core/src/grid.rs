//! Network model: case parsing, admittance-matrix assembly, Newton–Raphson
//! AC power flow, and radial-feeder orientation utilities.
//!
//! The power flow is the ground-truth generator for the simulation: loads in,
//! complex bus voltages out, solved to 1e-8 pu mismatch. Two entry points
//! exist — [`ac_power_flow`] (cold start, plain Newton, used by tests and
//! one-shot callers) and [`PowerFlowSolver`] (owned workspace, warm starts and
//! a reused Jacobian factorization, used by the timeline which solves the
//! same slowly-drifting system hundreds of thousands of times per run).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::collections::HashMap;

use crate::error::{Error, Result};

/// Newton mismatch tolerance, pu.
pub const PF_TOL: f64 = 1e-8;
/// Maximum full Newton iterations before declaring divergence.
pub const PF_MAX_ITER: usize = 30;
/// Chord (reused-factorization) steps allowed before a Jacobian rebuild.
const CHORD_MAX: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusType {
    Slack,
    Pq,
}

#[derive(Debug, Clone)]
pub struct Bus {
    /// External (file) id, 1-based by convention.
    pub id: usize,
    pub bus_type: BusType,
    /// Base-case complex load, pu on the system base.
    pub load: Complex64,
    /// Initial voltage phasor (slack setpoint; flat-start value elsewhere).
    pub voltage: Complex64,
}

#[derive(Debug, Clone)]
pub struct Branch {
    /// Internal from-bus index.
    pub from: usize,
    /// Internal to-bus index.
    pub to: usize,
    /// Series impedance, pu.
    pub z: Complex64,
    /// Total line-charging susceptance, pu (split half per end).
    pub b_sh: f64,
    pub in_service: bool,
}

impl Branch {
    /// Series admittance 1/z.
    pub fn y_series(&self) -> Complex64 {
        Complex64::new(1.0, 0.0) / self.z
    }
}

/// The immutable physical network. Safe to share across scenario threads;
/// solvers keep their own workspaces.
#[derive(Debug, Clone)]
pub struct GridModel {
    pub base_mva: f64,
    /// Buses in internal order (sorted ascending by external id).
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    /// Internal index of the slack bus.
    pub slack: usize,
    /// Dense complex admittance matrix.
    pub ybus: DMatrix<Complex64>,
    /// Sparse row view of `ybus` (index, value) including the diagonal —
    /// the hot loops iterate neighbors, not the dense matrix.
    y_rows: Vec<Vec<(usize, Complex64)>>,
    ext2int: HashMap<usize, usize>,
}

impl GridModel {
    pub fn n(&self) -> usize {
        self.buses.len()
    }

    /// State dimension N = 2n - 1 (all magnitudes, non-slack angles).
    pub fn state_dim(&self) -> usize {
        2 * self.buses.len() - 1
    }

    pub fn int_index(&self, external_id: usize) -> Option<usize> {
        self.ext2int.get(&external_id).copied()
    }

    pub fn slack_voltage(&self) -> f64 {
        self.buses[self.slack].voltage.norm()
    }

    /// Rebuild with a different slack setpoint (before sharing the model).
    pub fn with_slack_voltage(mut self, v: f64) -> Self {
        self.buses[self.slack].voltage = Complex64::new(v, 0.0);
        self
    }

    /// Base-case loads as a per-bus vector, pu.
    pub fn base_loads(&self) -> Vec<Complex64> {
        self.buses.iter().map(|b| b.load).collect()
    }

    /// Internal indices of buses with nonzero base load.
    pub fn load_buses(&self) -> Vec<usize> {
        self.buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.load.norm() > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn y_row(&self, i: usize) -> &[(usize, Complex64)] {
        &self.y_rows[i]
    }
}

/// Solved operating point: complex voltage per bus plus the simulation tick
/// it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueState {
    pub voltages: Vec<Complex64>,
    pub timestamp: u64,
}

impl TrueState {
    pub fn vm(&self, i: usize) -> f64 {
        self.voltages[i].norm()
    }

    pub fn va(&self, i: usize) -> f64 {
        self.voltages[i].arg()
    }

    /// Fill polar coordinate buffers (magnitude, angle) for all buses.
    pub fn polar_into(&self, vm: &mut [f64], va: &mut [f64]) {
        for (i, v) in self.voltages.iter().enumerate() {
            vm[i] = v.norm();
            va[i] = v.arg();
        }
    }

    pub fn vm_vec(&self) -> Vec<f64> {
        self.voltages.iter().map(|v| v.norm()).collect()
    }

    pub fn va_vec(&self) -> Vec<f64> {
        self.voltages.iter().map(|v| v.arg()).collect()
    }
}

// ---------------------------------------------------------------------------
// Case parsing
// ---------------------------------------------------------------------------

/// Parse the documented plain-text case format:
///
/// ```text
/// BASE_MVA <mva>
/// BUS <id> <type> <Pd_MW> <Qd_MVAr>      # type: 3 = slack, 1 = PQ
/// BRANCH <from> <to> <r_pu> <x_pu> <b_pu> <status>
/// ```
///
/// Whitespace-delimited, `#` starts a comment. Loads are converted to per
/// unit internally; buses are renumbered to a dense internal index sorted by
/// external id.
pub fn parse_case(text: &str) -> Result<GridModel> {
    struct RawBus {
        line: usize,
        id: usize,
        bus_type: BusType,
        p_mw: f64,
        q_mvar: f64,
    }
    struct RawBranch {
        line: usize,
        from: usize,
        to: usize,
        r: f64,
        x: f64,
        b: f64,
        status: u8,
    }

    let err = |line: usize, msg: String| Error::CaseParse { line, msg };
    let mut base: Option<(usize, f64)> = None;
    let mut raw_buses: Vec<RawBus> = Vec::new();
    let mut raw_branches: Vec<RawBranch> = Vec::new();

    for (lineno, raw_line) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tok: Vec<&str> = content.split_whitespace().collect();
        match tok[0] {
            "BASE_MVA" => {
                if tok.len() != 2 {
                    return Err(err(line, "BASE_MVA expects one value".into()));
                }
                if base.is_some() {
                    return Err(err(line, "duplicate BASE_MVA".into()));
                }
                let v: f64 = tok[1]
                    .parse()
                    .map_err(|_| err(line, format!("bad BASE_MVA value '{}'", tok[1])))?;
                if !(v > 0.0) {
                    return Err(err(line, format!("BASE_MVA must be > 0, got {v}")));
                }
                base = Some((line, v));
            }
            "BUS" => {
                if tok.len() != 5 {
                    return Err(err(line, "BUS expects: id type Pd Qd".into()));
                }
                let id: usize = tok[1]
                    .parse()
                    .map_err(|_| err(line, format!("bad bus id '{}'", tok[1])))?;
                let bus_type = match tok[2] {
                    "3" => BusType::Slack,
                    "1" => BusType::Pq,
                    other => {
                        return Err(err(
                            line,
                            format!("unsupported bus type '{other}' (3 = slack, 1 = PQ)"),
                        ))
                    }
                };
                let p_mw: f64 = tok[3]
                    .parse()
                    .map_err(|_| err(line, format!("bad Pd '{}'", tok[3])))?;
                let q_mvar: f64 = tok[4]
                    .parse()
                    .map_err(|_| err(line, format!("bad Qd '{}'", tok[4])))?;
                raw_buses.push(RawBus {
                    line,
                    id,
                    bus_type,
                    p_mw,
                    q_mvar,
                });
            }
            "BRANCH" => {
                if tok.len() != 7 {
                    return Err(err(line, "BRANCH expects: from to r x b status".into()));
                }
                let from: usize = tok[1]
                    .parse()
                    .map_err(|_| err(line, format!("bad from-bus '{}'", tok[1])))?;
                let to: usize = tok[2]
                    .parse()
                    .map_err(|_| err(line, format!("bad to-bus '{}'", tok[2])))?;
                let r: f64 = tok[3]
                    .parse()
                    .map_err(|_| err(line, format!("bad r '{}'", tok[3])))?;
                let x: f64 = tok[4]
                    .parse()
                    .map_err(|_| err(line, format!("bad x '{}'", tok[4])))?;
                let b: f64 = tok[5]
                    .parse()
                    .map_err(|_| err(line, format!("bad b '{}'", tok[5])))?;
                let status: u8 = match tok[6] {
                    "0" => 0,
                    "1" => 1,
                    other => return Err(err(line, format!("bad status '{other}' (0 or 1)"))),
                };
                if from == to {
                    return Err(err(line, format!("branch connects bus {from} to itself")));
                }
                raw_branches.push(RawBranch {
                    line,
                    from,
                    to,
                    r,
                    x,
                    b,
                    status,
                });
            }
            other => return Err(err(line, format!("unknown record '{other}'"))),
        }
    }

    let (_, base_mva) = base.ok_or_else(|| err(0, "missing BASE_MVA record".into()))?;
    if raw_buses.is_empty() {
        return Err(err(0, "no BUS records".into()));
    }

    // Internal numbering: sort by external id, reject duplicates.
    raw_buses.sort_by_key(|b| b.id);
    let mut ext2int = HashMap::new();
    for (i, rb) in raw_buses.iter().enumerate() {
        if ext2int.insert(rb.id, i).is_some() {
            return Err(err(rb.line, format!("duplicate bus id {}", rb.id)));
        }
    }

    let slack_positions: Vec<usize> = raw_buses
        .iter()
        .enumerate()
        .filter(|(_, b)| b.bus_type == BusType::Slack)
        .map(|(i, _)| i)
        .collect();
    if slack_positions.len() != 1 {
        let line = raw_buses
            .get(*slack_positions.last().unwrap_or(&0))
            .map(|b| b.line)
            .unwrap_or(0);
        return Err(err(
            line,
            format!(
                "expected exactly one slack bus, found {}",
                slack_positions.len()
            ),
        ));
    }
    let slack = slack_positions[0];

    let buses: Vec<Bus> = raw_buses
        .iter()
        .map(|rb| Bus {
            id: rb.id,
            bus_type: rb.bus_type,
            load: Complex64::new(rb.p_mw / base_mva, rb.q_mvar / base_mva),
            voltage: Complex64::new(1.0, 0.0),
        })
        .collect();

    let mut branches = Vec::with_capacity(raw_branches.len());
    for rb in &raw_branches {
        let from = *ext2int.get(&rb.from).ok_or_else(|| {
            err(
                rb.line,
                format!("branch references undeclared bus {}", rb.from),
            )
        })?;
        let to = *ext2int.get(&rb.to).ok_or_else(|| {
            err(
                rb.line,
                format!("branch references undeclared bus {}", rb.to),
            )
        })?;
        let z = Complex64::new(rb.r, rb.x);
        if rb.status == 1 && z.norm() < 1e-12 {
            return Err(err(
                rb.line,
                format!("in-service branch {}-{} has zero impedance", rb.from, rb.to),
            ));
        }
        branches.push(Branch {
            from,
            to,
            z,
            b_sh: rb.b,
            in_service: rb.status == 1,
        });
    }

    // Connectivity: every bus reachable from the slack through in-service
    // branches (isolated buses make the power flow singular).
    let n = buses.len();
    let mut adj = vec![Vec::new(); n];
    for br in branches.iter().filter(|b| b.in_service) {
        adj[br.from].push(br.to);
        adj[br.to].push(br.from);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![slack];
    seen[slack] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(err(
            raw_buses[i].line,
            format!("bus {} is isolated from the slack", buses[i].id),
        ));
    }

    let ybus = build_ybus(n, &branches)?;
    let y_rows = sparse_rows(&ybus);

    Ok(GridModel {
        base_mva,
        buses,
        branches,
        slack,
        ybus,
        y_rows,
        ext2int,
    })
}

/// Assemble the dense bus admittance matrix from in-service branches.
pub fn build_ybus(n: usize, branches: &[Branch]) -> Result<DMatrix<Complex64>> {
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for br in branches.iter().filter(|b| b.in_service) {
        if br.z.norm() < 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "zero-impedance in-service branch {}-{}",
                br.from, br.to
            )));
        }
        let ys = br.y_series();
        let shunt = Complex64::new(0.0, br.b_sh / 2.0);
        y[(br.from, br.from)] += ys + shunt;
        y[(br.to, br.to)] += ys + shunt;
        y[(br.from, br.to)] -= ys;
        y[(br.to, br.from)] -= ys;
    }
    Ok(y)
}

fn sparse_rows(y: &DMatrix<Complex64>) -> Vec<Vec<(usize, Complex64)>> {
    let n = y.nrows();
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&k| y[(i, k)].norm() > 0.0)
                .map(|k| (k, y[(i, k)]))
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Newton–Raphson power flow
// ---------------------------------------------------------------------------

/// Net computed injections at every bus for the given polar state.
fn calc_injections(model: &GridModel, vm: &[f64], va: &[f64], p: &mut [f64], q: &mut [f64]) {
    for i in 0..model.n() {
        let mut pi = 0.0;
        let mut qi = 0.0;
        for &(k, yik) in model.y_row(i) {
            let (g, b) = (yik.re, yik.im);
            let th = va[i] - va[k];
            let (s, c) = th.sin_cos();
            pi += vm[k] * (g * c + b * s);
            qi += vm[k] * (g * s - b * c);
        }
        p[i] = vm[i] * pi;
        q[i] = vm[i] * qi;
    }
}

/// Solve the AC power flow from a flat start with plain Newton iterations.
///
/// `loads` is the per-bus complex demand in pu (the slack entry is ignored —
/// the slack bus balances the system). Returns the solved state with
/// timestamp 0; callers stamp their own tick.
pub fn ac_power_flow(model: &GridModel, loads: &[Complex64]) -> Result<TrueState> {
    ac_power_flow_traced(model, loads).map(|(s, _)| s)
}

/// As [`ac_power_flow`] but also returns the per-iteration max-mismatch
/// trace (used to verify Newton's terminal convergence behavior).
pub fn ac_power_flow_traced(
    model: &GridModel,
    loads: &[Complex64],
) -> Result<(TrueState, Vec<f64>)> {
    let mut solver = PowerFlowSolver::new(model);
    solver.set_trace(true);
    let state = solver.solve_cold(loads)?;
    let trace = solver.take_trace();
    Ok((state, trace))
}

/// Reusable Newton power-flow solver with warm starts and a chord-iteration
/// fast path that reuses the last LU factorization while it still contracts.
///
/// The postcondition is identical on every path: max |mismatch| <= 1e-8 pu,
/// verified on the actual mismatch vector before returning.
pub struct PowerFlowSolver<'a> {
    model: &'a GridModel,
    /// PQ-bus positions: bus index -> unknown slot (None for the slack).
    pq_index: Vec<Option<usize>>,
    /// Inverse map: unknown slot -> bus index.
    pq_buses: Vec<usize>,
    vm: Vec<f64>,
    va: Vec<f64>,
    pcalc: Vec<f64>,
    qcalc: Vec<f64>,
    spec_p: Vec<f64>,
    spec_q: Vec<f64>,
    mism: DVector<f64>,
    jac: DMatrix<f64>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    refresh_next: bool,
    trace: Option<Vec<f64>>,
    /// Cumulative counters, exposed for performance diagnostics.
    pub full_steps: u64,
    pub chord_steps: u64,
}

impl<'a> PowerFlowSolver<'a> {
    pub fn new(model: &'a GridModel) -> Self {
        let n = model.n();
        let mut pq_index = vec![None; n];
        let mut pq_buses = Vec::with_capacity(n - 1);
        for i in 0..n {
            if i != model.slack {
                pq_index[i] = Some(pq_buses.len());
                pq_buses.push(i);
            }
        }
        let m = pq_buses.len();
        let mut s = PowerFlowSolver {
            model,
            pq_index,
            pq_buses,
            vm: vec![1.0; n],
            va: vec![0.0; n],
            pcalc: vec![0.0; n],
            qcalc: vec![0.0; n],
            spec_p: vec![0.0; n],
            spec_q: vec![0.0; n],
            mism: DVector::zeros(2 * m),
            jac: DMatrix::zeros(2 * m, 2 * m),
            lu: None,
            refresh_next: false,
            trace: None,
            full_steps: 0,
            chord_steps: 0,
        };
        s.reset();
        s
    }

    fn set_trace(&mut self, on: bool) {
        self.trace = if on { Some(Vec::new()) } else { None };
    }

    fn take_trace(&mut self) -> Vec<f64> {
        self.trace.take().unwrap_or_default()
    }

    /// Reset the iterate to a flat start and drop the cached factorization.
    pub fn reset(&mut self) {
        let n = self.model.n();
        for i in 0..n {
            self.vm[i] = 1.0;
            self.va[i] = 0.0;
        }
        self.vm[self.model.slack] = self.model.slack_voltage();
        self.lu = None;
        self.refresh_next = false;
    }

    /// Solve from a flat start with plain Newton (no factorization reuse).
    pub fn solve_cold(&mut self, loads: &[Complex64]) -> Result<TrueState> {
        self.reset();
        let out = self.solve_inner(loads, false);
        if out.is_err() {
            self.reset();
        }
        out
    }

    /// Solve warm-started from the previous solution, reusing the cached
    /// Jacobian factorization while it keeps contracting the mismatch.
    pub fn solve(&mut self, loads: &[Complex64]) -> Result<TrueState> {
        let out = self.solve_inner(loads, true);
        if out.is_err() {
            // Leave the solver in a clean state for the next call.
            self.reset();
        }
        out
    }

    fn solve_inner(&mut self, loads: &[Complex64], allow_chord: bool) -> Result<TrueState> {
        let n = self.model.n();
        if loads.len() != n {
            return Err(Error::InvalidArgument(format!(
                "loads vector has length {}, model has {} buses",
                loads.len(),
                n
            )));
        }
        for i in 0..n {
            // Net injection specification: PQ buses consume their load.
            self.spec_p[i] = -loads[i].re;
            self.spec_q[i] = -loads[i].im;
        }

        let m = self.pq_buses.len();
        let mut full_used = 0usize;
        let mut chord_used = 0usize;
        let mut refresh = !allow_chord || self.lu.is_none() || self.refresh_next;

        loop {
            calc_injections(
                self.model,
                &self.vm,
                &self.va,
                &mut self.pcalc,
                &mut self.qcalc,
            );
            let mut worst: f64 = 0.0;
            for (r, &i) in self.pq_buses.iter().enumerate() {
                let dp = self.spec_p[i] - self.pcalc[i];
                let dq = self.spec_q[i] - self.qcalc[i];
                self.mism[r] = dp;
                self.mism[m + r] = dq;
                worst = worst.max(dp.abs()).max(dq.abs());
            }
            if let Some(t) = self.trace.as_mut() {
                t.push(worst);
            }
            if !worst.is_finite() {
                return Err(Error::PowerFlowDiverged {
                    iterations: full_used + chord_used,
                    mismatch: worst,
                });
            }
            if worst <= PF_TOL {
                // Schedule a Jacobian refresh if the chord path was slow.
                self.refresh_next = chord_used > 3;
                return Ok(TrueState {
                    voltages: (0..n)
                        .map(|i| Complex64::from_polar(self.vm[i], self.va[i]))
                        .collect(),
                    timestamp: 0,
                });
            }
            if full_used >= PF_MAX_ITER {
                return Err(Error::PowerFlowDiverged {
                    iterations: full_used + chord_used,
                    mismatch: worst,
                });
            }

            let use_chord = allow_chord && !refresh && self.lu.is_some() && chord_used < CHORD_MAX;
            if !use_chord {
                self.build_jacobian();
                self.lu = Some(nalgebra::LU::new(self.jac.clone()));
                full_used += 1;
                self.full_steps += 1;
                refresh = false;
            } else {
                chord_used += 1;
                self.chord_steps += 1;
                if chord_used == CHORD_MAX {
                    // Next pass rebuilds if we are still not converged.
                    refresh = true;
                }
            }

            let lu = self.lu.as_ref().expect("factorization present");
            if !lu.solve_mut(&mut self.mism) {
                return Err(Error::Observability(
                    "power-flow Jacobian is singular".into(),
                ));
            }
            for (r, &i) in self.pq_buses.iter().enumerate() {
                self.va[i] += self.mism[r];
                self.vm[i] += self.mism[m + r];
                if self.vm[i] <= 0.0 {
                    return Err(Error::PowerFlowDiverged {
                        iterations: full_used + chord_used,
                        mismatch: f64::INFINITY,
                    });
                }
            }
        }
    }

    fn build_jacobian(&mut self) {
        let m = self.pq_buses.len();
        self.jac.fill(0.0);
        for (r, &i) in self.pq_buses.iter().enumerate() {
            let vi = self.vm[i];
            for &(k, yik) in self.model.y_row(i) {
                let (g, b) = (yik.re, yik.im);
                if k == i {
                    // Diagonal blocks in terms of computed P_i, Q_i.
                    self.jac[(r, r)] = -self.qcalc[i] - b * vi * vi;
                    self.jac[(r, m + r)] = self.pcalc[i] / vi + g * vi;
                    self.jac[(m + r, r)] = self.pcalc[i] - g * vi * vi;
                    self.jac[(m + r, m + r)] = self.qcalc[i] / vi - b * vi;
                    continue;
                }
                let th = self.va[i] - self.va[k];
                let (s, c) = th.sin_cos();
                let vk = self.vm[k];
                if let Some(ck) = self.pq_index[k] {
                    self.jac[(r, ck)] = vi * vk * (g * s - b * c);
                    self.jac[(r, m + ck)] = vi * (g * c + b * s);
                    self.jac[(m + r, ck)] = -vi * vk * (g * c + b * s);
                    self.jac[(m + r, m + ck)] = vi * (g * s - b * c);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Radial orientation
// ---------------------------------------------------------------------------

/// Tree structure of a radial feeder rooted at the slack bus, plus the
/// per-branch downstream load sets used to map load staleness onto flow
/// measurements.
#[derive(Debug, Clone)]
pub struct RadialInfo {
    /// Parent bus of each bus (None at the slack).
    pub parent: Vec<Option<usize>>,
    /// Branch index connecting each bus to its parent.
    pub parent_branch: Vec<Option<usize>>,
    /// Buses in BFS order from the slack.
    pub bfs_order: Vec<usize>,
    /// For each branch: the endpoint on the far side from the slack.
    pub child_end: Vec<Option<usize>>,
    /// For each branch: internal indices of load buses at or below its child
    /// end (ascending). Empty for out-of-service branches.
    pub downstream_loads: Vec<Vec<usize>>,
}

/// Orient the feeder as a tree rooted at the slack. Errors if the in-service
/// network is meshed (contains a cycle) or disconnected.
pub fn radial_orientation(model: &GridModel) -> Result<RadialInfo> {
    let n = model.n();
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n]; // (neighbor, branch idx)
    for (e, br) in model.branches.iter().enumerate() {
        if br.in_service {
            adj[br.from].push((br.to, e));
            adj[br.to].push((br.from, e));
        }
    }

    let mut parent = vec![None; n];
    let mut parent_branch = vec![None; n];
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(model.slack);
    seen[model.slack] = true;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &(v, e) in &adj[u] {
            if Some(e) == parent_branch[u] {
                continue;
            }
            if seen[v] {
                return Err(Error::Topology(format!(
                    "network is meshed: branch {}-{} closes a loop",
                    model.buses[model.branches[e].from].id, model.buses[model.branches[e].to].id
                )));
            }
            seen[v] = true;
            parent[v] = Some(u);
            parent_branch[v] = Some(e);
            queue.push_back(v);
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Topology(format!(
            "bus {} is not connected to the slack",
            model.buses[i].id
        )));
    }

    // Subtree load sets, accumulated leaf-to-root.
    let mut subtree: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &u in order.iter().rev() {
        let mut acc: Vec<usize> = Vec::new();
        if model.buses[u].load.norm() > 0.0 {
            acc.push(u);
        }
        for &(v, _) in &adj[u] {
            if parent[v] == Some(u) {
                acc.extend_from_slice(&subtree[v]);
            }
        }
        acc.sort_unstable();
        subtree[u] = acc;
    }

    let mut child_end = vec![None; model.branches.len()];
    let mut downstream = vec![Vec::new(); model.branches.len()];
    for v in 0..n {
        if let Some(e) = parent_branch[v] {
            child_end[e] = Some(v);
            downstream[e] = subtree[v].clone();
        }
    }

    Ok(RadialInfo {
        parent,
        parent_branch,
        bfs_order: order,
        child_end,
        downstream_loads: downstream,
    })
}
