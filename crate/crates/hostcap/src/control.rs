//! Droop-based voltage control: Volt-Var reactive power, adaptive power
//! factor, ESS active power, and the fixed-point iteration that couples the
//! droop laws with the load flow.
//!
//! Sign conventions, stated once: reactive power absorbed by an inverter
//! and active power charged into storage are negative injections. Neither
//! inverter law curtails active PV output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{BusId, Network};
use crate::powerflow::{solve_with_ybus, PowerFlowError, PowerFlowSolution, SolverSettings};
use crate::scenarios::{base_injections, LoadGenProfile, PvScenario};

/// Droop curve corners in p.u. voltage, `v1 < v2 < v3 < v4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroopBreakpoints {
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    pub v4: f64,
}

impl Default for DroopBreakpoints {
    fn default() -> Self {
        DroopBreakpoints {
            v1: 0.95,
            v2: 0.97,
            v3: 1.03,
            v4: 1.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    None,
    VoltVar,
    PowerFactor,
    Ess,
}

/// One storage unit: bus and power rating. State of charge is not
/// simulated; the rating alone bounds output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EssUnit {
    pub bus: BusId,
    pub p_max_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub mode: ControlMode,
    pub breakpoints: DroopBreakpoints,
    /// Minimum power factor of the adaptive-PF law.
    pub c1: f64,
    pub ess_units: Vec<EssUnit>,
    /// Fixed-point convergence threshold on the max voltage change, p.u.
    pub epsilon_v: f64,
    pub max_control_iters: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            mode: ControlMode::None,
            breakpoints: DroopBreakpoints::default(),
            c1: 0.95,
            ess_units: Vec::new(),
            epsilon_v: 0.005,
            max_control_iters: 30,
        }
    }
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("PV output {p_pv} MW exceeds inverter rating {s_max} MVA")]
    RatingExceeded { p_pv: f64, s_max: f64 },
    #[error("iterate_control called without an active control mode")]
    NoControlMode,
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
}

/// Volt-Var droop: reactive injection as a piecewise-linear function of the
/// local voltage, saturating at the inverter headroom
/// `Q_max = sqrt(s_max^2 - p_pv^2)`. Positive below `v1` (support),
/// negative above `v4` (absorb), dead band between `v2` and `v3`.
pub fn volt_var_q(
    v: f64,
    p_pv_mw: f64,
    s_max_mva: f64,
    bp: &DroopBreakpoints,
) -> Result<f64, ControlError> {
    if p_pv_mw > s_max_mva {
        return Err(ControlError::RatingExceeded {
            p_pv: p_pv_mw,
            s_max: s_max_mva,
        });
    }
    let q_max = (s_max_mva * s_max_mva - p_pv_mw * p_pv_mw).max(0.0).sqrt();
    let q = if v <= bp.v1 {
        q_max
    } else if v <= bp.v2 {
        (v - bp.v2) / (bp.v1 - bp.v2) * q_max
    } else if v < bp.v3 {
        0.0
    } else if v < bp.v4 {
        -(v - bp.v3) / (bp.v4 - bp.v3) * q_max
    } else {
        -q_max
    };
    Ok(q)
}

/// Adaptive power-factor droop curve: unity at or below `v3`, ramping
/// linearly to `c1` at `v4`, constant beyond.
pub fn power_factor(v: f64, cfg: &ControlConfig) -> f64 {
    let bp = &cfg.breakpoints;
    if v <= bp.v3 {
        1.0
    } else if v < bp.v4 {
        cfg.c1 + (1.0 - cfg.c1) / (bp.v3 - bp.v4) * (v - bp.v4)
    } else {
        cfg.c1
    }
}

/// Reactive injection implied by the adaptive power factor at the given
/// active output: absorbing (negative) at high voltage, zero at unity PF.
pub fn pf_control_q(v: f64, p_pv_mw: f64, cfg: &ControlConfig) -> f64 {
    let pf = power_factor(v, cfg);
    if pf >= 1.0 {
        0.0
    } else {
        -p_pv_mw * pf.acos().tan()
    }
}

/// ESS droop: the Volt-Var shape applied to active power. Discharges
/// (positive) at low voltage, charges (negative, by convention) above `v4`.
/// Returns kW.
pub fn ess_power(v: f64, unit: &EssUnit, bp: &DroopBreakpoints) -> f64 {
    let p_max = unit.p_max_kw;
    if v <= bp.v1 {
        p_max
    } else if v <= bp.v2 {
        (v - bp.v2) / (bp.v1 - bp.v2) * p_max
    } else if v < bp.v3 {
        0.0
    } else if v < bp.v4 {
        -(v - bp.v3) / (bp.v4 - bp.v3) * p_max
    } else {
        -p_max
    }
}

/// Result of the droop/load-flow fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutcome {
    pub solution: PowerFlowSolution,
    pub control_iterations: usize,
    pub control_converged: bool,
    /// Max voltage change between the last two iterates, p.u.
    pub final_delta_v: f64,
    /// Final reactive setpoints per bus, MVar (inverter modes).
    pub q_injections_mvar: Vec<f64>,
    /// Final storage setpoints per bus, MW (ESS mode).
    pub ess_injections_mw: Vec<f64>,
}

/// Damping kicks in after this many undamped fixed-point iterations.
const DAMP_AFTER: usize = 10;

/// Fixed-point iteration between the droop laws and the load flow: solve
/// the base case, read voltages, compute new setpoints, re-solve, repeat
/// until the largest voltage change drops below `epsilon_v`. Setpoint
/// updates are halved after [`DAMP_AFTER`] iterations to break limit
/// cycles; records that still fail come back flagged, not dropped.
pub fn iterate_control(
    net: &Network,
    ybus: &nalgebra::DMatrix<num_complex::Complex64>,
    scenario: &PvScenario,
    profile: &LoadGenProfile,
    cfg: &ControlConfig,
    settings: &SolverSettings,
) -> Result<ControlOutcome, ControlError> {
    if cfg.mode == ControlMode::None {
        return Err(ControlError::NoControlMode);
    }
    let n = net.n_buses();
    let base = base_injections(net, scenario, profile);
    let caps = scenario.dense_capacities(net);

    // base-case solve seeds the voltage measurement
    let mut solution = solve_with_ybus(net, ybus, &base, settings)?;
    if !solution.converged {
        return Ok(ControlOutcome {
            solution,
            control_iterations: 0,
            control_converged: false,
            final_delta_v: f64::INFINITY,
            q_injections_mvar: vec![0.0; n],
            ess_injections_mw: vec![0.0; n],
        });
    }

    let mut q_set = vec![0.0f64; n]; // MVar
    let mut p_set = vec![0.0f64; n]; // MW
    let mut delta_v = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    for it in 1..=cfg.max_control_iters {
        let mut q_new = vec![0.0f64; n];
        let mut p_new = vec![0.0f64; n];
        match cfg.mode {
            ControlMode::VoltVar => {
                for i in 0..n {
                    if caps[i] > 0.0 {
                        let p_pv = caps[i] * profile.p_gn;
                        q_new[i] = volt_var_q(solution.v_mag[i], p_pv, caps[i], &cfg.breakpoints)?;
                    }
                }
            }
            ControlMode::PowerFactor => {
                for i in 0..n {
                    if caps[i] > 0.0 {
                        let p_pv = caps[i] * profile.p_gn;
                        q_new[i] = pf_control_q(solution.v_mag[i], p_pv, cfg);
                    }
                }
            }
            ControlMode::Ess => {
                for unit in &cfg.ess_units {
                    if let Some(i) = net.index_of(unit.bus) {
                        p_new[i] += ess_power(solution.v_mag[i], unit, &cfg.breakpoints) / 1000.0;
                    }
                }
            }
            ControlMode::None => unreachable!(),
        }
        if it > DAMP_AFTER {
            for i in 0..n {
                q_new[i] = 0.5 * (q_new[i] + q_set[i]);
                p_new[i] = 0.5 * (p_new[i] + p_set[i]);
            }
        }

        let mut inj = base.clone();
        for i in 0..n {
            inj.p_inj_pu[i] += p_new[i] / net.base_mva;
            inj.q_inj_pu[i] += q_new[i] / net.base_mva;
        }
        let next = solve_with_ybus(net, ybus, &inj, settings)?;
        iterations = it;
        q_set = q_new;
        p_set = p_new;
        if !next.converged {
            solution = next;
            break;
        }
        delta_v = solution
            .v_mag
            .iter()
            .zip(&next.v_mag)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        solution = next;
        if delta_v < cfg.epsilon_v {
            converged = true;
            break;
        }
    }

    Ok(ControlOutcome {
        control_converged: converged && solution.converged,
        control_iterations: iterations,
        final_delta_v: delta_v,
        q_injections_mvar: q_set,
        ess_injections_mw: p_set,
        solution,
    })
}
