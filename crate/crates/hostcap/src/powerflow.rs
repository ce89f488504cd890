//! Full AC power flow by Newton-Raphson in polar coordinates.
//!
//! Every non-slack bus is treated as PQ (PV plants enter as negative load;
//! control modules inject reactive power explicitly), so the state is the
//! voltage magnitude and angle of each PQ bus. The Jacobian is assembled
//! densely, which is the right trade-off for feeders of a few hundred buses.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::netmodel::{BusKind, Network};

/// Per-bus net injections in p.u. on the system base, aligned with
/// `Network::buses` order. Slack entries are ignored by the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionSet {
    pub p_inj_pu: Vec<f64>,
    pub q_inj_pu: Vec<f64>,
}

impl InjectionSet {
    pub fn zeros(n_buses: usize) -> Self {
        InjectionSet {
            p_inj_pu: vec![0.0; n_buses],
            q_inj_pu: vec![0.0; n_buses],
        }
    }

    /// Net injection from the peak-load data scaled by a demand factor:
    /// consumption enters with negative sign.
    pub fn from_scaled_load(net: &Network, demand_factor: f64) -> Self {
        let mut inj = InjectionSet::zeros(net.n_buses());
        for (i, bus) in net.buses.iter().enumerate() {
            if bus.kind == BusKind::Pq {
                inj.p_inj_pu[i] = -bus.p_load_pu(net.base_mva) * demand_factor;
                inj.q_inj_pu[i] = -bus.q_load_pu(net.base_mva) * demand_factor;
            }
        }
        inj
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverSettings {
    /// Convergence threshold on the largest per-bus power mismatch, p.u.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tolerance: 1e-8,
            max_iterations: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
}

impl PowerFlowSolution {
    pub fn v_max(&self) -> f64 {
        self.v_mag.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn v_min(&self) -> f64 {
        self.v_mag.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
}

/// Dense bus admittance matrix: series branches, line charging and fixed
/// bus shunts (capacitor banks enter through Bs).
pub fn build_admittance(net: &Network) -> DMatrix<Complex64> {
    let n = net.n_buses();
    let mut y = DMatrix::<Complex64>::zeros(n, n);
    for br in &net.branches {
        let f = net.index_of(br.from_bus).expect("validated endpoint");
        let t = net.index_of(br.to_bus).expect("validated endpoint");
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r_pu, br.x_pu);
        let half_charge = Complex64::new(0.0, br.b_charging_pu / 2.0);
        y[(f, f)] += ys + half_charge;
        y[(t, t)] += ys + half_charge;
        y[(f, t)] -= ys;
        y[(t, f)] -= ys;
    }
    for (i, bus) in net.buses.iter().enumerate() {
        y[(i, i)] += Complex64::new(
            bus.g_shunt_mw / net.base_mva,
            bus.b_shunt_mvar / net.base_mva,
        );
    }
    y
}

/// Convenience entry point that builds the admittance matrix internally.
/// Hot paths should build it once and call [`solve_with_ybus`].
pub fn solve_ac_power_flow(
    net: &Network,
    inj: &InjectionSet,
    settings: &SolverSettings,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let ybus = build_admittance(net);
    solve_with_ybus(net, &ybus, inj, settings)
}

/// Newton-Raphson solve against a prebuilt admittance matrix. Flat start
/// from the slack setpoint. Non-convergence is reported in the solution
/// (`converged == false`); a singular Jacobian is a distinct error.
pub fn solve_with_ybus(
    net: &Network,
    ybus: &DMatrix<Complex64>,
    inj: &InjectionSet,
    settings: &SolverSettings,
) -> Result<PowerFlowSolution, PowerFlowError> {
    let n = net.n_buses();
    let slack = net.slack_index();
    let v_set = net.slack_voltage();
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = pq.len();

    let mut v = vec![v_set; n];
    let mut th = vec![0.0f64; n];
    let mut max_mismatch = f64::INFINITY;

    let g = ybus.map(|c| c.re);
    let b = ybus.map(|c| c.im);

    for iteration in 0..=settings.max_iterations {
        // calculated injections at the current state
        let mut p_calc = vec![0.0f64; n];
        let mut q_calc = vec![0.0f64; n];
        for k in 0..n {
            let mut pk = 0.0;
            let mut qk = 0.0;
            for l in 0..n {
                let gkl = g[(k, l)];
                let bkl = b[(k, l)];
                if gkl == 0.0 && bkl == 0.0 {
                    continue;
                }
                let t = th[k] - th[l];
                let (s, c) = t.sin_cos();
                pk += v[l] * (gkl * c + bkl * s);
                qk += v[l] * (gkl * s - bkl * c);
            }
            p_calc[k] = v[k] * pk;
            q_calc[k] = v[k] * qk;
        }

        let mut f = DVector::<f64>::zeros(2 * m);
        for (a, &k) in pq.iter().enumerate() {
            f[a] = inj.p_inj_pu[k] - p_calc[k];
            f[m + a] = inj.q_inj_pu[k] - q_calc[k];
        }
        max_mismatch = f.amax();
        if max_mismatch < settings.tolerance {
            return Ok(PowerFlowSolution {
                v_mag: v,
                v_ang: th,
                converged: true,
                iterations: iteration,
                max_mismatch,
            });
        }
        if iteration == settings.max_iterations {
            break;
        }

        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        for (a, &k) in pq.iter().enumerate() {
            for (bb, &l) in pq.iter().enumerate() {
                if k == l {
                    jac[(a, bb)] = -q_calc[k] - b[(k, k)] * v[k] * v[k];
                    jac[(a, m + bb)] = p_calc[k] / v[k] + g[(k, k)] * v[k];
                    jac[(m + a, bb)] = p_calc[k] - g[(k, k)] * v[k] * v[k];
                    jac[(m + a, m + bb)] = q_calc[k] / v[k] - b[(k, k)] * v[k];
                } else {
                    let gkl = g[(k, l)];
                    let bkl = b[(k, l)];
                    if gkl == 0.0 && bkl == 0.0 {
                        continue;
                    }
                    let t = th[k] - th[l];
                    let (s, c) = t.sin_cos();
                    jac[(a, bb)] = v[k] * v[l] * (gkl * s - bkl * c);
                    jac[(a, m + bb)] = v[k] * (gkl * c + bkl * s);
                    jac[(m + a, bb)] = -v[k] * v[l] * (gkl * c + bkl * s);
                    jac[(m + a, m + bb)] = v[k] * (gkl * s - bkl * c);
                }
            }
        }

        let lu = jac.lu();
        let dx = lu
            .solve(&f)
            .ok_or(PowerFlowError::SingularJacobian { iteration })?;
        for (a, &k) in pq.iter().enumerate() {
            th[k] += dx[a];
            v[k] += dx[m + a];
        }
    }

    Ok(PowerFlowSolution {
        v_mag: v,
        v_ang: th,
        converged: false,
        iterations: settings.max_iterations,
        max_mismatch,
    })
}

/// Total complex power delivered by the slack bus, p.u. Useful for
/// balance checks.
pub fn slack_injection(
    net: &Network,
    ybus: &DMatrix<Complex64>,
    sol: &PowerFlowSolution,
) -> Complex64 {
    let slack = net.slack_index();
    bus_injection(ybus, sol, slack)
}

fn bus_injection(ybus: &DMatrix<Complex64>, sol: &PowerFlowSolution, k: usize) -> Complex64 {
    let n = sol.v_mag.len();
    let vk = Complex64::from_polar(sol.v_mag[k], sol.v_ang[k]);
    let mut acc = Complex64::new(0.0, 0.0);
    for l in 0..n {
        let vl = Complex64::from_polar(sol.v_mag[l], sol.v_ang[l]);
        acc += ybus[(k, l)] * vl;
    }
    vk * acc.conj()
}
