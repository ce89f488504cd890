//! Chance-constrained solar-PV hosting capacity estimation for radial
//! distribution feeders.
//!
//! The toolkit runs Monte-Carlo probabilistic load flow over random PV
//! location/size scenarios and correlated load-generation profiles, learns
//! the penetration-to-max-voltage relationship with Gaussian-process and
//! logistic models, and reformulates the over-voltage chance constraint in
//! closed form to solve for the hosting capacity at a chosen risk level.
//! Droop-based inverter and storage voltage control can be layered on top
//! of the base load flow.
//!
//! Modules mirror the stages of that pipeline:
//!
//! * [`netmodel`] -- feeder data model, MATPOWER-subset parsing, validation
//! * [`powerflow`] -- Newton-Raphson AC power flow in polar form
//! * [`probdist`] -- Normal/Beta primitives and Gaussian-copula sampling
//! * [`scenarios`] -- profile and PV-scenario generation, the PLF driver
//! * [`control`] -- Volt-Var, power-factor and ESS droop laws
//! * [`gpr`] -- exact Gaussian-process regression on (x, V_max) samples
//! * [`logit`] -- over-voltage labelling and logistic regression
//! * [`hc`] -- the hosting-capacity solvers and risk curves
//! * [`pipeline`] -- configuration, orchestration and report emission

pub mod control;
pub mod gpr;
pub mod hc;
pub mod logit;
pub mod netmodel;
pub mod pipeline;
pub mod powerflow;
pub mod probdist;
pub mod scenarios;
