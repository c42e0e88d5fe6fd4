//! Economic and climate building blocks of the reduced three-state problem.
//!
//! States are log capital `k`, the low-carbon capital share `s_l` and the
//! temperature anomaly `gamma`. Log damage `n` only appears in forward
//! simulation; in the value equation it is removed through `V = v - n`.
//! Everything written in terms of capital levels uses `K = exp(k)`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::ValueGradients;

/// Calibration constants of the climate-economy model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Discount rate (1/year).
    pub rho: f64,
    /// Output per unit of capital per year.
    pub alpha: f64,
    /// Emissions per unit of output.
    pub lambda_ci: f64,
    /// Temperature response per unit of emissions.
    pub zeta: f64,
    /// Temperature volatility per unit of emissions.
    pub sigma_gamma: f64,
    /// Linear damage slope (1/degC).
    pub eta0: f64,
    /// Quadratic damage slope (1/degC^2).
    pub eta1: f64,
    pub delta_l: f64,
    pub delta_h: f64,
    /// Quadratic adjustment cost of low-carbon investment.
    pub kappa_l: f64,
    /// Quadratic adjustment cost of high-carbon investment.
    pub kappa_h: f64,
    pub sigma_l: f64,
    pub sigma_h: f64,
}

impl ModelParams {
    /// Placeholder calibration of plausible magnitude. It is a modelling
    /// choice, not a published parameter set.
    pub const DEFAULT: ModelParams = ModelParams {
        rho: 0.03,
        alpha: 0.115,
        lambda_ci: 1.0,
        zeta: 0.002,
        sigma_gamma: 0.0002,
        eta0: 0.005,
        eta1: 0.005,
        delta_l: 0.05,
        delta_h: 0.05,
        kappa_l: 6.0,
        kappa_h: 5.0,
        sigma_l: 0.01,
        sigma_h: 0.01,
    };

    /// Field names in canonical order, matching [`ModelParams::to_array`].
    pub const FIELD_NAMES: [&'static str; 13] = [
        "rho",
        "alpha",
        "lambda_ci",
        "zeta",
        "sigma_gamma",
        "eta0",
        "eta1",
        "delta_l",
        "delta_h",
        "kappa_l",
        "kappa_h",
        "sigma_l",
        "sigma_h",
    ];

    pub fn to_array(&self) -> [f64; 13] {
        [
            self.rho,
            self.alpha,
            self.lambda_ci,
            self.zeta,
            self.sigma_gamma,
            self.eta0,
            self.eta1,
            self.delta_l,
            self.delta_h,
            self.kappa_l,
            self.kappa_h,
            self.sigma_l,
            self.sigma_h,
        ]
    }

    pub fn from_array(a: [f64; 13]) -> Self {
        ModelParams {
            rho: a[0],
            alpha: a[1],
            lambda_ci: a[2],
            zeta: a[3],
            sigma_gamma: a[4],
            eta0: a[5],
            eta1: a[6],
            delta_l: a[7],
            delta_h: a[8],
            kappa_l: a[9],
            kappa_h: a[10],
            sigma_l: a[11],
            sigma_h: a[12],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_array().iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidConfig("model parameters must be finite"));
        }
        if self.rho <= 0.0 {
            return Err(Error::InvalidConfig("rho must be positive"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::InvalidConfig("alpha must be positive"));
        }
        if self.kappa_l <= 0.0 || self.kappa_h <= 0.0 {
            return Err(Error::InvalidConfig("adjustment costs must be positive"));
        }
        if self.lambda_ci < 0.0 || self.zeta < 0.0 || self.sigma_gamma < 0.0 || self.eta1 < 0.0 {
            return Err(Error::InvalidConfig(
                "lambda_ci, zeta, sigma_gamma and eta1 must be non-negative",
            ));
        }
        Ok(())
    }

    /// Stable 64-bit fingerprint of the parameter values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"model-params/v1");
        for x in self.to_array() {
            h.update(x.to_le_bytes());
        }
        let digest = h.finalize();
        let mut first = [0u8; 8];
        first.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(first)
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Point in state space. `n` is only tracked by forward simulation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVector {
    pub k: f64,
    pub s_l: f64,
    pub gamma: f64,
    #[serde(default)]
    pub n: f64,
}

impl StateVector {
    pub fn new(k: f64, s_l: f64, gamma: f64) -> Self {
        StateVector { k, s_l, gamma, n: 0.0 }
    }

    pub fn is_valid(&self) -> bool {
        self.k.is_finite()
            && self.gamma.is_finite()
            && self.n.is_finite()
            && (0.0..=1.0).contains(&self.s_l)
    }

    pub fn capital(&self) -> f64 {
        libm::exp(self.k)
    }
}

/// Investment rates in the two capital types (1/year).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlVector {
    pub i_l: f64,
    pub i_h: f64,
}

impl ControlVector {
    pub fn new(i_l: f64, i_h: f64) -> Self {
        ControlVector { i_l, i_h }
    }
}

/// Wiener-free drift parts of the four state equations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DriftVector {
    pub dk_star: f64,
    pub ds_l_star: f64,
    pub dgamma_star: f64,
    pub dn_star: f64,
}

/// Instantaneous variances entering the second-order HJB terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiffusionMagnitudes {
    pub var_k: f64,
    pub var_sl: f64,
    pub var_gamma: f64,
}

pub fn emissions(p: &ModelParams, s: &StateVector) -> f64 {
    p.lambda_ci * p.alpha * s.capital() * (1.0 - s.s_l)
}

/// Investment per unit of capital.
fn investment_rate(s: &StateVector, c: &ControlVector) -> f64 {
    c.i_l * s.s_l + c.i_h * (1.0 - s.s_l)
}

/// Consumption `C = (alpha - i_L s_L - i_H (1 - s_L)) K`; errors unless positive.
pub fn consumption(p: &ModelParams, s: &StateVector, c: &ControlVector) -> Result<f64> {
    let value = (p.alpha - investment_rate(s, c)) * s.capital();
    if value > 0.0 {
        Ok(value)
    } else {
        Err(Error::NonPositiveConsumption { consumption: value })
    }
}

/// Log-capital drift of each sector, `(dk_L, dk_H)`.
pub fn sector_drifts(p: &ModelParams, s: &StateVector, c: &ControlVector) -> (f64, f64) {
    let sl = s.s_l;
    let sh = 1.0 - sl;
    let low = -p.delta_l + c.i_l - p.kappa_l * c.i_l * c.i_l + 0.5 * (p.sigma_l * sl) * (p.sigma_l * sl);
    let high = -p.delta_h + c.i_h - p.kappa_h * c.i_h * c.i_h + 0.5 * (p.sigma_h * sh) * (p.sigma_h * sh);
    (low, high)
}

/// Marginal damage per degree, `dn/dGamma = eta0 + eta1 * gamma`.
pub fn damage_slope(p: &ModelParams, s: &StateVector) -> f64 {
    p.eta0 + p.eta1 * s.gamma
}

pub fn drifts(p: &ModelParams, s: &StateVector, c: &ControlVector) -> DriftVector {
    let (dk_l, dk_h) = sector_drifts(p, s, c);
    let sl = s.s_l;
    let e = emissions(p, s);
    let dgamma_star = e * p.zeta;
    DriftVector {
        dk_star: sl * dk_l + (1.0 - sl) * dk_h,
        ds_l_star: sl * (1.0 - sl) * (dk_l - dk_h),
        dgamma_star,
        dn_star: damage_slope(p, s) * dgamma_star
            + 0.5 * p.eta1 * p.sigma_gamma * p.sigma_gamma * e * e,
    }
}

pub fn diffusion_magnitudes(p: &ModelParams, s: &StateVector) -> DiffusionMagnitudes {
    let sl = s.s_l;
    let sh = 1.0 - sl;
    let e = emissions(p, s);
    let mix = sl * sh;
    DiffusionMagnitudes {
        var_k: (p.sigma_l * sl) * (p.sigma_l * sl) + (p.sigma_h * sh) * (p.sigma_h * sh),
        var_sl: mix * mix * (p.sigma_l * p.sigma_l + p.sigma_h * p.sigma_h),
        var_gamma: e * e * p.sigma_gamma * p.sigma_gamma,
    }
}

/// Utility flow net of the damage drift: `rho log C - dn*`.
pub fn utility_flow(p: &ModelParams, s: &StateVector, c: &ControlVector) -> Result<f64> {
    let cons = consumption(p, s, c)?;
    Ok(p.rho * libm::log(cons) - drifts(p, s, c).dn_star)
}

/// Right-hand side of the reduced HJB equation at one state:
///
/// ```text
/// rho log C + v_k dk* + v_s ds* + v_g dgamma*
///   + 1/2 (v_kk var_k + v_ss var_sl + v_gg var_gamma) - dn*
/// ```
///
/// At a solution this equals `rho * v`.
pub fn hamiltonian_rhs(
    p: &ModelParams,
    s: &StateVector,
    c: &ControlVector,
    g: &ValueGradients,
) -> Result<f64> {
    let cons = consumption(p, s, c)?;
    let d = drifts(p, s, c);
    let var = diffusion_magnitudes(p, s);
    Ok(p.rho * libm::log(cons)
        + g.dv_dk * d.dk_star
        + g.dv_dsl * d.ds_l_star
        + g.dv_dgamma * d.dgamma_star
        + 0.5 * (g.d2v_dk2 * var.var_k + g.d2v_dsl2 * var.var_sl + g.d2v_dgamma2 * var.var_gamma)
        - d.dn_star)
}
