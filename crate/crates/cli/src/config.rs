//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeName {
    Direct,
    Caflisch,
}

/// Truncation radius of the split: a number or "auto" (q², capped at 0.8·v_max).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MSpec {
    Auto,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub alpha: f64,
    pub q: u32,
    pub m: MSpec,
    /// Velocity nodes per axis.
    pub n_v: usize,
    pub v_max: f64,
    pub n_y: usize,
    pub b_amp: f64,
    /// Angular rule "PxA".
    pub n_omega: String,
    pub epsilon_schedule: Vec<f64>,
    pub sigma_steps: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub max_outer: usize,
    pub dt: f64,
    pub t_end: f64,
    pub record_every: usize,
    pub scheme: SchemeName,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Amplitude of the v_xv_yμ perturbation of the unsteady initial state.
    pub delta: f64,
    pub cfl: f64,
    pub max_exit_fraction: f64,
    /// Skips the 2qα ≤ ν₀/2 check.
    pub allow_unstable: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            q: 6,
            m: MSpec::Auto,
            n_v: 8,
            v_max: 5.6,
            n_y: 12,
            b_amp: 1.0 / (2.0 * std::f64::consts::PI),
            n_omega: "4x8".into(),
            epsilon_schedule: vec![0.1, 0.01, 0.001, 0.0],
            sigma_steps: 1,
            tol: 1e-10,
            max_iter: 500,
            max_outer: 50,
            dt: 0.2,
            t_end: 20.0,
            record_every: 1,
            scheme: SchemeName::Direct,
            seed: 0,
            output_dir: PathBuf::from("out"),
            delta: 1e-3,
            cfl: 8.0,
            max_exit_fraction: 1e-3,
            allow_unstable: false,
        }
    }
}

/// Every accepted key, in echo order.
#[cfg(test)]
const KEYS: &[&str] = &[
    "alpha",
    "q",
    "M",
    "n_v",
    "v_max",
    "n_y",
    "b_amp",
    "n_omega",
    "epsilon_schedule",
    "sigma_steps",
    "tol",
    "max_iter",
    "max_outer",
    "dt",
    "t_end",
    "record_every",
    "scheme",
    "seed",
    "output_dir",
    "delta",
    "cfl",
    "max_exit_fraction",
    "allow_unstable",
];

fn bad(key: &str, value: &str) -> CliError {
    CliError::Config(format!("invalid value {value:?} for {key}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| bad(key, value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim().trim_matches('"');
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "q" => self.q = num(key, value)?,
            "M" | "m" => {
                self.m = if value.eq_ignore_ascii_case("auto") {
                    MSpec::Auto
                } else {
                    MSpec::Value(num(key, value)?)
                }
            }
            "n_v" => self.n_v = num(key, value)?,
            "v_max" => self.v_max = num(key, value)?,
            "n_y" => self.n_y = num(key, value)?,
            "b_amp" => self.b_amp = num(key, value)?,
            "n_omega" => {
                couette::CollisionKernelSpec::parse_angles(value).map_err(|_| bad(key, value))?;
                self.n_omega = value.to_string();
            }
            "epsilon_schedule" => {
                self.epsilon_schedule = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "sigma_steps" => self.sigma_steps = num(key, value)?,
            "tol" => self.tol = num(key, value)?,
            "max_iter" => self.max_iter = num(key, value)?,
            "max_outer" => self.max_outer = num(key, value)?,
            "dt" => self.dt = num(key, value)?,
            "t_end" => self.t_end = num(key, value)?,
            "record_every" => self.record_every = num(key, value)?,
            "scheme" => {
                self.scheme = match value {
                    "direct" => SchemeName::Direct,
                    "caflisch" => SchemeName::Caflisch,
                    _ => return Err(bad(key, value)),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "delta" => self.delta = num(key, value)?,
            "cfl" => self.cfl = num(key, value)?,
            "max_exit_fraction" => self.max_exit_fraction = num(key, value)?,
            "allow_unstable" => self.allow_unstable = num(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. Blank lines and `#` comments are skipped.
    pub fn parse_str(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn nu0(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.b_amp
    }

    /// Effective M and whether the q² rule was capped.
    pub fn resolved_m(&self) -> (f64, bool) {
        match self.m {
            MSpec::Value(m) => (m, false),
            MSpec::Auto => {
                let want = (self.q * self.q) as f64;
                let cap = 0.8 * self.v_max;
                if want > cap {
                    (cap, true)
                } else {
                    (want, false)
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("tol", self.tol),
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("b_amp", self.b_amp),
            ("cfl", self.cfl),
            ("max_exit_fraction", self.max_exit_fraction),
        ];
        for (k, x) in positive {
            if !(x > 0.0) {
                return Err(CliError::Config(format!("{k} = {x} must be positive")));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(CliError::Config(format!("alpha = {} must be nonnegative", self.alpha)));
        }
        if !(self.t_end >= 0.0) {
            return Err(CliError::Config(format!("t_end = {} must be nonnegative", self.t_end)));
        }
        if self.record_every == 0 || self.sigma_steps == 0 || self.max_iter == 0 || self.max_outer == 0 {
            return Err(CliError::Config(
                "record_every, sigma_steps, max_iter and max_outer must be at least 1".into(),
            ));
        }
        if self.epsilon_schedule.is_empty() {
            return Err(CliError::Config("epsilon_schedule is empty".into()));
        }
        let lhs = 2.0 * self.q as f64 * self.alpha;
        let rhs = 0.5 * self.nu0();
        if lhs > rhs && !self.allow_unstable {
            return Err(CliError::Config(format!(
                "stability check 2·q·alpha ≤ nu0/2 violated: 2·{}·{} = {lhs} > {rhs} (set allow_unstable = true to override)",
                self.q, self.alpha
            )));
        }
        Ok(())
    }

    /// Every effective value, with "auto" fields resolved.
    pub fn echo(&self) -> serde_json::Value {
        let (m, capped) = self.resolved_m();
        serde_json::json!({
            "alpha": self.alpha,
            "q": self.q,
            "M": m,
            "M_auto": self.m == MSpec::Auto,
            "M_capped": capped,
            "n_v": self.n_v,
            "v_max": self.v_max,
            "n_y": self.n_y,
            "b_amp": self.b_amp,
            "nu0": self.nu0(),
            "n_omega": self.n_omega,
            "epsilon_schedule": self.epsilon_schedule,
            "sigma_steps": self.sigma_steps,
            "tol": self.tol,
            "max_iter": self.max_iter,
            "max_outer": self.max_outer,
            "dt": self.dt,
            "t_end": self.t_end,
            "record_every": self.record_every,
            "scheme": self.scheme,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "delta": self.delta,
            "cfl": self.cfl,
            "max_exit_fraction": self.max_exit_fraction,
            "allow_unstable": self.allow_unstable,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_resolves_every_default() {
        let cfg = RunConfig::parse_str("alpha=0.01\n").unwrap();
        cfg.validate().unwrap();
        let echo = cfg.echo();
        for k in KEYS {
            assert!(echo.get(*k).is_some(), "{k} missing from echo");
        }
        assert_eq!(echo["alpha"], 0.01);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse_str("alpah = 0.01").unwrap_err();
        assert!(err.to_string().contains("alpah"));
    }

    #[test]
    fn stability_check_names_the_inequality() {
        let cfg = RunConfig::parse_str("alpha=1.0\nq=100").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("2·q·alpha ≤ nu0/2"), "{msg}");
        let mut ok = cfg.clone();
        ok.allow_unstable = true;
        ok.validate().unwrap();
    }

    #[test]
    fn auto_m_is_capped() {
        let cfg = RunConfig::parse_str("M = \"auto\"\nq = 4\nv_max = 6").unwrap();
        let (m, capped) = cfg.resolved_m();
        assert!((m - 4.8).abs() < 1e-12 && capped);
        let echo = cfg.echo();
        assert_eq!(echo["M_capped"], true);
    }

    #[test]
    fn comments_lists_and_quotes() {
        let cfg = RunConfig::parse_str("# run\nepsilon_schedule = 0.1, 0.01 , 0\nscheme = caflisch # split\n").unwrap();
        assert_eq!(cfg.epsilon_schedule, vec![0.1, 0.01, 0.0]);
        assert_eq!(cfg.scheme, SchemeName::Caflisch);
        assert!(RunConfig::parse_str("scheme = upwind").is_err());
        assert!(RunConfig::parse_str("just text").is_err());
    }
}
