//! Run configuration shared by the CLI and the model file.
//!
//! A config file is flat `key = value` text; keys are camelCase and unknown
//! keys are rejected so typos never silently fall back to defaults. The same
//! struct is embedded verbatim in saved model files, so a model records the
//! exact settings it was trained with.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ksfa::{GammaRule, KsfaConfig};
use crate::larsen::Lambda1Rule;
use crate::ssfa::SsfaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RunConfig {
    /// Temporal penalty weight of the sparse loading extraction.
    pub lambda: f64,
    /// L1 selection rule: `min-slowness`, `best-fit-error` or `fixed(<v>)`.
    #[serde(with = "lambda1_serde")]
    pub lambda1_rule: Lambda1Rule,
    /// Optional cap on nonzeros per sparse loading.
    pub max_support: Option<usize>,
    /// Significance level of the subset slowness test.
    pub alpha: f64,
    /// Confidence level of the kernel-density control limits.
    pub limit_alpha: f64,
    /// Kernel bandwidth rule: `median` or a positive number.
    #[serde(with = "gamma_serde")]
    pub kernel_gamma: GammaRule,
    /// Verdict window length w (majority vote over the last w flags).
    pub policy_window: usize,
    /// Clearance window length q (all-quiet run required to call a
    /// condition change).
    pub clear_window: usize,
    /// Iteration cap of the sparse loading alternation.
    pub max_iter: usize,
    /// Convergence tolerance of the sparse loading alternation.
    pub tol: f64,
    /// Seed for anything stochastic downstream (e.g. data generation).
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lambda: 1.5,
            lambda1_rule: Lambda1Rule::MinSlowness,
            max_support: None,
            alpha: 0.05,
            limit_alpha: 0.95,
            kernel_gamma: GammaRule::Median,
            policy_window: 10,
            clear_window: 20,
            max_iter: 200,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Parses flat `key = value` text. Blank lines and `#` comments are
    /// skipped; any unknown key is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::data(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim(), lineno + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, lineno: usize) -> Result<()> {
        let bad = |what: &str| {
            Error::data(format!("line {lineno}: invalid {what} value {value:?}"))
        };
        match key {
            "lambda" => self.lambda = value.parse().map_err(|_| bad("lambda"))?,
            "lambda1Rule" => self.lambda1_rule = parse_lambda1(value)?,
            "maxSupport" => {
                self.max_support = Some(value.parse().map_err(|_| bad("maxSupport"))?)
            }
            "alpha" => self.alpha = value.parse().map_err(|_| bad("alpha"))?,
            "limitAlpha" => self.limit_alpha = value.parse().map_err(|_| bad("limitAlpha"))?,
            "kernelGamma" => self.kernel_gamma = parse_gamma(value)?,
            "policyWindow" => {
                self.policy_window = value.parse().map_err(|_| bad("policyWindow"))?
            }
            "clearWindow" => {
                self.clear_window = value.parse().map_err(|_| bad("clearWindow"))?
            }
            "maxIter" => self.max_iter = value.parse().map_err(|_| bad("maxIter"))?,
            "tol" => self.tol = value.parse().map_err(|_| bad("tol"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            other => {
                return Err(Error::data(format!("line {lineno}: unknown key {other:?}")))
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::data("lambda must be finite and nonnegative"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::data("alpha must lie in (0, 1)"));
        }
        if !(self.limit_alpha > 0.5 && self.limit_alpha < 1.0) {
            return Err(Error::data("limitAlpha must lie in (0.5, 1)"));
        }
        if self.policy_window == 0 || self.clear_window == 0 {
            return Err(Error::data("policyWindow and clearWindow must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::data("maxIter must be positive"));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::data("tol must be finite and positive"));
        }
        if let Lambda1Rule::Fixed(v) = self.lambda1_rule {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::data("fixed lambda1 must be finite and nonnegative"));
            }
        }
        if let GammaRule::Fixed(g) = self.kernel_gamma {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::data("kernelGamma must be positive"));
            }
        }
        Ok(())
    }

    pub fn ssfa(&self) -> SsfaConfig {
        SsfaConfig {
            lambda: self.lambda,
            lambda1_rule: self.lambda1_rule,
            max_iter: self.max_iter,
            tol: self.tol,
            max_support: self.max_support,
        }
    }

    pub fn ksfa(&self) -> KsfaConfig {
        KsfaConfig {
            gamma: self.kernel_gamma,
        }
    }
}

fn parse_lambda1(value: &str) -> Result<Lambda1Rule> {
    match value {
        "min-slowness" => Ok(Lambda1Rule::MinSlowness),
        "best-fit-error" => Ok(Lambda1Rule::BestFitError),
        other => {
            if let Some(inner) = other
                .strip_prefix("fixed(")
                .and_then(|r| r.strip_suffix(')'))
            {
                let v: f64 = inner
                    .trim()
                    .parse()
                    .map_err(|_| Error::data(format!("invalid fixed lambda1 {inner:?}")))?;
                Ok(Lambda1Rule::Fixed(v))
            } else {
                Err(Error::data(format!(
                    "unknown lambda1Rule {other:?}; expected min-slowness, best-fit-error or fixed(<v>)"
                )))
            }
        }
    }
}

fn lambda1_to_string(rule: &Lambda1Rule) -> String {
    match rule {
        Lambda1Rule::MinSlowness => "min-slowness".to_string(),
        Lambda1Rule::BestFitError => "best-fit-error".to_string(),
        Lambda1Rule::Fixed(v) => format!("fixed({v})"),
    }
}

fn parse_gamma(value: &str) -> Result<GammaRule> {
    if value == "median" {
        return Ok(GammaRule::Median);
    }
    let g: f64 = value
        .parse()
        .map_err(|_| Error::data(format!("kernelGamma must be `median` or a number, got {value:?}")))?;
    Ok(GammaRule::Fixed(g))
}

mod lambda1_serde {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::larsen::Lambda1Rule;

    pub fn serialize<S: Serializer>(rule: &Lambda1Rule, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::lambda1_to_string(rule))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Lambda1Rule, D::Error> {
        let text = String::deserialize(d)?;
        super::parse_lambda1(&text).map_err(|e| D::Error::custom(e.to_string()))
    }
}

mod gamma_serde {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::ksfa::GammaRule;

    pub fn serialize<S: Serializer>(rule: &GammaRule, s: S) -> Result<S::Ok, S::Error> {
        match rule {
            GammaRule::Median => s.serialize_str("median"),
            GammaRule::Fixed(g) => s.serialize_f64(*g),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Text(String),
        Number(f64),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<GammaRule, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Text(t) if t == "median" => Ok(GammaRule::Median),
            Repr::Text(t) => Err(D::Error::custom(format!(
                "kernelGamma must be `median` or a number, got {t:?}"
            ))),
            Repr::Number(g) => Ok(GammaRule::Fixed(g)),
        }
    }
}
