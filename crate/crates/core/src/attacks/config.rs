use serde::{Deserialize, Serialize};

use super::{AttackError, AttackResultT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    Cw,
}

impl std::fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Pgd => "pgd",
            AttackFamily::Cw => "cw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L2,
    Linf,
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        })
    }
}

/// Fully resolved attack parameters. Unused fields for a family keep their
/// defaults (e.g. `c`/`kappa`/`lr` only matter to the margin attack).
#[derive(Debug, Clone, Serialize)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    /// gradient step size for the iterated attack
    pub step_size: f64,
    pub random_init: bool,
    /// margin weight of the optimization attack
    pub c: f64,
    /// confidence margin of the optimization attack
    pub kappa: f64,
    /// optimizer learning rate of the optimization attack
    pub lr: f64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            norm: Norm::Linf,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_init: false,
            c: 1.0,
            kappa: 0.0,
            lr: 0.01,
        }
    }

    pub fn pgd(norm: Norm, epsilon: f64, steps: usize, step_size: f64) -> Self {
        Self {
            family: AttackFamily::Pgd,
            norm,
            epsilon,
            steps,
            step_size,
            random_init: true,
            c: 1.0,
            kappa: 0.0,
            lr: 0.01,
        }
    }

    pub fn cw(steps: usize) -> Self {
        Self {
            family: AttackFamily::Cw,
            norm: Norm::L2,
            epsilon: 1.0,
            steps,
            step_size: 0.0,
            random_init: false,
            c: 1.0,
            kappa: 0.0,
            lr: 0.01,
        }
    }

    /// The seven-attack evaluation suite used for all robustness tables.
    pub fn standard_suite() -> Vec<AttackConfig> {
        vec![
            AttackConfig::pgd(Norm::L2, 1.0, 20, 0.2),
            AttackConfig::pgd(Norm::L2, 1.0, 40, 0.2),
            AttackConfig::pgd(Norm::Linf, 8.0 / 255.0, 20, 2.0 / 255.0),
            AttackConfig::pgd(Norm::Linf, 8.0 / 255.0, 40, 4.0 / 255.0),
            AttackConfig::fgsm(8.0 / 255.0),
            AttackConfig::cw(20),
            AttackConfig::cw(40),
        ]
    }

    /// Stable column label, e.g. `pgd20_linf` or `cw40_l2`.
    pub fn label(&self) -> String {
        match self.family {
            AttackFamily::Fgsm => format!("fgsm_{}", self.norm),
            AttackFamily::Pgd => format!("pgd{}_{}", self.steps, self.norm),
            AttackFamily::Cw => format!("cw{}_{}", self.steps, self.norm),
        }
    }

    pub fn validate(&self) -> AttackResultT<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(AttackError::BadParam {
                what: "epsilon",
                bound: "nonnegative and finite",
                value: self.epsilon,
            });
        }
        if self.family != AttackFamily::Fgsm && self.steps == 0 {
            return Err(AttackError::BadParam {
                what: "steps",
                bound: "at least 1",
                value: 0.0,
            });
        }
        if self.family == AttackFamily::Pgd && self.step_size <= 0.0 {
            return Err(AttackError::BadParam {
                what: "step size",
                bound: "positive",
                value: self.step_size,
            });
        }
        if self.family == AttackFamily::Cw {
            if self.lr <= 0.0 {
                return Err(AttackError::BadParam {
                    what: "lr",
                    bound: "positive",
                    value: self.lr,
                });
            }
            if self.c <= 0.0 {
                return Err(AttackError::BadParam {
                    what: "c",
                    bound: "positive",
                    value: self.c,
                });
            }
            if self.kappa < 0.0 {
                return Err(AttackError::BadParam {
                    what: "kappa",
                    bound: "nonnegative",
                    value: self.kappa,
                });
            }
        }
        Ok(())
    }
}

/// A number that may be written as a fraction string like `"8/255"` in
/// config files.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum EpsSpec {
    Number(f64),
    Text(String),
}

impl EpsSpec {
    pub fn resolve(&self, what: &'static str) -> AttackResultT<f64> {
        match self {
            EpsSpec::Number(v) => Ok(*v),
            EpsSpec::Text(s) => {
                let parse = |t: &str| -> Option<f64> { t.trim().parse::<f64>().ok() };
                if let Some((num, den)) = s.split_once('/') {
                    match (parse(num), parse(den)) {
                        (Some(n), Some(d)) if d != 0.0 => Ok(n / d),
                        _ => Err(AttackError::BadFraction { what, text: s.clone() }),
                    }
                } else {
                    parse(s).ok_or_else(|| AttackError::BadFraction { what, text: s.clone() })
                }
            }
        }
    }
}

/// Attack stanza as written in experiment config files. Everything except
/// the family is optional; omitted fields take the family defaults.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct AttackSpec {
    pub family: String,
    #[serde(default)]
    pub norm: Option<String>,
    #[serde(default)]
    pub eps: Option<EpsSpec>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub alpha: Option<EpsSpec>,
    #[serde(default)]
    pub random_init: Option<bool>,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub lr: Option<f64>,
}

impl AttackSpec {
    pub fn build(&self) -> AttackResultT<AttackConfig> {
        let family = match self.family.to_lowercase().as_str() {
            "fgsm" => AttackFamily::Fgsm,
            "pgd" => AttackFamily::Pgd,
            "cw" => AttackFamily::Cw,
            other => return Err(AttackError::UnknownFamily(other.to_string())),
        };
        let norm = match &self.norm {
            None => match family {
                AttackFamily::Cw => Norm::L2,
                _ => Norm::Linf,
            },
            Some(s) => match s.to_lowercase().as_str() {
                "l2" => Norm::L2,
                "linf" | "loo" | "l_inf" => Norm::Linf,
                other => return Err(AttackError::UnknownNorm(other.to_string())),
            },
        };
        let default_eps = match norm {
            Norm::L2 => 1.0,
            Norm::Linf => 8.0 / 255.0,
        };
        let epsilon = match &self.eps {
            Some(e) => e.resolve("eps")?,
            None => default_eps,
        };
        let mut cfg = match family {
            AttackFamily::Fgsm => {
                let mut c = AttackConfig::fgsm(epsilon);
                c.norm = norm;
                c
            }
            AttackFamily::Pgd => {
                let steps = self.steps.unwrap_or(20);
                let step_size = match &self.alpha {
                    Some(a) => a.resolve("alpha")?,
                    None => match norm {
                        Norm::L2 => 0.2,
                        Norm::Linf => 2.0 / 255.0,
                    },
                };
                let mut c = AttackConfig::pgd(norm, epsilon, steps, step_size);
                if let Some(ri) = self.random_init {
                    c.random_init = ri;
                }
                c
            }
            AttackFamily::Cw => {
                let mut c = AttackConfig::cw(self.steps.unwrap_or(20));
                c.norm = norm;
                c.epsilon = epsilon;
                c
            }
        };
        if let Some(c) = self.c {
            cfg.c = c;
        }
        if let Some(k) = self.kappa {
            cfg.kappa = k;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_has_seven_rows_with_stable_labels() {
        let suite = AttackConfig::standard_suite();
        let labels: Vec<String> = suite.iter().map(|c| c.label()).collect();
        assert_eq!(
            labels,
            vec![
                "pgd20_l2",
                "pgd40_l2",
                "pgd20_linf",
                "pgd40_linf",
                "fgsm_linf",
                "cw20_l2",
                "cw40_l2"
            ]
        );
        for cfg in &suite {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn suite_parameters() {
        let suite = AttackConfig::standard_suite();
        assert_eq!(suite[0].epsilon, 1.0);
        assert_eq!(suite[0].step_size, 0.2);
        assert!((suite[2].epsilon - 8.0 / 255.0).abs() < 1e-15);
        assert!((suite[2].step_size - 2.0 / 255.0).abs() < 1e-15);
        assert!((suite[3].step_size - 4.0 / 255.0).abs() < 1e-15);
        assert!(suite.iter().filter(|c| c.family == AttackFamily::Pgd).all(|c| c.random_init));
        let cw = &suite[5];
        assert_eq!((cw.c, cw.kappa, cw.lr, cw.epsilon), (1.0, 0.0, 0.01, 1.0));
    }

    #[test]
    fn fraction_strings_parse() {
        assert!((EpsSpec::Text("8/255".into()).resolve("eps").unwrap() - 8.0 / 255.0).abs() < 1e-15);
        assert_eq!(EpsSpec::Text("0.25".into()).resolve("eps").unwrap(), 0.25);
        assert_eq!(EpsSpec::Number(0.5).resolve("eps").unwrap(), 0.5);
        assert!(EpsSpec::Text("8over255".into()).resolve("eps").is_err());
        assert!(EpsSpec::Text("1/0".into()).resolve("eps").is_err());
    }

    #[test]
    fn spec_defaults_by_family() {
        let spec = AttackSpec {
            family: "pgd".into(),
            norm: Some("l2".into()),
            eps: None,
            steps: None,
            alpha: None,
            random_init: None,
            c: None,
            kappa: None,
            lr: None,
        };
        let cfg = spec.build().unwrap();
        assert_eq!(cfg.epsilon, 1.0);
        assert_eq!(cfg.step_size, 0.2);
        assert_eq!(cfg.steps, 20);
        assert!(cfg.random_init);
    }

    #[test]
    fn zero_epsilon_is_allowed() {
        let mut cfg = AttackConfig::fgsm(0.0);
        cfg.validate().unwrap();
        cfg.epsilon = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_family_and_norm_error() {
        let mut spec = AttackSpec {
            family: "deepfool".into(),
            norm: None,
            eps: None,
            steps: None,
            alpha: None,
            random_init: None,
            c: None,
            kappa: None,
            lr: None,
        };
        assert!(matches!(spec.build(), Err(AttackError::UnknownFamily(_))));
        spec.family = "pgd".into();
        spec.norm = Some("l7".into());
        assert!(matches!(spec.build(), Err(AttackError::UnknownNorm(_))));
    }
}
