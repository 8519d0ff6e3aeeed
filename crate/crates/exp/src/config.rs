//! Experiment configuration: a TOML file deep-merged over profile defaults.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use pinnx_core::activations::{ActivationKind, Candidate, Family};
use pinnx_core::network::{Architecture, DEFAULT_HIDDEN_LAYERS, DEFAULT_WIDTH};
use pinnx_core::optim::LbfgsConfig;
use pinnx_core::pde::Equation;
use pinnx_core::refsolver::GridSpec;
use pinnx_core::trainer::{InitialConfig, SplitSpec, TlConfig, TlMethod};

use crate::error::{ExpError, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 8k collocation points, up to 5000 L-BFGS iterations.
    #[default]
    Full,
    /// 2k collocation points and a shorter early-stopping horizon.
    Desk,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Full => "full",
            Profile::Desk => "desk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationConfig {
    pub family: Family,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
}

impl ActivationConfig {
    pub fn kind(&self) -> ActivationKind {
        ActivationKind { family: self.family, n: self.n, candidates: self.candidates.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_layers: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run id; directory name under `output`.
    pub name: String,
    pub equation: Equation,
    pub profile: Profile,
    pub seeds: usize,
    pub seed_base: u64,
    pub output: PathBuf,
    /// Reference grid file; defaults to `<output>/reference/<equation>.grid`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    pub activation: ActivationConfig,
    pub network: NetworkConfig,
    pub initial: InitialConfig,
    pub transfer: TlConfig,
    pub split: SplitSpec,
    pub grid: GridSpec,
}

/// Best-performing term count per family and equation.
pub fn default_terms(family: Family, equation: Equation) -> usize {
    match family {
        Family::Tanh | Family::XPlusSinSq => 1,
        Family::Abu => default_candidates(equation).len(),
        Family::LcTanh | Family::LcSin => 3,
        Family::LcXSinSq => 2,
    }
}

/// Best ABU blend per equation.
pub fn default_candidates(equation: Equation) -> Vec<Candidate> {
    use Candidate::*;
    match equation {
        Equation::AllenCahn => vec![Tanh, Gelu, Sigmoid],
        Equation::Kdv => vec![Tanh, Gelu, Sin],
        Equation::Burgers => vec![Tanh, Gelu, Sigmoid, Sin],
    }
}

pub fn initial_defaults(profile: Profile) -> InitialConfig {
    match profile {
        Profile::Full => InitialConfig::default(),
        Profile::Desk => InitialConfig {
            collocation_points: 2000,
            lbfgs: LbfgsConfig { max_iters: 1000, ..LbfgsConfig::default() },
            check_every: 10,
            patience: 10,
            ..InitialConfig::default()
        },
    }
}

impl ExperimentConfig {
    pub fn defaults(equation: Equation, profile: Profile) -> Self {
        ExperimentConfig {
            name: String::new(),
            equation,
            profile,
            seeds: 10,
            seed_base: 0,
            output: PathBuf::from("runs"),
            reference: None,
            activation: ActivationConfig { family: Family::Tanh, n: 1, candidates: Vec::new() },
            network: NetworkConfig { hidden_layers: DEFAULT_HIDDEN_LAYERS, width: DEFAULT_WIDTH },
            initial: initial_defaults(profile),
            transfer: TlConfig::for_equation(equation, TlMethod::L2),
            split: SplitSpec::default(),
            grid: GridSpec::standard(equation),
        }
    }

    /// Parses TOML text. Keys absent from the file take the defaults of the
    /// selected equation and profile; unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| ExpError::Config(format!("bad TOML: {e}")))?;
        Self::from_table(user)
    }

    pub fn from_table(mut user: toml::Table) -> Result<Self> {
        let equation = match user.get("equation") {
            Some(toml::Value::String(s)) => {
                Equation::from_id(s).ok_or_else(|| ExpError::Config(format!("unknown equation '{s}'")))?
            }
            Some(_) => return Err(ExpError::Config("'equation' must be a string".into())),
            None => return Err(ExpError::Config("'equation' is required".into())),
        };
        let profile = match user.get("profile") {
            None => Profile::default(),
            Some(v) => v.clone().try_into().map_err(|e| ExpError::Config(format!("bad profile: {e}")))?,
        };
        // canonical spellings so the merged table deserializes
        user.insert("equation".into(), toml::Value::String(equation.id().into()));
        fill_activation_defaults(&mut user, equation)?;

        let defaults = Self::defaults(equation, profile);
        let mut merged = toml::Value::try_from(&defaults).map_err(|e| ExpError::Config(e.to_string()))?;
        let mut unknown = Vec::new();
        merge(&mut merged, toml::Value::Table(user), "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ExpError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let mut cfg: ExperimentConfig = merged.try_into().map_err(|e| ExpError::Config(format!("{e}")))?;
        if cfg.name.is_empty() {
            cfg.name = format!("{}-{}", cfg.equation.id(), slug(&cfg.activation.kind().label()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ExpError::Config(m) => ExpError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Ok(Architecture::new(self.network.hidden_layers, self.network.width, self.activation.kind())?)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.join(&self.name)
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed_base + i).collect()
    }

    pub fn reference_path(&self) -> PathBuf {
        self.reference
            .clone()
            .unwrap_or_else(|| self.output.join("reference").join(format!("{}.grid", self.equation.id())))
    }

    /// Transfer settings with `method` substituted.
    pub fn transfer_for(&self, method: TlMethod) -> TlConfig {
        TlConfig { method, ..self.transfer }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name != slug(&self.name) {
            return Err(ExpError::Config(format!("run name '{}' must be alphanumeric with '-', '_' or '.'", self.name)));
        }
        if self.seeds == 0 {
            return Err(ExpError::Config("seeds must be at least 1".into()));
        }
        self.architecture()?;
        self.initial.validate()?;
        self.transfer.validate()?;
        self.split.validate()?;
        if self.transfer.fisher_points == 0 {
            return Err(ExpError::Config("transfer.fisher_points must be at least 1".into()));
        }
        if self.split.t_test != 1.0 {
            return Err(ExpError::Config(format!("split.t_test must be 1.0, got {}", self.split.t_test)));
        }
        let g = &self.grid;
        if g.nx < 2 || g.nt < 2 || g.nx_internal < 64 {
            return Err(ExpError::Config("grid needs nx >= 2, nt >= 2 and nx_internal >= 64".into()));
        }
        if !(g.rtol > 0.0 && g.atol > 0.0) {
            return Err(ExpError::Config("grid tolerances must be positive".into()));
        }
        let steps = (g.nt - 1) as f64;
        for (label, t) in [("t_train", self.split.t_train), ("t_val", self.split.t_val)] {
            if ((t * steps).round() - t * steps).abs() > 1e-9 {
                return Err(ExpError::Config(format!("split.{label} = {t} is not a time of the {}-row grid", g.nt)));
            }
        }
        Ok(())
    }
}

/// Lower-case, filesystem-safe rendering of a label.
pub fn slug(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

fn fill_activation_defaults(user: &mut toml::Table, equation: Equation) -> Result<()> {
    let Some(toml::Value::Table(act)) = user.get_mut("activation") else {
        return Ok(());
    };
    let family = match act.get("family") {
        Some(v) => v.clone().try_into::<Family>().map_err(|e| ExpError::Config(format!("activation.family: {e}")))?,
        None => Family::Tanh,
    };
    act.insert("family".into(), toml::Value::String(family.name().into()));
    if family == Family::Abu && !act.contains_key("candidates") {
        let names = default_candidates(equation).into_iter().map(|c| toml::Value::String(c.name().into()));
        act.insert("candidates".into(), toml::Value::Array(names.collect()));
    }
    if !act.contains_key("n") {
        let n = match act.get("candidates") {
            Some(toml::Value::Array(a)) if family == Family::Abu => a.len(),
            _ => default_terms(family, equation),
        };
        act.insert("n".into(), toml::Value::Integer(n as i64));
    }
    Ok(())
}

/// Keys that may appear in a file although the defaults leave them unset.
const OPTIONAL_KEYS: [&str; 2] = ["reference", "activation.candidates"];

fn merge(base: &mut toml::Value, over: toml::Value, path: &str, unknown: &mut Vec<String>) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &p, unknown),
                    None if OPTIONAL_KEYS.contains(&p.as_str()) => {
                        b.insert(k, v);
                    }
                    None => unknown.push(p),
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_profile_defaults() {
        let c = ExperimentConfig::from_toml_str("equation = \"kdv\"\nprofile = \"desk\"").unwrap();
        assert_eq!(c.initial.collocation_points, 2000);
        assert_eq!(c.transfer.lr, 5e-2);
        assert_eq!(c.grid.nx, 500);
        assert_eq!(c.name, "kdv-tanh");
        assert_eq!(c.seeds, 10);
    }

    #[test]
    fn nested_override_keeps_siblings() {
        let c = ExperimentConfig::from_toml_str("equation = \"ac\"\n[initial.lbfgs]\nmax_iters = 7").unwrap();
        assert_eq!(c.initial.lbfgs.max_iters, 7);
        assert_eq!(c.initial.lbfgs.history, LbfgsConfig::default().history);
        assert_eq!(c.initial.collocation_points, 8000);
    }

    #[test]
    fn activation_term_count_follows_family() {
        let c = ExperimentConfig::from_toml_str("equation = \"kdv\"\n[activation]\nfamily = \"lcxsin2\"").unwrap();
        assert_eq!(c.activation.n, 2);
        let c = ExperimentConfig::from_toml_str("equation = \"ac\"\n[activation]\nfamily = \"abu\"").unwrap();
        assert_eq!(c.activation.candidates, vec![Candidate::Tanh, Candidate::Gelu, Candidate::Sigmoid]);
        assert_eq!(c.name, "ac-abu-tanh-gelu-sigmoid");
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(ExperimentConfig::from_toml_str("equation = \"ac\"\nsedes = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("equation = \"heat\"").is_err());
        assert!(ExperimentConfig::from_toml_str("equation = \"ac\"\n[transfer]\nk = 5000").is_err());
        assert!(ExperimentConfig::from_toml_str("equation = \"ac\"\n[activation]\nfamily = \"tanh\"\nn = 2").is_err());
        assert!(ExperimentConfig::from_toml_str("equation = \"ac\"\n[split]\nt_train = 0.4999").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::from_toml_str("equation = \"burgers\"\n[activation]\nfamily = \"abu\"").unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(c, back);
    }
}
