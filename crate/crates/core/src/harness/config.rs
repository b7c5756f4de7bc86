//! Experiment configuration: defaults, a flat sectioned key-value file
//! format, CLI-style `section.key=value` overrides, validation, and a
//! canonical resolved rendering (stable key order, so identical configs
//! produce identical `config.resolved` bytes).

use crate::consensus::{Aggregation, CapoConfig, CarryMode};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::optim::{PpoConfig, TrpoConfig};
use crate::rollout::ValueFitConfig;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ppo,
    PpoKx,
    Trpo,
    PpoSwa,
    BestOfK,
    CapoAvg,
    CapoLogop,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ppo,
        Method::PpoKx,
        Method::Trpo,
        Method::PpoSwa,
        Method::BestOfK,
        Method::CapoAvg,
        Method::CapoLogop,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Method::Ppo => "ppo",
            Method::PpoKx => "ppo_kx",
            Method::Trpo => "trpo",
            Method::PpoSwa => "ppo_swa",
            Method::BestOfK => "best_of_k",
            Method::CapoAvg => "capo_avg",
            Method::CapoLogop => "capo_logop",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }

    /// Methods that run the consensus generation loop (with warmup).
    pub fn is_capo(&self) -> bool {
        matches!(self, Method::CapoAvg | Method::CapoLogop)
    }

    /// Methods that fan a batch out to K experts.
    pub fn uses_experts(&self) -> bool {
        self.is_capo() || matches!(self, Method::BestOfK)
    }

    pub fn aggregation(&self) -> Option<Aggregation> {
        match self {
            Method::CapoAvg => Some(Aggregation::ParamAvg),
            Method::CapoLogop => Some(Aggregation::Logop),
            _ => None,
        }
    }
}

/// Network architecture and initialization gains shared by the policy mean
/// net and the value net.
#[derive(Debug, Clone)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub hidden_gain: f64,
    pub policy_head_gain: f64,
    pub value_head_gain: f64,
    pub log_std_init: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![64, 64],
            hidden_gain: 1.0,
            policy_head_gain: 0.01,
            value_head_gain: 1.0,
            log_std_init: 0.0,
            log_std_min: -20.0,
            log_std_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FisherSettings {
    pub damping: f64,
    pub cg_iters: usize,
}

impl Default for FisherSettings {
    fn default() -> Self {
        FisherSettings {
            damping: 0.1,
            cg_iters: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub method: Method,
    pub env: EnvKind,
    pub total_frames: u64,
    pub seeds: Vec<u64>,
    pub num_envs: usize,
    pub horizon: usize,
    pub eval_episodes: usize,
    pub diagnostics: bool,
    /// Evaluation samples actions instead of taking the mean.
    pub stochastic_eval: bool,
    pub net: NetConfig,
    pub ppo: PpoConfig,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value: ValueFitConfig,
    pub trpo: TrpoConfig,
    pub capo: CapoConfig,
    pub fisher: FisherSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Ppo,
            env: EnvKind::PointMass,
            total_frames: 100_000,
            seeds: vec![1],
            num_envs: 8,
            horizon: 512,
            eval_episodes: 20,
            diagnostics: false,
            stochastic_eval: false,
            net: NetConfig::default(),
            ppo: PpoConfig::default(),
            gamma: 0.99,
            gae_lambda: 0.95,
            value: ValueFitConfig::default(),
            trpo: TrpoConfig::default(),
            capo: CapoConfig::default(),
            fisher: FisherSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn for_method(method: Method, env: EnvKind) -> Self {
        let mut cfg = ExperimentConfig {
            method,
            env,
            ..ExperimentConfig::default()
        };
        if let Some(agg) = method.aggregation() {
            cfg.capo.aggregation = agg;
        }
        cfg
    }

    pub fn batch_frames(&self) -> u64 {
        (self.num_envs * self.horizon) as u64
    }

    /// Method-config consistency plus the per-module config invariants.
    /// Runs before any work.
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.trpo.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        if self.num_envs == 0 || self.horizon == 0 {
            return Err(Error::Config("num_envs and horizon must be >= 1".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be >= 1".into()));
        }
        if self.batch_frames() > self.total_frames {
            return Err(Error::Config(format!(
                "total_frames {} below one batch of {}",
                self.total_frames,
                self.batch_frames()
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) && self.gamma != 1.0 {
            return Err(Error::Config("gamma must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gae_lambda must be in [0, 1]".into()));
        }
        if self.method.uses_experts() || self.method == Method::PpoKx {
            if self.capo.k < 2 {
                return Err(Error::Config(format!(
                    "method {} requires capo.k >= 2",
                    self.method.id()
                )));
            }
            self.capo.validate()?;
        }
        if let Some(agg) = self.method.aggregation() {
            if agg != self.capo.aggregation {
                return Err(Error::Config(format!(
                    "method {} fixes aggregation to {}",
                    self.method.id(),
                    agg.id()
                )));
            }
        }
        Ok(())
    }

    /// Build from a sectioned key-value map (missing keys take defaults;
    /// unknown keys are rejected).
    pub fn from_map(map: &BTreeMap<(String, String), String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut value_overridden = [false; 3]; // epochs, minibatches, lr
        let mut aggregation_set = false;
        for ((section, key), raw) in map {
            let ctx = format!("{section}.{key}");
            let fail = |msg: &str| Error::Config(format!("{ctx}: {msg}"));
            match (section.as_str(), key.as_str()) {
                ("run", "method") => cfg.method = Method::parse(raw)?,
                ("run", "env") => cfg.env = EnvKind::from_id(raw)?,
                ("run", "total_frames") => cfg.total_frames = parse_num(raw, &ctx)?,
                ("run", "seeds") => cfg.seeds = parse_list(raw, &ctx)?,
                ("run", "num_envs") => cfg.num_envs = parse_num(raw, &ctx)?,
                ("run", "horizon") => cfg.horizon = parse_num(raw, &ctx)?,
                ("run", "eval_episodes") => cfg.eval_episodes = parse_num(raw, &ctx)?,
                ("run", "diagnostics") => cfg.diagnostics = parse_bool(raw, &ctx)?,
                ("run", "stochastic_eval") => cfg.stochastic_eval = parse_bool(raw, &ctx)?,
                ("net", "hidden") => cfg.net.hidden = parse_list(raw, &ctx)?,
                ("net", "hidden_gain") => cfg.net.hidden_gain = parse_num(raw, &ctx)?,
                ("net", "policy_head_gain") => cfg.net.policy_head_gain = parse_num(raw, &ctx)?,
                ("net", "value_head_gain") => cfg.net.value_head_gain = parse_num(raw, &ctx)?,
                ("net", "log_std_init") => cfg.net.log_std_init = parse_num(raw, &ctx)?,
                ("net", "log_std_min") => cfg.net.log_std_min = parse_num(raw, &ctx)?,
                ("net", "log_std_max") => cfg.net.log_std_max = parse_num(raw, &ctx)?,
                ("ppo", "clip_eps") => cfg.ppo.clip_eps = parse_num(raw, &ctx)?,
                ("ppo", "epochs") => cfg.ppo.epochs = parse_num(raw, &ctx)?,
                ("ppo", "minibatches") => cfg.ppo.minibatches = parse_num(raw, &ctx)?,
                ("ppo", "lr") => cfg.ppo.lr = parse_num(raw, &ctx)?,
                ("ppo", "lr_anneal") => cfg.ppo.lr_anneal = parse_bool(raw, &ctx)?,
                ("ppo", "entropy_coef") => cfg.ppo.entropy_coef = parse_num(raw, &ctx)?,
                ("ppo", "max_grad_norm") => cfg.ppo.max_grad_norm = parse_num(raw, &ctx)?,
                ("ppo", "target_kl") => cfg.ppo.target_kl = parse_num(raw, &ctx)?,
                ("ppo", "gamma") => cfg.gamma = parse_num(raw, &ctx)?,
                ("ppo", "gae_lambda") => cfg.gae_lambda = parse_num(raw, &ctx)?,
                ("value", "epochs") => {
                    cfg.value.epochs = parse_num(raw, &ctx)?;
                    value_overridden[0] = true;
                }
                ("value", "minibatches") => {
                    cfg.value.minibatches = parse_num(raw, &ctx)?;
                    value_overridden[1] = true;
                }
                ("value", "lr") => {
                    cfg.value.lr = parse_num(raw, &ctx)?;
                    value_overridden[2] = true;
                }
                ("trpo", "max_kl") => cfg.trpo.max_kl = parse_num(raw, &ctx)?,
                ("trpo", "damping") => cfg.trpo.damping = parse_num(raw, &ctx)?,
                ("trpo", "cg_iters") => cfg.trpo.cg_iters = parse_num(raw, &ctx)?,
                ("trpo", "backtrack_coef") => cfg.trpo.backtrack_coef = parse_num(raw, &ctx)?,
                ("trpo", "max_backtracks") => cfg.trpo.max_backtracks = parse_num(raw, &ctx)?,
                ("capo", "k") => cfg.capo.k = parse_num(raw, &ctx)?,
                ("capo", "aggregation") => {
                    cfg.capo.aggregation = Aggregation::parse(raw)?;
                    aggregation_set = true;
                }
                ("capo", "carry_mode") => cfg.capo.carry_mode = CarryMode::parse(raw)?,
                ("capo", "warmup_frac") => cfg.capo.warmup_frac = parse_num(raw, &ctx)?,
                ("capo", "trust_delta") => cfg.capo.trust_delta = parse_num(raw, &ctx)?,
                ("capo", "distill_epochs") => cfg.capo.distill_epochs = parse_num(raw, &ctx)?,
                ("capo", "distill_lr") => cfg.capo.distill_lr = parse_num(raw, &ctx)?,
                ("fisher", "damping") => cfg.fisher.damping = parse_num(raw, &ctx)?,
                ("fisher", "cg_iters") => cfg.fisher.cg_iters = parse_num(raw, &ctx)?,
                _ => return Err(fail("unknown key")),
            }
        }
        // Value-fit hyperparameters default to the policy optimizer's.
        if !value_overridden[0] {
            cfg.value.epochs = cfg.ppo.epochs;
        }
        if !value_overridden[1] {
            cfg.value.minibatches = cfg.ppo.minibatches;
        }
        if !value_overridden[2] {
            cfg.value.lr = cfg.ppo.lr;
        }
        // The consensus methods pin the aggregation; an explicit conflicting
        // key is a config error caught by validate().
        if let Some(agg) = cfg.method.aggregation() {
            if !aggregation_set {
                cfg.capo.aggregation = agg;
            }
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_map(&parse_sections(text)?)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Canonical rendering of every resolved key in fixed order.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let kv = |out: &mut String, k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        out.push_str("[run]\n");
        kv(&mut out, "method", self.method.id().into());
        kv(&mut out, "env", self.env.id().into());
        kv(&mut out, "total_frames", self.total_frames.to_string());
        kv(
            &mut out,
            "seeds",
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(&mut out, "num_envs", self.num_envs.to_string());
        kv(&mut out, "horizon", self.horizon.to_string());
        kv(&mut out, "eval_episodes", self.eval_episodes.to_string());
        kv(&mut out, "diagnostics", self.diagnostics.to_string());
        kv(&mut out, "stochastic_eval", self.stochastic_eval.to_string());
        out.push_str("\n[net]\n");
        kv(
            &mut out,
            "hidden",
            self.net
                .hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv(&mut out, "hidden_gain", self.net.hidden_gain.to_string());
        kv(&mut out, "policy_head_gain", self.net.policy_head_gain.to_string());
        kv(&mut out, "value_head_gain", self.net.value_head_gain.to_string());
        kv(&mut out, "log_std_init", self.net.log_std_init.to_string());
        kv(&mut out, "log_std_min", self.net.log_std_min.to_string());
        kv(&mut out, "log_std_max", self.net.log_std_max.to_string());
        out.push_str("\n[ppo]\n");
        kv(&mut out, "clip_eps", self.ppo.clip_eps.to_string());
        kv(&mut out, "epochs", self.ppo.epochs.to_string());
        kv(&mut out, "minibatches", self.ppo.minibatches.to_string());
        kv(&mut out, "lr", self.ppo.lr.to_string());
        kv(&mut out, "lr_anneal", self.ppo.lr_anneal.to_string());
        kv(&mut out, "entropy_coef", self.ppo.entropy_coef.to_string());
        kv(&mut out, "max_grad_norm", self.ppo.max_grad_norm.to_string());
        kv(&mut out, "target_kl", self.ppo.target_kl.to_string());
        kv(&mut out, "gamma", self.gamma.to_string());
        kv(&mut out, "gae_lambda", self.gae_lambda.to_string());
        out.push_str("\n[value]\n");
        kv(&mut out, "epochs", self.value.epochs.to_string());
        kv(&mut out, "minibatches", self.value.minibatches.to_string());
        kv(&mut out, "lr", self.value.lr.to_string());
        out.push_str("\n[trpo]\n");
        kv(&mut out, "max_kl", self.trpo.max_kl.to_string());
        kv(&mut out, "damping", self.trpo.damping.to_string());
        kv(&mut out, "cg_iters", self.trpo.cg_iters.to_string());
        kv(&mut out, "backtrack_coef", self.trpo.backtrack_coef.to_string());
        kv(&mut out, "max_backtracks", self.trpo.max_backtracks.to_string());
        out.push_str("\n[capo]\n");
        kv(&mut out, "k", self.capo.k.to_string());
        kv(&mut out, "aggregation", self.capo.aggregation.id().into());
        kv(&mut out, "carry_mode", self.capo.carry_mode.id().into());
        kv(&mut out, "warmup_frac", self.capo.warmup_frac.to_string());
        kv(&mut out, "trust_delta", self.capo.trust_delta.to_string());
        kv(&mut out, "distill_epochs", self.capo.distill_epochs.to_string());
        kv(&mut out, "distill_lr", self.capo.distill_lr.to_string());
        out.push_str("\n[fisher]\n");
        kv(&mut out, "damping", self.fisher.damping.to_string());
        kv(&mut out, "cg_iters", self.fisher.cg_iters.to_string());
        out
    }
}

/// Parse the flat sectioned format: `[section]` headers, `key = value`
/// lines, `#` comments, blank lines ignored.
pub fn parse_sections(text: &str) -> Result<BTreeMap<(String, String), String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {}: unterminated section", lineno + 1)))?;
            section = name.trim().to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        if section.is_empty() {
            return Err(Error::Config(format!(
                "line {}: key outside any [section]",
                lineno + 1
            )));
        }
        out.insert(
            (section.clone(), key.trim().to_string()),
            value.trim().to_string(),
        );
    }
    Ok(out)
}

/// Apply `section.key=value` overrides on top of a parsed map.
pub fn apply_overrides(
    map: &mut BTreeMap<(String, String), String>,
    sets: &[String],
) -> Result<()> {
    for set in sets {
        let (path, value) = set
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set '{set}': expected section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("--set '{set}': expected section.key=value")))?;
        map.insert(
            (section.trim().to_string(), key.trim().to_string()),
            value.trim().to_string(),
        );
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(raw: &str, ctx: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{ctx}: cannot parse '{raw}'")))
}

fn parse_bool(raw: &str, ctx: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{ctx}: cannot parse bool '{raw}'"))),
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, ctx: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(s, ctx))
        .collect()
}
