use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::actor::{ActionMode, PolicyConfig};
use crate::cpo::CpoConfig;
use crate::error::{Error, Result};
use crate::ingest::LogFormat;
use crate::metrics::FairnessSpec;
use crate::pmf::PmfConfig;

/// Every knob of an experiment. Read from a flat `key = value` file; see
/// [`ExperimentConfig::KEYS`] for the accepted keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: PathBuf,
    pub format: LogFormat,
    pub split_ratio: f64,
    pub min_interactions: usize,
    pub quantile: f64,
    /// Embedding file; empty means `<out>/embeddings.emb`.
    pub embeddings: PathBuf,
    pub emb_dim: usize,
    pub pmf_epochs: usize,
    pub pmf_lr: f64,
    pub pmf_l2: f64,
    pub pmf_batch: usize,
    pub history_len: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub log_std_init: f64,
    pub k: usize,
    pub t: usize,
    pub rounds: usize,
    pub batch_users: usize,
    pub gamma_r: f64,
    pub gamma_c: f64,
    pub gae_lambda: f64,
    pub delta: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    pub cg_iters: usize,
    pub damping: f64,
    pub critic_iters: usize,
    pub alpha: Option<f64>,
    pub alpha_prime: Option<f64>,
    pub rating_threshold: Option<f64>,
    pub eval_k: Vec<usize>,
    pub long_steps: usize,
    pub update_every: usize,
    pub long_mode: ActionMode,
    pub regroup_every: usize,
    pub baseline_rounds: usize,
    pub baseline_k: usize,
    /// Candidate pool for reranking baselines; 0 means twice the list length.
    pub candidates: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let cpo = CpoConfig::default();
        let pmf = PmfConfig::default();
        let policy = PolicyConfig::default();
        ExperimentConfig {
            data: PathBuf::from("data/ml-100k/u.data"),
            format: LogFormat::Tsv100k,
            split_ratio: 0.8,
            min_interactions: 10,
            quantile: 0.2,
            embeddings: PathBuf::new(),
            emb_dim: pmf.d,
            pmf_epochs: pmf.epochs,
            pmf_lr: pmf.lr,
            pmf_l2: pmf.l2,
            pmf_batch: pmf.batch_size,
            history_len: policy.history_len,
            gru_hidden: policy.gru_hidden,
            gru_layers: policy.gru_layers,
            actor_hidden: policy.mlp_hidden.clone(),
            critic_hidden: vec![128, 128],
            log_std_init: policy.log_std_init,
            k: 20,
            t: 20,
            rounds: 100,
            batch_users: 64,
            gamma_r: cpo.gamma_r,
            gamma_c: cpo.gamma_c,
            gae_lambda: cpo.gae_lambda,
            delta: cpo.delta,
            backtrack_ratio: cpo.backtrack_ratio,
            max_backtracks: cpo.max_backtracks,
            cg_iters: cpo.cg_iters,
            damping: cpo.damping,
            critic_iters: cpo.critic_iters,
            alpha: None,
            alpha_prime: None,
            rating_threshold: None,
            eval_k: vec![5, 10, 20],
            long_steps: 400,
            update_every: 20,
            long_mode: ActionMode::Stochastic,
            regroup_every: 1,
            baseline_rounds: 4,
            baseline_k: 100,
            candidates: 0,
            checkpoint_every: 0,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn format_name(f: LogFormat) -> &'static str {
    match f {
        LogFormat::Tsv100k => "tsv-100k",
        LogFormat::DoubleColon1m => "dcolon-1m",
    }
}

fn mode_name(m: ActionMode) -> &'static str {
    match m {
        ActionMode::Stochastic => "stochastic",
        ActionMode::Greedy => "greedy",
    }
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data", "format", "split_ratio", "min_interactions", "quantile", "embeddings", "emb_dim", "pmf_epochs",
        "pmf_lr", "pmf_l2", "pmf_batch", "history_len", "gru_hidden", "gru_layers", "actor_hidden",
        "critic_hidden", "log_std_init", "k", "t", "rounds", "batch_users", "gamma_r", "gamma_c", "gae_lambda",
        "delta", "backtrack_ratio", "max_backtracks", "cg_iters", "damping", "critic_iters", "alpha",
        "alpha_prime", "rating_threshold", "eval_k", "long_steps", "update_every", "long_mode", "regroup_every",
        "baseline_rounds", "baseline_k", "candidates", "checkpoint_every", "seed", "out",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data" => self.data = PathBuf::from(v),
            "format" => self.format = v.parse()?,
            "split_ratio" => self.split_ratio = parse(key, v)?,
            "min_interactions" => self.min_interactions = parse(key, v)?,
            "quantile" => self.quantile = parse(key, v)?,
            "embeddings" => self.embeddings = PathBuf::from(v),
            "emb_dim" => self.emb_dim = parse(key, v)?,
            "pmf_epochs" => self.pmf_epochs = parse(key, v)?,
            "pmf_lr" => self.pmf_lr = parse(key, v)?,
            "pmf_l2" => self.pmf_l2 = parse(key, v)?,
            "pmf_batch" => self.pmf_batch = parse(key, v)?,
            "history_len" => self.history_len = parse(key, v)?,
            "gru_hidden" => self.gru_hidden = parse(key, v)?,
            "gru_layers" => self.gru_layers = parse(key, v)?,
            "actor_hidden" => self.actor_hidden = parse_list(key, v)?,
            "critic_hidden" => self.critic_hidden = parse_list(key, v)?,
            "log_std_init" => self.log_std_init = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "t" => self.t = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "batch_users" => self.batch_users = parse(key, v)?,
            "gamma_r" => self.gamma_r = parse(key, v)?,
            "gamma_c" => self.gamma_c = parse(key, v)?,
            "gae_lambda" => self.gae_lambda = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "backtrack_ratio" => self.backtrack_ratio = parse(key, v)?,
            "max_backtracks" => self.max_backtracks = parse(key, v)?,
            "cg_iters" => self.cg_iters = parse(key, v)?,
            "damping" => self.damping = parse(key, v)?,
            "critic_iters" => self.critic_iters = parse(key, v)?,
            "alpha" => self.alpha = parse_opt(key, v)?,
            "alpha_prime" => self.alpha_prime = parse_opt(key, v)?,
            "rating_threshold" => self.rating_threshold = parse_opt(key, v)?,
            "eval_k" => self.eval_k = parse_list(key, v)?,
            "long_steps" => self.long_steps = parse(key, v)?,
            "update_every" => self.update_every = parse(key, v)?,
            "long_mode" => {
                self.long_mode = match v {
                    "stochastic" => ActionMode::Stochastic,
                    "greedy" => ActionMode::Greedy,
                    _ => return Err(Error::Config(format!("long_mode must be stochastic or greedy, got `{v}`"))),
                }
            }
            "regroup_every" => self.regroup_every = parse(key, v)?,
            "baseline_rounds" => self.baseline_rounds = parse(key, v)?,
            "baseline_k" => self.baseline_k = parse(key, v)?,
            "candidates" => self.candidates = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key in canonical order; `from_text(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("data", self.data.display().to_string());
        put("format", format_name(self.format).into());
        put("split_ratio", self.split_ratio.to_string());
        put("min_interactions", self.min_interactions.to_string());
        put("quantile", self.quantile.to_string());
        put("embeddings", self.embeddings.display().to_string());
        put("emb_dim", self.emb_dim.to_string());
        put("pmf_epochs", self.pmf_epochs.to_string());
        put("pmf_lr", self.pmf_lr.to_string());
        put("pmf_l2", self.pmf_l2.to_string());
        put("pmf_batch", self.pmf_batch.to_string());
        put("history_len", self.history_len.to_string());
        put("gru_hidden", self.gru_hidden.to_string());
        put("gru_layers", self.gru_layers.to_string());
        put("actor_hidden", join(&self.actor_hidden));
        put("critic_hidden", join(&self.critic_hidden));
        put("log_std_init", self.log_std_init.to_string());
        put("k", self.k.to_string());
        put("t", self.t.to_string());
        put("rounds", self.rounds.to_string());
        put("batch_users", self.batch_users.to_string());
        put("gamma_r", self.gamma_r.to_string());
        put("gamma_c", self.gamma_c.to_string());
        put("gae_lambda", self.gae_lambda.to_string());
        put("delta", self.delta.to_string());
        put("backtrack_ratio", self.backtrack_ratio.to_string());
        put("max_backtracks", self.max_backtracks.to_string());
        put("cg_iters", self.cg_iters.to_string());
        put("damping", self.damping.to_string());
        put("critic_iters", self.critic_iters.to_string());
        put("alpha", opt(self.alpha));
        put("alpha_prime", opt(self.alpha_prime));
        put("rating_threshold", opt(self.rating_threshold));
        put("eval_k", join(&self.eval_k));
        put("long_steps", self.long_steps.to_string());
        put("update_every", self.update_every.to_string());
        put("long_mode", mode_name(self.long_mode).into());
        put("regroup_every", self.regroup_every.to_string());
        put("baseline_rounds", self.baseline_rounds.to_string());
        put("baseline_k", self.baseline_k.to_string());
        put("candidates", self.candidates.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("seed", self.seed.to_string());
        put("out", self.out.display().to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.alpha.is_some() && self.alpha_prime.is_some() {
            return bad("give alpha or alpha_prime, not both");
        }
        if self.k == 0 || self.t == 0 || self.batch_users == 0 || self.history_len == 0 {
            return bad("k, t, batch_users and history_len must be positive");
        }
        if self.eval_k.is_empty() || self.eval_k.contains(&0) {
            return bad("eval_k must list positive list lengths");
        }
        if self.update_every == 0 || self.regroup_every == 0 {
            return bad("update_every and regroup_every must be positive");
        }
        if self.emb_dim == 0 {
            return bad("emb_dim must be positive");
        }
        self.cpo(0.0).validate()
    }

    /// The fairness level; exactly one of `alpha` and `alpha_prime` must be set.
    pub fn fairness(&self, k: usize, t: usize) -> Result<FairnessSpec> {
        match (self.alpha, self.alpha_prime) {
            (Some(a), None) => FairnessSpec::from_alpha(a, k, t, self.gamma_c),
            (None, Some(a)) => FairnessSpec::from_alpha_prime(a, k, t, self.gamma_c),
            _ => Err(Error::Config("exactly one of alpha and alpha_prime must be set".into())),
        }
    }

    pub fn cpo(&self, cost_limit: f64) -> CpoConfig {
        CpoConfig {
            delta: self.delta,
            cost_limit,
            backtrack_ratio: self.backtrack_ratio,
            max_backtracks: self.max_backtracks,
            gamma_r: self.gamma_r,
            gamma_c: self.gamma_c,
            gae_lambda: self.gae_lambda,
            cg_iters: self.cg_iters,
            damping: self.damping,
            critic_iters: self.critic_iters,
        }
    }

    pub fn pmf(&self) -> PmfConfig {
        PmfConfig {
            d: self.emb_dim,
            epochs: self.pmf_epochs,
            lr: self.pmf_lr,
            l2: self.pmf_l2,
            batch_size: self.pmf_batch,
        }
    }

    /// Proposal rows cover the training list and every evaluation length.
    pub fn policy(&self) -> PolicyConfig {
        let k = self.eval_k.iter().copied().chain([self.k]).max().unwrap_or(self.k);
        PolicyConfig {
            k,
            history_len: self.history_len,
            gru_hidden: self.gru_hidden,
            gru_layers: self.gru_layers,
            mlp_hidden: self.actor_hidden.clone(),
            log_std_init: self.log_std_init,
        }
    }

    pub fn embeddings_path(&self) -> PathBuf {
        if self.embeddings.as_os_str().is_empty() {
            self.out.join("embeddings.emb")
        } else {
            self.embeddings.clone()
        }
    }
}
