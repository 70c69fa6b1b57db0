use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::gaussian::{log_density, log_density_grad};
use crate::nn::{GaussianHead, GaussianPolicyModel, Gru, Layout, Mlp};
use crate::pmf::EmbeddingTable;
use crate::rng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    /// Rows of the proposal matrix.
    pub k: usize,
    pub history_len: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub mlp_hidden: Vec<usize>,
    /// Initial log standard deviation of every proposal entry.
    pub log_std_init: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            k: 20,
            history_len: 5,
            gru_hidden: 64,
            gru_layers: 2,
            mlp_hidden: vec![128, 128],
            log_std_init: -0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserState {
    pub user_id: usize,
    /// Oldest first.
    pub history: Vec<usize>,
    /// `[e_u; GRU(history)]` under the parameters that produced it.
    pub encoded: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    pub items: Vec<usize>,
    /// Flattened `K x d` proposal matrix.
    pub proposal: Vec<f64>,
    pub log_density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Stochastic,
    Greedy,
}

/// Gaussian policy over proposal matrices, conditioned on a GRU encoding of
/// the user's recent positive items.
#[derive(Debug, Clone)]
pub struct Policy {
    cfg: PolicyConfig,
    layout: Layout,
    gru: Gru,
    head: Mlp,
    embeddings: Arc<EmbeddingTable>,
    /// Leading proposal rows the policy acts with; the rest are ignored.
    active: usize,
}

impl Policy {
    pub fn new(cfg: PolicyConfig, embeddings: Arc<EmbeddingTable>) -> Result<Self> {
        if cfg.k == 0 || cfg.history_len == 0 || cfg.gru_hidden == 0 || cfg.gru_layers == 0 {
            return Err(Error::InvalidArgument(
                "policy sizes (k, history_len, gru_hidden, gru_layers) must be positive".into(),
            ));
        }
        let d = embeddings.d;
        let mut layout = Layout::new();
        let gru = Gru::new(&mut layout, "gru", d, cfg.gru_hidden, cfg.gru_layers);
        let mut sizes = vec![d + cfg.gru_hidden];
        sizes.extend(&cfg.mlp_hidden);
        sizes.push(2 * cfg.k * d);
        let head = Mlp::new(&mut layout, "head", &sizes);
        let active = cfg.k;
        Ok(Policy { cfg, layout, gru, head, embeddings, active })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn d(&self) -> usize {
        self.embeddings.d
    }

    pub fn state_size(&self) -> usize {
        self.d() + self.cfg.gru_hidden
    }

    /// Copy that acts with only the first `k` proposal rows. Densities and
    /// gradients then cover just those rows.
    pub fn with_active_rows(&self, k: usize) -> Result<Policy> {
        if k == 0 || k > self.cfg.k {
            return Err(Error::InvalidArgument(format!("active rows {k} must lie in 1..={}", self.cfg.k)));
        }
        let mut p = self.clone();
        p.active = k;
        Ok(p)
    }

    pub fn active_rows(&self) -> usize {
        self.active
    }

    fn action_dim(&self) -> usize {
        self.active * self.d()
    }

    fn full_dim(&self) -> usize {
        self.cfg.k * self.d()
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "policy-init");
        let mut params = vec![0.0; self.layout.len()];
        self.gru.init(&mut params, &mut r, 1.0);
        self.head.init(&mut params, &mut r, 0.01);
        let bias = self
            .layout
            .range(&format!("head.l{}.bias", self.cfg.mlp_hidden.len()))
            .expect("head output bias");
        let dim = self.full_dim();
        for p in &mut params[bias.start + dim..bias.end] {
            *p = self.cfg.log_std_init;
        }
        params
    }

    fn sequence(&self, history: &[usize]) -> Result<Vec<Vec<f64>>> {
        history
            .iter()
            .map(|&i| {
                if i >= self.embeddings.n_items {
                    Err(Error::OutOfRange { what: "item", index: i, len: self.embeddings.n_items })
                } else {
                    Ok(self.embeddings.item(i).to_vec())
                }
            })
            .collect()
    }

    fn check_user(&self, user: usize) -> Result<()> {
        if user >= self.embeddings.n_users {
            return Err(Error::OutOfRange { what: "user", index: user, len: self.embeddings.n_users });
        }
        Ok(())
    }

    pub fn encode_state(&self, params: &[f64], user: usize, history: &[usize]) -> Result<UserState> {
        if history.len() != self.cfg.history_len {
            return Err(Error::Shape { expected: self.cfg.history_len, got: history.len() });
        }
        self.check_user(user)?;
        let h = self.gru.forward(params, &self.sequence(history)?)?;
        let mut encoded = self.embeddings.user(user).to_vec();
        encoded.extend(h);
        Ok(UserState { user_id: user, history: history.to_vec(), encoded })
    }

    fn split_head(&self, out: &[f64]) -> GaussianHead {
        let (dim, full) = (self.action_dim(), self.full_dim());
        GaussianHead::new(
            out[..dim].to_vec(),
            out[full..full + dim].iter().map(|s| s.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect(),
        )
    }

    fn try_head(&self, params: &[f64], state: &UserState) -> Result<GaussianHead> {
        let fresh = self.encode_state(params, state.user_id, &state.history)?;
        Ok(self.split_head(&self.head.forward(params, &fresh.encoded)?))
    }

    /// Samples (or takes the mean of) a proposal matrix and maps its first
    /// `k` rows to distinct items. Rows pick the highest-scoring item not
    /// yet chosen and not flagged in `excluded`; ties go to the lower id.
    pub fn sample_action(
        &self,
        params: &[f64],
        state: &UserState,
        k: usize,
        mode: ActionMode,
        excluded: &[bool],
        rng: &mut impl Rng,
    ) -> Result<ActionSample> {
        if k == 0 || k > self.active {
            return Err(Error::InvalidArgument(format!(
                "list length {k} must lie in 1..={}",
                self.active
            )));
        }
        let head = self.try_head(params, state)?;
        let proposal = match mode {
            ActionMode::Stochastic => head.sample(rng),
            ActionMode::Greedy => head.mu.clone(),
        };
        let items = select_items(&proposal, k, &self.embeddings, excluded)?;
        let log_density = log_density(&head, &proposal);
        Ok(ActionSample { items, proposal, log_density })
    }

    pub fn action_log_density(&self, params: &[f64], state: &UserState, proposal: &[f64]) -> Result<f64> {
        if proposal.len() != self.action_dim() {
            return Err(Error::Shape { expected: self.action_dim(), got: proposal.len() });
        }
        Ok(log_density(&self.try_head(params, state)?, proposal))
    }

    /// Log-density of `proposal` and its gradient with respect to `params`.
    pub fn log_density_gradient(&self, params: &[f64], state: &UserState, proposal: &[f64]) -> (f64, Vec<f64>) {
        let head = self.head(params, state);
        let (d_mu, d_ls) = log_density_grad(&head, proposal);
        let mut grad = vec![0.0; self.n_params()];
        self.head_vjp(params, state, &d_mu, &d_ls, &mut grad);
        (log_density(&head, proposal), grad)
    }

    /// Pushes `item` into the history queue when `reward > 0`.
    pub fn update_history(&self, params: &[f64], state: &UserState, item: usize, reward: f64) -> Result<UserState> {
        if item >= self.embeddings.n_items {
            return Err(Error::OutOfRange { what: "item", index: item, len: self.embeddings.n_items });
        }
        if reward <= 0.0 {
            return Ok(state.clone());
        }
        let mut history = state.history[1..].to_vec();
        history.push(item);
        self.encode_state(params, state.user_id, &history)
    }
}

/// Row-by-row masked argmax of `W V^T` over the first `k` rows of `proposal`.
pub fn select_items(proposal: &[f64], k: usize, embeddings: &EmbeddingTable, excluded: &[bool]) -> Result<Vec<usize>> {
    let d = embeddings.d;
    let n = embeddings.n_items;
    let mut taken = vec![false; n];
    if !excluded.is_empty() {
        if excluded.len() != n {
            return Err(Error::Shape { expected: n, got: excluded.len() });
        }
        taken.copy_from_slice(excluded);
    }
    let mut items = Vec::with_capacity(k);
    for row in proposal.chunks(d).take(k) {
        let mut best: Option<(usize, f64)> = None;
        for (i, _) in taken.iter().enumerate().filter(|(_, &t)| !t) {
            let s: f64 = row.iter().zip(embeddings.item(i)).map(|(a, b)| a * b).sum();
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((i, s));
            }
        }
        let (i, _) = best.ok_or_else(|| {
            Error::InvalidArgument(format!("only {} selectable items for a list of {k}", items.len()))
        })?;
        taken[i] = true;
        items.push(i);
    }
    Ok(items)
}

impl GaussianPolicyModel for Policy {
    type Input = UserState;

    fn n_params(&self) -> usize {
        self.layout.len()
    }

    fn head(&self, params: &[f64], state: &UserState) -> GaussianHead {
        self.try_head(params, state).expect("state validated at creation")
    }

    fn head_jvp(&self, params: &[f64], state: &UserState, tangent: &[f64]) -> (GaussianHead, Vec<f64>, Vec<f64>) {
        let seq = self.sequence(&state.history).expect("valid history");
        let (h, dh) = self.gru.jvp(params, tangent, &seq).expect("valid sequence");
        let d = self.d();
        let mut s = self.embeddings.user(state.user_id).to_vec();
        s.extend(h);
        let mut ds = vec![0.0; d];
        ds.extend(dh);
        let (out, dout) = self.head.jvp(params, tangent, &s, &ds).expect("valid encoding");
        let (dim, full) = (self.action_dim(), self.full_dim());
        let d_ls = out[full..full + dim]
            .iter()
            .zip(&dout[full..full + dim])
            .map(|(o, g)| if (LOG_STD_MIN..=LOG_STD_MAX).contains(o) { *g } else { 0.0 })
            .collect();
        (self.split_head(&out), dout[..dim].to_vec(), d_ls)
    }

    fn head_vjp(&self, params: &[f64], state: &UserState, d_mu: &[f64], d_log_std: &[f64], grad: &mut [f64]) {
        let seq = self.sequence(&state.history).expect("valid history");
        let gru_cache = self.gru.forward_cached(params, &seq).expect("valid sequence");
        let mut s = self.embeddings.user(state.user_id).to_vec();
        s.extend_from_slice(gru_cache.output());
        let cache = self.head.forward_cached(params, &s).expect("valid encoding");
        let (dim, full) = (self.action_dim(), self.full_dim());
        let out = cache.output();
        let mut d_out = vec![0.0; 2 * full];
        d_out[..dim].copy_from_slice(d_mu);
        for (j, g) in d_log_std.iter().enumerate() {
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&out[full + j]) {
                d_out[full + j] = *g;
            }
        }
        let d_s = self.head.backward(params, &cache, &d_out, grad);
        self.gru.backward(params, &gru_cache, &d_s[self.d()..], grad);
    }
}
