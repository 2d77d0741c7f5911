//! Intention learner: shared observation encoder, discrete codebook with EMA
//! updates, global-state decoder and the Bernoulli guidance mask.
//!
//! Code indices are 0-based.

use std::collections::VecDeque;
use std::io::Write;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Activation, AdamConfig, Gradients, MlpSpec, Network, OutputActivation};
use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntentionConfig {
    pub codes: usize,
    pub dim: usize,
    pub history: usize,
    pub hidden: Vec<usize>,
    pub ema_rate: f64,
    pub beta: f64,
    pub train_mask_prob: f64,
    pub exec_mask_prob: f64,
    /// Lookups without a hit after which a code is reseeded.
    pub dead_code_after: u64,
    /// Capacity of the ring of recent embeddings used for reseeding.
    pub recent_capacity: usize,
}

impl Default for IntentionConfig {
    fn default() -> Self {
        Self {
            codes: 5,
            dim: 64,
            history: 4,
            hidden: vec![128],
            ema_rate: 0.01,
            beta: 0.2,
            train_mask_prob: 0.2,
            exec_mask_prob: 1.0,
            dead_code_after: 10_000,
            recent_capacity: 256,
        }
    }
}

impl IntentionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config { key: format!("intention.{key}"), message });
        if self.codes == 0 {
            return bad("codes", "must be at least 1".into());
        }
        if self.dim == 0 {
            return bad("dim", "must be at least 1".into());
        }
        if self.history == 0 {
            return bad("history", "must be at least 1".into());
        }
        for (key, v) in [
            ("ema_rate", self.ema_rate),
            ("train_mask_prob", self.train_mask_prob),
            ("exec_mask_prob", self.exec_mask_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(key, format!("must lie in [0, 1], got {v}"));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", format!("must be finite and non-negative, got {}", self.beta));
        }
        if self.recent_capacity == 0 {
            return bad("recent_capacity", "must be at least 1".into());
        }
        Ok(())
    }
}

/// The last `H` observations of one agent, oldest first, zero-padded.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationHistory<T> {
    obs_dim: usize,
    frames: VecDeque<Vec<T>>,
}

impl<T: Scalar> ObservationHistory<T> {
    pub fn new(obs_dim: usize, len: usize) -> Self {
        let frames = (0..len).map(|_| vec![T::zero(); obs_dim]).collect();
        Self { obs_dim, frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn reset(&mut self) {
        for f in &mut self.frames {
            f.fill(T::zero());
        }
    }

    pub fn push(&mut self, obs: &[T]) -> Result<()> {
        check_dim("history frame", self.obs_dim, obs.len())?;
        if self.frames.pop_front().is_some() {
            self.frames.push_back(obs.to_vec());
        }
        Ok(())
    }

    /// Most recent observation.
    pub fn latest(&self) -> &[T] {
        self.frames.back().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Frames concatenated oldest to newest.
    pub fn flat(&self) -> Vec<T> {
        self.frames.iter().flatten().copied().collect()
    }

    pub fn from_flat(obs_dim: usize, flat: &[T]) -> Result<Self> {
        if obs_dim == 0 || flat.len() % obs_dim != 0 {
            return Err(Error::Dimension {
                context: "flat history",
                expected: obs_dim,
                actual: flat.len(),
            });
        }
        Ok(Self {
            obs_dim,
            frames: flat.chunks(obs_dim).map(<[T]>::to_vec).collect(),
        })
    }
}

/// Shifts a flat history left by one frame and appends `obs`.
pub fn shifted_history<T: Scalar>(flat: &[T], obs: &[T]) -> Result<Vec<T>> {
    if obs.is_empty() || flat.len() < obs.len() || flat.len() % obs.len() != 0 {
        return Err(Error::Dimension {
            context: "history shift",
            expected: obs.len(),
            actual: flat.len(),
        });
    }
    let mut out = flat[obs.len()..].to_vec();
    out.extend_from_slice(obs);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntentionAssignment<T> {
    pub index: usize,
    pub code: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct IntentionCodebook<T> {
    codes: Array2<T>,
    pub ema_rate: T,
    usage_counts: Vec<u64>,
    since_hit: Vec<u64>,
    recent: VecDeque<Vec<T>>,
    recent_capacity: usize,
    dead_after: u64,
}

impl<T: Scalar> IntentionCodebook<T> {
    pub fn from_codes(codes: Array2<T>, ema_rate: T) -> Result<Self> {
        if codes.nrows() == 0 || codes.ncols() == 0 {
            return Err(Error::InvalidArgument("codebook must be non-empty".into()));
        }
        if !codes.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("codebook entries"));
        }
        if !(ema_rate >= T::zero() && ema_rate <= T::one()) {
            return Err(Error::InvalidArgument(format!("ema rate must lie in [0, 1], got {ema_rate}")));
        }
        let k = codes.nrows();
        Ok(Self {
            codes,
            ema_rate,
            usage_counts: vec![0; k],
            since_hit: vec![0; k],
            recent: VecDeque::new(),
            recent_capacity: 256,
            dead_after: 10_000,
        })
    }

    /// Codes drawn from `N(0, scale^2)`.
    pub fn random<R: Rng + ?Sized>(k: usize, dim: usize, scale: f64, ema_rate: T, rng: &mut R) -> Result<Self> {
        let codes = Array2::from_shape_simple_fn((k, dim), || T::lit(scale * rng.sample::<f64, _>(StandardNormal)));
        Self::from_codes(codes, ema_rate)
    }

    pub fn with_dead_code_policy(mut self, dead_after: u64, recent_capacity: usize) -> Self {
        self.dead_after = dead_after;
        self.recent_capacity = recent_capacity.max(1);
        self
    }

    pub fn len(&self) -> usize {
        self.codes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.ncols()
    }

    pub fn codes(&self) -> &Array2<T> {
        &self.codes
    }

    pub fn code(&self, k: usize) -> ArrayView1<'_, T> {
        self.codes.row(k)
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn total_lookups(&self) -> u64 {
        self.usage_counts.iter().sum()
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.fill(0);
        self.since_hit.fill(0);
    }

    /// Shannon entropy (nats) of the usage distribution.
    pub fn usage_entropy(&self) -> f64 {
        entropy(&self.usage_counts)
    }

    /// `argmin_j ||z - e_j||` with ties to the lowest index, and the distance.
    /// Does not touch usage statistics.
    pub fn nearest(&self, z: ArrayView1<T>) -> Result<(usize, T)> {
        check_dim("codebook query", self.dim(), z.len())?;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("intention embedding"));
        }
        let mut best = (0, T::infinity());
        for (k, code) in self.codes.rows().into_iter().enumerate() {
            let d = code.iter().zip(z).fold(T::zero(), |acc, (&c, &x)| acc + (x - c) * (x - c));
            if d < best.1 {
                best = (k, d);
            }
        }
        Ok((best.0, best.1.sqrt()))
    }

    /// Lookup used when acting: records usage and keeps the embedding for reseeding.
    pub fn infer_intention(&mut self, z: &[T]) -> Result<IntentionAssignment<T>> {
        let (index, _) = self.nearest(ArrayView1::from(z))?;
        self.usage_counts[index] += 1;
        for (k, s) in self.since_hit.iter_mut().enumerate() {
            *s = if k == index { 0 } else { *s + 1 };
        }
        if self.recent.len() == self.recent_capacity {
            self.recent.pop_front();
        }
        self.recent.push_back(z.to_vec());
        Ok(IntentionAssignment {
            index,
            code: self.codes.row(index).to_vec(),
        })
    }

    /// `codes[k] <- mu * z + (1 - mu) * codes[k]`.
    pub fn ema_update(&mut self, k: usize, z: ArrayView1<T>) -> Result<()> {
        if k >= self.len() {
            return Err(Error::InvalidArgument(format!("code index {k} out of range")));
        }
        check_dim("codebook update", self.dim(), z.len())?;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("intention embedding"));
        }
        let mu = self.ema_rate;
        for (c, &x) in self.codes.row_mut(k).iter_mut().zip(z) {
            *c = mu * x + (T::one() - mu) * *c;
        }
        Ok(())
    }

    /// Replaces codes unused for the configured number of lookups with a
    /// random recent embedding. Returns the reseeded indices.
    pub fn reseed_dead_codes<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::new();
        if self.recent.is_empty() {
            return out;
        }
        for k in 0..self.len() {
            if self.since_hit[k] >= self.dead_after {
                let pick = self.recent.make_contiguous().choose(rng).expect("non-empty").clone();
                self.codes.row_mut(k).assign(&ArrayView1::from(&pick));
                self.since_hit[k] = 0;
                out.push(k);
            }
        }
        out
    }

    /// k-means++ seeding: the first code is a uniform random row of
    /// `embeddings`, each further code a row drawn with probability
    /// proportional to its squared distance from the codes chosen so far.
    pub fn seed_from<R: Rng + ?Sized>(&mut self, embeddings: ArrayView2<T>, rng: &mut R) -> Result<()> {
        check_dim("codebook seed", self.dim(), embeddings.ncols())?;
        let n = embeddings.nrows();
        if n == 0 {
            return Err(Error::InvalidArgument("no embeddings to seed from".into()));
        }
        if !embeddings.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("intention embedding"));
        }
        let sq = |a: ArrayView1<T>, b: ArrayView1<T>| a.iter().zip(b).fold(0.0, |acc, (&x, &y)| acc + (x - y).to_f64_lossless().powi(2));
        let first = rng.random_range(0..n);
        self.codes.row_mut(0).assign(&embeddings.row(first));
        let mut d2: Vec<f64> = (0..n).map(|r| sq(embeddings.row(r), embeddings.row(first))).collect();
        for k in 1..self.len() {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (r, &d) in d2.iter().enumerate() {
                    if u < d {
                        pick = r;
                        break;
                    }
                    u -= d;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            self.codes.row_mut(k).assign(&embeddings.row(pick));
            for (r, d) in d2.iter_mut().enumerate() {
                *d = d.min(sq(embeddings.row(r), embeddings.row(pick)));
            }
        }
        Ok(())
    }

    /// Moves every code that owns at least one row of `embeddings` toward the
    /// mean of its rows: `codes[k] <- mu * mean_k + (1 - mu) * codes[k]`.
    pub fn ema_update_batch(&mut self, embeddings: ArrayView2<T>, indices: &[usize]) -> Result<()> {
        check_dim("codebook batch rows", embeddings.nrows(), indices.len())?;
        check_dim("codebook batch dim", self.dim(), embeddings.ncols())?;
        let mut sums = Array2::<T>::zeros((self.len(), self.dim()));
        let mut counts = vec![0usize; self.len()];
        for (r, &k) in indices.iter().enumerate() {
            if k >= self.len() {
                return Err(Error::InvalidArgument(format!("code index {k} out of range")));
            }
            counts[k] += 1;
            for (acc, &v) in sums.row_mut(k).iter_mut().zip(embeddings.row(r)) {
                *acc = *acc + v;
            }
        }
        for (k, &c) in counts.iter().enumerate() {
            if c > 0 {
                let mean: Array1<T> = sums.row(k).mapv(|v| v / T::lit(c as f64));
                self.ema_update(k, mean.view())?;
            }
        }
        Ok(())
    }

    pub(crate) fn restore(&mut self, codes: Array2<T>, usage: Vec<u64>) -> Result<()> {
        check_dim("codebook rows", self.len(), codes.nrows())?;
        check_dim("codebook dim", self.dim(), codes.ncols())?;
        check_dim("codebook usage", self.len(), usage.len())?;
        self.codes = codes;
        self.usage_counts = usage;
        Ok(())
    }
}

pub fn entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// `d/dz beta * ||z - sg(e)||^2 = 2 beta (z - e)`; the code gets no gradient.
pub fn commitment_loss_grad<T: Scalar>(z: &[T], code: &[T], beta: T) -> Result<Vec<T>> {
    check_dim("commitment code", z.len(), code.len())?;
    let two = T::lit(2.0);
    Ok(z.iter().zip(code).map(|(&z, &e)| two * beta * (z - e)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPhase {
    Train,
    Exec,
}

/// Mask value for a uniform draw `u`: 1 when `u < p`.
pub fn mask_from_quantile(u: f64, p: f64) -> u8 {
    u8::from(u < p)
}

/// Bernoulli guidance mask with the phase's probability.
pub fn sample_mask<R: Rng + ?Sized>(phase: MaskPhase, cfg: &IntentionConfig, rng: &mut R) -> u8 {
    match phase {
        MaskPhase::Exec if cfg.exec_mask_prob >= 1.0 => 1,
        MaskPhase::Exec => mask_from_quantile(rng.random(), cfg.exec_mask_prob),
        MaskPhase::Train => mask_from_quantile(rng.random(), cfg.train_mask_prob),
    }
}

/// One minibatch for the intention learner. `histories[a]` holds agent `a`'s
/// flattened histories, one row per sample.
#[derive(Clone, Debug)]
pub struct IntentionBatch<T> {
    pub histories: Vec<Array2<T>>,
    pub states: Array2<T>,
}

/// Losses and gradients of one intention step, before any update.
#[derive(Clone, Debug)]
pub struct IntentionGradients<T> {
    pub recon_loss: T,
    pub commit_loss: T,
    pub encoder: Gradients<T>,
    pub decoder: Gradients<T>,
    /// Gradient at the decoder input, `batch x (agents * m)`.
    pub decoder_input_grad: Array2<T>,
    /// Upstream gradient handed to the encoder output, agents stacked
    /// row-wise (`agents*batch x m`). Includes the commitment term.
    pub encoder_upstream: Array2<T>,
    /// The straight-through part of `encoder_upstream` alone.
    pub straight_through: Array2<T>,
    pub embeddings: Array2<T>,
    /// Code index per stacked row.
    pub indices: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntentionReport<T> {
    pub recon_loss: T,
    pub commit_loss: T,
    pub applied: bool,
}

/// Shared encoder, codebook and decoder for a fixed agent count.
#[derive(Debug)]
pub struct IntentionLearner<T> {
    pub encoder: Network<T>,
    pub decoder: Network<T>,
    pub codebook: IntentionCodebook<T>,
    pub beta: T,
    n_agents: usize,
    obs_dim: usize,
    history: usize,
    state_dim: usize,
}

impl<T: Scalar> Clone for IntentionLearner<T> {
    fn clone(&self) -> Self {
        Self {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            codebook: self.codebook.clone(),
            beta: self.beta,
            n_agents: self.n_agents,
            obs_dim: self.obs_dim,
            history: self.history,
            state_dim: self.state_dim,
        }
    }
}

impl<T: Scalar> IntentionLearner<T> {
    pub fn encoder_spec(cfg: &IntentionConfig, obs_dim: usize) -> Result<MlpSpec> {
        MlpSpec::with_hidden(cfg.history * obs_dim, &cfg.hidden, cfg.dim, Activation::Gelu, OutputActivation::Identity)
    }

    pub fn decoder_spec(cfg: &IntentionConfig, n_agents: usize, state_dim: usize) -> Result<MlpSpec> {
        MlpSpec::with_hidden(n_agents * cfg.dim, &cfg.hidden, state_dim, Activation::Gelu, OutputActivation::Identity)
    }

    pub fn new<R: Rng + ?Sized>(cfg: &IntentionConfig, n_agents: usize, obs_dim: usize, state_dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = Network::new(Self::encoder_spec(cfg, obs_dim)?, rng)?;
        let decoder = Network::new(Self::decoder_spec(cfg, n_agents, state_dim)?, rng)?;
        let codebook = IntentionCodebook::random(cfg.codes, cfg.dim, 0.1, T::lit(cfg.ema_rate), rng)?;
        Self::from_parts(cfg, encoder, decoder, codebook, n_agents, obs_dim, state_dim)
    }

    pub fn from_parts(
        cfg: &IntentionConfig,
        encoder: Network<T>,
        decoder: Network<T>,
        codebook: IntentionCodebook<T>,
        n_agents: usize,
        obs_dim: usize,
        state_dim: usize,
    ) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::InvalidArgument("intention learner needs at least one agent".into()));
        }
        check_dim("encoder input", cfg.history * obs_dim, encoder.spec().input_dim())?;
        check_dim("encoder output", codebook.dim(), encoder.spec().output_dim())?;
        check_dim("decoder input", n_agents * codebook.dim(), decoder.spec().input_dim())?;
        check_dim("decoder output", state_dim, decoder.spec().output_dim())?;
        Ok(Self {
            encoder,
            decoder,
            codebook: codebook.with_dead_code_policy(cfg.dead_code_after, cfg.recent_capacity),
            beta: T::lit(cfg.beta),
            n_agents,
            obs_dim,
            history: cfg.history,
            state_dim,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn history_len(&self) -> usize {
        self.history
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn dim(&self) -> usize {
        self.codebook.dim()
    }

    pub fn encode_observation(&self, history: &ObservationHistory<T>) -> Result<Vec<T>> {
        check_dim("history length", self.history, history.len())?;
        self.encode_flat(&history.flat())
    }

    pub fn encode_flat(&self, flat: &[T]) -> Result<Vec<T>> {
        let z = self.encoder.predict(flat)?;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("intention embedding"));
        }
        Ok(z)
    }

    pub fn encode_batch(&self, histories: ArrayView2<T>) -> Result<Array2<T>> {
        self.encoder.predict_batch(histories)
    }

    /// Nearest-code indices for a batch of flat histories, without usage
    /// bookkeeping.
    pub fn quantize_batch(&self, histories: ArrayView2<T>) -> Result<(Array2<T>, Vec<usize>)> {
        let z = self.encode_batch(histories)?;
        let idx = z.rows().into_iter().map(|r| self.codebook.nearest(r).map(|p| p.0)).collect::<Result<_>>()?;
        Ok((z, idx))
    }

    /// Encodes a history and looks up its intention, counting the lookup.
    pub fn infer(&mut self, history: &ObservationHistory<T>) -> Result<(Vec<T>, IntentionAssignment<T>)> {
        let z = self.encode_observation(history)?;
        let a = self.codebook.infer_intention(&z)?;
        Ok((z, a))
    }

    /// Decodes the global state from the agents' codes in agent order.
    pub fn reconstruct_state(&self, codes: &[T]) -> Result<Vec<T>> {
        self.decoder.predict(codes)
    }

    pub fn gradients(&self, batch: &IntentionBatch<T>) -> Result<IntentionGradients<T>> {
        check_dim("intention batch agents", self.n_agents, batch.histories.len())?;
        let b = batch.states.nrows();
        if b == 0 {
            return Err(Error::InvalidArgument("empty intention batch".into()));
        }
        check_dim("intention state", self.state_dim, batch.states.ncols())?;
        for h in &batch.histories {
            check_dim("intention history rows", b, h.nrows())?;
        }
        let m = self.dim();
        let views: Vec<_> = batch.histories.iter().map(|h| h.view()).collect();
        let stacked = concatenate(Axis(0), &views).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let (z, enc_cache) = self.encoder.forward_batch(stacked.view())?;
        let indices: Vec<usize> = z.rows().into_iter().map(|r| self.codebook.nearest(r).map(|p| p.0)).collect::<Result<_>>()?;

        let mut dec_in = Array2::zeros((b, self.n_agents * m));
        for a in 0..self.n_agents {
            for i in 0..b {
                let k = indices[a * b + i];
                dec_in.slice_mut(s![i, a * m..(a + 1) * m]).assign(&self.codebook.code(k));
            }
        }
        let (s_hat, dec_cache) = self.decoder.forward_batch(dec_in.view())?;
        let bn = T::lit(b as f64);
        let diff = &s_hat - &batch.states;
        let recon_loss = diff.iter().fold(T::zero(), |acc, &d| acc + d * d) / bn;
        let d_shat = diff.mapv(|d| T::lit(2.0) * d / bn);
        let (decoder, decoder_input_grad) = self.decoder.backward_batch(&dec_cache, d_shat.view())?;

        let mut straight_through = Array2::zeros((self.n_agents * b, m));
        for a in 0..self.n_agents {
            straight_through
                .slice_mut(s![a * b..(a + 1) * b, ..])
                .assign(&decoder_input_grad.slice(s![.., a * m..(a + 1) * m]));
        }
        let mut encoder_upstream = straight_through.clone();
        let mut commit = T::zero();
        let two = T::lit(2.0);
        for (r, &k) in indices.iter().enumerate() {
            let code = self.codebook.code(k);
            for j in 0..m {
                let d = z[[r, j]] - code[j];
                commit = commit + d * d;
                encoder_upstream[[r, j]] = encoder_upstream[[r, j]] + two * self.beta * d / bn;
            }
        }
        let commit_loss = self.beta * commit / bn;
        let (encoder, _) = self.encoder.backward_batch(&enc_cache, encoder_upstream.view())?;
        Ok(IntentionGradients {
            recon_loss,
            commit_loss,
            encoder,
            decoder,
            decoder_input_grad,
            encoder_upstream,
            straight_through,
            embeddings: z,
            indices,
        })
    }

    /// Gradient step on encoder and decoder, then a batch-mean EMA update of
    /// every code that received samples.
    pub fn training_step(&mut self, batch: &IntentionBatch<T>, adam: &AdamConfig) -> Result<IntentionReport<T>> {
        let g = self.gradients(batch)?;
        if !(g.recon_loss.is_finite() && g.commit_loss.is_finite()) {
            return Ok(IntentionReport {
                recon_loss: g.recon_loss,
                commit_loss: g.commit_loss,
                applied: false,
            });
        }
        let a = self.encoder.adam_step(&g.encoder, adam)?;
        let d = self.decoder.adam_step(&g.decoder, adam)?;
        self.codebook.ema_update_batch(g.embeddings.view(), &g.indices)?;
        Ok(IntentionReport {
            recon_loss: g.recon_loss,
            commit_loss: g.commit_loss,
            applied: a && d,
        })
    }
}

/// One exported embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord<T> {
    pub step: u64,
    pub agent: usize,
    pub index: usize,
    pub embedding: Vec<T>,
}

/// CSV rows `step,agent_id,intention_index,z_0..z_{m-1}` with a header.
pub fn write_embeddings_csv<T: Scalar, W: Write>(mut w: W, records: &[EmbeddingRecord<T>]) -> Result<()> {
    let m = records.first().map_or(0, |r| r.embedding.len());
    write!(w, "step,agent_id,intention_index")?;
    for j in 0..m {
        write!(w, ",z_{j}")?;
    }
    writeln!(w)?;
    for r in records {
        check_dim("embedding record", m, r.embedding.len())?;
        write!(w, "{},{},{}", r.step, r.agent, r.index)?;
        for v in &r.embedding {
            write!(w, ",{}", v.to_f64_lossless())?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> IntentionConfig {
        IntentionConfig {
            codes: 3,
            dim: 4,
            history: 2,
            hidden: vec![6],
            ..IntentionConfig::default()
        }
    }

    #[test]
    fn history_pads_and_shifts() {
        let mut h = ObservationHistory::<f64>::new(2, 3);
        assert_eq!(h.flat(), vec![0.0; 6]);
        h.push(&[1.0, 2.0]).unwrap();
        h.push(&[3.0, 4.0]).unwrap();
        assert_eq!(h.len(), 3);
        assert_eq!(h.flat(), vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(h.latest(), &[3.0, 4.0]);
        assert_eq!(shifted_history(&h.flat(), &[5.0, 6.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(h.push(&[1.0]).is_err());
        h.reset();
        assert_eq!(h.flat(), vec![0.0; 6]);
    }

    #[test]
    fn nearest_code_examples() {
        let mut cb = IntentionCodebook::from_codes(array![[0.0, 0.0], [1.0, 1.0]], 0.01).unwrap();
        assert_eq!(cb.infer_intention(&[0.1, 0.2]).unwrap().index, 0);
        let mut cb3 = IntentionCodebook::from_codes(array![[0.0, 0.0], [1.0, 1.0], [2.0, -1.0]], 0.01).unwrap();
        let a = cb3.infer_intention(&[2.0, -1.0]).unwrap();
        assert_eq!(a.index, 2);
        assert_eq!(cb3.nearest(ArrayView1::from(&[2.0, -1.0])).unwrap().1, 0.0);
        assert_eq!(a.code, vec![2.0, -1.0]);
        // Equidistant: lowest index wins.
        assert_eq!(cb.nearest(ArrayView1::from(&[0.5, 0.5])).unwrap().0, 0);
        assert!(cb.infer_intention(&[f64::NAN, 0.0]).is_err());
        assert_eq!(cb.usage_counts(), &[1, 0]);
        assert_eq!(cb.total_lookups(), 1);
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cb = IntentionCodebook::<f64>::random(5, 8, 1.0, 0.01, &mut rng).unwrap();
        for _ in 0..100 {
            let z: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dists: Vec<f64> = (0..5)
                .map(|k| cb.code(k).iter().zip(&z).map(|(c, x)| (x - c) * (x - c)).sum::<f64>())
                .collect();
            let best = (0..5).fold(0, |b, k| if dists[k] < dists[b] { k } else { b });
            let got = cb.infer_intention(&z).unwrap().index;
            assert_eq!(got, best);
            assert!(dists.iter().all(|&d| dists[got] <= d));
        }
        assert_eq!(cb.total_lookups(), 100);
        for k in 0..5 {
            let code = cb.code(k).to_vec();
            assert_eq!(cb.nearest(ArrayView1::from(&code)).unwrap().0, k);
        }
    }

    #[test]
    fn commitment_gradient_examples() {
        assert_eq!(commitment_loss_grad(&[1.0, 0.0], &[0.0, 0.0], 0.2).unwrap(), vec![0.4, 0.0]);
        assert_eq!(commitment_loss_grad(&[1.0, 2.0], &[1.0, 2.0], 0.2).unwrap(), vec![0.0, 0.0]);
        assert_eq!(commitment_loss_grad(&[1.0, 2.0], &[0.0, 0.0], 0.0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn ema_update_examples() {
        let mut cb = IntentionCodebook::from_codes(array![[1.0, 0.0], [5.0, 5.0]], 0.1).unwrap();
        cb.ema_update(0, ArrayView1::from(&[0.0, 1.0])).unwrap();
        let c: Vec<f64> = cb.code(0).to_vec();
        assert!((c[0] - 0.9).abs() < 1e-15 && (c[1] - 0.1).abs() < 1e-15);
        assert_eq!(cb.code(1).to_vec(), vec![5.0, 5.0]);
        cb.ema_rate = 1.0;
        cb.ema_update(1, ArrayView1::from(&[2.0, 3.0])).unwrap();
        assert_eq!(cb.code(1).to_vec(), vec![2.0, 3.0]);
        cb.ema_rate = 0.0;
        cb.ema_update(1, ArrayView1::from(&[7.0, 7.0])).unwrap();
        assert_eq!(cb.code(1).to_vec(), vec![2.0, 3.0]);
    }

    #[test]
    fn ema_contracts_geometrically() {
        let mut cb = IntentionCodebook::from_codes(array![[1.0]], 0.01).unwrap();
        for n in 1..=500 {
            cb.ema_update(0, ArrayView1::from(&[0.0])).unwrap();
            assert!((cb.code(0)[0] - 0.99f64.powi(n)).abs() < 1e-12);
        }
    }

    #[test]
    fn dead_codes_are_reseeded_from_recent_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cb = IntentionCodebook::from_codes(array![[0.0], [100.0]], 0.01).unwrap().with_dead_code_policy(10, 4);
        for _ in 0..9 {
            cb.infer_intention(&[0.5]).unwrap();
        }
        assert!(cb.reseed_dead_codes(&mut rng).is_empty());
        cb.infer_intention(&[0.5]).unwrap();
        assert_eq!(cb.reseed_dead_codes(&mut rng), vec![1]);
        assert_eq!(cb.code(1)[0], 0.5);
    }

    #[test]
    fn mask_semantics() {
        let cfg = IntentionConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..1000).all(|_| sample_mask(MaskPhase::Exec, &cfg, &mut rng) == 1));
        assert_eq!(mask_from_quantile(0.99, 0.2), 0);
        assert_eq!(mask_from_quantile(0.1, 0.2), 1);
        let n = 100_000;
        let on: u64 = (0..n).map(|_| sample_mask(MaskPhase::Train, &cfg, &mut rng) as u64).sum();
        let mean = on as f64 / n as f64;
        assert!((mean - 0.2).abs() < 0.01, "{mean}");
    }

    fn zero_bias(net: &mut Network<f64>) {
        for b in net.biases_mut() {
            b.fill(0.0);
        }
    }

    #[test]
    fn zero_history_with_zero_bias_encodes_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut l = IntentionLearner::<f64>::new(&small_cfg(), 2, 3, 5, &mut rng).unwrap();
        zero_bias(&mut l.encoder);
        zero_bias(&mut l.decoder);
        let h = ObservationHistory::new(3, 2);
        assert_eq!(l.encode_observation(&h).unwrap(), vec![0.0; 4]);
        assert_eq!(l.reconstruct_state(&[0.0; 8]).unwrap(), vec![0.0; 5]);
        let again = l.encode_observation(&h).unwrap();
        assert_eq!(again, l.encode_observation(&h).unwrap());
    }

    fn random_batch(rng: &mut ChaCha8Rng, agents: usize, b: usize, hist: usize, state: usize) -> IntentionBatch<f64> {
        IntentionBatch {
            histories: (0..agents).map(|_| Array2::from_shape_fn((b, hist), |_| rng.random_range(-1.0..1.0))).collect(),
            states: Array2::from_shape_fn((b, state), |_| rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn straight_through_copies_decoder_input_gradient_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = IntentionLearner::<f64>::new(&small_cfg(), 2, 3, 5, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 2, 7, 6, 5);
        let g = l.gradients(&batch).unwrap();
        for a in 0..2 {
            for i in 0..7 {
                for j in 0..4 {
                    assert_eq!(
                        g.straight_through[[a * 7 + i, j]].to_bits(),
                        g.decoder_input_grad[[i, a * 4 + j]].to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn perfect_reconstruction_has_zero_recon_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cfg = small_cfg();
        cfg.beta = 0.0;
        let l = IntentionLearner::<f64>::new(&cfg, 2, 3, 5, &mut rng).unwrap();
        let mut batch = random_batch(&mut rng, 2, 4, 6, 5);
        let (_, i0) = l.quantize_batch(batch.histories[0].view()).unwrap();
        let (_, i1) = l.quantize_batch(batch.histories[1].view()).unwrap();
        for r in 0..4 {
            let mut codes = l.codebook.code(i0[r]).to_vec();
            codes.extend(l.codebook.code(i1[r]).iter());
            let s = l.reconstruct_state(&codes).unwrap();
            batch.states.row_mut(r).assign(&ArrayView1::from(&s));
        }
        let g = l.gradients(&batch).unwrap();
        assert_eq!(g.recon_loss, 0.0);
        assert_eq!(g.decoder.max_abs(), 0.0);
        assert_eq!(g.encoder.max_abs(), 0.0);
    }

    #[test]
    fn losses_match_straight_line_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = IntentionLearner::<f64>::new(&small_cfg(), 2, 3, 5, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 2, 3, 6, 5);
        let g = l.gradients(&batch).unwrap();
        let (mut recon, mut commit) = (0.0, 0.0);
        for r in 0..3 {
            let mut codes = Vec::new();
            for a in 0..2 {
                let z = l.encode_flat(batch.histories[a].row(r).as_slice().unwrap()).unwrap();
                let (k, d) = l.codebook.nearest(ArrayView1::from(&z)).unwrap();
                commit += 0.2 * d * d;
                codes.extend(l.codebook.code(k).iter());
            }
            let s = l.reconstruct_state(&codes).unwrap();
            recon += s.iter().zip(batch.states.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        assert!((g.recon_loss - recon / 3.0).abs() < 1e-12);
        assert!((g.commit_loss - commit / 3.0).abs() < 1e-12);
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = IntentionLearner::<f64>::new(&small_cfg(), 2, 3, 5, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 2, 3, 6, 5);
        let g = l.gradients(&batch).unwrap();
        // With codes fixed, the only encoder-dependent loss is the commitment
        // term; the straight-through part is a surrogate and excluded here.
        let h = 1e-6;
        let commit = |net: &Network<f64>| -> f64 {
            let mut total = 0.0;
            for a in 0..2 {
                let z = net.predict_batch(batch.histories[a].view()).unwrap();
                for (r, row) in z.rows().into_iter().enumerate() {
                    let k = g.indices[a * 3 + r];
                    total += row.iter().zip(l.codebook.code(k)).map(|(x, c)| (x - c) * (x - c)).sum::<f64>();
                }
            }
            0.2 * total / 3.0
        };
        let mut surrogate = g.encoder_upstream.clone();
        surrogate -= &g.straight_through;
        let stacked = concatenate(Axis(0), &[batch.histories[0].view(), batch.histories[1].view()]).unwrap();
        let (_, cache) = l.encoder.forward_batch(stacked.view()).unwrap();
        let (gc, _) = l.encoder.backward_batch(&cache, surrogate.view()).unwrap();
        for i in 0..l.encoder.num_params() {
            let mut net = l.encoder.clone();
            let v = net.param(i);
            net.set_param(i, v + h);
            let lp = commit(&net);
            net.set_param(i, v - h);
            let lm = commit(&net);
            let fd = (lp - lm) / (2.0 * h);
            let an = gc.get(i);
            assert!((fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()), "param {i}: {fd} vs {an}");
        }
    }

    #[test]
    fn agent_count_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = IntentionLearner::<f64>::new(&small_cfg(), 2, 3, 5, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 3, 4, 6, 5);
        assert!(l.gradients(&batch).is_err());
    }

    #[test]
    fn training_step_moves_codes_toward_assigned_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut l = IntentionLearner::<f64>::new(&small_cfg(), 2, 3, 5, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 2, 8, 6, 5);
        let before = l.codebook.codes().clone();
        let g = l.gradients(&batch).unwrap();
        let r = l.training_step(&batch, &AdamConfig::default()).unwrap();
        assert!(r.applied);
        assert_eq!(r.recon_loss, g.recon_loss);
        let k = g.indices[0];
        let rows: Vec<usize> = (0..16).filter(|&r| g.indices[r] == k).collect();
        for j in 0..4 {
            let mean = rows.iter().map(|&r| g.embeddings[[r, j]]).sum::<f64>() / rows.len() as f64;
            let expect = 0.01 * mean + 0.99 * before[[k, j]];
            assert!((l.codebook.code(k)[j] - expect).abs() < 1e-15);
        }
        for u in 0..3 {
            if !g.indices.contains(&u) {
                assert_eq!(l.codebook.code(u), before.row(u));
            }
        }
        // Training lookups do not count as usage.
        assert_eq!(l.codebook.total_lookups(), 0);
    }

    #[test]
    fn embeddings_csv_layout() {
        let recs = vec![EmbeddingRecord { step: 3, agent: 1, index: 2, embedding: vec![0.5, -1.0] }];
        let mut out = Vec::new();
        write_embeddings_csv(&mut out, &recs).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "step,agent_id,intention_index,z_0,z_1\n3,1,2,0.5,-1\n");
    }
}
