//! Discrete hidden Markov model numerics.
//!
//! A model is the triple (A, B, pi): an N x N transition matrix, an N x M
//! emission matrix, and an initial state distribution, all row-stochastic.
//! The forward/backward recursions use the per-step scaling-factor
//! formulation so that concatenated opcode sequences with millions of
//! symbols neither underflow nor require log-space arithmetic in the inner
//! loops. `log P(O|lambda)` is recovered as the negative log-sum of the
//! scale factors.
//!
//! Decoding is posterior (per-position) decoding: each position takes the
//! argmax of its posterior marginal gamma_t(i). This optimizes positions
//! independently and in general differs from the single best path.
#![allow(clippy::needless_range_loop)]

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::corpus::{Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::seeding;

/// Floor applied to emission rows after every re-estimation so that decoding
/// a test sequence containing a symbol the family never emitted in training
/// cannot produce a zero-probability step.
pub const EMISSION_FLOOR: f64 = 1e-10;

/// Default jitter around the uniform value for initialization.
pub const DEFAULT_JITTER: f64 = 0.02;

pub const DEFAULT_MIN_ITERATIONS: usize = 10;
pub const DEFAULT_EPSILON: f64 = 0.001;
pub const DEFAULT_MAX_ITERATIONS: usize = 500;

/// Per-training-run convergence record. The history stores per-symbol mean
/// log-likelihoods (nats), one entry per evaluated model, so EM monotonicity
/// is visible directly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: usize,
    #[serde(rename = "history")]
    pub mean_log_likelihood_history: Vec<f64>,
    pub converged: bool,
}

/// Decoded hidden-state sequence; every entry is < N.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSequence {
    pub states: Vec<usize>,
}

/// The triple (A, B, pi) plus its provenance (family label, seed, train log).
/// Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    pub n: usize,
    pub m: usize,
    /// N x N transition probabilities, row-major.
    pub a: Vec<f64>,
    /// N x M emission probabilities, row-major.
    pub b: Vec<f64>,
    /// Length-N initial distribution.
    pub pi: Vec<f64>,
    pub family: String,
    pub seed: u64,
    pub train_log: TrainLog,
}

impl HmmModel {
    pub fn a_row(&self, i: usize) -> &[f64] {
        &self.a[i * self.n..(i + 1) * self.n]
    }

    pub fn b_row(&self, i: usize) -> &[f64] {
        &self.b[i * self.m..(i + 1) * self.m]
    }

    fn validate_obs(&self, obs: &[u32]) -> Result<()> {
        if obs.is_empty() {
            return Err(Error::EmptyInput("observation sequence is empty".into()));
        }
        for (t, &o) in obs.iter().enumerate() {
            if o as usize >= self.m {
                return Err(Error::SymbolOutOfRange(format!(
                    "obs[{t}] = {o} but M = {}",
                    self.m
                )));
            }
        }
        Ok(())
    }
}

/// Scaled forward/backward quantities for one observation sequence.
///
/// `alpha` rows sum to 1; `scales[t]` is the multiplier that normalized step
/// t, so `log_likelihood = -sum(ln(scales))`.
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub t: usize,
    pub n: usize,
    /// T x N scaled forward variables, row-major.
    pub alpha: Vec<f64>,
    /// T x N scaled backward variables, row-major.
    pub beta: Vec<f64>,
    /// Per-step scale factors (1 / step normalizer).
    pub scales: Vec<f64>,
    pub log_likelihood: f64,
}

impl ForwardBackward {
    pub fn alpha_row(&self, t: usize) -> &[f64] {
        &self.alpha[t * self.n..(t + 1) * self.n]
    }

    pub fn beta_row(&self, t: usize) -> &[f64] {
        &self.beta[t * self.n..(t + 1) * self.n]
    }

    /// Posterior marginal gamma_t, normalized to sum 1.
    pub fn gamma_row(&self, t: usize) -> Vec<f64> {
        let alpha = self.alpha_row(t);
        let beta = self.beta_row(t);
        let mut gamma: Vec<f64> = alpha.iter().zip(beta).map(|(a, b)| a * b).collect();
        let sum: f64 = gamma.iter().sum();
        if sum > 0.0 {
            for g in &mut gamma {
                *g /= sum;
            }
        }
        gamma
    }
}

/// Build a model with every row approximately uniform: each entry is drawn
/// as `(1 + u) / row_len` with `u` uniform in `[-jitter, +jitter]`, then the
/// row is renormalized. `jitter = 0` gives the exactly uniform model.
pub fn init_model(n: usize, m: usize, seed: u64, jitter: f64) -> Result<HmmModel> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidDimension(format!(
            "n and m must be >= 1, got n={n} m={m}"
        )));
    }
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::InvalidDimension(format!(
            "jitter must be in [0, 1), got {jitter}"
        )));
    }
    let mut rng = seeding::rng(seed);
    let mut fill_row = |row: &mut [f64]| {
        let len = row.len() as f64;
        let mut sum = 0.0;
        for v in row.iter_mut() {
            let u: f64 = (rng.random::<f64>() * 2.0 - 1.0) * jitter;
            *v = (1.0 + u) / len;
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    };

    let mut pi = vec![0.0; n];
    fill_row(&mut pi);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        fill_row(&mut a[i * n..(i + 1) * n]);
    }
    let mut b = vec![0.0; n * m];
    for i in 0..n {
        fill_row(&mut b[i * m..(i + 1) * m]);
    }

    Ok(HmmModel {
        n,
        m,
        a,
        b,
        pi,
        family: String::new(),
        seed,
        train_log: TrainLog::default(),
    })
}

/// Scaled forward/backward pass over one observation sequence.
pub fn forward_backward(model: &HmmModel, obs: &[u32]) -> Result<ForwardBackward> {
    model.validate_obs(obs)?;
    let (n, t_len) = (model.n, obs.len());
    let mut alpha = vec![0.0; t_len * n];
    let mut beta = vec![0.0; t_len * n];
    let mut scales = vec![0.0; t_len];
    let mut log_likelihood = 0.0;

    // Forward, normalizing each step to sum 1.
    let mut norm = 0.0;
    {
        let o0 = obs[0] as usize;
        let row = &mut alpha[0..n];
        for i in 0..n {
            row[i] = model.pi[i] * model.b[i * model.m + o0];
            norm += row[i];
        }
    }
    if norm <= 0.0 {
        return Err(Error::Numeric(
            "zero-probability observation at t = 0".into(),
        ));
    }
    scales[0] = 1.0 / norm;
    log_likelihood += norm.ln();
    for v in &mut alpha[0..n] {
        *v *= scales[0];
    }

    for t in 1..t_len {
        let ot = obs[t] as usize;
        let (prev, cur) = alpha.split_at_mut(t * n);
        let prev = &prev[(t - 1) * n..];
        let cur = &mut cur[..n];
        cur.fill(0.0);
        for i in 0..n {
            let ai = model.a_row(i);
            let p = prev[i];
            for j in 0..n {
                cur[j] += p * ai[j];
            }
        }
        let mut norm = 0.0;
        for j in 0..n {
            cur[j] *= model.b[j * model.m + ot];
            norm += cur[j];
        }
        if norm <= 0.0 {
            return Err(Error::Numeric(format!(
                "zero-probability observation at t = {t}"
            )));
        }
        scales[t] = 1.0 / norm;
        log_likelihood += norm.ln();
        for v in cur.iter_mut() {
            *v *= scales[t];
        }
    }

    // Backward, scaled by the forward normalizers.
    beta[(t_len - 1) * n..].fill(1.0);
    for t in (0..t_len - 1).rev() {
        let ot1 = obs[t + 1] as usize;
        let (cur, next) = beta.split_at_mut((t + 1) * n);
        let cur = &mut cur[t * n..];
        let next = &next[..n];
        for i in 0..n {
            let ai = model.a_row(i);
            let mut acc = 0.0;
            for j in 0..n {
                acc += ai[j] * model.b[j * model.m + ot1] * next[j];
            }
            cur[i] = acc * scales[t + 1];
        }
    }

    Ok(ForwardBackward {
        t: t_len,
        n,
        alpha,
        beta,
        scales,
        log_likelihood,
    })
}

/// `log P(O|lambda)` via the scaled forward pass alone. Unlike
/// [`forward_backward`] this reports an impossible sequence as negative
/// infinity instead of an error, which is what scoring a sample under a
/// foreign family's generator needs.
pub fn sequence_log_likelihood(model: &HmmModel, obs: &[u32]) -> Result<f64> {
    model.validate_obs(obs)?;
    let n = model.n;
    let mut cur = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut log_likelihood = 0.0;

    let o0 = obs[0] as usize;
    let mut norm = 0.0;
    for i in 0..n {
        cur[i] = model.pi[i] * model.b[i * model.m + o0];
        norm += cur[i];
    }
    if norm <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    log_likelihood += norm.ln();
    for v in &mut cur {
        *v /= norm;
    }

    for &o in &obs[1..] {
        let ot = o as usize;
        next.fill(0.0);
        for i in 0..n {
            let ai = model.a_row(i);
            let p = cur[i];
            for j in 0..n {
                next[j] += p * ai[j];
            }
        }
        let mut norm = 0.0;
        for j in 0..n {
            next[j] *= model.b[j * model.m + ot];
            norm += next[j];
        }
        if norm <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        log_likelihood += norm.ln();
        for v in &mut next {
            *v /= norm;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(log_likelihood)
}

/// Posterior marginals gamma as a T x N row-major matrix, each row summing
/// to 1.
pub fn posterior_marginals(model: &HmmModel, obs: &[u32]) -> Result<Vec<f64>> {
    let fb = forward_backward(model, obs)?;
    let mut gamma = Vec::with_capacity(fb.t * fb.n);
    for t in 0..fb.t {
        gamma.extend_from_slice(&fb.gamma_row(t));
    }
    Ok(gamma)
}

/// Decode each position as the argmax of its posterior marginal; ties break
/// toward the lowest state index.
pub fn posterior_decode(model: &HmmModel, obs: &[u32]) -> Result<StateSequence> {
    let fb = forward_backward(model, obs)?;
    let mut states = Vec::with_capacity(fb.t);
    for t in 0..fb.t {
        let alpha = fb.alpha_row(t);
        let beta = fb.beta_row(t);
        let mut best = 0usize;
        let mut best_val = alpha[0] * beta[0];
        for i in 1..fb.n {
            let v = alpha[i] * beta[i];
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        states.push(best);
    }
    Ok(StateSequence { states })
}

struct EStep {
    /// Sum over t < T-1 of xi_t, row-major N x N.
    xi_sum: Vec<f64>,
    /// Sum over t < T-1 of gamma_t.
    gamma_sum_trans: Vec<f64>,
    /// Sum over all t of gamma_t, per (state, symbol).
    emit_sum: Vec<f64>,
    /// Sum over all t of gamma_t.
    gamma_sum_all: Vec<f64>,
    gamma0: Vec<f64>,
    log_likelihood: f64,
}

fn e_step(model: &HmmModel, obs: &[u32]) -> Result<EStep> {
    let fb = forward_backward(model, obs)?;
    let (n, m, t_len) = (model.n, model.m, fb.t);
    let mut acc = EStep {
        xi_sum: vec![0.0; n * n],
        gamma_sum_trans: vec![0.0; n],
        emit_sum: vec![0.0; n * m],
        gamma_sum_all: vec![0.0; n],
        gamma0: vec![0.0; n],
        log_likelihood: fb.log_likelihood,
    };
    let mut gamma = vec![0.0; n];
    let mut emit_beta = vec![0.0; n];
    for t in 0..t_len {
        let alpha = fb.alpha_row(t);
        let beta = fb.beta_row(t);
        let mut gsum = 0.0;
        for i in 0..n {
            gamma[i] = alpha[i] * beta[i];
            gsum += gamma[i];
        }
        if gsum <= 0.0 {
            return Err(Error::Numeric(format!("degenerate posterior at t = {t}")));
        }
        let ot = obs[t] as usize;
        for i in 0..n {
            gamma[i] /= gsum;
            acc.gamma_sum_all[i] += gamma[i];
            acc.emit_sum[i * m + ot] += gamma[i];
        }
        if t == 0 {
            acc.gamma0.copy_from_slice(&gamma);
        }
        if t + 1 < t_len {
            for i in 0..n {
                acc.gamma_sum_trans[i] += gamma[i];
            }
            // xi_t(i, j) = alpha_t(i) a_ij b_j(o_{t+1}) beta_{t+1}(j),
            // normalized over (i, j).
            let ot1 = obs[t + 1] as usize;
            let beta_next = fb.beta_row(t + 1);
            for j in 0..n {
                emit_beta[j] = model.b[j * m + ot1] * beta_next[j];
            }
            let mut z = 0.0;
            for i in 0..n {
                let ai = model.a_row(i);
                let alpha_i = alpha[i];
                for j in 0..n {
                    z += alpha_i * ai[j] * emit_beta[j];
                }
            }
            if z <= 0.0 {
                return Err(Error::Numeric(format!(
                    "degenerate transition posterior at t = {t}"
                )));
            }
            let inv_z = 1.0 / z;
            for i in 0..n {
                let ai = model.a_row(i);
                let scale = alpha[i] * inv_z;
                let xi_i = &mut acc.xi_sum[i * n..(i + 1) * n];
                for j in 0..n {
                    xi_i[j] += scale * ai[j] * emit_beta[j];
                }
            }
        }
    }
    Ok(acc)
}

fn m_step(model: &mut HmmModel, acc: &EStep) {
    let (n, m) = (model.n, model.m);
    model.pi.copy_from_slice(&acc.gamma0);
    for i in 0..n {
        if acc.gamma_sum_trans[i] > 0.0 {
            let inv = 1.0 / acc.gamma_sum_trans[i];
            let row = &mut model.a[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] = acc.xi_sum[i * n + j] * inv;
            }
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        // Emission update with floor and renormalization.
        if acc.gamma_sum_all[i] > 0.0 {
            let inv = 1.0 / acc.gamma_sum_all[i];
            let row = &mut model.b[i * m..(i + 1) * m];
            let mut sum = 0.0;
            for k in 0..m {
                row[k] = (acc.emit_sum[i * m + k] * inv).max(EMISSION_FLOOR);
                sum += row[k];
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
}

/// Baum-Welch re-estimation on a single (possibly concatenated) observation
/// sequence.
///
/// The stopping metric is the per-symbol mean log-likelihood: training stops
/// once at least `min_iterations` updates have run and an iteration improves
/// the mean by less than `epsilon` nats, or at `max_iterations`. The
/// returned log's history holds one mean per evaluated model and is
/// non-decreasing up to floating-point slack.
pub fn baum_welch(
    model: &HmmModel,
    obs: &[u32],
    min_iterations: usize,
    epsilon: f64,
    max_iterations: usize,
) -> Result<(HmmModel, TrainLog)> {
    if obs.len() < 2 {
        return Err(Error::DegenerateSequence(format!(
            "Baum-Welch needs at least 2 symbols, got {}",
            obs.len()
        )));
    }
    let mut model = model.clone();
    let t_len = obs.len() as f64;
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0usize;
    let mut converged = false;

    loop {
        let acc = e_step(&model, obs)?;
        let mean_ll = acc.log_likelihood / t_len;
        let stop = history
            .last()
            .is_some_and(|&prev| iterations >= min_iterations && mean_ll - prev < epsilon);
        history.push(mean_ll);
        if stop {
            converged = true;
            break;
        }
        if iterations >= max_iterations {
            break;
        }
        m_step(&mut model, &acc);
        iterations += 1;
    }

    let log = TrainLog {
        iterations,
        mean_log_likelihood_history: history,
        converged,
    };
    model.train_log = log.clone();
    Ok((model, log))
}

/// Train one model per family on the concatenation (in manifest order) of
/// that family's training sequences. Each family trains from its own derived
/// seed; the map iterates in canonical (lexicographic) family order.
pub fn train_family_models(
    train: &Corpus,
    n: usize,
    seed: u64,
) -> Result<BTreeMap<String, HmmModel>> {
    let vocab = train.vocabulary.as_ref().ok_or_else(|| {
        Error::InvalidInput("corpus must be encoded before training".into())
    })?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus("no training samples".into()));
    }
    let m = vocab.total_symbols();
    let by_family = train.indices_by_family();
    for family in &train.families {
        if !by_family.contains_key(family.as_str()) {
            return Err(Error::EmptyCorpus(format!(
                "family {family} has no training samples"
            )));
        }
    }

    let trained: Vec<(String, HmmModel)> = by_family
        .par_iter()
        .map(|(family, indices)| -> Result<(String, HmmModel)> {
            let mut concatenated: Vec<u32> = Vec::new();
            for &i in indices {
                concatenated.extend_from_slice(train.samples[i].encoded()?);
            }
            let fam_seed = seeding::family_seed(seed, family);
            let init = init_model(n, m, fam_seed, DEFAULT_JITTER)?;
            let (mut model, _) = baum_welch(
                &init,
                &concatenated,
                DEFAULT_MIN_ITERATIONS,
                DEFAULT_EPSILON,
                DEFAULT_MAX_ITERATIONS,
            )?;
            model.family = family.to_string();
            model.seed = fam_seed;
            Ok((family.to_string(), model))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(trained.into_iter().collect())
}

/// Ancestral sampling: draw a length-`length` observation sequence from the
/// model.
pub fn sample_observations<R: Rng>(model: &HmmModel, length: usize, rng: &mut R) -> Vec<u32> {
    let draw = |dist: &[f64], rng: &mut R| -> usize {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        for (i, &p) in dist.iter().enumerate() {
            cum += p;
            if u < cum {
                return i;
            }
        }
        dist.len() - 1
    };
    let mut obs = Vec::with_capacity(length);
    if length == 0 {
        return obs;
    }
    let mut state = draw(&model.pi, rng);
    obs.push(draw(model.b_row(state), rng) as u32);
    for _ in 1..length {
        state = draw(model.a_row(state), rng);
        obs.push(draw(model.b_row(state), rng) as u32);
    }
    obs
}

/// On-disk model schema: matrices as nested row arrays plus the vocabulary
/// binding.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    family: String,
    n: usize,
    m: usize,
    seed: u64,
    pi: Vec<f64>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    vocab: Vec<String>,
    train_log: TrainLog,
}

pub fn save_model(path: &Path, model: &HmmModel, vocab: &Vocabulary) -> Result<()> {
    let file = ModelFile {
        family: model.family.clone(),
        n: model.n,
        m: model.m,
        seed: model.seed,
        pi: model.pi.clone(),
        a: (0..model.n).map(|i| model.a_row(i).to_vec()).collect(),
        b: (0..model.n).map(|i| model.b_row(i).to_vec()).collect(),
        vocab: vocab.tokens().to_vec(),
        train_log: model.train_log.clone(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(HmmModel, Vocabulary)> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)?;
    if file.pi.len() != file.n
        || file.a.len() != file.n
        || file.b.len() != file.n
        || file.a.iter().any(|r| r.len() != file.n)
        || file.b.iter().any(|r| r.len() != file.m)
        || file.vocab.len() + 1 != file.m
    {
        return Err(Error::ShapeMismatch(format!(
            "inconsistent model file {}",
            path.display()
        )));
    }
    let vocab: Vocabulary = serde_json::from_value(serde_json::json!(file.vocab))?;
    Ok((
        HmmModel {
            n: file.n,
            m: file.m,
            a: file.a.into_iter().flatten().collect(),
            b: file.b.into_iter().flatten().collect(),
            pi: file.pi,
            family: file.family,
            seed: file.seed,
            train_log: file.train_log,
        },
        vocab,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_rows_stochastic(model: &HmmModel, tol: f64) {
        let pi_sum: f64 = model.pi.iter().sum();
        assert!((pi_sum - 1.0).abs() < tol, "pi sums to {pi_sum}");
        for i in 0..model.n {
            let a_sum: f64 = model.a_row(i).sum_check();
            assert!((a_sum - 1.0).abs() < tol, "a row {i} sums to {a_sum}");
            let b_sum: f64 = model.b_row(i).sum_check();
            assert!((b_sum - 1.0).abs() < tol, "b row {i} sums to {b_sum}");
        }
        assert!(model.a.iter().chain(&model.b).chain(&model.pi).all(|&v| v >= 0.0));
    }

    trait SumCheck {
        fn sum_check(&self) -> f64;
    }
    impl SumCheck for [f64] {
        fn sum_check(&self) -> f64 {
            self.iter().sum()
        }
    }

    fn model_from(n: usize, m: usize, pi: &[f64], a: &[f64], b: &[f64]) -> HmmModel {
        HmmModel {
            n,
            m,
            a: a.to_vec(),
            b: b.to_vec(),
            pi: pi.to_vec(),
            family: String::new(),
            seed: 0,
            train_log: TrainLog::default(),
        }
    }

    /// Brute-force P(O|lambda) by enumerating every state path.
    fn path_sum_likelihood(model: &HmmModel, obs: &[u32]) -> f64 {
        let t_len = obs.len();
        let n = model.n;
        let paths = n.pow(t_len as u32);
        let mut total = 0.0;
        for mut code in 0..paths {
            let mut path = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                path.push(code % n);
                code /= n;
            }
            let mut p = model.pi[path[0]] * model.b[path[0] * model.m + obs[0] as usize];
            for t in 1..t_len {
                p *= model.a[path[t - 1] * n + path[t]]
                    * model.b[path[t] * model.m + obs[t] as usize];
            }
            total += p;
        }
        total
    }

    /// Brute-force posterior marginals by enumerating every state path.
    fn path_sum_marginals(model: &HmmModel, obs: &[u32]) -> Vec<f64> {
        let t_len = obs.len();
        let n = model.n;
        let paths = n.pow(t_len as u32);
        let mut marg = vec![0.0; t_len * n];
        let mut total = 0.0;
        for mut code in 0..paths {
            let mut path = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                path.push(code % n);
                code /= n;
            }
            let mut p = model.pi[path[0]] * model.b[path[0] * model.m + obs[0] as usize];
            for t in 1..t_len {
                p *= model.a[path[t - 1] * n + path[t]]
                    * model.b[path[t] * model.m + obs[t] as usize];
            }
            total += p;
            for t in 0..t_len {
                marg[t * n + path[t]] += p;
            }
        }
        for v in &mut marg {
            *v /= total;
        }
        marg
    }

    fn random_model(n: usize, m: usize, seed: u64) -> HmmModel {
        // Jittered past what init_model allows, to get unambiguous argmaxes.
        let mut rng = seeding::rng(seed);
        let mut fill = |len: usize| -> Vec<f64> {
            let mut row: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 0.05).collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
            row
        };
        let pi = fill(n);
        let a: Vec<f64> = (0..n).flat_map(|_| fill(n)).collect();
        let b: Vec<f64> = (0..n).flat_map(|_| fill(m)).collect();
        model_from(n, m, &pi, &a, &b)
    }

    #[test]
    fn init_uniform_when_jitter_zero() {
        let model = init_model(3, 4, 7, 0.0).unwrap();
        for &v in &model.pi {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        for &v in &model.a {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        for &v in &model.b {
            assert!((v - 0.25).abs() < 1e-12);
        }
        assert_rows_stochastic(&model, 1e-10);
    }

    #[test]
    fn init_shapes_and_determinism() {
        let m1 = init_model(20, 427, 99, DEFAULT_JITTER).unwrap();
        assert_eq!(m1.a.len(), 400);
        assert_eq!(m1.b.len(), 20 * 427);
        assert_eq!(m1.pi.len(), 20);
        assert_rows_stochastic(&m1, 1e-10);
        let m2 = init_model(20, 427, 99, DEFAULT_JITTER).unwrap();
        assert_eq!(m1, m2);
        let m3 = init_model(20, 427, 100, DEFAULT_JITTER).unwrap();
        assert_ne!(m1.a, m3.a);
    }

    #[test]
    fn init_rejects_bad_dimensions() {
        assert!(matches!(
            init_model(0, 4, 0, 0.0),
            Err(Error::InvalidDimension(_))
        ));
        assert!(matches!(
            init_model(2, 0, 0, 0.0),
            Err(Error::InvalidDimension(_))
        ));
        assert!(matches!(
            init_model(2, 2, 0, 1.0),
            Err(Error::InvalidDimension(_))
        ));
    }

    #[test]
    fn forward_single_state_closed_form() {
        let model = model_from(1, 2, &[1.0], &[1.0], &[0.5, 0.5]);
        let fb = forward_backward(&model, &[0, 1, 0]).unwrap();
        assert!((fb.log_likelihood - 3.0 * 0.5f64.ln()).abs() < 1e-12);
        // Scales identity: -sum(ln scales) == log-likelihood.
        let neg_sum: f64 = -fb.scales.iter().map(|s| s.ln()).sum::<f64>();
        assert!((neg_sum - fb.log_likelihood).abs() < 1e-12);
    }

    #[test]
    fn forward_deterministic_chain_probability_one() {
        // pi = [1, 0], states alternate, state i emits only symbol i.
        let model = model_from(
            2,
            2,
            &[1.0, 0.0],
            &[0.0, 1.0, 1.0, 0.0],
            &[1.0, 0.0, 0.0, 1.0],
        );
        let fb = forward_backward(&model, &[0, 1, 0]).unwrap();
        assert!(fb.log_likelihood.abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_symbols_and_empty() {
        let model = init_model(2, 3, 0, 0.0).unwrap();
        assert!(matches!(
            forward_backward(&model, &[0, 3]),
            Err(Error::SymbolOutOfRange(_))
        ));
        assert!(matches!(
            forward_backward(&model, &[]),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn forward_matches_path_enumeration() {
        for seed in 0..20 {
            let model = random_model(3, 4, seed);
            let mut rng = seeding::rng(seed + 1000);
            let obs: Vec<u32> = (0..6).map(|_| rng.random_range(0..4)).collect();
            let fb = forward_backward(&model, &obs).unwrap();
            let brute = path_sum_likelihood(&model, &obs);
            assert!(
                (fb.log_likelihood - brute.ln()).abs() < 1e-9,
                "seed {seed}: {} vs {}",
                fb.log_likelihood,
                brute.ln()
            );
        }
    }

    #[test]
    fn alpha_rows_and_gamma_rows_sum_to_one() {
        let model = random_model(3, 4, 5);
        let obs = [0u32, 2, 1, 3, 0, 1];
        let fb = forward_backward(&model, &obs).unwrap();
        for t in 0..obs.len() {
            let asum: f64 = fb.alpha_row(t).iter().sum();
            assert!((asum - 1.0).abs() < 1e-10);
            let gsum: f64 = fb.gamma_row(t).iter().sum();
            assert!((gsum - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn decode_single_state_is_all_zero() {
        let model = model_from(1, 2, &[1.0], &[1.0], &[0.5, 0.5]);
        let seq = posterior_decode(&model, &[0, 1, 1, 0]).unwrap();
        assert_eq!(seq.states, vec![0, 0, 0, 0]);
    }

    #[test]
    fn decode_forced_emissions() {
        // State 0 emits only symbol 0, state 1 only symbol 1.
        let model = model_from(
            2,
            2,
            &[0.5, 0.5],
            &[0.5, 0.5, 0.5, 0.5],
            &[1.0, 0.0, 0.0, 1.0],
        );
        let seq = posterior_decode(&model, &[0, 1]).unwrap();
        assert_eq!(seq.states, vec![0, 1]);
    }

    #[test]
    fn decode_matches_marginal_enumeration() {
        for seed in 0..20 {
            let model = random_model(2, 3, seed + 50);
            let mut rng = seeding::rng(seed + 2000);
            let obs: Vec<u32> = (0..5).map(|_| rng.random_range(0..3)).collect();
            let decoded = posterior_decode(&model, &obs).unwrap();
            let marg = path_sum_marginals(&model, &obs);
            for t in 0..obs.len() {
                let row = &marg[t * 2..(t + 1) * 2];
                let expect = if row[1] > row[0] { 1 } else { 0 };
                assert_eq!(decoded.states[t], expect, "seed {seed} t {t}");
            }
        }
    }

    #[test]
    fn decode_is_repeatable() {
        let model = random_model(3, 4, 77);
        let obs = [1u32, 0, 3, 2, 2, 1, 0];
        let d1 = posterior_decode(&model, &obs).unwrap();
        let d2 = posterior_decode(&model, &obs).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn baum_welch_history_monotone() {
        let init = init_model(3, 3, 11, DEFAULT_JITTER).unwrap();
        let mut rng = seeding::rng(midway_seed());
        let obs: Vec<u32> = (0..400).map(|_| rng.random_range(0..3)).collect();
        let (model, log) = baum_welch(&init, &obs, 5, 1e-4, 100).unwrap();
        assert!(log.mean_log_likelihood_history.len() >= 2);
        for w in log.mean_log_likelihood_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "history decreased: {w:?}");
        }
        assert_rows_stochastic(&model, 1e-10);
        // Emission floor respected.
        assert!(model.b.iter().all(|&v| v >= EMISSION_FLOOR / 2.0));
    }

    fn midway_seed() -> u64 {
        0xfeed
    }

    #[test]
    fn baum_welch_respects_min_iterations_and_epsilon() {
        let init = init_model(2, 2, 3, DEFAULT_JITTER).unwrap();
        let obs: Vec<u32> = [0u32, 1].repeat(50);
        let (_, log) = baum_welch(&init, &obs, 10, 1e9, 500).unwrap();
        // With a huge epsilon, the first permitted stop triggers.
        assert_eq!(log.iterations, 10);
        assert!(log.converged);
    }

    #[test]
    fn baum_welch_rejects_short_sequence() {
        let init = init_model(2, 2, 3, 0.0).unwrap();
        assert!(matches!(
            baum_welch(&init, &[0], 1, 0.1, 10),
            Err(Error::DegenerateSequence(_))
        ));
    }

    #[test]
    fn train_family_models_orders_and_seeds() {
        use crate::corpus::{build_vocabulary, encode_corpus, Corpus, OpcodeSample, TokenSeq};
        let mk = |id: &str, family: &str, toks: Vec<&str>| OpcodeSample {
            sample_id: id.into(),
            family: family.into(),
            raw_length: toks.len(),
            tokens: TokenSeq::Raw(toks.into_iter().map(String::from).collect()),
        };
        let samples = vec![
            mk("1", "zbot", vec!["MOV", "ADD", "MOV", "ADD"]),
            mk("2", "cridex", vec!["XOR", "XOR", "MOV", "XOR"]),
            mk("3", "zbot", vec!["ADD", "ADD", "MOV"]),
        ];
        let corpus = {
            let mut families: Vec<String> = vec!["cridex".into(), "zbot".into()];
            families.sort();
            Corpus {
                samples,
                families,
                vocabulary: None,
            }
        };
        let vocab = build_vocabulary(&corpus).unwrap();
        let encoded = encode_corpus(corpus, &vocab).unwrap();
        let models = train_family_models(&encoded, 2, 42).unwrap();
        let keys: Vec<&String> = models.keys().collect();
        assert_eq!(keys, vec!["cridex", "zbot"]);
        assert_eq!(models["zbot"].m, vocab.total_symbols());
        assert_eq!(
            models["zbot"].seed,
            seeding::family_seed(42, "zbot")
        );

        let models2 = train_family_models(&encoded, 2, 42).unwrap();
        assert_eq!(models, models2);
    }

    #[test]
    fn train_single_family_gives_map_of_one() {
        use crate::corpus::{build_vocabulary, encode_corpus, Corpus, OpcodeSample, TokenSeq};
        let samples = vec![OpcodeSample {
            sample_id: "only".into(),
            family: "zbot".into(),
            raw_length: 6,
            tokens: TokenSeq::Raw(
                ["MOV", "ADD", "MOV", "XOR", "ADD", "MOV"]
                    .map(String::from)
                    .to_vec(),
            ),
        }];
        let corpus = Corpus {
            samples,
            families: vec!["zbot".into()],
            vocabulary: None,
        };
        let vocab = build_vocabulary(&corpus).unwrap();
        let encoded = encode_corpus(corpus, &vocab).unwrap();
        let models = train_family_models(&encoded, 2, 1).unwrap();
        assert_eq!(models.len(), 1);
        assert_eq!(models["zbot"].family, "zbot");
    }

    #[test]
    fn model_file_roundtrip() {
        use crate::corpus::Vocabulary;
        let vocab: Vocabulary = serde_json::from_str(r#"["MOV","ADD"]"#).unwrap();
        let mut model = init_model(2, 3, 5, DEFAULT_JITTER).unwrap();
        model.family = "zbot".into();
        model.train_log = TrainLog {
            iterations: 3,
            mean_log_likelihood_history: vec![-1.0, -0.9, -0.85, -0.849],
            converged: true,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &model, &vocab).unwrap();
        let (back, vocab_back) = load_model(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(vocab_back, vocab);
        // Interface field names.
        let value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for key in ["family", "n", "m", "seed", "pi", "a", "b", "vocab", "train_log"] {
            assert!(value.get(key).is_some(), "missing key {key}");
        }
        assert!(value["train_log"].get("history").is_some());
    }

    #[test]
    fn sample_observations_is_deterministic() {
        let model = random_model(3, 5, 8);
        let mut r1 = seeding::rng(1);
        let mut r2 = seeding::rng(1);
        let s1 = sample_observations(&model, 100, &mut r1);
        let s2 = sample_observations(&model, 100, &mut r2);
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|&o| o < 5));
    }

    #[test]
    fn score_impossible_sequence_is_neg_infinity() {
        // State emits only symbol 0; observing symbol 1 is impossible.
        let model = model_from(1, 2, &[1.0], &[1.0], &[1.0, 0.0]);
        let ll = sequence_log_likelihood(&model, &[0, 1]).unwrap();
        assert_eq!(ll, f64::NEG_INFINITY);
        // And the matching possible sequence has probability 1.
        let ll = sequence_log_likelihood(&model, &[0, 0]).unwrap();
        assert!(ll.abs() < 1e-12);
    }
}
