//! Linear-softmax policy: `logits = W·φ(state) + b`, softmax over legal tokens.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::Featurizer;
use super::grammar::{allowed, Allowed};
use super::trajectory::StateView;
use crate::error::{LabError, Result};
use crate::scalar::Scalar;
use crate::vocab::{Marker, Token, Vocab};

/// Weights are stored feature-major: `weights[j * vocab_size + v]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams<T> {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            vocab_size,
            feature_dim,
            weights: vec![T::zero(); vocab_size * feature_dim],
            bias: vec![T::zero(); vocab_size],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size, self.feature_dim)
    }

    #[inline]
    pub fn w(&self, feature: usize, token: usize) -> T {
        self.weights[feature * self.vocab_size + token]
    }

    #[inline]
    pub fn w_mut(&mut self, feature: usize, token: usize) -> &mut T {
        &mut self.weights[feature * self.vocab_size + token]
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view index `i` over `weights` then `bias`.
    pub fn get(&self, i: usize) -> T {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.bias[i - self.weights.len()]
        }
    }

    pub fn get_mut(&mut self, i: usize) -> &mut T {
        let nw = self.weights.len();
        if i < nw {
            &mut self.weights[i]
        } else {
            &mut self.bias[i - nw]
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size && self.feature_dim == other.feature_dim
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.weights.iter_mut().zip(&other.weights) {
            *a += alpha * b;
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        self.weights.iter_mut().for_each(|a| *a *= alpha);
        self.bias.iter_mut().for_each(|a| *a *= alpha);
    }

    pub fn dot(&self, other: &Self) -> T {
        self.weights
            .iter()
            .zip(&other.weights)
            .chain(self.bias.iter().zip(&other.bias))
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.weights
            .iter()
            .zip(&other.weights)
            .chain(self.bias.iter().zip(&other.bias))
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: POLICY_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: self,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint<Self> = serde_json::from_str(s)?;
        check_header(&ck.format, ck.version, POLICY_FORMAT)?;
        let p = ck.params;
        if p.weights.len() != p.vocab_size * p.feature_dim || p.bias.len() != p.vocab_size {
            return Err(LabError::Shape("policy checkpoint arrays disagree with header".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_json()?.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::io::read_to_string(BufReader::new(File::open(path)?))?;
        Self::from_json(s.trim_end())
    }

    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        PolicyParams {
            vocab_size: self.vocab_size,
            feature_dim: self.feature_dim,
            weights: self.weights.iter().map(|x| U::lit(x.as_f64())).collect(),
            bias: self.bias.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}

pub(crate) const CHECKPOINT_VERSION: u32 = 1;
const POLICY_FORMAT: &str = "steplab-policy";

#[derive(Serialize, Deserialize)]
pub(crate) struct Checkpoint<P> {
    pub format: String,
    pub version: u32,
    pub params: P,
}

pub(crate) fn check_header(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(LabError::Format(format!(
            "expected a {expected} checkpoint, found {format}"
        )));
    }
    if version != CHECKPOINT_VERSION {
        return Err(LabError::Format(format!("unsupported checkpoint version {version}")));
    }
    Ok(())
}

/// Policy structure shared by every parameter snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub featurizer: Featurizer,
    /// Restrict sampling and likelihoods to grammar-legal tokens.
    pub masking: bool,
}

impl PolicyModel {
    pub fn new(vocab: Vocab, max_hops: usize, masking: bool) -> Self {
        Self {
            featurizer: Featurizer::new(vocab, max_hops),
            masking,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.featurizer.vocab
    }

    pub fn init_params<T: Scalar>(&self) -> PolicyParams<T> {
        PolicyParams::zeros(self.vocab().size(), self.featurizer.dim())
    }

    pub fn legal(&self, view: &StateView<'_>) -> Allowed {
        if self.masking {
            allowed(self.vocab(), view.partial)
        } else {
            Allowed::Any
        }
    }

    fn check_shape<T: Scalar>(&self, params: &PolicyParams<T>) -> Result<()> {
        if params.vocab_size != self.vocab().size() || params.feature_dim != self.featurizer.dim() {
            return Err(LabError::Shape(format!(
                "params are {}x{}, model expects {}x{}",
                params.vocab_size,
                params.feature_dim,
                self.vocab().size(),
                self.featurizer.dim()
            )));
        }
        Ok(())
    }

    fn logits_from<T: Scalar>(params: &PolicyParams<T>, active: &[(usize, f64)]) -> Vec<T> {
        let v = params.vocab_size;
        let mut z = params.bias.clone();
        for &(j, x) in active {
            let x = T::lit(x);
            let row = &params.weights[j * v..(j + 1) * v];
            for (zi, &w) in z.iter_mut().zip(row) {
                *zi += w * x;
            }
        }
        z
    }

    /// Raw logits over the whole vocabulary (no masking).
    pub fn action_logits<T: Scalar>(&self, params: &PolicyParams<T>, view: &StateView<'_>) -> Result<Vec<T>> {
        self.check_shape(params)?;
        Ok(Self::logits_from(params, &self.featurizer.active(view)))
    }

    /// Sampling distribution at `temperature` (0 = greedy, ties to the lowest id).
    /// Illegal tokens get probability exactly 0.
    pub fn distribution<T: Scalar>(
        &self,
        params: &PolicyParams<T>,
        view: &StateView<'_>,
        temperature: f64,
    ) -> Result<Vec<T>> {
        let z = self.action_logits(params, view)?;
        let legal = self.legal(view);
        Ok(softmax_masked(self.vocab(), &z, legal, temperature))
    }

    /// `log π(token | state)` at temperature 1.
    pub fn log_prob<T: Scalar>(&self, params: &PolicyParams<T>, view: &StateView<'_>, token: Token) -> Result<T> {
        let legal = self.legal(view);
        if !legal.contains(self.vocab(), token) {
            return Err(LabError::MaskedToken(token.0));
        }
        let z = self.action_logits(params, view)?;
        let lse = log_sum_exp(self.vocab(), &z, legal);
        Ok(z[token.0 as usize] - lse)
    }

    /// Gradient of `log π(token | state)` with respect to all parameters.
    pub fn log_prob_grad<T: Scalar>(
        &self,
        params: &PolicyParams<T>,
        view: &StateView<'_>,
        token: Token,
    ) -> Result<PolicyParams<T>> {
        let mut g = params.zeros_like();
        self.accumulate_log_prob_grad(params, view, token, T::one(), &mut g)?;
        Ok(g)
    }

    /// `grad += scale * ∇ log π(token | state)`; returns `log π(token | state)`.
    pub fn accumulate_log_prob_grad<T: Scalar>(
        &self,
        params: &PolicyParams<T>,
        view: &StateView<'_>,
        token: Token,
        scale: T,
        grad: &mut PolicyParams<T>,
    ) -> Result<T> {
        self.check_shape(params)?;
        let legal = self.legal(view);
        let vocab = self.vocab();
        if !legal.contains(vocab, token) {
            return Err(LabError::MaskedToken(token.0));
        }
        let active = self.featurizer.active(view);
        let z = Self::logits_from(params, &active);
        let p = softmax_masked(vocab, &z, legal, 1.0);
        let ti = token.0 as usize;
        let logp = p[ti].ln();
        let logp = if logp.is_finite() {
            logp
        } else {
            z[ti] - log_sum_exp(vocab, &z, legal)
        };
        if scale == T::zero() {
            return Ok(logp);
        }
        // d log p_t / d z_v = 1[v = t] - p_v
        let mut dz: Vec<T> = p.iter().map(|&pv| -pv * scale).collect();
        dz[ti] += scale;
        let v = params.vocab_size;
        for (b, &d) in grad.bias.iter_mut().zip(&dz) {
            *b += d;
        }
        for &(j, x) in &active {
            let x = T::lit(x);
            let row = &mut grad.weights[j * v..(j + 1) * v];
            for (g, &d) in row.iter_mut().zip(&dz) {
                *g += d * x;
            }
        }
        Ok(logp)
    }

    /// Draws one token; returns it with its temperature-1 log-probability.
    pub fn sample_token<T: Scalar, R: Rng>(
        &self,
        params: &PolicyParams<T>,
        view: &StateView<'_>,
        temperature: f64,
        rng: &mut R,
    ) -> Result<(Token, T)> {
        let z = self.action_logits(params, view)?;
        let legal = self.legal(view);
        let vocab = self.vocab();
        let probs = softmax_masked(vocab, &z, legal, temperature);
        let token = if temperature == 0.0 {
            Token(argmax(&probs) as u32)
        } else {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_legal = 0;
            for (i, p) in probs.iter().enumerate() {
                let p = p.as_f64();
                if p > 0.0 {
                    last_legal = i;
                    acc += p;
                    if u < acc {
                        pick = Some(i);
                        break;
                    }
                }
            }
            Token(pick.unwrap_or(last_legal) as u32)
        };
        let logp = if temperature == 1.0 {
            probs[token.0 as usize].ln()
        } else {
            z[token.0 as usize] - log_sum_exp(vocab, &z, legal)
        };
        Ok((token, logp))
    }

    /// Hand-built parameters that put (almost) all mass on the reference
    /// reasoning path for any query, given structural masking.
    pub fn oracle_params<T: Scalar>(&self, margin: f64) -> PolicyParams<T> {
        let f = &self.featurizer;
        let o = f.offsets();
        let vocab = *self.vocab();
        let mut p = self.init_params::<T>();
        let m = T::lit(margin);
        let two = T::lit(2.0 * margin);
        let three = T::lit(3.0 * margin);
        let kind_feature = |k: super::trajectory::StepKind| o.last_kind + 1 + k.index();
        use super::trajectory::StepKind as K;
        let step_open = Marker::StepOpen.token().0 as usize;
        let sub_open = Marker::SubanswerOpen.token().0 as usize;
        let ans_open = Marker::AnswerOpen.token().0 as usize;
        // Block-start choice.
        *p.w_mut(o.last_kind, step_open) += m;
        *p.w_mut(kind_feature(K::Subanswer), step_open) += m;
        for r in 1..=f.max_hops {
            *p.w_mut(o.remaining + r, step_open) += m;
        }
        *p.w_mut(kind_feature(K::Subanswer), ans_open) += m;
        *p.w_mut(o.remaining, ans_open) += two;
        *p.w_mut(kind_feature(K::Retrieval), sub_open) += three;
        // Free slots copy the pointed-at relation / entity.
        for r in 0..vocab.num_relations {
            let t = vocab.relation(crate::vocab::RelationId(r)).0 as usize;
            *p.w_mut(o.slot_relation + r as usize, t) += two;
        }
        for e in 0..vocab.num_entities {
            let t = vocab.entity(crate::vocab::EntityId(e)).0 as usize;
            *p.w_mut(o.focus + e as usize, t) += two;
        }
        p
    }
}

fn log_sum_exp<T: Scalar>(vocab: &Vocab, z: &[T], legal: Allowed) -> T {
    let mut mx = T::neg_infinity();
    for (i, &zi) in z.iter().enumerate() {
        if legal.contains(vocab, Token(i as u32)) && zi > mx {
            mx = zi;
        }
    }
    let s: T = z
        .iter()
        .enumerate()
        .filter(|(i, _)| legal.contains(vocab, Token(*i as u32)))
        .map(|(_, &zi)| (zi - mx).exp())
        .sum();
    mx + s.ln()
}

pub(crate) fn softmax_masked<T: Scalar>(vocab: &Vocab, z: &[T], legal: Allowed, temperature: f64) -> Vec<T> {
    let mut out = vec![T::zero(); z.len()];
    if temperature == 0.0 {
        let mut best: Option<usize> = None;
        for (i, &zi) in z.iter().enumerate() {
            if legal.contains(vocab, Token(i as u32)) && best.is_none_or(|b| zi > z[b]) {
                best = Some(i);
            }
        }
        if let Some(b) = best {
            out[b] = T::one();
        }
        return out;
    }
    let inv_t = T::lit(1.0 / temperature);
    let mut mx = T::neg_infinity();
    for (i, &zi) in z.iter().enumerate() {
        if legal.contains(vocab, Token(i as u32)) {
            mx = mx.max(zi * inv_t);
        }
    }
    let mut sum = T::zero();
    for (i, &zi) in z.iter().enumerate() {
        if legal.contains(vocab, Token(i as u32)) {
            let e = (zi * inv_t - mx).exp();
            out[i] = e;
            sum += e;
        }
    }
    for x in out.iter_mut() {
        *x /= sum;
    }
    out
}

fn argmax<T: Scalar>(p: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}
