//! Query–corpus relevance: model-independent distances, Fisher vectors and
//! the combined score
//!
//! ```text
//! s(q, c) = κ(U(H_q), H_c) + γ · (−Δ_t(U(H_q), H_c) − Δ_x(H_q, H_c))
//! ```
//!
//! `κ` is the cosine similarity of two Fisher vectors, the normalized
//! gradients of sequence log-likelihoods. With the self-attention model each
//! vector depends on its own sequence only; with the cross-attention model
//! the query vector is taken from `log p(U(H_q) | H_c)` and the corpus vector
//! from `log p(H_c | U(H_q))`.
//!
//! ```
//! use ctesret::relevance::{delta_t, delta_x};
//! use ctesret::seq::EventSequence;
//!
//! let q = EventSequence::from_parts("q", 3.0, &[1.0, 2.0], &[0, 1]);
//! let c = EventSequence::from_parts("c", 3.0, &[1.5, 2.0], &[0, 2]);
//! assert_eq!(delta_t(&q, &c, 3.0).unwrap(), 0.5);
//! assert_eq!(delta_x(&q, &c), 1.0);
//! ```

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{FisherMode, RetrievalModel};
use crate::mtpp::{EncoderKind, Forward, SeqInput};
use crate::seq::EventSequence;

/// Floor applied to the diagonal Fisher estimate before inversion.
pub const PRECONDITIONER_FLOOR: f64 = 1e-8;

/// Which terms enter the relevance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreFlags {
    pub kappa: bool,
    pub delta_t: bool,
    pub delta_x: bool,
    pub unwarp: bool,
}

impl ScoreFlags {
    pub const FULL: ScoreFlags = ScoreFlags {
        kappa: true,
        delta_t: true,
        delta_x: true,
        unwarp: true,
    };
}

impl Default for ScoreFlags {
    fn default() -> Self {
        Self::FULL
    }
}

/// The six ablation variants, from the model-independent score alone up to
/// the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// `−Δ_x − Δ_t(U(H_q), H_c)`.
    I,
    /// `κ`.
    II,
    /// `κ − γΔ_x`.
    III,
    /// `κ − γΔ_t`.
    IV,
    /// Full score with `U` fixed to the identity (trained that way too).
    V,
    /// Full score.
    VI,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::I,
        Variant::II,
        Variant::III,
        Variant::IV,
        Variant::V,
        Variant::VI,
    ];

    pub fn flags(self) -> ScoreFlags {
        let (kappa, delta_t, delta_x, unwarp) = match self {
            Variant::I => (false, true, true, true),
            Variant::II => (true, false, false, true),
            Variant::III => (true, false, true, true),
            Variant::IV => (true, true, false, true),
            Variant::V => (true, true, true, false),
            Variant::VI => (true, true, true, true),
        };
        ScoreFlags {
            kappa,
            delta_t,
            delta_x,
            unwarp,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::I => "i",
            Variant::II => "ii",
            Variant::III => "iii",
            Variant::IV => "iv",
            Variant::V => "v",
            Variant::VI => "vi",
        }
    }
}

/// Unit-norm (preconditioned) log-likelihood gradient of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherVector {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioning: Option<String>,
    pub v: Vec<f64>,
}

/// Arrival-time distance between an (unwarped) query and a corpus sequence:
/// `Σ_{i ≤ Hmin} |t_i^q − t_i^c|` plus `Σ (T − t_i)` over the trailing events
/// of the longer sequence.
pub fn delta_t(
    unwarped_query: &EventSequence,
    corpus: &EventSequence,
    horizon: f64,
) -> Result<f64> {
    for e in unwarped_query.events.iter().chain(&corpus.events) {
        if e.time > horizon {
            return Err(Error::HorizonTooSmall {
                horizon,
                time: e.time,
            });
        }
    }
    let (q, c) = (&unwarped_query.events, &corpus.events);
    let hmin = q.len().min(c.len());
    let head: f64 = q.iter().zip(c).map(|(a, b)| (a.time - b.time).abs()).sum();
    let tail: f64 = q[hmin..]
        .iter()
        .chain(&c[hmin..])
        .map(|e| horizon - e.time)
        .sum();
    Ok(head + tail)
}

/// Mark mismatch count over the common prefix plus the length difference.
pub fn delta_x(query: &EventSequence, corpus: &EventSequence) -> f64 {
    let mismatches = query
        .events
        .iter()
        .zip(&corpus.events)
        .filter(|(a, b)| a.mark != b.mark)
        .count();
    (mismatches + query.len().abs_diff(corpus.len())) as f64
}

pub fn fisher_kernel(vq: &FisherVector, vc: &FisherVector) -> Result<f64> {
    if vq.v.len() != vc.v.len() {
        return Err(Error::DimensionMismatch {
            expected: vq.v.len(),
            got: vc.v.len(),
        });
    }
    Ok(dot(&vq.v, &vc.v))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient of the log-likelihood with respect to the output head, built
/// as a forward expression so it stays differentiable in every other
/// parameter. Returns a `P x 1` column in head-segment layout order.
pub fn head_gradient(
    tape: &Tape,
    model: &RetrievalModel,
    params: &ParamStore,
    input: &SeqInput,
    contexts: Var,
) -> Result<Var> {
    let mtpp = &model.mtpp;
    let head = mtpp.head(tape, params, contexts)?;
    let n = input.len();
    let k = mtpp.config.num_marks;
    let d = mtpp.config.dim;

    let resid = tape.sub(mtpp.log_gaps(tape, input), head.mu);
    let inv_var = tape.exp(tape.scale(head.log_sigma, -2.0));
    let d_mu = tape.mul(resid, inv_var);
    let d_log_sigma = tape.add_scalar(tape.mul(tape.square(resid), inv_var), -1.0);

    let mut onehot = Tensor::zeros(n, k);
    for (i, &m) in input.marks.iter().enumerate() {
        onehot.data[i * k + m] = 1.0;
    }
    let probs = tape.exp(head.mark_log_probs);
    let d_logits = tape.sub(tape.constant(onehot), probs);

    let w_time = tape.concat_rows(&[
        tape.matmul(tape.transpose(d_mu), contexts),
        tape.matmul(tape.transpose(d_log_sigma), contexts),
    ]);
    let b_time = tape.concat_rows(&[tape.sum(d_mu), tape.sum(d_log_sigma)]);
    let w_mark = tape.matmul(tape.transpose(d_logits), contexts);
    let b_mark = tape.transpose(tape.sum_rows(d_logits));
    Ok(tape.concat_rows(&[
        tape.reshape(w_time, 2 * d, 1),
        b_time,
        tape.reshape(w_mark, k * d, 1),
        b_mark,
    ]))
}

/// Applies the preconditioner and scales to unit norm.
pub fn normalize_gradient(
    tape: &Tape,
    raw: Var,
    preconditioner: Option<&[f64]>,
    id: &str,
) -> Result<Var> {
    let g = match preconditioner {
        Some(p) => {
            let (rows, _) = tape.shape(raw);
            if p.len() != rows {
                return Err(Error::DimensionMismatch {
                    expected: rows,
                    got: p.len(),
                });
            }
            tape.mul_const(raw, Tensor::column(p.to_vec()))
        }
        None => raw,
    };
    let norm = tape.value(g).data.iter().map(|x| x * x).sum::<f64>();
    if !norm.is_finite() {
        return Err(Error::NonFiniteValue("fisher gradient"));
    }
    if norm == 0.0 {
        return Err(Error::ZeroGradient(id.to_string()));
    }
    Ok(tape.l2_normalize(g))
}

/// `Î^{-1/2}` from the mean squared raw gradient, floored elementwise.
pub fn preconditioner_from_gradients(grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = grads.first().ok_or(Error::EmptyCorpus)?;
    let mut mean = vec![0.0; first.len()];
    for g in grads {
        if g.len() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: g.len(),
            });
        }
        for (m, x) in mean.iter_mut().zip(g) {
            *m += x * x;
        }
    }
    let n = grads.len() as f64;
    Ok(mean
        .into_iter()
        .map(|m| (m / n).max(PRECONDITIONER_FLOOR).powf(-0.5))
        .collect())
}

/// Query-side state shared across every corpus sequence scored on one tape.
#[derive(Debug, Clone)]
pub struct TapeQuery {
    pub query: EventSequence,
    /// Query times after unwarping (or as observed when unwarping is off).
    pub input: SeqInput,
    /// Unwarped horizon, `1 x 1`.
    pub horizon: Var,
    embedding: Option<Var>,
    self_vector: Option<Var>,
}

impl RetrievalModel {
    /// Unwarps the query on the tape and precomputes what every pair needs.
    pub fn prepare_query(
        &self,
        tape: &Tape,
        params: &ParamStore,
        query: &EventSequence,
        flags: ScoreFlags,
        noise: f64,
        fwd: &mut Forward,
    ) -> Result<TapeQuery> {
        if query.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let n = query.len();
        let (input, horizon) = if flags.unwarp && self.config.unwarp {
            let mut times = query.times();
            times.push(query.horizon);
            let u = self.umnn.unwarp_on_tape(tape, params, &times, noise)?;
            let input = SeqInput {
                times: tape.slice_rows(u.times, 0, n),
                gaps: tape.slice_rows(u.gaps, 0, n),
                marks: query.marks(),
            };
            (input, tape.slice_rows(u.times, n, 1))
        } else {
            let input = SeqInput::observed(tape, query)?;
            (input, tape.constant(Tensor::scalar(query.horizon)))
        };
        let mut embedding = None;
        let mut self_vector = None;
        if flags.kappa && self.config.fisher == FisherMode::Head {
            match self.kind() {
                EncoderKind::CrossAttn => {
                    embedding = Some(self.mtpp.embed(tape, params, &input)?);
                }
                EncoderKind::SelfAttn => {
                    let ctx = self.mtpp.contexts(tape, params, &input, None, fwd)?;
                    let raw = head_gradient(tape, self, params, &input, ctx)?;
                    self_vector = Some(normalize_gradient(
                        tape,
                        raw,
                        self.preconditioner.as_deref(),
                        &query.id,
                    )?);
                }
            }
        }
        Ok(TapeQuery {
            query: query.clone(),
            input,
            horizon,
            embedding,
            self_vector,
        })
    }

    /// Relevance score of one corpus sequence as a `1 x 1` node.
    pub fn score_on_tape(
        &self,
        tape: &Tape,
        params: &ParamStore,
        q: &TapeQuery,
        corpus: &EventSequence,
        flags: ScoreFlags,
        fwd: &mut Forward,
    ) -> Result<Var> {
        if corpus.is_empty() {
            return Err(Error::EmptySequence(corpus.id.clone()));
        }
        let mut terms = Vec::new();
        if flags.kappa {
            terms.push(self.kappa_on_tape(tape, params, q, corpus, fwd)?);
        }
        let weight = if flags.kappa { self.config.gamma } else { 1.0 };
        if flags.delta_t {
            let dt = delta_t_on_tape(tape, q.input.times, q.horizon, corpus);
            terms.push(tape.scale(dt, -weight));
        }
        if flags.delta_x {
            let dx = delta_x(&q.query, corpus);
            terms.push(tape.constant(Tensor::scalar(-weight * dx)));
        }
        let mut total = match terms.first() {
            Some(&t) => t,
            None => return Ok(tape.constant(Tensor::scalar(0.0))),
        };
        for &t in &terms[1..] {
            total = tape.add(total, t);
        }
        Ok(total)
    }

    fn kappa_on_tape(
        &self,
        tape: &Tape,
        params: &ParamStore,
        q: &TapeQuery,
        corpus: &EventSequence,
        fwd: &mut Forward,
    ) -> Result<Var> {
        if self.config.fisher == FisherMode::Full {
            if fwd.is_training() {
                return Err(Error::InvalidConfig(
                    "full-parameter Fisher vectors are not differentiable in training".into(),
                ));
            }
            let times = tape.value(q.input.times).data;
            let unwarped = EventSequence::from_parts(
                q.query.id.clone(),
                tape.scalar_value(q.horizon),
                &times,
                &q.input.marks,
            );
            let (vq, vc) = match self.kind() {
                EncoderKind::SelfAttn => (
                    fisher_vector(self, &unwarped, None)?,
                    fisher_vector(self, corpus, None)?,
                ),
                EncoderKind::CrossAttn => (
                    fisher_vector(self, &unwarped, Some(corpus))?,
                    fisher_vector(self, corpus, Some(&unwarped))?,
                ),
            };
            return Ok(tape.constant(Tensor::scalar(fisher_kernel(&vq, &vc)?)));
        }
        let precond = self.preconditioner.as_deref();
        let c_input = SeqInput::observed(tape, corpus)?;
        let (vq, vc) = match self.kind() {
            EncoderKind::SelfAttn => {
                let vq = q.self_vector.ok_or(Error::EmptyQuery)?;
                let ctx = self.mtpp.contexts(tape, params, &c_input, None, fwd)?;
                let raw = head_gradient(tape, self, params, &c_input, ctx)?;
                (vq, normalize_gradient(tape, raw, precond, &corpus.id)?)
            }
            EncoderKind::CrossAttn => {
                let q_emb = q.embedding.ok_or(Error::EmptyQuery)?;
                let c_emb = self.mtpp.embed(tape, params, &c_input)?;
                let hq = self.mtpp.cross_attend(tape, params, q_emb, c_emb, fwd)?;
                let ctx_q = self.mtpp.shift_contexts(tape, params, hq)?;
                let raw_q = head_gradient(tape, self, params, &q.input, ctx_q)?;
                let hc = self.mtpp.cross_attend(tape, params, c_emb, q_emb, fwd)?;
                let ctx_c = self.mtpp.shift_contexts(tape, params, hc)?;
                let raw_c = head_gradient(tape, self, params, &c_input, ctx_c)?;
                (
                    normalize_gradient(tape, raw_q, precond, &q.query.id)?,
                    normalize_gradient(tape, raw_c, precond, &corpus.id)?,
                )
            }
        };
        Ok(tape.sum(tape.mul(vq, vc)))
    }
}

/// `Δ_t` with differentiable query times; the horizon is the larger of the
/// unwarped query horizon and the corpus horizon.
pub fn delta_t_on_tape(tape: &Tape, q_times: Var, q_horizon: Var, corpus: &EventSequence) -> Var {
    let nq = tape.shape(q_times).0;
    let nc = corpus.len();
    let hmin = nq.min(nc);
    let horizon = if tape.scalar_value(q_horizon) >= corpus.horizon {
        q_horizon
    } else {
        tape.constant(Tensor::scalar(corpus.horizon))
    };
    let c_times = corpus.times();
    let mut parts = Vec::new();
    if hmin > 0 {
        let head = tape.slice_rows(q_times, 0, hmin);
        let target = tape.constant(Tensor::column(c_times[..hmin].to_vec()));
        parts.push(tape.sum(tape.abs(tape.sub(head, target))));
    }
    if nq > hmin {
        let tail = tape.sum(tape.slice_rows(q_times, hmin, nq - hmin));
        parts.push(tape.sub(tape.scale(horizon, (nq - hmin) as f64), tail));
    }
    if nc > hmin {
        let tail: f64 = c_times[hmin..].iter().sum();
        let count = (nc - hmin) as f64;
        parts.push(tape.add_scalar(tape.scale(horizon, count), -tail));
    }
    let mut total = tape.constant(Tensor::scalar(0.0));
    for p in parts {
        total = tape.add(total, p);
    }
    total
}

/// Raw (unpreconditioned, unnormalized) log-likelihood gradient.
pub fn raw_gradient(
    model: &RetrievalModel,
    seq: &EventSequence,
    conditioning: Option<&EventSequence>,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let params = &model.params;
    let input = SeqInput::observed(&tape, seq)?;
    let cond = conditioning
        .map(|c| SeqInput::observed(&tape, c))
        .transpose()?;
    let mut fwd = Forward::eval();
    match model.config.fisher {
        FisherMode::Head => {
            let cond_emb = match (model.kind(), &cond) {
                (EncoderKind::CrossAttn, Some(c)) => Some(model.mtpp.embed(&tape, params, c)?),
                (EncoderKind::CrossAttn, None) => return Err(Error::EmptyQuery),
                (EncoderKind::SelfAttn, _) => None,
            };
            let ctx = model
                .mtpp
                .contexts(&tape, params, &input, cond_emb, &mut fwd)?;
            let g = head_gradient(&tape, model, params, &input, ctx)?;
            Ok(tape.value(g).data)
        }
        FisherMode::Full => {
            let ll = model.mtpp.log_likelihood_on_tape(
                &tape,
                params,
                &input,
                cond.as_ref(),
                &mut fwd,
            )?;
            let flat = tape.backward(ll).flat(params);
            Ok(model.mtpp_offsets().into_iter().map(|i| flat[i]).collect())
        }
    }
}

/// Fisher vector of an observed sequence in evaluation mode. No unwarping is
/// applied; pass `U(H_q)` explicitly for query-side vectors.
pub fn fisher_vector(
    model: &RetrievalModel,
    seq: &EventSequence,
    conditioning: Option<&EventSequence>,
) -> Result<FisherVector> {
    let mut v = raw_gradient(model, seq, conditioning)?;
    if let Some(p) = &model.preconditioner {
        if p.len() != v.len() {
            return Err(Error::DimensionMismatch {
                expected: v.len(),
                got: p.len(),
            });
        }
        v.iter_mut().zip(p).for_each(|(x, s)| *x *= s);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFiniteValue("fisher gradient"));
    }
    if norm == 0.0 {
        return Err(Error::ZeroGradient(seq.id.clone()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(FisherVector {
        id: seq.id.clone(),
        conditioning: conditioning.map(|c| c.id.clone()),
        v,
    })
}

/// Diagonal preconditioner estimated from raw gradients of `seqs`; cross
/// models condition each sequence on itself.
pub fn estimate_preconditioner(model: &RetrievalModel, seqs: &[EventSequence]) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    probe.preconditioner = None;
    let grads = seqs
        .par_iter()
        .map(|s| {
            let cond = (model.kind() == EncoderKind::CrossAttn).then_some(s);
            raw_gradient(&probe, s, cond)
        })
        .collect::<Result<Vec<_>>>()?;
    preconditioner_from_gradients(&grads)
}

/// A query prepared for evaluation-mode scoring.
#[derive(Debug, Clone)]
pub struct EvalQuery {
    pub query: EventSequence,
    /// `U(H_q)` (the query itself when unwarping is off).
    pub unwarped: EventSequence,
    vector: Option<Vec<f64>>,
}

impl EvalQuery {
    /// Query-side Fisher vector (self-attention models only).
    pub fn vector(&self) -> Option<&[f64]> {
        self.vector.as_deref()
    }
}

/// Evaluation-mode scorer. Self-attention corpus vectors do not depend on the
/// query and can be cached once per corpus.
#[derive(Debug, Clone)]
pub struct Scorer<'a> {
    pub model: &'a RetrievalModel,
    pub flags: ScoreFlags,
    cache: HashMap<String, Vec<f64>>,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a RetrievalModel, flags: ScoreFlags) -> Self {
        Self {
            model,
            flags,
            cache: HashMap::new(),
        }
    }

    fn caches_vectors(&self) -> bool {
        self.flags.kappa && self.model.kind() == EncoderKind::SelfAttn
    }

    /// Precomputes self-attention corpus vectors; a no-op otherwise.
    pub fn cache_corpus(&mut self, corpus: &[EventSequence]) -> Result<()> {
        if !self.caches_vectors() {
            return Ok(());
        }
        let vectors = corpus
            .par_iter()
            .map(|c| fisher_vector(self.model, c, None))
            .collect::<Result<Vec<_>>>()?;
        self.cache.extend(vectors.into_iter().map(|v| (v.id, v.v)));
        Ok(())
    }

    pub fn insert_vector(&mut self, v: FisherVector) {
        self.cache.insert(v.id, v.v);
    }

    pub fn prepare(&self, query: &EventSequence) -> Result<EvalQuery> {
        if query.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let unwarped = if self.flags.unwarp && self.model.config.unwarp {
            self.model
                .umnn
                .unwarp_sequence(&self.model.params, query, 0.0)?
        } else {
            query.clone()
        };
        let vector = if self.caches_vectors() {
            Some(fisher_vector(self.model, &unwarped, None)?.v)
        } else {
            None
        };
        Ok(EvalQuery {
            query: query.clone(),
            unwarped,
            vector,
        })
    }

    pub fn score(&self, q: &EvalQuery, corpus: &EventSequence) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::EmptySequence(corpus.id.clone()));
        }
        if let Some(vq) = &q.vector {
            let vc = match self.cache.get(&corpus.id) {
                Some(v) => v.clone(),
                None => fisher_vector(self.model, corpus, None)?.v,
            };
            let mut s = dot(vq, &vc);
            let weight = self.model.config.gamma;
            if self.flags.delta_t {
                let horizon = q.unwarped.horizon.max(corpus.horizon);
                s -= weight * delta_t(&q.unwarped, corpus, horizon)?;
            }
            if self.flags.delta_x {
                s -= weight * delta_x(&q.query, corpus);
            }
            return Ok(s);
        }
        let tape = Tape::new();
        let mut fwd = Forward::eval();
        let fixed = ScoreFlags {
            unwarp: false,
            ..self.flags
        };
        let mut tq = self.model.prepare_query(
            &tape,
            &self.model.params,
            &q.unwarped,
            fixed,
            0.0,
            &mut fwd,
        )?;
        tq.query = q.query.clone();
        let s =
            self.model
                .score_on_tape(&tape, &self.model.params, &tq, corpus, fixed, &mut fwd)?;
        Ok(tape.scalar_value(s))
    }
}

/// Evaluation-mode relevance score of a single pair.
pub fn relevance_score(
    model: &RetrievalModel,
    query: &EventSequence,
    corpus: &EventSequence,
    flags: ScoreFlags,
) -> Result<f64> {
    let scorer = Scorer::new(model, flags);
    scorer.score(&scorer.prepare(query)?, corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_diff, gradient, max_rel_error};
    use crate::model::ModelConfig;
    use crate::mtpp::HEAD_SEGMENTS;
    use proptest::prelude::*;

    fn seq(id: &str, horizon: f64, times: &[f64], marks: &[usize]) -> EventSequence {
        EventSequence::from_parts(id, horizon, times, marks)
    }

    pub(crate) fn small_model(kind: EncoderKind, seed: u64) -> RetrievalModel {
        let mut c = ModelConfig::new(kind, 3);
        c.mtpp.dim = 6;
        c.mtpp.max_positions = 8;
        c.umnn.hidden = vec![8, 8];
        RetrievalModel::new(c, 4.0, seed).unwrap()
    }

    #[test]
    fn delta_t_examples() {
        let q = seq("q", 3.0, &[1.0, 2.0], &[0, 0]);
        assert_eq!(
            delta_t(&q, &seq("c", 3.0, &[1.0, 2.0], &[0, 0]), 3.0).unwrap(),
            0.0
        );
        let q1 = seq("q", 3.0, &[1.0], &[0]);
        let c = seq("c", 3.0, &[1.0, 2.5], &[0, 0]);
        assert_eq!(delta_t(&q1, &c, 3.0).unwrap(), 0.5);
        let c2 = seq("c", 3.0, &[1.5, 2.0], &[0, 0]);
        assert_eq!(delta_t(&q, &c2, 3.0).unwrap(), 0.5);
        assert!(matches!(
            delta_t(&q, &c, 2.0),
            Err(Error::HorizonTooSmall { .. })
        ));
    }

    #[test]
    fn delta_x_examples() {
        let a = seq("q", 3.0, &[1.0, 2.0], &[0, 1]);
        assert_eq!(delta_x(&a, &a), 0.0);
        assert_eq!(delta_x(&a, &seq("c", 3.0, &[1.0, 2.0], &[0, 2])), 1.0);
        let one = seq("q", 3.0, &[1.0], &[0]);
        assert_eq!(delta_x(&one, &seq("c", 3.0, &[1.0, 2.0], &[0, 1])), 1.0);
    }

    #[test]
    fn kernel_examples() {
        let a = FisherVector {
            id: "a".into(),
            conditioning: None,
            v: vec![0.6, 0.8],
        };
        let b = FisherVector {
            id: "b".into(),
            conditioning: None,
            v: vec![-0.8, 0.6],
        };
        assert!((fisher_kernel(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(fisher_kernel(&a, &b).unwrap(), 0.0);
        let c = FisherVector {
            id: "c".into(),
            conditioning: None,
            v: vec![1.0],
        };
        assert!(matches!(
            fisher_kernel(&a, &c),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fisher_json_shape() {
        let v = FisherVector {
            id: "c1".into(),
            conditioning: None,
            v: vec![0.5, -0.5],
        };
        assert_eq!(
            serde_json::to_string(&v).unwrap(),
            r#"{"id":"c1","v":[0.5,-0.5]}"#
        );
    }

    #[test]
    fn head_gradient_matches_tape_gradient() {
        let s = seq("c", 4.0, &[0.3, 0.9, 1.7, 3.2], &[2, 0, 1, 1]);
        let q = seq("q", 4.0, &[0.4, 2.0, 2.2], &[1, 0, 2]);
        for kind in [EncoderKind::SelfAttn, EncoderKind::CrossAttn] {
            for seed in 0..3 {
                let m = small_model(kind, seed);
                let explicit = {
                    let mut probe = m.clone();
                    probe.config.fisher = FisherMode::Head;
                    raw_gradient(&probe, &s, Some(&q)).unwrap()
                };
                let tape = Tape::new();
                let target = SeqInput::observed(&tape, &s).unwrap();
                let cond = SeqInput::observed(&tape, &q).unwrap();
                let ll = m
                    .mtpp
                    .log_likelihood_on_tape(
                        &tape,
                        &m.params,
                        &target,
                        Some(&cond),
                        &mut Forward::eval(),
                    )
                    .unwrap();
                let flat = tape.backward(ll).flat(&m.params);
                let span = m.params.span(&HEAD_SEGMENTS).unwrap();
                let err = max_rel_error(&explicit, &flat[span], 1e-12);
                assert!(err < 1e-10, "{kind}: {err}");
            }
        }
    }

    #[test]
    fn fisher_vectors_are_unit_norm() {
        let s = seq("c", 4.0, &[0.3, 0.9, 1.7], &[2, 0, 1]);
        for mode in [FisherMode::Head, FisherMode::Full] {
            let mut m = small_model(EncoderKind::SelfAttn, 1);
            m.config.fisher = mode;
            let v = fisher_vector(&m, &s, None).unwrap();
            let norm = v.v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
            assert_eq!(v, fisher_vector(&m, &s, None).unwrap());
        }
    }

    #[test]
    fn self_similarity_is_one_with_identity_unwarp() {
        let m = small_model(EncoderKind::SelfAttn, 2);
        let s = seq("a", 4.0, &[0.5, 1.0, 2.5], &[0, 1, 2]);
        let flags = ScoreFlags {
            unwarp: false,
            ..ScoreFlags::FULL
        };
        let score = relevance_score(&m, &s, &s, flags).unwrap();
        assert!((score - 1.0).abs() < 1e-9);
        let kappa_only = ScoreFlags {
            delta_t: false,
            delta_x: false,
            ..flags
        };
        assert!((relevance_score(&m, &s, &s, kappa_only).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gamma_zero_leaves_kappa() {
        let mut m = small_model(EncoderKind::CrossAttn, 3);
        let q = seq("q", 4.0, &[0.5, 1.0], &[0, 1]);
        let c = seq("c", 4.0, &[0.7, 2.0, 3.0], &[0, 2, 2]);
        let kappa = relevance_score(&m, &q, &c, Variant::II.flags()).unwrap();
        m.config.gamma = 0.0;
        let full = relevance_score(&m, &q, &c, ScoreFlags::FULL).unwrap();
        assert!((kappa - full).abs() < 1e-12);
    }

    #[test]
    fn preconditioner_identity_for_unit_gradients() {
        let p = preconditioner_from_gradients(&[vec![1.0, -1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(p, vec![1.0, 1.0]);
        let floored = preconditioner_from_gradients(&[vec![0.0]]).unwrap();
        assert!((floored[0] - 1e4).abs() < 1e-6);
    }

    #[test]
    fn cached_and_tape_scores_agree() {
        let m = small_model(EncoderKind::SelfAttn, 4);
        let q = seq("q", 4.0, &[0.5, 1.0, 1.2], &[0, 1, 1]);
        let c = seq("c", 3.0, &[0.7, 2.0], &[0, 2]);
        let mut scorer = Scorer::new(&m, ScoreFlags::FULL);
        scorer.cache_corpus(std::slice::from_ref(&c)).unwrap();
        let cached = scorer.score(&scorer.prepare(&q).unwrap(), &c).unwrap();

        let tape = Tape::new();
        let mut fwd = Forward::eval();
        let tq = m
            .prepare_query(&tape, &m.params, &q, ScoreFlags::FULL, 0.0, &mut fwd)
            .unwrap();
        let s = m
            .score_on_tape(&tape, &m.params, &tq, &c, ScoreFlags::FULL, &mut fwd)
            .unwrap();
        assert!((cached - tape.scalar_value(s)).abs() < 1e-9);
    }

    #[test]
    fn full_mode_scoring_rejected_in_training() {
        let mut m = small_model(EncoderKind::SelfAttn, 0);
        m.config.fisher = FisherMode::Full;
        let q = seq("q", 4.0, &[0.5], &[0]);
        let tape = Tape::new();
        use rand::SeedableRng;
        let mut fwd = Forward::train(rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let tq = m
            .prepare_query(&tape, &m.params, &q, ScoreFlags::FULL, 0.0, &mut fwd)
            .unwrap();
        assert!(m
            .score_on_tape(&tape, &m.params, &tq, &q, ScoreFlags::FULL, &mut fwd)
            .is_err());
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let q = seq("q", 4.0, &[0.4, 1.1, 2.6], &[1, 0, 2]);
        let c = seq("c", 3.5, &[0.2, 0.9, 1.5, 3.1], &[1, 1, 0, 2]);
        for kind in [EncoderKind::SelfAttn, EncoderKind::CrossAttn] {
            let m = small_model(kind, 5);
            let f = |t: &Tape, p: &ParamStore| {
                let mut fwd = Forward::eval();
                let tq = m.prepare_query(t, p, &q, ScoreFlags::FULL, 0.05, &mut fwd)?;
                m.score_on_tape(t, p, &tq, &c, ScoreFlags::FULL, &mut fwd)
            };
            let g = gradient(f, &m.params).unwrap();
            let fd = finite_diff(f, &m.params, 1e-5).unwrap();
            let err = max_rel_error(&g, &fd, 1e-6);
            assert!(err < 1e-4, "{kind}: {err}");
        }
    }

    #[test]
    fn tape_delta_t_matches_closed_form() {
        let tape = Tape::new();
        let q = seq("q", 3.0, &[0.5, 1.0, 2.9], &[0, 0, 0]);
        let c = seq("c", 2.0, &[0.7], &[0]);
        let times = tape.constant(Tensor::column(q.times()));
        let h = tape.constant(Tensor::scalar(3.0));
        let v = tape.scalar_value(delta_t_on_tape(&tape, times, h, &c));
        assert!((v - delta_t(&q, &c, 3.0).unwrap()).abs() < 1e-12);
    }

    fn arb_seq(id: &'static str) -> impl Strategy<Value = EventSequence> {
        prop::collection::vec((0.01f64..1.0, 0usize..3), 1..8).prop_map(move |v| {
            let mut t = 0.0;
            let mut times = Vec::new();
            let mut marks = Vec::new();
            for (g, m) in v {
                t += g;
                times.push(t);
                marks.push(m);
            }
            EventSequence::from_parts(id, t + 0.5, &times, &marks)
        })
    }

    proptest! {
        #[test]
        fn distances_nonnegative_and_zero_on_self(a in arb_seq("a"), b in arb_seq("b")) {
            let h = a.horizon.max(b.horizon);
            prop_assert!(delta_t(&a, &b, h).unwrap() >= 0.0);
            prop_assert!(delta_x(&a, &b) >= 0.0);
            prop_assert_eq!(delta_t(&a, &a, a.last_time()).unwrap(), 0.0);
            prop_assert_eq!(delta_x(&a, &a), 0.0);
        }

    }
}
