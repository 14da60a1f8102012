//! Intensity-free neural marked temporal point process models.
//!
//! Both encoders produce one context vector per "history so far" and share
//! the same output head: a log-normal density for the next inter-event gap
//! and a softmax over marks. The log-likelihood of a sequence is
//!
//! ```text
//! log p(H) = Σ_i [ log LogNormal(Δ_i; μ(h̄_{i-1}), σ(h̄_{i-1})) + log m(x_i | h̄_{i-1}) ]
//! ```
//!
//! where `h̄_0` is a learned start vector.
//!
//! * [`EncoderKind::SelfAttn`] runs causal self-attention over the sequence
//!   itself, so a corpus likelihood never depends on the query.
//! * [`EncoderKind::CrossAttn`] lets every event of the modeled sequence
//!   attend over all events of a conditioning sequence, then accumulates the
//!   per-event outputs into `h̄_r`. Causality in the modeled sequence follows
//!   from that running sum.
//!
//! Times enter the encoders divided by a global `time_scale`; gaps in the
//! log-normal density are measured in the same rescaled units.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::seq::{inter_event_times, EventSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[serde(rename = "self")]
    SelfAttn,
    #[serde(rename = "cross")]
    CrossAttn,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(EncoderKind::SelfAttn),
            "cross" => Ok(EncoderKind::CrossAttn),
            other => Err(Error::InvalidConfig(format!("unknown model kind {other}"))),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::SelfAttn => "self",
            EncoderKind::CrossAttn => "cross",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MtppConfig {
    /// Hidden dimension `D`.
    pub dim: usize,
    /// Number of stacked attention blocks.
    pub blocks: usize,
    /// Attention heads; only single-head attention is supported.
    pub heads: usize,
    /// Dropout applied to each attention block's output during training.
    pub dropout: f64,
    /// Learned position embeddings; later positions reuse the last one.
    pub max_positions: usize,
    pub num_marks: usize,
}

impl Default for MtppConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            blocks: 2,
            heads: 1,
            dropout: 0.2,
            max_positions: 64,
            num_marks: 5,
        }
    }
}

/// Segments forming the output head, in layout order. Fisher vectors are
/// gradients over exactly this span.
pub const HEAD_SEGMENTS: [&str; 4] = [
    "mtpp.head.time.w",
    "mtpp.head.time.b",
    "mtpp.head.mark.w",
    "mtpp.head.mark.b",
];

/// Per-forward-pass state: dropout randomness in training, none at eval.
#[derive(Debug)]
pub struct Forward {
    rng: Option<ChaCha8Rng>,
}

impl Forward {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_mut()
    }

    fn dropout(&mut self, tape: &Tape, x: Var, rate: f64) -> Var {
        match &mut self.rng {
            Some(rng) if rate > 0.0 => {
                let (r, c) = tape.shape(x);
                let keep = 1.0 / (1.0 - rate);
                let mask = (0..r * c)
                    .map(|_| {
                        if rng.random::<f64>() < rate {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect();
                tape.mul_const(x, Tensor::new(r, c, mask))
            }
            _ => x,
        }
    }
}

/// A sequence prepared for encoding: times and gaps as tape nodes (so
/// unwarped times stay differentiable) plus its marks.
#[derive(Debug, Clone)]
pub struct SeqInput {
    /// Event times, `n x 1`, raw units.
    pub times: Var,
    /// Inter-event gaps, `n x 1`, raw units, strictly positive.
    pub gaps: Var,
    pub marks: Vec<usize>,
}

impl SeqInput {
    /// Wraps an observed sequence as constants.
    pub fn observed(tape: &Tape, seq: &EventSequence) -> Result<Self> {
        if seq.is_empty() {
            return Err(Error::EmptySequence(seq.id.clone()));
        }
        let gaps = inter_event_times(seq);
        if let Some(&g) = gaps.iter().find(|&&g| !(g > 0.0)) {
            return Err(Error::NonPositiveGap(g));
        }
        Ok(Self {
            times: tape.constant(Tensor::column(seq.times())),
            gaps: tape.constant(Tensor::column(gaps)),
            marks: seq.marks(),
        })
    }

    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }
}

/// Head outputs for every event of a modeled sequence.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `n x 1`.
    pub mu: Var,
    /// `n x 1`; `σ = exp(log_sigma)`.
    pub log_sigma: Var,
    /// `n x |X|`.
    pub mark_log_probs: Var,
}

#[derive(Debug, Clone)]
pub struct Mtpp {
    pub kind: EncoderKind,
    pub config: MtppConfig,
    pub time_scale: f64,
}

impl Mtpp {
    pub fn new(kind: EncoderKind, config: MtppConfig, time_scale: f64) -> Result<Self> {
        if config.heads != 1 {
            return Err(Error::InvalidConfig(format!(
                "only single-head attention is supported, got {} heads",
                config.heads
            )));
        }
        if config.dim == 0 || config.blocks == 0 || config.max_positions == 0 {
            return Err(Error::InvalidConfig(
                "dim, blocks and max_positions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        if config.num_marks == 0 {
            return Err(Error::InvalidConfig("mark vocabulary is empty".into()));
        }
        if !(time_scale > 0.0) {
            return Err(Error::InvalidConfig("time scale must be positive".into()));
        }
        Ok(Self {
            kind,
            config,
            time_scale,
        })
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.config.dim;
        let x = self.config.num_marks;
        store.add("mtpp.embed.mark", x, d, &nn::glorot(rng, x, d));
        store.add("mtpp.embed.time", 1, d, &nn::glorot(rng, 1, d));
        store.add("mtpp.embed.gap", 1, d, &nn::glorot(rng, 1, d));
        store.add("mtpp.embed.bias", 1, d, &vec![0.0; d]);
        let p = self.config.max_positions;
        store.add("mtpp.embed.pos", p, d, &nn::uniform(rng, p * d, 0.1));
        for b in 0..self.config.blocks {
            for m in ["query", "key", "value"] {
                store.add(&format!("mtpp.attn{b}.{m}"), d, d, &nn::glorot(rng, d, d));
            }
        }
        let signs: Vec<f64> = (0..d)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        store.add("mtpp.out.wf", 1, d, &signs);
        store.add("mtpp.out.bo", 1, d, &vec![0.1; d]);
        store.add(
            "mtpp.out.wh",
            1,
            d,
            &nn::uniform(rng, d, (3.0 / d as f64).sqrt()),
        );
        store.add("mtpp.out.bh", 1, d, &vec![0.0; d]);
        store.add("mtpp.start", 1, d, &nn::uniform(rng, d, 0.1));
        store.add(HEAD_SEGMENTS[0], 2, d, &nn::glorot(rng, d, 2));
        store.add(HEAD_SEGMENTS[1], 1, 2, &[0.0, 0.0]);
        store.add(HEAD_SEGMENTS[2], x, d, &nn::glorot(rng, d, x));
        store.add(HEAD_SEGMENTS[3], 1, x, &vec![0.0; x]);
    }

    /// Input-layer embeddings `y_i` plus position embeddings, `n x D`.
    pub fn embed(&self, tape: &Tape, params: &ParamStore, input: &SeqInput) -> Result<Var> {
        let n = input.len();
        for &m in &input.marks {
            if m >= self.config.num_marks {
                return Err(Error::UnknownMark {
                    mark: m,
                    num_marks: self.config.num_marks,
                });
            }
        }
        let inv = 1.0 / self.time_scale;
        let mark_emb = tape.param(params, "mtpp.embed.mark")?;
        let w_t = tape.param(params, "mtpp.embed.time")?;
        let w_gap = tape.param(params, "mtpp.embed.gap")?;
        let bias = tape.param(params, "mtpp.embed.bias")?;
        let pos = tape.param(params, "mtpp.embed.pos")?;

        let y = tape.select_rows(mark_emb, &input.marks);
        let y = tape.add(y, tape.matmul(tape.scale(input.times, inv), w_t));
        let y = tape.add(y, tape.matmul(tape.scale(input.gaps, inv), w_gap));
        let y = tape.add_row(y, bias);
        let last = self.config.max_positions - 1;
        let rows: Vec<usize> = (0..n).map(|i| i.min(last)).collect();
        Ok(tape.add(y, tape.select_rows(pos, &rows)))
    }

    /// One attention block: rows of `targets` attend over rows of `sources`.
    fn attend(
        &self,
        tape: &Tape,
        params: &ParamStore,
        block: usize,
        targets: Var,
        sources: Var,
        causal: bool,
    ) -> Result<Var> {
        let wq = tape.param(params, &format!("mtpp.attn{block}.query"))?;
        let wk = tape.param(params, &format!("mtpp.attn{block}.key"))?;
        let wv = tape.param(params, &format!("mtpp.attn{block}.value"))?;
        let s = tape.matmul(targets, wq);
        let k = tape.matmul(sources, wk);
        let v = tape.matmul(sources, wv);
        let scores = tape.scale(tape.matmul_bt(s, k), 1.0 / (self.config.dim as f64).sqrt());
        let attn = tape.softmax_rows(scores, causal);
        Ok(tape.matmul(attn, v))
    }

    /// Per-event feed-forward `w_h̄ ⊙ ReLU(h ⊙ w_f + b_o) + b_h̄`.
    fn feed_forward(&self, tape: &Tape, params: &ParamStore, h: Var) -> Result<Var> {
        let wf = tape.param(params, "mtpp.out.wf")?;
        let bo = tape.param(params, "mtpp.out.bo")?;
        let wh = tape.param(params, "mtpp.out.wh")?;
        let bh = tape.param(params, "mtpp.out.bh")?;
        let inner = tape.relu(tape.add_row(tape.mul_row(h, wf), bo));
        Ok(tape.add_row(tape.mul_row(inner, wh), bh))
    }

    /// Causal self-attention contexts `h̄_1..h̄_n` (`n x D`); row `r`
    /// depends on events `1..=r` only.
    pub fn self_encode(
        &self,
        tape: &Tape,
        params: &ParamStore,
        input: &SeqInput,
        fwd: &mut Forward,
    ) -> Result<Var> {
        if input.is_empty() {
            return Err(Error::EmptySequence(String::new()));
        }
        let mut x = self.embed(tape, params, input)?;
        for b in 0..self.config.blocks {
            x = self.attend(tape, params, b, x, x, true)?;
            x = fwd.dropout(tape, x, self.config.dropout);
        }
        self.feed_forward(tape, params, x)
    }

    /// Query-conditioned contexts `h̄_1..h̄_n` for the modeled sequence
    /// `target` (`n x D`): every target event attends over all events of
    /// `conditioning`, and row `r` sums the per-event outputs of `1..=r`.
    pub fn cross_encode(
        &self,
        tape: &Tape,
        params: &ParamStore,
        target: &SeqInput,
        conditioning: &SeqInput,
        fwd: &mut Forward,
    ) -> Result<Var> {
        if conditioning.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let cond = self.embed(tape, params, conditioning)?;
        self.cross_encode_embedded(tape, params, target, cond, fwd)
    }

    /// [`Mtpp::cross_encode`] with the conditioning embeddings precomputed,
    /// so one query can be shared across many corpus sequences on a tape.
    pub fn cross_encode_embedded(
        &self,
        tape: &Tape,
        params: &ParamStore,
        target: &SeqInput,
        conditioning: Var,
        fwd: &mut Forward,
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::EmptySequence(String::new()));
        }
        let target = self.embed(tape, params, target)?;
        self.cross_attend(tape, params, target, conditioning, fwd)
    }

    /// Cross-attention contexts from precomputed embeddings of both sides.
    pub fn cross_attend(
        &self,
        tape: &Tape,
        params: &ParamStore,
        target: Var,
        conditioning: Var,
        fwd: &mut Forward,
    ) -> Result<Var> {
        let mut x = target;
        for b in 0..self.config.blocks {
            x = self.attend(tape, params, b, x, conditioning, false)?;
            x = fwd.dropout(tape, x, self.config.dropout);
        }
        let per_event = self.feed_forward(tape, params, x)?;
        Ok(tape.cumsum_rows(per_event))
    }

    /// Contexts used to predict each event: `[h̄_0; h̄_1; ...; h̄_{n-1}]`.
    pub fn shift_contexts(&self, tape: &Tape, params: &ParamStore, hbar: Var) -> Result<Var> {
        let start = tape.param(params, "mtpp.start")?;
        let n = tape.shape(hbar).0;
        if n == 1 {
            return Ok(start);
        }
        let prefix = tape.slice_rows(hbar, 0, n - 1);
        Ok(tape.concat_rows(&[start, prefix]))
    }

    /// Encoder contexts for every event of `target`, dispatching on the
    /// model kind. `conditioning` is required by the cross model and ignored
    /// by the self model.
    pub fn contexts(
        &self,
        tape: &Tape,
        params: &ParamStore,
        target: &SeqInput,
        conditioning: Option<Var>,
        fwd: &mut Forward,
    ) -> Result<Var> {
        let hbar = match self.kind {
            EncoderKind::SelfAttn => self.self_encode(tape, params, target, fwd)?,
            EncoderKind::CrossAttn => {
                let cond = conditioning.ok_or(Error::EmptyQuery)?;
                self.cross_encode_embedded(tape, params, target, cond, fwd)?
            }
        };
        self.shift_contexts(tape, params, hbar)
    }

    /// Output head applied to an `n x D` context matrix.
    pub fn head(&self, tape: &Tape, params: &ParamStore, contexts: Var) -> Result<HeadOutput> {
        let wt = tape.param(params, HEAD_SEGMENTS[0])?;
        let bt = tape.param(params, HEAD_SEGMENTS[1])?;
        let wm = tape.param(params, HEAD_SEGMENTS[2])?;
        let bm = tape.param(params, HEAD_SEGMENTS[3])?;
        let n = tape.shape(contexts).0;
        let time = tape.add_row(tape.matmul_bt(contexts, wt), bt);
        let mu = tape.pick_cols(time, &vec![0; n]);
        let log_sigma = tape.pick_cols(time, &vec![1; n]);
        let logits = tape.add_row(tape.matmul_bt(contexts, wm), bm);
        Ok(HeadOutput {
            mu,
            log_sigma,
            mark_log_probs: tape.log_softmax_rows(logits),
        })
    }

    /// Log-gaps in rescaled units, `n x 1`.
    pub fn log_gaps(&self, tape: &Tape, input: &SeqInput) -> Var {
        tape.log(tape.scale(input.gaps, 1.0 / self.time_scale))
    }

    /// Per-event log-likelihood terms (`n x 1`) given the head outputs.
    pub fn event_log_likelihoods(&self, tape: &Tape, input: &SeqInput, head: &HeadOutput) -> Var {
        let time_ll =
            tape.lognormal_log_density(self.log_gaps(tape, input), head.mu, head.log_sigma);
        let mark_ll = tape.pick_cols(head.mark_log_probs, &input.marks);
        tape.add(time_ll, mark_ll)
    }

    /// Total log-likelihood of `target` as a `1 x 1` node.
    pub fn log_likelihood_on_tape(
        &self,
        tape: &Tape,
        params: &ParamStore,
        target: &SeqInput,
        conditioning: Option<&SeqInput>,
        fwd: &mut Forward,
    ) -> Result<Var> {
        let cond = match (self.kind, conditioning) {
            (EncoderKind::CrossAttn, Some(c)) => {
                if c.is_empty() {
                    return Err(Error::EmptyQuery);
                }
                Some(self.embed(tape, params, c)?)
            }
            (EncoderKind::CrossAttn, None) => return Err(Error::EmptyQuery),
            (EncoderKind::SelfAttn, _) => None,
        };
        let ctx = self.contexts(tape, params, target, cond, fwd)?;
        let head = self.head(tape, params, ctx)?;
        Ok(tape.sum(self.event_log_likelihoods(tape, target, &head)))
    }

    /// Evaluation-mode log-likelihood of an observed sequence.
    pub fn log_likelihood(
        &self,
        params: &ParamStore,
        seq: &EventSequence,
        conditioning: Option<&EventSequence>,
    ) -> Result<f64> {
        let tape = Tape::new();
        let target = SeqInput::observed(&tape, seq)?;
        let cond = conditioning
            .map(|c| {
                if c.is_empty() {
                    Err(Error::EmptyQuery)
                } else {
                    SeqInput::observed(&tape, c)
                }
            })
            .transpose()?;
        let ll = self.log_likelihood_on_tape(
            &tape,
            params,
            &target,
            cond.as_ref(),
            &mut Forward::eval(),
        )?;
        Ok(tape.scalar_value(ll))
    }
}

/// Log-probability of `mark` under the softmax head for a single context.
pub fn mark_log_prob(params: &ParamStore, hbar: &[f64], mark: usize) -> Result<f64> {
    let wm = params.tensor(HEAD_SEGMENTS[2])?;
    let bm = params.slice(HEAD_SEGMENTS[3])?;
    if hbar.len() != wm.cols {
        return Err(Error::DimensionMismatch {
            expected: wm.cols,
            got: hbar.len(),
        });
    }
    if mark >= wm.rows {
        return Err(Error::UnknownMark {
            mark,
            num_marks: wm.rows,
        });
    }
    let logits: Vec<f64> = (0..wm.rows)
        .map(|m| {
            wm.row_slice(m)
                .iter()
                .zip(hbar)
                .map(|(w, h)| w * h)
                .sum::<f64>()
                + bm[m]
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(logits[mark] - lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_diff, gradient, lognormal_log_density, max_rel_error};
    use rand::SeedableRng;

    pub(crate) fn tiny(kind: EncoderKind, seed: u64) -> (Mtpp, ParamStore) {
        let cfg = MtppConfig {
            dim: 4,
            blocks: 2,
            heads: 1,
            dropout: 0.2,
            max_positions: 8,
            num_marks: 3,
        };
        let m = Mtpp::new(kind, cfg, 4.0).unwrap();
        let mut p = ParamStore::new();
        m.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        (m, p)
    }

    fn seq(id: &str, times: &[f64], marks: &[usize]) -> EventSequence {
        EventSequence::from_parts(id, 4.0, times, marks)
    }

    #[test]
    fn uniform_marks_with_zero_head() {
        let (_, mut p) = tiny(EncoderKind::SelfAttn, 0);
        p.slice_mut(HEAD_SEGMENTS[2]).unwrap().fill(0.0);
        for m in 0..3 {
            let lp = mark_log_prob(&p, &[0.3, -1.0, 2.0, 0.5], m).unwrap();
            assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_mark_softmax_by_hand() {
        let mut p = ParamStore::new();
        p.add(HEAD_SEGMENTS[2], 2, 1, &[1.0, 0.0]);
        p.add(HEAD_SEGMENTS[3], 1, 2, &[0.0, 0.0]);
        let h = [2f64.ln()];
        let p0 = mark_log_prob(&p, &h, 0).unwrap().exp();
        let p1 = mark_log_prob(&p, &h, 1).unwrap().exp();
        assert!((p0 - 2.0 / 3.0).abs() < 1e-12);
        assert!((p1 - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            mark_log_prob(&p, &h, 2),
            Err(Error::UnknownMark { mark: 2, .. })
        ));
    }

    #[test]
    fn mark_probabilities_normalize() {
        for seed in 0..10 {
            let (_, p) = tiny(EncoderKind::SelfAttn, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let total: f64 = (0..3)
                .map(|m| mark_log_prob(&p, &h, m).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lognormal_mode_in_mu() {
        // For a fixed gap the density is maximized over μ at ln(gap).
        let gap = 2.5f64;
        let best = lognormal_log_density(gap, gap.ln(), 0.7).unwrap();
        for dm in [-0.3, -0.01, 0.01, 0.3] {
            assert!(lognormal_log_density(gap, gap.ln() + dm, 0.7).unwrap() < best);
        }
    }

    #[test]
    fn single_event_likelihood_uses_start_context() {
        let (m, p) = tiny(EncoderKind::SelfAttn, 4);
        let s = seq("a", &[0.8], &[2]);
        let ll = m.log_likelihood(&p, &s, None).unwrap();

        let start = p.slice("mtpp.start").unwrap();
        let wt = p.tensor(HEAD_SEGMENTS[0]).unwrap();
        let bt = p.slice(HEAD_SEGMENTS[1]).unwrap();
        let dot = |r: usize| {
            wt.row_slice(r)
                .iter()
                .zip(start)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mu = dot(0) + bt[0];
        let sigma = (dot(1) + bt[1]).exp();
        let expected = lognormal_log_density(0.8 / 4.0, mu, sigma).unwrap()
            + mark_log_prob(&p, start, 2).unwrap();
        assert!((ll - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_model_requires_conditioning() {
        let (m, p) = tiny(EncoderKind::CrossAttn, 0);
        let s = seq("a", &[0.5], &[0]);
        assert!(matches!(
            m.log_likelihood(&p, &s, None),
            Err(Error::EmptyQuery)
        ));
        let empty = seq("q", &[], &[]);
        assert!(matches!(
            m.log_likelihood(&p, &s, Some(&empty)),
            Err(Error::EmptyQuery)
        ));
    }

    #[test]
    fn self_encoder_is_causal() {
        let (m, p) = tiny(EncoderKind::SelfAttn, 1);
        let a = seq("a", &[0.5, 1.0, 1.5, 3.0], &[0, 1, 2, 1]);
        let b = seq("b", &[0.5, 1.0, 2.5, 2.7], &[0, 1, 0, 0]);
        let ctx = |s: &EventSequence| {
            let tape = Tape::new();
            let input = SeqInput::observed(&tape, s).unwrap();
            let h = m
                .self_encode(&tape, &p, &input, &mut Forward::eval())
                .unwrap();
            tape.value(h)
        };
        let (ha, hb) = (ctx(&a), ctx(&b));
        assert_eq!(ha.row_slice(0), hb.row_slice(0));
        assert_eq!(ha.row_slice(1), hb.row_slice(1));
        assert_ne!(ha.row_slice(2), hb.row_slice(2));
    }

    #[test]
    fn single_query_event_gives_its_value_vector() {
        let (m, p) = tiny(EncoderKind::CrossAttn, 2);
        let tape = Tape::new();
        let q = SeqInput::observed(&tape, &seq("q", &[0.7], &[1])).unwrap();
        let c = SeqInput::observed(&tape, &seq("c", &[0.2, 0.9, 1.4], &[0, 2, 1])).unwrap();
        let yq = m.embed(&tape, &p, &q).unwrap();
        let yc = m.embed(&tape, &p, &c).unwrap();
        let h = tape.value(m.attend(&tape, &p, 0, yc, yq, false).unwrap());
        let wv = tape.param(&p, "mtpp.attn0.value").unwrap();
        let v = tape.value(tape.matmul(yq, wv));
        for r in 0..3 {
            for (a, b) in h.row_slice(r).iter().zip(v.row_slice(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_scores_average_values() {
        let (m, mut p) = tiny(EncoderKind::CrossAttn, 3);
        p.slice_mut("mtpp.attn0.query").unwrap().fill(0.0);
        let tape = Tape::new();
        let q = SeqInput::observed(&tape, &seq("q", &[0.3, 1.1, 2.0], &[0, 1, 2])).unwrap();
        let c = SeqInput::observed(&tape, &seq("c", &[0.5, 1.5], &[1, 1])).unwrap();
        let yq = m.embed(&tape, &p, &q).unwrap();
        let yc = m.embed(&tape, &p, &c).unwrap();
        let h = tape.value(m.attend(&tape, &p, 0, yc, yq, false).unwrap());
        let wv = tape.param(&p, "mtpp.attn0.value").unwrap();
        let v = tape.value(tape.matmul(yq, wv));
        for j in 0..4 {
            let mean = (0..3).map(|i| v.get(i, j)).sum::<f64>() / 3.0;
            assert!((h.get(0, j) - mean).abs() < 1e-12);
            assert!((h.get(1, j) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_contexts_accumulate() {
        // h̄_1 is a single feed-forward term; h̄_2 - h̄_1 is the second term.
        let (m, p) = tiny(EncoderKind::CrossAttn, 5);
        let tape = Tape::new();
        let q = SeqInput::observed(&tape, &seq("q", &[0.3, 1.1], &[0, 1])).unwrap();
        let c1 = SeqInput::observed(&tape, &seq("c", &[0.5], &[2])).unwrap();
        let c2 = SeqInput::observed(&tape, &seq("c", &[0.5, 0.9], &[2, 0])).unwrap();
        let one = tape.value(
            m.cross_encode(&tape, &p, &c1, &q, &mut Forward::eval())
                .unwrap(),
        );
        let two = tape.value(
            m.cross_encode(&tape, &p, &c2, &q, &mut Forward::eval())
                .unwrap(),
        );
        assert_eq!(one.rows, 1);
        assert_eq!(one.row_slice(0), two.row_slice(0));
    }

    #[test]
    fn likelihood_is_sum_of_event_terms() {
        let (m, p) = tiny(EncoderKind::SelfAttn, 6);
        let s = seq("a", &[0.4, 1.2, 2.2], &[1, 0, 2]);
        let tape = Tape::new();
        let input = SeqInput::observed(&tape, &s).unwrap();
        let mut fwd = Forward::eval();
        let ctx = m.contexts(&tape, &p, &input, None, &mut fwd).unwrap();
        let head = m.head(&tape, &p, ctx).unwrap();
        let terms = tape.value(m.event_log_likelihoods(&tape, &input, &head));
        let total = m.log_likelihood(&p, &s, None).unwrap();
        assert!((terms.data.iter().sum::<f64>() - total).abs() < 1e-12);
    }

    #[test]
    fn dropout_only_in_training() {
        let (m, p) = tiny(EncoderKind::SelfAttn, 7);
        let s = seq("a", &[0.4, 1.2, 2.2], &[1, 0, 2]);
        let eval = |fwd: &mut Forward| {
            let tape = Tape::new();
            let input = SeqInput::observed(&tape, &s).unwrap();
            let v = m
                .log_likelihood_on_tape(&tape, &p, &input, None, fwd)
                .unwrap();
            tape.scalar_value(v)
        };
        let a = eval(&mut Forward::eval());
        let b = eval(&mut Forward::eval());
        assert_eq!(a.to_bits(), b.to_bits());
        let t1 = eval(&mut Forward::train(ChaCha8Rng::seed_from_u64(1)));
        let t2 = eval(&mut Forward::train(ChaCha8Rng::seed_from_u64(1)));
        assert_eq!(t1.to_bits(), t2.to_bits());
        assert_ne!(a, t1);
    }

    #[test]
    fn likelihood_gradients_match_finite_differences() {
        let s = seq("c", &[0.3, 0.8, 1.9, 2.4], &[0, 2, 1, 1]);
        let q = seq("q", &[0.5, 1.5, 3.1], &[1, 1, 0]);
        for kind in [EncoderKind::SelfAttn, EncoderKind::CrossAttn] {
            for seed in 0..3 {
                let (m, p) = tiny(kind, seed);
                let f = |t: &Tape, p: &ParamStore| {
                    let target = SeqInput::observed(t, &s)?;
                    let cond = SeqInput::observed(t, &q)?;
                    m.log_likelihood_on_tape(t, p, &target, Some(&cond), &mut Forward::eval())
                };
                let g = gradient(f, &p).unwrap();
                let fd = finite_diff(f, &p, 1e-5).unwrap();
                let err = max_rel_error(&g, &fd, 1e-5);
                assert!(err < 1e-4, "{kind} seed {seed}: {err}");
            }
        }
    }
}
