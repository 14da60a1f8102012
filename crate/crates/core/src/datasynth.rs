//! Synthetic marked event sequences and labeled retrieval benchmarks.
//!
//! Each generator (a homogeneous Poisson or exponential-kernel Hawkes
//! process with its own mark distribution) emits one long sequence. Disjoint
//! contiguous windows are cut from it and re-based to start at zero; one
//! window becomes the generator's query and the others are its relevant
//! corpus sequences. Windows of other generators are non-relevant.

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq::{Dataset, Event, EventSequence, Relevance, RelevanceLabel, Splits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dynamics {
    HomogeneousPoisson,
    /// `λ(t) = μ + Σ_{t_i < t} α e^{-β (t - t_i)}`.
    Hawkes {
        alpha: f64,
        beta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub dynamics: Dynamics,
    /// Base rate `μ`.
    pub rate: f64,
    /// Mark probabilities (normalized on use).
    pub marks: Vec<f64>,
    pub horizon: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0) || !(self.horizon > 0.0) {
            return Err(Error::InvalidConfig(
                "generator rate and horizon must be positive".into(),
            ));
        }
        if let Dynamics::Hawkes { alpha, beta } = self.dynamics {
            if !(alpha >= 0.0 && beta > 0.0 && alpha / beta < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "hawkes process with alpha {alpha}, beta {beta} is not stationary"
                )));
            }
        }
        if self.marks.is_empty()
            || self.marks.iter().any(|&p| !(p >= 0.0))
            || self.marks.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidConfig("invalid mark distribution".into()));
        }
        Ok(())
    }
}

/// Simulates a sequence on `[0, horizon)` by Ogata thinning.
pub fn simulate(spec: &GeneratorSpec) -> Result<EventSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let marks = WeightedIndex::new(&spec.marks).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut events = Vec::new();
    let mut t = 0.0;
    // Excitation Σ α e^{-β (t - t_i)} evaluated at the current time.
    let mut excitation = 0.0;
    loop {
        let (alpha, beta) = match spec.dynamics {
            Dynamics::HomogeneousPoisson => (0.0, 1.0),
            Dynamics::Hawkes { alpha, beta } => (alpha, beta),
        };
        let bound = spec.rate + excitation;
        let wait = Exp::new(bound).expect("positive bound").sample(&mut rng);
        let next = t + wait;
        if next >= spec.horizon {
            break;
        }
        excitation *= (-beta * wait).exp();
        t = next;
        let intensity = spec.rate + excitation;
        if rng.random::<f64>() * bound <= intensity {
            events.push(Event::new(t, marks.sample(&mut rng)));
            excitation += alpha;
        }
    }
    Ok(EventSequence::new(
        format!("g{}", spec.seed),
        spec.horizon,
        events,
    ))
}

/// Compensator increments `Λ(t_i) - Λ(t_{i-1})`; Exp(1) distributed when
/// `seq` follows `spec`.
pub fn rescaled_gaps(spec: &GeneratorSpec, seq: &EventSequence) -> Vec<f64> {
    let (alpha, beta) = match spec.dynamics {
        Dynamics::HomogeneousPoisson => (0.0, 1.0),
        Dynamics::Hawkes { alpha, beta } => (alpha, beta),
    };
    let mut out = Vec::with_capacity(seq.len());
    let mut prev = 0.0;
    let mut excitation = 0.0;
    for e in &seq.events {
        let dt = e.time - prev;
        let decay = (-beta * dt).exp();
        out.push(spec.rate * dt + excitation * (1.0 - decay) / beta);
        excitation = excitation * decay + alpha;
        prev = e.time;
    }
    out
}

/// Kolmogorov–Smirnov statistic of `samples` against Exp(1).
pub fn ks_statistic_exp1(samples: &[f64]) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (-x).exp();
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at significance 0.01.
pub fn ks_critical_001(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub generators: usize,
    /// Inclusive range of windows per generator (query included).
    pub windows: [usize; 2],
    /// Inclusive range of events per window.
    pub window_len: [usize; 2],
    pub num_marks: usize,
    /// Inclusive range of generator base rates (events per unit time).
    pub rate: [f64; 2],
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            generators: 20,
            windows: [10, 20],
            window_len: [15, 40],
            num_marks: 5,
            rate: [4.0, 16.0],
            seed: 0,
        }
    }
}

/// Random generator for benchmark slot `g`: even slots are Poisson, odd
/// slots Hawkes; rates, excitation and mark weights are drawn from `rng`.
fn draw_generator<R: Rng>(rng: &mut R, g: usize, cfg: &BenchmarkConfig) -> GeneratorSpec {
    let rate = rng.random_range(cfg.rate[0]..=cfg.rate[1]);
    let dynamics = if g % 2 == 0 {
        Dynamics::HomogeneousPoisson
    } else {
        let beta = rng.random_range(5.0..20.0);
        let branching = rng.random_range(0.3..0.8);
        Dynamics::Hawkes {
            alpha: branching * beta,
            beta,
        }
    };
    let gamma = Gamma::new(0.5, 1.0).expect("valid gamma");
    let marks = (0..cfg.num_marks)
        .map(|_| gamma.sample(rng) + 1e-3)
        .collect();
    GeneratorSpec {
        dynamics,
        rate,
        marks,
        horizon: 1.0,
        seed: rng.random(),
    }
}

fn stationary_rate(spec: &GeneratorSpec) -> f64 {
    match spec.dynamics {
        Dynamics::HomogeneousPoisson => spec.rate,
        Dynamics::Hawkes { alpha, beta } => spec.rate / (1.0 - alpha / beta),
    }
}

/// Window `[start, start + len)` of `long`, shifted so the event before it
/// sits at zero; the horizon is the next event's shifted time.
fn cut_window(long: &EventSequence, start: usize, len: usize, id: String) -> EventSequence {
    let base = if start == 0 {
        0.0
    } else {
        long.events[start - 1].time
    };
    let events = long.events[start..start + len]
        .iter()
        .map(|e| Event::new(e.time - base, e.mark))
        .collect();
    let horizon = long.events[start + len].time - base;
    EventSequence::new(id, horizon, events)
}

/// Builds a labeled benchmark: `C_q+` is the query's generator's other
/// windows, everything else is non-relevant. Queries are split 50/10/40.
pub fn make_benchmark(cfg: &BenchmarkConfig) -> Result<Dataset> {
    let [a, b] = cfg.windows;
    if a < 2 || a > b {
        return Err(Error::DegenerateRange(a, b));
    }
    let [la, lb] = cfg.window_len;
    if la < 1 || la > lb {
        return Err(Error::DegenerateRange(la, lb));
    }
    if cfg.generators == 0 || cfg.num_marks == 0 {
        return Err(Error::InvalidConfig(
            "benchmark needs generators and marks".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut queries = Vec::new();
    let mut windows: Vec<(usize, EventSequence)> = Vec::new();
    for g in 0..cfg.generators {
        let m = rng.random_range(a..=b);
        let mut spec = draw_generator(&mut rng, g, cfg);
        let block = lb + 1;
        let needed = m * block + 1;
        let mut long;
        let mut horizon = 1.5 * needed as f64 / stationary_rate(&spec);
        loop {
            spec.horizon = horizon;
            long = simulate(&spec)?;
            if long.len() >= needed {
                break;
            }
            horizon *= 1.5;
        }
        let query_slot = rng.random_range(0..m);
        for w in 0..m {
            let len = rng.random_range(la..=lb);
            let offset = rng.random_range(0..=block - 1 - len);
            let seq = cut_window(&long, w * block + offset, len, String::new());
            if w == query_slot {
                queries.push(EventSequence::new(
                    format!("q{g:03}"),
                    seq.horizon,
                    seq.events,
                ));
            } else {
                windows.push((g, seq));
            }
        }
    }
    // Corpus ids are a random permutation so they carry no generator order.
    let mut ids: Vec<usize> = (0..windows.len()).collect();
    ids.shuffle(&mut rng);
    let corpus: Vec<EventSequence> = windows
        .iter()
        .zip(&ids)
        .map(|((_, s), &k)| EventSequence::new(format!("c{k:05}"), s.horizon, s.events.clone()))
        .collect();
    let mut labels = Vec::with_capacity(queries.len() * corpus.len());
    for (g, q) in queries.iter().enumerate() {
        for ((wg, _), c) in windows.iter().zip(&corpus) {
            labels.push(RelevanceLabel {
                query_id: q.id.clone(),
                corpus_id: c.id.clone(),
                label: if *wg == g {
                    Relevance::Relevant
                } else {
                    Relevance::NonRelevant
                },
            });
        }
    }
    let mut order: Vec<String> = queries.iter().map(|q| q.id.clone()).collect();
    order.shuffle(&mut rng);
    let n = order.len();
    let n_train = (n as f64 * 0.5).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let test = order.split_off((n_train + n_val).min(n));
    let val = order.split_off(n_train.min(order.len()));
    let splits = Splits {
        train: order,
        val,
        test,
    };
    Dataset::new(queries, corpus, labels, splits, cfg.num_marks)
}

/// Maps every query time through `t -> scale * t + shift`; labels are
/// unchanged.
pub fn warp_queries(dataset: &Dataset, scale: f64, shift: f64) -> Result<Dataset> {
    if !(scale > 0.0) {
        return Err(Error::InvalidConfig("warp scale must be positive".into()));
    }
    dataset.map_queries(|q| {
        let events = q
            .events
            .iter()
            .map(|e| Event::new(scale * e.time + shift, e.mark))
            .collect();
        EventSequence::new(q.id.clone(), scale * q.horizon + shift, events)
    })
}
