//! Ranking-loss training of relevance models and the hash-network driver.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::evalmetrics::Protocol;
use crate::hashing::{check_weights, hash_loss_on_tape, HashConfig, HashNet};
use crate::model::RetrievalModel;
use crate::mtpp::Forward;
use crate::relevance::{FisherVector, ScoreFlags, Scorer};
use crate::retrieval::evaluate_exhaustive;
use crate::seq::{Dataset, EventSequence, Split};

/// `Σ_{c+, c−} [s(q, c−) − s(q, c+) + δ]₊`.
pub fn ranking_loss(pos: &[f64], neg: &[f64], delta: f64) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptySide);
    }
    Ok(pos
        .iter()
        .flat_map(|p| neg.iter().map(move |n| (n - p + delta).max(0.0)))
        .sum())
}

/// [`ranking_loss`] over `p x 1` and `n x 1` score columns.
pub fn ranking_loss_on_tape(tape: &Tape, pos: Var, neg: Var, delta: f64) -> Var {
    tape.sum(tape.relu(tape.add_scalar(tape.pairwise_diff(pos, neg), delta)))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m = self.m[i] / c1;
            let v = self.v[i] / c2;
            params[i] -= self.lr * m / (v.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Hinge margin δ.
    pub margin: f64,
    pub lr: f64,
    /// Queries per optimizer step.
    pub batch: usize,
    /// Negatives sampled per query and epoch.
    pub negatives: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Coefficient of `||θ, φ||²`.
    pub l2: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Negatives per validation query pool.
    pub val_negatives: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            lr: 1e-3,
            batch: 16,
            negatives: 100,
            epochs: 30,
            seed: 0,
            l2: 0.001,
            patience: 5,
            val_negatives: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidConfig("margin must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.negatives == 0 {
            return Err(Error::InvalidConfig("need at least one negative per query".into()));
        }
        if !(self.lr >= 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::InvalidConfig("lr and l2 must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-query objective over the epoch.
    pub train_loss: f64,
    #[serde(rename = "val_MAP")]
    pub val_map: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: RetrievalModel,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub fn write_trace(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,train_loss,val_MAP")?;
    for r in trace {
        writeln!(w, "{},{},{}", r.epoch, r.train_loss, r.val_map)?;
    }
    w.flush()?;
    Ok(())
}

/// Loss terms of one training query.
#[derive(Debug, Clone, Copy)]
pub struct QueryLoss {
    pub ranking: Var,
    pub total: Var,
}

/// Ranking loss of one query plus the unwarping regularizer at its horizon.
#[allow(clippy::too_many_arguments)]
pub fn query_loss_on_tape(
    tape: &Tape,
    model: &RetrievalModel,
    params: &ParamStore,
    query: &EventSequence,
    positives: &[&EventSequence],
    negatives: &[&EventSequence],
    margin: f64,
    noise: f64,
    fwd: &mut Forward,
) -> Result<QueryLoss> {
    if positives.is_empty() {
        return Err(Error::NoPositives(query.id.clone()));
    }
    if negatives.is_empty() {
        return Err(Error::EmptySide);
    }
    let flags = ScoreFlags::FULL;
    let tq = model.prepare_query(tape, params, query, flags, noise, fwd)?;
    let mut score = |seqs: &[&EventSequence]| -> Result<Var> {
        let parts = seqs
            .iter()
            .map(|c| model.score_on_tape(tape, params, &tq, c, flags, fwd))
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat_rows(&parts))
    };
    let pos = score(positives)?;
    let neg = score(negatives)?;
    let ranking = ranking_loss_on_tape(tape, pos, neg, margin);
    let total = if model.config.unwarp {
        tape.add(ranking, model.umnn.regularizer(tape, params, query.horizon)?)
    } else {
        ranking
    };
    Ok(QueryLoss { ranking, total })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

fn sample_negatives<'a>(
    dataset: &'a Dataset,
    query_idx: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a EventSequence> {
    let pool = &dataset.label_index(query_idx).negatives;
    let take = count.min(pool.len());
    index::sample(rng, pool.len(), take)
        .into_iter()
        .map(|i| &dataset.corpus[pool[i]])
        .collect()
}

fn positives(dataset: &Dataset, query_idx: usize) -> Vec<&EventSequence> {
    dataset
        .label_index(query_idx)
        .positives
        .iter()
        .map(|&c| &dataset.corpus[c])
        .collect()
}

/// Loss and flat gradient of one query under training noise and dropout.
fn query_step(
    model: &RetrievalModel,
    dataset: &Dataset,
    q: usize,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, q as u64));
    let negatives = sample_negatives(dataset, q, cfg.negatives, &mut rng);
    let noise = model.umnn.draw_noise(&mut rng, model.config.unwarp);
    let mut fwd = Forward::train(ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, !(q as u64))));
    let tape = Tape::new();
    let loss = query_loss_on_tape(
        &tape,
        model,
        &model.params,
        &dataset.queries[q],
        &positives(dataset, q),
        &negatives,
        cfg.margin,
        noise,
        &mut fwd,
    )?;
    let value = tape.scalar_value(loss.total);
    Ok((value, tape.backward(loss.total).flat(&model.params)))
}

/// Mean evaluation-mode ranking loss over a split, with negatives drawn
/// from `seed`.
pub fn mean_ranking_loss(
    model: &RetrievalModel,
    dataset: &Dataset,
    split: Split,
    negatives: usize,
    margin: f64,
    seed: u64,
) -> Result<f64> {
    let queries = dataset.split_indices(split);
    if queries.is_empty() {
        return Err(Error::NoTestQueries);
    }
    let losses = queries
        .par_iter()
        .map(|&q| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX, q as u64));
            let neg = sample_negatives(dataset, q, negatives, &mut rng);
            let tape = Tape::new();
            let mut fwd = Forward::eval();
            let loss = query_loss_on_tape(
                &tape,
                model,
                &model.params,
                &dataset.queries[q],
                &positives(dataset, q),
                &neg,
                margin,
                0.0,
                &mut fwd,
            )?;
            Ok(tape.scalar_value(loss.ranking))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// MAP of `model` on a split with the pooled protocol.
pub fn split_map(model: &RetrievalModel, dataset: &Dataset, split: Split, protocol: &Protocol) -> Result<f64> {
    split_map_with(model, dataset, split, protocol, ScoreFlags::FULL)
}

pub fn split_map_with(
    model: &RetrievalModel,
    dataset: &Dataset,
    split: Split,
    protocol: &Protocol,
    flags: ScoreFlags,
) -> Result<f64> {
    let mut scorer = Scorer::new(model, flags);
    scorer.cache_corpus(&dataset.corpus)?;
    Ok(evaluate_exhaustive(&scorer, dataset, split, protocol)?.map)
}

/// Trains `model` in place on the train split and returns the parameters of
/// the best validation epoch.
pub fn train(model: RetrievalModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, dataset, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F>(
    mut model: RetrievalModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    let mut train_q = dataset.split_indices(Split::Train);
    if train_q.is_empty() {
        return Err(Error::InvalidConfig("train split is empty".into()));
    }
    for &q in &train_q {
        if dataset.label_index(q).positives.is_empty() {
            return Err(Error::NoPositives(dataset.queries[q].id.clone()));
        }
    }
    let has_val = !dataset.splits.val.is_empty();
    let protocol = Protocol {
        negatives: cfg.val_negatives,
        seed: cfg.seed,
    };
    model.seeds.insert("train".into(), cfg.seed);
    let mut adam = Adam::new(model.params.len(), cfg.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0, u64::MAX));
    let mut best = (f64::NEG_INFINITY, 0usize, model.params.values.clone());
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        train_q.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in train_q.chunks(cfg.batch) {
            let results = batch
                .par_iter()
                .map(|&q| query_step(&model, dataset, q, cfg, epoch))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; model.params.len()];
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::DivergedLoss(epoch));
                }
                epoch_loss += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            for (g, &p) in grad.iter_mut().zip(&model.params.values) {
                *g += 2.0 * cfg.l2 * p;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::DivergedLoss(epoch));
            }
            adam.step(&mut model.params.values, &grad);
        }
        let val_map = if has_val {
            split_map(&model, dataset, Split::Val, &protocol)?
        } else {
            f64::NAN
        };
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_q.len() as f64,
            val_map,
        };
        on_epoch(&record);
        trace.push(record);
        // Without a validation split the last epoch wins.
        let score = if has_val { val_map } else { epoch as f64 };
        if score > best.0 {
            best = (score, epoch, model.params.values.clone());
        } else if cfg.patience > 0 && epoch - best.1 >= cfg.patience {
            break;
        }
    }
    if cfg.epochs > 0 {
        model.params.values = best.2;
    }
    Ok(TrainOutcome {
        model,
        trace,
        best_epoch: best.1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for HashTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps: 500,
            seed: 0,
        }
    }
}

/// Full-batch Adam on the hash objective over frozen corpus vectors.
/// Returns the network and the per-step loss.
pub fn train_hash(
    vectors: &[FisherVector],
    hash: &HashConfig,
    cfg: &HashTrainConfig,
) -> Result<(HashNet, Vec<f64>)> {
    check_weights(hash.eta)?;
    let first = vectors.first().ok_or(Error::EmptyCorpus)?;
    let mut net = HashNet::new(first.v.len(), hash.bits, cfg.seed);
    let data: Vec<Vec<f64>> = vectors.iter().map(|v| v.v.clone()).collect();
    let mut adam = Adam::new(net.params.len(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let tape = Tape::new();
        let x = net.batch(&tape, &data)?;
        let z = tape.tanh(net.forward(&tape, &net.params, x)?);
        let loss = hash_loss_on_tape(&tape, z, hash.eta);
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteValue("hash loss"));
        }
        losses.push(value);
        let grad = tape.backward(loss).flat(&net.params);
        adam.step(&mut net.params.values, &grad);
    }
    Ok((net, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::{make_benchmark, BenchmarkConfig};
    use crate::diff::{finite_diff, gradient, max_rel_error};
    use crate::model::ModelConfig;
    use crate::mtpp::EncoderKind;
    use proptest::prelude::*;

    fn tiny_dataset() -> Dataset {
        make_benchmark(&BenchmarkConfig {
            generators: 6,
            windows: [3, 4],
            window_len: [4, 7],
            num_marks: 3,
            rate: [4.0, 16.0],
            seed: 5,
        })
        .unwrap()
    }

    fn tiny_model(kind: EncoderKind, ds: &Dataset) -> RetrievalModel {
        let mut c = ModelConfig::new(kind, ds.num_marks);
        c.mtpp.dim = 6;
        c.umnn.hidden = vec![6, 6];
        c.umnn.nodes = 8;
        RetrievalModel::new(c, ds.time_scale(), 2).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            negatives: 5,
            batch: 2,
            val_negatives: 20,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(ranking_loss(&[1.0], &[0.0], 0.5).unwrap(), 0.0);
        assert!((ranking_loss(&[0.3], &[0.3], 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(ranking_loss(&[2.0, 3.0], &[0.0, 1.0], 0.5).unwrap(), 0.0);
        assert!(matches!(ranking_loss(&[], &[1.0], 0.5), Err(Error::EmptySide)));
        assert!(matches!(ranking_loss(&[1.0], &[], 0.5), Err(Error::EmptySide)));
    }

    proptest! {
        #[test]
        fn hinge_nonnegative_and_tape_agrees(
            pos in prop::collection::vec(-3.0..3.0f64, 1..6),
            neg in prop::collection::vec(-3.0..3.0f64, 1..6),
            delta in 0.01..2.0f64,
        ) {
            let l = ranking_loss(&pos, &neg, delta).unwrap();
            prop_assert!(l >= 0.0);
            let all_ok = pos.iter().all(|p| neg.iter().all(|n| p - n >= delta));
            prop_assert_eq!(l == 0.0, all_ok);
            let tape = Tape::new();
            let p = tape.constant(crate::diff::Tensor::column(pos.clone()));
            let n = tape.constant(crate::diff::Tensor::column(neg.clone()));
            let t = tape.scalar_value(ranking_loss_on_tape(&tape, p, n, delta));
            prop_assert!((t - l).abs() <= 1e-12 * l.abs().max(1.0));
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn query_loss_gradient_matches_finite_differences() {
        let ds = tiny_dataset();
        for kind in [EncoderKind::SelfAttn, EncoderKind::CrossAttn] {
            let model = tiny_model(kind, &ds);
            let q = ds.split_indices(Split::Train)[0];
            let pos = positives(&ds, q);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let neg = sample_negatives(&ds, q, 3, &mut rng);
            // Large margin keeps every hinge active, away from its kink.
            let f = |t: &Tape, p: &ParamStore| {
                let mut fwd = Forward::eval();
                let l = query_loss_on_tape(t, &model, p, &ds.queries[q], &pos, &neg, 50.0, 0.01, &mut fwd)?;
                Ok(l.total)
            };
            let a = gradient(f, &model.params).unwrap();
            let n = finite_diff(f, &model.params, 1e-6).unwrap();
            assert!(max_rel_error(&a, &n, 1e-3) < 1e-4, "{kind}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = tiny_dataset();
        let model = tiny_model(EncoderKind::SelfAttn, &ds);
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            l2: 0.0,
            ..tiny_config()
        };
        let out = train(model.clone(), &ds, &cfg).unwrap();
        assert_eq!(out.model.params.values, model.params.values);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let a = train(tiny_model(EncoderKind::CrossAttn, &ds), &ds, &cfg).unwrap();
        let b = train(tiny_model(EncoderKind::CrossAttn, &ds), &ds, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model.params.values, b.model.params.values);
        assert_eq!(a.trace.len(), 2);
    }

    #[test]
    fn query_without_positives_is_rejected() {
        let ds = tiny_dataset();
        let q = &ds.splits.train[0];
        let labels = ds
            .labels
            .iter()
            .map(|l| {
                let mut l = l.clone();
                if &l.query_id == q {
                    l.label = crate::seq::Relevance::NonRelevant;
                }
                l
            })
            .collect();
        let bad = Dataset::new(ds.queries.clone(), ds.corpus.clone(), labels, ds.splits.clone(), ds.num_marks).unwrap();
        let err = train(tiny_model(EncoderKind::SelfAttn, &bad), &bad, &tiny_config()).unwrap_err();
        assert!(matches!(err, Error::NoPositives(id) if &id == q));
    }

    #[test]
    fn trace_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = [EpochRecord {
            epoch: 1,
            train_loss: 2.5,
            val_map: 0.25,
        }];
        write_trace(&path, &trace).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "epoch,train_loss,val_MAP\n1,2.5,0.25\n"
        );
    }

    fn random_vectors(n: usize, dim: usize) -> Vec<FisherVector> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n)
            .map(|i| FisherVector {
                id: format!("c{i}"),
                conditioning: None,
                v: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn hash_training_zero_rate_and_descent() {
        let vectors = random_vectors(40, 8);
        let hash = HashConfig {
            bits: 8,
            ..HashConfig::default()
        };
        let frozen = train_hash(&vectors, &hash, &HashTrainConfig { lr: 0.0, steps: 3, seed: 1 }).unwrap().0;
        assert_eq!(frozen.params.values, HashNet::new(8, 8, 1).params.values);

        let cfg = HashTrainConfig { lr: 1e-2, steps: 200, seed: 1 };
        let (net, losses) = train_hash(&vectors, &hash, &cfg).unwrap();
        let data: Vec<Vec<f64>> = vectors.iter().map(|v| v.v.clone()).collect();
        let before = crate::hashing::code_stats(&frozen, &data).unwrap();
        let after = crate::hashing::code_stats(&net, &data).unwrap();
        assert!(after.saturated_fraction > before.saturated_fraction);
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn hash_training_needs_vectors() {
        let err = train_hash(&[], &HashConfig::default(), &HashTrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyCorpus));
    }
}
