//! Monotone unwarping of query arrival times.
//!
//! The unwarping map is the integral of a strictly positive network,
//! `U(t) = ∫_0^t u(τ) dτ + η`, evaluated with Gauss–Legendre quadrature so
//! that every quadrature node stays on the tape and the map is differentiable
//! in the network parameters. Within a sequence the integral is accumulated
//! interval by interval (`[0, t_1]`, `[t_1, t_2]`, ...), each interval with
//! its own `Q`-node rule, which makes unwarped times strictly increasing by
//! construction.
//!
//! The integrand network sees `τ / time_scale` so that its input stays in
//! roughly `[0, 1]` whatever the raw time units are.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::seq::{Event, EventSequence};

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for j in 2..=n {
                    let jf = j as f64;
                    let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                    p0 = p1;
                    p1 = p2;
                }
                let pn = if n == 1 { x } else { p1 };
                let pm1 = if n == 1 { 1.0 } else { p0 };
                dp = n as f64 * (x * pn - pm1) / (x * x - 1.0);
                let dx = pn / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Quadrature nodes and weights mapped onto each interval
    /// `[bounds[i], bounds[i + 1]]`, flattened interval-major.
    fn mapped(&self, bounds: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let q = self.len();
        let intervals = bounds.len() - 1;
        let mut taus = Vec::with_capacity(intervals * q);
        let mut ws = Vec::with_capacity(intervals * q);
        for w in bounds.windows(2) {
            let (a, b) = (w[0], w[1]);
            let half = 0.5 * (b - a);
            for k in 0..q {
                taus.push(a + half * (self.nodes[k] + 1.0));
                ws.push(half * self.weights[k]);
            }
        }
        (taus, ws)
    }
}

/// Integrals of `integrand` over consecutive intervals of `bounds`, as an
/// `(bounds.len() - 1) x 1` column. The integrand maps an `m x 1` column of
/// raw times to an `m x 1` column of values.
pub fn integrate_intervals<F>(
    tape: &Tape,
    rule: &GaussLegendre,
    bounds: &[f64],
    integrand: F,
) -> Result<Var>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let intervals = bounds.len() - 1;
    let q = rule.len();
    let (taus, ws) = rule.mapped(bounds);
    let tau = tape.constant(Tensor::column(taus));
    let u = integrand(tape, tau)?;
    let u = tape.reshape(u, intervals, q);
    let weighted = tape.mul_const(u, Tensor::new(intervals, q, ws));
    Ok(tape.sum_cols(weighted))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UmnnConfig {
    /// Hidden layer widths of the integrand network.
    pub hidden: Vec<usize>,
    /// Gauss–Legendre nodes per interval.
    pub nodes: usize,
    /// Standard deviation of the additive training noise; also scales the
    /// regularizer by `1 / sigma^2`.
    pub sigma: f64,
}

impl Default for UmnnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            nodes: 16,
            sigma: 0.1,
        }
    }
}

/// Unwarped times of one sequence, kept on the tape.
#[derive(Debug, Clone, Copy)]
pub struct UnwarpedTimes {
    /// `U(t_i)`, including the noise offset.
    pub times: Var,
    /// `U(t_i) - U(t_{i-1})` with `U(t_0) = U(0) = η`; strictly positive.
    pub gaps: Var,
}

/// Integral of a nonnegative network (the "UMNN" construction).
#[derive(Debug, Clone)]
pub struct Umnn {
    pub config: UmnnConfig,
    pub time_scale: f64,
    rule: GaussLegendre,
}

/// `ln(e - 1)`, the softplus preimage of 1.
const SOFTPLUS_INV_ONE: f64 = 0.541_324_854_612_918_1;

impl Umnn {
    pub fn new(config: UmnnConfig, time_scale: f64) -> Result<Self> {
        if config.nodes < 4 {
            return Err(Error::InvalidConfig(format!(
                "unwarp quadrature needs at least 4 nodes, got {}",
                config.nodes
            )));
        }
        if !(config.sigma > 0.0) {
            return Err(Error::InvalidConfig("unwarp sigma must be positive".into()));
        }
        if !(time_scale > 0.0) {
            return Err(Error::InvalidConfig("time scale must be positive".into()));
        }
        let rule = GaussLegendre::new(config.nodes);
        Ok(Self {
            config,
            time_scale,
            rule,
        })
    }

    fn layer_name(i: usize) -> String {
        format!("umnn.{i}")
    }

    fn num_layers(&self) -> usize {
        self.config.hidden.len() + 1
    }

    /// Registers the integrand parameters. The output layer starts near zero
    /// with bias `softplus^{-1}(1)`, so a fresh network is close to the
    /// identity map.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let mut fan_in = 1;
        for (i, &width) in self.config.hidden.iter().enumerate() {
            nn::add_linear(store, rng, &Self::layer_name(i), fan_in, width);
            fan_in = width;
        }
        let out = Self::layer_name(self.config.hidden.len());
        store.add(
            &format!("{out}.w"),
            fan_in,
            1,
            &nn::uniform(rng, fan_in, 0.01),
        );
        store.add(&format!("{out}.b"), 1, 1, &[SOFTPLUS_INV_ONE]);
    }

    /// Segment names owned by this network, in layout order.
    pub fn segment_names(&self) -> Vec<String> {
        (0..self.num_layers())
            .flat_map(|i| {
                let n = Self::layer_name(i);
                [format!("{n}.w"), format!("{n}.b")]
            })
            .collect()
    }

    /// `u(τ)` for an `m x 1` column of raw times; strictly positive.
    pub fn integrand(&self, tape: &Tape, params: &ParamStore, tau: Var) -> Result<Var> {
        let mut h = tape.scale(tau, 1.0 / self.time_scale);
        let last = self.config.hidden.len();
        for i in 0..last {
            h = tape.tanh(nn::linear(tape, params, &Self::layer_name(i), h)?);
        }
        let out = nn::linear(tape, params, &Self::layer_name(last), h)?;
        Ok(tape.softplus(out))
    }

    /// Unwarps an increasing list of times on the tape.
    pub fn unwarp_on_tape(
        &self,
        tape: &Tape,
        params: &ParamStore,
        times: &[f64],
        noise: f64,
    ) -> Result<UnwarpedTimes> {
        if let Some(&t) = times.iter().find(|&&t| !(t >= 0.0)) {
            return Err(Error::NegativeTime(t));
        }
        let mut bounds = Vec::with_capacity(times.len() + 1);
        bounds.push(0.0);
        bounds.extend_from_slice(times);
        let gaps = integrate_intervals(tape, &self.rule, &bounds, |t, tau| {
            self.integrand(t, params, tau)
        })?;
        let cumulative = tape.cumsum_rows(gaps);
        let times = tape.add_scalar(cumulative, noise);
        Ok(UnwarpedTimes { times, gaps })
    }

    /// `U(t)` for a single time, integrating `[0, t]` with one rule.
    pub fn unwarp_time(&self, params: &ParamStore, t: f64, noise: f64) -> Result<f64> {
        let tape = Tape::new();
        let u = self.unwarp_on_tape(&tape, params, &[t], noise)?;
        Ok(tape.scalar_value(u.times))
    }

    /// Applies `U` to every event time and to the horizon; marks are kept.
    pub fn unwarp_sequence(
        &self,
        params: &ParamStore,
        seq: &EventSequence,
        noise: f64,
    ) -> Result<EventSequence> {
        let mut times = seq.times();
        times.push(seq.horizon);
        let tape = Tape::new();
        let u = self.unwarp_on_tape(&tape, params, &times, noise)?;
        let values = tape.value(u.times).data;
        let horizon = values[seq.len()];
        let events = seq
            .events
            .iter()
            .zip(&values)
            .map(|(e, &t)| Event::new(t, e.mark))
            .collect();
        Ok(EventSequence::new(seq.id.clone(), horizon, events))
    }

    /// One noise draw `η ~ N(0, sigma)` per sequence in training, zero at
    /// evaluation.
    pub fn draw_noise<R: Rng>(&self, rng: &mut R, training: bool) -> f64 {
        if training {
            Normal::new(0.0, self.config.sigma)
                .expect("positive sigma")
                .sample(rng)
        } else {
            0.0
        }
    }

    /// `(1 / sigma^2) ∫_0^horizon (u(t) - 1)^2 dt` as a `1 x 1` node.
    pub fn regularizer(&self, tape: &Tape, params: &ParamStore, horizon: f64) -> Result<Var> {
        let integral = integrate_intervals(tape, &self.rule, &[0.0, horizon], |t, tau| {
            let u = self.integrand(t, params, tau)?;
            Ok(t.square(t.add_scalar(u, -1.0)))
        })?;
        let sigma = self.config.sigma;
        Ok(tape.scale(tape.sum(integral), 1.0 / (sigma * sigma)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_diff, gradient, max_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn integrate_with<F>(q: usize, bounds: &[f64], f: F) -> Vec<f64>
    where
        F: Fn(&Tape, Var) -> Result<Var>,
    {
        let tape = Tape::new();
        let v = integrate_intervals(&tape, &GaussLegendre::new(q), bounds, f).unwrap();
        tape.value(v).data
    }

    #[test]
    fn gauss_legendre_weights_sum_to_two() {
        for n in [1, 2, 5, 16, 31] {
            let r = GaussLegendre::new(n);
            let s: f64 = r.weights.iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n}: {s}");
            assert!(r.nodes.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn gauss_legendre_is_exact_for_degree_2n_minus_1() {
        let r = GaussLegendre::new(4);
        // ∫_{-1}^{1} x^6 = 2/7
        let v: f64 = r
            .nodes
            .iter()
            .zip(&r.weights)
            .map(|(x, w)| w * x.powi(6))
            .sum();
        assert!((v - 2.0 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn unit_integrand_is_identity() {
        let v = integrate_with(16, &[0.0, 2.0], |t, tau| {
            let (r, c) = t.shape(tau);
            Ok(t.constant(Tensor::filled(r, c, 1.0)))
        });
        assert!((v[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn cubic_antiderivative() {
        // ∫_0^1 3τ² dτ = 1
        let v = integrate_with(16, &[0.0, 1.0], |t, tau| {
            let sq = t.square(tau);
            Ok(t.scale(sq, 3.0))
        });
        assert!((v[0] - 1.0).abs() < 1e-6);
    }

    fn small_net(seed: u64) -> (Umnn, ParamStore) {
        let net = Umnn::new(
            UmnnConfig {
                hidden: vec![8, 8],
                nodes: 16,
                sigma: 0.1,
            },
            5.0,
        )
        .unwrap();
        let mut store = ParamStore::new();
        net.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (net, store)
    }

    /// Sets the output layer so that `u ≡ c`.
    fn constant_net(c: f64) -> (Umnn, ParamStore) {
        let (net, mut store) = small_net(0);
        let out = Umnn::layer_name(net.config.hidden.len());
        store
            .slice_mut(&format!("{out}.w"))
            .unwrap()
            .iter_mut()
            .for_each(|w| *w = 0.0);
        // softplus^{-1}(c) = ln(e^c - 1)
        store.slice_mut(&format!("{out}.b")).unwrap()[0] = c.exp_m1().ln();
        (net, store)
    }

    #[test]
    fn zero_time_maps_to_noise() {
        let (net, store) = small_net(1);
        assert_eq!(net.unwarp_time(&store, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(net.unwarp_time(&store, 0.0, 0.25).unwrap(), 0.25);
    }

    #[test]
    fn negative_time_is_rejected() {
        let (net, store) = small_net(1);
        assert!(matches!(
            net.unwarp_time(&store, -1.0, 0.0),
            Err(Error::NegativeTime(_))
        ));
    }

    #[test]
    fn constant_integrands_scale_times() {
        let seq = EventSequence::from_parts("q", 3.0, &[1.0, 2.0], &[0, 1]);
        let (net, store) = constant_net(1.0);
        let out = net.unwarp_sequence(&store, &seq, 0.0).unwrap();
        for (a, b) in out.times().iter().zip([1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.marks(), seq.marks());

        let (net, store) = constant_net(2.0);
        let out = net.unwarp_sequence(&store, &seq, 0.0).unwrap();
        for (a, b) in out.times().iter().zip([2.0, 4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((out.horizon - 6.0).abs() < 1e-12);
    }

    #[test]
    fn regularizer_values() {
        let tape = Tape::new();
        let (net, store) = constant_net(1.0);
        let r = net.regularizer(&tape, &store, 1.0).unwrap();
        assert!(tape.scalar_value(r).abs() < 1e-20);

        let (mut net, store) = constant_net(2.0);
        net.config.sigma = 1.0;
        let r = net.regularizer(&tape, &store, 1.0).unwrap();
        assert!((tape.scalar_value(r) - 1.0).abs() < 1e-6);

        net.config.sigma = 0.5;
        let r = net.regularizer(&tape, &store, 1.0).unwrap();
        assert!((tape.scalar_value(r) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn fresh_network_is_near_identity() {
        let (net, store) = small_net(2);
        let u = net.unwarp_time(&store, 4.0, 0.0).unwrap();
        assert!((u - 4.0).abs() < 0.2, "{u}");
    }

    #[test]
    fn training_noise_is_shared_offset() {
        let (net, store) = small_net(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eta = net.draw_noise(&mut rng, true);
        assert_ne!(eta, 0.0);
        assert_eq!(net.draw_noise(&mut rng, false), 0.0);
        let seq = EventSequence::from_parts("q", 3.0, &[0.5, 1.0, 2.5], &[0, 1, 0]);
        let clean = net.unwarp_sequence(&store, &seq, 0.0).unwrap();
        let noisy = net.unwarp_sequence(&store, &seq, eta).unwrap();
        for (a, b) in clean.times().iter().zip(noisy.times()) {
            assert!((b - a - eta).abs() < 1e-12);
        }
    }

    #[test]
    fn unwarp_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (net, store) = small_net(seed);
            let f = |t: &Tape, p: &ParamStore| {
                let u = net.unwarp_on_tape(t, p, &[0.7, 1.9, 3.2], 0.0)?;
                let w = t.constant(Tensor::row(vec![1.0, -0.5, 0.25]));
                Ok(t.matmul(w, u.times))
            };
            let g = gradient(f, &store).unwrap();
            let fd = finite_diff(f, &store, 1e-5).unwrap();
            assert!(max_rel_error(&g, &fd, 1e-6) < 1e-4);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn unwarped_sequences_keep_order(
                seed in 0u64..1000,
                gaps in prop::collection::vec(1e-3f64..2.0, 1..20),
            ) {
                let (net, store) = small_net(seed);
                let mut t = 0.0;
                let times: Vec<f64> = gaps.iter().map(|g| { t += g; t }).collect();
                let seq = EventSequence::from_parts("q", t + 1.0, &times, &vec![0; times.len()]);
                let out = net.unwarp_sequence(&store, &seq, 0.0).unwrap();
                prop_assert!(out.times().windows(2).all(|w| w[0] < w[1]));
                prop_assert!(out.times().iter().all(|&x| x < out.horizon));
            }
        }
    }
}
