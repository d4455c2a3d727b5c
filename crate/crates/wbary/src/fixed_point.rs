//! The stochastic fixed-point iteration: truncate the current iterate to a
//! ball, estimate one OT map per input measure from fresh samples, push the
//! iterate forward by the weighted sum of the estimated maps, repeat.
//!
//! The iterate is never materialized: it exists as a pushforward chain over
//! the initial measure, sampled by rejection against the current ball. The
//! engine is generic over a [`ChainBackend`] so the serial path and the
//! coordinator/agent simulation share every line of numeric code; with equal
//! seeds they produce bit-identical trajectories.

use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;

use crate::entropic_map::{build_entropic_map, theta_schedule, EntropicMap, EntropicMapConfig};
use crate::error::{Error, Result};
use crate::eval;
use crate::manifest::{ChainRecord, LayerRecord, MeasureRecord, MetricRow};
use crate::measures::{norm, sample, BallFamily, Measure, SampleBatch};
use crate::rng::{labels, RngStream};
use crate::sinkhorn::SinkhornConfig;

/// One layer of the chain: the weighted family of maps built at iteration t.
#[derive(Debug, Clone)]
pub struct LayerMap {
    pub t: usize,
    weights: Vec<f64>,
    maps: Vec<EntropicMap>,
}

impl LayerMap {
    pub fn new(t: usize, weights: Vec<f64>, maps: Vec<EntropicMap>) -> Result<Self> {
        check_weights(&weights)?;
        if maps.len() != weights.len() {
            return Err(Error::shape("one map per weight required"));
        }
        Ok(LayerMap { t, weights, maps })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn maps(&self) -> &[EntropicMap] {
        &self.maps
    }

    /// `sum_k w_k T_k(x)`.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut out = vec![0.0; d];
        for (w, map) in self.weights.iter().zip(&self.maps) {
            let img = map.eval(x);
            for i in 0..d {
                out[i] += w * img[i];
            }
        }
        out
    }

    pub fn to_record(&self) -> LayerRecord {
        LayerRecord {
            t: self.t,
            weights: self.weights.clone(),
            maps: self.maps.iter().map(|m| m.to_record()).collect(),
        }
    }

    pub fn from_record(rec: &LayerRecord) -> Result<Self> {
        let maps = rec.maps.iter().map(EntropicMap::from_record).collect::<Result<Vec<_>>>()?;
        LayerMap::new(rec.t, rec.weights.clone(), maps)
    }
}

/// Weights must be strictly positive and sum to 1 (a zero weight silently
/// drops an input measure, which the iteration semantics do not allow).
pub fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::invalid("at least one weight required"));
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights must be strictly positive"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("weights sum to {total}, expected 1 within 1e-12")));
    }
    Ok(())
}

/// The evolving representation of the iterate: base measure, accumulated
/// layers, current truncation radius.
#[derive(Debug, Clone)]
pub struct PushforwardChain {
    pub base: Measure,
    layers: Vec<LayerMap>,
    radius: f64,
}

impl PushforwardChain {
    pub fn new(base: Measure) -> Self {
        PushforwardChain { base, layers: Vec::new(), radius: f64::INFINITY }
    }

    pub fn layers(&self) -> &[LayerMap] {
        &self.layers
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn set_radius(&mut self, r: f64) {
        self.radius = r;
    }

    pub fn push_layer(&mut self, layer: LayerMap) {
        self.layers.push(layer);
    }

    /// Push a batch of base points through every layer, in parallel over
    /// points (pure per-point arithmetic, so thread count cannot change the
    /// result).
    pub fn push_through(&self, pts: Array2<f64>) -> Result<Array2<f64>> {
        push_through_layers(&self.layers, pts)
    }

    pub fn to_record(&self, seed: u64, radii: &[f64]) -> ChainRecord {
        ChainRecord {
            seed,
            base: MeasureRecord::from_measure(&self.base),
            layers: self.layers.iter().map(|l| l.to_record()).collect(),
            radii: radii.to_vec(),
        }
    }

    pub fn from_record(rec: &ChainRecord) -> Result<Self> {
        let base = rec.base.to_measure()?;
        let layers = rec.layers.iter().map(LayerMap::from_record).collect::<Result<Vec<_>>>()?;
        let radius = rec.radii.last().copied().unwrap_or(f64::INFINITY);
        Ok(PushforwardChain { base, layers, radius })
    }
}

pub fn push_through_layers(layers: &[LayerMap], pts: Array2<f64>) -> Result<Array2<f64>> {
    if layers.is_empty() {
        return Ok(pts);
    }
    let d = pts.ncols();
    let rows: Vec<Vec<f64>> = (0..pts.nrows())
        .into_par_iter()
        .map(|i| {
            let mut x = pts.row(i).to_vec();
            for layer in layers {
                x = layer.eval(&x);
            }
            x
        })
        .collect();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in &rows {
        data.extend_from_slice(r);
    }
    let out = Array2::from_shape_vec((rows.len(), d), data).expect("shape by construction");
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pushforward chain output".into()));
    }
    Ok(out)
}

/// A barycenter problem the engine can run on: samplable inputs with known
/// (or estimable) support radii, plus an optional reference measure for the
/// `W2_to_ref` metric.
pub trait BarycenterProblem: Sync {
    fn dimension(&self) -> usize;
    fn num_inputs(&self) -> usize;
    fn weights(&self) -> &[f64];
    fn sample_input(&self, k: usize, n: usize, stream: &mut RngStream) -> Result<SampleBatch>;
    /// Exact support radius of input k when known by construction.
    fn input_radius(&self, k: usize) -> Option<f64>;
    fn sample_reference(&self, n: usize, stream: &mut RngStream) -> Result<Option<SampleBatch>>;
}

/// Barycenter problem given by explicit measures (inputs must be compactly
/// supported for the iteration's assumptions to hold; untruncated inputs get
/// a per-batch radius estimate instead).
pub struct MeasureProblem {
    inputs: Vec<Measure>,
    weights: Vec<f64>,
    reference: Option<Measure>,
}

impl MeasureProblem {
    pub fn new(inputs: Vec<Measure>, weights: Vec<f64>, reference: Option<Measure>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != weights.len() {
            return Err(Error::invalid("one weight per input measure required"));
        }
        check_weights(&weights)?;
        let d = inputs[0].dimension();
        if inputs.iter().any(|m| m.dimension() != d) {
            return Err(Error::shape("input measures of unequal dimension"));
        }
        Ok(MeasureProblem { inputs, weights, reference })
    }
}

impl BarycenterProblem for MeasureProblem {
    fn dimension(&self) -> usize {
        self.inputs[0].dimension()
    }

    fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn sample_input(&self, k: usize, n: usize, stream: &mut RngStream) -> Result<SampleBatch> {
        sample(&self.inputs[k], n, stream)
    }

    fn input_radius(&self, k: usize) -> Option<f64> {
        let r = self.inputs[k].support_radius();
        r.is_finite().then_some(r)
    }

    fn sample_reference(&self, n: usize, stream: &mut RngStream) -> Result<Option<SampleBatch>> {
        match &self.reference {
            Some(m) => Ok(Some(sample(m, n, stream)?)),
            None => Ok(None),
        }
    }
}

/// Iteration schedule. The sample-size growth is geometric with a cap; the
/// tail mass driving the radius search is `min(c0, (t+1)^-(1+beta))`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub beta: f64,
    pub n0: usize,
    pub n_growth: f64,
    pub n_max: usize,
    pub alpha_bar: f64,
    pub tail_mass_c0: f64,
    pub probe_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            beta: 0.5,
            n0: 1000,
            n_growth: 2.0,
            n_max: 4000,
            alpha_bar: 3.0,
            tail_mass_c0: 0.01,
            probe_size: 2000,
        }
    }
}

impl Schedule {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::invalid("beta must be positive"));
        }
        if self.n0 < d + 1 {
            return Err(Error::invalid(format!("n0 must be >= d+1 = {}", d + 1)));
        }
        if self.n_growth < 1.0 {
            return Err(Error::invalid("n_growth must be >= 1"));
        }
        if !(3.0..=4.0).contains(&self.alpha_bar) {
            return Err(Error::invalid("alpha_bar must lie in [3, 4]"));
        }
        if !(self.tail_mass_c0 > 0.0 && self.tail_mass_c0 < 0.5) {
            return Err(Error::invalid("tail_mass_c0 must lie in (0, 0.5)"));
        }
        if self.probe_size < 100 {
            return Err(Error::invalid("probe_size must be >= 100"));
        }
        Ok(())
    }

    pub fn tail_mass(&self, t: usize) -> f64 {
        self.tail_mass_c0.min(((t + 1) as f64).powf(-(1.0 + self.beta)))
    }
}

/// `min(n_max, round(n0 * growth^t))`, clamped to at least d+1.
pub fn sample_size_schedule(t: usize, schedule: &Schedule, d: usize) -> usize {
    let grown = (schedule.n0 as f64 * schedule.n_growth.powi(t as i32)).round();
    let capped = if grown >= schedule.n_max as f64 { schedule.n_max } else { grown as usize };
    capped.max(d + 1)
}

/// Smallest grid radius whose empirical tail mass over untruncated chain
/// probes is below the schedule's budget; never decreases below `prev`.
pub fn truncation_radius<C: PushThrough + ?Sized>(
    base: &Measure,
    chain: &C,
    family: &BallFamily,
    schedule: &Schedule,
    t: usize,
    prev: Option<f64>,
    stream: &mut RngStream,
) -> Result<f64> {
    if schedule.probe_size < 100 {
        return Err(Error::invalid("probe_size must be >= 100"));
    }
    let probes = sample(base, schedule.probe_size, stream)?;
    let pushed = chain.push_through(probes.points)?;
    let delta = schedule.tail_mass(t);
    let radius = family.smallest_radius_with_tail(&pushed, delta);
    Ok(match prev {
        Some(p) => radius.max(p),
        None => radius,
    })
}

/// Anything that can push base points through the accumulated maps.
pub trait PushThrough: Sync {
    fn push_through(&self, pts: Array2<f64>) -> Result<Array2<f64>>;
}

impl PushThrough for PushforwardChain {
    fn push_through(&self, pts: Array2<f64>) -> Result<Array2<f64>> {
        PushforwardChain::push_through(self, pts)
    }
}

/// `n` accepted draws of the truncated pushforward, plus the observed
/// acceptance rate. Deterministic given the stream: base draws are
/// sequential and acceptance is a pure function of the pushed point.
pub fn rejection_sample<C: PushThrough + ?Sized>(
    base: &Measure,
    chain: &C,
    radius: f64,
    n: usize,
    stream: &mut RngStream,
    max_attempts_factor: f64,
) -> Result<(SampleBatch, f64)> {
    if n == 0 {
        return Err(Error::invalid("rejection sample size must be >= 1"));
    }
    let d = base.dimension();
    let provenance = stream.provenance();
    let mut accepted: Vec<f64> = Vec::with_capacity(n * d);
    let mut num_accepted = 0usize;
    let mut drawn = 0usize;

    while num_accepted < n {
        let rate_est = if drawn == 0 { 1.0 } else { num_accepted as f64 / drawn as f64 };
        let allowed = (max_attempts_factor * n as f64 / rate_est.max(1e-3)).ceil() as usize;
        if drawn >= allowed {
            return Err(Error::RejectionBudget {
                radius,
                accepted: num_accepted,
                requested: n,
                attempts: drawn,
            });
        }
        let remaining = n - num_accepted;
        let batch_size = ((remaining as f64 / rate_est.max(1e-3)).ceil() as usize)
            .clamp(remaining, allowed - drawn);
        let batch = sample(base, batch_size, stream)?;
        let pushed = chain.push_through(batch.points)?;
        drawn += batch_size;
        for i in 0..pushed.nrows() {
            if num_accepted >= n {
                break;
            }
            let row = pushed.row(i);
            let row = row.to_slice().expect("row-major");
            if norm(row) <= radius {
                accepted.extend_from_slice(row);
                num_accepted += 1;
            }
        }
    }
    let points = Array2::from_shape_vec((n, d), accepted).expect("shape by construction");
    let rate = n as f64 / drawn as f64;
    Ok((SampleBatch::new(points, provenance)?, rate))
}

/// Chain-state backend: the only part that differs between the serial engine
/// and the distributed coordinator.
pub trait ChainBackend: Sync {
    fn layer_count(&self) -> usize;
    fn push_through(&self, pts: Array2<f64>) -> Result<Array2<f64>>;
    /// Build the K maps for iteration `t` from the given source batches and
    /// append them as a layer. `r0_nu_hints[k]` is the exact input-support
    /// radius when known; otherwise the builder certifies the batch with a
    /// 1.05 safety factor on the max sample norm.
    fn append_layer(
        &mut self,
        t: usize,
        xs: Vec<SampleBatch>,
        theta: f64,
        r0_mu: f64,
        r0_nu_hints: &[Option<f64>],
    ) -> Result<()>;
    fn chain_record(&self, seed: u64, radii: &[f64]) -> Result<ChainRecord>;
    /// Called once after the last metric row (distributed backends shut
    /// their agents down here).
    fn shutdown(&mut self) -> Result<()>;
}

pub fn certify_target_radius(y: &SampleBatch, hint: Option<f64>) -> f64 {
    match hint {
        Some(r) => r,
        None => {
            let max = (0..y.len()).map(|j| norm(y.row(j))).fold(0.0, f64::max);
            max * 1.05
        }
    }
}

/// Serial backend: owns the chain, samples targets and solves locally.
pub struct SerialBackend<'p, P: BarycenterProblem> {
    problem: &'p P,
    chain: PushforwardChain,
    seed: u64,
    solver: SinkhornConfig,
}

impl<'p, P: BarycenterProblem> SerialBackend<'p, P> {
    pub fn new(problem: &'p P, base: Measure, seed: u64, solver: SinkhornConfig) -> Self {
        SerialBackend { problem, chain: PushforwardChain::new(base), seed, solver }
    }

    pub fn resume(problem: &'p P, chain: PushforwardChain, seed: u64, solver: SinkhornConfig) -> Self {
        SerialBackend { problem, chain, seed, solver }
    }

    pub fn chain(&self) -> &PushforwardChain {
        &self.chain
    }
}

impl<'p, P: BarycenterProblem> ChainBackend for SerialBackend<'p, P> {
    fn layer_count(&self) -> usize {
        self.chain.layers().len()
    }

    fn push_through(&self, pts: Array2<f64>) -> Result<Array2<f64>> {
        self.chain.push_through(pts)
    }

    fn append_layer(
        &mut self,
        t: usize,
        xs: Vec<SampleBatch>,
        theta: f64,
        r0_mu: f64,
        r0_nu_hints: &[Option<f64>],
    ) -> Result<()> {
        let k_count = self.problem.num_inputs();
        let root = RngStream::from_seed(self.seed);
        // independent target streams per k: parallel builds draw identical
        // numbers in any thread layout
        let maps: Vec<EntropicMap> = (0..k_count)
            .into_par_iter()
            .map(|k| {
                let mut target_stream = root.child3(labels::TARGET, t as u64, k as u64);
                let y = self.problem.sample_input(k, xs[k].len(), &mut target_stream)?;
                let r0_nu = certify_target_radius(&y, r0_nu_hints[k]);
                build_entropic_map(
                    &xs[k],
                    &y,
                    theta,
                    r0_mu,
                    r0_nu,
                    EntropicMapConfig { solver: self.solver },
                )
                .map_err(|e| Error::invalid(format!("estimator build failed at (t={t}, k={k}): {e}")))
            })
            .collect::<Result<_>>()?;
        let layer = LayerMap::new(t, self.problem.weights().to_vec(), maps)?;
        self.chain.push_layer(layer);
        Ok(())
    }

    fn chain_record(&self, seed: u64, radii: &[f64]) -> Result<ChainRecord> {
        Ok(self.chain.to_record(seed, radii))
    }

    fn shutdown(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Run configuration for the engine.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub initial: Measure,
    pub schedule: Schedule,
    pub iterations: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub solver: SinkhornConfig,
    pub max_attempts_factor: f64,
    pub record_wall_time: bool,
}

impl RunSettings {
    pub fn new(initial: Measure, schedule: Schedule, iterations: usize, n_eval: usize, seed: u64) -> Self {
        RunSettings {
            initial,
            schedule,
            iterations,
            n_eval,
            seed,
            solver: SinkhornConfig::default(),
            max_attempts_factor: 10.0,
            record_wall_time: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub rows: Vec<MetricRow>,
    pub chain: ChainRecord,
}

/// The shared engine. `step` performs one full iteration (radius, metrics,
/// estimator builds, pushforward layer); `finalize` appends the closing
/// metric row and serializes the chain.
pub struct Engine<'p, P: BarycenterProblem, B: ChainBackend> {
    problem: &'p P,
    settings: RunSettings,
    backend: B,
    family: BallFamily,
    root: RngStream,
    radii: Vec<f64>,
    rows: Vec<MetricRow>,
    t: usize,
}

impl<'p, P: BarycenterProblem, B: ChainBackend> Engine<'p, P, B> {
    pub fn new(problem: &'p P, settings: RunSettings, backend: B) -> Result<Self> {
        let d = problem.dimension();
        settings.schedule.validate(d)?;
        check_weights(problem.weights())?;
        if settings.iterations == 0 {
            return Err(Error::invalid("at least one iteration required"));
        }
        if settings.initial.dimension() != d {
            return Err(Error::shape("initial measure dimension mismatch"));
        }
        if problem.num_inputs() == 0 {
            return Err(Error::invalid("at least one input measure required"));
        }
        let root = RngStream::from_seed(settings.seed);
        let family = BallFamily::default_for_dimension(d);
        let t = backend.layer_count();
        Ok(Engine { problem, settings, backend, family, root, radii: Vec::new(), rows: Vec::new(), t })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    /// Radius for the current `t`. A resumed run already carries the radius
    /// its predecessor computed in `finalize`; recomputing would append a
    /// duplicate entry, so reuse it instead.
    fn current_radius(&mut self) -> Result<f64> {
        if self.radii.len() > self.t {
            return Ok(self.radii[self.t]);
        }
        let prev = self.radii.last().copied();
        let mut probe_stream = self.root.child2(labels::PROBE, self.t as u64);
        let radius = truncation_radius(
            &self.settings.initial,
            &BackendPush(&self.backend),
            &self.family,
            &self.settings.schedule,
            self.t,
            prev,
            &mut probe_stream,
        )?;
        self.radii.push(radius);
        Ok(radius)
    }

    fn metric_row(&mut self, radius: f64, started: Instant) -> Result<()> {
        let t = self.t;
        let n_eval = self.settings.n_eval;
        let metrics_root = self.root.child2(labels::METRICS, t as u64);

        let mut mu_stream = metrics_root.child(0);
        let (mu_batch, accept_rate) = rejection_sample(
            &self.settings.initial,
            &BackendPush(&self.backend),
            radius,
            n_eval,
            &mut mu_stream,
            self.settings.max_attempts_factor,
        )?;

        let mut ref_stream = metrics_root.child(1);
        let reference = self.problem.sample_reference(n_eval, &mut ref_stream)?;

        let nus: Vec<SampleBatch> = (0..self.problem.num_inputs())
            .map(|k| {
                let mut s = metrics_root.child(2 + k as u64);
                self.problem.sample_input(k, n_eval, &mut s)
            })
            .collect::<Result<_>>()?;

        let v = eval::v_hat(&mu_batch, &nus, self.problem.weights())?;
        let w2_ref = match &reference {
            Some(r) => eval::empirical_w2(&mu_batch, r)?,
            None => f64::NAN,
        };

        let d = self.problem.dimension();
        self.rows.push(MetricRow {
            t,
            radius,
            n_samples: sample_size_schedule(t, &self.settings.schedule, d),
            theta: theta_for(t, &self.settings.schedule, d),
            v_hat: v,
            w2_to_ref: w2_ref,
            accept_rate,
            wall_ms: started.elapsed().as_secs_f64() * 1000.0,
        });
        Ok(())
    }

    /// One iteration: choose the radius, record metrics of the truncated
    /// iterate, then build the next layer of maps.
    pub fn step(&mut self) -> Result<()> {
        let started = Instant::now();
        let t = self.t;
        let d = self.problem.dimension();
        let radius = self.current_radius()?;

        let n = sample_size_schedule(t, &self.settings.schedule, d);
        let theta = theta_for(t, &self.settings.schedule, d);

        // source batches from the truncated iterate, one stream per k
        let xs: Vec<SampleBatch> = (0..self.problem.num_inputs())
            .map(|k| {
                let mut s = self.root.child3(labels::SOURCE, t as u64, k as u64);
                rejection_sample(
                    &self.settings.initial,
                    &BackendPush(&self.backend),
                    radius,
                    n,
                    &mut s,
                    self.settings.max_attempts_factor,
                )
                .map(|(b, _)| b)
                .map_err(|e| Error::invalid(format!("source sampling failed at (t={t}, k={k}): {e}")))
            })
            .collect::<Result<_>>()?;

        self.metric_row(radius, started)?;

        let hints: Vec<Option<f64>> =
            (0..self.problem.num_inputs()).map(|k| self.problem.input_radius(k)).collect();
        self.backend.append_layer(t, xs, theta, radius, &hints)?;
        self.t += 1;
        Ok(())
    }

    /// Closing radius and metric row for the final iterate, then the chain
    /// manifest.
    pub fn finalize(mut self) -> Result<RunResult> {
        let started = Instant::now();
        let radius = self.current_radius()?;
        self.metric_row(radius, started)?;
        self.backend.shutdown()?;
        let chain = self.backend.chain_record(self.settings.seed, &self.radii)?;
        Ok(RunResult { rows: self.rows, chain })
    }

    /// Run `iterations` steps and finalize.
    pub fn run_to_completion(mut self) -> Result<RunResult> {
        let remaining = self.settings.iterations.saturating_sub(self.t);
        for _ in 0..remaining {
            self.step()?;
        }
        self.finalize()
    }
}

fn theta_for(t: usize, schedule: &Schedule, d: usize) -> f64 {
    let n = sample_size_schedule(t, schedule, d);
    theta_schedule(n, n, schedule.alpha_bar, d)
}

struct BackendPush<'b, B: ChainBackend>(&'b B);

impl<'b, B: ChainBackend> PushThrough for BackendPush<'b, B> {
    fn push_through(&self, pts: Array2<f64>) -> Result<Array2<f64>> {
        self.0.push_through(pts)
    }
}

/// Serial run over the given problem.
pub fn run<P: BarycenterProblem>(problem: &P, settings: RunSettings) -> Result<RunResult> {
    let backend = SerialBackend::new(
        problem,
        settings.initial.clone(),
        settings.seed,
        settings.solver,
    );
    Engine::new(problem, settings, backend)?.run_to_completion()
}

/// Continue a serialized chain for additional iterations. Metric rows are
/// emitted for the continued range only; they match the corresponding rows
/// of an uninterrupted run bit for bit.
pub fn resume<P: BarycenterProblem>(
    problem: &P,
    settings: RunSettings,
    record: &ChainRecord,
) -> Result<RunResult> {
    let chain = PushforwardChain::from_record(record)?;
    let backend = SerialBackend::resume(problem, chain, settings.seed, settings.solver);
    let mut engine = Engine::new(problem, settings, backend)?;
    engine.radii = record.radii.clone();
    engine.run_to_completion_from_resume()
}

impl<'p, P: BarycenterProblem, B: ChainBackend> Engine<'p, P, B> {
    fn run_to_completion_from_resume(mut self) -> Result<RunResult> {
        let remaining = self.settings.iterations.saturating_sub(self.t);
        for _ in 0..remaining {
            self.step()?;
        }
        self.finalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Gaussian;

    fn standard_base(d: usize) -> Measure {
        Measure::Gaussian(Gaussian::standard(d))
    }

    fn small_schedule() -> Schedule {
        Schedule { n0: 120, n_growth: 1.5, n_max: 400, probe_size: 2000, ..Schedule::default() }
    }

    fn two_gaussian_problem() -> MeasureProblem {
        let a = Measure::truncated(
            Measure::Gaussian(Gaussian::new(vec![2.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()),
            vec![2.0, 0.0],
            6.0,
        )
        .unwrap();
        let b = Measure::truncated(
            Measure::Gaussian(Gaussian::new(vec![-2.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()),
            vec![-2.0, 0.0],
            6.0,
        )
        .unwrap();
        MeasureProblem::new(vec![a, b], vec![0.5, 0.5], None).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = Schedule { n0: 1000, n_growth: 2.0, n_max: 5000, ..Schedule::default() };
        assert_eq!(sample_size_schedule(0, &s, 2), 1000);
        assert_eq!(sample_size_schedule(3, &s, 2), 5000); // cap binds at 8000
        let tiny = Schedule { n0: 11, n_growth: 1.0, n_max: 20, ..Schedule::default() };
        // n0 = d is below d+1 -> clamped up to d+1 = 11
        assert_eq!(sample_size_schedule(0, &tiny, 10), 11);
    }

    #[test]
    fn schedule_validation() {
        let mut s = Schedule::default();
        s.n0 = 2;
        assert!(s.validate(2).is_err());
        let mut s = Schedule::default();
        s.tail_mass_c0 = 0.7;
        assert!(s.validate(2).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(check_weights(&[1.0]).is_ok());
        assert!(check_weights(&[0.5, 0.5]).is_ok());
        assert!(check_weights(&[1.0, 0.0]).is_err());
        assert!(check_weights(&[0.6, 0.5]).is_err());
    }

    #[test]
    fn truncation_radius_gaussian_matches_chi_square_quantile() {
        // d = 2 standard Gaussian: P(||x|| > r) = exp(-r^2/2); at delta = 0.01
        // the exact quantile is 3.035, so the 1.25-grid picks 1.25^5 = 3.0518
        let base = standard_base(2);
        let chain = PushforwardChain::new(base.clone());
        let family = BallFamily::default_for_dimension(2);
        let schedule = Schedule { probe_size: 20_000, tail_mass_c0: 0.01, ..Schedule::default() };
        let mut stream = RngStream::from_seed(31).child(1);
        let r =
            truncation_radius(&base, &chain, &family, &schedule, 0, None, &mut stream).unwrap();
        let exact = (-2.0 * 0.01f64.ln()).sqrt();
        assert!((exact - 3.035).abs() < 1e-3);
        // selected grid radius is the smallest grid point >= a radius close
        // to the exact quantile: one grid step of slack in either direction
        assert!(r >= exact / 1.25 && r <= exact * 1.25, "radius {r}");
        assert!((r - 1.25f64.powi(5)).abs() < 1e-12, "expected the 3.0518 grid point, got {r}");
    }

    #[test]
    fn truncation_radius_all_probes_inside_smallest() {
        let base = Measure::truncated(standard_base(2), vec![0.0, 0.0], 0.5).unwrap();
        let chain = PushforwardChain::new(base.clone());
        let family = BallFamily::default_for_dimension(2);
        let schedule = Schedule { probe_size: 500, ..Schedule::default() };
        let mut stream = RngStream::from_seed(32).child(1);
        let r =
            truncation_radius(&base, &chain, &family, &schedule, 0, None, &mut stream).unwrap();
        assert_eq!(r, family.radii()[0]);
    }

    #[test]
    fn truncation_radius_tiny_delta_covers_all_probes() {
        let base = standard_base(2);
        let chain = PushforwardChain::new(base.clone());
        let family = BallFamily::default_for_dimension(2);
        // delta below 1/probe_size: only a zero empirical tail qualifies
        let schedule = Schedule {
            probe_size: 1000,
            tail_mass_c0: 1e-9,
            ..Schedule::default()
        };
        let mut stream = RngStream::from_seed(33).child(1);
        let r =
            truncation_radius(&base, &chain, &family, &schedule, 0, None, &mut stream).unwrap();
        // r must be the smallest grid radius containing every probe
        let mut probe_stream = RngStream::from_seed(33).child(1);
        let probes = sample(&base, 1000, &mut probe_stream).unwrap();
        let max_norm = (0..1000).map(|i| norm(probes.row(i))).fold(0.0, f64::max);
        assert!(r >= max_norm);
        assert!(r / 1.25 < max_norm, "not the smallest covering grid point");
    }

    #[test]
    fn truncation_radius_monotone_clamp() {
        let base = standard_base(2);
        let chain = PushforwardChain::new(base.clone());
        let family = BallFamily::default_for_dimension(2);
        let schedule = Schedule::default();
        let mut stream = RngStream::from_seed(34).child(1);
        let r = truncation_radius(&base, &chain, &family, &schedule, 0, Some(50.0), &mut stream)
            .unwrap();
        assert_eq!(r, 50.0);
    }

    #[test]
    fn rejection_zero_layers_all_inside_and_rate_matches_ball_probability() {
        let base = standard_base(2);
        let chain = PushforwardChain::new(base.clone());
        let mut stream = RngStream::from_seed(35).child(1);
        let r = 1.5;
        let (batch, rate) = rejection_sample(&base, &chain, r, 4000, &mut stream, 10.0).unwrap();
        for i in 0..batch.len() {
            assert!(norm(batch.row(i)) <= r);
        }
        // P(||x|| <= 1.5) = 1 - exp(-1.125) = 0.6753 for the 2-d standard Gaussian
        let p = 1.0 - (-0.5f64 * r * r).exp();
        assert!((rate - p).abs() < 0.03, "rate {rate} vs {p}");
    }

    #[test]
    fn rejection_huge_radius_matches_base_distribution() {
        let base = standard_base(2);
        let chain = PushforwardChain::new(base.clone());
        let mut stream = RngStream::from_seed(36).child(1);
        let (batch, rate) = rejection_sample(&base, &chain, 1e6, 3000, &mut stream, 10.0).unwrap();
        assert_eq!(rate, 1.0);
        // chi-square GOF on radial bins against the exact radial law
        let edges = [0.5f64, 0.9, 1.2, 1.5, 1.9, 2.4];
        let cdf = |r: f64| 1.0 - (-0.5 * r * r).exp();
        let mut counts = vec![0usize; edges.len() + 1];
        for i in 0..batch.len() {
            let r = norm(batch.row(i));
            let bin = edges.partition_point(|&e| e < r);
            counts[bin] += 1;
        }
        let mut stat = 0.0;
        let mut prev_cdf = 0.0;
        for (b, &count) in counts.iter().enumerate() {
            let hi = if b < edges.len() { cdf(edges[b]) } else { 1.0 };
            let expect = (hi - prev_cdf) * batch.len() as f64;
            stat += (count as f64 - expect).powi(2) / expect;
            prev_cdf = hi;
        }
        // df = 6, alpha = 0.01 -> critical value 16.81
        assert!(stat < 16.81, "chi-square stat {stat}");
    }

    #[test]
    fn rejection_budget_error_names_radius() {
        let base = standard_base(2);
        let chain = PushforwardChain::new(base.clone());
        let mut stream = RngStream::from_seed(37).child(1);
        // radius so small that acceptance is ~1e-5: budget must trip
        let err = rejection_sample(&base, &chain, 0.006, 50, &mut stream, 2.0).unwrap_err();
        match err {
            Error::RejectionBudget { radius, .. } => assert_eq!(radius, 0.006),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn layer_map_weighted_identity() {
        // layer evaluation = sum_k w_k map_eval to machine precision
        let problem = two_gaussian_problem();
        let settings = RunSettings::new(standard_base(2), small_schedule(), 1, 200, 91);
        let backend =
            SerialBackend::new(&problem, settings.initial.clone(), settings.seed, settings.solver);
        let mut engine = Engine::new(&problem, settings, backend).unwrap();
        engine.step().unwrap();
        let chain = engine.backend().chain();
        let layer = &chain.layers()[0];
        let x = [0.3, -0.8];
        let combined = layer.eval(&x);
        let manual: Vec<f64> = {
            let imgs: Vec<Vec<f64>> = layer.maps().iter().map(|m| m.eval(&x)).collect();
            (0..2)
                .map(|i| {
                    layer
                        .weights()
                        .iter()
                        .zip(&imgs)
                        .map(|(w, img)| w * img[i])
                        .sum()
                })
                .collect()
        };
        assert_eq!(combined, manual);
    }

    #[test]
    fn identity_like_layer_keeps_acceptance() {
        // self-transport maps: chain with one such layer accepts nearly as
        // often as the bare base at the same radius
        let base = standard_base(2);
        let radius = 3.05;
        let plain = PushforwardChain::new(base.clone());
        let mut s1 = RngStream::from_seed(40).child(1);
        let (_, rate_plain) = rejection_sample(&base, &plain, radius, 3000, &mut s1, 10.0).unwrap();

        // build a self-transport layer from truncated standard Gaussian
        let tr = Measure::truncated(base.clone(), vec![0.0, 0.0], 4.0).unwrap();
        let mut bs = RngStream::from_seed(41).child(1);
        let x = sample(&tr, 400, &mut bs).unwrap();
        let y = sample(&tr, 400, &mut bs).unwrap();
        let map = crate::entropic_map::build_entropic_map(
            &x,
            &y,
            0.05,
            4.0,
            4.0,
            crate::entropic_map::EntropicMapConfig::default(),
        )
        .unwrap();
        let mut chain = PushforwardChain::new(base.clone());
        chain.push_layer(LayerMap::new(0, vec![1.0], vec![map]).unwrap());
        let mut s2 = RngStream::from_seed(40).child(1);
        let (_, rate_layer) = rejection_sample(&base, &chain, radius, 3000, &mut s2, 10.0).unwrap();
        assert!(
            (rate_plain - rate_layer).abs() < 0.05,
            "acceptance moved from {rate_plain} to {rate_layer}"
        );
    }

    #[test]
    fn run_is_deterministic_and_radii_monotone() {
        let problem = two_gaussian_problem();
        let make_settings = || RunSettings {
            record_wall_time: false,
            ..RunSettings::new(standard_base(2), small_schedule(), 2, 200, 123)
        };
        let r1 = run(&problem, make_settings()).unwrap();
        let r2 = run(&problem, make_settings()).unwrap();
        let csv1 = crate::manifest::trajectory_csv(&r1.rows, false);
        let csv2 = crate::manifest::trajectory_csv(&r2.rows, false);
        assert_eq!(csv1, csv2);
        assert_eq!(r1.chain, r2.chain);
        for w in r1.chain.radii.windows(2) {
            assert!(w[1] >= w[0], "radius decreased: {:?}", r1.chain.radii);
        }
        assert_eq!(r1.rows.len(), 3); // rows for t = 0, 1, 2
    }

    #[test]
    fn single_input_converges_to_that_input() {
        // K = 1: the barycenter is the input itself
        let nu = Measure::truncated(
            Measure::Gaussian(Gaussian::new(vec![1.5, -0.5], vec![vec![0.8, 0.0], vec![0.0, 1.2]]).unwrap()),
            vec![1.5, -0.5],
            5.0,
        )
        .unwrap();
        let problem = MeasureProblem::new(vec![nu.clone()], vec![1.0], Some(nu.clone())).unwrap();
        let schedule = Schedule { n0: 400, n_growth: 1.5, n_max: 800, ..Schedule::default() };
        let settings = RunSettings::new(standard_base(2), schedule, 2, 1000, 2718);
        let result = run(&problem, settings).unwrap();
        let last = result.rows.last().unwrap();

        // two-sample baseline: W2 between two independent samples of nu itself
        let mut sa = RngStream::from_seed(555).child(1);
        let mut sb = RngStream::from_seed(556).child(1);
        let a = sample(&nu, 1000, &mut sa).unwrap();
        let b = sample(&nu, 1000, &mut sb).unwrap();
        let baseline = eval::empirical_w2(&a, &b).unwrap();
        assert!(
            last.w2_to_ref <= 1.5 * baseline,
            "W2 to input {} vs baseline {baseline}",
            last.w2_to_ref
        );
    }

    #[test]
    fn resume_reproduces_continuation() {
        let problem = two_gaussian_problem();
        let mk = |iters: usize| RunSettings {
            record_wall_time: false,
            ..RunSettings::new(standard_base(2), small_schedule(), iters, 150, 77)
        };
        let full = run(&problem, mk(2)).unwrap();
        let short = run(&problem, mk(1)).unwrap();
        let resumed = resume(&problem, mk(2), &short.chain).unwrap();
        // resumed rows cover t = 1, 2 and must equal the full run's tail
        assert_eq!(resumed.rows.len(), 2);
        for (a, b) in resumed.rows.iter().zip(&full.rows[1..]) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.v_hat.to_bits(), b.v_hat.to_bits());
            assert_eq!(a.radius.to_bits(), b.radius.to_bits());
            assert_eq!(a.accept_rate.to_bits(), b.accept_rate.to_bits());
        }
        assert_eq!(resumed.chain, full.chain);
    }

    #[test]
    fn pushforward_cost_grows_mildly_with_depth() {
        // per-sample cost should grow about linearly in layer count; assert
        // the 3-layer chain costs < 3x the 1-layer chain per sample
        let base = standard_base(2);
        let tr = Measure::truncated(base.clone(), vec![0.0, 0.0], 4.0).unwrap();
        let mut bs = RngStream::from_seed(50).child(1);
        let x = sample(&tr, 300, &mut bs).unwrap();
        let y = sample(&tr, 300, &mut bs).unwrap();
        let map = crate::entropic_map::build_entropic_map(
            &x,
            &y,
            0.1,
            4.0,
            4.0,
            crate::entropic_map::EntropicMapConfig::default(),
        )
        .unwrap();
        let layer = LayerMap::new(0, vec![1.0], vec![map]).unwrap();

        let mut one = PushforwardChain::new(base.clone());
        one.push_layer(layer.clone());
        let mut three = PushforwardChain::new(base.clone());
        for _ in 0..3 {
            three.push_layer(layer.clone());
        }

        let mut s = RngStream::from_seed(51).child(1);
        let pts = sample(&base, 20_000, &mut s).unwrap();
        // warm up thread pool
        let _ = one.push_through(pts.points.clone()).unwrap();
        let t0 = Instant::now();
        let _ = one.push_through(pts.points.clone()).unwrap();
        let d1 = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let _ = three.push_through(pts.points.clone()).unwrap();
        let d3 = t1.elapsed().as_secs_f64();
        assert!(d3 / d1 < 3.0, "depth-3 / depth-1 cost ratio {}", d3 / d1);
    }
}
