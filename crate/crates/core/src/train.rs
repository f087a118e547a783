//! Training loop: batch sampling, sentence-level timestep assignment,
//! forward noising, loss assembly, Adam optimization, and divergence
//! handling.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ParallelCorpus, Vocabulary, PAD_ID};
use crate::diffusion::{LossBreakdown, TrainingBatch};
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::schedule::{NoiseSchedule, Rounding, TimestepPlan};

/// Learning-rate schedule kind after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScheduleKind {
    Constant,
    Cosine,
}

impl std::str::FromStr for LrScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrScheduleKind::Constant),
            "cosine" => Ok(LrScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown lr schedule {other}"))),
        }
    }
}

/// Which timestep plan the trainer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanChoice {
    /// Position-dependent timesteps through the anchor point.
    Anchored,
    /// Uniform baseline: all positions share the sentence-level timestep.
    Uniform,
}

impl std::str::FromStr for PlanChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchored" => Ok(PlanChoice::Anchored),
            "uniform" => Ok(PlanChoice::Uniform),
            other => Err(Error::Config(format!("unknown plan kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_schedule: LrScheduleKind,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub grad_accum: usize,
    pub seed: u64,
    /// Diffusion steps T.
    pub total_steps: usize,
    /// Fixed target length N (latent length).
    pub max_tgt_len: usize,
    pub plan: PlanChoice,
    /// Anchor position n_e; defaults to 2N when absent.
    pub anchor_pos: Option<f64>,
    /// Anchor timestep t_e; defaults to T when absent.
    pub anchor_t: Option<f64>,
    pub rounding: Rounding,
    /// Square-root schedule offset.
    pub schedule_offset: f64,
    /// Emit a step record every this many optimizer steps.
    pub log_every: usize,
    /// Parameter snapshot interval for divergence recovery.
    pub snapshot_every: usize,
    /// Record wall-clock time in step records. Disable for byte-identical
    /// logs across runs.
    pub log_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            lr_schedule: LrScheduleKind::Cosine,
            warmup_steps: 200,
            batch_size: 64,
            max_steps: 5000,
            grad_accum: 1,
            seed: 1,
            total_steps: 100,
            max_tgt_len: 8,
            plan: PlanChoice::Anchored,
            anchor_pos: None,
            anchor_t: None,
            rounding: Rounding::Nearest,
            schedule_offset: crate::schedule::DEFAULT_SQRT_OFFSET,
            log_every: 10,
            snapshot_every: 200,
            log_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.grad_accum == 0 {
            return Err(Error::Config(
                "batch_size, max_steps, grad_accum must be positive".into(),
            ));
        }
        if self.total_steps == 0 || self.max_tgt_len == 0 {
            return Err(Error::Config(
                "total_steps and max_tgt_len must be positive".into(),
            ));
        }
        if self.log_every == 0 || self.snapshot_every == 0 {
            return Err(Error::Config(
                "log_every and snapshot_every must be positive".into(),
            ));
        }
        self.timestep_plan()?;
        Ok(())
    }

    /// The timestep plan this configuration trains with.
    pub fn timestep_plan(&self) -> Result<TimestepPlan> {
        match self.plan {
            PlanChoice::Uniform => TimestepPlan::uniform(self.max_tgt_len, self.total_steps),
            PlanChoice::Anchored => TimestepPlan::anchored(
                self.max_tgt_len,
                self.total_steps,
                self.anchor_pos
                    .unwrap_or(2.0 * self.max_tgt_len as f64),
                self.anchor_t.unwrap_or(self.total_steps as f64),
                self.rounding,
            ),
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::sqrt(self.total_steps, self.schedule_offset)
    }
}

/// Linear warmup to the peak over `warmup_steps`, then constant or cosine
/// decay to zero at `max_steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    match cfg.lr_schedule {
        LrScheduleKind::Constant => cfg.lr,
        LrScheduleKind::Cosine => {
            let span = cfg.max_steps.saturating_sub(cfg.warmup_steps).max(1);
            let progress =
                ((step.saturating_sub(cfg.warmup_steps)) as f64 / span as f64).min(1.0);
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Corpus encoded to fixed-length id sequences.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    pub src_len: usize,
    pub tgt_len: usize,
}

impl EncodedCorpus {
    pub fn new(
        corpus: &ParallelCorpus,
        vocab: &Vocabulary,
        src_len: usize,
        tgt_len: usize,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        let mut src = Vec::with_capacity(corpus.len());
        let mut tgt = Vec::with_capacity(corpus.len());
        for (s, t) in &corpus.pairs {
            src.push(vocab.encode_padded(s, src_len)?);
            tgt.push(vocab.encode_padded(t, tgt_len)?);
        }
        Ok(EncodedCorpus {
            src,
            tgt,
            src_len,
            tgt_len,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// Draw a batch with replacement; one sentence-level timestep and one
/// standard-normal forward-noise matrix per example.
pub fn sample_batch(
    corpus: &EncodedCorpus,
    batch_size: usize,
    plan: &TimestepPlan,
    embed_dim: usize,
    rng: &mut ChaCha8Rng,
) -> TrainingBatch {
    let max_t = plan.max_sentence_t();
    let mut src_ids = Vec::with_capacity(batch_size);
    let mut tgt_ids = Vec::with_capacity(batch_size);
    let mut sentence_t = Vec::with_capacity(batch_size);
    let mut noise = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let idx = rng.gen_range(0..corpus.len());
        src_ids.push(corpus.src[idx].clone());
        tgt_ids.push(corpus.tgt[idx].clone());
        sentence_t.push(rng.gen_range(0..=max_t));
        noise.push(Array2::from_shape_fn(
            (corpus.tgt_len, embed_dim),
            |_| rng.sample::<f64, _>(StandardNormal),
        ));
    }
    TrainingBatch {
        src_ids,
        tgt_ids,
        sentence_t,
        noise,
    }
}

/// A batch with everything the loss graph needs, noise already materialized.
#[derive(Debug, Clone)]
pub struct NoisedBatch {
    pub src: Vec<Vec<usize>>,
    /// Flattened (B*N) target ids.
    pub tgt_flat: Vec<usize>,
    pub token_steps: Vec<Vec<usize>>,
    /// Embedding-step noise, (B*N, d).
    pub eps0: Array2<f64>,
    /// Forward-process noise, (B*N, d).
    pub eps: Array2<f64>,
    /// Loss mask over flattened positions; padded targets are dropped.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub tgt_len: usize,
}

/// Assign token-level timesteps and draw the embedding-step noise.
pub fn prepare_batch(
    batch: &TrainingBatch,
    plan: &TimestepPlan,
    embed_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NoisedBatch> {
    let b = batch.src_ids.len();
    let n = plan.target_len();
    let mut tgt_flat = Vec::with_capacity(b * n);
    let mut token_steps = Vec::with_capacity(b);
    let mut mask = Vec::with_capacity(b * n);
    let mut eps = Array2::<f64>::zeros((b * n, embed_dim));
    for (bi, tgt) in batch.tgt_ids.iter().enumerate() {
        if tgt.len() != n {
            return Err(Error::Shape(format!(
                "target length {} != plan length {n}",
                tgt.len()
            )));
        }
        token_steps.push(plan.token_steps(batch.sentence_t[bi] as f64)?);
        for (ni, &id) in tgt.iter().enumerate() {
            tgt_flat.push(id);
            mask.push(id != PAD_ID);
            for c in 0..embed_dim {
                eps[[bi * n + ni, c]] = batch.noise[bi][[ni, c]];
            }
        }
    }
    let eps0 = Array2::from_shape_fn((b * n, embed_dim), |_| {
        rng.sample::<f64, _>(StandardNormal)
    });
    Ok(NoisedBatch {
        src: batch.src_ids.clone(),
        tgt_flat,
        token_steps,
        eps0,
        eps,
        mask,
        batch: b,
        tgt_len: n,
    })
}

struct GraphOut {
    total: crate::autograd::Var,
    breakdown: LossBreakdown,
    tape: crate::autograd::Tape,
    n_slots: usize,
}

/// Assemble the full training-loss graph: embed targets, forward-noise them
/// at per-position timesteps, denoise, and combine the latent squared error
/// with the rounding NLL (both averaged per unpadded token).
fn build_loss_graph(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    noised: &NoisedBatch,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<GraphOut> {
    let d = model.config().embed_dim;
    let (b, n) = (noised.batch, noised.tgt_len);
    let active = noised.mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::InvalidArgument("batch mask is all padding".into()));
    }
    let mut tape = crate::autograd::Tape::new();
    let leaves = model.leaves(&mut tape);
    let (enc, src_mask) = model.encode(
        &mut tape,
        &leaves,
        &noised.src,
        dropout_rng.as_deref_mut(),
    )?;

    // z0 = Emb(y) + sqrt(1 - alpha0) * eps0
    let emb = model.leaf(&leaves, "emb");
    let gathered = tape.gather(emb, &noised.tgt_flat);
    let emb_noise = tape.constant((&noised.eps0 * (1.0 - schedule.alpha0()).sqrt()).into_dyn());
    let z0 = tape.add(gathered, emb_noise);

    // z_t = sqrt(abar) * z0 + sqrt(1 - abar) * eps, per position.
    let mut signal = Array2::<f64>::zeros((b * n, d));
    let mut noise_term = Array2::<f64>::zeros((b * n, d));
    for bi in 0..b {
        for ni in 0..n {
            let abar = schedule.alpha_bar(noised.token_steps[bi][ni]);
            let (s, q) = (abar.sqrt(), (1.0 - abar).sqrt());
            for c in 0..d {
                signal[[bi * n + ni, c]] = s;
                noise_term[[bi * n + ni, c]] = q * noised.eps[[bi * n + ni, c]];
            }
        }
    }
    let signal = tape.constant(signal.into_dyn());
    let noise_term = tape.constant(noise_term.into_dyn());
    let scaled = tape.mul(z0, signal);
    let z_t = tape.add(scaled, noise_term);
    let z_t = tape.reshape(z_t, &[b, n, d]);

    let z0_hat = model.decode(
        &mut tape,
        &leaves,
        z_t,
        &noised.token_steps,
        enc,
        &src_mask,
        dropout_rng,
    )?;

    // Per-token-averaged squared error.
    let z0_3d = tape.reshape(z0, &[b, n, d]);
    let neg_z0 = tape.scale(z0_3d, -1.0);
    let delta = tape.add(z0_hat, neg_z0);
    let sq = tape.mul(delta, delta);
    let mut w = ArrayD::<f64>::zeros(IxDyn(&[b, n, d]));
    for bi in 0..b {
        for ni in 0..n {
            if noised.mask[bi * n + ni] {
                for c in 0..d {
                    w[[bi, ni, c]] = 1.0 / active as f64;
                }
            }
        }
    }
    let mse = tape.weighted_sum(sq, w);

    // Rounding NLL on the sampled z0 through the tied embedding.
    let logits = model.round_logits_var(&mut tape, &leaves, z0);
    let row_weights: Vec<f64> = noised
        .mask
        .iter()
        .map(|&m| if m { 1.0 / active as f64 } else { 0.0 })
        .collect();
    let nll = tape.cross_entropy(logits, &noised.tgt_flat, &row_weights);

    let total = tape.add(mse, nll);
    let breakdown = LossBreakdown {
        total: tape.scalar(total),
        mse: tape.scalar(mse),
        nll: tape.scalar(nll),
    };
    let n_slots = leaves.n_slots();
    Ok(GraphOut {
        total,
        breakdown,
        tape,
        n_slots,
    })
}

/// Loss value only (no gradient, no dropout).
pub fn batch_loss_value(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    noised: &NoisedBatch,
) -> Result<LossBreakdown> {
    Ok(build_loss_graph(model, schedule, noised, None)?.breakdown)
}

/// Loss plus the flat gradient of the total w.r.t. every parameter.
pub fn batch_loss_and_grad(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    noised: &NoisedBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let out = build_loss_graph(model, schedule, noised, dropout_rng)?;
    if !out.breakdown.total.is_finite() {
        return Err(Error::Numeric("non-finite training loss".into()));
    }
    let grads = out.tape.backward(out.total, out.n_slots)?;
    let flat = model.params().flatten_grads(&grads)?;
    Ok((out.breakdown, flat))
}

/// Adam with zero weight decay.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One optimizer-step record; serialized as a JSONL metrics line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub nll: f64,
    pub lr: f64,
    pub elapsed_ms: u64,
}

/// Caller decision after each observed step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainSignal {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub final_loss: f64,
    pub initial_loss: f64,
    pub diverged: bool,
}

/// Loss threshold treated as divergence.
const DIVERGENCE_CEILING: f64 = 1e4;

/// Run the training loop. The observer sees every `log_every`-th step record
/// (plus the final one) and may stop training early; on divergence the model
/// is restored to the last snapshot and the summary says so.
pub fn train_loop(
    cfg: &TrainConfig,
    corpus: &EncodedCorpus,
    model: &mut Denoiser,
    mut observer: impl FnMut(&StepRecord, &Denoiser) -> Result<TrainSignal>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    if corpus.tgt_len != cfg.max_tgt_len {
        return Err(Error::Shape(format!(
            "corpus target length {} != configured {}",
            corpus.tgt_len, cfg.max_tgt_len
        )));
    }
    let plan = cfg.timestep_plan()?;
    let schedule = cfg.noise_schedule()?;
    let d = model.config().embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(model.param_count());
    let mut snapshot = model.params().flat().to_vec();
    let mut initial_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    let started = std::time::Instant::now();

    for step in 0..cfg.max_steps {
        let lr = lr_schedule(step, cfg);
        let mut grad_sum = vec![0.0; model.param_count()];
        let mut loss_sum = LossBreakdown {
            total: 0.0,
            mse: 0.0,
            nll: 0.0,
        };
        for _ in 0..cfg.grad_accum {
            let batch = sample_batch(corpus, cfg.batch_size, &plan, d, &mut rng);
            let noised = prepare_batch(&batch, &plan, d, &mut rng)?;
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen::<u64>());
            let (loss, grad) =
                batch_loss_and_grad(model, &schedule, &noised, Some(&mut dropout_rng))?;
            for (a, g) in grad_sum.iter_mut().zip(grad.iter()) {
                *a += g / cfg.grad_accum as f64;
            }
            loss_sum.total += loss.total / cfg.grad_accum as f64;
            loss_sum.mse += loss.mse / cfg.grad_accum as f64;
            loss_sum.nll += loss.nll / cfg.grad_accum as f64;
        }

        if !loss_sum.total.is_finite() || loss_sum.total > DIVERGENCE_CEILING {
            model.params_mut().set_flat(&snapshot)?;
            return Ok(TrainSummary {
                steps_run: step,
                final_loss: last_loss,
                initial_loss,
                diverged: true,
            });
        }
        if step == 0 {
            initial_loss = loss_sum.total;
        }
        last_loss = loss_sum.total;

        opt.step(model.params_mut().flat_mut(), &grad_sum, lr);

        if (step + 1) % cfg.snapshot_every == 0 {
            snapshot = model.params().flat().to_vec();
        }
        if step % cfg.log_every == 0 || step + 1 == cfg.max_steps {
            let record = StepRecord {
                step,
                loss: loss_sum.total,
                mse: loss_sum.mse,
                nll: loss_sum.nll,
                lr,
                elapsed_ms: if cfg.log_timing {
                    started.elapsed().as_millis() as u64
                } else {
                    0
                },
            };
            if observer(&record, model)? == TrainSignal::Stop {
                return Ok(TrainSummary {
                    steps_run: step + 1,
                    final_loss: last_loss,
                    initial_loss,
                    diverged: false,
                });
            }
        }
    }
    Ok(TrainSummary {
        steps_run: cfg.max_steps,
        final_loss: last_loss,
        initial_loss,
        diverged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_task, TaskKind};
    use crate::model::ModelConfig;

    fn tiny_setup() -> (TrainConfig, EncodedCorpus, Denoiser) {
        let cfg = TrainConfig {
            lr: 1e-3,
            warmup_steps: 2,
            batch_size: 4,
            max_steps: 6,
            total_steps: 20,
            max_tgt_len: 6,
            log_every: 1,
            ..TrainConfig::default()
        };
        let corpus = synth_task(TaskKind::Copy, 12, 6, 16, 7).unwrap();
        let vocab = Vocabulary::from_corpus(&corpus);
        let model_cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            max_src_len: 8,
            max_tgt_len: 6,
            dropout: 0.1,
        };
        let encoded = EncodedCorpus::new(&corpus, &vocab, 8, 6).unwrap();
        let model = Denoiser::new(model_cfg, 3).unwrap();
        (cfg, encoded, model)
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig {
            lr: 2e-3,
            warmup_steps: 100,
            max_steps: 1000,
            lr_schedule: LrScheduleKind::Cosine,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(100, &cfg), 2e-3);
        assert!(lr_schedule(1000, &cfg).abs() < 1e-18);
        assert!(lr_schedule(50, &cfg) > 0.0 && lr_schedule(50, &cfg) < 2e-3);
        let constant = TrainConfig {
            lr_schedule: LrScheduleKind::Constant,
            ..cfg
        };
        assert_eq!(lr_schedule(500, &constant), constant.lr);
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let (mut cfg, corpus, mut model) = tiny_setup();
        cfg.lr = 0.0;
        let before = model.params().flat().to_vec();
        train_loop(&cfg, &corpus, &mut model, |_, _| Ok(TrainSignal::Continue)).unwrap();
        assert_eq!(before, model.params().flat());
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let (cfg, corpus, model) = tiny_setup();
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut m = model.clone();
            let mut losses = Vec::new();
            train_loop(&cfg, &corpus, &mut m, |rec, _| {
                losses.push((rec.loss, rec.mse, rec.nll));
                Ok(TrainSignal::Continue)
            })
            .unwrap();
            runs.push((losses, m.params().flat().to_vec()));
        }
        assert_eq!(runs[0].0, runs[1].0);
        assert_eq!(runs[0].1, runs[1].1);
    }

    #[test]
    fn loss_decreases_on_tiny_run() {
        let (mut cfg, corpus, mut model) = tiny_setup();
        cfg.max_steps = 60;
        cfg.warmup_steps = 10;
        cfg.lr = 3e-3;
        cfg.lr_schedule = LrScheduleKind::Constant;
        let summary =
            train_loop(&cfg, &corpus, &mut model, |_, _| Ok(TrainSignal::Continue)).unwrap();
        assert!(!summary.diverged);
        assert!(
            summary.final_loss < summary.initial_loss,
            "{} !< {}",
            summary.final_loss,
            summary.initial_loss
        );
    }

    #[test]
    fn observer_can_stop_early() {
        let (cfg, corpus, mut model) = tiny_setup();
        let summary = train_loop(&cfg, &corpus, &mut model, |rec, _| {
            Ok(if rec.step >= 2 {
                TrainSignal::Stop
            } else {
                TrainSignal::Continue
            })
        })
        .unwrap();
        assert_eq!(summary.steps_run, 3);
    }

    #[test]
    fn uniform_plan_gives_equal_token_steps() {
        let plan = TimestepPlan::uniform(6, 20).unwrap();
        let corpus = synth_task(TaskKind::Copy, 12, 6, 16, 7).unwrap();
        let vocab = Vocabulary::from_corpus(&corpus);
        let encoded = EncodedCorpus::new(&corpus, &vocab, 8, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_batch(&encoded, 8, &plan, 4, &mut rng);
        let noised = prepare_batch(&batch, &plan, 4, &mut rng).unwrap();
        for row in &noised.token_steps {
            assert!(row.iter().all(|&s| s == row[0]));
        }
    }

    #[test]
    fn anchored_plan_token_steps_non_decreasing() {
        let plan = TimestepPlan::default_anchored(6, 20).unwrap();
        let corpus = synth_task(TaskKind::Copy, 12, 6, 16, 7).unwrap();
        let vocab = Vocabulary::from_corpus(&corpus);
        let encoded = EncodedCorpus::new(&corpus, &vocab, 8, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&encoded, 16, &plan, 4, &mut rng);
        let noised = prepare_batch(&batch, &plan, 4, &mut rng).unwrap();
        for row in &noised.token_steps {
            for w in row.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn timestep_coverage_is_uniform() {
        // Chi-square goodness of fit over the sentence-level timestep domain.
        let plan = TimestepPlan::default_anchored(8, 100).unwrap();
        let corpus = synth_task(TaskKind::Copy, 12, 8, 16, 7).unwrap();
        let vocab = Vocabulary::from_corpus(&corpus);
        let encoded = EncodedCorpus::new(&corpus, &vocab, 10, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = vec![0usize; plan.max_sentence_t() + 1];
        let mut total = 0usize;
        for _ in 0..200 {
            let batch = sample_batch(&encoded, 64, &plan, 1, &mut rng);
            for &t in &batch.sentence_t {
                counts[t] += 1;
                total += 1;
            }
        }
        assert!(total >= 10_000);
        let expected = total as f64 / counts.len() as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let dist = statrs::distribution::ChiSquared::new((counts.len() - 1) as f64).unwrap();
        use statrs::distribution::ContinuousCDF;
        let p = 1.0 - dist.cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2}, p {p}");
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut adam = Adam::new(3);
        let mut params = vec![1.0, -2.0, 0.5];
        let before = params.clone();
        adam.step(&mut params, &[0.0, 0.0, 0.0], 1e-3);
        assert_eq!(params, before);
    }
}
