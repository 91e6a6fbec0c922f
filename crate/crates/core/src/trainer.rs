//! The training loop: accumulation windows of mix / consistency sub-steps, the
//! window-level latent regularizer, Adam on a cosine schedule, and periodic
//! latent sampling that grows the concept pool.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::model::{
    consistency_forward, mix_forward, reg_loss_with_anchor, DistokModel, LatentVector, LossBreakdown, ModelConfig,
    ModelGrad, ModelTrace, TokenLoss,
};
use crate::ndmath::{adam_step, cosine_lr, AdamState, LrSchedule};
use crate::pool::{Admission, ConceptPool, DEFAULT_CAPACITY_NOVEL};
use crate::world::{ClassDistribution, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(with = "codec::lenient_real")]
    pub alpha: f64,
    #[serde(with = "codec::lenient_real")]
    pub beta: f64,
    #[serde(with = "codec::lenient_real")]
    pub gamma: f64,
    #[serde(with = "codec::lenient_real")]
    pub tau: f64,
    pub n_accumulation: usize,
    pub total_steps: usize,
    #[serde(with = "codec::lenient_real")]
    pub mix_probability: f64,
    pub sample_period: usize,
    pub samples_per_period: usize,
    #[serde(with = "codec::lenient_real")]
    pub initial_lr: f64,
    #[serde(default = "default_capacity")]
    pub capacity_novel: usize,
    pub seed: u64,
}

fn default_capacity() -> usize {
    DEFAULT_CAPACITY_NOVEL
}

impl Default for TrainConfig {
    /// The toy preset: 5,000 steps at four times the full-size initial rate,
    /// otherwise the full-size hyperparameters.
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.001,
            tau: 0.85,
            n_accumulation: 8,
            total_steps: 5000,
            mix_probability: 0.5,
            sample_period: 100,
            samples_per_period: 4,
            initial_lr: 0.002,
            capacity_novel: DEFAULT_CAPACITY_NOVEL,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self {
            total_steps: 20000,
            initial_lr: 0.0005,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if v < 0.0 {
                return Err(Error::config(format!("/{name}"), "must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("/tau", "must lie in [0, 1]"));
        }
        if self.n_accumulation < 2 {
            return Err(Error::config(
                "/n_accumulation",
                "must be at least 2 (the latent regularizer needs a batch variance)",
            ));
        }
        if !(0.0..=1.0).contains(&self.mix_probability) {
            return Err(Error::config("/mix_probability", "must lie in [0, 1]"));
        }
        if self.sample_period == 0 {
            return Err(Error::config("/sample_period", "must be positive"));
        }
        if self.samples_per_period == 0 {
            return Err(Error::config("/samples_per_period", "must be positive"));
        }
        if !self.initial_lr.is_finite() || self.initial_lr <= 0.0 {
            return Err(Error::config("/initial_lr", "must be positive and finite"));
        }
        if self.capacity_novel == 0 {
            return Err(Error::config("/capacity_novel", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Mix,
    Consistency,
}

/// Bernoulli draw for the sub-step kind, forced to `Mix` while the pool has no
/// novel entries. The draw is taken either way so the random stream does not
/// depend on the pool.
pub fn select_step_kind<R: Rng + ?Sized>(rng: &mut R, mix_probability: f64, pool: &ConceptPool) -> StepKind {
    let u: f64 = rng.random();
    if pool.novel_count() == 0 || u < mix_probability {
        StepKind::Mix
    } else {
        StepKind::Consistency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KindCounts {
    pub mix: usize,
    pub cst: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubStepRecord {
    pub kind: StepKind,
    /// The sampled pair for a mix sub-step, the novel target for consistency.
    pub concepts: Vec<usize>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub distribution: ClassDistribution,
    pub max_prob: f64,
    pub admission: AdmissionOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmissionOutcome {
    Admitted,
    NotNovel,
    PoolFull,
}

impl From<Admission> for AdmissionOutcome {
    fn from(a: Admission) -> Self {
        match a {
            Admission::Admitted { .. } => Self::Admitted,
            Admission::NotNovel => Self::NotNovel,
            Admission::PoolFull => Self::PoolFull,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub kind_counts: KindCounts,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub pool_novel_count: usize,
    pub admissions_this_step: usize,
    pub sub_steps: Vec<SubStepRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateRecord>,
}

/// Everything a run mutates. The world is borrowed and never changes.
#[derive(Debug, Clone)]
pub struct TrainState<'w> {
    pub world: &'w World,
    pub model: DistokModel,
    pub pool: ConceptPool,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    pub step: usize,
    schedule: Option<LrSchedule>,
}

impl<'w> TrainState<'w> {
    pub fn new(world: &'w World, model: DistokModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config().token_dim != world.token_dim() {
            return Err(Error::config(
                "/model/token_dim",
                format!("must equal the world token dimension {}", world.token_dim()),
            ));
        }
        let schedule = if config.total_steps > 0 {
            Some(LrSchedule::new(config.initial_lr, config.total_steps)?)
        } else {
            None
        };
        Ok(Self {
            world,
            optimizer: AdamState::new(&model),
            pool: ConceptPool::with_capacity(world, config.capacity_novel),
            model,
            config,
            step: 0,
            schedule,
        })
    }

    /// Closed-form cosine learning rate at `step`.
    pub fn learning_rate(&self, step: usize) -> Result<f64> {
        match &self.schedule {
            Some(s) => cosine_lr(s, step),
            None => Err(Error::OutOfRange("no training steps configured".into())),
        }
    }

    fn replay_bundle(&self, subs: &[SubStepRecord]) -> Box<serde_json::Value> {
        let parse = |t: Result<String>| {
            t.ok()
                .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
                .unwrap_or(serde_json::Value::Null)
        };
        Box::new(serde_json::json!({
            "step": self.step,
            "train_config": self.config,
            "model_before_step": parse(self.model.to_json()),
            "pool": parse(self.pool.to_json()),
            "sub_steps": subs,
        }))
    }

    fn diverged(&self, reason: String, subs: &[SubStepRecord]) -> Error {
        Error::Diverged {
            step: self.step,
            reason,
            replay: Some(self.replay_bundle(subs)),
        }
    }
}

struct Pending {
    kind: StepKind,
    trace: ModelTrace,
    /// Weighted `dL/dz` from this sub-step's own loss.
    grad_latent: Vec<f64>,
}

fn sub_step_forward(state: &TrainState<'_>, kind: StepKind, concepts: &[usize]) -> Result<TokenLoss> {
    let world = state.world;
    match kind {
        StepKind::Mix => {
            let a = state.pool.get(concepts[0])?;
            let b = state.pool.get(concepts[1])?;
            Ok(mix_forward(world, &state.model, &a.token, &b.token)?.0)
        }
        StepKind::Consistency => {
            let target = state.pool.get(concepts[0])?;
            consistency_forward(world, &state.model, &target.distribution, world.known_tokens(), &target.token)
        }
    }
}

/// One accumulation window and one optimizer update.
pub fn train_step<R: Rng + ?Sized>(state: &mut TrainState<'_>, rng: &mut R) -> Result<StepRecord> {
    let cfg = state.config.clone();
    let n = cfg.n_accumulation;
    let mut pending: Vec<Pending> = Vec::with_capacity(n);
    let mut subs: Vec<SubStepRecord> = Vec::with_capacity(n);
    let mut mix_grads = ModelGrad::zeros(&state.model);
    let mut cst_grads = ModelGrad::zeros(&state.model);
    let mut mix_values = Vec::new();
    let mut cst_values = Vec::new();

    for _ in 0..n {
        let kind = select_step_kind(rng, cfg.mix_probability, &state.pool);
        let (concepts, weight) = match kind {
            StepKind::Mix => {
                let (a, b) = state.pool.sample_pair(rng)?;
                (vec![a.id, b.id], cfg.alpha)
            }
            StepKind::Consistency => (vec![state.pool.sample_novel(rng)?.id], cfg.beta),
        };
        let fwd = match sub_step_forward(state, kind, &concepts) {
            Ok(f) => f,
            Err(e @ (Error::NonFinite(_) | Error::Degenerate(_))) => {
                subs.push(SubStepRecord {
                    kind,
                    concepts,
                    loss: f64::NAN,
                });
                return Err(state.diverged(e.to_string(), &subs));
            }
            Err(e) => return Err(e),
        };
        subs.push(SubStepRecord {
            kind,
            concepts,
            loss: fwd.value,
        });
        if !fwd.value.is_finite() {
            return Err(state.diverged(format!("non-finite {kind:?} loss"), &subs));
        }
        let scale = weight / n as f64;
        let (mut grad_latent, decoder) = state.model.backward_decoder(&fwd.trace, &fwd.grad_token)?;
        grad_latent.iter_mut().for_each(|g| *g *= scale);
        let acc = match kind {
            StepKind::Mix => {
                mix_values.push(fwd.value);
                &mut mix_grads
            }
            StepKind::Consistency => {
                cst_values.push(fwd.value);
                &mut cst_grads
            }
        };
        acc.decoder.add_scaled(&decoder, scale);
        pending.push(Pending {
            kind,
            trace: fwd.trace,
            grad_latent,
        });
    }

    let latents: Vec<LatentVector> = pending.iter().map(|p| p.trace.latent.clone()).collect();
    let reg = reg_loss_with_anchor(&latents, state.model.config().variance_anchor)?;
    if !reg.value.is_finite() {
        return Err(state.diverged("non-finite latent regularizer".into(), &subs));
    }
    let mut reg_grads = ModelGrad::zeros(&state.model);
    for (p, reg_grad) in pending.iter().zip(&reg.grads) {
        let encoder = state.model.backward_encoder(&p.trace, &p.grad_latent)?;
        match p.kind {
            StepKind::Mix => mix_grads.encoder.add_scaled(&encoder, 1.0),
            StepKind::Consistency => cst_grads.encoder.add_scaled(&encoder, 1.0),
        }
        let scaled: Vec<f64> = reg_grad.iter().map(|g| cfg.gamma * g).collect();
        let encoder = state.model.backward_encoder(&p.trace, &scaled)?;
        reg_grads.encoder.add_scaled(&encoder, 1.0);
    }

    let total = LossBreakdown::total_of(&mix_values, &cst_values, reg.value, n, (cfg.alpha, cfg.beta, cfg.gamma));
    if !total.is_finite() {
        return Err(state.diverged("non-finite total loss".into(), &subs));
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let loss = LossBreakdown {
        mix: mean(&mix_values),
        cst: mean(&cst_values),
        reg: reg.value,
        total,
        mix_grad_norm: mix_grads.norm(),
        cst_grad_norm: cst_grads.norm(),
        reg_grad_norm: reg_grads.norm(),
        reg_variance_floored: reg.stats.variance_floored,
    };

    let mut grads = mix_grads;
    grads.add_scaled(&cst_grads, 1.0);
    grads.add_scaled(&reg_grads, 1.0);
    let lr = state.learning_rate(state.step)?;
    if let Err(e) = adam_step(&mut state.model, &grads, &mut state.optimizer, lr) {
        return Err(state.diverged(e.to_string(), &subs));
    }

    let record = StepRecord {
        step: state.step,
        kind_counts: KindCounts {
            mix: mix_values.len(),
            cst: cst_values.len(),
        },
        loss,
        lr,
        pool_novel_count: state.pool.novel_count(),
        admissions_this_step: 0,
        sub_steps: subs,
        candidates: Vec::new(),
    };
    state.step += 1;
    Ok(record)
}

/// Decodes `samples_per_period` standard-normal latents, labels their renders
/// with the oracle, and offers each to the pool.
pub fn periodic_latent_sampling<R: Rng + ?Sized>(
    state: &mut TrainState<'_>,
    rng: &mut R,
) -> Result<Vec<CandidateRecord>> {
    let dim = state.model.config().latent_dim;
    let mut out = Vec::with_capacity(state.config.samples_per_period);
    for _ in 0..state.config.samples_per_period {
        let z: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let token = state.model.decode(&LatentVector::new(z)?)?;
        let image = state.world.render_image(&token, rng)?;
        let distribution = state.world.classify(&image)?;
        let max_prob = distribution.max_probability();
        let admission = state
            .pool
            .try_admit(token, distribution.clone(), state.config.tau, state.step)?;
        log::debug!("step {}: candidate max p {max_prob:.4} -> {admission:?}", state.step);
        out.push(CandidateRecord {
            distribution,
            max_prob,
            admission: admission.into(),
        });
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub model: DistokModel,
    pub pool: ConceptPool,
    pub log: Vec<StepRecord>,
}

/// Random streams for the sub-step draws and for latent sampling.
pub fn train_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut steps = ChaCha8Rng::seed_from_u64(seed);
    steps.set_stream(1);
    let mut sampling = ChaCha8Rng::seed_from_u64(seed);
    sampling.set_stream(2);
    (steps, sampling)
}

/// Runs `total_steps` windows. Latent sampling happens after every
/// `sample_period`-th update; its candidates are attached to that step's record.
pub fn run_training_with<F>(
    world: &World,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&StepRecord) -> Result<()>,
{
    let model = DistokModel::new(model_config.clone())?;
    let mut state = TrainState::new(world, model, config.clone())?;
    let (mut step_rng, mut sample_rng) = train_rngs(config.seed);
    let mut log = Vec::with_capacity(config.total_steps);
    for _ in 0..config.total_steps {
        let mut record = train_step(&mut state, &mut step_rng)?;
        if state.step % config.sample_period == 0 {
            let candidates = periodic_latent_sampling(&mut state, &mut sample_rng)?;
            record.admissions_this_step = candidates
                .iter()
                .filter(|c| c.admission == AdmissionOutcome::Admitted)
                .count();
            record.pool_novel_count = state.pool.novel_count();
            record.candidates = candidates;
        }
        on_step(&record)?;
        log.push(record);
    }
    Ok(TrainOutcome {
        model: state.model,
        pool: state.pool,
        log,
    })
}

pub fn run_training(world: &World, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    run_training_with(world, model_config, config, |_| Ok(()))
}

pub fn metrics_line(record: &StepRecord) -> Result<String> {
    Ok(serde_json::to_string(record)?)
}

pub fn write_metrics(path: &Path, log: &[StepRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in log {
        writeln!(w, "{}", metrics_line(r)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    codec::read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(codec::from_json_str)
        .collect()
}
