//! Step-0 training, the iterative CDL schedule and pseudo-label generation.
//!
//! Randomness is derived per (phase, step, epoch) from the config seed, so a
//! run resumed from a checkpoint replays exactly the same batches as an
//! uninterrupted one without serializing any RNG state.

mod adam;
mod batch;
mod corpus;
mod log;

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use adam::{adam_step, adam_update, AdamSettings, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use batch::{compose_batch, plan_joint_epoch, plan_labeled_epoch, Batch, LabeledPair};
pub use corpus::{LoadedCorpus, LoadedVideo};
pub use log::{read_log, LogRecord, Phase, TrainLog};

use crate::autodiff::{Mat, Tape, Var};
use crate::checkpoint;
use crate::config::{PseudoLabelMode, TrainConfig};
use crate::datamodel::{HeadId, PseudoLabelSet};
use crate::error::{Error, Result};
use crate::losses::{
    bce_loss_tape, external_loss_tape, ranking_loss_tape, surrogate_variance, surrogate_variance_of, total_loss_tape,
    ExternalVideoVars, LossBreakdown, RankTerms,
};
use crate::nethead::{gradient, HeadPair, HeadParameters, HeadVars, VideoVars};
use crate::parallel::par_map;

/// Adam moments for both heads.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub main: AdamState,
    pub aux: AdamState,
}

impl OptimizerState {
    pub fn new(heads: &HeadPair) -> Self {
        Self {
            main: AdamState::new(&heads.main),
            aux: AdamState::new(&heads.aux),
        }
    }

    pub fn get(&self, id: HeadId) -> &AdamState {
        match id {
            HeadId::Main => &self.main,
            HeadId::Aux => &self.aux,
        }
    }

    pub fn get_mut(&mut self, id: HeadId) -> &mut AdamState {
        match id {
            HeadId::Main => &mut self.main,
            HeadId::Aux => &mut self.aux,
        }
    }
}

/// The two heads' pseudo-label sets from the same generation.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub main: PseudoLabelSet,
    pub aux: PseudoLabelSet,
}

impl PseudoLabels {
    pub fn get(&self, id: HeadId) -> &PseudoLabelSet {
        match id {
            HeadId::Main => &self.main,
            HeadId::Aux => &self.aux,
        }
    }

    /// Soft targets that supervise `head` on `video_id` under `mode`.
    pub fn targets(&self, head: HeadId, mode: PseudoLabelMode, video_id: &str) -> Result<Cow<'_, [f64]>> {
        let lookup = |id: HeadId| {
            let set = self.get(id);
            debug_assert_eq!(set.head_id, id);
            set.get(video_id).ok_or_else(|| Error::MissingFeatures {
                video_id: video_id.to_string(),
                stream: format!("pseudo-labels/{id}"),
            })
        };
        Ok(match mode {
            PseudoLabelMode::SelfTraining => Cow::Borrowed(lookup(head)?),
            PseudoLabelMode::Cross => Cow::Borrowed(lookup(head.other())?),
            PseudoLabelMode::Averaged => {
                let (a, b) = (lookup(HeadId::Main)?, lookup(HeadId::Aux)?);
                Cow::Owned(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect())
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub heads: HeadPair,
    pub optimizer: OptimizerState,
    /// Present once the initial generation after step 0 has happened.
    pub pseudo_labels: Option<PseudoLabels>,
    /// Completed CDL steps.
    pub cdl_step: usize,
    /// Completed epochs inside the current step; zero at step boundaries.
    pub epoch_in_step: usize,
}

impl TrainState {
    pub fn new(config: TrainConfig, heads: HeadPair) -> Self {
        let optimizer = OptimizerState::new(&heads);
        Self {
            config,
            heads,
            optimizer,
            pseudo_labels: None,
            cdl_step: 0,
            epoch_in_step: 0,
        }
    }
}

pub type StepObserver<'a> = Box<dyn FnMut(&TrainState) -> Result<()> + 'a>;

/// Knobs that do not change the optimization itself.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where `step-NNN.ckpt` files go; nothing is written when unset.
    pub checkpoint_dir: Option<PathBuf>,
    /// Ignore the external corpus in the objective while drawing batches
    /// exactly as the joint run would.
    pub labeled_only: bool,
    pub workers: usize,
    /// Called after every completed CDL step (after pseudo-label regeneration).
    pub on_step_end: Option<StepObserver<'a>>,
}

const RNG_STEP0: u64 = 0;
const RNG_CDL: u64 = 1;

/// Generator for one (phase, step, epoch) cell of the schedule.
pub fn schedule_rng(seed: u64, phase: u64, step: u64, epoch: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"cdl-schedule");
    for v in [seed, phase, step, epoch] {
        h.update(v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Name of the feature stream a head consumes.
pub fn stream_for(cfg: &TrainConfig, head: HeadId) -> &str {
    match head {
        HeadId::Main => &cfg.main_stream,
        HeadId::Aux => &cfg.aux_stream,
    }
}

fn adam_settings(cfg: &TrainConfig) -> AdamSettings {
    AdamSettings {
        lr_encoder: cfg.lr_encoder,
        lr_fc: cfg.lr_fc,
        weight_decay: cfg.weight_decay,
    }
}

/// Mean ranking loss over pairs whose scores are laid out as
/// `[abnormal_0..abnormal_p, normal_0..normal_p, ...]`.
fn mean_rank(tape: &mut Tape, outs: &[VideoVars], pairs: usize, cfg: &TrainConfig) -> Result<(Var, RankTerms)> {
    let mut total: Option<Var> = None;
    let mut terms = RankTerms::default();
    for i in 0..pairs {
        let r = ranking_loss_tape(tape, outs[i].scores, outs[pairs + i].scores, cfg.lambda1, cfg.lambda2)?;
        terms = terms.add(r.values(tape));
        total = Some(match total {
            Some(t) => tape.add(t, r.rank),
            None => r.rank,
        });
    }
    let total = total.ok_or(Error::EmptyInput)?;
    let scale = 1.0 / pairs as f64;
    Ok((tape.scale(total, scale), terms.scale(scale)))
}

fn pair_inputs<'a>(corpus: &'a LoadedCorpus, pairs: &[LabeledPair], stream: &str) -> Result<Vec<&'a Mat>> {
    let mut inputs = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        inputs.push(corpus.videos[p.abnormal].stream(stream)?);
    }
    for p in pairs {
        inputs.push(corpus.videos[p.normal].stream(stream)?);
    }
    Ok(inputs)
}

fn check_labeled(labeled: &LoadedCorpus) -> Result<(Vec<usize>, Vec<usize>)> {
    let (abnormal, normal) = labeled.split_by_label();
    if abnormal.is_empty() || normal.is_empty() {
        return Err(Error::DegenerateCorpus);
    }
    Ok((abnormal, normal))
}

struct HeadRun {
    params: HeadParameters,
    adam: AdamState,
    records: Vec<LogRecord>,
}

fn train_head_step0(
    head: HeadId,
    mut params: HeadParameters,
    mut adam: AdamState,
    labeled: &LoadedCorpus,
    abnormal: &[usize],
    normal: &[usize],
    cfg: &TrainConfig,
) -> Result<HeadRun> {
    let stream = stream_for(cfg, head);
    let settings = adam_settings(cfg);
    let mut records = Vec::new();
    let head_tag = match head {
        HeadId::Main => 0,
        HeadId::Aux => 1,
    };
    for epoch in 0..cfg.epochs_step0 {
        let mut rng = schedule_rng(cfg.seed, RNG_STEP0, head_tag, epoch as u64);
        let plan = plan_labeled_epoch(abnormal, normal, cfg.batch_size / 2, &mut rng)?;
        for (b, batch) in plan.iter().enumerate() {
            let inputs = pair_inputs(labeled, &batch.pairs, stream)?;
            let mut terms = RankTerms::default();
            let (_, mut grads) = gradient(&[&params], |tape, vars| {
                let outs = vars[0].forward(tape, &inputs, cfg.positional_encoding)?;
                let (loss, t) = mean_rank(tape, &outs, batch.pairs.len(), cfg)?;
                terms = t;
                Ok(loss)
            })?;
            adam_update(&mut params, &grads.swap_remove(0), &mut adam, &settings)?;
            records.push(LogRecord::Step {
                phase: Phase::Step0,
                head: Some(head),
                cdl_step: 0,
                epoch,
                batch: b,
                global_step: adam.step,
                loss: LossBreakdown::from_rank(terms),
                mean_s: None,
                lr_encoder: cfg.lr_encoder,
                lr_fc: cfg.lr_fc,
            });
        }
        records.push(LogRecord::EpochEnd {
            phase: Phase::Step0,
            head: Some(head),
            cdl_step: 0,
            epoch,
            batches: plan.len(),
        });
    }
    Ok(HeadRun { params, adam, records })
}

/// Trains both heads separately on the labeled corpus with the ranking loss.
/// With two or more workers the heads train concurrently; results and log
/// order are the same either way.
pub fn train_step0(labeled: &LoadedCorpus, cfg: &TrainConfig, log: &mut TrainLog, opts: &TrainOptions<'_>) -> Result<TrainState> {
    cfg.validate()?;
    let (abnormal, normal) = check_labeled(labeled)?;
    let heads = HeadPair::init(
        labeled.stream_dim(&cfg.main_stream)?,
        labeled.stream_dim(&cfg.aux_stream)?,
        cfg.seed,
    )?;
    let mut state = TrainState::new(cfg.clone(), heads);
    let run = |head: HeadId, state: &TrainState| {
        train_head_step0(
            head,
            state.heads.get(head).clone(),
            state.optimizer.get(head).clone(),
            labeled,
            &abnormal,
            &normal,
            cfg,
        )
    };
    let (main, aux) = if opts.workers >= 2 {
        std::thread::scope(|s| {
            let m = s.spawn(|| run(HeadId::Main, &state));
            let a = run(HeadId::Aux, &state);
            (m.join().expect("step-0 worker panicked"), a)
        })
    } else {
        (run(HeadId::Main, &state), run(HeadId::Aux, &state))
    };
    for (head, r) in [(HeadId::Main, main?), (HeadId::Aux, aux?)] {
        *state.heads.get_mut(head) = r.params;
        *state.optimizer.get_mut(head) = r.adam;
        for rec in r.records {
            log.push(rec)?;
        }
    }
    write_checkpoint(&state, log, opts)?;
    log.flush()?;
    Ok(state)
}

fn write_checkpoint(state: &TrainState, log: &mut TrainLog, opts: &TrainOptions<'_>) -> Result<()> {
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = checkpoint::checkpoint_path(dir, state.cdl_step);
        checkpoint::save(&path, state)?;
        log.push(LogRecord::Checkpoint {
            cdl_step: state.cdl_step,
            path: path.display().to_string(),
        })?;
    }
    Ok(())
}

/// Output of one pseudo-label generation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub labels: PseudoLabels,
    /// Mean surrogate variance per external video under the current heads.
    pub video_mean_s: BTreeMap<String, f64>,
}

/// Runs both heads over every external video. Each head's soft scores become
/// its pseudo-label set, stamped with the state's current CDL step.
pub fn generate_pseudo_labels(state: &TrainState, external: &LoadedCorpus, workers: usize) -> Result<Generation> {
    let cfg = &state.config;
    let per_video = par_map(&external.videos, workers, |v| {
        let m = state.heads.main.forward(v.stream(&cfg.main_stream)?, cfg.positional_encoding)?;
        let a = state.heads.aux.forward(v.stream(&cfg.aux_stream)?, cfg.positional_encoding)?;
        let s = surrogate_variance(&m.penultimate, &a.penultimate, cfg.tau)?.mean();
        Ok((v.record.video_id.clone(), m.scores, a.scores, s))
    })?;
    let mut main = BTreeMap::new();
    let mut aux = BTreeMap::new();
    let mut video_mean_s = BTreeMap::new();
    for (id, m, a, s) in per_video {
        main.insert(id.clone(), m);
        aux.insert(id.clone(), a);
        video_mean_s.insert(id, s);
    }
    let stamp = |head_id, labels| PseudoLabelSet {
        head_id,
        cdl_step: state.cdl_step,
        labels,
    };
    Ok(Generation {
        labels: PseudoLabels {
            main: stamp(HeadId::Main, main),
            aux: stamp(HeadId::Aux, aux),
        },
        video_mean_s,
    })
}

fn regenerate(state: &mut TrainState, external: &LoadedCorpus, log: &mut TrainLog, workers: usize) -> Result<()> {
    let generation = generate_pseudo_labels(state, external, workers)?;
    log.push(LogRecord::PseudoLabels {
        cdl_step: state.cdl_step,
        videos: generation.labels.main.labels.len(),
    })?;
    log.push(LogRecord::Uncertainty {
        cdl_step: state.cdl_step,
        video_mean_s: generation.video_mean_s,
    })?;
    state.pseudo_labels = Some(generation.labels);
    Ok(())
}

struct JointOutcome {
    loss: LossBreakdown,
    mean_s: Option<f64>,
}

/// One optimizer step of both heads on a joint batch.
fn joint_step(
    state: &mut TrainState,
    labeled: &LoadedCorpus,
    external: &LoadedCorpus,
    batch: &Batch,
    cfg: &TrainConfig,
    labeled_only: bool,
) -> Result<JointOutcome> {
    let use_external = !labeled_only && !batch.external.is_empty();
    let labels = match (&state.pseudo_labels, use_external) {
        (Some(l), true) => Some(l),
        (None, true) => return Err(Error::InvalidConfig("joint step before pseudo-label generation".into())),
        (_, false) => None,
    };
    let p = batch.pairs.len();
    let mut inputs: Vec<Vec<&Mat>> = Vec::with_capacity(2);
    for head in HeadId::BOTH {
        let stream = stream_for(cfg, head);
        let mut v = pair_inputs(labeled, &batch.pairs, stream)?;
        if use_external {
            for &e in &batch.external {
                v.push(external.videos[e].stream(stream)?);
            }
        }
        inputs.push(v);
    }
    let mut targets: Vec<[Cow<'_, [f64]>; 2]> = Vec::new();
    if let Some(labels) = labels {
        for &e in &batch.external {
            let id = &external.videos[e].record.video_id;
            targets.push([
                labels.targets(HeadId::Main, cfg.pseudo_label_mode, id)?,
                labels.targets(HeadId::Aux, cfg.pseudo_label_mode, id)?,
            ]);
        }
    }

    let mut outcome = JointOutcome {
        loss: LossBreakdown::default(),
        mean_s: None,
    };
    let heads = [&state.heads.main, &state.heads.aux];
    let (_, grads) = gradient(&heads, |tape, vars: &[HeadVars]| {
        let outs_m = vars[0].forward(tape, &inputs[0], cfg.positional_encoding)?;
        let outs_a = vars[1].forward(tape, &inputs[1], cfg.positional_encoding)?;
        let (rank_m, terms_m) = mean_rank(tape, &outs_m, p, cfg)?;
        let (rank_a, terms_a) = mean_rank(tape, &outs_a, p, cfg)?;
        let rank = tape.add(rank_m, rank_a);
        let rank_terms = terms_m.add(terms_a);
        if !use_external {
            outcome.loss = LossBreakdown::from_rank(rank_terms);
            return Ok(rank);
        }
        // Uncertainty weights come from the current representations and are
        // held constant for this step.
        let mut weights = Vec::with_capacity(batch.external.len());
        for j in 0..batch.external.len() {
            let (zm, za) = (outs_m[2 * p + j].penultimate, outs_a[2 * p + j].penultimate);
            weights.push(surrogate_variance_of(tape, zm, za, cfg.tau)?);
        }
        let mut videos = Vec::with_capacity(batch.external.len());
        for (j, w) in weights.iter().enumerate() {
            let (om, oa) = (outs_m[2 * p + j], outs_a[2 * p + j]);
            let bm = bce_loss_tape(tape, om.scores, &targets[j][0])?;
            let ba = bce_loss_tape(tape, oa.scores, &targets[j][1])?;
            videos.push(ExternalVideoVars {
                uncertainty: w.values(),
                bce: tape.add(bm, ba),
                z_main: om.penultimate,
                z_aux: oa.penultimate,
            });
        }
        let ext = external_loss_tape(tape, &videos, cfg.lambda3)?;
        let total = total_loss_tape(tape, rank, ext.ext, cfg.lambda4);
        let n: usize = weights.iter().map(|w| w.values().len()).sum();
        outcome.mean_s = Some(weights.iter().flat_map(|w| w.values()).sum::<f64>() / n as f64);
        outcome.loss = LossBreakdown::with_external(rank_terms, ext.values(tape), cfg.lambda4);
        Ok(total)
    })?;
    let settings = adam_settings(cfg);
    for (head, g) in HeadId::BOTH.into_iter().zip(&grads) {
        adam_update(state.heads.get_mut(head), g, state.optimizer.get_mut(head), &settings)?;
    }
    Ok(outcome)
}

/// Runs the remaining CDL steps. Each step trains both heads jointly for
/// `epochs_per_step` epochs, then regenerates the pseudo-labels and writes a
/// checkpoint. A state with no pseudo-labels yet (fresh from step 0) first
/// gets the initial generation.
pub fn train_cdl(
    mut state: TrainState,
    labeled: &LoadedCorpus,
    external: &LoadedCorpus,
    cfg: &TrainConfig,
    log: &mut TrainLog,
    opts: &mut TrainOptions<'_>,
) -> Result<TrainState> {
    cfg.validate()?;
    if state.cdl_step > cfg.cdl_steps {
        return Err(Error::InvalidConfig(format!(
            "state has completed {} CDL steps but the schedule has only {}",
            state.cdl_step, cfg.cdl_steps
        )));
    }
    if cfg.cdl_steps == 0 || state.cdl_step == cfg.cdl_steps {
        return Ok(state);
    }
    let (abnormal, normal) = check_labeled(labeled)?;
    state.config = cfg.clone();
    let workers = opts.workers.max(1);
    if state.pseudo_labels.is_none() {
        regenerate(&mut state, external, log, workers)?;
    }
    for step in state.cdl_step + 1..=cfg.cdl_steps {
        for epoch in state.epoch_in_step..cfg.epochs_per_step {
            let mut rng = schedule_rng(cfg.seed, RNG_CDL, step as u64, epoch as u64);
            let plan = plan_joint_epoch(&abnormal, &normal, external.len(), cfg.batch_size, &mut rng)?;
            for (b, batch) in plan.iter().enumerate() {
                let out = joint_step(&mut state, labeled, external, batch, cfg, opts.labeled_only)?;
                log.push(LogRecord::Step {
                    phase: Phase::Cdl,
                    head: None,
                    cdl_step: step,
                    epoch,
                    batch: b,
                    global_step: state.optimizer.main.step,
                    loss: out.loss,
                    mean_s: out.mean_s,
                    lr_encoder: cfg.lr_encoder,
                    lr_fc: cfg.lr_fc,
                })?;
            }
            log.push(LogRecord::EpochEnd {
                phase: Phase::Cdl,
                head: None,
                cdl_step: step,
                epoch,
                batches: plan.len(),
            })?;
            state.epoch_in_step = epoch + 1;
        }
        state.cdl_step = step;
        state.epoch_in_step = 0;
        regenerate(&mut state, external, log, workers)?;
        write_checkpoint(&state, log, opts)?;
        log.flush()?;
        if let Some(observer) = opts.on_step_end.as_mut() {
            observer(&state)?;
        }
    }
    Ok(state)
}
