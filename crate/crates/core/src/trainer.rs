//! Staged optimization loop.
//!
//! Three stages share one parameter registry and one AdamW optimizer:
//!
//! * `pretrain` fits the flow field on prompted speech reconstruction,
//!   conditioning on raw reference-speech embeddings;
//! * `self_distill` fine-tunes the field prompt-free on conversion
//!   triples produced by a frozen snapshot of itself;
//! * `align` freezes the field and trains the projectors, the
//!   aggregator and the temperature on the combined flow and
//!   contrastive objective.
//!
//! Every random draw comes from the stage's substream in a fixed order,
//! so a `(config, seed)` pair maps to bit-identical traces and
//! checkpoints, and a mid-run checkpoint resumes exactly. Batch data is
//! realized before any graph work; when `workers > 1` the
//! row-decomposable flow loss is sharded across threads and reduced in
//! shard order. The alignment objective couples batch rows through its
//! softmax terms, so that stage always computes on one shard.

use crate::cfm::{self, FieldConfig, FieldHandles, FieldMode};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Stage};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::kvformer::{
    self, BlockNormHandles, FfHandles, KvFormerHandles, Modality, ProjectorHandles, ProjectorSpec,
};
use crate::params::ParamSet;
use crate::rng::{substream, substream_seed, ResumableRng};
use crate::softcl::{self, TAU_FLOOR};
use crate::synth::World;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

pub const TRACE_HEADER: &str = "step,stage,loss_total,loss_cfm,loss_intra,loss_inter,lr,tau";

#[derive(Clone, Debug)]
pub struct TraceRow {
    pub step: u64,
    pub stage: Stage,
    pub loss_total: f64,
    pub loss_cfm: f64,
    pub loss_intra: f64,
    pub loss_inter: f64,
    pub lr: f64,
    pub tau: f64,
}

impl TraceRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.stage.as_str(),
            self.loss_total,
            self.loss_cfm,
            self.loss_intra,
            self.loss_inter,
            self.lr,
            self.tau
        )
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    out
}

pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

// ── parameters ─────────────────────────────────────────────────────────

/// Builds the full named parameter registry for a config. Every stage
/// uses the same layout; stages differ only in which names they train.
/// Each component draws from its own init substream.
pub fn init_params(cfg: &RunConfig) -> Result<ParamSet> {
    let mut set = ParamSet::new();
    cfm::init_into(
        &mut set,
        "field",
        &cfg.field_config(),
        &mut substream(cfg.seed, "init.field"),
    )?;
    kvformer::init_into(
        &mut set,
        "mva",
        &cfg.kv_config(),
        &mut substream(cfg.seed, "init.mva"),
    )?;
    cfg.face_spec()
        .init_into(&mut set, "proj.face", &mut substream(cfg.seed, "init.proj.face"))?;
    cfg.text_spec()
        .init_into(&mut set, "proj.text", &mut substream(cfg.seed, "init.proj.text"))?;
    cfg.speech_spec().init_into(
        &mut set,
        "proj.speech",
        &mut substream(cfg.seed, "init.proj.speech"),
    )?;
    set.insert("tau", Tensor::from_vec(vec![1], vec![cfg.tau_init])?)?;
    set.insert("tau_inter", Tensor::from_vec(vec![1], vec![cfg.tau_init])?)?;
    Ok(set)
}

/// Whether a named parameter is optimized in the config's stage.
pub fn is_trainable(cfg: &RunConfig, name: &str) -> bool {
    match cfg.stage {
        Stage::Pretrain | Stage::SelfDistill => name.starts_with("field."),
        Stage::Align => {
            if name.starts_with("proj.") {
                return true;
            }
            if cfg.mva_enabled && name.starts_with("mva.") {
                return true;
            }
            if cfg.softcl_enabled {
                if name == "tau" {
                    return true;
                }
                if !cfg.shared_tau && name == "tau_inter" {
                    return true;
                }
            }
            false
        }
    }
}

fn zeros_like(set: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in set.iter() {
        out.insert(name.to_string(), Tensor::zeros(t.shape().to_vec()))
            .expect("names unique in source set");
    }
    out
}

pub(crate) fn check_structure(reference: &ParamSet, got: &ParamSet) -> Result<()> {
    if reference.len() != got.len() {
        return Err(CoreError::Contract(format!(
            "checkpoint has {} parameters, this config builds {}",
            got.len(),
            reference.len()
        )));
    }
    for ((na, ta), (nb, tb)) in reference.iter().zip(got.iter()) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(CoreError::Contract(format!(
                "checkpoint parameter {nb:?} {:?} does not match configured {na:?} {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
    }
    Ok(())
}

// ── schedule and update ────────────────────────────────────────────────

/// Linear ramp to `lr` over the warmup, then constant (or cosine to 0
/// at `steps` when enabled).
pub fn lr_at(step: usize, cfg: &RunConfig) -> f64 {
    if cfg.warmup > 0 && step < cfg.warmup {
        return cfg.lr * step as f64 / cfg.warmup as f64;
    }
    if !cfg.cosine {
        return cfg.lr;
    }
    let total = cfg.steps.max(cfg.warmup + 1);
    let frac = ((step - cfg.warmup) as f64 / (total - cfg.warmup) as f64).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Scales all gradients so their joint norm is at most `clip` (0
/// disables); returns the pre-clip norm.
pub fn clip_grads(grads: &mut [Option<Vec<f64>>], clip: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum();
    let norm = sq.sqrt();
    if clip > 0.0 && norm > clip {
        let factor = clip / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update over the registry. `grads`
/// aligns with canonical order; `None` entries are frozen and left
/// untouched, including by decay. `t` starts at 1.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Option<Vec<f64>>],
    opt_m: &mut ParamSet,
    opt_v: &mut ParamSet,
    t: u64,
    lr: f64,
    cfg: &RunConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(CoreError::DimError {
            op: "adamw_step",
            detail: format!("{} gradients for {} parameters", grads.len(), params.len()),
        });
    }
    if t == 0 {
        return Err(CoreError::Contract("adamw step count starts at 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let names: Vec<String> = params.names().map(String::from).collect();
    for (i, name) in names.iter().enumerate() {
        let Some(grad) = &grads[i] else { continue };
        let p = params.get_mut(name)?;
        if grad.len() != p.numel() {
            return Err(CoreError::DimError {
                op: "adamw_step",
                detail: format!(
                    "gradient for {name:?} has {} values, parameter has {}",
                    grad.len(),
                    p.numel()
                ),
            });
        }
        let m = opt_m.get_mut(name)?;
        let v = opt_v.get_mut(name)?;
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for j in 0..grad.len() {
            let g = grad[j];
            md[j] = cfg.beta1 * md[j] + (1.0 - cfg.beta1) * g;
            vd[j] = cfg.beta2 * vd[j] + (1.0 - cfg.beta2) * g * g;
            let mhat = md[j] / bc1;
            let vhat = vd[j] / bc2;
            pd[j] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * pd[j]);
        }
    }
    Ok(())
}

// ── graph binding ──────────────────────────────────────────────────────

struct Bound {
    ids: Vec<TensorId>,
    train: Vec<bool>,
}

/// Inserts every registry entry into a graph in canonical order,
/// trainable or frozen per the stage.
fn bind_all(g: &mut Graph, set: &ParamSet, cfg: &RunConfig) -> Bound {
    let mut ids = Vec::with_capacity(set.len());
    let mut train = Vec::with_capacity(set.len());
    for (name, t) in set.iter() {
        let tr = is_trainable(cfg, name);
        ids.push(if tr {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        });
        train.push(tr);
    }
    Bound { ids, train }
}

impl Bound {
    fn id(&self, set: &ParamSet, name: &str) -> Result<TensorId> {
        set.position(name)
            .map(|i| self.ids[i])
            .ok_or_else(|| CoreError::Contract(format!("unknown parameter {name:?}")))
    }
}

fn field_handles(b: &Bound, set: &ParamSet, cfg: &FieldConfig) -> Result<FieldHandles> {
    let layers = cfg.hidden.len() + 1;
    let mut out = Vec::with_capacity(layers);
    for i in 0..layers {
        out.push((
            b.id(set, &format!("field.layer{i}.w"))?,
            b.id(set, &format!("field.layer{i}.b"))?,
        ));
    }
    Ok(FieldHandles { layers: out })
}

fn proj_handles(b: &Bound, set: &ParamSet, prefix: &str, spec: &ProjectorSpec) -> Result<ProjectorHandles> {
    let mut layers = Vec::with_capacity(spec.dims.len() - 1);
    for i in 0..spec.dims.len() - 1 {
        layers.push((
            b.id(set, &format!("{prefix}.layer{i}.w"))?,
            b.id(set, &format!("{prefix}.layer{i}.b"))?,
        ));
    }
    Ok(ProjectorHandles { layers })
}

fn kv_handles(b: &Bound, set: &ParamSet, cfg: &RunConfig) -> Result<KvFormerHandles> {
    let kv = cfg.kv_config();
    let out_proj = if kv.use_out_proj {
        Some(b.id(set, "mva.out_proj")?)
    } else {
        None
    };
    let ff = if kv.use_ff {
        Some(FfHandles {
            w1: b.id(set, "mva.ff.w1")?,
            b1: b.id(set, "mva.ff.b1")?,
            w2: b.id(set, "mva.ff.w2")?,
            b2: b.id(set, "mva.ff.b2")?,
        })
    } else {
        None
    };
    let mut norms = Vec::new();
    if kv.use_norm {
        for blk in 0..kv.depth {
            let attn = (
                b.id(set, &format!("mva.norm{blk}.attn.gain"))?,
                b.id(set, &format!("mva.norm{blk}.attn.bias"))?,
            );
            let ff_norm = if kv.use_ff {
                Some((
                    b.id(set, &format!("mva.norm{blk}.ff.gain"))?,
                    b.id(set, &format!("mva.norm{blk}.ff.bias"))?,
                ))
            } else {
                None
            };
            norms.push(BlockNormHandles { attn, ff: ff_norm });
        }
    }
    Ok(KvFormerHandles {
        bank: b.id(set, "mva.bank")?,
        wq: b.id(set, "mva.wq")?,
        wk: b.id(set, "mva.wk")?,
        wv: b.id(set, "mva.wv")?,
        out_proj,
        ff,
        norms,
    })
}

/// Per-entry gradient buffers for trainable names; missing gradients
/// become zeros so moments and decay advance uniformly.
fn collect_grads(g: &Graph, set: &ParamSet, bound: &Bound) -> Vec<Option<Vec<f64>>> {
    set.iter()
        .enumerate()
        .map(|(i, (_, t))| {
            if bound.train[i] {
                Some(
                    g.grad(bound.ids[i])
                        .map(|s| s.to_vec())
                        .unwrap_or_else(|| vec![0.0; t.numel()]),
                )
            } else {
                None
            }
        })
        .collect()
}

// ── batch construction ─────────────────────────────────────────────────

/// Realized data for one flow-matching step; `cond` rows are constants
/// in the two field-training stages.
struct FlowBatch {
    x0: Tensor,
    x1: Tensor,
    ts: Vec<f64>,
    cond: Tensor,
    tokens: Tensor,
    prompt: Option<Tensor>,
}

fn draw_standard<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Pretraining batch. Per-entry draw order: speaker, reference speech,
/// tokens, target, prompt source, prompt mask, noise, time.
fn draw_pretrain_batch<R: Rng>(world: &World, cfg: &RunConfig, rng: &mut R) -> Result<FlowBatch> {
    let n = cfg.batch;
    let dd = world.cfg.data_dim;
    let (mut x0, mut x1, mut ts) = (Vec::new(), Vec::new(), Vec::new());
    let (mut cond, mut tokens, mut prompt) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let speaker = rng.gen_range(0..world.cfg.speakers);
        let s_ref = world.observe(Modality::Speech, speaker, rng)?;
        let toks = world.draw_tokens(speaker, rng)?;
        let target = world.draw_data(speaker, rng)?;
        let src = world.draw_data(speaker, rng)?;
        for j in 0..dd {
            let keep = rng.gen::<f64>() < 0.5;
            prompt.push(if keep { src.data()[j] } else { 0.0 });
        }
        x0.extend(draw_standard(dd, rng));
        ts.push(rng.gen::<f64>());
        cond.extend_from_slice(s_ref.data());
        tokens.extend_from_slice(cfm::pool_tokens(&toks)?.data());
        x1.extend_from_slice(target.data());
    }
    Ok(FlowBatch {
        x0: Tensor::from_vec(vec![n, dd], x0)?,
        x1: Tensor::from_vec(vec![n, dd], x1)?,
        ts,
        cond: Tensor::from_vec(vec![n, world.cfg.speaker_dim], cond)?,
        tokens: Tensor::from_vec(vec![n, world.cfg.token_dim], tokens)?,
        prompt: Some(Tensor::from_vec(vec![n, dd], prompt)?),
    })
}

/// Distillation batch: conversion triples from the frozen teacher, then
/// per-entry noise and time.
fn draw_distill_batch<R: Rng>(
    world: &World,
    cfg: &RunConfig,
    teacher: &ParamSet,
    rng: &mut R,
) -> Result<FlowBatch> {
    let n = cfg.batch;
    let dd = world.cfg.data_dim;
    let field_cfg = cfg.field_config();
    let (mut x0, mut x1, mut ts) = (Vec::new(), Vec::new(), Vec::new());
    let (mut cond, mut tokens) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let triple =
            cfm::self_distill_pair(world, &field_cfg, teacher, "field", cfg.ode_steps, rng)?;
        x0.extend(draw_standard(dd, rng));
        ts.push(rng.gen::<f64>());
        cond.extend_from_slice(triple.s_src.data());
        tokens.extend_from_slice(cfm::pool_tokens(&triple.tokens_conv)?.data());
        x1.extend_from_slice(triple.x1.data());
    }
    Ok(FlowBatch {
        x0: Tensor::from_vec(vec![n, dd], x0)?,
        x1: Tensor::from_vec(vec![n, dd], x1)?,
        ts,
        cond: Tensor::from_vec(vec![n, world.cfg.speaker_dim], cond)?,
        tokens: Tensor::from_vec(vec![n, world.cfg.token_dim], tokens)?,
        prompt: None,
    })
}

/// The finite description pool the align stage samples from; its size is
/// the data-scale knob. Built from its own substream so a resumed run
/// reconstructs it exactly.
pub fn build_desc_pool(world: &World, cfg: &RunConfig) -> Result<Vec<(usize, Modality, Tensor)>> {
    let n = cfg.desc_base + (cfg.desc_extra as f64 * cfg.data_scale).round() as usize;
    if n == 0 {
        return Err(CoreError::Contract(
            "align stage needs a nonempty description pool".into(),
        ));
    }
    let mut rng = substream(cfg.seed, "align.pool");
    let mut pool = Vec::with_capacity(n);
    for i in 0..n {
        let speaker = i % world.cfg.speakers;
        let modality = if i % 2 == 0 {
            Modality::Face
        } else {
            Modality::Text
        };
        let obs = world.observe(modality, speaker, &mut rng)?;
        pool.push((speaker, modality, obs));
    }
    Ok(pool)
}

struct AlignBatch {
    /// Raw aggregator input per entry with the projector that owns it.
    inputs: Vec<(Modality, Tensor)>,
    s_ref: Tensor,
    x0: Tensor,
    x1: Tensor,
    ts: Vec<f64>,
    tokens: Tensor,
}

/// Alignment batch. Draw order: pool indices, anchor flips, then per
/// entry reference speech, tokens, target, noise, time.
fn draw_align_batch<R: Rng>(
    world: &World,
    cfg: &RunConfig,
    pool: &[(usize, Modality, Tensor)],
    rng: &mut R,
) -> Result<AlignBatch> {
    let n = cfg.batch;
    let dd = world.cfg.data_dim;
    let idxs: Vec<usize> = (0..n).map(|_| rng.gen_range(0..pool.len())).collect();
    let anchored = kvformer::speech_anchor_select(n, cfg.anchor_p, rng)?;
    let (mut s_ref, mut x0, mut x1, mut ts, mut tokens) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut inputs = Vec::with_capacity(n);
    for i in 0..n {
        let (speaker, modality, obs) = &pool[idxs[i]];
        let speech = world.observe(Modality::Speech, *speaker, rng)?;
        let toks = world.draw_tokens(*speaker, rng)?;
        let target = world.draw_data(*speaker, rng)?;
        x0.extend(draw_standard(dd, rng));
        ts.push(rng.gen::<f64>());
        inputs.push(if anchored[i] {
            (Modality::Speech, speech.clone())
        } else {
            (*modality, obs.clone())
        });
        s_ref.extend_from_slice(speech.data());
        tokens.extend_from_slice(cfm::pool_tokens(&toks)?.data());
        x1.extend_from_slice(target.data());
    }
    Ok(AlignBatch {
        inputs,
        s_ref: Tensor::from_vec(vec![n, world.cfg.speaker_dim], s_ref)?,
        x0: Tensor::from_vec(vec![n, dd], x0)?,
        x1: Tensor::from_vec(vec![n, dd], x1)?,
        ts,
        tokens: Tensor::from_vec(vec![n, world.cfg.token_dim], tokens)?,
    })
}

// ── loss evaluation ────────────────────────────────────────────────────

fn row_block(t: &Tensor, a: usize, b: usize) -> Tensor {
    let c = t.cols();
    Tensor::from_vec(vec![b - a, c], t.data()[a * c..b * c].to_vec())
        .expect("block bounds checked by caller")
}

fn flow_shard(
    cfg: &RunConfig,
    set: &ParamSet,
    mode: FieldMode,
    batch: &FlowBatch,
    a: usize,
    b: usize,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let field_cfg = cfg.field_config();
    let mut g = Graph::new();
    let bound = bind_all(&mut g, set, cfg);
    let fh = field_handles(&bound, set, &field_cfg)?;
    let cond = g.constant(row_block(&batch.cond, a, b));
    let tokens = row_block(&batch.tokens, a, b);
    let prompt = batch.prompt.as_ref().map(|p| row_block(p, a, b));
    let loss = cfm::cfm_loss(
        &mut g,
        &field_cfg,
        &fh,
        mode,
        &row_block(&batch.x0, a, b),
        &row_block(&batch.x1, a, b),
        &batch.ts[a..b],
        Some(cond),
        Some(&tokens),
        prompt.as_ref(),
        cfg.squared_l2,
    )?;
    g.backward(loss)?;
    Ok((g.value(loss).item()?, collect_grads(&g, set, &bound)))
}

/// Mean flow loss and its gradient over the whole batch, sharded by rows
/// when more than one worker is configured. Shard results are reduced in
/// shard order with batch-fraction weights, so the worker count is part
/// of the numeric contract.
fn flow_step(
    cfg: &RunConfig,
    set: &ParamSet,
    mode: FieldMode,
    batch: &FlowBatch,
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let n = batch.ts.len();
    let workers = cfg.workers.min(n).max(1);
    if workers == 1 {
        return flow_shard(cfg, set, mode, batch, 0, n);
    }
    let mut bounds = Vec::with_capacity(workers);
    let base = n / workers;
    let extra = n % workers;
    let mut start = 0;
    for w in 0..workers {
        let len = base + usize::from(w < extra);
        bounds.push((start, start + len));
        start += len;
    }
    let results: Vec<Result<(f64, Vec<Option<Vec<f64>>>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = bounds
            .iter()
            .map(|&(a, b)| scope.spawn(move || flow_shard(cfg, set, mode, batch, a, b)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("shard thread panicked"))
            .collect()
    });

    let mut loss = 0.0;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; set.len()];
    for ((a, b), res) in bounds.into_iter().zip(results) {
        let (shard_loss, shard_grads) = res?;
        let weight = (b - a) as f64 / n as f64;
        loss += weight * shard_loss;
        for (acc, sg) in grads.iter_mut().zip(shard_grads) {
            let Some(sg) = sg else { continue };
            match acc {
                Some(buf) => {
                    for (x, y) in buf.iter_mut().zip(&sg) {
                        *x += weight * y;
                    }
                }
                None => *acc = Some(sg.iter().map(|y| weight * y).collect()),
            }
        }
    }
    Ok((loss, grads))
}

struct StepLosses {
    total: f64,
    cfm: f64,
    intra: f64,
    inter: f64,
}

/// One alignment objective evaluation: project, aggregate, flow loss
/// against the aggregated condition, plus the contrastive pair when
/// enabled.
fn align_step(
    cfg: &RunConfig,
    set: &ParamSet,
    batch: &AlignBatch,
) -> Result<(StepLosses, Vec<Option<Vec<f64>>>)> {
    let field_cfg = cfg.field_config();
    let mut g = Graph::new();
    let bound = bind_all(&mut g, set, cfg);
    let fh = field_handles(&bound, set, &field_cfg)?;
    let face_spec = cfg.face_spec();
    let text_spec = cfg.text_spec();
    let speech_spec = cfg.speech_spec();
    let face_h = proj_handles(&bound, set, "proj.face", &face_spec)?;
    let text_h = proj_handles(&bound, set, "proj.text", &text_spec)?;
    let speech_h = proj_handles(&bound, set, "proj.speech", &speech_spec)?;

    let mut rows = Vec::with_capacity(batch.inputs.len());
    for (modality, raw) in &batch.inputs {
        let raw_id = g.constant(Tensor::from_vec(vec![1, raw.numel()], raw.data().to_vec())?);
        let (spec, h) = match modality {
            Modality::Face => (&face_spec, &face_h),
            Modality::Text => (&text_spec, &text_h),
            Modality::Speech => (&speech_spec, &speech_h),
        };
        rows.push(kvformer::project(&mut g, spec, h, raw_id)?);
    }
    let stacked = g.concat_rows(&rows)?;
    let v = if cfg.mva_enabled {
        let kvh = kv_handles(&bound, set, cfg)?;
        kvformer::forward(&mut g, &cfg.kv_config(), &kvh, stacked)?
    } else {
        stacked
    };

    let cfm_id = cfm::cfm_loss(
        &mut g,
        &field_cfg,
        &fh,
        FieldMode::Mva,
        &batch.x0,
        &batch.x1,
        &batch.ts,
        Some(v),
        Some(&batch.tokens),
        None,
        cfg.squared_l2,
    )?;

    let (loss_id, intra_id, inter_id) = if cfg.softcl_enabled {
        let s_id = g.constant(batch.s_ref.clone());
        let tau_id = bound.id(set, "tau")?;
        let tau_inter_id = if cfg.shared_tau {
            tau_id
        } else {
            bound.id(set, "tau_inter")?
        };
        let intra = softcl::intra_loss(&mut g, v, s_id, tau_id)?;
        let inter = if cfg.symmetric_infonce {
            softcl::inter_loss(&mut g, v, s_id, tau_inter_id)?
        } else {
            softcl::inter_loss_oneway(&mut g, v, s_id, tau_inter_id)?
        };
        let total = softcl::combine(
            &mut g,
            cfm_id,
            intra,
            inter,
            cfg.lambda_intra,
            cfg.lambda_inter,
        )?;
        (total, Some(intra), Some(inter))
    } else {
        (cfm_id, None, None)
    };

    g.backward(loss_id)?;
    let value = |g: &Graph, id: Option<TensorId>| -> Result<f64> {
        id.map_or(Ok(0.0), |id| g.value(id).item())
    };
    let losses = StepLosses {
        total: g.value(loss_id).item()?,
        cfm: g.value(cfm_id).item()?,
        intra: value(&g, intra_id)?,
        inter: value(&g, inter_id)?,
    };
    let grads = collect_grads(&g, set, &bound);
    Ok((losses, grads))
}

// ── driver ─────────────────────────────────────────────────────────────

fn stage_label(stage: Stage) -> &'static str {
    match stage {
        Stage::Pretrain => "train.pretrain",
        Stage::SelfDistill => "train.self_distill",
        Stage::Align => "train.align",
    }
}

fn field_snapshot(params: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        if name.starts_with("field.") {
            out.insert(name.to_string(), t.clone())
                .expect("names unique in source set");
        }
    }
    out
}

/// Runs the configured stage to completion. `init_from` is the previous
/// stage's checkpoint (required for self_distill and align); `resume`
/// continues a mid-run snapshot of the same stage bit-exactly.
pub fn train(
    cfg: &RunConfig,
    init_from: Option<&Checkpoint>,
    resume: Option<Checkpoint>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if cfg.stage == Stage::SelfDistill && !cfg.self_distill_enabled {
        return Err(CoreError::Contract(
            "config disables the self-distillation stage".into(),
        ));
    }
    let world = World::generate(cfg.world_config(), cfg.seed)?;
    let reference = init_params(cfg)?;

    let (mut params, mut opt_m, mut opt_v, teacher, mut rng, start) = match resume {
        Some(ck) => {
            if ck.stage != cfg.stage {
                return Err(CoreError::StagedPipeline {
                    needed: format!("mid-run {} checkpoint to resume", cfg.stage.as_str()),
                    found: ck.stage.as_str().to_string(),
                });
            }
            if ck.seed != cfg.seed {
                return Err(CoreError::Contract(format!(
                    "checkpoint seed {} does not match configured seed {}",
                    ck.seed, cfg.seed
                )));
            }
            check_structure(&reference, &ck.params)?;
            let step = ck.step as usize;
            if step > cfg.steps {
                return Err(CoreError::Contract(format!(
                    "checkpoint is at step {step}, beyond the configured {} steps",
                    cfg.steps
                )));
            }
            let teacher = match cfg.stage {
                Stage::SelfDistill => Some(ck.teacher.ok_or_else(|| {
                    CoreError::Contract(
                        "distillation checkpoint is missing its teacher weights".into(),
                    )
                })?),
                _ => ck.teacher,
            };
            let rng = ResumableRng::restore(
                substream_seed(cfg.seed, stage_label(cfg.stage)),
                ck.word_pos,
            );
            (ck.params, ck.opt_m, ck.opt_v, teacher, rng, step)
        }
        None => {
            let rng = ResumableRng::new(cfg.seed, stage_label(cfg.stage));
            match cfg.stage {
                Stage::Pretrain => {
                    if init_from.is_some() {
                        return Err(CoreError::Contract(
                            "pretraining starts from scratch, not a checkpoint".into(),
                        ));
                    }
                    let m = zeros_like(&reference);
                    let v = zeros_like(&reference);
                    (reference.clone(), m, v, None, rng, 0)
                }
                Stage::SelfDistill => {
                    let ck = init_from.ok_or_else(|| CoreError::StagedPipeline {
                        needed: "pretrain".into(),
                        found: "nothing".into(),
                    })?;
                    if ck.stage != Stage::Pretrain {
                        return Err(CoreError::StagedPipeline {
                            needed: "pretrain".into(),
                            found: ck.stage.as_str().to_string(),
                        });
                    }
                    check_structure(&reference, &ck.params)?;
                    let teacher = field_snapshot(&ck.params);
                    let m = zeros_like(&reference);
                    let v = zeros_like(&reference);
                    (ck.params.clone(), m, v, Some(teacher), rng, 0)
                }
                Stage::Align => {
                    let ck = init_from.ok_or_else(|| CoreError::StagedPipeline {
                        needed: "pretrain or self_distill".into(),
                        found: "nothing".into(),
                    })?;
                    if ck.stage == Stage::Align {
                        return Err(CoreError::StagedPipeline {
                            needed: "pretrain or self_distill".into(),
                            found: "align".into(),
                        });
                    }
                    check_structure(&reference, &ck.params)?;
                    let m = zeros_like(&reference);
                    let v = zeros_like(&reference);
                    (ck.params.clone(), m, v, None, rng, 0)
                }
            }
        }
    };

    let pool = if cfg.stage == Stage::Align {
        build_desc_pool(&world, cfg)?
    } else {
        Vec::new()
    };

    let mut trace = Vec::new();
    for step in start..cfg.steps {
        let lr = lr_at(step, cfg);
        let tau_used = params.get("tau")?.data()[0];
        let (losses, mut grads) = match cfg.stage {
            Stage::Pretrain => {
                let batch = draw_pretrain_batch(&world, cfg, rng.rng())?;
                let (l, grads) = flow_step(cfg, &params, FieldMode::Pretrain, &batch)?;
                (
                    StepLosses {
                        total: l,
                        cfm: l,
                        intra: 0.0,
                        inter: 0.0,
                    },
                    grads,
                )
            }
            Stage::SelfDistill => {
                let teacher = teacher.as_ref().expect("distill stage always has a teacher");
                let batch = draw_distill_batch(&world, cfg, teacher, rng.rng())?;
                let (l, grads) = flow_step(cfg, &params, FieldMode::SelfDistill, &batch)?;
                (
                    StepLosses {
                        total: l,
                        cfm: l,
                        intra: 0.0,
                        inter: 0.0,
                    },
                    grads,
                )
            }
            Stage::Align => {
                let batch = draw_align_batch(&world, cfg, &pool, rng.rng())?;
                align_step(cfg, &params, &batch)?
            }
        };
        clip_grads(&mut grads, cfg.clip);
        adamw_step(
            &mut params,
            &grads,
            &mut opt_m,
            &mut opt_v,
            step as u64 + 1,
            lr,
            cfg,
        )?;
        for name in ["tau", "tau_inter"] {
            let t = params.get_mut(name)?;
            let v = t.data()[0];
            if v < TAU_FLOOR {
                t.data_mut()[0] = TAU_FLOOR;
            }
        }
        if step % cfg.trace_every == 0 || step + 1 == cfg.steps {
            trace.push(TraceRow {
                step: step as u64,
                stage: cfg.stage,
                loss_total: losses.total,
                loss_cfm: losses.cfm,
                loss_intra: losses.intra,
                loss_inter: losses.inter,
                lr,
                tau: tau_used,
            });
        }
    }

    let (_, word_pos) = rng.state();
    let checkpoint = Checkpoint {
        stage: cfg.stage,
        step: cfg.steps as u64,
        config_text: cfg.to_text(),
        seed: cfg.seed,
        word_pos,
        params,
        opt_m,
        opt_v,
        teacher,
    };
    Ok(TrainResult { checkpoint, trace })
}
