//! Objective evaluation of trained checkpoints.
//!
//! Generation quality is scored by three cosine metrics over speaker
//! embeddings read back from generated data points:
//!
//! * `sst` — similarity to the target speaker (higher is better);
//! * `ssc` — consistency across generations for the same speaker
//!   (higher is better);
//! * `ssd` — similarity across different speakers (lower is better;
//!   high values mean the model collapsed speakers together).
//!
//! The reader is a fixed ridge-regression probe from data space to
//! voice-embedding space, fit once on fresh world samples and never on
//! model output, so the metrics stay external to the trained model.
//! Benchmark speakers are drawn outside the training id range and are
//! unseen by every training stage.

use crate::cfm;
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Stage};
use crate::embfile;
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::kvformer::{self, Modality};
use crate::params::ParamSet;
use crate::rng::substream;
use crate::synth::{map_row, normalize_rows_in_place, solve_linear, World};
use crate::tensor::{cosine_sim, Tensor};
use crate::trainer;
use rand::Rng;
use rand_distr::StandardNormal;
use std::path::Path;

pub const REPORT_HEADER: &str = "task,n_speakers,n_desc,sst,ssc,ssd,seed,config_hash";
pub const SWEEP_HEADER: &str = "scale,task,n_speakers,n_desc,sst,ssc,ssd,seed,config_hash";

/// Regularizer for the probe fit, scaled by the sample count.
pub const PROBE_RIDGE: f64 = 1e-6;

// ── metrics ────────────────────────────────────────────────────────────

fn row_cos(a: &Tensor, i: usize, b: &Tensor, j: usize) -> Result<f64> {
    cosine_sim(&a.row_tensor(i), &b.row_tensor(j))
}

/// Mean similarity to the paired target embedding, cosine scaled to
/// [-100, 100]. Rows of `generated` and `target` pair up by index.
pub fn sst(generated: &Tensor, target: &Tensor) -> Result<f64> {
    if generated.shape() != target.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "sst",
            left: generated.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let n = generated.rows();
    if n == 0 {
        return Err(CoreError::Contract("sst needs at least one pair".into()));
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += 100.0 * row_cos(generated, i, target, i)?;
    }
    Ok(acc / n as f64)
}

/// Mean within-speaker similarity: for each group with at least two
/// generations, the mean pairwise cosine, averaged over those groups
/// and scaled to [-100, 100]. Singleton groups carry no pair and are
/// skipped.
pub fn ssc(groups: &[Tensor]) -> Result<f64> {
    let mut acc = 0.0;
    let mut counted = 0usize;
    for g in groups {
        let k = g.rows();
        if k < 2 {
            continue;
        }
        let mut pair_acc = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                pair_acc += 100.0 * row_cos(g, i, g, j)?;
            }
        }
        acc += pair_acc / (k * (k - 1) / 2) as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(CoreError::Contract(
            "ssc needs a speaker with at least two generations".into(),
        ));
    }
    Ok(acc / counted as f64)
}

/// Mean cross-speaker similarity: cosine between per-speaker mean
/// generations, averaged over unordered speaker pairs and scaled to
/// [-100, 100].
pub fn ssd(groups: &[Tensor]) -> Result<f64> {
    if groups.len() < 2 {
        return Err(CoreError::Contract("ssd needs at least two speakers".into()));
    }
    let mut means = Vec::with_capacity(groups.len());
    for g in groups {
        let k = g.rows();
        if k == 0 {
            return Err(CoreError::Contract("ssd got an empty speaker group".into()));
        }
        let w = g.cols();
        let mut m = vec![0.0; w];
        for i in 0..k {
            for (mj, &x) in m.iter_mut().zip(g.row(i)) {
                *mj += x / k as f64;
            }
        }
        means.push(Tensor::vector(m));
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            acc += 100.0 * cosine_sim(&means[i], &means[j])?;
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}

// ── held-out speakers ──────────────────────────────────────────────────

/// Speakers reserved for evaluation: fresh latents pushed through the
/// training world's observation maps, with ids outside the training
/// range.
pub struct EvalSet {
    pub ids: Vec<usize>,
    /// Unit-norm held-out identities, [E x d_z].
    pub latents: Tensor,
    /// Ground-truth voice embeddings, [E x d].
    pub embeddings: Tensor,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Draws the held-out speaker set from its own substream of the run
/// seed.
pub fn build_eval_set(world: &World, cfg: &RunConfig) -> Result<EvalSet> {
    let e = cfg.eval_speakers;
    if e < 2 {
        return Err(CoreError::Contract(
            "evaluation needs at least two held-out speakers".into(),
        ));
    }
    let mut rng = substream(cfg.seed, "eval.speakers");
    let mut latents = Tensor::randn(vec![e, world.cfg.latent_dim], 1.0, &mut rng);
    normalize_rows_in_place(&mut latents);
    let d = world.cfg.speaker_dim;
    let mut emb = Vec::with_capacity(e * d);
    for i in 0..e {
        emb.extend(map_row(latents.row(i), &world.speech_map));
    }
    Ok(EvalSet {
        ids: (world.cfg.speakers..world.cfg.speakers + e).collect(),
        latents,
        embeddings: Tensor::from_vec(vec![e, d], emb)?,
    })
}

/// Evaluation speakers must be unseen during training: ids distinct and
/// outside the training range, one latent row per id.
pub fn check_disjoint(world: &World, set: &EvalSet) -> Result<()> {
    if set.is_empty() {
        return Err(CoreError::Contract("evaluation set is empty".into()));
    }
    if set.latents.rows() != set.len() || set.embeddings.rows() != set.len() {
        return Err(CoreError::Contract(format!(
            "evaluation set has {} ids but {} latents and {} embeddings",
            set.len(),
            set.latents.rows(),
            set.embeddings.rows()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for &id in &set.ids {
        if id < world.cfg.speakers {
            return Err(CoreError::Contract(format!(
                "evaluation speaker {id} overlaps the training range 0..{}",
                world.cfg.speakers
            )));
        }
        if !seen.insert(id) {
            return Err(CoreError::Contract(format!(
                "evaluation speaker {id} listed twice"
            )));
        }
    }
    Ok(())
}

fn observe_latent<R: Rng>(world: &World, m: Modality, latent: &[f64], rng: &mut R) -> Tensor {
    let mut v = map_row(latent, world.modality_map(m));
    let sigma = world.modality_sigma(m);
    for x in v.iter_mut() {
        *x += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    Tensor::vector(v)
}

fn draw_data_at<R: Rng>(world: &World, latent: &[f64], rng: &mut R) -> Vec<f64> {
    let mut v = map_row(latent, &world.data_map);
    for x in v.iter_mut() {
        *x += world.cfg.sigma_data * rng.sample::<f64, _>(StandardNormal);
    }
    v
}

// ── probe ──────────────────────────────────────────────────────────────

/// Fixed reader from generated data points to voice embeddings; the
/// desk-scale stand-in for an external speaker-verification encoder.
pub struct Probe {
    /// Ridge solution, [D x d]; applied as `row · w`.
    pub w: Tensor,
}

/// Fits the probe on fresh draws from the held-out speakers. The fit
/// sees only world ground truth, never model output.
pub fn fit_probe(world: &World, set: &EvalSet, per_speaker: usize, seed: u64) -> Result<Probe> {
    let dd = world.cfg.data_dim;
    let d = world.cfg.speaker_dim;
    let n = set.len() * per_speaker;
    if n == 0 {
        return Err(CoreError::Contract("probe fit needs samples".into()));
    }
    let mut rng = substream(seed, "eval.probe");
    let mut gram = vec![0.0; dd * dd];
    let mut moment = vec![0.0; dd * d];
    for k in 0..set.len() {
        let latent = set.latents.row(k);
        let y = set.embeddings.row(k);
        for _ in 0..per_speaker {
            let x = draw_data_at(world, latent, &mut rng);
            for i in 0..dd {
                for j in 0..dd {
                    gram[i * dd + j] += x[i] * x[j];
                }
                for (j, &yj) in y.iter().enumerate() {
                    moment[i * d + j] += x[i] * yj;
                }
            }
        }
    }
    let ridge = PROBE_RIDGE * n as f64;
    for i in 0..dd {
        gram[i * dd + i] += ridge;
    }
    let mut w = vec![0.0; dd * d];
    for j in 0..d {
        let mut a = gram.clone();
        let mut b: Vec<f64> = (0..dd).map(|i| moment[i * d + j]).collect();
        solve_linear(dd, &mut a, &mut b)?;
        for i in 0..dd {
            w[i * d + j] = b[i];
        }
    }
    Ok(Probe {
        w: Tensor::from_vec(vec![dd, d], w)?,
    })
}

impl Probe {
    /// Reads embedding estimates off data rows: [N x D] to [N x d].
    pub fn apply(&self, rows: &Tensor) -> Result<Tensor> {
        let (dd, d) = (self.w.rows(), self.w.cols());
        if rows.cols() != dd {
            return Err(CoreError::DimError {
                op: "probe",
                detail: format!("data width {} does not match probe input {dd}", rows.cols()),
            });
        }
        let n = rows.rows();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let x = rows.row(i);
            for (k, &xk) in x.iter().enumerate() {
                for j in 0..d {
                    out[i * d + j] += xk * self.w.at(k, j);
                }
            }
        }
        Tensor::from_vec(vec![n, d], out)
    }
}

// ── benchmark ──────────────────────────────────────────────────────────

/// One generation benchmark: which modality describes the target
/// speaker, and whether tokens carry another speaker's leakage (voice
/// conversion) or pure content (synthesis).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    FaceTts,
    FaceVc,
    TextTts,
    TextVc,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::FaceTts, Task::FaceVc, Task::TextTts, Task::TextVc];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::FaceTts => "face_tts",
            Task::FaceVc => "face_vc",
            Task::TextTts => "text_tts",
            Task::TextVc => "text_vc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "face_tts" => Ok(Task::FaceTts),
            "face_vc" => Ok(Task::FaceVc),
            "text_tts" => Ok(Task::TextTts),
            "text_vc" => Ok(Task::TextVc),
            other => Err(CoreError::Config {
                key: "task".into(),
                detail: format!("unknown task {other:?}, expected face_tts | face_vc | text_tts | text_vc"),
            }),
        }
    }

    fn modality(self) -> Modality {
        match self {
            Task::FaceTts | Task::FaceVc => Modality::Face,
            Task::TextTts | Task::TextVc => Modality::Text,
        }
    }

    fn voice_conversion(self) -> bool {
        matches!(self, Task::FaceVc | Task::TextVc)
    }
}

#[derive(Clone, Debug)]
pub struct TaskRow {
    pub task: Task,
    pub n_speakers: usize,
    pub n_desc: usize,
    pub sst: f64,
    pub ssc: f64,
    pub ssd: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<TaskRow>,
    pub seed: u64,
    pub config_hash: String,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.task.as_str(),
                r.n_speakers,
                r.n_desc,
                r.sst,
                r.ssc,
                r.ssd,
                self.seed,
                self.config_hash
            ));
        }
        out
    }
}

/// Runs a checkpoint's projectors and aggregator over a batch of raw
/// single-modality descriptions, producing conditioning embeddings.
pub fn embed_descriptions(
    cfg: &RunConfig,
    params: &ParamSet,
    modality: Modality,
    raw: &Tensor,
) -> Result<Tensor> {
    let (spec, prefix) = match modality {
        Modality::Face => (cfg.face_spec(), "proj.face"),
        Modality::Text => (cfg.text_spec(), "proj.text"),
        Modality::Speech => (cfg.speech_spec(), "proj.speech"),
    };
    let mut g = Graph::new();
    let h = spec.handles(&mut g, params, prefix, false)?;
    let raw_id = g.constant(raw.clone());
    let projected = kvformer::project(&mut g, &spec, &h, raw_id)?;
    let v = if cfg.mva_enabled {
        let kv = cfg.kv_config();
        let kvh = kvformer::handles(&mut g, params, "mva", &kv, false)?;
        kvformer::forward(&mut g, &kv, &kvh, projected)?
    } else {
        projected
    };
    Ok(g.value(v).clone())
}

fn run_task(
    cfg: &RunConfig,
    params: &ParamSet,
    world: &World,
    set: &EvalSet,
    probe: &Probe,
    task: Task,
) -> Result<(TaskRow, Tensor, Vec<usize>)> {
    let e = set.len();
    let per = cfg.eval_per_speaker;
    let n = e * per;
    let dd = world.cfg.data_dim;
    let modality = task.modality();
    let width = world.modality_dim(modality);
    let mut rng = substream(cfg.seed, &format!("eval.task.{}", task.as_str()));

    // draw order per description: observation, token content, noise
    let mut raw = Vec::with_capacity(n * width);
    let mut tokens = Vec::with_capacity(n * world.cfg.token_dim);
    let mut x0 = Vec::with_capacity(n * dd);
    let mut labels = Vec::with_capacity(n);
    for k in 0..e {
        let latent = set.latents.row(k);
        for _ in 0..per {
            raw.extend_from_slice(observe_latent(world, modality, latent, &mut rng).data());
            let content = world.draw_token_content(&mut rng);
            let toks = if task.voice_conversion() {
                let source = set.latents.row((k + 1) % e);
                world.leak_tokens(&content, source)?
            } else {
                content
            };
            tokens.extend_from_slice(cfm::pool_tokens(&toks)?.data());
            for _ in 0..dd {
                x0.push(rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(set.ids[k]);
        }
    }
    let raw = Tensor::from_vec(vec![n, width], raw)?;
    let tokens = Tensor::from_vec(vec![n, world.cfg.token_dim], tokens)?;
    let x0 = Tensor::from_vec(vec![n, dd], x0)?;

    let cond = embed_descriptions(cfg, params, modality, &raw)?;
    let generated = cfm::sample_ode_batch(
        &cfg.field_config(),
        params,
        "field",
        &cond,
        Some(&tokens),
        &x0,
        cfg.ode_steps,
    )?;
    let est = probe.apply(&generated)?;

    let d = world.cfg.speaker_dim;
    let mut target = Vec::with_capacity(n * d);
    for k in 0..e {
        for _ in 0..per {
            target.extend_from_slice(set.embeddings.row(k));
        }
    }
    let target = Tensor::from_vec(vec![n, d], target)?;
    let groups: Vec<Tensor> = (0..e)
        .map(|k| {
            Tensor::from_vec(
                vec![per, d],
                est.data()[k * per * d..(k + 1) * per * d].to_vec(),
            )
        })
        .collect::<Result<_>>()?;

    let row = TaskRow {
        task,
        n_speakers: e,
        n_desc: per,
        sst: sst(&est, &target)?,
        ssc: ssc(&groups)?,
        ssd: ssd(&groups)?,
    };
    Ok((row, est, labels))
}

/// Scores a checkpoint on the requested generation tasks. Never mutates
/// the checkpoint; identical inputs produce identical reports. With an
/// output directory, also dumps the probe-read embeddings per task for
/// external plotting.
pub fn run_benchmark(
    cfg: &RunConfig,
    ck: &Checkpoint,
    set: &EvalSet,
    tasks: &[Task],
    out_dir: Option<&Path>,
) -> Result<BenchReport> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(CoreError::Contract("no benchmark tasks requested".into()));
    }
    trainer::check_structure(&trainer::init_params(cfg)?, &ck.params)?;
    let world = World::generate(cfg.world_config(), cfg.seed)?;
    check_disjoint(&world, set)?;
    let probe = fit_probe(&world, set, cfg.probe_per_speaker, cfg.seed)?;

    let mut rows = Vec::with_capacity(tasks.len());
    for &task in tasks {
        let (row, est, labels) = run_task(cfg, &ck.params, &world, set, &probe, task)?;
        if let Some(dir) = out_dir {
            embfile::save_embeddings(&dir.join(format!("{}.emb", task.as_str())), &est, &labels)?;
        }
        rows.push(row);
    }
    Ok(BenchReport {
        rows,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    })
}

/// Speaker-swap score: condition on each held-out target's true voice
/// embedding while tokens leak a different speaker, then read the
/// generations back with the probe. High values mean conditioning wins
/// over token leakage.
pub fn speaker_swap_sst(
    cfg: &RunConfig,
    params: &ParamSet,
    world: &World,
    set: &EvalSet,
    probe: &Probe,
) -> Result<f64> {
    let e = set.len();
    let dd = world.cfg.data_dim;
    let mut rng = substream(cfg.seed, "eval.swap");
    let mut tokens = Vec::with_capacity(e * world.cfg.token_dim);
    let mut x0 = Vec::with_capacity(e * dd);
    for k in 0..e {
        let content = world.draw_token_content(&mut rng);
        let source = set.latents.row((k + 1) % e);
        let toks = world.leak_tokens(&content, source)?;
        tokens.extend_from_slice(cfm::pool_tokens(&toks)?.data());
        for _ in 0..dd {
            x0.push(rng.sample::<f64, _>(StandardNormal));
        }
    }
    let tokens = Tensor::from_vec(vec![e, world.cfg.token_dim], tokens)?;
    let x0 = Tensor::from_vec(vec![e, dd], x0)?;
    let generated = cfm::sample_ode_batch(
        &cfg.field_config(),
        params,
        "field",
        &set.embeddings,
        Some(&tokens),
        &x0,
        cfg.ode_steps,
    )?;
    sst(&probe.apply(&generated)?, &set.embeddings)
}

// ── data-scale sweep ───────────────────────────────────────────────────

pub struct ScalePoint {
    pub scale: f64,
    pub report: BenchReport,
}

/// Shares one field-training run, then retrains the alignment stage at
/// each extra-description fraction and benchmarks it.
pub fn data_scale_sweep(cfg: &RunConfig, scales: &[f64], tasks: &[Task]) -> Result<Vec<ScalePoint>> {
    if scales.is_empty() {
        return Err(CoreError::Contract("scale list is empty".into()));
    }
    if scales.windows(2).any(|w| w[1] < w[0]) {
        return Err(CoreError::Contract(format!(
            "scales must be nondecreasing, got {scales:?}"
        )));
    }
    let mut pre_cfg = cfg.clone();
    pre_cfg.stage = Stage::Pretrain;
    let mut shared = trainer::train(&pre_cfg, None, None)?.checkpoint;
    if cfg.self_distill_enabled {
        let mut d_cfg = cfg.clone();
        d_cfg.stage = Stage::SelfDistill;
        shared = trainer::train(&d_cfg, Some(&shared), None)?.checkpoint;
    }

    let mut points = Vec::with_capacity(scales.len());
    for &scale in scales {
        let mut a_cfg = cfg.clone();
        a_cfg.stage = Stage::Align;
        a_cfg.data_scale = scale;
        let out = trainer::train(&a_cfg, Some(&shared), None)?;
        let world = World::generate(a_cfg.world_config(), a_cfg.seed)?;
        let set = build_eval_set(&world, &a_cfg)?;
        let report = run_benchmark(&a_cfg, &out.checkpoint, &set, tasks, None)?;
        points.push(ScalePoint { scale, report });
    }
    Ok(points)
}

pub fn sweep_csv(points: &[ScalePoint]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for p in points {
        for r in &p.report.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                p.scale,
                r.task.as_str(),
                r.n_speakers,
                r.n_desc,
                r.sst,
                r.ssc,
                r.ssd,
                p.report.seed,
                p.report.config_hash
            ));
        }
    }
    out
}
