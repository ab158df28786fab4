//! Verb implementations behind the thin clap surface in `main`.

use crate::run_dir::RunDir;
use crate::{Ablate, Common, Eval, GenData, GradCheck, Sample, Sweep, Train, Verb};
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use voicespace_core::cfm;
use voicespace_core::checkpoint::load_checkpoint;
use voicespace_core::config::{RunConfig, Stage};
use voicespace_core::embfile;
use voicespace_core::eval::{self, Task};
use voicespace_core::kvformer::Modality;
use voicespace_core::rng::substream;
use voicespace_core::synth::World;
use voicespace_core::tensor::Tensor;
use voicespace_core::trainer;
use voicespace_core::{CoreError, Result};

pub const SEED_ENV: &str = "VOICESPACE_SEED";

pub fn dispatch(verb: Verb) -> Result<()> {
    match verb {
        Verb::GenData(a) => gen_data(a),
        Verb::Train(a) => train(a),
        Verb::Eval(a) => eval_verb(a),
        Verb::Sample(a) => sample(a),
        Verb::GradCheck(a) => grad_check(a),
        Verb::Ablate(a) => ablate(a),
        Verb::Sweep(a) => sweep(a),
    }
}

/// Layered config resolution. The environment seed sits between the
/// file and explicit `--set` overrides, so a `--set run.seed=...` still
/// wins.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Io(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Ok(raw) = std::env::var(SEED_ENV) {
        cfg.seed = raw.parse().map_err(|_| CoreError::Config {
            key: SEED_ENV.into(),
            detail: format!("expected an unsigned integer, got `{raw}`"),
        })?;
    }
    for assign in &common.set {
        let Some((key, value)) = assign.split_once('=') else {
            return Err(CoreError::Config {
                key: assign.clone(),
                detail: "expected KEY=VALUE".into(),
            });
        };
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

/// Opens the output directory and echoes the resolved config into it.
fn open(common: &Common, cfg: &RunConfig) -> Result<RunDir> {
    let mut dir = RunDir::create(&common.out)?;
    dir.write("config.txt", cfg.to_text().as_bytes())?;
    Ok(dir)
}

/// Saves an embedding table plus its label sidecar and records both.
fn write_table(dir: &mut RunDir, name: &str, rows: &Tensor, labels: &[usize]) -> Result<()> {
    embfile::save_embeddings(&dir.path().join(name), rows, labels)?;
    dir.absorb(name)?;
    let stem = name.strip_suffix(".emb").unwrap_or(name);
    dir.absorb(&format!("{stem}.labels"))
}

fn gen_data(a: GenData) -> Result<()> {
    let cfg = resolve(&a.common)?;
    cfg.validate()?;
    let mut dir = open(&a.common, &cfg)?;
    let world = World::generate(cfg.world_config(), cfg.seed)?;
    let s = cfg.speakers;
    let labels: Vec<usize> = (0..s).collect();

    let mut voices = Vec::with_capacity(s * cfg.speaker_dim);
    for id in 0..s {
        voices.extend_from_slice(world.speaker_embedding(id)?.data());
    }
    let voices = Tensor::from_vec(vec![s, cfg.speaker_dim], voices)?;
    write_table(&mut dir, "speakers.emb", &voices, &labels)?;

    let mut rng = substream(cfg.seed, "cli.gen_data");
    for m in [Modality::Face, Modality::Text, Modality::Speech] {
        let width = world.modality_dim(m);
        let mut rows = Vec::with_capacity(s * width);
        for id in 0..s {
            rows.extend_from_slice(world.observe(m, id, &mut rng)?.data());
        }
        let rows = Tensor::from_vec(vec![s, width], rows)?;
        write_table(&mut dir, &format!("{}.emb", m.as_str()), &rows, &labels)?;
    }
    dir.finish()
}

fn train(a: Train) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(stage) = &a.stage {
        cfg.stage = Stage::parse(stage)?;
    }
    let mut dir = open(&a.common, &cfg)?;

    // pretraining starts from scratch; later stages read run.init_from
    // and the trainer reports which stage is missing when it is unset
    let init = match (cfg.stage, &cfg.init_from) {
        (Stage::Pretrain, _) | (_, None) => None,
        (_, Some(path)) => Some(load_checkpoint(std::path::Path::new(path))?),
    };
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let out = trainer::train(&cfg, init.as_ref(), resume)?;

    dir.write("checkpoint.ck", &out.checkpoint.to_bytes())?;
    dir.write("trace.csv", trainer::trace_csv(&out.trace).as_bytes())?;
    dir.finish()
}

fn eval_verb(a: Eval) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let tasks: Vec<Task> = a
        .tasks
        .iter()
        .map(|t| Task::parse(t))
        .collect::<Result<_>>()?;
    let mut dir = open(&a.common, &cfg)?;
    let world = World::generate(cfg.world_config(), cfg.seed)?;
    let set = eval::build_eval_set(&world, &cfg)?;
    let report = eval::run_benchmark(&cfg, &ck, &set, &tasks, Some(dir.path()))?;
    for t in &tasks {
        dir.absorb(&format!("{}.emb", t.as_str()))?;
        dir.absorb(&format!("{}.labels", t.as_str()))?;
    }
    dir.write("report.csv", report.to_csv().as_bytes())?;
    dir.finish()
}

fn sample(a: Sample) -> Result<()> {
    let mut cfg = resolve(&a.common)?;
    if let Some(steps) = a.steps {
        cfg.ode_steps = steps;
    }
    cfg.validate()?;
    let modality = Modality::parse(&a.modality)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut dir = open(&a.common, &cfg)?;
    let world = World::generate(cfg.world_config(), cfg.seed)?;

    // condition on the first eval-sized slice of world speakers, one
    // batch of fresh observations per speaker
    let shown = cfg.eval_speakers.min(cfg.speakers);
    let per = cfg.eval_per_speaker;
    let n = shown * per;
    let width = world.modality_dim(modality);
    let mut rng = substream(cfg.seed, "cli.sample");
    let mut raw = Vec::with_capacity(n * width);
    let mut tokens = Vec::with_capacity(n * cfg.token_dim);
    let mut x0 = Vec::with_capacity(n * cfg.data_dim);
    let mut labels = Vec::with_capacity(n);
    for id in 0..shown {
        for _ in 0..per {
            raw.extend_from_slice(world.observe(modality, id, &mut rng)?.data());
            let content = world.draw_token_content(&mut rng);
            tokens.extend_from_slice(cfm::pool_tokens(&content)?.data());
            for _ in 0..cfg.data_dim {
                x0.push(rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(id);
        }
    }
    let raw = Tensor::from_vec(vec![n, width], raw)?;
    let tokens = Tensor::from_vec(vec![n, cfg.token_dim], tokens)?;
    let x0 = Tensor::from_vec(vec![n, cfg.data_dim], x0)?;

    let cond = eval::embed_descriptions(&cfg, &ck.params, modality, &raw)?;
    let generated = cfm::sample_ode_batch(
        &cfg.field_config(),
        &ck.params,
        "field",
        &cond,
        Some(&tokens),
        &x0,
        cfg.ode_steps,
    )?;
    write_table(&mut dir, "generated.emb", &generated, &labels)?;
    dir.finish()
}

fn grad_check(a: GradCheck) -> Result<()> {
    let cfg = resolve(&a.common)?;
    cfg.validate()?;
    let mut dir = open(&a.common, &cfg)?;
    let rows = crate::gradcheck::run(cfg.seed)?;
    let mut csv = String::from(crate::gradcheck::CSV_HEADER);
    csv.push('\n');
    for (name, err) in &rows {
        let _ = writeln!(csv, "{name},{err:e}");
    }
    dir.write("gradcheck.csv", csv.as_bytes())?;
    dir.finish()?;
    if let Some((name, err)) = rows
        .iter()
        .find(|(_, e)| !(*e < crate::gradcheck::TOLERANCE))
    {
        return Err(CoreError::Contract(format!(
            "gradient check failed for {name}: max relative error {err:.2e} not below {:.0e}",
            crate::gradcheck::TOLERANCE
        )));
    }
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let mut axes: Vec<&str> = Vec::new();
    for t in &a.grid {
        match t.as_str() {
            "mva" | "softcl" => {
                if !axes.contains(&t.as_str()) {
                    axes.push(t.as_str());
                }
            }
            other => {
                return Err(CoreError::Config {
                    key: format!("--grid {other}"),
                    detail: "expected a comma-separated subset of: mva, softcl".into(),
                })
            }
        }
    }
    let mut dir = open(&a.common, &cfg)?;

    let mut csv = String::from("mva,softcl,");
    csv.push_str(eval::REPORT_HEADER);
    csv.push('\n');
    // combo bit i clears axis i, so the first row is the full model
    for combo in 0..(1usize << axes.len()) {
        let mut arm = cfg.clone();
        for (i, axis) in axes.iter().enumerate() {
            let on = combo & (1 << i) == 0;
            match *axis {
                "mva" => arm.mva_enabled = on,
                _ => arm.softcl_enabled = on,
            }
        }
        let mut pre_cfg = arm.clone();
        pre_cfg.stage = Stage::Pretrain;
        let pre = trainer::train(&pre_cfg, None, None)?;
        let mut al_cfg = arm.clone();
        al_cfg.stage = Stage::Align;
        let al = trainer::train(&al_cfg, Some(&pre.checkpoint), None)?;
        let world = World::generate(arm.world_config(), arm.seed)?;
        let set = eval::build_eval_set(&world, &al_cfg)?;
        let report = eval::run_benchmark(&al_cfg, &al.checkpoint, &set, &Task::ALL, None)?;
        for line in report.to_csv().lines().skip(1) {
            let _ = writeln!(
                csv,
                "{},{},{line}",
                arm.mva_enabled, arm.softcl_enabled
            );
        }
    }
    dir.write("ablate.csv", csv.as_bytes())?;
    dir.finish()
}

fn sweep(a: Sweep) -> Result<()> {
    let cfg = resolve(&a.common)?;
    let points = eval::data_scale_sweep(&cfg, &a.scales, &Task::ALL)?;
    let mut dir = open(&a.common, &cfg)?;
    dir.write("sweep.csv", eval::sweep_csv(&points).as_bytes())?;
    dir.finish()
}
