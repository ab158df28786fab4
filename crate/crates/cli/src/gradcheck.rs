//! Finite-difference audit behind the grad-check verb. Every training
//! loss is rebuilt on small random shapes, differentiated analytically
//! and by central differences, and reported as one max-relative-error
//! row per loss.

use rand::Rng;
use voicespace_core::cfm::{self, FieldConfig, FieldMode};
use voicespace_core::fdiff::{finite_diff_grad, DEFAULT_STEP};
use voicespace_core::graph::{Graph, TensorId};
use voicespace_core::params::ParamSet;
use voicespace_core::rng::substream;
use voicespace_core::softcl;
use voicespace_core::tensor::Tensor;
use voicespace_core::Result;

pub const CSV_HEADER: &str = "loss,max_rel_err";
pub const TOLERANCE: f64 = 1e-3;
const CASES: usize = 3;

pub fn run(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = substream(seed, "cli.grad_check");
    Ok(vec![
        (
            "cfm_pretrain".into(),
            cfm_family(FieldMode::Pretrain, &mut rng)?,
        ),
        ("cfm_aggregated".into(), cfm_family(FieldMode::Mva, &mut rng)?),
        (
            "cfm_distill".into(),
            cfm_family(FieldMode::SelfDistill, &mut rng)?,
        ),
        ("infonce".into(), infonce_family(&mut rng)?),
        ("intra".into(), intra_family(&mut rng)?),
        ("total".into(), total_family(&mut rng)?),
    ])
}

fn worst_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs().max(n.abs()) + 1e-8))
        .fold(0.0, f64::max)
}

/// Central differences for every named tensor against the reverse-mode
/// gradients already on `g`.
fn audit(
    set: &ParamSet,
    ids: &[(String, TensorId)],
    g: &Graph,
    value: impl Fn(&ParamSet) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for (name, id) in ids {
        let analytic: Vec<f64> = g
            .grad(*id)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; set.get(name).unwrap().numel()]);
        let base = set.get(name)?.data().to_vec();
        let numeric = finite_diff_grad(
            |x| {
                let mut probe = set.clone();
                probe.get_mut(name)?.data_mut().copy_from_slice(x);
                value(&probe)
            },
            &base,
            DEFAULT_STEP,
        )?;
        worst = worst.max(worst_rel(&analytic, &numeric));
    }
    Ok(worst)
}

fn field_ids(h: &cfm::FieldHandles) -> Vec<(String, TensorId)> {
    let mut ids = Vec::new();
    for (i, (w, b)) in h.layers.iter().enumerate() {
        ids.push((format!("field.layer{i}.w"), *w));
        ids.push((format!("field.layer{i}.b"), *b));
    }
    ids
}

fn cfm_family<R: Rng>(mode: FieldMode, rng: &mut R) -> Result<f64> {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let n = 2;
        let data_dim = 2 + case % 2;
        let cond_dim = 2;
        let token_dim = case % 3;
        let mut fcfg = FieldConfig::new(data_dim, cond_dim, token_dim);
        fcfg.hidden = vec![4];
        let mut set = ParamSet::new();
        cfm::init_into(&mut set, "field", &fcfg, rng)?;
        set.insert("cond", Tensor::randn(vec![n, cond_dim], 1.0, rng))?;
        let x0 = Tensor::randn(vec![n, data_dim], 1.0, rng);
        let x1 = Tensor::randn(vec![n, data_dim], 1.0, rng);
        let ts: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let tokens = if token_dim > 0 {
            Some(Tensor::randn(vec![n, token_dim], 1.0, rng))
        } else {
            None
        };
        let prompt = if mode == FieldMode::Pretrain {
            Some(Tensor::randn(vec![n, data_dim], 1.0, rng))
        } else {
            None
        };
        let squared = case % 2 == 0;

        let value = |probe: &ParamSet| -> Result<f64> {
            let mut g = Graph::new();
            let h = cfm::handles(&mut g, probe, "field", &fcfg, false)?;
            let cid = g.constant(probe.get("cond")?.clone());
            let loss = cfm::cfm_loss(
                &mut g,
                &fcfg,
                &h,
                mode,
                &x0,
                &x1,
                &ts,
                Some(cid),
                tokens.as_ref(),
                prompt.as_ref(),
                squared,
            )?;
            g.value(loss).item()
        };

        let mut g = Graph::new();
        let h = cfm::handles(&mut g, &set, "field", &fcfg, true)?;
        let cid = g.param(set.get("cond")?.clone());
        let loss = cfm::cfm_loss(
            &mut g,
            &fcfg,
            &h,
            mode,
            &x0,
            &x1,
            &ts,
            Some(cid),
            tokens.as_ref(),
            prompt.as_ref(),
            squared,
        )?;
        g.backward(loss)?;
        let mut ids = field_ids(&h);
        ids.push(("cond".into(), cid));
        worst = worst.max(audit(&set, &ids, &g, value)?);
    }
    Ok(worst)
}

fn infonce_family<R: Rng>(rng: &mut R) -> Result<f64> {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let n = 2 + case;
        let d = 3;
        let mut set = ParamSet::new();
        set.insert("v", Tensor::randn(vec![n, d], 1.0, rng))?;
        set.insert("s", Tensor::randn(vec![n, d], 1.0, rng))?;
        set.insert("tau", Tensor::from_vec(vec![1], vec![0.2 + 0.1 * case as f64])?)?;

        let value = |probe: &ParamSet| -> Result<f64> {
            let mut g = Graph::new();
            let v = g.constant(probe.get("v")?.clone());
            let s = g.constant(probe.get("s")?.clone());
            let tau = g.constant(probe.get("tau")?.clone());
            let loss = softcl::inter_loss(&mut g, v, s, tau)?;
            g.value(loss).item()
        };

        let mut g = Graph::new();
        let v = g.param(set.get("v")?.clone());
        let s = g.param(set.get("s")?.clone());
        let tau = g.param(set.get("tau")?.clone());
        let loss = softcl::inter_loss(&mut g, v, s, tau)?;
        g.backward(loss)?;
        let ids = vec![("v".into(), v), ("s".into(), s), ("tau".into(), tau)];
        worst = worst.max(audit(&set, &ids, &g, value)?);
    }
    Ok(worst)
}

/// The intra loss detaches its whole teacher branch, so the difference
/// quotient must hold that branch fixed at the base temperature.
fn intra_family<R: Rng>(rng: &mut R) -> Result<f64> {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let n = 3 + case;
        let d = 3;
        let speech = Tensor::randn(vec![n, d], 1.0, rng);
        let mut set = ParamSet::new();
        set.insert("v", Tensor::randn(vec![n, d], 1.0, rng))?;
        set.insert("tau", Tensor::from_vec(vec![1], vec![0.2 + 0.1 * case as f64])?)?;

        let teacher = {
            let mut g = Graph::new();
            let s = g.constant(speech.clone());
            let tau = g.constant(set.get("tau")?.clone());
            let p = softcl::soft_probs(&mut g, s, tau)?;
            g.value(p).clone()
        };
        let value = |probe: &ParamSet| -> Result<f64> {
            let mut g = Graph::new();
            let v = g.constant(probe.get("v")?.clone());
            let tau = g.constant(probe.get("tau")?.clone());
            let target = g.constant(teacher.clone());
            let probs = softcl::soft_probs(&mut g, v, tau)?;
            let loss = g.kl_rows(target, probs)?;
            g.value(loss).item()
        };

        let mut g = Graph::new();
        let v = g.param(set.get("v")?.clone());
        let s = g.constant(speech.clone());
        let tau = g.param(set.get("tau")?.clone());
        let loss = softcl::intra_loss(&mut g, v, s, tau)?;
        g.backward(loss)?;
        let ids = vec![("v".into(), v), ("tau".into(), tau)];
        worst = worst.max(audit(&set, &ids, &g, value)?);
    }
    Ok(worst)
}

fn total_family<R: Rng>(rng: &mut R) -> Result<f64> {
    let mut worst = 0.0f64;
    for case in 0..CASES {
        let n = 3;
        let d = 3;
        let data_dim = 2;
        let token_dim = case % 2;
        let mut fcfg = FieldConfig::new(data_dim, d, token_dim);
        fcfg.hidden = vec![4];
        let mut set = ParamSet::new();
        cfm::init_into(&mut set, "field", &fcfg, rng)?;
        set.insert("v", Tensor::randn(vec![n, d], 1.0, rng))?;
        set.insert("tau", Tensor::from_vec(vec![1], vec![0.25])?)?;
        let speech = Tensor::randn(vec![n, d], 1.0, rng);
        let x0 = Tensor::randn(vec![n, data_dim], 1.0, rng);
        let x1 = Tensor::randn(vec![n, data_dim], 1.0, rng);
        let ts: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let tokens = if token_dim > 0 {
            Some(Tensor::randn(vec![n, token_dim], 1.0, rng))
        } else {
            None
        };
        let squared = case % 2 == 0;
        let (li, le) = (0.05 + 0.1 * case as f64, 0.3 - 0.05 * case as f64);

        let teacher = {
            let mut g = Graph::new();
            let s = g.constant(speech.clone());
            let tau = g.constant(set.get("tau")?.clone());
            let p = softcl::soft_probs(&mut g, s, tau)?;
            g.value(p).clone()
        };
        let value = |probe: &ParamSet| -> Result<f64> {
            let mut g = Graph::new();
            let h = cfm::handles(&mut g, probe, "field", &fcfg, false)?;
            let v = g.constant(probe.get("v")?.clone());
            let tau = g.constant(probe.get("tau")?.clone());
            let cfm_id = cfm::cfm_loss(
                &mut g,
                &fcfg,
                &h,
                FieldMode::Mva,
                &x0,
                &x1,
                &ts,
                Some(v),
                tokens.as_ref(),
                None,
                squared,
            )?;
            let target = g.constant(teacher.clone());
            let probs = softcl::soft_probs(&mut g, v, tau)?;
            let intra = g.kl_rows(target, probs)?;
            let s = g.constant(speech.clone());
            let inter = softcl::inter_loss(&mut g, v, s, tau)?;
            let total = softcl::combine(&mut g, cfm_id, intra, inter, li, le)?;
            g.value(total).item()
        };

        let mut g = Graph::new();
        let h = cfm::handles(&mut g, &set, "field", &fcfg, true)?;
        let v = g.param(set.get("v")?.clone());
        let tau = g.param(set.get("tau")?.clone());
        let s = g.constant(speech.clone());
        let cfm_id = cfm::cfm_loss(
            &mut g,
            &fcfg,
            &h,
            FieldMode::Mva,
            &x0,
            &x1,
            &ts,
            Some(v),
            tokens.as_ref(),
            None,
            squared,
        )?;
        let intra = softcl::intra_loss(&mut g, v, s, tau)?;
        let inter = softcl::inter_loss(&mut g, v, s, tau)?;
        let total = softcl::combine(&mut g, cfm_id, intra, inter, li, le)?;
        g.backward(total)?;
        let mut ids = field_ids(&h);
        ids.push(("v".into(), v));
        ids.push(("tau".into(), tau));
        worst = worst.max(audit(&set, &ids, &g, value)?);
    }
    Ok(worst)
}
