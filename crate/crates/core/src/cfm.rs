//! Conditional flow matching on the straight-line transport path.
//!
//! Training regresses a pointwise field network onto the constant
//! target x1 - x0 evaluated at interpolated points. The network input
//! is a fixed-width concatenation [x_t | time features | condition |
//! pooled tokens | prompt]; modes differ only in what fills the
//! condition slot and whether the prompt slot carries a masked copy of
//! x1 (pretraining) or zeros (the prompt-free variants). Keeping the
//! width fixed lets one parameter set serve all three modes.
//!
//! Sampling integrates the learned field with explicit Euler from t=0
//! to t=1. The distillation pair generator runs that sampler with a
//! wrong-speaker condition and re-tokenizes the result, producing
//! triples whose token leakage contradicts the speaker label.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::params::ParamSet;
use crate::synth::World;
use crate::tensor::Tensor;

/// Width of the sinusoidal time features fed to the field network.
pub const TIME_EMBED_WIDTH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(CoreError::Contract(format!(
                "unknown activation {other:?}, expected tanh|relu"
            ))),
        }
    }
}

/// Which conditioning contract the loss enforces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldMode {
    /// Condition on a raw speaker embedding plus a masked-x1 prompt.
    Pretrain,
    /// Condition on an aggregated modality embedding; no prompt.
    Mva,
    /// Condition on a raw speaker embedding; no prompt.
    SelfDistill,
}

#[derive(Clone, Debug)]
pub struct FieldConfig {
    /// Width D of data points.
    pub data_dim: usize,
    /// Width of the condition slot (0 disables the slot).
    pub cond_dim: usize,
    /// Width of the pooled-token slot (0 disables the slot).
    pub token_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl FieldConfig {
    pub fn new(data_dim: usize, cond_dim: usize, token_dim: usize) -> Self {
        FieldConfig {
            data_dim,
            cond_dim,
            token_dim,
            hidden: vec![96, 96],
            activation: Activation::Tanh,
        }
    }

    /// Total network input width: x_t, time features, condition,
    /// pooled tokens, prompt.
    pub fn input_width(&self) -> usize {
        2 * self.data_dim + TIME_EMBED_WIDTH + self.cond_dim + self.token_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(CoreError::Contract("field data_dim must be >= 1".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(CoreError::Contract(format!(
                "field hidden widths must be positive, got {:?}",
                self.hidden
            )));
        }
        Ok(())
    }

    fn layer_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend_from_slice(&self.hidden);
        w.push(self.data_dim);
        w
    }
}

pub struct FieldHandles {
    pub layers: Vec<(TensorId, TensorId)>,
}

/// Registers freshly initialized field weights under a prefix.
pub fn init_into<R: Rng>(
    set: &mut ParamSet,
    prefix: &str,
    cfg: &FieldConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let widths = cfg.layer_widths();
    for i in 0..widths.len() - 1 {
        let (w_in, w_out) = (widths[i], widths[i + 1]);
        set.insert(
            format!("{prefix}.layer{i}.w"),
            Tensor::randn(vec![w_in, w_out], 1.0 / (w_in as f64).sqrt(), rng),
        )?;
        set.insert(format!("{prefix}.layer{i}.b"), Tensor::zeros(vec![w_out]))?;
    }
    Ok(())
}

pub fn handles(
    g: &mut Graph,
    set: &ParamSet,
    prefix: &str,
    cfg: &FieldConfig,
    trainable: bool,
) -> Result<FieldHandles> {
    let widths = cfg.layer_widths();
    let mut layers = Vec::with_capacity(widths.len() - 1);
    for i in 0..widths.len() - 1 {
        let w = set.get(&format!("{prefix}.layer{i}.w"))?.clone();
        let b = set.get(&format!("{prefix}.layer{i}.b"))?.clone();
        let (w, b) = if trainable {
            (g.param(w), g.param(b))
        } else {
            (g.constant(w), g.constant(b))
        };
        layers.push((w, b));
    }
    Ok(FieldHandles { layers })
}

/// Sinusoidal features of t at octave frequencies.
pub fn time_embed(t: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(TIME_EMBED_WIDTH);
    for k in 0..TIME_EMBED_WIDTH / 2 {
        let w = std::f64::consts::PI * (1 << k) as f64;
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

// ── transport path ─────────────────────────────────────────────────────

/// Straight-line interpolant (1-t)·x0 + t·x1.
pub fn ot_path(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "ot_path",
            left: x0.shape().to_vec(),
            right: x1.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(CoreError::Contract(format!("path time {t} outside [0, 1]")));
    }
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Tensor::from_vec(x0.shape().to_vec(), data)
}

/// The constant target field x1 - x0.
pub fn ot_target(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "ot_target",
            left: x0.shape().to_vec(),
            right: x1.shape().to_vec(),
        });
    }
    let data = x0.data().iter().zip(x1.data()).map(|(a, b)| b - a).collect();
    Tensor::from_vec(x0.shape().to_vec(), data)
}

/// Mean over token rows, the pooled content summary.
pub fn pool_tokens(tokens: &Tensor) -> Result<Tensor> {
    if tokens.shape().len() != 2 {
        return Err(CoreError::DimError {
            op: "pool_tokens",
            detail: format!("expected token matrix, got shape {:?}", tokens.shape()),
        });
    }
    let (rows, cols) = (tokens.rows(), tokens.cols());
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j] += tokens.at(i, j) / rows as f64;
        }
    }
    Ok(Tensor::vector(out))
}

// ── field evaluation ───────────────────────────────────────────────────

/// Evaluates the field network on a batch. `cond` is a graph tensor so
/// gradients can flow back into an upstream aggregator; tokens and
/// prompt are data. Absent slots are zero-filled to keep the input
/// width fixed.
pub fn field_forward(
    g: &mut Graph,
    cfg: &FieldConfig,
    h: &FieldHandles,
    xt: TensorId,
    ts: &[f64],
    cond: Option<TensorId>,
    tokens: Option<&Tensor>,
    prompt: Option<&Tensor>,
) -> Result<TensorId> {
    let n = {
        let shape = g.value(xt).shape();
        if shape.len() != 2 || shape[1] != cfg.data_dim {
            return Err(CoreError::DimError {
                op: "field_forward",
                detail: format!("expected x_t [N x {}], got {:?}", cfg.data_dim, shape),
            });
        }
        shape[0]
    };
    if ts.len() != n {
        return Err(CoreError::DimError {
            op: "field_forward",
            detail: format!("{n} rows but {} time values", ts.len()),
        });
    }

    let mut temb = Vec::with_capacity(n * TIME_EMBED_WIDTH);
    for &t in ts {
        temb.extend(time_embed(t));
    }
    let temb = g.constant(Tensor::from_vec(vec![n, TIME_EMBED_WIDTH], temb)?);

    let mut parts = vec![xt, temb];
    if cfg.cond_dim > 0 {
        let cid = match cond {
            Some(c) => {
                let shape = g.value(c).shape();
                if shape != [n, cfg.cond_dim] {
                    return Err(CoreError::DimError {
                        op: "field_forward",
                        detail: format!(
                            "condition shape {shape:?} does not match [{n} x {}]",
                            cfg.cond_dim
                        ),
                    });
                }
                c
            }
            None => g.constant(Tensor::zeros(vec![n, cfg.cond_dim])),
        };
        parts.push(cid);
    }
    if cfg.token_dim > 0 {
        let tid = match tokens {
            Some(t) => {
                if t.shape() != [n, cfg.token_dim] {
                    return Err(CoreError::DimError {
                        op: "field_forward",
                        detail: format!(
                            "token shape {:?} does not match [{n} x {}]",
                            t.shape(),
                            cfg.token_dim
                        ),
                    });
                }
                g.constant(t.clone())
            }
            None => g.constant(Tensor::zeros(vec![n, cfg.token_dim])),
        };
        parts.push(tid);
    }
    let pid = match prompt {
        Some(p) => {
            if p.shape() != [n, cfg.data_dim] {
                return Err(CoreError::DimError {
                    op: "field_forward",
                    detail: format!(
                        "prompt shape {:?} does not match [{n} x {}]",
                        p.shape(),
                        cfg.data_dim
                    ),
                });
            }
            g.constant(p.clone())
        }
        None => g.constant(Tensor::zeros(vec![n, cfg.data_dim])),
    };
    parts.push(pid);

    let mut cur = g.concat_cols(&parts)?;
    let last = h.layers.len() - 1;
    for (i, &(w, b)) in h.layers.iter().enumerate() {
        let lin = g.matmul(cur, w)?;
        cur = g.add_row_bias(lin, b)?;
        if i < last {
            cur = match cfg.activation {
                Activation::Tanh => g.tanh(cur)?,
                Activation::Relu => g.relu(cur)?,
            };
        }
    }
    Ok(cur)
}

/// Flow-matching regression loss over a batch: mean over samples of the
/// L1 (or squared L2) distance between the constant target and the
/// field at the interpolated point. The mode fixes the prompt contract:
/// pretraining requires one, the prompt-free variants forbid it.
#[allow(clippy::too_many_arguments)]
pub fn cfm_loss(
    g: &mut Graph,
    cfg: &FieldConfig,
    h: &FieldHandles,
    mode: FieldMode,
    x0: &Tensor,
    x1: &Tensor,
    ts: &[f64],
    cond: Option<TensorId>,
    tokens: Option<&Tensor>,
    prompt: Option<&Tensor>,
    squared_l2: bool,
) -> Result<TensorId> {
    if x0.shape() != x1.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "cfm_loss",
            left: x0.shape().to_vec(),
            right: x1.shape().to_vec(),
        });
    }
    if x0.shape().len() != 2 || x0.shape()[1] != cfg.data_dim {
        return Err(CoreError::DimError {
            op: "cfm_loss",
            detail: format!("expected batch [N x {}], got {:?}", cfg.data_dim, x0.shape()),
        });
    }
    let n = x0.shape()[0];
    if n == 0 || ts.len() != n {
        return Err(CoreError::Contract(format!(
            "cfm_loss needs a nonempty batch with one t per row, got {n} rows and {} times",
            ts.len()
        )));
    }
    for &t in ts {
        if !(0.0..=1.0).contains(&t) {
            return Err(CoreError::Contract(format!("path time {t} outside [0, 1]")));
        }
    }
    match mode {
        FieldMode::Pretrain => {
            if prompt.is_none() {
                return Err(CoreError::Contract(
                    "pretrain mode requires a masked prompt".into(),
                ));
            }
        }
        FieldMode::Mva | FieldMode::SelfDistill => {
            if prompt.is_some() {
                return Err(CoreError::Contract(
                    "prompt-free mode given a prompt".into(),
                ));
            }
        }
    }

    let d = cfg.data_dim;
    let mut xt = Vec::with_capacity(n * d);
    let mut target = Vec::with_capacity(n * d);
    for i in 0..n {
        let t = ts[i];
        for j in 0..d {
            let (a, b) = (x0.at(i, j), x1.at(i, j));
            xt.push((1.0 - t) * a + t * b);
            target.push(b - a);
        }
    }
    let xt = g.constant(Tensor::from_vec(vec![n, d], xt)?);
    let target = g.constant(Tensor::from_vec(vec![n, d], target)?);

    let pred = field_forward(g, cfg, h, xt, ts, cond, tokens, prompt)?;
    let diff = g.sub(target, pred)?;
    let per_elem = if squared_l2 {
        g.mul_elem(diff, diff)?
    } else {
        g.abs(diff)?
    };
    let total = g.sum_all(per_elem)?;
    g.scale(total, 1.0 / n as f64)
}

// ── sampling ───────────────────────────────────────────────────────────

/// Explicit Euler from t=0 to t=1 with a caller-supplied field.
pub fn euler_integrate<F>(x0: &Tensor, steps: usize, mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(CoreError::Contract("ODE steps must be >= 1".into()));
    }
    let h = 1.0 / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let fx = field(&x, t)?;
        if fx.shape() != x.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "euler_integrate",
                left: x.shape().to_vec(),
                right: fx.shape().to_vec(),
            });
        }
        let data = x
            .data()
            .iter()
            .zip(fx.data())
            .map(|(a, f)| a + h * f)
            .collect();
        x = Tensor::from_vec(x.shape().to_vec(), data)?;
    }
    Ok(x)
}

/// Integrates the learned field for a batch of conditions; rows evolve
/// independently. `tokens` is the pooled [N x d_c] matrix.
pub fn sample_ode_batch(
    cfg: &FieldConfig,
    set: &ParamSet,
    prefix: &str,
    cond: &Tensor,
    tokens: Option<&Tensor>,
    x0: &Tensor,
    steps: usize,
) -> Result<Tensor> {
    let n = x0.shape().first().copied().unwrap_or(0);
    let ts_of = |t: f64| vec![t; n];
    euler_integrate(x0, steps, |x, t| {
        let mut g = Graph::new();
        let h = handles(&mut g, set, prefix, cfg, false)?;
        let xid = g.constant(x.clone());
        let cid = if cfg.cond_dim > 0 {
            Some(g.constant(cond.clone()))
        } else {
            None
        };
        let out = field_forward(&mut g, cfg, &h, xid, &ts_of(t), cid, tokens, None)?;
        Ok(g.value(out).clone())
    })
}

/// Single-sample sampler: integrates one width-D point.
pub fn sample_ode(
    cfg: &FieldConfig,
    set: &ParamSet,
    prefix: &str,
    cond: &Tensor,
    tokens: Option<&Tensor>,
    x0: &Tensor,
    steps: usize,
) -> Result<Tensor> {
    let d = cfg.data_dim;
    if x0.shape() != [d] {
        return Err(CoreError::DimError {
            op: "sample_ode",
            detail: format!("expected x0 [{d}], got {:?}", x0.shape()),
        });
    }
    let cond_m = Tensor::from_vec(vec![1, cond.numel()], cond.data().to_vec())?;
    let tokens_m = match tokens {
        Some(t) => Some(Tensor::from_vec(vec![1, t.numel()], t.data().to_vec())?),
        None => None,
    };
    let x0_m = Tensor::from_vec(vec![1, d], x0.data().to_vec())?;
    let out = sample_ode_batch(cfg, set, prefix, &cond_m, tokens_m.as_ref(), &x0_m, steps)?;
    Ok(Tensor::vector(out.data().to_vec()))
}

// ── self-distillation pairs ────────────────────────────────────────────

/// One fine-tuning triple made by voice conversion: the base field
/// generates a sample for a random other speaker from the source's
/// content, the sample is re-tokenized, and the triple pairs the
/// source's speaker embedding and target with those converted tokens.
pub struct DistillTriple {
    pub src: usize,
    pub tgt: usize,
    /// Fresh noisy speech observation of the source speaker.
    pub s_src: Tensor,
    /// Re-tokenized converted sample, [T_c x d_c].
    pub tokens_conv: Tensor,
    /// Source data point the student must reconstruct.
    pub x1: Tensor,
}

pub fn self_distill_pair<R: Rng>(
    world: &World,
    cfg: &FieldConfig,
    set: &ParamSet,
    prefix: &str,
    steps: usize,
    rng: &mut R,
) -> Result<DistillTriple> {
    let s = world.cfg.speakers;
    if s < 2 {
        return Err(CoreError::Contract(
            "self-distillation needs at least 2 speakers".into(),
        ));
    }
    let src = rng.gen_range(0..s);
    // uniform over the other speakers with a single draw
    let tgt = (src + 1 + rng.gen_range(0..s - 1)) % s;

    let content = world.draw_token_content(rng);
    let tokens_src = world.leak_tokens(&content, world.latents.row(src))?;
    let x1 = world.draw_data(src, rng)?;
    let s_src = world.observe(crate::kvformer::Modality::Speech, src, rng)?;
    let s_tgt = world.observe(crate::kvformer::Modality::Speech, tgt, rng)?;

    let d = world.cfg.data_dim;
    let x0: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let pooled = pool_tokens(&tokens_src)?;
    let converted = sample_ode(
        cfg,
        set,
        prefix,
        &s_tgt,
        Some(&pooled),
        &Tensor::vector(x0),
        steps,
    )?;

    let z_conv = world.infer_latent(converted.data())?;
    let tokens_conv = world.leak_tokens(&content, &z_conv)?;
    Ok(DistillTriple {
        src,
        tgt,
        s_src,
        tokens_conv,
        x1,
    })
}
