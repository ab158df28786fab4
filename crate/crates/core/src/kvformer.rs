//! Multimodal voice aggregator: per-modality projection heads and a
//! stack of cross-attention blocks whose keys and values come from a
//! learnable bank rather than from the input.
//!
//! The query at every block is the running state (initially the
//! projected modality embedding); keys and values are the bank rows
//! passed through shared projections, so the module can only express
//! mixtures over the bank. Attention projections are shared across
//! blocks as sketched in the parameter layout; norm gains/biases are
//! per block. Out-projection, feed-forward, residual, and norm are all
//! toggleable so the attention equation can be tested in isolation.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Input stream kind for a projection head or a batch entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Face,
    Text,
    Speech,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Face => "face",
            Modality::Text => "text",
            Modality::Speech => "speech",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "face" => Ok(Modality::Face),
            "text" => Ok(Modality::Text),
            "speech" => Ok(Modality::Speech),
            other => Err(CoreError::Contract(format!(
                "unknown modality {other:?}, expected face|text|speech"
            ))),
        }
    }
}

// ── projection heads ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectorMode {
    /// Mean-pool the raw vector to one value, then apply the affine chain.
    Pool,
    /// Affine chain on the raw vector; one layer is a plain linear map.
    Mlp,
}

/// Shape of a projection head: an affine chain `dims[0] -> .. -> dims[last]`
/// with no nonlinearity between layers.
#[derive(Clone, Debug)]
pub struct ProjectorSpec {
    pub mode: ProjectorMode,
    pub dims: Vec<usize>,
}

impl ProjectorSpec {
    pub fn pool(out: usize) -> Self {
        ProjectorSpec {
            mode: ProjectorMode::Pool,
            dims: vec![1, out],
        }
    }

    pub fn linear(input: usize, out: usize) -> Self {
        ProjectorSpec {
            mode: ProjectorMode::Mlp,
            dims: vec![input, out],
        }
    }

    pub fn mlp(input: usize, hidden: usize, out: usize) -> Self {
        ProjectorSpec {
            mode: ProjectorMode::Mlp,
            dims: vec![input, hidden, out],
        }
    }

    pub fn out_width(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.iter().any(|&d| d == 0) {
            return Err(CoreError::Contract(format!(
                "projector needs at least input and output widths, got {:?}",
                self.dims
            )));
        }
        if self.mode == ProjectorMode::Pool && self.dims[0] != 1 {
            return Err(CoreError::Contract(
                "pool-mode projector must start from width 1".into(),
            ));
        }
        Ok(())
    }

    pub fn init_into<R: Rng>(&self, set: &mut ParamSet, prefix: &str, rng: &mut R) -> Result<()> {
        self.validate()?;
        for i in 0..self.dims.len() - 1 {
            let (w_in, w_out) = (self.dims[i], self.dims[i + 1]);
            let scale = 1.0 / (w_in as f64).sqrt();
            set.insert(
                format!("{prefix}.layer{i}.w"),
                Tensor::randn(vec![w_in, w_out], scale, rng),
            )?;
            set.insert(format!("{prefix}.layer{i}.b"), Tensor::zeros(vec![w_out]))?;
        }
        Ok(())
    }

    pub fn handles(
        &self,
        g: &mut Graph,
        set: &ParamSet,
        prefix: &str,
        trainable: bool,
    ) -> Result<ProjectorHandles> {
        let mut layers = Vec::with_capacity(self.dims.len() - 1);
        for i in 0..self.dims.len() - 1 {
            let w = set.get(&format!("{prefix}.layer{i}.w"))?.clone();
            let b = set.get(&format!("{prefix}.layer{i}.b"))?.clone();
            let (w, b) = if trainable {
                (g.param(w), g.param(b))
            } else {
                (g.constant(w), g.constant(b))
            };
            layers.push((w, b));
        }
        Ok(ProjectorHandles { layers })
    }
}

pub struct ProjectorHandles {
    pub layers: Vec<(TensorId, TensorId)>,
}

/// Maps a raw embedding batch [N×w] into the shared width. Pool mode
/// accepts any raw width; mlp mode requires the spec's input width.
pub fn project(
    g: &mut Graph,
    spec: &ProjectorSpec,
    h: &ProjectorHandles,
    raw: TensorId,
) -> Result<TensorId> {
    let shape = g.value(raw).shape().to_vec();
    if shape.len() != 2 {
        return Err(CoreError::DimError {
            op: "project",
            detail: format!("expected a batch matrix, got shape {shape:?}"),
        });
    }
    let mut cur = match spec.mode {
        ProjectorMode::Pool => {
            let w = shape[1];
            let pooler = g.constant(Tensor::full(vec![w, 1], 1.0 / w as f64));
            g.matmul(raw, pooler)?
        }
        ProjectorMode::Mlp => {
            if shape[1] != spec.dims[0] {
                return Err(CoreError::DimError {
                    op: "project",
                    detail: format!(
                        "raw width {} does not match projector input width {}",
                        shape[1], spec.dims[0]
                    ),
                });
            }
            raw
        }
    };
    for &(w, b) in &h.layers {
        let lin = g.matmul(cur, w)?;
        cur = g.add_row_bias(lin, b)?;
    }
    Ok(cur)
}

// ── aggregator ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct KvFormerConfig {
    /// Shared voice-space width.
    pub d: usize,
    /// Attention heads; must divide d.
    pub heads: usize,
    /// Stacked blocks.
    pub depth: usize,
    /// Rows in the learnable key-value bank.
    pub bank: usize,
    /// Scale logits by 1/sqrt(d/heads) instead of the default 1/sqrt(d).
    pub per_head_scale: bool,
    pub use_out_proj: bool,
    pub use_ff: bool,
    pub use_residual: bool,
    pub use_norm: bool,
}

impl KvFormerConfig {
    /// Full block: out-projection, feed-forward, residuals, pre-norm.
    pub fn standard(d: usize, heads: usize, depth: usize, bank: usize) -> Self {
        KvFormerConfig {
            d,
            heads,
            depth,
            bank,
            per_head_scale: false,
            use_out_proj: true,
            use_ff: true,
            use_residual: true,
            use_norm: true,
        }
    }

    /// Attention plus out-projection only: single head, single block.
    /// Exposes the raw cross-attention equation for isolated testing.
    pub fn bare(d: usize, bank: usize) -> Self {
        KvFormerConfig {
            d,
            heads: 1,
            depth: 1,
            bank,
            per_head_scale: false,
            use_out_proj: true,
            use_ff: false,
            use_residual: false,
            use_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.depth == 0 || self.bank == 0 {
            return Err(CoreError::Contract(format!(
                "aggregator dims must be positive: d={} heads={} depth={} bank={}",
                self.d, self.heads, self.depth, self.bank
            )));
        }
        if self.d % self.heads != 0 {
            return Err(CoreError::Contract(format!(
                "heads {} must divide width {}",
                self.heads, self.d
            )));
        }
        Ok(())
    }
}

pub struct FfHandles {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub struct BlockNormHandles {
    pub attn: (TensorId, TensorId),
    pub ff: Option<(TensorId, TensorId)>,
}

pub struct KvFormerHandles {
    pub bank: TensorId,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub out_proj: Option<TensorId>,
    pub ff: Option<FfHandles>,
    pub norms: Vec<BlockNormHandles>,
}

/// Registers freshly initialized aggregator weights under a prefix.
pub fn init_into<R: Rng>(
    set: &mut ParamSet,
    prefix: &str,
    cfg: &KvFormerConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d;
    let scale = 1.0 / (d as f64).sqrt();
    set.insert(
        format!("{prefix}.bank"),
        Tensor::randn(vec![cfg.bank, d], 1.0, rng),
    )?;
    for name in ["wq", "wk", "wv"] {
        set.insert(
            format!("{prefix}.{name}"),
            Tensor::randn(vec![d, d], scale, rng),
        )?;
    }
    if cfg.use_out_proj {
        set.insert(
            format!("{prefix}.out_proj"),
            Tensor::randn(vec![d, d], scale, rng),
        )?;
    }
    if cfg.use_ff {
        let hidden = 4 * d;
        set.insert(
            format!("{prefix}.ff.w1"),
            Tensor::randn(vec![d, hidden], scale, rng),
        )?;
        set.insert(format!("{prefix}.ff.b1"), Tensor::zeros(vec![hidden]))?;
        set.insert(
            format!("{prefix}.ff.w2"),
            Tensor::randn(vec![hidden, d], 1.0 / (hidden as f64).sqrt(), rng),
        )?;
        set.insert(format!("{prefix}.ff.b2"), Tensor::zeros(vec![d]))?;
    }
    if cfg.use_norm {
        for blk in 0..cfg.depth {
            set.insert(format!("{prefix}.norm{blk}.attn.gain"), Tensor::full(vec![d], 1.0))?;
            set.insert(format!("{prefix}.norm{blk}.attn.bias"), Tensor::zeros(vec![d]))?;
            if cfg.use_ff {
                set.insert(format!("{prefix}.norm{blk}.ff.gain"), Tensor::full(vec![d], 1.0))?;
                set.insert(format!("{prefix}.norm{blk}.ff.bias"), Tensor::zeros(vec![d]))?;
            }
        }
    }
    Ok(())
}

/// Inserts the named aggregator weights into a graph.
pub fn handles(
    g: &mut Graph,
    set: &ParamSet,
    prefix: &str,
    cfg: &KvFormerConfig,
    trainable: bool,
) -> Result<KvFormerHandles> {
    cfg.validate()?;
    let ins = |set: &ParamSet, g: &mut Graph, name: String| -> Result<TensorId> {
        let t = set.get(&name)?.clone();
        Ok(if trainable { g.param(t) } else { g.constant(t) })
    };
    let bank = ins(set, g, format!("{prefix}.bank"))?;
    let wq = ins(set, g, format!("{prefix}.wq"))?;
    let wk = ins(set, g, format!("{prefix}.wk"))?;
    let wv = ins(set, g, format!("{prefix}.wv"))?;
    let out_proj = if cfg.use_out_proj {
        Some(ins(set, g, format!("{prefix}.out_proj"))?)
    } else {
        None
    };
    let ff = if cfg.use_ff {
        Some(FfHandles {
            w1: ins(set, g, format!("{prefix}.ff.w1"))?,
            b1: ins(set, g, format!("{prefix}.ff.b1"))?,
            w2: ins(set, g, format!("{prefix}.ff.w2"))?,
            b2: ins(set, g, format!("{prefix}.ff.b2"))?,
        })
    } else {
        None
    };
    let mut norms = Vec::new();
    if cfg.use_norm {
        for blk in 0..cfg.depth {
            let attn = (
                ins(set, g, format!("{prefix}.norm{blk}.attn.gain"))?,
                ins(set, g, format!("{prefix}.norm{blk}.attn.bias"))?,
            );
            let ff_norm = if cfg.use_ff {
                Some((
                    ins(set, g, format!("{prefix}.norm{blk}.ff.gain"))?,
                    ins(set, g, format!("{prefix}.norm{blk}.ff.bias"))?,
                ))
            } else {
                None
            };
            norms.push(BlockNormHandles { attn, ff: ff_norm });
        }
    }
    Ok(KvFormerHandles {
        bank,
        wq,
        wk,
        wv,
        out_proj,
        ff,
        norms,
    })
}

/// Multi-head cross-attention against the projected bank. `q` is [N×d],
/// `k` and `v` are [K×d]; rows of the per-head attention are stochastic
/// by construction of the softmax.
fn attend(
    g: &mut Graph,
    cfg: &KvFormerConfig,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<TensorId> {
    let dh = cfg.d / cfg.heads;
    let scale_dim = if cfg.per_head_scale { dh } else { cfg.d };
    let factor = 1.0 / (scale_dim as f64).sqrt();
    if cfg.heads == 1 {
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, factor)?;
        let attn = g.softmax_rows(logits)?;
        return g.matmul(attn, v);
    }
    let mut outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, factor)?;
        let attn = g.softmax_rows(logits)?;
        outs.push(g.matmul(attn, vh)?);
    }
    g.concat_cols(&outs)
}

/// Runs the block stack on a batch of width-d embeddings.
pub fn forward(
    g: &mut Graph,
    cfg: &KvFormerConfig,
    h: &KvFormerHandles,
    x: TensorId,
) -> Result<TensorId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.d {
        return Err(CoreError::DimError {
            op: "mva_forward",
            detail: format!("expected input [N x {}], got {shape:?}", cfg.d),
        });
    }
    // bank projections are block-independent, compute once
    let k = g.matmul(h.bank, h.wk)?;
    let v = g.matmul(h.bank, h.wv)?;
    let mut cur = x;
    for blk in 0..cfg.depth {
        let qin = if cfg.use_norm {
            let (gain, bias) = h.norms[blk].attn;
            g.layer_norm_rows(cur, gain, bias)?
        } else {
            cur
        };
        let q = g.matmul(qin, h.wq)?;
        let mut att = attend(g, cfg, q, k, v)?;
        if let Some(wo) = h.out_proj {
            att = g.matmul(att, wo)?;
        }
        cur = if cfg.use_residual {
            g.add(cur, att)?
        } else {
            att
        };
        if let Some(ff) = &h.ff {
            let fin = if cfg.use_norm {
                let (gain, bias) = h.norms[blk].ff.expect("ff norm present when ff and norm on");
                g.layer_norm_rows(cur, gain, bias)?
            } else {
                cur
            };
            let h1 = g.matmul(fin, ff.w1)?;
            let h1 = g.add_row_bias(h1, ff.b1)?;
            let a1 = g.relu(h1)?;
            let h2 = g.matmul(a1, ff.w2)?;
            let h2 = g.add_row_bias(h2, ff.b2)?;
            cur = if cfg.use_residual { g.add(cur, h2)? } else { h2 };
        }
    }
    Ok(cur)
}

// ── speech anchoring ───────────────────────────────────────────────────

/// Per-entry coin flips deciding whether the aggregator sees the
/// reference-speech embedding instead of the entry's own modality.
pub fn speech_anchor_select<R: Rng>(n: usize, p: f64, rng: &mut R) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CoreError::Contract(format!(
            "anchor probability {p} outside [0, 1]"
        )));
    }
    Ok((0..n).map(|_| rng.gen::<f64>() < p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdiff::{finite_diff_grad, grad_mismatch, DEFAULT_STEP};
    use crate::rng::substream;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn bare_set(bank: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> ParamSet {
        let mut set = ParamSet::new();
        set.insert("m.bank", bank).unwrap();
        set.insert("m.wq", wq).unwrap();
        set.insert("m.wk", wk).unwrap();
        set.insert("m.wv", wv).unwrap();
        set.insert("m.out_proj", wo).unwrap();
        set
    }

    #[test]
    fn single_bank_row_ignores_query() {
        let cfg = KvFormerConfig::bare(2, 1);
        let set = bare_set(
            t(&[1, 2], &[3.0, -1.0]),
            t(&[2, 2], &[0.3, 0.1, -0.2, 0.5]),
            t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            t(&[2, 2], &[2.0, 0.0, 0.0, 2.0]),
            t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]),
        );
        let mut outs = Vec::new();
        for x in [[5.0, 5.0], [-7.0, 0.2]] {
            let mut g = Graph::new();
            let h = handles(&mut g, &set, "m", &cfg, false).unwrap();
            let xid = g.constant(t(&[1, 2], &x));
            let out = forward(&mut g, &cfg, &h, xid).unwrap();
            outs.push(g.value(out).data().to_vec());
        }
        // v = bank * wv = [6, -2]; out = v * out_proj = [-2, 6]
        assert_eq!(outs[0], vec![-2.0, 6.0]);
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn zero_query_projection_gives_uniform_attention() {
        let cfg = KvFormerConfig::bare(2, 3);
        let set = bare_set(
            t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, 2.0]),
            Tensor::zeros(vec![2, 2]),
            t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
        );
        let mut g = Graph::new();
        let h = handles(&mut g, &set, "m", &cfg, false).unwrap();
        let xid = g.constant(t(&[1, 2], &[4.0, -4.0]));
        let out = forward(&mut g, &cfg, &h, xid).unwrap();
        // uniform mix of bank rows: mean([1,0],[0,1],[2,2]) = [1, 1]
        let v = g.value(out).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bank_permutation_leaves_output_unchanged() {
        let cfg = KvFormerConfig::standard(4, 2, 2, 3);
        let mut rng = substream(11, "kvperm");
        let mut set = ParamSet::new();
        init_into(&mut set, "m", &cfg, &mut rng).unwrap();

        let x = Tensor::randn(vec![2, 4], 1.0, &mut rng);
        let run = |set: &ParamSet| {
            let mut g = Graph::new();
            let h = handles(&mut g, set, "m", &cfg, false).unwrap();
            let xid = g.constant(x.clone());
            let out = forward(&mut g, &cfg, &h, xid).unwrap();
            g.value(out).data().to_vec()
        };
        let base = run(&set);

        let bank = set.get("m.bank").unwrap().clone();
        let mut permuted = Vec::new();
        for row in [2usize, 0, 1] {
            permuted.extend_from_slice(bank.row(row));
        }
        *set.get_mut("m.bank").unwrap() = t(&[3, 4], &permuted);
        let after = run(&set);
        for (a, b) in base.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn init_is_seed_reproducible() {
        let cfg = KvFormerConfig::standard(4, 2, 2, 3);
        let build = || {
            let mut set = ParamSet::new();
            init_into(&mut set, "m", &cfg, &mut substream(3, "kvinit")).unwrap();
            set
        };
        let (a, b) = (build(), build());
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = KvFormerConfig::standard(4, 2, 2, 3);
        let mut rng = substream(17, "kvgrad");
        let mut set = ParamSet::new();
        init_into(&mut set, "m", &cfg, &mut rng).unwrap();
        let x = Tensor::randn(vec![2, 4], 1.0, &mut rng);

        let loss_of = |set: &ParamSet| -> crate::Result<f64> {
            let mut g = Graph::new();
            let h = handles(&mut g, set, "m", &cfg, false).unwrap();
            let xid = g.constant(x.clone());
            let out = forward(&mut g, &cfg, &h, xid)?;
            let sq = g.mul_elem(out, out)?;
            let l = g.sum_all(sq)?;
            g.value(l).item()
        };

        // analytic pass
        let mut g = Graph::new();
        let h = handles(&mut g, &set, "m", &cfg, true).unwrap();
        let xid = g.constant(x.clone());
        let out = forward(&mut g, &cfg, &h, xid).unwrap();
        let sq = g.mul_elem(out, out).unwrap();
        let l = g.sum_all(sq).unwrap();
        g.backward(l).unwrap();

        for (name, id) in [
            ("m.bank", h.bank),
            ("m.wq", h.wq),
            ("m.wk", h.wk),
            ("m.wv", h.wv),
        ] {
            let analytic = g.grad(id).unwrap().to_vec();
            let base = set.get(name).unwrap().clone();
            let numeric = finite_diff_grad(
                |vals| {
                    let mut probe = set.clone();
                    *probe.get_mut(name).unwrap() =
                        Tensor::from_vec(base.shape().to_vec(), vals.to_vec()).unwrap();
                    loss_of(&probe)
                },
                base.data(),
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(
                grad_mismatch(&analytic, &numeric, 1e-4, 1e-7).is_none(),
                "gradient mismatch for {name}"
            );
        }
    }

    #[test]
    fn pool_projector_pools_then_maps() {
        let spec = ProjectorSpec::pool(2);
        let mut set = ParamSet::new();
        set.insert("p.layer0.w", t(&[1, 2], &[3.0, -1.0])).unwrap();
        set.insert("p.layer0.b", t(&[2], &[0.5, 0.5])).unwrap();
        let mut g = Graph::new();
        let h = spec.handles(&mut g, &set, "p", false).unwrap();
        let raw = g.constant(t(&[1, 3], &[2.0, 2.0, 2.0]));
        let out = project(&mut g, &spec, &h, raw).unwrap();
        // pooled scalar 2, mapped: [2*3 + 0.5, 2*-1 + 0.5]
        assert_eq!(g.value(out).data(), &[6.5, -1.5]);
    }

    #[test]
    fn mlp_identity_is_passthrough() {
        let spec = ProjectorSpec::mlp(2, 2, 2);
        let mut set = ParamSet::new();
        for i in 0..2 {
            set.insert(format!("p.layer{i}.w"), Tensor::identity(2)).unwrap();
            set.insert(format!("p.layer{i}.b"), Tensor::zeros(vec![2])).unwrap();
        }
        let mut g = Graph::new();
        let h = spec.handles(&mut g, &set, "p", false).unwrap();
        let raw = g.constant(t(&[2, 2], &[1.5, -2.0, 0.0, 4.0]));
        let out = project(&mut g, &spec, &h, raw).unwrap();
        assert_eq!(g.value(out).data(), &[1.5, -2.0, 0.0, 4.0]);
    }

    #[test]
    fn mlp_width_mismatch_is_dimension_error() {
        let spec = ProjectorSpec::linear(4, 2);
        let mut set = ParamSet::new();
        spec.init_into(&mut set, "p", &mut substream(1, "proj")).unwrap();
        let mut g = Graph::new();
        let h = spec.handles(&mut g, &set, "p", false).unwrap();
        let raw = g.constant(Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            project(&mut g, &spec, &h, raw),
            Err(CoreError::DimError { .. })
        ));
    }

    #[test]
    fn anchor_select_degenerate_probabilities() {
        let mut rng = substream(5, "anchor");
        assert!(speech_anchor_select(100, 0.0, &mut rng)
            .unwrap()
            .iter()
            .all(|&b| !b));
        assert!(speech_anchor_select(100, 1.0, &mut rng)
            .unwrap()
            .iter()
            .all(|&b| b));
        assert!(speech_anchor_select(10, 1.5, &mut rng).is_err());
    }

    #[test]
    fn anchor_select_half_rate_concentrates() {
        let mut rng = substream(5, "anchor-half");
        let picks = speech_anchor_select(10_000, 0.5, &mut rng).unwrap();
        let frac = picks.iter().filter(|&&b| b).count() as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "speech fraction {frac}");
    }
}
