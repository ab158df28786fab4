//! Finite-difference validation of the full composed objective: every
//! trainable parameter of an alignment-style loss (projection,
//! aggregation, temperature, flow field) gets its reverse-mode gradient
//! compared against central differences of the scalar loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voicespace_core::cfm::{self, FieldConfig, FieldMode};
use voicespace_core::fdiff::{finite_diff_grad, grad_mismatch, DEFAULT_STEP};
use voicespace_core::graph::{Graph, TensorId};
use voicespace_core::kvformer::{self, KvFormerConfig, ProjectorSpec};
use voicespace_core::params::ParamSet;
use voicespace_core::softcl;
use voicespace_core::tensor::Tensor;

const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;

struct Fixture {
    field_cfg: FieldConfig,
    kv_cfg: KvFormerConfig,
    spec: ProjectorSpec,
    raw: Tensor,
    speech: Tensor,
    x0: Tensor,
    x1: Tensor,
    ts: Vec<f64>,
    tokens: Tensor,
}

impl Fixture {
    fn new(rng: &mut ChaCha8Rng) -> Fixture {
        let n = 3;
        let d = 4;
        let data_dim = 3;
        let token_dim = 2;
        let raw_dim = 5;
        let mut field_cfg = FieldConfig::new(data_dim, d, token_dim);
        field_cfg.hidden = vec![6];
        Fixture {
            field_cfg,
            kv_cfg: KvFormerConfig::standard(d, 2, 2, 3),
            spec: ProjectorSpec::mlp(raw_dim, 4, d),
            raw: Tensor::randn(vec![n, raw_dim], 1.0, rng),
            speech: Tensor::randn(vec![n, d], 1.0, rng),
            x0: Tensor::randn(vec![n, data_dim], 1.0, rng),
            x1: Tensor::randn(vec![n, data_dim], 1.0, rng),
            ts: (0..n).map(|_| rng.gen()).collect(),
            tokens: Tensor::randn(vec![n, token_dim], 1.0, rng),
        }
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut set = ParamSet::new();
        cfm::init_into(&mut set, "field", &self.field_cfg, rng).unwrap();
        kvformer::init_into(&mut set, "mva", &self.kv_cfg, rng).unwrap();
        self.spec.init_into(&mut set, "proj.face", rng).unwrap();
        set.insert("tau", Tensor::from_vec(vec![1], vec![0.3]).unwrap())
            .unwrap();
        set
    }

    /// Disentangled self-similarity of the speech batch at the set's
    /// current temperature. The production intra loss detaches this
    /// whole branch, so finite differences must hold it fixed here.
    fn teacher_target(&self, set: &ParamSet) -> Tensor {
        let mut g = Graph::new();
        let s = g.constant(self.speech.clone());
        let tau = g.constant(set.get("tau").unwrap().clone());
        let p = softcl::soft_probs(&mut g, s, tau).unwrap();
        g.value(p).clone()
    }

    /// Builds the alignment objective on a graph where every parameter
    /// is trainable, returning the loss and the ids in set order. With
    /// `frozen_target` the intra term compares against that constant
    /// instead of the live detached teacher branch.
    fn build(
        &self,
        g: &mut Graph,
        set: &ParamSet,
        frozen_target: Option<&Tensor>,
    ) -> (TensorId, Vec<TensorId>) {
        let ids: Vec<TensorId> = set.iter().map(|(_, t)| g.param(t.clone())).collect();
        let id_of = |name: &str| ids[set.position(name).unwrap()];

        let proj_h = kvformer::ProjectorHandles {
            layers: (0..self.spec.dims.len() - 1)
                .map(|i| {
                    (
                        id_of(&format!("proj.face.layer{i}.w")),
                        id_of(&format!("proj.face.layer{i}.b")),
                    )
                })
                .collect(),
        };
        let kv_h = kvformer::KvFormerHandles {
            bank: id_of("mva.bank"),
            wq: id_of("mva.wq"),
            wk: id_of("mva.wk"),
            wv: id_of("mva.wv"),
            out_proj: Some(id_of("mva.out_proj")),
            ff: Some(kvformer::FfHandles {
                w1: id_of("mva.ff.w1"),
                b1: id_of("mva.ff.b1"),
                w2: id_of("mva.ff.w2"),
                b2: id_of("mva.ff.b2"),
            }),
            norms: (0..self.kv_cfg.depth)
                .map(|blk| kvformer::BlockNormHandles {
                    attn: (
                        id_of(&format!("mva.norm{blk}.attn.gain")),
                        id_of(&format!("mva.norm{blk}.attn.bias")),
                    ),
                    ff: Some((
                        id_of(&format!("mva.norm{blk}.ff.gain")),
                        id_of(&format!("mva.norm{blk}.ff.bias")),
                    )),
                })
                .collect(),
        };
        let field_h = cfm::FieldHandles {
            layers: (0..self.field_cfg.hidden.len() + 1)
                .map(|i| {
                    (
                        id_of(&format!("field.layer{i}.w")),
                        id_of(&format!("field.layer{i}.b")),
                    )
                })
                .collect(),
        };

        let raw_id = g.constant(self.raw.clone());
        let projected = kvformer::project(g, &self.spec, &proj_h, raw_id).unwrap();
        let v = kvformer::forward(g, &self.kv_cfg, &kv_h, projected).unwrap();
        let cfm_id = cfm::cfm_loss(
            g,
            &self.field_cfg,
            &field_h,
            FieldMode::Mva,
            &self.x0,
            &self.x1,
            &self.ts,
            Some(v),
            Some(&self.tokens),
            None,
            false,
        )
        .unwrap();
        let s_id = g.constant(self.speech.clone());
        let tau = id_of("tau");
        let intra = match frozen_target {
            None => softcl::intra_loss(g, v, s_id, tau).unwrap(),
            Some(t) => {
                let tgt = g.constant(t.clone());
                let probs = softcl::soft_probs(g, v, tau).unwrap();
                g.kl_rows(tgt, probs).unwrap()
            }
        };
        let inter = softcl::inter_loss(g, v, s_id, tau).unwrap();
        let loss = softcl::combine(g, cfm_id, intra, inter, 0.05, 0.05).unwrap();
        (loss, ids)
    }

    fn eval(&self, set: &ParamSet, frozen_target: &Tensor) -> f64 {
        let mut g = Graph::new();
        let (loss, _) = self.build(&mut g, set, Some(frozen_target));
        g.value(loss).item().unwrap()
    }
}

#[test]
fn composed_objective_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let fix = Fixture::new(&mut rng);
    let set = fix.init(&mut rng);
    let target = fix.teacher_target(&set);

    let mut g = Graph::new();
    let (loss, ids) = fix.build(&mut g, &set, None);
    g.backward(loss).unwrap();
    // the frozen-target surrogate agrees with the live loss at the base
    // point, so its finite differences probe the same surface
    let live = g.value(loss).item().unwrap();
    assert!((fix.eval(&set, &target) - live).abs() < 1e-12);

    let names: Vec<String> = set.names().map(String::from).collect();
    for (idx, name) in names.iter().enumerate() {
        let analytic: Vec<f64> = g
            .grad(ids[idx])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; set.get(name).unwrap().numel()]);
        let base = set.get(name).unwrap().data().to_vec();
        let numeric = finite_diff_grad(
            |x| {
                let mut probe = set.clone();
                probe.get_mut(name).unwrap().data_mut().copy_from_slice(x);
                Ok(fix.eval(&probe, &target))
            },
            &base,
            DEFAULT_STEP,
        )
        .unwrap();
        if let Some((i, a, n)) = grad_mismatch(&analytic, &numeric, REL_TOL, ABS_FLOOR) {
            panic!("{name}[{i}]: analytic {a} vs numeric {n}");
        }
    }
}

#[test]
fn pretrain_objective_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 3;
    let data_dim = 3;
    let cond_dim = 4;
    let token_dim = 2;
    let mut cfg = FieldConfig::new(data_dim, cond_dim, token_dim);
    cfg.hidden = vec![5];
    let mut set = ParamSet::new();
    cfm::init_into(&mut set, "field", &cfg, &mut rng).unwrap();

    let x0 = Tensor::randn(vec![n, data_dim], 1.0, &mut rng);
    let x1 = Tensor::randn(vec![n, data_dim], 1.0, &mut rng);
    let ts: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let cond = Tensor::randn(vec![n, cond_dim], 1.0, &mut rng);
    let tokens = Tensor::randn(vec![n, token_dim], 1.0, &mut rng);
    let prompt = Tensor::randn(vec![n, data_dim], 1.0, &mut rng);

    let eval = |set: &ParamSet| -> f64 {
        let mut g = Graph::new();
        let h = cfm::handles(&mut g, set, "field", &cfg, true).unwrap();
        let cid = g.constant(cond.clone());
        let loss = cfm::cfm_loss(
            &mut g,
            &cfg,
            &h,
            FieldMode::Pretrain,
            &x0,
            &x1,
            &ts,
            Some(cid),
            Some(&tokens),
            Some(&prompt),
            true,
        )
        .unwrap();
        g.value(loss).item().unwrap()
    };

    let mut g = Graph::new();
    let h = cfm::handles(&mut g, &set, "field", &cfg, true).unwrap();
    let handle_ids: Vec<TensorId> = h.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
    let cid = g.constant(cond.clone());
    let loss = cfm::cfm_loss(
        &mut g,
        &cfg,
        &h,
        FieldMode::Pretrain,
        &x0,
        &x1,
        &ts,
        Some(cid),
        Some(&tokens),
        Some(&prompt),
        true,
    )
    .unwrap();
    g.backward(loss).unwrap();

    let names: Vec<String> = set.names().map(String::from).collect();
    for (idx, name) in names.iter().enumerate() {
        let analytic = g.grad(handle_ids[idx]).unwrap().to_vec();
        let base = set.get(name).unwrap().data().to_vec();
        let numeric = finite_diff_grad(
            |x| {
                let mut probe = set.clone();
                probe.get_mut(name).unwrap().data_mut().copy_from_slice(x);
                Ok(eval(&probe))
            },
            &base,
            DEFAULT_STEP,
        )
        .unwrap();
        if let Some((i, a, n)) = grad_mismatch(&analytic, &numeric, REL_TOL, ABS_FLOOR) {
            panic!("{name}[{i}]: analytic {a} vs numeric {n}");
        }
    }
}
