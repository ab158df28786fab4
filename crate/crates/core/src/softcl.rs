//! Soft contrastive alignment between modality and speaker embeddings.
//!
//! Two losses share one learnable temperature:
//! * an intra-modal term pulling the self-similarity structure of the
//!   projected modality batch toward that of the matching speaker batch
//!   (a KL divergence against a detached target), and
//! * an inter-modal term, symmetric InfoNCE over the cross-similarity
//!   matrix with positives on the diagonal.
//!
//! Similarity is the plain dot product divided by the temperature. The
//! self-similarity distribution drops each row's diagonal entry through
//! an exp-renormalization before comparison, so a row never treats its
//! own sample as a negative.

use crate::error::Result;
use crate::graph::{Graph, TensorId};

/// Lower clamp for the learnable temperature, applied after each
/// optimizer step.
pub const TAU_FLOOR: f64 = 0.01;

/// Row-stochastic self-similarity: softmax over rows of `emb embᵀ / τ`.
pub fn self_similarity(g: &mut Graph, emb: TensorId, tau: TensorId) -> Result<TensorId> {
    let embt = g.transpose(emb)?;
    let sim = g.matmul(emb, embt)?;
    let scaled = g.div_scalar(sim, tau)?;
    g.softmax_rows(scaled)
}

/// Self-similarity with the diagonal removed and rows renormalized;
/// shape N-by-(N-1).
pub fn soft_probs(g: &mut Graph, emb: TensorId, tau: TensorId) -> Result<TensorId> {
    let p = self_similarity(g, emb, tau)?;
    g.neg_disentangle(p)
}

/// Mean KL from the teacher's disentangled self-similarity to the
/// student's. The whole teacher branch is detached, so neither the
/// teacher embeddings nor the temperature receive gradient through it.
pub fn intra_loss(
    g: &mut Graph,
    student: TensorId,
    teacher: TensorId,
    tau: TensorId,
) -> Result<TensorId> {
    let target = soft_probs(g, teacher, tau)?;
    let target = g.detach(target);
    let probs = soft_probs(g, student, tau)?;
    g.kl_rows(target, probs)
}

/// Symmetric InfoNCE over `v sᵀ / τ` with positives on the diagonal:
/// the mean of row-wise and column-wise cross-entropy terms.
pub fn inter_loss(g: &mut Graph, v: TensorId, s: TensorId, tau: TensorId) -> Result<TensorId> {
    let st = g.transpose(s)?;
    let sim = g.matmul(v, st)?;
    let sim = g.div_scalar(sim, tau)?;

    let row_ls = g.log_softmax_rows(sim)?;
    let row_diag = g.take_diag(row_ls)?;
    let row_term = g.mean_all(row_diag)?;

    let simt = g.transpose(sim)?;
    let col_ls = g.log_softmax_rows(simt)?;
    let col_diag = g.take_diag(col_ls)?;
    let col_term = g.mean_all(col_diag)?;

    let sum = g.add(row_term, col_term)?;
    g.scale(sum, -0.5)
}

/// Row-direction-only InfoNCE: each modality row classifies its matching
/// speaker row, without the transposed term.
pub fn inter_loss_oneway(
    g: &mut Graph,
    v: TensorId,
    s: TensorId,
    tau: TensorId,
) -> Result<TensorId> {
    let st = g.transpose(s)?;
    let sim = g.matmul(v, st)?;
    let sim = g.div_scalar(sim, tau)?;
    let ls = g.log_softmax_rows(sim)?;
    let diag = g.take_diag(ls)?;
    let mean = g.mean_all(diag)?;
    g.scale(mean, -1.0)
}

/// Training objective: flow loss plus weighted contrastive terms.
pub fn combine(
    g: &mut Graph,
    cfm: TensorId,
    intra: TensorId,
    inter: TensorId,
    lambda_intra: f64,
    lambda_inter: f64,
) -> Result<TensorId> {
    let wi = g.scale(intra, lambda_intra)?;
    let we = g.scale(inter, lambda_inter)?;
    let partial = g.add(cfm, wi)?;
    g.add(partial, we)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdiff::{finite_diff_grad, grad_mismatch, DEFAULT_STEP};
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn self_similarity_rows_are_stochastic() {
        let mut g = Graph::new();
        let emb = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.7, 0.7]));
        let tau = g.constant(Tensor::scalar(0.07));
        let p = self_similarity(&mut g, emb, tau).unwrap();
        for i in 0..3 {
            let s: f64 = g.value(p).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn intra_loss_zero_when_student_matches_teacher() {
        let mut g = Graph::new();
        let emb = g.constant(t(&[3, 2], &[1.0, 0.2, -0.4, 1.0, 0.7, 0.7]));
        let tau = g.constant(Tensor::scalar(0.07));
        let loss = intra_loss(&mut g, emb, emb, tau).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn intra_loss_positive_when_structures_differ() {
        let mut g = Graph::new();
        let student = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]));
        let teacher = g.constant(t(&[3, 2], &[1.0, 0.0, 0.9, 0.1, 0.0, 1.0]));
        let tau = g.constant(Tensor::scalar(0.5));
        let loss = intra_loss(&mut g, student, teacher, tau).unwrap();
        assert!(g.value(loss).item().unwrap() > 0.0);
    }

    #[test]
    fn inter_loss_orthonormal_identity_value() {
        // sim = I at tau = 1; every diagonal log-softmax term is
        // 1 - ln(e + 1), so the loss is ln(e + 1) - 1.
        let mut g = Graph::new();
        let v = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let s = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let tau = g.constant(Tensor::scalar(1.0));
        let loss = inter_loss(&mut g, v, s, tau).unwrap();
        let expect = (1.0f64.exp() + 1.0).ln() - 1.0;
        assert!((g.value(loss).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn inter_loss_prefers_aligned_diagonal() {
        let mut g = Graph::new();
        let v = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let s_good = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let s_bad = g.constant(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let tau = g.constant(Tensor::scalar(0.1));
        let good = inter_loss(&mut g, v, s_good, tau).unwrap();
        let bad = inter_loss(&mut g, v, s_bad, tau).unwrap();
        assert!(g.value(good).item().unwrap() < g.value(bad).item().unwrap());
    }

    #[test]
    fn symmetric_is_mean_of_both_directions() {
        let mut g = Graph::new();
        let v = g.constant(t(&[3, 2], &[0.8, 0.1, 0.4, 0.6, -0.2, 0.9]));
        let s = g.constant(t(&[3, 2], &[1.0, 0.0, 0.3, 0.9, -0.5, 0.5]));
        let tau = g.constant(Tensor::scalar(0.3));
        let sym = inter_loss(&mut g, v, s, tau).unwrap();
        let fwd = inter_loss_oneway(&mut g, v, s, tau).unwrap();
        let rev = inter_loss_oneway(&mut g, s, v, tau).unwrap();
        let mean = 0.5 * (g.value(fwd).item().unwrap() + g.value(rev).item().unwrap());
        assert!((g.value(sym).item().unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn combine_weights_terms() {
        let mut g = Graph::new();
        let cfm = g.constant(Tensor::scalar(1.0));
        let intra = g.constant(Tensor::scalar(2.0));
        let inter = g.constant(Tensor::scalar(4.0));
        let total = combine(&mut g, cfm, intra, inter, 0.05, 0.05).unwrap();
        assert!((g.value(total).item().unwrap() - 1.3).abs() < 1e-12);
    }

    #[test]
    fn intra_gradient_matches_finite_difference() {
        let teacher = [1.0, 0.0, 0.6, 0.8, 0.0, 1.0];
        let student0 = [0.9, 0.1, 0.2, 0.7, -0.3, 0.8];
        let tau0 = 0.5;

        // The teacher branch is detached, so the reference function must
        // hold the teacher's distribution fixed while tau varies; bake it
        // out once at tau0.
        let target = {
            let mut g = Graph::new();
            let tid = g.constant(t(&[3, 2], &teacher));
            let tauid = g.constant(Tensor::scalar(tau0));
            let p = soft_probs(&mut g, tid, tauid).unwrap();
            g.value(p).clone()
        };

        let eval = |student: &[f64], tau: f64| -> crate::Result<f64> {
            let mut g = Graph::new();
            let sid = g.param(t(&[3, 2], student));
            let tauid = g.param(Tensor::scalar(tau));
            let tgt = g.constant(target.clone());
            let probs = soft_probs(&mut g, sid, tauid)?;
            let loss = g.kl_rows(tgt, probs)?;
            g.value(loss).item()
        };

        let mut g = Graph::new();
        let sid = g.param(t(&[3, 2], &student0));
        let tid = g.constant(t(&[3, 2], &teacher));
        let tauid = g.param(Tensor::scalar(tau0));
        let loss = intra_loss(&mut g, sid, tid, tauid).unwrap();
        g.backward(loss).unwrap();
        let ds = g.grad(sid).unwrap().to_vec();
        let dtau = g.grad(tauid).unwrap()[0];

        let nds = finite_diff_grad(|x| eval(x, tau0), &student0, DEFAULT_STEP).unwrap();
        assert!(grad_mismatch(&ds, &nds, 1e-4, 1e-7).is_none(), "{ds:?} vs {nds:?}");

        let ndtau = finite_diff_grad(|x| eval(&student0, x[0]), &[tau0], DEFAULT_STEP).unwrap();
        assert!(grad_mismatch(&[dtau], &ndtau, 1e-4, 1e-7).is_none());
    }

    #[test]
    fn intra_teacher_branch_sends_no_gradient() {
        let mut g = Graph::new();
        let student = g.constant(t(&[3, 2], &[0.9, 0.1, 0.2, 0.7, -0.3, 0.8]));
        let teacher = g.param(t(&[3, 2], &[1.0, 0.0, 0.6, 0.8, 0.0, 1.0]));
        let tau = g.constant(Tensor::scalar(0.5));
        let loss = intra_loss(&mut g, student, teacher, tau).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(teacher).is_none());
    }

    #[test]
    fn inter_gradient_matches_finite_difference() {
        let s = [1.0, 0.0, 0.3, 0.9, -0.5, 0.5];
        let v0 = [0.8, 0.1, 0.4, 0.6, -0.2, 0.9];
        let tau0 = 0.3;

        let eval = |v: &[f64], tau: f64| -> crate::Result<f64> {
            let mut g = Graph::new();
            let vid = g.param(t(&[3, 2], v));
            let sid = g.constant(t(&[3, 2], &s));
            let tauid = g.param(Tensor::scalar(tau));
            let loss = inter_loss(&mut g, vid, sid, tauid)?;
            g.value(loss).item()
        };

        let mut g = Graph::new();
        let vid = g.param(t(&[3, 2], &v0));
        let sid = g.constant(t(&[3, 2], &s));
        let tauid = g.param(Tensor::scalar(tau0));
        let loss = inter_loss(&mut g, vid, sid, tauid).unwrap();
        g.backward(loss).unwrap();
        let dv = g.grad(vid).unwrap().to_vec();
        let dtau = g.grad(tauid).unwrap()[0];

        let ndv = finite_diff_grad(|x| eval(x, tau0), &v0, DEFAULT_STEP).unwrap();
        assert!(grad_mismatch(&dv, &ndv, 1e-4, 1e-7).is_none(), "{dv:?} vs {ndv:?}");

        let ndtau = finite_diff_grad(|x| eval(&v0, x[0]), &[tau0], DEFAULT_STEP).unwrap();
        assert!(grad_mismatch(&[dtau], &ndtau, 1e-4, 1e-7).is_none());
    }
}
