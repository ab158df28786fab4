//! Synthetic multimodal world: latent speaker identities observed
//! through per-modality linear maps plus isotropic noise.
//!
//! Observation maps have orthonormal rows, so cosine geometry in any
//! modality matches the latent geometry exactly at zero noise; that is
//! what makes the downstream similarity metrics analytically
//! predictable. The data map and token map have orthonormal columns,
//! which keeps latent recovery from a data point a single matrix
//! product. Token draws mix per-utterance content with a small leaked
//! image of the speaker latent, controlled by one coefficient.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};
use crate::kvformer::Modality;
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct WorldConfig {
    pub speakers: usize,
    pub latent_dim: usize,
    /// Width of the speech observation, which doubles as the
    /// ground-truth speaker-embedding space.
    pub speaker_dim: usize,
    pub face_dim: usize,
    pub text_dim: usize,
    pub token_dim: usize,
    pub token_rows: usize,
    pub data_dim: usize,
    pub sigma_face: f64,
    pub sigma_text: f64,
    pub sigma_speech: f64,
    pub sigma_data: f64,
    /// Speaker leakage coefficient mixed into content tokens.
    pub token_leak: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            speakers: 64,
            latent_dim: 16,
            speaker_dim: 32,
            face_dim: 48,
            text_dim: 24,
            token_dim: 8,
            token_rows: 4,
            data_dim: 8,
            sigma_face: 0.05,
            sigma_text: 0.05,
            sigma_speech: 0.05,
            sigma_data: 0.05,
            token_leak: 0.25,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(CoreError::Contract(format!(
                "world needs at least 2 speakers, got {}",
                self.speakers
            )));
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("speaker_dim", self.speaker_dim),
            ("face_dim", self.face_dim),
            ("text_dim", self.text_dim),
            ("token_dim", self.token_dim),
            ("token_rows", self.token_rows),
            ("data_dim", self.data_dim),
        ] {
            if v == 0 {
                return Err(CoreError::Contract(format!("{name} must be >= 1")));
            }
        }
        // observation maps need orthonormal rows, data/token maps
        // orthonormal columns; both require these width relations
        for (name, v) in [
            ("speaker_dim", self.speaker_dim),
            ("face_dim", self.face_dim),
            ("text_dim", self.text_dim),
        ] {
            if v < self.latent_dim {
                return Err(CoreError::Contract(format!(
                    "{name} ({v}) must be >= latent_dim ({})",
                    self.latent_dim
                )));
            }
        }
        for (name, v) in [("token_dim", self.token_dim), ("data_dim", self.data_dim)] {
            if v > self.latent_dim {
                return Err(CoreError::Contract(format!(
                    "{name} ({v}) must be <= latent_dim ({})",
                    self.latent_dim
                )));
            }
        }
        for (name, v) in [
            ("sigma_face", self.sigma_face),
            ("sigma_text", self.sigma_text),
            ("sigma_speech", self.sigma_speech),
            ("sigma_data", self.sigma_data),
            ("token_leak", self.token_leak),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::Contract(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

pub struct World {
    pub cfg: WorldConfig,
    /// Unit-norm speaker identities, [S x d_z].
    pub latents: Tensor,
    /// Row-orthonormal observation maps, latent width to modality width.
    pub face_map: Tensor,
    pub text_map: Tensor,
    pub speech_map: Tensor,
    /// Column-orthonormal leak path, [d_z x d_c].
    pub token_map: Tensor,
    /// Column-orthonormal data map, [d_z x D]; speaker data means are
    /// its images of the latents.
    pub data_map: Tensor,
}

impl World {
    /// Builds a world deterministically from the seed's "world" substream.
    pub fn generate(cfg: WorldConfig, seed: u64) -> Result<World> {
        cfg.validate()?;
        let mut rng = substream(seed, "world");
        let mut latents = Tensor::randn(vec![cfg.speakers, cfg.latent_dim], 1.0, &mut rng);
        normalize_rows_in_place(&mut latents);
        let face_map = orthonormal_rows(cfg.latent_dim, cfg.face_dim, &mut rng)?;
        let text_map = orthonormal_rows(cfg.latent_dim, cfg.text_dim, &mut rng)?;
        let speech_map = orthonormal_rows(cfg.latent_dim, cfg.speaker_dim, &mut rng)?;
        let token_map = orthonormal_cols(cfg.latent_dim, cfg.token_dim, &mut rng)?;
        let data_map = orthonormal_cols(cfg.latent_dim, cfg.data_dim, &mut rng)?;
        Ok(World {
            cfg,
            latents,
            face_map,
            text_map,
            speech_map,
            token_map,
            data_map,
        })
    }

    fn check_speaker(&self, id: usize) -> Result<()> {
        if id >= self.cfg.speakers {
            return Err(CoreError::Contract(format!(
                "speaker id {id} out of range for {} speakers",
                self.cfg.speakers
            )));
        }
        Ok(())
    }

    pub fn modality_map(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Face => &self.face_map,
            Modality::Text => &self.text_map,
            Modality::Speech => &self.speech_map,
        }
    }

    pub fn modality_sigma(&self, m: Modality) -> f64 {
        match m {
            Modality::Face => self.cfg.sigma_face,
            Modality::Text => self.cfg.sigma_text,
            Modality::Speech => self.cfg.sigma_speech,
        }
    }

    pub fn modality_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Face => self.cfg.face_dim,
            Modality::Text => self.cfg.text_dim,
            Modality::Speech => self.cfg.speaker_dim,
        }
    }

    /// Noiseless speech observation; the ground-truth speaker embedding.
    pub fn speaker_embedding(&self, id: usize) -> Result<Tensor> {
        self.check_speaker(id)?;
        Ok(Tensor::vector(map_row(
            self.latents.row(id),
            &self.speech_map,
        )))
    }

    /// One noisy modality observation of a speaker.
    pub fn observe<R: Rng>(&self, m: Modality, id: usize, rng: &mut R) -> Result<Tensor> {
        self.check_speaker(id)?;
        let mut v = map_row(self.latents.row(id), self.modality_map(m));
        let sigma = self.modality_sigma(m);
        for x in v.iter_mut() {
            *x += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(Tensor::vector(v))
    }

    /// Center of the speaker's data distribution, width D.
    pub fn data_mean(&self, id: usize) -> Result<Tensor> {
        self.check_speaker(id)?;
        Ok(Tensor::vector(map_row(self.latents.row(id), &self.data_map)))
    }

    /// One data point from the speaker's distribution.
    pub fn draw_data<R: Rng>(&self, id: usize, rng: &mut R) -> Result<Tensor> {
        let mut v = self.data_mean(id)?.data().to_vec();
        for x in v.iter_mut() {
            *x += self.cfg.sigma_data * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(Tensor::vector(v))
    }

    /// Pure per-utterance content, [T_c x d_c], no speaker information.
    pub fn draw_token_content<R: Rng>(&self, rng: &mut R) -> Tensor {
        Tensor::randn(vec![self.cfg.token_rows, self.cfg.token_dim], 1.0, rng)
    }

    /// Adds the leaked latent image to every content row.
    pub fn leak_tokens(&self, content: &Tensor, latent: &[f64]) -> Result<Tensor> {
        if content.cols() != self.cfg.token_dim {
            return Err(CoreError::DimError {
                op: "leak_tokens",
                detail: format!(
                    "content width {} does not match token width {}",
                    content.cols(),
                    self.cfg.token_dim
                ),
            });
        }
        let leak = map_row(latent, &self.token_map);
        let rows = content.rows();
        let w = content.cols();
        let mut out = Vec::with_capacity(rows * w);
        for i in 0..rows {
            for j in 0..w {
                out.push(content.at(i, j) + self.cfg.token_leak * leak[j]);
            }
        }
        Tensor::from_vec(vec![rows, w], out)
    }

    /// Speaker-leaked content tokens for one utterance of a speaker.
    pub fn draw_tokens<R: Rng>(&self, id: usize, rng: &mut R) -> Result<Tensor> {
        self.check_speaker(id)?;
        let content = self.draw_token_content(rng);
        self.leak_tokens(&content, self.latents.row(id))
    }

    /// Minimum-norm latent whose data-map image is `x`. Exact inverse on
    /// the data map's range because the map has orthonormal columns.
    pub fn infer_latent(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cfg.data_dim {
            return Err(CoreError::DimError {
                op: "infer_latent",
                detail: format!(
                    "data point width {} does not match data dim {}",
                    x.len(),
                    self.cfg.data_dim
                ),
            });
        }
        let w = &self.data_map;
        let mut z = vec![0.0; self.cfg.latent_dim];
        for k in 0..self.cfg.latent_dim {
            let row = w.row(k);
            z[k] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        Ok(z)
    }
}

// ── batches ────────────────────────────────────────────────────────────

pub struct BatchEntry {
    pub speaker: usize,
    pub modality: Modality,
    /// Raw modality observation, width depends on the modality.
    pub embedding: Tensor,
    /// Fresh noisy speech observation of the same speaker.
    pub s_ref: Tensor,
    /// Leaked content tokens, [T_c x d_c].
    pub tokens: Tensor,
    /// Data point from the speaker's distribution, width D.
    pub x1: Tensor,
}

pub struct ModalityBatch {
    pub entries: Vec<BatchEntry>,
}

/// Draws n paired records with modality tags from the mix weights
/// (face, text, speech) and fresh noise per entry.
pub fn gen_batch<R: Rng>(
    world: &World,
    n: usize,
    mix: [f64; 3],
    rng: &mut R,
) -> Result<ModalityBatch> {
    if n == 0 {
        return Err(CoreError::Contract("batch size must be >= 1".into()));
    }
    let total: f64 = mix.iter().sum();
    if mix.iter().any(|&w| !(w.is_finite() && w >= 0.0)) || total <= 0.0 {
        return Err(CoreError::Contract(format!(
            "modality mix must be nonnegative and not all zero, got {mix:?}"
        )));
    }
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let speaker = rng.gen_range(0..world.cfg.speakers);
        let u = rng.gen::<f64>() * total;
        let modality = if u < mix[0] {
            Modality::Face
        } else if u < mix[0] + mix[1] {
            Modality::Text
        } else {
            Modality::Speech
        };
        let embedding = world.observe(modality, speaker, rng)?;
        let s_ref = world.observe(Modality::Speech, speaker, rng)?;
        let tokens = world.draw_tokens(speaker, rng)?;
        let x1 = world.draw_data(speaker, rng)?;
        entries.push(BatchEntry {
            speaker,
            modality,
            embedding,
            s_ref,
            tokens,
            x1,
        });
    }
    Ok(ModalityBatch { entries })
}

// ── numeric helpers ────────────────────────────────────────────────────

/// Row vector times map: out_j = Σ_k row_k · map[k][j].
pub(crate) fn map_row(row: &[f64], map: &Tensor) -> Vec<f64> {
    let (k, w) = (map.rows(), map.cols());
    debug_assert_eq!(row.len(), k);
    let mut out = vec![0.0; w];
    let data = map.data();
    for (i, &r) in row.iter().enumerate() {
        for j in 0..w {
            out[j] += r * data[i * w + j];
        }
    }
    out
}

pub(crate) fn normalize_rows_in_place(t: &mut Tensor) {
    let (rows, cols) = (t.rows(), t.cols());
    let data = t.data_mut();
    for i in 0..rows {
        let row = &mut data[i * cols..(i + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
}

/// Random [rows x cols] matrix with orthonormal rows (rows <= cols),
/// built by modified Gram-Schmidt with one re-orthogonalization pass.
fn orthonormal_rows<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    if rows > cols {
        return Err(CoreError::Contract(format!(
            "cannot orthonormalize {rows} rows in width {cols}"
        )));
    }
    let mut m: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for i in 0..rows {
        for _ in 0..2 {
            for j in 0..i {
                let proj: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
                for k in 0..cols {
                    m[i][k] -= proj * m[j][k];
                }
            }
        }
        let norm = m[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Err(CoreError::Contract(
                "degenerate draw during orthonormalization".into(),
            ));
        }
        for k in 0..cols {
            m[i][k] /= norm;
        }
    }
    Tensor::from_vec(vec![rows, cols], m.into_iter().flatten().collect())
}

/// Random [rows x cols] matrix with orthonormal columns (cols <= rows).
fn orthonormal_cols<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    let t = orthonormal_rows(cols, rows, rng)?;
    let mut out = vec![0.0; rows * cols];
    for i in 0..cols {
        for j in 0..rows {
            out[j * cols + i] = t.at(i, j);
        }
    }
    Tensor::from_vec(vec![rows, cols], out)
}

/// Solves a·x = b for small dense systems by Gaussian elimination with
/// partial pivoting; a is n-by-n row-major and consumed.
pub(crate) fn solve_linear(n: usize, a: &mut [f64], b: &mut [f64]) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(CoreError::Contract(
                "singular system in linear solve".into(),
            ));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            b[r] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in col + 1..n {
            s -= a[col * n + k] * b[k];
        }
        b[col] = s / a[col * n + col];
    }
    Ok(())
}

/// Least-squares latent for an observation `v` under a row-orthonormal
/// observation map (rows = latent dim <= cols): z = v·mapᵀ.
pub fn lstsq_latent(map: &Tensor, v: &[f64]) -> Vec<f64> {
    let (k, w) = (map.rows(), map.cols());
    debug_assert_eq!(v.len(), w);
    let mut z = vec![0.0; k];
    for i in 0..k {
        z[i] = map.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine_sim;

    fn small_cfg(speakers: usize) -> WorldConfig {
        WorldConfig {
            speakers,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn rejects_single_speaker_world() {
        assert!(World::generate(small_cfg(1), 0).is_err());
    }

    #[test]
    fn same_seed_gives_identical_worlds() {
        let a = World::generate(small_cfg(8), 42).unwrap();
        let b = World::generate(small_cfg(8), 42).unwrap();
        assert_eq!(a.latents.data(), b.latents.data());
        assert_eq!(a.face_map.data(), b.face_map.data());
        assert_eq!(a.data_map.data(), b.data_map.data());
    }

    #[test]
    fn latent_rows_are_unit_norm() {
        let w = World::generate(small_cfg(8), 1).unwrap();
        for i in 0..8 {
            let n: f64 = w.latents.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_observations_repeat_exactly() {
        let mut cfg = small_cfg(4);
        cfg.sigma_face = 0.0;
        let w = World::generate(cfg, 3).unwrap();
        let mut rng = substream(3, "obs");
        let a = w.observe(Modality::Face, 2, &mut rng).unwrap();
        let b = w.observe(Modality::Face, 2, &mut rng).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn noiseless_cosines_match_latent_geometry() {
        let mut cfg = small_cfg(6);
        cfg.sigma_face = 0.0;
        cfg.sigma_text = 0.0;
        cfg.sigma_speech = 0.0;
        let w = World::generate(cfg, 9).unwrap();
        let mut rng = substream(9, "geo");
        for m in [Modality::Face, Modality::Text, Modality::Speech] {
            for i in 0..6 {
                for j in i + 1..6 {
                    let oi = w.observe(m, i, &mut rng).unwrap();
                    let oj = w.observe(m, j, &mut rng).unwrap();
                    let lat = cosine_sim(
                        &Tensor::vector(w.latents.row(i).to_vec()),
                        &Tensor::vector(w.latents.row(j).to_vec()),
                    )
                    .unwrap();
                    let obs = cosine_sim(&oi, &oj).unwrap();
                    assert!((lat - obs).abs() < 1e-6, "{m:?} {i},{j}: {lat} vs {obs}");
                }
            }
        }
    }

    #[test]
    fn face_to_speech_retrieval_succeeds() {
        let mut cfg = small_cfg(16);
        cfg.sigma_face = 0.05;
        let w = World::generate(cfg, 7).unwrap();
        let mut rng = substream(7, "retrieval");
        let speech: Vec<Tensor> = (0..16).map(|i| w.speaker_embedding(i).unwrap()).collect();
        let mut hits = 0;
        let trials = 160;
        for t in 0..trials {
            let id = t % 16;
            let face = w.observe(Modality::Face, id, &mut rng).unwrap();
            let z = lstsq_latent(&w.face_map, face.data());
            let pred = Tensor::vector(map_row(&z, &w.speech_map));
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, s) in speech.iter().enumerate() {
                let c = cosine_sim(&pred, s).unwrap();
                if c > best.0 {
                    best = (c, j);
                }
            }
            if best.1 == id {
                hits += 1;
            }
        }
        let rate = hits as f64 / trials as f64;
        assert!(rate >= 0.95, "retrieval rate {rate}");
    }

    #[test]
    fn data_map_latent_roundtrip_is_exact_on_range() {
        let w = World::generate(small_cfg(4), 11).unwrap();
        let x = w.data_mean(1).unwrap();
        let z = w.infer_latent(x.data()).unwrap();
        let back = map_row(&z, &w.data_map);
        for (a, b) in back.iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_leak_tokens_classify_at_chance() {
        let mut cfg = small_cfg(16);
        cfg.token_leak = 0.0;
        let w = World::generate(cfg, 13).unwrap();
        let mut rng = substream(13, "tokens");
        // centroids from 50 draws per speaker
        let d_c = w.cfg.token_dim;
        let mut centroids = vec![vec![0.0; d_c]; 16];
        for (id, c) in centroids.iter_mut().enumerate() {
            for _ in 0..50 {
                let t = w.draw_tokens(id, &mut rng).unwrap();
                for i in 0..t.rows() {
                    for j in 0..d_c {
                        c[j] += t.at(i, j);
                    }
                }
            }
            for v in c.iter_mut() {
                *v /= (50 * w.cfg.token_rows) as f64;
            }
        }
        let mut hits = 0;
        let trials = 1000;
        for t in 0..trials {
            let id = t % 16;
            let tok = w.draw_tokens(id, &mut rng).unwrap();
            let mut pooled = vec![0.0; d_c];
            for i in 0..tok.rows() {
                for j in 0..d_c {
                    pooled[j] += tok.at(i, j) / tok.rows() as f64;
                }
            }
            let mut best = (f64::INFINITY, 0);
            for (j, c) in centroids.iter().enumerate() {
                let dist: f64 = c.iter().zip(&pooled).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            if best.1 == id {
                hits += 1;
            }
        }
        let rate = hits as f64 / trials as f64;
        // chance for 16 speakers is 6.25%
        assert!(rate < 0.0625 + 0.05, "token classification rate {rate}");
    }

    #[test]
    fn degenerate_mix_yields_single_modality() {
        let w = World::generate(small_cfg(4), 2).unwrap();
        let mut rng = substream(2, "mix");
        let batch = gen_batch(&w, 50, [1.0, 0.0, 0.0], &mut rng).unwrap();
        assert!(batch.entries.iter().all(|e| e.modality == Modality::Face));
    }

    #[test]
    fn balanced_mix_concentrates() {
        let w = World::generate(small_cfg(8), 21).unwrap();
        let mut rng = substream(21, "mix2");
        let batch = gen_batch(&w, 1000, [1.0, 1.0, 0.0], &mut rng).unwrap();
        let faces = batch
            .entries
            .iter()
            .filter(|e| e.modality == Modality::Face)
            .count() as f64
            / 1000.0;
        assert!((0.46..=0.54).contains(&faces), "face fraction {faces}");
        assert!(batch.entries.iter().all(|e| e.modality != Modality::Speech));
    }

    #[test]
    fn batches_are_seed_reproducible() {
        let w = World::generate(small_cfg(8), 33).unwrap();
        let draw = || {
            let mut rng = substream(33, "batch");
            gen_batch(&w, 16, [1.0, 1.0, 1.0], &mut rng).unwrap()
        };
        let (a, b) = (draw(), draw());
        for (ea, eb) in a.entries.iter().zip(&b.entries) {
            assert_eq!(ea.speaker, eb.speaker);
            assert_eq!(ea.modality, eb.modality);
            assert_eq!(ea.embedding.data(), eb.embedding.data());
            assert_eq!(ea.x1.data(), eb.x1.data());
        }
    }

    #[test]
    fn invalid_mix_is_rejected() {
        let w = World::generate(small_cfg(4), 1).unwrap();
        let mut rng = substream(1, "badmix");
        assert!(gen_batch(&w, 4, [0.0, 0.0, 0.0], &mut rng).is_err());
        assert!(gen_batch(&w, 4, [-1.0, 1.0, 0.0], &mut rng).is_err());
    }

    #[test]
    fn solve_linear_recovers_known_solution() {
        // a = [[2,1],[1,3]], x = [1,-2] => b = [0,-5]
        let mut a = vec![2.0, 1.0, 1.0, 3.0];
        let mut b = vec![0.0, -5.0];
        solve_linear(2, &mut a, &mut b).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] + 2.0).abs() < 1e-12);
    }
}
