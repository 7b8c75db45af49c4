//! Touch, vision and text encoders plus the aggregate trainable model.
//!
//! The touch encoder prepends L sensor tokens (sensor-specific or universal)
//! to the patch tokens and runs a small pre-LN transformer; the pooled
//! readout is projected and L2-normalized into the shared embedding space.
//! The vision encoder is the same architecture with its own parameters and a
//! class token. The text encoder is a frozen hashed-embedding table with
//! mean pooling: its frozen-ness, not its linguistic quality, is the
//! property the pipeline depends on.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Pooling};
use crate::error::{Error, Result};
use crate::graph::{Graph, Id, ParamId, ParamStore};
use crate::img::ImageBuf;
use crate::input::{flatten_frame, flatten_tubelets, MediaTensor, PatchConfig};
use crate::matching::MatchHeadParams;
use crate::nn::{LinearParams, TransformerParams, INIT_STD};
use crate::rng::{stream, StreamTag};
use crate::stage1::DecoderParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Touch,
    Vision,
    Text,
}

/// Pooled unit-norm representation with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub vector: Vec<f32>,
    pub modality: Modality,
    pub sample_id: String,
    pub sensor: String,
    pub object_id: String,
}

/// Sensor-token selection policy at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenPolicy {
    Specific,
    Universal,
}

/// K sensor-specific L x d token sets plus one universal set.
#[derive(Debug, Clone)]
pub struct SensorBank {
    sensors: Vec<String>,
    specific: Vec<ParamId>,
    pub universal: ParamId,
}

impl SensorBank {
    fn register(
        store: &mut ParamStore,
        sensors: &[String],
        l: usize,
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let specific = sensors
            .iter()
            .enumerate()
            .map(|(k, _)| {
                store.register(&format!("bank.s{k}"), Tensor::randn(l, d, INIT_STD, rng), true)
            })
            .collect();
        let universal =
            store.register("bank.universal", Tensor::randn(l, d, INIT_STD, rng), true);
        SensorBank { sensors: sensors.to_vec(), specific, universal }
    }

    pub fn sensor_index(&self, sensor: &str) -> Option<usize> {
        self.sensors.iter().position(|s| s == sensor)
    }

    pub fn specific_for(&self, sensor: &str) -> Result<ParamId> {
        self.sensor_index(sensor)
            .map(|k| self.specific[k])
            .ok_or_else(|| Error::UnknownSensor(sensor.to_string()))
    }

    /// Training-time draw: universal tokens with probability `p_u`, the
    /// sensor's own tokens otherwise. Sensors not in the bank must be flagged
    /// `unseen` and always receive universal tokens.
    pub fn select_sensor_tokens(
        &self,
        sensor: &str,
        unseen: bool,
        p_u: f32,
        rng: &mut impl Rng,
    ) -> Result<(ParamId, bool)> {
        match self.sensor_index(sensor) {
            Some(k) => {
                let use_universal = rng.gen::<f32>() < p_u;
                Ok(if use_universal { (self.universal, true) } else { (self.specific[k], false) })
            }
            None if unseen => Ok((self.universal, true)),
            None => Err(Error::UnknownSensor(sensor.to_string())),
        }
    }

    /// Inference-time routing: seen sensors follow `policy`, unknown sensors
    /// require the universal set.
    pub fn tokens_for(&self, sensor: &str, policy: TokenPolicy) -> Result<ParamId> {
        match policy {
            TokenPolicy::Universal => Ok(self.universal),
            TokenPolicy::Specific => self.specific_for(sensor),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TouchParams {
    pub patch: LinearParams,
    pub pos_spatial: ParamId,
    pub pos_temporal: ParamId,
    pub trunk: TransformerParams,
    pub proj: LinearParams,
}

#[derive(Debug, Clone)]
pub struct VisionParams {
    pub patch: LinearParams,
    pub cls: ParamId,
    pub pos_spatial: ParamId,
    pub trunk: TransformerParams,
    pub proj: LinearParams,
}

#[derive(Debug, Clone)]
pub struct TextParams {
    pub table: ParamId,
    pub proj: LinearParams,
}

/// All trainable state: encoders, sensor bank, reconstruction decoder and
/// matching head share one parameter store (and one checkpoint).
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub touch: TouchParams,
    pub vision: VisionParams,
    pub text: TextParams,
    pub bank: SensorBank,
    pub decoder: DecoderParams,
    pub match_head: MatchHeadParams,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, StreamTag::Init, &[]);
        let p = &cfg.patch;
        let d = cfg.encoder.d;
        let s_tokens = p.tokens_per_slot();
        let (ft, _, _) = p.grid();

        let touch = TouchParams {
            patch: LinearParams::register(
                &mut store,
                "touch.patch",
                p.tubelet_len(),
                d,
                &mut rng,
                true,
            ),
            pos_spatial: store.register(
                "touch.pos_spatial",
                Tensor::randn(s_tokens, d, INIT_STD, &mut rng),
                true,
            ),
            pos_temporal: store.register(
                "touch.pos_temporal",
                Tensor::randn(ft, d, INIT_STD, &mut rng),
                true,
            ),
            trunk: TransformerParams::register(
                &mut store,
                "touch.trunk",
                cfg.encoder.layers,
                d,
                cfg.encoder.heads,
                &mut rng,
                true,
            ),
            proj: LinearParams::register(
                &mut store,
                "touch.proj",
                d,
                cfg.encoder.embed_dim,
                &mut rng,
                true,
            ),
        };

        let bank = SensorBank::register(&mut store, &cfg.sensors, cfg.sensor_tokens, d, &mut rng);

        let vision = VisionParams {
            patch: LinearParams::register(
                &mut store,
                "vision.patch",
                p.p * p.p * 3,
                d,
                &mut rng,
                true,
            ),
            cls: store.register("vision.cls", Tensor::randn(1, d, INIT_STD, &mut rng), true),
            pos_spatial: store.register(
                "vision.pos_spatial",
                Tensor::randn(s_tokens, d, INIT_STD, &mut rng),
                true,
            ),
            trunk: TransformerParams::register(
                &mut store,
                "vision.trunk",
                cfg.encoder.layers,
                d,
                cfg.encoder.heads,
                &mut rng,
                true,
            ),
            proj: LinearParams::register(
                &mut store,
                "vision.proj",
                d,
                cfg.encoder.embed_dim,
                &mut rng,
                true,
            ),
        };

        // Frozen after random init: the anchor modality.
        let text = TextParams {
            table: store.register(
                "text.table",
                Tensor::randn(cfg.text_vocab, cfg.text_dim, 1.0, &mut rng),
                false,
            ),
            proj: LinearParams::register(
                &mut store,
                "text.proj",
                cfg.text_dim,
                cfg.encoder.embed_dim,
                &mut rng,
                false,
            ),
        };

        let decoder = DecoderParams::register(&mut store, &cfg, &mut rng);
        let match_head = MatchHeadParams::register(&mut store, cfg.encoder.embed_dim, &mut rng);

        Ok(Model { cfg, store, touch, vision, text, bank, decoder, match_head })
    }

    /// Spatial/temporal position-table row indices for every token.
    pub fn token_indices(patch: &PatchConfig) -> (Vec<usize>, Vec<usize>) {
        let n = patch.n_tokens();
        let s = patch.tokens_per_slot();
        ((0..n).map(|i| i % s).collect(), (0..n).map(|i| i / s).collect())
    }

    /// Project raw tubelets, add factorized positions, optionally keep a
    /// visible subset of rows.
    pub fn touch_tokens_graph(
        &self,
        g: &mut Graph<'_>,
        flat: &Tensor,
        keep: Option<&[usize]>,
    ) -> Id {
        let (sp_idx, tm_idx) = Self::token_indices(&self.cfg.patch);
        let x_in = g.input(flat.clone());
        let x = self.touch.patch.forward(g, x_in);
        let pos_s_table = g.param(self.touch.pos_spatial);
        let pos_t_table = g.param(self.touch.pos_temporal);
        let pos_s = g.select_rows(pos_s_table, &sp_idx);
        let pos_t = g.select_rows(pos_t_table, &tm_idx);
        let x = g.add(x, pos_s);
        let x = g.add(x, pos_t);
        match keep {
            Some(idx) => g.select_rows(x, idx),
            None => x,
        }
    }

    fn pooled(&self, g: &mut Graph<'_>, seq_out: Id) -> Id {
        match self.cfg.encoder.pooling {
            Pooling::Cls => g.slice_rows(seq_out, 0, 1),
            Pooling::Mean => g.mean_rows(seq_out),
        }
    }

    /// Run the touch encoder over sensor tokens prepended to (a visible
    /// subset of) patch tokens.
    pub fn encode_touch_graph(
        &self,
        g: &mut Graph<'_>,
        flat: &Tensor,
        keep: Option<&[usize]>,
        sensor_tokens: ParamId,
    ) -> TouchForward {
        let tokens = self.touch_tokens_graph(g, flat, keep);
        let st = g.param(sensor_tokens);
        let seq = g.concat_rows(&[st, tokens]);
        let seq_len = g.value(seq).rows();
        let out = self.touch.trunk.forward(g, seq);
        let pooled = self.pooled(g, out);
        let proj = self.touch.proj.forward(g, pooled);
        let embedding = g.l2_normalize_rows(proj, 1e-12);
        TouchForward { seq_out: out, pooled, embedding, seq_len }
    }

    pub fn encode_vision_graph(&self, g: &mut Graph<'_>, img: &ImageBuf) -> Result<Id> {
        let mut frame_cfg = self.cfg.patch;
        frame_cfg.f = 1;
        frame_cfg.t_p = 1;
        let flat = flatten_frame(img, &frame_cfg)?;
        let x_in = g.input(flat);
        let x = self.vision.patch.forward(g, x_in);
        let pos = g.param(self.vision.pos_spatial);
        let x = g.add(x, pos);
        let cls = g.param(self.vision.cls);
        let seq = g.concat_rows(&[cls, x]);
        let out = self.vision.trunk.forward(g, seq);
        let pooled = self.pooled(g, out);
        let proj = self.vision.proj.forward(g, pooled);
        Ok(g.l2_normalize_rows(proj, 1e-12))
    }

    pub fn encode_text_graph(&self, g: &mut Graph<'_>, text: &str) -> Result<Id> {
        let ids = tokenize_text(text, self.cfg.text_vocab);
        if ids.is_empty() {
            return Err(Error::EmptyText);
        }
        let table = g.param(self.text.table);
        let rows = g.select_rows(table, &ids);
        let pooled = g.mean_rows(rows);
        let proj = self.text.proj.forward(g, pooled);
        Ok(g.l2_normalize_rows(proj, 1e-12))
    }

    /// Eval-mode touch encoding: returns the unit-norm embedding and the
    /// per-token features (sensor tokens first).
    pub fn touch_embedding(
        &self,
        media: &MediaTensor,
        sensor_tokens: ParamId,
    ) -> Result<(Vec<f32>, Tensor)> {
        let flat = flatten_tubelets(media, &self.cfg.patch)?;
        let mut g = Graph::new(&self.store);
        let fwd = self.encode_touch_graph(&mut g, &flat, None, sensor_tokens);
        Ok((g.value(fwd.embedding).row(0).to_vec(), g.value(fwd.seq_out).clone()))
    }

    pub fn vision_embedding(&self, img: &ImageBuf) -> Result<Vec<f32>> {
        let mut g = Graph::new(&self.store);
        let id = self.encode_vision_graph(&mut g, img)?;
        Ok(g.value(id).row(0).to_vec())
    }

    pub fn text_embedding(&self, text: &str) -> Result<Vec<f32>> {
        let mut g = Graph::new(&self.store);
        let id = self.encode_text_graph(&mut g, text)?;
        Ok(g.value(id).row(0).to_vec())
    }
}

pub struct TouchForward {
    /// Transformer output over the full sequence, sensor tokens first.
    pub seq_out: Id,
    pub pooled: Id,
    /// Unit-norm embedding in the shared space.
    pub embedding: Id,
    pub seq_len: usize,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Lowercase, split on non-alphanumeric, hash each token into the table.
pub fn tokenize_text(text: &str, vocab: usize) -> Vec<usize> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| (fnv1a64(t.as_bytes()) % vocab as u64) as usize)
        .collect()
}

/// d=16, 2-layer instance used by gradient checks and structural tests.
#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    use crate::config::{DecoderConfig, EncoderConfig};
    ModelConfig {
        patch: PatchConfig { p: 4, t_p: 1, d: 16, f: 2, h: 8, w: 8 },
        encoder: EncoderConfig { layers: 2, d: 16, heads: 2, pooling: Pooling::Cls, embed_dim: 8 },
        decoder: DecoderConfig { layers: 1, d_dec: 16 },
        sensors: vec!["alpha".into(), "beta".into()],
        sensor_tokens: 2,
        text_vocab: 128,
        text_dim: 8,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::input::image_to_media;

    fn test_image(seed: u64, h: usize, w: usize) -> ImageBuf {
        let mut rng = stream(seed, StreamTag::Init, &[h as u64]);
        let mut img = ImageBuf::new(h, w);
        for v in img.data_mut() {
            *v = rng.gen::<f32>();
        }
        img
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let model = Model::new(tiny_config(), 3).unwrap();
        let img = test_image(1, 8, 8);
        let media = image_to_media(&img, &model.cfg.patch).unwrap();
        let tokens = model.bank.specific_for("alpha").unwrap();
        let (emb, _) = model.touch_embedding(&media, tokens).unwrap();
        let norm: f32 = emb.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);

        let vemb = model.vision_embedding(&img).unwrap();
        let vnorm: f32 = vemb.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((vnorm - 1.0).abs() < 1e-5);

        let temb = model.text_embedding("rubber, soft, rough").unwrap();
        let tnorm: f32 = temb.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((tnorm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn encode_is_deterministic() {
        let model = Model::new(tiny_config(), 4).unwrap();
        let img = test_image(2, 8, 8);
        let media = image_to_media(&img, &model.cfg.patch).unwrap();
        let tokens = model.bank.specific_for("beta").unwrap();
        let a = model.touch_embedding(&media, tokens).unwrap();
        let b = model.touch_embedding(&media, tokens).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn image_and_replicated_video_share_embedding() {
        let model = Model::new(tiny_config(), 5).unwrap();
        let img = test_image(3, 8, 8);
        let media_static = image_to_media(&img, &model.cfg.patch).unwrap();
        let frames = vec![img.clone(), img.clone()];
        let media_dynamic =
            crate::input::frames_to_media(&frames, &model.cfg.patch).unwrap();
        let tokens = model.bank.specific_for("alpha").unwrap();
        let (a, _) = model.touch_embedding(&media_static, tokens).unwrap();
        let (b, _) = model.touch_embedding(&media_dynamic, tokens).unwrap();
        assert_eq!(a, b, "replicated clip must be the same tensor, hence same embedding");
    }

    #[test]
    fn prepend_law_and_sensitivity() {
        let model = Model::new(tiny_config(), 6).unwrap();
        let img = test_image(4, 8, 8);
        let media = image_to_media(&img, &model.cfg.patch).unwrap();
        let flat = flatten_tubelets(&media, &model.cfg.patch).unwrap();
        let n = model.cfg.patch.n_tokens();
        let l = model.cfg.sensor_tokens;

        let tokens = model.bank.specific_for("alpha").unwrap();
        let mut g = Graph::new(&model.store);
        let fwd = model.encode_touch_graph(&mut g, &flat, None, tokens);
        assert_eq!(fwd.seq_len, l + n, "encoder input length must be L+N");
        let with_tokens = g.value(fwd.pooled).clone();

        // Without sensor tokens the pooled readout differs.
        let mut g2 = Graph::new(&model.store);
        let toks = model.touch_tokens_graph(&mut g2, &flat, None);
        let out = model.touch.trunk.forward(&mut g2, toks);
        let pooled = g2.slice_rows(out, 0, 1);
        assert_ne!(g2.value(pooled), &with_tokens);
    }

    #[test]
    fn sensor_token_selection_routing() {
        let model = Model::new(tiny_config(), 7).unwrap();
        let mut rng = stream(7, StreamTag::SensorToken, &[0]);

        for _ in 0..50 {
            let (id, used_u) =
                model.bank.select_sensor_tokens("alpha", false, 0.0, &mut rng).unwrap();
            assert!(!used_u);
            assert_eq!(id, model.bank.specific_for("alpha").unwrap());
        }
        for _ in 0..50 {
            let (id, used_u) =
                model.bank.select_sensor_tokens("alpha", false, 1.0, &mut rng).unwrap();
            assert!(used_u);
            assert_eq!(id, model.bank.universal);
        }
        // Unseen sensors always take the universal set.
        for _ in 0..50 {
            let (id, used_u) =
                model.bank.select_sensor_tokens("gamma", true, 0.0, &mut rng).unwrap();
            assert!(used_u);
            assert_eq!(id, model.bank.universal);
        }
        assert!(matches!(
            model.bank.select_sensor_tokens("gamma", false, 0.5, &mut rng),
            Err(Error::UnknownSensor(_))
        ));
    }

    #[test]
    fn bernoulli_concentration_at_three_quarters() {
        let model = Model::new(tiny_config(), 8).unwrap();
        let mut rng = stream(8, StreamTag::SensorToken, &[1]);
        let n = 10_000;
        let mut universal = 0usize;
        for _ in 0..n {
            let (_, used_u) =
                model.bank.select_sensor_tokens("alpha", false, 0.75, &mut rng).unwrap();
            if used_u {
                universal += 1;
            }
        }
        let frac = universal as f64 / n as f64;
        assert!((0.73..=0.77).contains(&frac), "universal fraction {frac}");
    }

    #[test]
    fn text_encoder_contracts() {
        let model = Model::new(tiny_config(), 9).unwrap();
        assert!(matches!(model.text_embedding(""), Err(Error::EmptyText)));
        assert!(matches!(model.text_embedding(" ,;- "), Err(Error::EmptyText)));

        let a = model.text_embedding("metal, hard, smooth").unwrap();
        let b = model.text_embedding("metal, hard, smooth").unwrap();
        assert_eq!(a, b, "frozen encoder must be deterministic");

        // 100 distinct strings give pairwise distinct vectors.
        let mut big_cfg = tiny_config();
        big_cfg.text_vocab = 4096;
        let model = Model::new(big_cfg, 9).unwrap();
        let embs: Vec<Vec<f32>> = (0..100)
            .map(|i| model.text_embedding(&format!("material{i} word{}", i * 7)).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert_ne!(embs[i], embs[j], "strings {i} and {j} collided");
            }
        }

        assert!(!model.store.is_trainable(model.text.table));
        assert!(!model.store.is_trainable(model.text.proj.w));
        assert!(!model.store.is_trainable(model.text.proj.b));
    }

    #[test]
    fn probe_loss_gradients_match_fd() {
        use crate::gradcheck::check_param_grads;
        let mut model = Model::new(tiny_config(), 10).unwrap();
        let img = test_image(5, 8, 8);
        let media = image_to_media(&img, &model.cfg.patch).unwrap();
        let flat = flatten_tubelets(&media, &model.cfg.patch).unwrap();
        let tokens = model.bank.specific_for("alpha").unwrap();

        let grads = {
            let mut g = Graph::new(&model.store);
            let fwd = model.encode_touch_graph(&mut g, &flat, None, tokens);
            let loss = g.sum_all(fwd.embedding);
            g.backward(loss)
        };
        // Every encoder-path parameter, including the sensor tokens.
        let ids: Vec<_> = model
            .store
            .ids()
            .filter(|&id| model.store.name(id).starts_with("touch.") || id == tokens)
            .collect();
        let flat2 = flat.clone();
        let cfg = model.cfg.clone();
        let touch = model.touch.clone();
        let err = check_param_grads(&mut model.store, &ids, &grads, 1e-2, move |s| {
            let mut g = Graph::new(s);
            let (sp_idx, tm_idx) = Model::token_indices(&cfg.patch);
            let x_in = g.input(flat2.clone());
            let x = touch.patch.forward(&mut g, x_in);
            let pos_s_table = g.param(touch.pos_spatial);
            let pos_t_table = g.param(touch.pos_temporal);
            let pos_s = g.select_rows(pos_s_table, &sp_idx);
            let pos_t = g.select_rows(pos_t_table, &tm_idx);
            let x = g.add(x, pos_s);
            let x = g.add(x, pos_t);
            let st = g.param(tokens);
            let seq = g.concat_rows(&[st, x]);
            let out = touch.trunk.forward(&mut g, seq);
            let pooled = g.slice_rows(out, 0, 1);
            let proj = touch.proj.forward(&mut g, pooled);
            let emb = g.l2_normalize_rows(proj, 1e-12);
            let loss = g.sum_all(emb);
            g.scalar_value(loss)
        });
        assert!(err < 1e-3, "max rel err {err}");
    }
}
