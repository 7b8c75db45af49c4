//! Stage-1 objectives: masked reconstruction of static images and dynamic
//! clips, plus next-frame prediction for clips.
//!
//! The encoder sees sensor tokens plus visible tokens only. The decoder
//! rebuilds the full token grid from embedded visible outputs and a shared
//! learnable mask query, with its own factorized positions; for clips it
//! appends one extra temporal slot of learned future queries whose outputs
//! predict the next frame in pixel space.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::graph::{Graph, Id, ParamId, ParamStore};
use crate::nn::{LinearParams, TransformerParams, INIT_STD};
use crate::tensor::Tensor;

/// Masked/visible token index partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    /// Sorted masked token indices, |masked| = floor(rho * N).
    pub masked: Vec<usize>,
    /// Sorted complement.
    pub visible: Vec<usize>,
}

impl MaskSet {
    pub fn n_tokens(&self) -> usize {
        self.masked.len() + self.visible.len()
    }
}

/// Uniform without-replacement mask of floor(rho * n) tokens.
pub fn sample_mask(n: usize, rho: f32, rng: &mut impl Rng) -> MaskSet {
    assert!((0.0..1.0).contains(&rho), "mask ratio must be in [0,1)");
    let k = (rho * n as f32).floor() as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut masked: Vec<usize> = perm[..k].to_vec();
    let mut visible: Vec<usize> = perm[k..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    MaskSet { masked, visible }
}

/// Lightweight reconstruction decoder parameters.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub embed: LinearParams,
    pub mask_token: ParamId,
    pub future_query: ParamId,
    pub pos_spatial: ParamId,
    /// One row per input temporal slot plus one for the predicted frame.
    pub pos_temporal: ParamId,
    pub trunk: TransformerParams,
    pub head: LinearParams,
}

impl DecoderParams {
    pub fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d_dec = cfg.decoder.d_dec;
        let s = cfg.patch.tokens_per_slot();
        let (ft, _, _) = cfg.patch.grid();
        DecoderParams {
            embed: LinearParams::register(
                store,
                "decoder.embed",
                cfg.encoder.d,
                d_dec,
                rng,
                true,
            ),
            mask_token: store.register(
                "decoder.mask_token",
                Tensor::randn(1, d_dec, INIT_STD, rng),
                true,
            ),
            future_query: store.register(
                "decoder.future_query",
                Tensor::randn(1, d_dec, INIT_STD, rng),
                true,
            ),
            pos_spatial: store.register(
                "decoder.pos_spatial",
                Tensor::randn(s, d_dec, INIT_STD, rng),
                true,
            ),
            pos_temporal: store.register(
                "decoder.pos_temporal",
                Tensor::randn(ft + 1, d_dec, INIT_STD, rng),
                true,
            ),
            trunk: TransformerParams::register(
                store,
                "decoder.trunk",
                cfg.decoder.layers,
                d_dec,
                cfg.encoder.heads,
                rng,
                true,
            ),
            head: LinearParams::register(
                store,
                "decoder.head",
                d_dec,
                cfg.patch.tubelet_len(),
                rng,
                true,
            ),
        }
    }
}

pub struct Stage1Forward {
    /// Predicted pixel tokens, `[N (+ S_future), tubelet_len]`.
    pub pred_tokens: Id,
    /// Decoder sequence length: N_visible + N_mask_queries.
    pub dec_len: usize,
    /// Encoder sequence length: L + N_visible.
    pub enc_len: usize,
}

/// Masked encode + decode of one sample.
pub fn stage1_forward(
    model: &Model,
    g: &mut Graph<'_>,
    flat: &Tensor,
    mask: &MaskSet,
    sensor_tokens: ParamId,
    predict_next: bool,
) -> Stage1Forward {
    let n = model.cfg.patch.n_tokens();
    assert_eq!(mask.n_tokens(), n, "mask does not cover the token grid");
    let enc = model.encode_touch_graph(g, flat, Some(&mask.visible), sensor_tokens);
    let l = model.cfg.sensor_tokens;
    let n_vis = mask.visible.len();
    let n_mask = mask.masked.len();

    let enc_tokens = g.slice_rows(enc.seq_out, l, l + n_vis);
    let dec_vis = model.decoder.embed.forward(g, enc_tokens);

    // Visible-then-masked layout, reordered to the canonical token order.
    let seq_vm = if n_mask > 0 {
        let mask_tok = g.param(model.decoder.mask_token);
        let tiled = g.tile_rows(mask_tok, n_mask);
        g.concat_rows(&[dec_vis, tiled])
    } else {
        dec_vis
    };
    let mut canonical = vec![0usize; n];
    for (pos, &t) in mask.visible.iter().enumerate() {
        canonical[t] = pos;
    }
    for (pos, &t) in mask.masked.iter().enumerate() {
        canonical[t] = n_vis + pos;
    }
    let seq = g.select_rows(seq_vm, &canonical);

    let (sp_idx, tm_idx) = Model::token_indices(&model.cfg.patch);
    let pos_s_table = g.param(model.decoder.pos_spatial);
    let pos_t_table = g.param(model.decoder.pos_temporal);
    let pos_s = g.select_rows(pos_s_table, &sp_idx);
    let pos_t = g.select_rows(pos_t_table, &tm_idx);
    let seq = g.add(seq, pos_s);
    let mut seq = g.add(seq, pos_t);

    if predict_next {
        let s = model.cfg.patch.tokens_per_slot();
        let (ft, _, _) = model.cfg.patch.grid();
        let fq = g.param(model.decoder.future_query);
        let tiled = g.tile_rows(fq, s);
        let sp_f: Vec<usize> = (0..s).collect();
        let tm_f: Vec<usize> = vec![ft; s];
        let pos_sf = g.select_rows(pos_s_table, &sp_f);
        let pos_tf = g.select_rows(pos_t_table, &tm_f);
        let q = g.add(tiled, pos_sf);
        let q = g.add(q, pos_tf);
        seq = g.concat_rows(&[seq, q]);
    }

    let dec_len = g.value(seq).rows();
    let out = model.decoder.trunk.forward(g, seq);
    let pred = model.decoder.head.forward(g, out);
    Stage1Forward { pred_tokens: pred, dec_len, enc_len: enc.seq_len }
}

/// Reconstruction loss over masked tokens. Per-token error is the mean over
/// the tubelet's pixels; static media average over |mask|, dynamic over
/// F * |mask|.
pub fn loss_rec_graph(
    g: &mut Graph<'_>,
    pred_tokens: Id,
    target_flat: &Tensor,
    mask: &MaskSet,
    dynamic: bool,
    frames: usize,
) -> Result<Id> {
    if mask.masked.is_empty() {
        return Err(Error::EmptyMask);
    }
    if g.value(pred_tokens).cols() != target_flat.cols()
        || g.value(pred_tokens).rows() < target_flat.rows()
    {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs target {}x{}",
            g.value(pred_tokens).rows(),
            g.value(pred_tokens).cols(),
            target_flat.rows(),
            target_flat.cols()
        )));
    }
    let pred_m = g.select_rows(pred_tokens, &mask.masked);
    let targ_all = g.input(target_flat.clone());
    let targ_m = g.select_rows(targ_all, &mask.masked);
    let diff = g.sub(pred_m, targ_m);
    let sq = g.mul(diff, diff);
    let mean = g.mean_all(sq);
    Ok(if dynamic { g.scale(mean, 1.0 / frames as f32) } else { mean })
}

/// Next-frame loss: mean over the predicted frame's tokens of per-tubelet
/// mean squared error. `pred_tokens` rows `n..n+s` hold the future queries'
/// outputs.
pub fn loss_pred_next_graph(
    g: &mut Graph<'_>,
    pred_tokens: Id,
    n: usize,
    target_frame: &Tensor,
) -> Result<Id> {
    let s = target_frame.rows();
    if g.value(pred_tokens).rows() != n + s {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} rows, expected {} grid + {} future",
            g.value(pred_tokens).rows(),
            n,
            s
        )));
    }
    let pred_f = g.slice_rows(pred_tokens, n, n + s);
    let targ = g.input(target_frame.clone());
    let diff = g.sub(pred_f, targ);
    let sq = g.mul(diff, diff);
    Ok(g.mean_all(sq))
}

/// Tensor-level reconstruction loss (contract surface for oracle tests).
pub fn loss_rec(
    original_flat: &Tensor,
    reconstructed: &Tensor,
    mask: &MaskSet,
    dynamic: bool,
    frames: usize,
) -> Result<f32> {
    if original_flat.rows() != reconstructed.rows()
        || original_flat.cols() != reconstructed.cols()
    {
        return Err(Error::ShapeMismatch(format!(
            "original {}x{} vs reconstruction {}x{}",
            original_flat.rows(),
            original_flat.cols(),
            reconstructed.rows(),
            reconstructed.cols()
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let pred = g.input(reconstructed.clone());
    let loss = loss_rec_graph(&mut g, pred, original_flat, mask, dynamic, frames)?;
    Ok(g.scalar_value(loss))
}

/// Tensor-level next-frame loss.
pub fn loss_pred_next(target_frame: &Tensor, predicted_frame: &Tensor) -> Result<f32> {
    if target_frame.rows() != predicted_frame.rows()
        || target_frame.cols() != predicted_frame.cols()
    {
        return Err(Error::ShapeMismatch(format!(
            "target {}x{} vs prediction {}x{}",
            target_frame.rows(),
            target_frame.cols(),
            predicted_frame.rows(),
            predicted_frame.cols()
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let pred = g.input(predicted_frame.clone());
    let loss = loss_pred_next_graph(&mut g, pred, 0, target_frame)?;
    Ok(g.scalar_value(loss))
}
