//! Two-stage training orchestration: media-kind alternation, the linear
//! universal-token and learning-rate schedules, decoupled-weight-decay Adam,
//! loss logging, and the stage-ordering rule (stage 2 starts from a stage-1
//! checkpoint unless explicitly run from scratch).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::align::align_loss_graph;
use crate::config::{TrainConfig, TrainStage};
use crate::data::{make_batches, BatchMediaKind, LoadedData, Manifest, Split};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Id, ParamId};
use crate::input::flatten_tubelets;
use crate::matching::{match_loss_graph, sample_triplets};
use crate::rng::{stream, StreamTag};
use crate::stage1::{loss_pred_next_graph, loss_rec_graph, sample_mask, stage1_forward};
use crate::tensor::Tensor;

/// Universal-token probability: linear 0 -> p_u_max over the stage.
pub fn schedule_pu(step: usize, total_steps: usize, p_u_max: f32) -> f32 {
    assert!(total_steps >= 1 && step <= total_steps);
    p_u_max * (step as f32 / total_steps as f32)
}

/// Linear warmup 0 -> base_lr over `warmup_steps`, then linear decay to 0 at
/// `total_steps`.
pub fn schedule_lr(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f32) -> f32 {
    assert!(warmup_steps < total_steps);
    if step <= warmup_steps {
        if warmup_steps == 0 {
            base_lr
        } else {
            base_lr * (step as f32 / warmup_steps as f32)
        }
    } else {
        base_lr * (1.0 - (step - warmup_steps) as f32 / (total_steps - warmup_steps) as f32)
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug)]
pub struct AdamW {
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f32) -> Self {
        AdamW {
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn state(&self, id: ParamId) -> Option<(&Tensor, &Tensor)> {
        match (&self.m[id.0], &self.v[id.0]) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    pub fn restore(&mut self, id: ParamId, m: Tensor, v: Tensor) {
        self.m[id.0] = Some(m);
        self.v[id.0] = Some(v);
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// One update over every trainable parameter that received a gradient.
    pub fn apply(&mut self, model: &mut Model, grads: &Gradients, lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in model.store.ids() {
            if !model.store.is_trainable(id) {
                continue;
            }
            let g = match grads.get(id) {
                Some(g) => g,
                None => continue,
            };
            let (rows, cols) = g.shape();
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let theta = model.store.get_mut(id);
            for ((t, gv), (mv, vv)) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data().iter())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *t -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *t);
            }
        }
    }
}

/// One loss-log line; inapplicable components stay `None` and serialize as
/// empty CSV fields.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: u8,
    pub loss_total: f32,
    pub loss_rec_s: Option<f32>,
    pub loss_rec_d: Option<f32>,
    pub loss_pred_d: Option<f32>,
    pub loss_align: Option<f32>,
    pub loss_match: Option<f32>,
    pub lr: f32,
    pub p_u: f32,
}

pub fn write_loss_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from(
        "step,stage,loss_total,loss_rec_s,loss_rec_d,loss_pred_d,loss_align,loss_match,lr,p_u\n",
    );
    let fmt = |v: Option<f32>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.stage,
            r.loss_total,
            fmt(r.loss_rec_s),
            fmt(r.loss_rec_d),
            fmt(r.loss_pred_d),
            fmt(r.loss_align),
            fmt(r.loss_match),
            r.lr,
            r.p_u
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    /// Mean total loss per epoch.
    pub epoch_means: Vec<f32>,
    /// Final optimizer state, for checkpointing.
    pub optimizer: AdamW,
}

/// The deterministic batch plan for one epoch: image and video batches
/// strictly alternating (image first) while both kinds remain, then the
/// longer list drains.
pub fn plan_epoch(
    manifest: &Manifest,
    cfg: &TrainConfig,
    clip_frames: usize,
    epoch: usize,
) -> Result<Vec<(BatchMediaKind, Vec<String>)>> {
    let epoch_seed = cfg.seed ^ (0x9e37 + epoch as u64);
    let images = make_batches(
        manifest,
        Split::Train,
        BatchMediaKind::Image,
        clip_frames,
        cfg.batch_size,
        epoch_seed,
        cfg.drop_last,
    )?;
    let videos = if cfg.ablation.no_dynamic {
        Vec::new()
    } else {
        match make_batches(
            manifest,
            Split::Train,
            BatchMediaKind::Video,
            clip_frames,
            cfg.batch_size,
            epoch_seed,
            cfg.drop_last,
        ) {
            Ok(v) => v,
            // A world of single-frame samples trains on images alone.
            Err(Error::NoEligibleSamples { .. }) => Vec::new(),
            Err(e) => return Err(e),
        }
    };

    let mut plan = Vec::with_capacity(images.len() + videos.len());
    if cfg.per_batch_alternation {
        let mut it_img = images.into_iter();
        let mut it_vid = videos.into_iter();
        loop {
            match (it_img.next(), it_vid.next()) {
                (Some(i), Some(v)) => {
                    plan.push((BatchMediaKind::Image, i));
                    plan.push((BatchMediaKind::Video, v));
                }
                (Some(i), None) => {
                    plan.push((BatchMediaKind::Image, i));
                    plan.extend(it_img.by_ref().map(|b| (BatchMediaKind::Image, b)));
                    break;
                }
                (None, Some(v)) => {
                    plan.push((BatchMediaKind::Video, v));
                    plan.extend(it_vid.by_ref().map(|b| (BatchMediaKind::Video, b)));
                    break;
                }
                (None, None) => break,
            }
        }
    } else {
        plan.extend(images.into_iter().map(|b| (BatchMediaKind::Image, b)));
        plan.extend(videos.into_iter().map(|b| (BatchMediaKind::Video, b)));
    }
    Ok(plan)
}

fn divergence_check(step: usize, loss: f32, batch: &[String]) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalDivergence { step, batch_ids: batch.to_vec() })
    }
}

/// Stage 1: masked reconstruction (+ next-frame prediction on clips).
pub fn train_stage1(
    model: &mut Model,
    cfg: &TrainConfig,
    manifest: &Manifest,
    data: &LoadedData,
) -> Result<TrainReport> {
    cfg.validate()?;
    let patch = model.cfg.patch;
    let n_tokens = patch.n_tokens();
    let steps_per_epoch = plan_epoch(manifest, cfg, patch.f, 0)?.len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = (cfg.warmup_epochs * steps_per_epoch).min(total_steps.saturating_sub(1));

    let mut opt = AdamW::new(model.store.len(), cfg.weight_decay);
    let mut rows = Vec::new();
    let mut epoch_means = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let plan = plan_epoch(manifest, cfg, patch.f, epoch)?;
        let mut epoch_sum = 0.0f64;
        for (kind, batch) in plan {
            step += 1;
            let lr = schedule_lr(step, warmup_steps, total_steps, cfg.base_lr);
            let p_u = if cfg.ablation.no_universal_tokens {
                0.0
            } else {
                schedule_pu(step, total_steps, cfg.p_u_max)
            };

            let mut g = Graph::new(&model.store);
            let mut sample_losses: Vec<Id> = Vec::with_capacity(batch.len());
            let mut rec_vals = Vec::new();
            let mut pred_vals = Vec::new();
            for (i, id) in batch.iter().enumerate() {
                let sample = manifest
                    .get(id)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown id {id:?}")))?;
                let mut tok_rng =
                    stream(cfg.seed, StreamTag::SensorToken, &[1, step as u64, i as u64]);
                let (tokens, _) =
                    model.bank.select_sensor_tokens(&sample.sensor, false, p_u, &mut tok_rng)?;
                let mut mask_rng = stream(cfg.seed, StreamTag::Mask, &[step as u64, i as u64]);
                let mask = sample_mask(n_tokens, cfg.mask_ratio, &mut mask_rng);

                let loss = match kind {
                    BatchMediaKind::Image => {
                        let media = data.media_image(id, &patch)?;
                        let flat = flatten_tubelets(&media, &patch)?;
                        let fwd = stage1_forward(model, &mut g, &flat, &mask, tokens, false);
                        let rec =
                            loss_rec_graph(&mut g, fwd.pred_tokens, &flat, &mask, false, patch.f)?;
                        rec_vals.push(g.scalar_value(rec));
                        rec
                    }
                    BatchMediaKind::Video => {
                        let (media, next) = data.media_video(id, &patch)?;
                        let flat = flatten_tubelets(&media, &patch)?;
                        let target_next = crate::input::flatten_frame(&next, &patch)?;
                        let fwd = stage1_forward(model, &mut g, &flat, &mask, tokens, true);
                        let rec =
                            loss_rec_graph(&mut g, fwd.pred_tokens, &flat, &mask, true, patch.f)?;
                        let pred =
                            loss_pred_next_graph(&mut g, fwd.pred_tokens, n_tokens, &target_next)?;
                        rec_vals.push(g.scalar_value(rec));
                        pred_vals.push(g.scalar_value(pred));
                        g.add(rec, pred)
                    }
                };
                sample_losses.push(loss);
            }
            let mut total = sample_losses[0];
            for &l in &sample_losses[1..] {
                total = g.add(total, l);
            }
            let total = g.scale(total, 1.0 / sample_losses.len() as f32);
            let loss_val = g.scalar_value(total);
            divergence_check(step, loss_val, &batch)?;
            let grads = g.backward(total);
            drop(g);
            opt.apply(model, &grads, lr);

            let mean = |vals: &[f32]| {
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f32>() / vals.len() as f32)
                }
            };
            epoch_sum += loss_val as f64;
            rows.push(LogRow {
                step,
                stage: 1,
                loss_total: loss_val,
                loss_rec_s: if kind == BatchMediaKind::Image { mean(&rec_vals) } else { None },
                loss_rec_d: if kind == BatchMediaKind::Video { mean(&rec_vals) } else { None },
                loss_pred_d: mean(&pred_vals),
                loss_align: None,
                loss_match: None,
                lr,
                p_u,
            });
        }
        epoch_means.push((epoch_sum / steps_per_epoch as f64) as f32);
    }
    Ok(TrainReport { rows, epoch_means, optimizer: opt })
}

/// Stage-ordering rule: callers hand over the provenance of the initial
/// weights; a fresh model is only allowed with `from_scratch`.
pub fn check_stage2_init(init_stage: Option<TrainStage>, from_scratch: bool) -> Result<()> {
    match init_stage {
        Some(_) => Ok(()),
        None if from_scratch => Ok(()),
        None => Err(Error::MissingStage1),
    }
}

/// Stage 2: modality-missing-aware alignment plus cross-sensor matching.
pub fn train_stage2(
    model: &mut Model,
    cfg: &TrainConfig,
    manifest: &Manifest,
    data: &LoadedData,
    init_stage: Option<TrainStage>,
    from_scratch: bool,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_stage2_init(init_stage, from_scratch)?;
    let patch = model.cfg.patch;
    let steps_per_epoch = plan_epoch(manifest, cfg, patch.f, 0)?.len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = (cfg.warmup_epochs * steps_per_epoch).min(total_steps.saturating_sub(1));

    let mut opt = AdamW::new(model.store.len(), cfg.weight_decay);
    let mut rows = Vec::new();
    let mut epoch_means = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let plan = plan_epoch(manifest, cfg, patch.f, epoch)?;
        let mut epoch_sum = 0.0f64;
        for (kind, batch) in plan {
            step += 1;
            let lr = schedule_lr(step, warmup_steps, total_steps, cfg.base_lr);
            let p_u = if cfg.ablation.no_universal_tokens {
                0.0
            } else {
                schedule_pu(step, total_steps, cfg.p_u_max)
            };

            let mut g = Graph::new(&model.store);
            // Touch embedding per batch member (plus any off-batch triplet
            // partners), deduplicated by sample id.
            let mut emb_nodes: BTreeMap<String, Id> = BTreeMap::new();
            let draw = |model: &Model,
                            g: &mut Graph<'_>,
                            id: &str,
                            slot: u64|
             -> Result<Id> {
                let sample = manifest
                    .get(id)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown id {id:?}")))?;
                let mut tok_rng =
                    stream(cfg.seed, StreamTag::SensorToken, &[2, step as u64, slot]);
                let (tokens, _) =
                    model.bank.select_sensor_tokens(&sample.sensor, false, p_u, &mut tok_rng)?;
                let media = match kind {
                    BatchMediaKind::Video if sample.is_video_capable(patch.f) => {
                        data.media_video(id, &patch)?.0
                    }
                    _ => data.media_image(id, &patch)?,
                };
                let flat = flatten_tubelets(&media, &patch)?;
                let fwd = model.encode_touch_graph(g, &flat, None, tokens);
                Ok(fwd.embedding)
            };

            for (i, id) in batch.iter().enumerate() {
                let node = draw(model, &mut g, id, i as u64)?;
                emb_nodes.insert(id.clone(), node);
            }

            // Alignment over the batch.
            let batch_nodes: Vec<Id> = batch.iter().map(|id| emb_nodes[id]).collect();
            let touch_matrix = g.concat_rows(&batch_nodes);
            let mut vision_rows: Vec<(usize, Id)> = Vec::new();
            let mut text_rows: Vec<(usize, Id)> = Vec::new();
            for (i, id) in batch.iter().enumerate() {
                let sample = manifest.get(id).expect("validated above");
                if !cfg.ablation.no_vision {
                    if let Some(vis) = data.get(id).and_then(|s| s.vision.as_ref()) {
                        let node = model.encode_vision_graph(&mut g, vis)?;
                        vision_rows.push((i, node));
                    }
                }
                if !cfg.ablation.no_text {
                    if let Some(text) = &sample.text {
                        let node = model.encode_text_graph(&mut g, text)?;
                        text_rows.push((i, node));
                    }
                }
            }
            let align = match align_loss_graph(&mut g, touch_matrix, &vision_rows, &text_rows, &cfg.align)
            {
                Ok((id, _)) => Some(id),
                Err(Error::AllSubsetsEmpty) => None,
                Err(e) => return Err(e),
            };

            // Cross-sensor matching over triplets anchored at the batch.
            let match_term = if cfg.ablation.no_match || cfg.lambda_match == 0.0 {
                None
            } else {
                let mut trip_rng = stream(cfg.seed, StreamTag::Triplet, &[step as u64]);
                let triplets = sample_triplets(manifest, &batch, &mut trip_rng);
                if triplets.is_empty() {
                    None
                } else {
                    let mut extra_slot = batch.len() as u64;
                    let mut losses = Vec::with_capacity(triplets.len());
                    for t in &triplets {
                        for partner in [&t.positive, &t.negative] {
                            if !emb_nodes.contains_key(partner) {
                                let node = draw(model, &mut g, partner, extra_slot)?;
                                extra_slot += 1;
                                emb_nodes.insert(partner.clone(), node);
                            }
                        }
                        let m_pos = model.match_head.score_graph(
                            &mut g,
                            emb_nodes[&t.anchor],
                            emb_nodes[&t.positive],
                        );
                        let m_neg = model.match_head.score_graph(
                            &mut g,
                            emb_nodes[&t.anchor],
                            emb_nodes[&t.negative],
                        );
                        losses.push(match_loss_graph(&mut g, m_pos, m_neg));
                    }
                    let mut sum = losses[0];
                    for &l in &losses[1..] {
                        sum = g.add(sum, l);
                    }
                    Some(g.scale(sum, 1.0 / losses.len() as f32))
                }
            };

            let total = match (align, match_term) {
                (Some(a), Some(m)) => {
                    let scaled = g.scale(m, cfg.lambda_match);
                    Some(g.add(a, scaled))
                }
                (Some(a), None) => Some(a),
                (None, Some(m)) => Some(g.scale(m, cfg.lambda_match)),
                (None, None) => None,
            };
            let Some(total) = total else {
                // Nothing to optimize for this batch.
                rows.push(LogRow {
                    step,
                    stage: 2,
                    loss_total: 0.0,
                    loss_rec_s: None,
                    loss_rec_d: None,
                    loss_pred_d: None,
                    loss_align: None,
                    loss_match: None,
                    lr,
                    p_u,
                });
                continue;
            };
            let loss_val = g.scalar_value(total);
            divergence_check(step, loss_val, &batch)?;
            let align_val = align.map(|id| g.scalar_value(id));
            let match_val = match_term.map(|id| g.scalar_value(id));
            let grads = g.backward(total);
            drop(g);
            opt.apply(model, &grads, lr);

            epoch_sum += loss_val as f64;
            rows.push(LogRow {
                step,
                stage: 2,
                loss_total: loss_val,
                loss_rec_s: None,
                loss_rec_d: None,
                loss_pred_d: None,
                loss_align: align_val,
                loss_match: match_val,
                lr,
                p_u,
            });
        }
        epoch_means.push((epoch_sum / steps_per_epoch as f64) as f32);
    }
    Ok(TrainReport { rows, epoch_means, optimizer: opt })
}
