//! Modality-missing-aware touch/vision/text contrastive alignment.
//!
//! Six directional InfoNCE losses over the largest index subset where both
//! modalities of a direction exist: touch<->vision over the vision-present
//! set, touch<->text over the text-present set, vision<->text over the
//! intersection. Directions with an empty subset contribute zero and the
//! remaining weights are not renormalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Id, ParamStore};
use crate::tensor::Tensor;

/// Alignment strengths and softmax temperature.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AlignWeights {
    pub alpha_tv: f32,
    pub alpha_tl: f32,
    pub alpha_vl: f32,
    pub tau: f32,
}

impl Default for AlignWeights {
    fn default() -> Self {
        AlignWeights { alpha_tv: 1.0, alpha_tl: 1.0, alpha_vl: 0.2, tau: 0.07 }
    }
}

impl AlignWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if self.alpha_tv < 0.0 || self.alpha_tl < 0.0 || self.alpha_vl < 0.0 {
            return Err(Error::InvalidConfig("alignment weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// One batch of unit-norm embeddings; vision/text rows may be absent.
#[derive(Debug, Clone)]
pub struct AlignedBatch {
    /// `B x embed_dim`; touch is always present.
    pub touch: Tensor,
    pub vision: Vec<Option<Vec<f32>>>,
    pub text: Vec<Option<Vec<f32>>>,
}

impl AlignedBatch {
    pub fn len(&self) -> usize {
        self.touch.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.touch.rows() == 0
    }

    pub fn omega_v(&self) -> Vec<usize> {
        (0..self.vision.len()).filter(|&i| self.vision[i].is_some()).collect()
    }

    pub fn omega_l(&self) -> Vec<usize> {
        (0..self.text.len()).filter(|&i| self.text[i].is_some()).collect()
    }
}

/// Directional InfoNCE over aligned anchor/target rows:
/// `-(1/|S|) sum_i log softmax_j(a_i . t_j / tau)[i]`.
///
/// Anchors and targets must already be restricted to the direction's index
/// subset, in the same order.
pub fn info_nce_graph(g: &mut Graph<'_>, anchors: Id, targets: Id, tau: f32) -> Id {
    let sim = g.matmul_nt(anchors, targets);
    let sim = g.scale(sim, 1.0 / tau);
    let logp = g.log_softmax_rows(sim);
    let diag = g.diag(logp);
    let mean = g.mean_all(diag);
    g.neg(mean)
}

/// Tensor-level directional loss; errors on an empty subset.
pub fn info_nce_directional(anchors: &Tensor, targets: &Tensor, tau: f32) -> Result<f32> {
    if anchors.rows() == 0 {
        return Err(Error::EmptySubset("directional"));
    }
    if anchors.rows() != targets.rows() || anchors.cols() != targets.cols() {
        return Err(Error::ShapeMismatch(format!(
            "anchors {}x{} vs targets {}x{}",
            anchors.rows(),
            anchors.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let a = g.input(anchors.clone());
    let t = g.input(targets.clone());
    let loss = info_nce_graph(&mut g, a, t, tau);
    Ok(g.scalar_value(loss))
}

/// Per-direction values for logging; `None` means the subset was empty and
/// the direction was skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AlignParts {
    pub t_to_v: Option<f32>,
    pub v_to_t: Option<f32>,
    pub t_to_l: Option<f32>,
    pub l_to_t: Option<f32>,
    pub v_to_l: Option<f32>,
    pub l_to_v: Option<f32>,
}

/// Graph-side joint alignment loss.
///
/// `touch` is the `B x e` touch matrix node. `vision` and `text` list the
/// present rows as `(batch index, 1 x e node)` in ascending index order.
pub fn align_loss_graph(
    g: &mut Graph<'_>,
    touch: Id,
    vision: &[(usize, Id)],
    text: &[(usize, Id)],
    w: &AlignWeights,
) -> Result<(Id, AlignParts)> {
    let omega_v: Vec<usize> = vision.iter().map(|&(i, _)| i).collect();
    let omega_l: Vec<usize> = text.iter().map(|&(i, _)| i).collect();

    let mut parts = AlignParts::default();
    let mut terms: Vec<Id> = Vec::new();

    if !omega_v.is_empty() {
        let vis_rows: Vec<Id> = vision.iter().map(|&(_, id)| id).collect();
        let x_v = g.concat_rows(&vis_rows);
        let x_t = g.select_rows(touch, &omega_v);
        let t_to_v = info_nce_graph(g, x_t, x_v, w.tau);
        let v_to_t = info_nce_graph(g, x_v, x_t, w.tau);
        parts.t_to_v = Some(g.scalar_value(t_to_v));
        parts.v_to_t = Some(g.scalar_value(v_to_t));
        let sum = g.add(t_to_v, v_to_t);
        terms.push(g.scale(sum, w.alpha_tv / 2.0));
    }

    if !omega_l.is_empty() {
        let text_rows: Vec<Id> = text.iter().map(|&(_, id)| id).collect();
        let x_l = g.concat_rows(&text_rows);
        let x_t = g.select_rows(touch, &omega_l);
        let t_to_l = info_nce_graph(g, x_t, x_l, w.tau);
        let l_to_t = info_nce_graph(g, x_l, x_t, w.tau);
        parts.t_to_l = Some(g.scalar_value(t_to_l));
        parts.l_to_t = Some(g.scalar_value(l_to_t));
        let sum = g.add(t_to_l, l_to_t);
        terms.push(g.scale(sum, w.alpha_tl / 2.0));
    }

    // Vision-text runs on the intersection; select by position within each
    // modality's present-row list.
    let inter: Vec<usize> =
        omega_v.iter().cloned().filter(|i| omega_l.contains(i)).collect();
    if !inter.is_empty() {
        let v_pos: Vec<usize> =
            inter.iter().map(|i| omega_v.iter().position(|j| j == i).unwrap()).collect();
        let l_pos: Vec<usize> =
            inter.iter().map(|i| omega_l.iter().position(|j| j == i).unwrap()).collect();
        let vis_rows: Vec<Id> = vision.iter().map(|&(_, id)| id).collect();
        let text_rows: Vec<Id> = text.iter().map(|&(_, id)| id).collect();
        let x_v_all = g.concat_rows(&vis_rows);
        let x_l_all = g.concat_rows(&text_rows);
        let x_v = g.select_rows(x_v_all, &v_pos);
        let x_l = g.select_rows(x_l_all, &l_pos);
        let v_to_l = info_nce_graph(g, x_v, x_l, w.tau);
        let l_to_v = info_nce_graph(g, x_l, x_v, w.tau);
        parts.v_to_l = Some(g.scalar_value(v_to_l));
        parts.l_to_v = Some(g.scalar_value(l_to_v));
        let sum = g.add(v_to_l, l_to_v);
        terms.push(g.scale(sum, w.alpha_vl / 2.0));
    }

    if terms.is_empty() {
        return Err(Error::AllSubsetsEmpty);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok((total, parts))
}

/// Tensor-level joint alignment loss (Eq.-level contract surface).
pub fn align_loss(batch: &AlignedBatch, w: &AlignWeights) -> Result<f32> {
    w.validate()?;
    let e = batch.touch.cols();
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let touch = g.input(batch.touch.clone());
    let mut vision = Vec::new();
    for (i, row) in batch.vision.iter().enumerate() {
        if let Some(v) = row {
            assert_eq!(v.len(), e, "vision row dim");
            let id = g.input(Tensor::from_vec(1, e, v.clone()));
            vision.push((i, id));
        }
    }
    let mut text = Vec::new();
    for (i, row) in batch.text.iter().enumerate() {
        if let Some(v) = row {
            assert_eq!(v.len(), e, "text row dim");
            let id = g.input(Tensor::from_vec(1, e, v.clone()));
            text.push((i, id));
        }
    }
    let (loss, _) = align_loss_graph(&mut g, touch, &vision, &text, w)?;
    Ok(g.scalar_value(loss))
}
