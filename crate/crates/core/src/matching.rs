//! Cross-sensor matching: positive pairs are touches of the same position on
//! the same object by different sensors, negatives violate object or
//! position. Scores come from an MLP over the elementwise product of the two
//! embeddings (symmetric by construction) squashed into (0,1), trained with
//! binary cross entropy.

use rand::Rng;

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::graph::{Graph, Id, ParamStore};
use crate::nn::LinearParams;
use crate::tensor::Tensor;

/// Log-domain guard for the squashed score.
pub const SCORE_EPS: f32 = 1e-7;

/// Anchor/positive/negative sample ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchTriplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

/// `embed_dim -> embed_dim -> 1` with ReLU hidden and logistic output.
#[derive(Debug, Clone)]
pub struct MatchHeadParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MatchHeadParams {
    pub fn register(store: &mut ParamStore, embed_dim: usize, rng: &mut impl Rng) -> Self {
        MatchHeadParams {
            fc1: LinearParams::register(store, "match.fc1", embed_dim, embed_dim, rng, true),
            fc2: LinearParams::register(store, "match.fc2", embed_dim, 1, rng, true),
        }
    }

    /// Score node for a pair of embedding rows (`[1,e]` each), clamped to
    /// `[eps, 1-eps]`.
    pub fn score_graph(&self, g: &mut Graph<'_>, x: Id, x_other: Id) -> Id {
        let prod = g.mul(x, x_other);
        let h = self.fc1.forward(g, prod);
        let h = g.relu(h);
        let logit = self.fc2.forward(g, h);
        let m = g.sigmoid(logit);
        g.clamp(m, SCORE_EPS, 1.0 - SCORE_EPS)
    }
}

/// Tensor-level matching score.
pub fn match_score(head: &MatchHeadParams, store: &ParamStore, x: &[f32], y: &[f32]) -> Result<f32> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {}", x.len(), y.len())));
    }
    let mut g = Graph::new(store);
    let a = g.input(Tensor::from_vec(1, x.len(), x.to_vec()));
    let b = g.input(Tensor::from_vec(1, y.len(), y.to_vec()));
    let m = head.score_graph(&mut g, a, b);
    Ok(g.scalar_value(m))
}

/// BCE with y+ = 1, y- = 0: `-log(m+) - log(1 - m-)`.
pub fn match_loss(m_pos: f32, m_neg: f32) -> Result<f32> {
    for m in [m_pos, m_neg] {
        if !(0.0..=1.0).contains(&m) || m == 0.0 || m == 1.0 {
            return Err(Error::DomainError(m));
        }
    }
    Ok(-m_pos.ln() - (1.0 - m_neg).ln())
}

/// Graph-side BCE for one triplet's scores.
pub fn match_loss_graph(g: &mut Graph<'_>, m_pos: Id, m_neg: Id) -> Id {
    let log_pos = g.log(m_pos);
    let ones = g.input(Tensor::full(1, 1, 1.0));
    let one_minus = g.sub(ones, m_neg);
    let log_neg = g.log(one_minus);
    let sum = g.add(log_pos, log_neg);
    g.neg(sum)
}

/// One triplet per eligible anchor: the positive is a uniformly drawn
/// other-sensor member of the anchor's group; the negative is a uniformly
/// drawn same-split sample differing in object or position. Anchors whose
/// group has no second sensor are skipped.
pub fn sample_triplets(
    manifest: &Manifest,
    anchor_ids: &[String],
    rng: &mut impl Rng,
) -> Vec<MatchTriplet> {
    let mut out = Vec::new();
    for aid in anchor_ids {
        let anchor = match manifest.get(aid) {
            Some(s) => s,
            None => continue,
        };
        let group = match manifest.group(&anchor.group_id) {
            Some(g) => g,
            None => continue,
        };
        let positives: Vec<&str> = group
            .members
            .iter()
            .filter(|m| m.sensor != anchor.sensor)
            .map(|m| m.id.as_str())
            .collect();
        if positives.is_empty() {
            continue;
        }
        let negatives: Vec<&str> = manifest
            .samples()
            .iter()
            .filter(|s| {
                s.split == anchor.split
                    && (s.object_id != anchor.object_id || s.position_id != anchor.position_id)
            })
            .map(|s| s.id.as_str())
            .collect();
        if negatives.is_empty() {
            continue;
        }
        let positive = positives[rng.gen_range(0..positives.len())];
        let negative = negatives[rng.gen_range(0..negatives.len())];
        out.push(MatchTriplet {
            anchor: aid.clone(),
            positive: positive.to_string(),
            negative: negative.to_string(),
        });
    }
    out
}
