//! Downstream evaluation: embedding extraction, linear probing on frozen
//! features, object-vs-sensor silhouette separation, and cross-sensor
//! matching metrics, plus the CSV/JSON export formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{LoadedData, Manifest, Split};
use crate::encoder::{Model, TokenPolicy};
use crate::error::{Error, Result};
use crate::matching::match_score;
use crate::rng::{stream, StreamTag};
use crate::tensor::Tensor;

/// One embedding row with its provenance labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbRow {
    pub id: String,
    pub object_id: String,
    pub position_id: String,
    pub sensor: String,
    pub split: Split,
    pub material: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: Vec<EmbRow>,
    pub dim: usize,
}

/// Label column selector for probes and silhouettes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelColumn {
    Material,
    Object,
    Sensor,
    Position,
}

impl LabelColumn {
    pub fn of(self, row: &EmbRow) -> &str {
        match self {
            LabelColumn::Material => &row.material,
            LabelColumn::Object => &row.object_id,
            LabelColumn::Sensor => &row.sensor,
            LabelColumn::Position => &row.position_id,
        }
    }
}

/// Material class is conventionally the suffix of `object_id` after the last
/// dash (the synthetic world writes `obj012-rubber`).
pub fn material_label(object_id: &str) -> String {
    object_id.rsplit('-').next().unwrap_or(object_id).to_string()
}

/// Encode every sample under the given token policy. `Specific` fails on
/// sensors the model has no token set for.
pub fn extract_embeddings(
    model: &Model,
    manifest: &Manifest,
    data: &LoadedData,
    policy: TokenPolicy,
) -> Result<EmbeddingTable> {
    let mut rows = Vec::with_capacity(manifest.samples().len());
    for sample in manifest.samples() {
        let tokens = model.bank.tokens_for(&sample.sensor, policy)?;
        let media = data.media_image(&sample.id, &model.cfg.patch)?;
        let (vector, _) = model.touch_embedding(&media, tokens)?;
        rows.push(EmbRow {
            id: sample.id.clone(),
            object_id: sample.object_id.clone(),
            position_id: sample.position_id.clone(),
            sensor: sample.sensor.clone(),
            split: sample.split,
            material: material_label(&sample.object_id),
            vector,
        });
    }
    let dim = rows.first().map(|r| r.vector.len()).unwrap_or(model.cfg.encoder.embed_dim);
    Ok(EmbeddingTable { rows, dim })
}

/// Per-sample routing that follows the inference rule: sensors the model was
/// trained on use their specific tokens, unknown sensors the universal set.
pub fn extract_embeddings_routed(
    model: &Model,
    manifest: &Manifest,
    data: &LoadedData,
) -> Result<EmbeddingTable> {
    let mut rows = Vec::with_capacity(manifest.samples().len());
    for sample in manifest.samples() {
        let tokens = match model.bank.specific_for(&sample.sensor) {
            Ok(id) => id,
            Err(Error::UnknownSensor(_)) => model.bank.universal,
            Err(e) => return Err(e),
        };
        let media = data.media_image(&sample.id, &model.cfg.patch)?;
        let (vector, _) = model.touch_embedding(&media, tokens)?;
        rows.push(EmbRow {
            id: sample.id.clone(),
            object_id: sample.object_id.clone(),
            position_id: sample.position_id.clone(),
            sensor: sample.sensor.clone(),
            split: sample.split,
            material: material_label(&sample.object_id),
            vector,
        });
    }
    let dim = rows.first().map(|r| r.vector.len()).unwrap_or(model.cfg.encoder.embed_dim);
    Ok(EmbeddingTable { rows, dim })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f32,
    pub n_train: usize,
    pub n_test: usize,
    pub class_count: usize,
}

const PROBE_ITERS: usize = 500;
const PROBE_LR: f32 = 0.1;

/// Multinomial logistic regression on frozen train-split embeddings,
/// evaluated on the test split. Full-batch gradient descent from zero init:
/// deterministic regardless of seed.
pub fn linear_probe(table: &EmbeddingTable, label: LabelColumn, _seed: u64) -> Result<ProbeResult> {
    let train: Vec<&EmbRow> = table.rows.iter().filter(|r| r.split == Split::Train).collect();
    let test: Vec<&EmbRow> = table.rows.iter().filter(|r| r.split == Split::Test).collect();
    let mut classes: Vec<String> =
        train.iter().map(|r| label.of(r).to_string()).collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::DegenerateLabels(format!(
            "{} classes in train split",
            classes.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::DegenerateLabels("no test rows".into()));
    }
    let (w, b) = fit_softmax_regression(&train, table.dim, &classes, label);

    let mut correct = 0usize;
    for row in &test {
        let pred = predict_class(&w, &b, &row.vector);
        if classes[pred] == label.of(row) {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        accuracy: correct as f32 / test.len() as f32,
        n_train: train.len(),
        n_test: test.len(),
        class_count: classes.len(),
    })
}

/// Exposed for the probe-isolation property test: the fitted weights depend
/// on train rows only.
pub fn fit_softmax_regression(
    train: &[&EmbRow],
    dim: usize,
    classes: &[String],
    label: LabelColumn,
) -> (Tensor, Vec<f32>) {
    let n = train.len();
    let c = classes.len();
    let targets: Vec<usize> = train
        .iter()
        .map(|r| classes.iter().position(|cl| cl == label.of(r)).expect("class present"))
        .collect();
    let mut w = Tensor::zeros(dim, c);
    let mut b = vec![0.0f32; c];
    let mut logits = vec![0.0f32; c];
    let mut grad_w = Tensor::zeros(dim, c);
    let mut grad_b = vec![0.0f32; c];
    for _ in 0..PROBE_ITERS {
        grad_w.data_mut().fill(0.0);
        grad_b.fill(0.0);
        for (row, &target) in train.iter().zip(targets.iter()) {
            for (k, l) in logits.iter_mut().enumerate() {
                let mut s = b[k];
                for (j, &x) in row.vector.iter().enumerate() {
                    s += x * w.at(j, k);
                }
                *l = s;
            }
            let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                z += *l;
            }
            for k in 0..c {
                let p = logits[k] / z;
                let err = p - if k == target { 1.0 } else { 0.0 };
                grad_b[k] += err;
                for (j, &x) in row.vector.iter().enumerate() {
                    grad_w.data_mut()[j * c + k] += err * x;
                }
            }
        }
        let scale = PROBE_LR / n as f32;
        for (wv, gv) in w.data_mut().iter_mut().zip(grad_w.data().iter()) {
            *wv -= scale * gv;
        }
        for (bv, gv) in b.iter_mut().zip(grad_b.iter()) {
            *bv -= scale * gv;
        }
    }
    (w, b)
}

fn predict_class(w: &Tensor, b: &[f32], x: &[f32]) -> usize {
    let c = b.len();
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for k in 0..c {
        let mut s = b[k];
        for (j, &xv) in x.iter().enumerate() {
            s += xv * w.at(j, k);
        }
        if s > best_v {
            best_v = s;
            best = k;
        }
    }
    best
}

/// Mean silhouette coefficient (Euclidean) under a labeling.
pub fn silhouette(vectors: &[Vec<f32>], labels: &[String]) -> Result<f32> {
    let n = vectors.len();
    if n != labels.len() {
        return Err(Error::ShapeMismatch("vectors vs labels length".into()));
    }
    let mut clusters: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        clusters.entry(l.as_str()).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(Error::DegenerateLabels("need at least two groups".into()));
    }
    for (name, members) in &clusters {
        if members.len() < 2 {
            return Err(Error::DegenerateLabels(format!("group {name:?} has one member")));
        }
    }
    let dist = |a: &[f32], b: &[f32]| -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (*x as f64 - *y as f64) * (*x as f64 - *y as f64))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0f64;
    for i in 0..n {
        let own = &clusters[labels[i].as_str()];
        let a = own
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| dist(&vectors[i], &vectors[j]))
            .sum::<f64>()
            / (own.len() - 1) as f64;
        let mut b = f64::MAX;
        for (name, members) in &clusters {
            if *name == labels[i].as_str() {
                continue;
            }
            let mean = members.iter().map(|&j| dist(&vectors[i], &vectors[j])).sum::<f64>()
                / members.len() as f64;
            if mean < b {
                b = mean;
            }
        }
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    Ok((total / n as f64) as f32)
}

/// Silhouette under two labelings of the same rows: quantifies whether the
/// space clusters by `label_a` (e.g. object) or `label_b` (e.g. sensor).
pub fn silhouette_separation(
    table: &EmbeddingTable,
    label_a: LabelColumn,
    label_b: LabelColumn,
) -> Result<(f32, f32)> {
    let vectors: Vec<Vec<f32>> = table.rows.iter().map(|r| r.vector.clone()).collect();
    let labels_a: Vec<String> = table.rows.iter().map(|r| label_a.of(r).to_string()).collect();
    let labels_b: Vec<String> = table.rows.iter().map(|r| label_b.of(r).to_string()).collect();
    Ok((silhouette(&vectors, &labels_a)?, silhouette(&vectors, &labels_b)?))
}

/// ROC-AUC by midrank summation.
pub fn roc_auc(pos: &[f32], neg: &[f32]) -> f64 {
    let p = pos.len();
    let n = neg.len();
    assert!(p > 0 && n > 0, "need both classes for AUC");
    let mut all: Vec<(f32, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for item in &all[i..=j] {
            if item.1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    (rank_sum_pos - (p * (p + 1)) as f64 / 2.0) / (p as f64 * n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchEvalResult {
    pub auc: f64,
    pub accuracy_at_half: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Score every cross-sensor positive pair in the test split plus an equal
/// number of sampled negatives. Embeddings follow the inference routing
/// (specific for seen sensors, universal for unseen).
pub fn matching_eval(
    model: &Model,
    manifest: &Manifest,
    data: &LoadedData,
    seed: u64,
) -> Result<MatchEvalResult> {
    let test_ids: Vec<&str> = manifest
        .samples()
        .iter()
        .filter(|s| s.split == Split::Test)
        .map(|s| s.id.as_str())
        .collect();
    let mut embeddings: BTreeMap<&str, Vec<f32>> = BTreeMap::new();
    for id in &test_ids {
        let sample = manifest.get(id).expect("listed above");
        let tokens = match model.bank.specific_for(&sample.sensor) {
            Ok(t) => t,
            Err(Error::UnknownSensor(_)) => model.bank.universal,
            Err(e) => return Err(e),
        };
        let media = data.media_image(id, &model.cfg.patch)?;
        let (vector, _) = model.touch_embedding(&media, tokens)?;
        embeddings.insert(id, vector);
    }

    let mut pos_scores = Vec::new();
    for group in manifest.groups() {
        let members: Vec<&str> = group
            .members
            .iter()
            .filter(|m| m.split == Split::Test)
            .map(|m| m.id.as_str())
            .collect();
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                let s = match_score(
                    &model.match_head,
                    &model.store,
                    &embeddings[members[i]],
                    &embeddings[members[j]],
                )?;
                pos_scores.push(s);
            }
        }
    }
    if pos_scores.is_empty() {
        return Err(Error::NoEligiblePairs);
    }

    let mut rng = stream(seed, StreamTag::Eval, &[0]);
    let mut neg_scores = Vec::with_capacity(pos_scores.len());
    let mut guard = 0usize;
    while neg_scores.len() < pos_scores.len() {
        guard += 1;
        if guard > 100_000 {
            return Err(Error::NoEligiblePairs);
        }
        let a = test_ids[rng.gen_range(0..test_ids.len())];
        let b = test_ids[rng.gen_range(0..test_ids.len())];
        let sa = manifest.get(a).expect("test id");
        let sb = manifest.get(b).expect("test id");
        if sa.object_id == sb.object_id && sa.position_id == sb.position_id {
            continue;
        }
        let s = match_score(&model.match_head, &model.store, &embeddings[a], &embeddings[b])?;
        neg_scores.push(s);
    }

    let auc = roc_auc(&pos_scores, &neg_scores);
    let correct = pos_scores.iter().filter(|&&s| s > 0.5).count()
        + neg_scores.iter().filter(|&&s| s <= 0.5).count();
    Ok(MatchEvalResult {
        auc,
        accuracy_at_half: correct as f64 / (pos_scores.len() + neg_scores.len()) as f64,
        n_pos: pos_scores.len(),
        n_neg: neg_scores.len(),
    })
}

/// Nine significant digits, exponent form.
fn fmt_sig9(v: f32) -> String {
    format!("{v:.8e}")
}

/// CSV export: `id,object_id,position_id,sensor,split,material,dim_0..`.
pub fn export_embeddings_csv(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let mut out = String::from("id,object_id,position_id,sensor,split,material");
    for d in 0..table.dim {
        write!(out, ",dim_{d}").expect("string write");
    }
    out.push('\n');
    for row in &table.rows {
        write!(
            out,
            "{},{},{},{},{},{}",
            row.id, row.object_id, row.position_id, row.sensor, row.split, row.material
        )
        .expect("string write");
        for v in &row.vector {
            out.push(',');
            out.push_str(&fmt_sig9(*v));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Metric report: flat `{metric: value}` map plus `n` and `config_hash`.
pub fn write_report(
    path: &Path,
    metrics: &[(&str, f64)],
    n: usize,
    config_hash: &str,
) -> Result<()> {
    let mut map = serde_json::Map::new();
    for (k, v) in metrics {
        map.insert(k.to_string(), serde_json::json!(v));
    }
    map.insert("n".into(), serde_json::json!(n));
    map.insert("config_hash".into(), serde_json::json!(config_hash));
    std::fs::write(path, serde_json::to_string_pretty(&serde_json::Value::Object(map))?)?;
    Ok(())
}

/// Convenience: restore a model from a checkpoint for evaluation.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    ckpt.restore_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamTag};
    use rand::Rng;

    fn row(id: usize, split: Split, material: &str, vector: Vec<f32>) -> EmbRow {
        EmbRow {
            id: format!("s{id}"),
            object_id: format!("obj{id:03}-{material}"),
            position_id: "pos00".into(),
            sensor: "gelsight".into(),
            split,
            material: material.into(),
            vector,
        }
    }

    #[test]
    fn probe_separable_one_hot_is_perfect() {
        let mut rows = Vec::new();
        let mats = ["rubber", "metal", "wood", "fabric"];
        for i in 0..80 {
            let class = i % 4;
            let mut v = vec![0.0f32; 4];
            v[class] = 1.0;
            let split = if i < 60 { Split::Train } else { Split::Test };
            rows.push(row(i, split, mats[class], v));
        }
        let table = EmbeddingTable { rows, dim: 4 };
        let probe = linear_probe(&table, LabelColumn::Material, 0).unwrap();
        assert_eq!(probe.accuracy, 1.0);
        assert_eq!(probe.class_count, 4);
    }

    #[test]
    fn probe_on_random_embeddings_is_chance_level() {
        let mut rng = stream(5, StreamTag::Eval, &[1]);
        let mats = ["a", "b", "c", "d"];
        let mut rows = Vec::new();
        for i in 0..800 {
            let mut v: Vec<f32> = (0..16).map(|_| rng.gen::<f32>() - 0.5).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            let split = if i < 400 { Split::Train } else { Split::Test };
            rows.push(row(i, split, mats[i % 4], v));
        }
        let table = EmbeddingTable { rows, dim: 16 };
        let probe = linear_probe(&table, LabelColumn::Material, 0).unwrap();
        // Binomial interval around chance 0.25 with n_test = 400.
        assert_eq!(probe.n_test, 400);
        assert!(
            (0.17..=0.33).contains(&probe.accuracy),
            "accuracy {} outside chance interval",
            probe.accuracy
        );
    }

    #[test]
    fn probe_rejects_degenerate_labels() {
        let rows: Vec<EmbRow> =
            (0..10).map(|i| row(i, Split::Train, "only", vec![0.0; 4])).collect();
        let table = EmbeddingTable { rows, dim: 4 };
        assert!(matches!(
            linear_probe(&table, LabelColumn::Material, 0),
            Err(Error::DegenerateLabels(_))
        ));
    }

    #[test]
    fn probe_isolation_from_test_rows() {
        let mut rng = stream(6, StreamTag::Eval, &[2]);
        let mats = ["a", "b"];
        let make = |n: usize, split: Split, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<EmbRow> {
            (0..n)
                .map(|i| {
                    let v: Vec<f32> = (0..8).map(|_| rng.gen::<f32>()).collect();
                    let mut r = row(i, split, mats[i % 2], v);
                    r.id = format!("{split}-{i}");
                    r.object_id = format!("obj{i:03}-{}", mats[i % 2]);
                    r
                })
                .collect()
        };
        let train = make(40, Split::Train, &mut rng);
        let test = make(20, Split::Test, &mut rng);

        let train_refs: Vec<&EmbRow> = train.iter().collect();
        let classes = vec!["a".to_string(), "b".to_string()];
        let (w1, b1) = fit_softmax_regression(&train_refs, 8, &classes, LabelColumn::Material);

        let mut all = train.clone();
        all.extend(test);
        let train_refs2: Vec<&EmbRow> =
            all.iter().filter(|r| r.split == Split::Train).collect();
        let (w2, b2) = fit_softmax_regression(&train_refs2, 8, &classes, LabelColumn::Material);
        assert_eq!(w1, w2, "test rows must not influence the fit");
        assert_eq!(b1, b2);
    }

    #[test]
    fn silhouette_two_tight_blobs() {
        let mut rng = stream(7, StreamTag::Eval, &[3]);
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let center = if i % 2 == 0 { 0.0f32 } else { 10.0 };
            let v: Vec<f32> =
                (0..4).map(|_| center + (rng.gen::<f32>() - 0.5) * 0.1).collect();
            vectors.push(v);
            labels.push(if i % 2 == 0 { "blob0".to_string() } else { "blob1".to_string() });
        }
        let s = silhouette(&vectors, &labels).unwrap();
        assert!(s > 0.9, "tight separated blobs must score near 1, got {s}");
    }

    #[test]
    fn silhouette_null_distribution_is_near_zero() {
        let mut rng = stream(8, StreamTag::Eval, &[4]);
        let vectors: Vec<Vec<f32>> = (0..200)
            .map(|_| (0..8).map(|_| rng.gen::<f32>() - 0.5).collect())
            .collect();
        for shuffle in 0..100 {
            let mut lrng = stream(8, StreamTag::Eval, &[5, shuffle]);
            let labels: Vec<String> =
                (0..200).map(|_| format!("c{}", lrng.gen_range(0..4))).collect();
            // Regenerate degenerate shuffles never occur at n=200, 4 classes.
            let s = silhouette(&vectors, &labels).unwrap();
            assert!(s.abs() < 0.1, "null silhouette {s} at shuffle {shuffle}");
        }
    }

    #[test]
    fn silhouette_invariant_under_rotation() {
        let mut rng = stream(9, StreamTag::Eval, &[6]);
        let vectors: Vec<Vec<f32>> = (0..30)
            .map(|i| {
                let c = if i % 3 == 0 { -2.0 } else if i % 3 == 1 { 0.0 } else { 2.0 };
                (0..6).map(|_| c + rng.gen::<f32>()).collect()
            })
            .collect();
        let labels: Vec<String> = (0..30).map(|i| format!("c{}", i % 3)).collect();
        let base = silhouette(&vectors, &labels).unwrap();

        // Random product of Givens rotations is orthogonal.
        let dim = 6;
        let mut rot: Vec<Vec<f32>> = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        for _ in 0..20 {
            let i = rng.gen_range(0..dim);
            let mut j = rng.gen_range(0..dim);
            if i == j {
                j = (j + 1) % dim;
            }
            let theta: f32 = rng.gen::<f32>() * std::f32::consts::TAU;
            let (s, c) = theta.sin_cos();
            for row in rot.iter_mut() {
                let vi = row[i];
                let vj = row[j];
                row[i] = c * vi - s * vj;
                row[j] = s * vi + c * vj;
            }
        }
        let rotated: Vec<Vec<f32>> = vectors
            .iter()
            .map(|v| {
                (0..dim)
                    .map(|j| (0..dim).map(|i| v[i] * rot[i][j]).sum::<f32>())
                    .collect()
            })
            .collect();
        let after = silhouette(&rotated, &labels).unwrap();
        assert!((base - after).abs() < 1e-4, "rotation changed silhouette: {base} vs {after}");
    }

    #[test]
    fn silhouette_separation_swaps_with_labels() {
        let mut rng = stream(10, StreamTag::Eval, &[7]);
        let rows: Vec<EmbRow> = (0..24)
            .map(|i| {
                let c = (i % 2) as f32 * 4.0;
                let mut r = row(
                    i,
                    Split::Test,
                    if i % 2 == 0 { "a" } else { "b" },
                    (0..4).map(|_| c + rng.gen::<f32>()).collect(),
                );
                r.sensor = format!("s{}", i % 3);
                r
            })
            .collect();
        let table = EmbeddingTable { rows, dim: 4 };
        let (a, b) = silhouette_separation(&table, LabelColumn::Material, LabelColumn::Sensor)
            .unwrap();
        let (b2, a2) =
            silhouette_separation(&table, LabelColumn::Sensor, LabelColumn::Material).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn auc_extremes_and_oracle() {
        assert_eq!(roc_auc(&[0.9, 0.9, 0.9], &[0.1, 0.1, 0.1]), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[0.5, 0.5, 0.5]), 0.5);

        let mut rng = stream(11, StreamTag::Eval, &[8]);
        let pos: Vec<f32> = (0..37).map(|_| rng.gen::<f32>()).collect();
        let neg: Vec<f32> = (0..53).map(|_| rng.gen::<f32>()).collect();
        let fast = roc_auc(&pos, &neg);
        // Brute-force pairwise rank count.
        let mut acc = 0.0f64;
        for &p in &pos {
            for &n in &neg {
                acc += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let oracle = acc / (pos.len() * neg.len()) as f64;
        assert!((fast - oracle).abs() < 1e-9, "{fast} vs {oracle}");
    }

    #[test]
    fn csv_export_format() {
        let dir = tempfile::tempdir().unwrap();
        let table = EmbeddingTable {
            rows: vec![row(1, Split::Test, "rubber", vec![0.123456789, -1.0])],
            dim: 2,
        };
        let path = dir.path().join("emb.csv");
        export_embeddings_csv(&table, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "id,object_id,position_id,sensor,split,material,dim_0,dim_1"
        );
        let data_line = lines.next().unwrap();
        assert!(data_line.starts_with("s1,obj001-rubber,pos00,gelsight,test,rubber,"));
        let cells: Vec<&str> = data_line.split(',').collect();
        assert_eq!(cells.len(), 8);
        let back: f32 = cells[6].parse().unwrap();
        assert!((back - 0.123456789).abs() < 1e-8);
        // nine significant digits: 1.23456789e-1
        assert_eq!(cells[6], "1.23456791e-1");
    }
}
