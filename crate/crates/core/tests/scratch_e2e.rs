use anytouch::config::{ModelConfig, TrainConfig, TrainStage};
use anytouch::data::{LoadedData, Split};
use anytouch::encoder::{Model, TokenPolicy};
use anytouch::eval::{
    extract_embeddings, extract_embeddings_routed, linear_probe, matching_eval,
    silhouette_separation, EmbeddingTable, LabelColumn,
};
use anytouch::synth::{generate_world, WorldSpec};
use anytouch::trainer::{train_stage1, train_stage2};
use std::time::Instant;

const TRAIN_SENSORS: [&str; 3] = ["gelsight", "digit", "gelslim"];
const HOLDOUT: &str = "duragel";

// short feedback loop: smaller world / epochs via env-style consts
const POSITIONS: usize = 8;
const S1_EPOCHS: usize = 2;
const S2_EPOCHS: usize = 2;

#[test]
fn e2e_dry_run() {
    let t_all = Instant::now();
    let mut spec = WorldSpec::desk_default(1234);
    spec.n_positions_per_object = POSITIONS;
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let manifest = generate_world(&spec, dir.path()).unwrap();
    println!("[gen] {} samples {:?}", manifest.samples().len(), t0.elapsed());
    let data = LoadedData::load(&manifest, dir.path()).unwrap();

    let train_manifest = manifest
        .restrict_sensors(&TRAIN_SENSORS.iter().map(|s| s.to_string()).collect::<Vec<_>>())
        .unwrap();
    let train_data = LoadedData::load(&train_manifest, dir.path()).unwrap();

    let model_cfg = ModelConfig::desk_default(
        TRAIN_SENSORS.iter().map(|s| s.to_string()).collect(),
    );
    let mut model = Model::new(model_cfg.clone(), 7).unwrap();

    let mut s1 = TrainConfig::stage1_default(7);
    s1.epochs = S1_EPOCHS;
    let t0 = Instant::now();
    let rep1 = train_stage1(&mut model, &s1, &train_manifest, &train_data).unwrap();
    println!("[stage1] {} steps {:?} epoch_means {:?}", rep1.rows.len(), t0.elapsed(), rep1.epoch_means);

    let stage1_model = {
        let run = anytouch::config::RunConfig { model: model_cfg.clone(), train: s1.clone() };
        let ck = anytouch::checkpoint::Checkpoint::capture(&model, &run, Some(TrainStage::Stage1), 0, None);
        ck.restore_model().unwrap()
    };

    let mut s2 = TrainConfig::stage2_default(7);
    s2.epochs = S2_EPOCHS;
    let t0 = Instant::now();
    let rep2 = train_stage2(&mut model, &s2, &train_manifest, &train_data, Some(TrainStage::Stage1), false).unwrap();
    println!("[stage2] {} steps {:?} epoch_means {:?}", rep2.rows.len(), t0.elapsed(), rep2.epoch_means);
    let first_rows: Vec<f32> = rep2.rows.iter().take(3).map(|r| r.loss_total).collect();
    let last_rows: Vec<f32> = rep2.rows.iter().rev().take(3).map(|r| r.loss_total).collect();
    println!("[stage2] first batches {:?} last batches {:?}", first_rows, last_rows);

    let holdout_manifest = manifest.restrict_sensors(&[HOLDOUT.to_string()]).unwrap();
    let holdout_data = LoadedData::load(&holdout_manifest, dir.path()).unwrap();
    let probe = |m: &Model| -> f32 {
        let table = extract_embeddings(m, &holdout_manifest, &holdout_data, TokenPolicy::Universal).unwrap();
        linear_probe(&table, LabelColumn::Material, 0).unwrap().accuracy
    };
    println!("[5a] probe stage2 {:.4}", probe(&model));
    println!("[5d] probe stage1 {:.4}", probe(&stage1_model));

    let match_res = matching_eval(&model, &manifest, &data, 99).unwrap();
    println!("[5b] auc {:.4} acc@.5 {:.4} ({} pos)", match_res.auc, match_res.accuracy_at_half, match_res.n_pos);

    let filter_test = |t: EmbeddingTable| {
        let rows: Vec<_> = t.rows.into_iter().filter(|r| r.split == Split::Test).collect();
        EmbeddingTable { dim: t.dim, rows }
    };
    let emb_s2 = filter_test(extract_embeddings_routed(&model, &manifest, &data).unwrap());
    let (so2, ss2) = silhouette_separation(&emb_s2, LabelColumn::Object, LabelColumn::Sensor).unwrap();
    println!("[5c] stage2 s_object {so2:.4} s_sensor {ss2:.4} margin {:.4}", so2 - ss2);

    let emb_s1 = filter_test(extract_embeddings_routed(&stage1_model, &manifest, &data).unwrap());
    let (so1, ss1) = silhouette_separation(&emb_s1, LabelColumn::Object, LabelColumn::Sensor).unwrap();
    println!("[5c] stage1 s_object {so1:.4} s_sensor {ss1:.4} margin {:.4}", so1 - ss1);

    println!("[total] {:?}", t_all.elapsed());
}
