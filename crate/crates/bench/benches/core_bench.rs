//! Hot-path benchmarks: touch rendering, tubelet flattening, encoder
//! forward, masked forward+backward, and the alignment loss.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::Rng;

use anytouch::config::ModelConfig;
use anytouch::encoder::Model;
use anytouch::graph::Graph;
use anytouch::img::ImageBuf;
use anytouch::input::{flatten_tubelets, image_to_media};
use anytouch::rng::{stream, StreamTag};
use anytouch::stage1::{loss_rec_graph, sample_mask, stage1_forward};
use anytouch::synth::{gen_texture, render_touch, WorldSpec};
use anytouch::tensor::Tensor;

fn random_image(seed: u64) -> ImageBuf {
    let mut rng = stream(seed, StreamTag::Init, &[0]);
    let mut img = ImageBuf::new(32, 32);
    for v in img.data_mut() {
        *v = rng.gen::<f32>();
    }
    img
}

fn bench_render(c: &mut Criterion) {
    let spec = WorldSpec::desk_default(1);
    let texture = gen_texture(&spec, 0).unwrap();
    let profile = spec.sensors[0].clone();
    let depths = [0.35f32, 0.57, 0.78, 1.0];
    c.bench_function("render_touch_4_frames_32px", |b| {
        b.iter(|| {
            let mut rng = stream(1, StreamTag::Noise, &[0, 0, 0]);
            let frames =
                render_touch(&texture, (16, 16), &depths, &profile, (32, 32), &mut rng).unwrap();
            black_box(frames);
        })
    });
}

fn bench_flatten(c: &mut Criterion) {
    let cfg = anytouch::input::PatchConfig::desk_default();
    let media = image_to_media(&random_image(2), &cfg).unwrap();
    c.bench_function("flatten_tubelets_192_tokens", |b| {
        b.iter(|| black_box(flatten_tubelets(&media, &cfg).unwrap()))
    });
}

fn bench_encoder_forward(c: &mut Criterion) {
    let model =
        Model::new(ModelConfig::desk_default(vec!["gelsight".into()]), 3).unwrap();
    let media = image_to_media(&random_image(4), &model.cfg.patch).unwrap();
    let flat = flatten_tubelets(&media, &model.cfg.patch).unwrap();
    let tokens = model.bank.specific_for("gelsight").unwrap();
    c.bench_function("touch_encoder_forward_197_tokens", |b| {
        b.iter(|| {
            let mut g = Graph::new(&model.store);
            let fwd = model.encode_touch_graph(&mut g, &flat, None, tokens);
            black_box(g.value(fwd.embedding).clone());
        })
    });
}

fn bench_masked_step(c: &mut Criterion) {
    let model =
        Model::new(ModelConfig::desk_default(vec!["gelsight".into()]), 5).unwrap();
    let patch = model.cfg.patch;
    let media = image_to_media(&random_image(6), &patch).unwrap();
    let flat = flatten_tubelets(&media, &patch).unwrap();
    let tokens = model.bank.specific_for("gelsight").unwrap();
    let mask = sample_mask(patch.n_tokens(), 0.75, &mut stream(7, StreamTag::Mask, &[0]));
    c.bench_function("masked_forward_backward_one_sample", |b| {
        b.iter(|| {
            let mut g = Graph::new(&model.store);
            let fwd = stage1_forward(&model, &mut g, &flat, &mask, tokens, false);
            let loss =
                loss_rec_graph(&mut g, fwd.pred_tokens, &flat, &mask, false, patch.f).unwrap();
            black_box(g.backward(loss));
        })
    });
}

fn bench_align_loss(c: &mut Criterion) {
    let mut rng = stream(8, StreamTag::Init, &[0]);
    let rows = 16usize;
    let dim = 64usize;
    let mut unit = |seed_off: u64| {
        let _ = seed_off;
        let mut t = Tensor::randn(rows, dim, 1.0, &mut rng);
        for r in 0..rows {
            let n = t.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            for v in t.row_mut(r) {
                *v /= n;
            }
        }
        t
    };
    let touch = unit(0);
    let vision = unit(1);
    let text = unit(2);
    let batch = anytouch::align::AlignedBatch {
        touch,
        vision: (0..rows).map(|i| (i % 3 != 0).then(|| vision.row(i).to_vec())).collect(),
        text: (0..rows).map(|i| (i % 4 != 0).then(|| text.row(i).to_vec())).collect(),
    };
    let w = anytouch::align::AlignWeights::default();
    c.bench_function("align_loss_batch_16", |b| {
        b.iter(|| black_box(anytouch::align::align_loss(&batch, &w).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_render,
    bench_flatten,
    bench_encoder_forward,
    bench_masked_step,
    bench_align_loss
);
criterion_main!(benches);
