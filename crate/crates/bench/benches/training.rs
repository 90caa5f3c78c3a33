use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use reid_bench::desk_training_set;
use reid_core::model::EmbeddingModel;
use reid_core::training::{LossMode, TrainPlan, Trainer};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// One optimizer step (forward, backward, Adam, center update) per mode.
fn train_step(c: &mut Criterion) {
    let (cfg, ds) = desk_training_set(50);
    let mut g = c.benchmark_group("desk_train_step_batch32");
    g.sample_size(30);
    for mode in [LossMode::I, LossMode::IC, LossMode::IV] {
        g.bench_function(mode.name(), |b| {
            b.iter_batched_ref(
                || {
                    let mut model = EmbeddingModel::<f32>::build(&cfg, 0).expect("valid config");
                    let plan = TrainPlan { mode, ..TrainPlan::desk(1_000_000) };
                    let trainer = Trainer::new(&mut model, &ds, plan).expect("valid plan");
                    (model, trainer)
                },
                |(model, trainer)| trainer.step(model, &ds).expect("finite loss"),
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn embed(c: &mut Criterion) {
    let (cfg, ds) = desk_training_set(50);
    let model = EmbeddingModel::<f32>::build(&cfg, 0).expect("valid config");
    let idx: Vec<usize> = (0..100).collect();
    let images = ds.batch(&idx).expect("indices in range");
    c.bench_function("desk_embed_100", |b| b.iter(|| model.embed(&images).expect("shapes agree")));
}

criterion_group!(benches, train_step, embed);
criterion_main!(benches);
