use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use gpucr::config::Config;
use gpucr::cr::{Action, CkptMode, ContextPool, RestoreMode};
use gpucr::harness::trigger_seq;
use gpucr::image::{read_image, write_image};
use gpucr::process::{Process, Trigger};
use gpucr::speculation::infer_access;
use gpucr_bench::{chain_dag, desk, device_at, image_of};

fn dag(c: &mut Criterion) {
    c.bench_function("dag/build_1k", |b| b.iter(|| chain_dag(black_box(1000), 64)));
    let g = chain_dag(1000, 64);
    c.bench_function("dag/topo_order_1k", |b| b.iter(|| g.pending_topo_order()));
    let bytes = g.serialize();
    c.bench_function("dag/deserialize_1k", |b| b.iter(|| gpucr::dag::KernelDag::deserialize(black_box(&bytes)).unwrap()));
}

fn image(c: &mut Criterion) {
    let img = image_of(&desk("gpt2-infer"), CkptMode::Cow);
    let bytes = write_image(&img).unwrap();
    c.bench_function("image/write_gpt2_infer", |b| b.iter(|| write_image(black_box(&img)).unwrap()));
    c.bench_function("image/read_gpt2_infer", |b| b.iter(|| read_image(black_box(&bytes)).unwrap()));
}

fn speculation(c: &mut Criterion) {
    let w = desk("resnet-train");
    let at = trigger_seq(&w.trace, 0.5);
    let dev = device_at(&w.trace, at);
    let launches: Vec<_> = w.trace[at as usize..].iter().filter(|c| c.kind.is_launch()).take(256).collect();
    c.bench_function("speculation/infer_256_launches", |b| {
        b.iter(|| launches.iter().map(|call| infer_access(call, &dev).reads.len()).sum::<usize>())
    });
}

fn run(c: &mut Criterion) {
    let mut g = c.benchmark_group("run");
    g.sample_size(10);
    let w = desk("resnet-train");
    let at = trigger_seq(&w.trace, 0.5);
    for mode in [CkptMode::StopTheWorld, CkptMode::Cow, CkptMode::DirtyBit] {
        g.bench_function(format!("resnet_train_ckpt_{mode:?}"), |b| {
            b.iter(|| {
                let mut p = Process::new(Config::default(), w.shared_trace());
                p.add_trigger(Trigger::At(at), Action::checkpoint(mode));
                p.run().unwrap()
            })
        });
    }
    let img = image_of(&w, CkptMode::DirtyBit);
    for mode in [RestoreMode::OnDemand, RestoreMode::Full] {
        g.bench_function(format!("resnet_train_restore_{mode:?}"), |b| {
            b.iter_batched(
                || ContextPool::new(1, 0),
                |mut pool| {
                    let mut p = Process::restore(Config::default(), &img, w.shared_trace(), mode, &mut pool).unwrap();
                    p.run().unwrap()
                },
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, dag, image, speculation, run);
criterion_main!(benches);
