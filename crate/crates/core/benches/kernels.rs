//! Parallel vs sequential paths of the convolution kernel and a full
//! supernet forward/backward pass.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use trinity_nas::opspace::{appendix_backbone, appendix_head, appendix_neck};
use trinity_nas::parallel::set_parallel;
use trinity_nas::search::Relaxed;
use trinity_nas::supernet::{Supernet, SupernetConfig};
use trinity_nas::tensor::{ParamBinding, Tape, Var};
use trinity_nas::toytask::{generate, DatasetSpec, Split};

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d 16x32x32 k3");
    let x: Vec<f32> = (0..8 * 16 * 32 * 32).map(|i| ((i % 13) as f32 - 6.0) * 0.1).collect();
    let w: Vec<f32> = (0..32 * 16 * 9).map(|i| ((i % 7) as f32 - 3.0) * 0.05).collect();
    for parallel in [false, true] {
        set_parallel(parallel);
        g.bench_with_input(BenchmarkId::from_parameter(if parallel { "parallel" } else { "sequential" }), &parallel, |b, _| {
            b.iter(|| {
                let mut tape = Tape::<f32>::new();
                let xv = tape.constant(vec![8, 16, 32, 32], x.clone()).unwrap();
                let wv = tape.constant(vec![32, 16, 3, 3], w.clone()).unwrap();
                let y = tape.conv2d(xv, wv, 1, 1, 1, 1).unwrap();
                let s = tape.sum(y);
                tape.backward(s).unwrap()
            })
        });
    }
    g.finish();
}

fn supernet_step(c: &mut Criterion) {
    let cfg = SupernetConfig::desk();
    let sn = Supernet::<f32>::build(&cfg, [appendix_backbone().0, appendix_neck(), appendix_head()], 0).unwrap();
    let data = generate(&DatasetSpec {
        train_pool: 16,
        test: 4,
        ..DatasetSpec::desk(0)
    })
    .unwrap();
    let batch = data.batch::<f32>(Split::Weight, &(0..8).collect::<Vec<_>>());
    let mut g = c.benchmark_group("supernet forward+backward, batch 8");
    g.sample_size(10);
    for parallel in [false, true] {
        set_parallel(parallel);
        g.bench_with_input(BenchmarkId::from_parameter(if parallel { "parallel" } else { "sequential" }), &parallel, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = sn.arch.matrices.iter().map(|m| tape.leaf_from(&m.logits, false)).collect();
                let mut bind = ParamBinding::new(&sn.store, true);
                let loss = sn.task_loss(&mut tape, &mut bind, &vars, &batch).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, conv, supernet_step);
criterion_main!(benches);
