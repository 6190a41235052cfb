use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use distflow::dag::{preset_dag, Algorithm};
use distflow::data::{decode_records, encode_records, Rollout, SampleRecord};
use distflow::planner::serialize_graph;
use distflow::runner::run_experiment;
use distflow::transport::wire::write_message;
use distflow::Mode;
use distflow_bench::transfer_workload;

fn records(n: u64, bytes: usize) -> Vec<SampleRecord> {
    (0..n)
        .map(|i| {
            let mut r = SampleRecord::new(i);
            r.group.push(Rollout { payload: vec![i as u8; bytes], token_count: bytes as u32 / 4, channels: Default::default() });
            r
        })
        .collect()
}

fn wire(c: &mut Criterion) {
    let mut g = c.benchmark_group("wire_frame");
    for size in [256usize, 4096, 65536] {
        let payload = vec![7u8; size];
        g.throughput(Throughput::Bytes(size as u64));
        g.bench_with_input(BenchmarkId::from_parameter(size), &payload, |b, p| {
            let mut buf = Vec::with_capacity(size + 64);
            b.iter(|| {
                buf.clear();
                write_message(&mut buf, 1, 2, 0x0100_0003, 9, black_box(p), 1 << 20).unwrap();
            })
        });
    }
    g.finish();
}

fn codec(c: &mut Criterion) {
    let batch = records(64, 4096);
    let bytes = encode_records(&batch);
    let mut g = c.benchmark_group("record_codec");
    g.throughput(Throughput::Bytes(bytes.len() as u64));
    g.bench_function("encode_64x4k", |b| b.iter(|| encode_records(black_box(&batch))));
    g.bench_function("decode_64x4k", |b| b.iter(|| decode_records(black_box(&bytes)).unwrap()));
    g.finish();
}

fn planner(c: &mut Criterion) {
    let graph = preset_dag(Algorithm::Ppo);
    c.bench_function("serialize_ppo", |b| b.iter(|| serialize_graph(black_box(&graph)).unwrap()));
}

fn iteration(c: &mut Criterion) {
    let mut g = c.benchmark_group("iteration_2x4");
    g.sample_size(10);
    for mode in [Mode::Distributed, Mode::Central] {
        let config = transfer_workload(2, 4, mode, 1024);
        g.bench_function(mode.to_string(), |b| b.iter(|| run_experiment(&config).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, wire, codec, planner, iteration);
criterion_main!(benches);
