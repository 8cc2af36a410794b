use criterion::{criterion_group, criterion_main, Criterion};
use fusionseg::data::{generate_synthetic, stack_batch};
use fusionseg::swin::{SwinBlock, SwinBlockConfig};
use fusionseg::{ModelConfig, ParamStore, SeededRng, SegmentationNet, Tape, Tensor, TrainConfig, Trainer};

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0) as f32)
}

fn conv(c: &mut Criterion) {
    let x = random(&[1, 32, 64, 64], 1);
    let w = random(&[32, 32, 3, 3], 2);
    c.bench_function("conv2d 32x64x64 k3", |b| {
        b.iter(|| {
            let t = Tape::<f32>::new();
            t.conv2d(&t.constant(x.clone()), &t.constant(w.clone()), None, 1, 1).unwrap()
        })
    });
    let off = random(&[1, 18, 64, 64], 3);
    c.bench_function("deform_conv2d 32x64x64 k3", |b| {
        b.iter(|| {
            let t = Tape::<f32>::new();
            let (xv, ov, wv) = (t.constant(x.clone()), t.constant(off.clone()), t.constant(w.clone()));
            t.deform_conv2d(&xv, &ov, &wv, None, 1, 1).unwrap()
        })
    });
}

fn swin_block(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let cfg = SwinBlockConfig {
        dim: 96,
        heads: 3,
        window: 8,
        shift: 4,
        mlp_ratio: 4,
    };
    let block = SwinBlock::new(&mut store, "blk", cfg, &mut SeededRng::new(4)).unwrap();
    let x = random(&[1, 32, 32, 96], 5);
    c.bench_function("shifted swin block 32x32x96", |b| {
        b.iter(|| {
            let t = Tape::inference(&store);
            block.forward_tokens(&t, &t.constant(x.clone())).unwrap()
        })
    });
}

fn tiny_model(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let (net, store) = SegmentationNet::build::<f32>(&cfg, &mut SeededRng::new(6)).unwrap();
    let x = random(&[1, 3, 64, 64], 7);
    c.bench_function("tiny forward 64x64", |b| {
        b.iter(|| {
            let t = Tape::inference(&store);
            net.forward(&t, &t.constant(x.clone())).unwrap()
        })
    });

    let data = generate_synthetic(4, 64, &mut SeededRng::new(8)).unwrap();
    let refs: Vec<_> = data.iter().collect();
    let (images, masks) = stack_batch::<f32>(&refs).unwrap();
    let mut trainer = Trainer::new(&cfg, &TrainConfig::default()).unwrap();
    c.bench_function("tiny train step batch 4", |b| b.iter(|| trainer.train_step(&images, &masks).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, swin_block, tiny_model
}
criterion_main!(benches);
