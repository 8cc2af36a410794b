//! Quick structural checks runnable from the binary.

use fusionseg::gradcheck::check_gradient;
use fusionseg::metrics::compute_metrics;
use fusionseg::{ModelConfig, SeededRng, SegmentationNet, Tape, Tensor};

type Check = fn() -> Result<(), String>;

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0))
}

fn window_roundtrip() -> Result<(), String> {
    let x = random(&[2, 8, 8, 3], &mut SeededRng::new(1));
    let tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let w = tape.window_partition(&xv, 4, 2).map_err(|e| e.to_string())?;
    let back = tape.window_reverse(&w, 8, 8, 4, 2).map_err(|e| e.to_string())?;
    if back.value() == &x {
        Ok(())
    } else {
        Err("partition/reverse is not the identity".into())
    }
}

fn deform_zero_offsets() -> Result<(), String> {
    let mut rng = SeededRng::new(2);
    let tape = Tape::<f64>::new();
    let x = tape.constant(random(&[1, 4, 12, 12], &mut rng));
    let w = tape.constant(random(&[5, 4, 3, 3], &mut rng));
    let off = tape.constant(Tensor::zeros([1, 18, 12, 12]));
    let a = tape.deform_conv2d(&x, &off, &w, None, 1, 1).map_err(|e| e.to_string())?;
    let b = tape.conv2d(&x, &w, None, 1, 1).map_err(|e| e.to_string())?;
    let d = a.value().max_abs_diff(b.value()).map_err(|e| e.to_string())?;
    if d < 1e-5 {
        Ok(())
    } else {
        Err(format!("max abs diff {d:e}"))
    }
}

fn conv_gradient() -> Result<(), String> {
    let mut rng = SeededRng::new(3);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let err = check_gradient(&x, 1e-6, |t, xv| {
        let y = t.conv2d(xv, &t.constant(w.clone()), None, 1, 1)?;
        Ok(t.sum_all(&t.mul(&y, &y)?))
    })
    .map_err(|e| e.to_string())?;
    if err < 1e-6 {
        Ok(())
    } else {
        Err(format!("relative error {err:e}"))
    }
}

fn metrics_oracle() -> Result<(), String> {
    let mut rng = SeededRng::new(4);
    for _ in 0..200 {
        let p = Tensor::<f64>::from_fn([16, 16], |_| rng.uniform(0.0, 1.0));
        let t = Tensor::<f64>::from_fn([16, 16], |_| if rng.bernoulli(0.3) { 1.0 } else { 0.0 });
        let r = compute_metrics(&p, &t, 0.5).map_err(|e| e.to_string())?;
        let tp = p.data().iter().zip(t.data()).filter(|(a, b)| **a >= 0.5 && **b == 1.0).count() as u64;
        if r.tp != tp || r.total() != 256 || r.dsc < r.iou {
            return Err("pixel counts disagree".into());
        }
    }
    Ok(())
}

fn tiny_shapes() -> Result<(), String> {
    let cfg = ModelConfig::tiny();
    let (net, store) = SegmentationNet::build::<f32>(&cfg, &mut SeededRng::new(5)).map_err(|e| e.to_string())?;
    let tape = Tape::inference(&store);
    let x = tape.constant(Tensor::zeros([1, 3, 64, 64]));
    let feats = net.encode(&tape, &x).map_err(|e| e.to_string())?;
    let want = [[1, 24, 16, 16], [1, 48, 8, 8], [1, 96, 4, 4], [1, 192, 2, 2]];
    for (f, w) in feats.iter().zip(want) {
        if f.shape() != w {
            return Err(format!("encoder feature {:?}, expected {w:?}", f.shape()));
        }
    }
    let y = net.decode(&tape, &feats).map_err(|e| e.to_string())?;
    if y.shape() != [1, 1, 64, 64] {
        return Err(format!("logits {:?}", y.shape()));
    }
    let sa = net.shared_sa.as_ref().ok_or("no shared spatial attention")?;
    if net.catm.iter().any(|c| &c.shared != sa) {
        return Err("a stage holds its own spatial attention".into());
    }
    Ok(())
}

pub const CHECKS: [(&str, Check); 5] = [
    ("window partition roundtrip", window_roundtrip),
    ("deformable conv with zero offsets equals conv", deform_zero_offsets),
    ("conv finite-difference gradient", conv_gradient),
    ("metrics pixel-count oracle", metrics_oracle),
    ("tiny model shapes and shared attention", tiny_shapes),
];

/// Runs every check, printing one line each; returns the number of failures.
pub fn run() -> usize {
    let mut failed = 0;
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => println!("PASS  {name}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg}");
            }
        }
    }
    failed
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        assert_eq!(super::run(), 0);
    }
}
