use fiberseg_core::autodiff::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[test]
#[ignore]
fn conv_throughput() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // 32ch -> 32ch on 16^3, batch 3: the criterion-6 workhorse shape.
    let mut conv = Conv::<f32>::new(32, 32, KernelExtent::k3(3), &mut rng);
    let shape = TensorShape::new(3, 32, 16, 16, 16);
    let data: Vec<f32> = (0..shape.len()).map(|i| (i % 7) as f32 * 0.1).collect();
    let x = Tensor::from_vec(shape, data).unwrap();
    let flops_fwd = 2.0 * 3.0 * 32.0 * 32.0 * 27.0 * 4096.0;

    let y = conv.forward(&x, Mode::Train).unwrap();
    let t0 = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let _ = conv.forward(&x, Mode::Train).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("forward: {:.4}s = {:.1} GFLOP/s", dt, flops_fwd / dt / 1e9);

    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = conv.backward(&y).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("backward: {:.4}s = {:.1} GFLOP/s", dt, 2.0 * flops_fwd / dt / 1e9);
}
