//! Times one BiLSTM forward and backward pass over a 1001-frame segment
//! at a few hidden sizes: `cargo run --release --example bench_lstm`.

use ndarray::Array2;
use rand::SeedableRng;
use velocorr::nn::BiLstm;
fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    for h in [32usize, 64, 128] {
        let l = BiLstm::<f32>::init(176, h, &mut rng);
        let x = Array2::from_shape_fn((1001, 176), |(t, k)| if (t * 7 + k) % 40 == 0 { 0.5 } else { 0.0 });
        let n = 5;
        let t0 = std::time::Instant::now();
        let mut caches = vec![];
        for _ in 0..n {
            caches.push(l.forward(&x).unwrap());
        }
        let tf = t0.elapsed().as_secs_f64() * 1000.0 / n as f64;
        let t0 = std::time::Instant::now();
        for (y, c) in &caches {
            let g = y.mapv(|v| v * 0.1);
            let _ = l.backward_params(c, &g).unwrap();
        }
        let tb = t0.elapsed().as_secs_f64() * 1000.0 / n as f64;
        println!("h={h}: fwd {tf:.1} ms bwd {tb:.1} ms");
    }
}
