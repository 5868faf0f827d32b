//! Measures the standard deviation of the raw octave sum used by the terrain
//! generator.
use terrameta::terrain::raw_fbm;

fn main() {
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0.0;
    for seed in 0..40u64 {
        for i in 0..256 {
            for j in 0..256 {
                let v = raw_fbm(seed * 7919, j as f64 / 8.0, i as f64 / 8.0);
                sum += v;
                sq += v * v;
                n += 1.0;
            }
        }
    }
    let mean = sum / n;
    println!("mean {mean:.5} std {:.5}", (sq / n - mean * mean).sqrt());
}
