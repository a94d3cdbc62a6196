use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imgproc::ImageTensor;

pub fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(3, h, w, (0..3 * h * w).map(|_| rng.random()).collect()).unwrap()
}

/// Left half flat gray, right half salt-and-pepper.
pub fn flat_noise_fixture(size: usize) -> ImageTensor {
    let mut state = 0x2545_f491_4f6c_dd1d_u64;
    let mut data = vec![0.5; 3 * size * size];
    for y in 0..size {
        for x in size / 2..size {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let v = if state & 1 == 0 { 0.0 } else { 1.0 };
            for c in 0..3 {
                data[(c * size + y) * size + x] = v;
            }
        }
    }
    ImageTensor::new(3, size, size, data).unwrap()
}
