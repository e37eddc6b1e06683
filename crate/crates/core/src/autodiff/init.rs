use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Glorot (Xavier) uniform initialization on `+-sqrt(6 / (fan_in + fan_out))`.
///
/// For conv weights `out x in x k x k` the fans are `in*k*k` and `out*k*k`;
/// for 2-D `out x in` they are `in` and `out`; 1-D shapes use the length for
/// both.
pub fn glorot_uniform_init(shape: &[usize], seed: u64) -> Tensor {
    let bound = glorot_bound(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite positive bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub(crate) fn glorot_bound(shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp] => (*inp, *out),
        [out, inp, rest @ ..] => {
            let receptive: usize = rest.iter().product();
            (inp * receptive, out * receptive)
        }
    };
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
