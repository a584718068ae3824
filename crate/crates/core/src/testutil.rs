use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub type TestRng = SeededRng;

pub fn rand_tensor(rng: &mut TestRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}
