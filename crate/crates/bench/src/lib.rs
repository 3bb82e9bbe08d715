//! Shared inputs for the benchmarks.

use dfenet::gradcheck::random_tensor;
use dfenet::model::ModelInput;
use dfenet::Tensor;

/// Random `[n, h, w, c]` activations.
pub fn activations(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor<f32> {
    random_tensor(&[n, h, w, c], 1.0, seed).cast()
}

/// A batch of `n` slices of `size`x`size` with a `depth`-slice context window.
pub fn slice_batch(n: usize, size: usize, depth: usize, seed: u64) -> ModelInput<f32> {
    let context: Tensor<f32> = random_tensor(&[n, size, size, depth, 1], 1.0, seed).cast();
    let image = Tensor::from_fn(&[n, size, size, 1], |i| context.data()[i * depth + depth / 2]);
    ModelInput { image, context }
}

/// Binary `[n, h, w, 1]` target with roughly `fraction` foreground.
pub fn binary_target(n: usize, h: usize, w: usize, fraction: f64, seed: u64) -> Tensor<f32> {
    random_tensor(&[n, h, w, 1], 1.0, seed).map(|v| (v > 1.0 - 2.0 * fraction) as u8 as f64).cast()
}
