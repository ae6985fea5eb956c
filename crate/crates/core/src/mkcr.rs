//! Multi-kernel conditional refiner.

use crate::cgen::{KernelStack, NoiseMap};
use crate::error::{Error, Result};
use crate::imaging::{depthwise_replicate_acc, ImagePatch};
use crate::real::Real;
use crate::tensor::Tensor;

/// `clamp(noisy − noise, 0, 1)`.
pub fn denoise_subtract(noisy: &ImagePatch, noise: &NoiseMap<f32>) -> Result<ImagePatch> {
    if noisy.tensor().shape() != noise.tensor().shape() {
        return Err(Error::dim(format!(
            "noisy {:?} vs noise map {:?}",
            noisy.tensor().shape(),
            noise.tensor().shape()
        )));
    }
    let d = noisy.tensor().zip_map(noise.tensor(), |a, b| (a - b).clamp(0.0, 1.0))?;
    ImagePatch::new(d)
}

/// `Σ_i w_i · conv_same(d, k_i)` without the final clamp.
///
/// Evaluated as `d + Σ_i w_i · conv_same(d, k_i − δ)`, which is the same sum
/// for weights on the simplex and returns `d` bit-exactly for delta kernels.
pub fn refine_unclamped<T: Real>(d: &Tensor<T>, ks: &KernelStack<T>) -> Result<Tensor<T>> {
    let (c, h, w) = d.dims3()?;
    if c != 3 {
        return Err(Error::dim(format!("refine expects 3 channels, got {c}")));
    }
    let s = ks.kernel_size();
    let step = 3 * s * s;
    let centre = (s / 2) * s + s / 2;
    let mut out = d.data().to_vec();
    let mut residual = vec![T::zero(); step];
    for (i, &wi) in ks.weights().data().iter().enumerate() {
        residual.copy_from_slice(&ks.kernels().data()[i * step..(i + 1) * step]);
        for ch in 0..3 {
            residual[ch * s * s + centre] -= T::one();
        }
        depthwise_replicate_acc(d.data(), &residual, c, h, w, s, wi, &mut out);
    }
    Tensor::new(d.shape(), out)
}

/// Convex combination of the per-kernel replicate-padded convolutions, clamped to `[0, 1]`.
pub fn refine(d: &ImagePatch, ks: &KernelStack<f32>) -> Result<ImagePatch> {
    let r = refine_unclamped(d.tensor(), ks)?;
    ImagePatch::new(r.map(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgen::delta_kernels;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn stack(n: usize, s: usize, rng: &mut ChaCha8Rng) -> KernelStack<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let tot: f64 = raw.iter().sum();
        let w = Tensor::new(&[n], raw.iter().map(|v| v / tot).collect()).unwrap();
        KernelStack::new(random(&[n, 3, s, s], rng, -0.5, 0.5), w).unwrap()
    }

    #[test]
    fn subtract_edge_cases() {
        let n = ImagePatch::filled(4, 4, 0.3);
        let zero = NoiseMap(Tensor::zeros(&[3, 4, 4]));
        assert_eq!(denoise_subtract(&n, &zero).unwrap(), n);
        let same = NoiseMap(n.tensor().clone());
        assert!(denoise_subtract(&n, &same).unwrap().data().iter().all(|&v| v == 0.0));
        let big = NoiseMap(Tensor::full(&[3, 4, 4], -2.0));
        assert!(denoise_subtract(&n, &big).unwrap().data().iter().all(|&v| v == 1.0));
        let wrong = NoiseMap(Tensor::zeros(&[3, 4, 8]));
        assert!(matches!(denoise_subtract(&n, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn identity_kernels_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = ImagePatch::new(random(&[3, 5, 7], &mut rng, 0.0, 1.0).cast()).unwrap();
        let one = KernelStack::new(delta_kernels(1, 3), Tensor::full(&[1], 1.0f32)).unwrap();
        assert_eq!(refine(&d, &one).unwrap(), d);
        let w = Tensor::new(&[4], vec![0.5f32, 0.25, 0.125, 0.125]).unwrap();
        let four = KernelStack::new(delta_kernels(4, 5), w).unwrap();
        assert_eq!(refine(&d, &four).unwrap(), d);
    }

    #[test]
    fn even_kernels_rejected() {
        let r = KernelStack::new(delta_kernels::<f32>(2, 2), Tensor::full(&[2], 0.5));
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn linear_before_clamp(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ks = stack(4, 3, &mut rng);
            let d1 = random(&[3, 6, 5], &mut rng, 0.0, 1.0);
            let d2 = random(&[3, 6, 5], &mut rng, 0.0, 1.0);
            let mix = d1.zip_map(&d2, |x, y| a * x + b * y).unwrap();
            let lhs = refine_unclamped(&mix, &ks).unwrap();
            let r1 = refine_unclamped(&d1, &ks).unwrap();
            let r2 = refine_unclamped(&d2, &ks).unwrap();
            let rhs = r1.zip_map(&r2, |x, y| a * x + b * y).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-7);
        }

        #[test]
        fn permutation_invariant(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ks = stack(5, 3, &mut rng);
            let d = random(&[3, 4, 6], &mut rng, 0.0, 1.0);
            let perm = [3usize, 0, 4, 2, 1];
            let step = 27;
            let mut kd = Vec::new();
            for &i in &perm {
                kd.extend_from_slice(&ks.kernels().data()[i * step..(i + 1) * step]);
            }
            let wd = perm.iter().map(|&i| ks.weights().data()[i]).collect();
            let shuffled = KernelStack::new(
                Tensor::new(&[5, 3, 3, 3], kd).unwrap(),
                Tensor::new(&[5], wd).unwrap(),
            ).unwrap();
            let a = refine_unclamped(&d, &ks).unwrap();
            let b = refine_unclamped(&d, &shuffled).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }

        #[test]
        fn nonnegative_subunit_kernels_do_not_raise_max(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 3;
            let mut k = random(&[n, 3, 3, 3], &mut rng, 0.0, 1.0);
            for slice in k.data_mut().chunks_mut(9) {
                let tot: f64 = slice.iter().sum();
                let scale = rng.random_range(0.2..1.0) / tot;
                slice.iter_mut().for_each(|v| *v *= scale);
            }
            let ks = KernelStack::new(k, Tensor::full(&[n], 1.0 / 3.0)).unwrap();
            let d = random(&[3, 5, 5], &mut rng, 0.0, 1.0);
            let dmax = d.data().iter().cloned().fold(f64::MIN, f64::max);
            let out = refine_unclamped(&d, &ks).unwrap();
            prop_assert!(out.data().iter().all(|&v| v <= dmax + 1e-12));
        }
    }
}
