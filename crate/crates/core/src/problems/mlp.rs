//! One-hidden-layer softplus classifier on synthetic Gaussian-mixture data.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Client loss: mean softmax cross-entropy of a softplus MLP over the
/// client's local samples. Parameters are flattened as
/// `[W1 (hidden x input, row-major) | b1 | W2 (classes x hidden, row-major) | b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpObjective {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    /// One row per sample.
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
}

/// Parameter count of a softplus MLP with the given shape.
pub fn parameter_count(input_dim: usize, hidden: usize, classes: usize) -> usize {
    hidden * input_dim + hidden + classes * hidden + classes
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl MlpObjective {
    pub fn dimension(&self) -> usize {
        parameter_count(self.input_dim, self.hidden, self.classes)
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    fn layout(&self) -> Layout {
        let w1 = 0;
        let b1 = w1 + self.hidden * self.input_dim;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.classes * self.hidden;
        Layout { w1, b1, w2, b2 }
    }

    /// Loss of one sample; when `grad` is given, accumulates `scale * d loss / d theta` into it.
    fn sample_pass(&self, theta: &[f64], s: usize, grad: Option<(&mut [f64], f64)>) -> f64 {
        let (p, h, k) = (self.input_dim, self.hidden, self.classes);
        let lay = self.layout();
        let x: Vec<f64> = (0..p).map(|j| self.features[(s, j)]).collect();

        let mut z1 = vec![0.0; h];
        for (r, z) in z1.iter_mut().enumerate() {
            let row = &theta[lay.w1 + r * p..lay.w1 + (r + 1) * p];
            *z = theta[lay.b1 + r] + row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
        }
        let a: Vec<f64> = z1.iter().map(|&z| softplus(z)).collect();

        let mut z2 = vec![0.0; k];
        for (c, z) in z2.iter_mut().enumerate() {
            let row = &theta[lay.w2 + c * h..lay.w2 + (c + 1) * h];
            *z = theta[lay.b2 + c] + row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>();
        }
        let zmax = z2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z2.iter().map(|z| (z - zmax).exp()).sum::<f64>().ln();
        let y = self.labels[s];
        let loss = lse - z2[y];

        if let Some((g, scale)) = grad {
            let mut dz2: Vec<f64> = z2.iter().map(|z| (z - lse).exp()).collect();
            dz2[y] -= 1.0;
            let mut da = vec![0.0; h];
            for c in 0..k {
                let d = dz2[c] * scale;
                g[lay.b2 + c] += d;
                for r in 0..h {
                    g[lay.w2 + c * h + r] += d * a[r];
                    da[r] += dz2[c] * theta[lay.w2 + c * h + r];
                }
            }
            for r in 0..h {
                let d = da[r] * sigmoid(z1[r]) * scale;
                g[lay.b1 + r] += d;
                for j in 0..p {
                    g[lay.w1 + r * p + j] += d * x[j];
                }
            }
        }
        loss
    }

    pub fn loss(&self, theta: &DVector<f64>) -> f64 {
        let n = self.num_samples();
        (0..n).map(|s| self.sample_pass(theta.as_slice(), s, None)).sum::<f64>() / n as f64
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let n = self.num_samples();
        let mut g = vec![0.0; self.dimension()];
        let w = 1.0 / n as f64;
        for s in 0..n {
            self.sample_pass(theta.as_slice(), s, Some((&mut g, w)));
        }
        DVector::from_vec(g)
    }

    /// Gradient of a single sample's loss; the full gradient is their mean.
    pub fn sample_gradient(&self, theta: &DVector<f64>, s: usize) -> DVector<f64> {
        let mut g = vec![0.0; self.dimension()];
        self.sample_pass(theta.as_slice(), s, Some((&mut g, 1.0)));
        DVector::from_vec(g)
    }

    /// Mean gradient over a multiset of sample indices.
    pub fn batch_gradient(&self, theta: &DVector<f64>, batch: &[usize]) -> DVector<f64> {
        let mut g = vec![0.0; self.dimension()];
        let w = 1.0 / batch.len() as f64;
        for &s in batch {
            self.sample_pass(theta.as_slice(), s, Some((&mut g, w)));
        }
        DVector::from_vec(g)
    }

    /// Small random initialization (scaled Gaussian weights, zero biases).
    pub fn initial_point<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let lay = self.layout();
        let mut theta = vec![0.0; self.dimension()];
        let s1 = (1.0 / self.input_dim as f64).sqrt();
        let s2 = (1.0 / self.hidden as f64).sqrt();
        for v in &mut theta[lay.w1..lay.b1] {
            let z: f64 = StandardNormal.sample(rng);
            *v = s1 * z;
        }
        for v in &mut theta[lay.w2..lay.b2] {
            let z: f64 = StandardNormal.sample(rng);
            *v = s2 * z;
        }
        DVector::from_vec(theta)
    }
}

/// Splits `total` samples over classes with proportions `weights` using
/// largest remainders, so the counts are deterministic and sum to `total`.
pub fn allocate_counts(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[k] += 1;
        remaining -= 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> MlpObjective {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let features = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let labels = (0..n).map(|s| s % 3).collect();
        MlpObjective {
            input_dim: 3,
            hidden: 4,
            classes: 3,
            features,
            labels,
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..10 {
            let x = m.initial_point(&mut rng) * 2.0;
            let g = m.gradient(&x);
            let mut fd = DVector::zeros(x.len());
            for j in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                fd[j] = (m.loss(&xp) - m.loss(&xm)) / (2.0 * h);
            }
            let rel = (&g - &fd).norm() / g.norm().max(1e-12);
            assert!(rel <= 1e-5, "relative error {rel}");
        }
    }

    #[test]
    fn full_gradient_is_mean_of_sample_gradients() {
        let m = toy();
        let x = m.initial_point(&mut ChaCha8Rng::seed_from_u64(1));
        let mean = (0..m.num_samples())
            .map(|s| m.sample_gradient(&x, s))
            .fold(DVector::zeros(m.dimension()), |a, b| a + b)
            / m.num_samples() as f64;
        assert!((mean - m.gradient(&x)).norm() < 1e-12);
    }

    #[test]
    fn counts_sum_to_total() {
        assert_eq!(allocate_counts(10, &[1.0, 1.0, 1.0]).iter().sum::<usize>(), 10);
        assert_eq!(allocate_counts(7, &[0.0, 1.0]), vec![0, 7]);
        assert_eq!(allocate_counts(4, &[0.25; 4]), vec![1, 1, 1, 1]);
    }
}
