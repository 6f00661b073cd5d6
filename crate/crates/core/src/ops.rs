//! Small dense kernels shared by the forward pass and the analyses.

use crate::config::ActivationFn;

/// Layernorm parameters for one d_model-wide norm.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub eps: f32,
}

impl LayerNorm {
    /// The `1 / sqrt(var + eps)` factor this norm would apply to `x`.
    pub fn inv_scale(&self, x: &[f32]) -> f32 {
        let n = x.len() as f32;
        let mean = x.iter().sum::<f32>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        1.0 / (var + self.eps).sqrt()
    }

    pub fn apply(&self, x: &[f32], out: &mut [f32]) {
        let inv = self.inv_scale(x);
        self.apply_frozen(x, inv, out);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
    }

    /// Centering, scaling by a given factor and the learned gain, without bias.
    /// Linear in `x` for a fixed `inv_scale`.
    pub fn apply_frozen(&self, x: &[f32], inv_scale: f32, out: &mut [f32]) {
        let mean = x.iter().sum::<f32>() / x.len() as f32;
        for ((o, v), w) in out.iter_mut().zip(x).zip(&self.weight) {
            *o = (v - mean) * inv_scale * w;
        }
    }
}

pub fn gelu(x: f32, kind: ActivationFn) -> f32 {
    match kind {
        ActivationFn::GeluTanh => {
            const C: f32 = 0.797_884_56; // sqrt(2/pi)
            0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
        }
        ActivationFn::GeluExact => 0.5 * x * (1.0 + libm::erff(x / std::f32::consts::SQRT_2)),
    }
}

pub fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// `out = x · W` for row-major `W` of shape `[x.len(), out.len()]`, accumulating into `out`.
pub fn vec_mat_acc(x: &[f32], w: &[f32], out: &mut [f32]) {
    let cols = out.len();
    debug_assert_eq!(w.len(), x.len() * cols);
    for (xi, row) in x.iter().zip(w.chunks_exact(cols)) {
        if *xi == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

pub fn add_assign(a: &mut [f32], b: &[f32]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// ALiBi head slopes: a geometric sequence per head, with the interleaved
/// extension when the head count is not a power of two.
pub fn alibi_slopes(n_heads: usize) -> Vec<f32> {
    let closest = 1usize << (usize::BITS - 1 - n_heads.leading_zeros());
    let base = 2f64.powf(-8.0 / closest as f64);
    let mut slopes: Vec<f64> = (1..=closest).map(|i| base.powi(i as i32)).collect();
    if closest != n_heads {
        let extra_base = 2f64.powf(-4.0 / closest as f64);
        let n_extra = n_heads - closest;
        slopes.extend((0..n_extra).map(|i| extra_base.powi((2 * i + 1) as i32)));
    }
    slopes.into_iter().map(|s| s as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alibi_slopes_power_of_two() {
        let s = alibi_slopes(8);
        let expect: Vec<f32> = (1..=8).map(|i| 0.5f32.powi(i)).collect();
        for (a, b) in s.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn alibi_slopes_non_power_of_two() {
        // 12 heads: 8 from base 2^-1, then 4 odd powers of 2^-0.5
        let s = alibi_slopes(12);
        assert_eq!(s.len(), 12);
        assert!((s[7] - 0.5f32.powi(8)).abs() < 1e-9);
        let extra: Vec<f32> = [1, 3, 5, 7].iter().map(|e| 2f32.powf(-0.5 * *e as f32)).collect();
        for (a, b) in s[8..].iter().zip(&extra) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_variants_agree_roughly() {
        for x in [-3.0f32, -0.5, 0.0, 0.7, 2.5] {
            let a = gelu(x, ActivationFn::GeluTanh);
            let b = gelu(x, ActivationFn::GeluExact);
            assert!((a - b).abs() < 2e-3, "{x}: {a} vs {b}");
        }
        assert!((gelu(1.0, ActivationFn::GeluExact) - 0.841_344_7).abs() < 1e-6);
    }

    #[test]
    fn layernorm_frozen_plus_bias_is_full() {
        let ln = LayerNorm {
            weight: vec![1.0, 2.0, 0.5, -1.0],
            bias: vec![0.1, 0.2, 0.3, 0.4],
            eps: 1e-5,
        };
        let x = [0.3, -1.2, 2.0, 0.7];
        let mut full = [0.0; 4];
        ln.apply(&x, &mut full);
        let mut frozen = [0.0; 4];
        ln.apply_frozen(&x, ln.inv_scale(&x), &mut frozen);
        for i in 0..4 {
            assert!((full[i] - frozen[i] - ln.bias[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = [1.0f32, 2.0, -5.0, f32::NEG_INFINITY];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(v[3], 0.0);
    }
}
