//! Named trainable parameters with paired gradient buffers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::error::NumericsError;
use crate::tensor::Tensor;

/// Ordered (lexicographic by name) map of trainable tensors. Every entry
/// carries a same-shape gradient buffer, zeroed between steps. Names must
/// live under the `enc.` or `dec.` namespace.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

#[derive(Clone, Debug)]
struct ParamEntry {
    value: Tensor,
    grad: Tensor,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), NumericsError> {
        if !(name.starts_with("enc.") || name.starts_with("dec.")) {
            return Err(NumericsError::BadNamespace(name.to_string()));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries
            .insert(name.to_string(), ParamEntry { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), &e.value))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Add `delta` into the gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<(), NumericsError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        if entry.grad.shape() != delta.shape() {
            return Err(NumericsError::ShapeMismatch(format!(
                "gradient for `{}`: {:?} vs {:?}",
                name,
                entry.grad.shape(),
                delta.shape()
            )));
        }
        for (g, d) in entry.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    /// Multiply every gradient buffer by `c`.
    pub fn scale_grads(&mut self, c: f32) {
        for entry in self.entries.values_mut() {
            for g in entry.grad.data_mut() {
                *g *= c;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            for g in entry.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// One plain SGD update: value -= lr * grad for every entry, then
    /// gradients are zeroed. Fails if any updated value is non-finite.
    pub fn sgd_step(&mut self, lr: f32) -> Result<(), NumericsError> {
        for (name, entry) in self.entries.iter_mut() {
            for (v, g) in entry.value.data_mut().iter_mut().zip(entry.grad.data()) {
                *v -= lr * g;
                if !v.is_finite() {
                    return Err(NumericsError::NumericalError(format!("sgd_step `{name}`")));
                }
            }
            for g in entry.grad.data_mut() {
                *g = 0.0;
            }
        }
        Ok(())
    }

    /// Copy entries under `prefix` from another set; shapes must match.
    pub fn copy_namespace_from(
        &mut self,
        other: &ParamSet,
        prefix: &str,
    ) -> Result<(), NumericsError> {
        for (name, entry) in self.entries.iter_mut() {
            if !name.starts_with(prefix) {
                continue;
            }
            let src = other
                .get(name)
                .ok_or_else(|| NumericsError::UnknownParam(name.clone()))?;
            if src.shape() != entry.value.shape() {
                return Err(NumericsError::ShapeMismatch(format!(
                    "`{}`: {:?} vs {:?}",
                    name,
                    src.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = src.clone();
        }
        Ok(())
    }
}

/// Seed an RNG from a global seed and a name, so initialization does not
/// depend on parameter construction order.
pub fn named_rng(global_seed: u64, name: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(seed)
}

/// Scaled-uniform init in +-sqrt(1/fan_in).
pub fn uniform_init(shape: &[usize], fan_in: usize, global_seed: u64, name: &str) -> Tensor {
    let bound = (1.0 / fan_in as f32).sqrt();
    let mut rng = named_rng(global_seed, name);
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * bound)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

/// Max relative error between analytic gradients and central finite
/// differences on a seeded coordinate subset (up to 64 per tensor).
///
/// `f` must be deterministic: it evaluates the scalar objective for the
/// current values and fills the gradient buffers as a side effect.
pub fn finite_diff_check<F>(
    f: &mut F,
    params: &mut ParamSet,
    eps: f32,
    seed: u64,
) -> Result<f32, NumericsError>
where
    F: FnMut(&mut ParamSet) -> Result<f32, NumericsError>,
{
    params.zero_grads();
    let _ = f(params)?;
    let analytic: BTreeMap<String, Tensor> = params
        .entries
        .iter()
        .map(|(n, e)| (n.clone(), e.grad.clone()))
        .collect();
    params.zero_grads();

    let names: Vec<String> = params.names().map(String::from).collect();
    let mut worst = 0.0f32;
    for name in names {
        let numel = params.get(&name).unwrap().numel();
        let mut coords: Vec<usize> = (0..numel).collect();
        if numel > 64 {
            let mut rng = named_rng(seed, &name);
            for i in 0..64 {
                let j = rng.gen_range(i..numel);
                coords.swap(i, j);
            }
            coords.truncate(64);
        }
        for &c in &coords {
            let orig = params.get(&name).unwrap().data()[c];
            params.get_mut(&name).unwrap().data_mut()[c] = orig + eps;
            let up = f(params)? as f64;
            params.zero_grads();
            params.get_mut(&name).unwrap().data_mut()[c] = orig - eps;
            let down = f(params)? as f64;
            params.zero_grads();
            params.get_mut(&name).unwrap().data_mut()[c] = orig;

            let numeric = ((up - down) / (2.0 * eps as f64)) as f32;
            let a = analytic[&name].data()[c];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_set() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("enc.a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        p.insert("dec.b", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn namespace_enforced() {
        let mut p = ParamSet::new();
        assert!(p.insert("misc.x", Tensor::scalar(1.0)).is_err());
        assert!(p.insert("enc.x", Tensor::scalar(1.0)).is_ok());
    }

    #[test]
    fn sgd_basic_update() {
        let mut p = ParamSet::new();
        p.insert("enc.w", Tensor::scalar(1.0)).unwrap();
        p.accumulate_grad("enc.w", &Tensor::scalar(0.5)).unwrap();
        p.sgd_step(0.01).unwrap();
        assert!((p.get("enc.w").unwrap().item() - 0.995).abs() < 1e-7);
        // gradients were zeroed, so another step is a no-op
        p.sgd_step(0.01).unwrap();
        assert!((p.get("enc.w").unwrap().item() - 0.995).abs() < 1e-7);
    }

    #[test]
    fn sgd_zero_grad_keeps_value() {
        let mut p = simple_set();
        let before: Vec<f32> = p.get("enc.a").unwrap().data().to_vec();
        p.sgd_step(0.1).unwrap();
        assert_eq!(p.get("enc.a").unwrap().data(), &before[..]);
    }

    #[test]
    fn two_steps_equal_one_summed_step_for_fixed_grads() {
        // theta-independent gradient g applied twice at lr equals one step at 2g
        let g = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let mut p1 = simple_set();
        p1.accumulate_grad("enc.a", &g).unwrap();
        p1.sgd_step(0.05).unwrap();
        p1.accumulate_grad("enc.a", &g).unwrap();
        p1.sgd_step(0.05).unwrap();

        let mut p2 = simple_set();
        p2.accumulate_grad("enc.a", &g).unwrap();
        p2.accumulate_grad("enc.a", &g).unwrap();
        p2.sgd_step(0.05).unwrap();

        let d = p1
            .get("enc.a")
            .unwrap()
            .max_abs_diff(p2.get("enc.a").unwrap());
        assert!(d < 1e-6);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut p = ParamSet::new();
        p.insert("enc.w", Tensor::scalar(1.0)).unwrap();
        p.accumulate_grad("enc.w", &Tensor::scalar(f32::MAX)).unwrap();
        // lr * f32::MAX overflows to inf
        assert!(p.sgd_step(1e30).is_err());
    }

    #[test]
    fn named_init_is_order_independent() {
        let a = uniform_init(&[3, 3], 9, 42, "enc.w1");
        let b = uniform_init(&[3, 3], 9, 42, "enc.w1");
        assert!(a.bit_eq(&b));
        let c = uniform_init(&[3, 3], 9, 42, "enc.w2");
        assert!(!a.bit_eq(&c));
        let bound = (1.0f32 / 9.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    // Dyadic step: theta +- eps stays exactly representable in f32, so
    // the difference quotients below are near-exact.
    const DYADIC_EPS: f32 = 0.0009765625;

    #[test]
    fn finite_diff_on_sum() {
        // f = sum(theta): analytic gradient is all ones
        let mut p = simple_set();
        let mut f = |p: &mut ParamSet| {
            let mut total = 0.0;
            let names: Vec<String> = p.names().map(String::from).collect();
            for n in &names {
                total += p.get(n).unwrap().data().iter().sum::<f32>();
                let ones = Tensor::full(p.get(n).unwrap().shape(), 1.0);
                p.accumulate_grad(n, &ones).unwrap();
            }
            Ok(total)
        };
        let err = finite_diff_check(&mut f, &mut p, DYADIC_EPS, 7).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn finite_diff_on_square() {
        // f = sum(theta^2) at theta=1: gradient = 2
        let mut p = ParamSet::new();
        p.insert("enc.t", Tensor::full(&[4], 1.0)).unwrap();
        let mut f = |p: &mut ParamSet| {
            let v = p.get("enc.t").unwrap().clone();
            let loss = v.data().iter().map(|x| x * x).sum::<f32>();
            let grad =
                Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| 2.0 * x).collect())
                    .unwrap();
            p.accumulate_grad("enc.t", &grad).unwrap();
            Ok(loss)
        };
        let err = finite_diff_check(&mut f, &mut p, DYADIC_EPS, 7).unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
