//! Small MLP mapping triplane features to colour and density.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::ndtensor::{ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub hidden: Vec<usize>,
    /// Initial bias of the density pre-activation.
    pub density_bias: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            density_bias: 0.0,
        }
    }
}

/// `D_f -> hidden.. -> 4` with ReLU between layers. Output channels 0..3 go
/// through a sigmoid (rgb), channel 3 through softplus (sigma).
#[derive(Debug, Clone)]
pub struct DecoderMlp {
    layers: Vec<(Tensor, Tensor)>,
}

fn layer_name(i: usize, n: usize) -> String {
    if i + 1 == n {
        "decoder.out".to_string()
    } else {
        format!("decoder.l{i}")
    }
}

impl DecoderMlp {
    /// Adds freshly initialised decoder weights to `store`.
    pub fn init<R: Rng>(store: &mut ParamStore, in_dim: usize, cfg: &DecoderConfig, rng: &mut R) -> Result<()> {
        let mut dims = vec![in_dim];
        dims.extend(&cfg.hidden);
        dims.push(4);
        let n = dims.len() - 1;
        for i in 0..n {
            let (a, b) = (dims[i], dims[i + 1]);
            let bound = (6.0 / (a + b) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("bound");
            let w = (0..a * b).map(|_| dist.sample(rng)).collect();
            let mut bias = vec![0.0; b];
            if i + 1 == n {
                bias[3] = cfg.density_bias;
            }
            let name = layer_name(i, n);
            store.insert(&format!("{name}.weight"), w, &[a, b])?;
            store.insert(&format!("{name}.bias"), bias, &[b])?;
        }
        Ok(())
    }

    /// Picks up `decoder.*` tensors from `store`.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let hidden = (0..).take_while(|i| store.contains(&format!("decoder.l{i}.weight"))).count();
        let n = hidden + 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let name = layer_name(i, n);
            layers.push((
                store.get(&format!("{name}.weight"))?.clone(),
                store.get(&format!("{name}.bias"))?.clone(),
            ));
        }
        let out = layers.last().map(|l| l.0.shape()[1]).unwrap_or(0);
        if out != 4 {
            return Err(TensorError::Invalid {
                op: "decoder",
                msg: format!("output layer has {out} channels, expected 4"),
            });
        }
        Ok(Self { layers })
    }

    pub fn detach(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|(w, b)| (w.detach(), b.detach())).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].0.shape()[0]
    }

    /// Raw `[B, 4]` pre-activations.
    pub fn forward_raw(&self, features: &Tensor) -> Result<Tensor> {
        let mut h = features.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add_bias(b)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// `(rgb [B, 3], sigma [B, 1])`.
    pub fn forward(&self, features: &Tensor) -> Result<(Tensor, Tensor)> {
        let raw = self.forward_raw(features)?;
        let rgb = raw.narrow(1, 0, 3)?.sigmoid();
        let sigma = raw.narrow(1, 3, 1)?.softplus();
        Ok((rgb, sigma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decoder(seed: u64, in_dim: usize) -> (ParamStore, DecoderMlp) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        DecoderMlp::init(&mut store, in_dim, &DecoderConfig::default(), &mut rng).unwrap();
        let d = DecoderMlp::from_store(&store).unwrap();
        (store, d)
    }

    #[test]
    fn outputs_stay_in_range() {
        let (_, d) = decoder(5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..10_000 * 6).map(|_| rng.random_range(-50.0..50.0)).collect();
        let (rgb, sigma) = d.forward(&Tensor::new(x, &[10_000, 6]).unwrap()).unwrap();
        assert!(rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(sigma.data().iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn store_names_and_density_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { hidden: vec![8], density_bias: -2.0 };
        DecoderMlp::init(&mut store, 3, &cfg, &mut rng).unwrap();
        assert_eq!(
            store.names(),
            ["decoder.l0.bias", "decoder.l0.weight", "decoder.out.bias", "decoder.out.weight"]
        );
        assert_eq!(store.get("decoder.out.bias").unwrap().data()[3], -2.0);
        assert_eq!(DecoderMlp::from_store(&store).unwrap().in_dim(), 3);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, _) = decoder(7, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::param((0..5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect(), &[5, 4]).unwrap();
        let names = store.names();
        let mut thetas = vec![x];
        thetas.extend(names.iter().map(|n| store.get(n).unwrap().clone()));
        let report = grad_check_many(
            |t| {
                let mut layers = Vec::new();
                let n_layers = names.len() / 2;
                for i in 0..n_layers {
                    let base = layer_name(i, n_layers);
                    let wi = names.iter().position(|n| *n == format!("{base}.weight")).unwrap();
                    let bi = names.iter().position(|n| *n == format!("{base}.bias")).unwrap();
                    layers.push((t[1 + wi].clone(), t[1 + bi].clone()));
                }
                let d = DecoderMlp { layers };
                let (rgb, sigma) = d.forward(&t[0])?;
                Ok(rgb.square().sum().add(&sigma.sum())?)
            },
            &thetas,
            1e-6,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }
}
