//! Strided convolutional image encoder.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::LiftError;
use crate::ndtensor::{Conv2dSpec, ParamStore, Tensor};

const STAGE: Conv2dSpec = Conv2dSpec {
    kernel: 3,
    stride: 2,
    padding: 1,
};

/// `stages` 3x3 stride-2 convolutions, ReLU between them; total stride
/// `2^stages`.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    stages: Vec<(Tensor, Tensor)>,
}

impl ImageEncoder {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        in_channels: usize,
        hidden: usize,
        out_dim: usize,
        stages: usize,
        rng: &mut R,
    ) -> Result<(), LiftError> {
        let mut cin = in_channels;
        for s in 0..stages {
            let cout = if s + 1 == stages { out_dim } else { hidden };
            let fan_in = 9 * cin;
            let bound = (6.0 / (fan_in + cout) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("bound");
            let w = (0..fan_in * cout).map(|_| dist.sample(rng)).collect();
            store.insert(&format!("encoder.s{s}.weight"), w, &[fan_in, cout])?;
            store.insert(&format!("encoder.s{s}.bias"), vec![0.0; cout], &[cout])?;
            cin = cout;
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore) -> Result<Self, LiftError> {
        let n = (0..).take_while(|s| store.contains(&format!("encoder.s{s}.weight"))).count();
        if n == 0 {
            return Err(LiftError::Config("checkpoint has no encoder weights".into()));
        }
        let stages = (0..n)
            .map(|s| {
                Ok((
                    store.get(&format!("encoder.s{s}.weight"))?.clone(),
                    store.get(&format!("encoder.s{s}.bias"))?.clone(),
                ))
            })
            .collect::<Result<_, LiftError>>()?;
        Ok(Self { stages })
    }

    pub fn stride(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn out_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.1.numel())
    }

    /// `[H, W, C]` image to `[H / stride, W / stride, D_f]` features.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor, LiftError> {
        let stride = self.stride();
        let &[h, w, _] = image.shape() else {
            return Err(LiftError::Config(format!("expected an [H, W, C] image, got {:?}", image.shape())));
        };
        if h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(LiftError::IndivisibleResolution { height: h, width: w, stride });
        }
        let mut x = image.clone();
        for (s, (wt, b)) in self.stages.iter().enumerate() {
            x = x.conv2d(wt, b, STAGE)?;
            if s + 1 < self.stages.len() {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(stages: usize) -> ImageEncoder {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ImageEncoder::init(&mut store, 3, 4, 6, stages, &mut rng).unwrap();
        ImageEncoder::from_store(&store).unwrap()
    }

    #[test]
    fn stride_sixteen_shapes() {
        let e = encoder(4);
        assert_eq!(e.stride(), 16);
        let img = Tensor::full(&[320, 512, 3], 0.5);
        assert_eq!(e.encode(&img).unwrap().shape(), &[20, 32, 6]);
        let img = Tensor::full(&[64, 96, 3], 0.5);
        assert_eq!(e.encode(&img).unwrap().shape(), &[4, 6, 6]);
    }

    #[test]
    fn zero_image_gives_a_constant_map() {
        let f = encoder(3).encode(&Tensor::zeros(&[16, 24, 3])).unwrap();
        let first = f.data()[..6].to_vec();
        assert!(f.data().chunks(6).all(|c| c == first.as_slice()));
    }

    #[test]
    fn indivisible_resolution_names_the_stride() {
        let err = encoder(4).encode(&Tensor::zeros(&[100, 64, 3])).unwrap_err();
        assert!(matches!(err, LiftError::IndivisibleResolution { stride: 16, .. }));
        assert!(err.to_string().contains("16"));
    }
}
