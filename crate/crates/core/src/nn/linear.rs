use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::nn::Init;
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dense layer over the last axis. Weight is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        path: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let weight = store.insert(
            format!("{path}.weight"),
            Init::TruncNormal(0.02).tensor(&[in_features, out_features], rng),
        )?;
        let bias = if bias {
            Some(store.insert(format!("{path}.bias"), Tensor::zeros([out_features]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|id| tape.param(id));
        tape.linear(x, &w, b.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registers_paths_and_maps_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SeededRng::new(0);
        let lin = Linear::new(&mut store, "fc", 6, 4, true, &mut rng).unwrap();
        assert_eq!(store.path(lin.weight), "fc.weight");
        assert_eq!(store.value(lin.weight).shape(), &[6, 4]);
        assert!(store.value(lin.weight).data().iter().all(|v| v.abs() <= 0.04));
        let tape = Tape::inference(&store);
        let y = lin.forward(&tape, &tape.constant(Tensor::ones([2, 5, 6]))).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4]);
    }
}
