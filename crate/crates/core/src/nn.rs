//! Dense layers and stacks of them.

use rand::Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::Result;
use crate::params::{he_uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, rng: &mut R, name: &str, n_in: usize, n_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), he_uniform(rng, vec![n_out, n_in], n_in))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![n_out]))?;
        Ok(Self { weight, bias, n_in, n_out })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, b)
    }
}

/// Fully connected stack: `hidden` after every layer but the last, `output` (if any) after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
    hidden: Activation,
    output: Option<Activation>,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        output: Option<Activation>,
    ) -> Result<Self> {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers, hidden, output })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            let act = if i == last { self.output } else { Some(self.hidden) };
            if let Some(a) = act {
                h = tape.activation(h, a);
            }
        }
        Ok(h)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().n_out
    }

    pub fn output_layer(&self) -> &Dense {
        self.layers.last().unwrap()
    }

    /// Zeroes the weights and bias of the final layer.
    pub fn zero_output_layer<T: Real>(&self, store: &mut ParamStore<T>) {
        let l = self.output_layer();
        for id in [l.weight, l.bias] {
            store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.n_out * l.n_in + l.n_out).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_names() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, &mut rng, "m", &[5, 7, 2], Activation::Relu, Some(Activation::Sigmoid)).unwrap();
        assert_eq!(store.len(), 4);
        assert!(store.id("m.1.bias").is_some());
        assert_eq!(mlp.num_params(), store.num_scalars());

        let mut tape = Tape::new(&store);
        let x = tape.constant(vec![3, 5], vec![0.1; 15]).unwrap();
        let y = mlp.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 2]);
        assert!(tape.value(y).values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zeroed_output_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut store, &mut rng, "m", &[4, 8, 3], Activation::Relu, Some(Activation::Sigmoid)).unwrap();
        mlp.zero_output_layer(&mut store);
        let mut tape = Tape::new(&store);
        let x = tape.constant(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let y = mlp.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, 0.5, 0.5]);
    }
}
