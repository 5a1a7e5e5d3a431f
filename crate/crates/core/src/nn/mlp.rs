use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Gelu,
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight matrix stored `fan_in x fan_out`.
pub fn init_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("finite init")
}

/// Feed-forward network: affine layers with a shared hidden activation and
/// a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<(ParamId, ParamId)>,
    hidden: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        hidden: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = store.add(format!("{prefix}.{i}.weight"), init_weight(rng, w[0], w[1]));
                let bias = store.add(format!("{prefix}.{i}.bias"), Tensor::zeros(vec![w[1]]));
                (weight, bias)
            })
            .collect();
        Self {
            sizes: sizes.to_vec(),
            layers,
            hidden,
        }
    }

    /// Rebinds to parameters already present in `store` under `prefix`.
    pub fn bind(store: &ParamStore, prefix: &str, sizes: &[usize], hidden: Activation) -> Option<Self> {
        let layers = (0..sizes.len() - 1)
            .map(|i| {
                Some((
                    store.find(&format!("{prefix}.{i}.weight"))?,
                    store.find(&format!("{prefix}.{i}.bias"))?,
                ))
            })
            .collect::<Option<Vec<_>>>()?;
        for (i, &(w, _)) in layers.iter().enumerate() {
            if store.get(w).shape() != [sizes[i], sizes[i + 1]] {
                return None;
            }
        }
        Some(Self {
            sizes: sizes.to_vec(),
            layers,
            hidden,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Forward over an `m x input_dim` batch.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let z = tape.matmul(h, wv)?;
            h = tape.add_row(z, bv)?;
            if i + 1 < self.layers.len() {
                h = match self.hidden {
                    Activation::Relu => tape.relu(h)?,
                    Activation::Tanh => tape.tanh(h)?,
                    Activation::Gelu => tape.gelu(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Convenience: forward a batch of rows and return the output values.
    pub fn predict(&self, store: &ParamStore, rows: usize, input: Vec<f64>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.input(rows, self.input_dim(), input)?;
        let y = self.forward(&mut tape, store, x)?;
        Ok(tape.value(y).to_vec())
    }

    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        let &(w, b) = self.layers.last().unwrap();
        store.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    /// Copies all parameter values from `other`, which must have the same sizes.
    pub fn copy_from(&self, other: &Mlp, store: &mut ParamStore) {
        assert_eq!(self.sizes, other.sizes);
        for (&(dw, db), &(sw, sb)) in self.layers.iter().zip(&other.layers) {
            store.copy_values(sw, dw);
            store.copy_values(sb, db);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[16, 8, 2], Activation::Relu, &mut rng);
        let ids = mlp.params();
        assert!(store.get(ids[0]).data().iter().all(|v| v.abs() <= 0.25));
        assert!(store.get(ids[1]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bind_finds_existing_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[4, 3, 2], Activation::Tanh, &mut rng);
        let again = Mlp::bind(&store, "m", &[4, 3, 2], Activation::Tanh).unwrap();
        assert_eq!(mlp, again);
        assert!(Mlp::bind(&store, "m", &[4, 5, 2], Activation::Tanh).is_none());
    }
}
