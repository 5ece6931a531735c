use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Affine map `x W + b` with `W: d_in x d_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.add_weight(format!("{name}.w"), d_in, d_out, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, d_out));
        Self { w, b, d_in, d_out }
    }

    /// Linear layer with every weight and bias set to zero.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(d_in, d_out));
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, d_out));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let [_, cols] = tape.shape(x);
        if cols != self.d_in {
            return Err(Error::Shape(format!(
                "linear expects {} input features, got {cols}",
                self.d_in
            )));
        }
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// Layer sizes of an MLP: `layers` linear maps, `d_in -> d_h -> ... -> d_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpArch {
    pub layers: usize,
    pub d_in: usize,
    pub d_h: usize,
    pub d_out: usize,
}

/// Stack of `ℓ >= 2` linear layers. A ReLU follows each of the first `ℓ - 2`
/// layers; the last two layers are joined without an activation, so the
/// `ℓ = 2` network is purely affine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub arch: MlpArch,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, arch: MlpArch, rng: &mut R) -> Result<Self> {
        if arch.layers < 2 {
            return Err(Error::Config(format!("MLP `{name}` needs at least 2 layers")));
        }
        let mut layers = Vec::with_capacity(arch.layers);
        for i in 0..arch.layers {
            let d_in = if i == 0 { arch.d_in } else { arch.d_h };
            let d_out = if i + 1 == arch.layers { arch.d_out } else { arch.d_h };
            layers.push(Linear::new(store, &format!("{name}.{i}"), d_in, d_out, rng));
        }
        Ok(Self { arch, layers })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        self.forward_from(tape, x, 0)
    }

    /// Runs layers `first..` on `h`, which must already be the input of layer `first`.
    pub fn forward_from(&self, tape: &mut Tape<'_>, mut h: Var, first: usize) -> Result<Var> {
        let n = self.layers.len();
        for i in first..n {
            h = self.layers[i].forward(tape, h)?;
            if i + 2 < n {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Builds and applies an MLP with parameters taken from `store`.
pub fn mlp_forward(tape: &mut Tape<'_>, mlp: &Mlp, x: Var) -> Result<Var> {
    mlp.forward(tape, x)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_params_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "m",
            MlpArch {
                layers: 4,
                d_in: 3,
                d_h: 5,
                d_out: 2,
            },
            &mut rng,
        )
        .unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        let mut tape = Tape::inference(&store);
        let x = tape.constant(Tensor::from_fn(7, 3, |r, c| (r + c) as f64 - 2.0));
        let y = mlp.forward(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_identity_passes_negative_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "m",
            MlpArch {
                layers: 2,
                d_in: 2,
                d_h: 2,
                d_out: 2,
            },
            &mut rng,
        )
        .unwrap();
        for l in &mlp.layers {
            *store.value_mut(l.w) = Tensor::identity(2);
            store.value_mut(l.b).fill(0.0);
        }
        let mut tape = Tape::inference(&store);
        let x = tape.constant(Tensor::row(&[1.0, -1.0]));
        let y = mlp.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);
    }

    #[test]
    fn wrong_input_width_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(
            &mut store,
            "m",
            MlpArch {
                layers: 2,
                d_in: 2,
                d_h: 4,
                d_out: 1,
            },
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::inference(&store);
        let x = tape.constant(Tensor::zeros(3, 5));
        assert!(matches!(mlp.forward(&mut tape, x), Err(Error::Shape(_))));
    }

    #[test]
    fn fewer_than_two_layers_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let r = Mlp::new(
            &mut store,
            "m",
            MlpArch {
                layers: 1,
                d_in: 2,
                d_h: 4,
                d_out: 1,
            },
            &mut rng,
        );
        assert!(r.is_err());
    }
}
