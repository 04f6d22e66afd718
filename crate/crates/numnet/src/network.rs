use rand::Rng;

use crate::error::{NetError, Result};
use crate::layers::{relu, relu_backward, sigmoid, softmax, softmax_backward, Dense, Pointwise};
use crate::params::ParamStore;

/// Declarative description of one layer in a [`Network`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    /// 1×1 convolution over a map with `sites` spatial positions.
    Pointwise {
        in_channels: usize,
        out_channels: usize,
        sites: usize,
    },
    Relu,
    Sigmoid,
    Softmax,
    /// Channel-major maps are already flat; kept so layer tables read naturally.
    Flatten,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Dense(Dense),
    Pointwise { conv: Pointwise, sites: usize },
    Relu,
    Sigmoid,
    Softmax,
    Flatten,
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Pointwise { .. } => "pointwise",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Softmax => "softmax",
            Layer::Flatten => "flatten",
        }
    }

    fn forward(&self, params: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Layer::Dense(d) => d.forward(params, x),
            Layer::Pointwise { conv, sites } => conv.forward(params, x, *sites),
            Layer::Relu => Ok(relu(x)),
            Layer::Sigmoid => Ok(sigmoid(x)),
            Layer::Softmax => Ok(softmax(x)),
            Layer::Flatten => Ok(x.to_vec()),
        }
    }

    fn backward(
        &self,
        params: &mut ParamStore,
        x: &[f64],
        y: &[f64],
        g: &[f64],
    ) -> Result<Vec<f64>> {
        match self {
            Layer::Dense(d) => d.backward(params, x, g),
            Layer::Pointwise { conv, sites } => conv.backward(params, x, *sites, g),
            Layer::Relu => Ok(relu_backward(x, g)),
            Layer::Sigmoid => Ok(y.iter().zip(g).map(|(&s, &g)| g * s * (1.0 - s)).collect()),
            Layer::Softmax => Ok(softmax_backward(y, g)),
            Layer::Flatten => Ok(g.to_vec()),
        }
    }
}

/// Activations recorded by [`Network::forward`] for a later backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }

    pub fn clear(&mut self) {
        self.activations.clear();
    }

    /// Activation after layer `i` (index 0 is the input).
    pub fn activation(&self, i: usize) -> Option<&[f64]> {
        self.activations.get(i).map(Vec::as_slice)
    }
}

/// A sequential stack of layers sharing one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_len: usize,
    output_len: usize,
}

impl Network {
    /// Allocates parameters for every layer in `specs` and checks that widths chain.
    pub fn build<R: Rng + ?Sized>(
        specs: &[LayerSpec],
        input_len: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let mut width = input_len;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("{prefix}{i}");
            let layer = match *spec {
                LayerSpec::Dense { input, output } => {
                    if input != width {
                        return Err(NetError::shape(format!("layer {i} (dense)"), width, input));
                    }
                    width = output;
                    Layer::Dense(Dense::new(store, &name, input, output, rng))
                }
                LayerSpec::Pointwise {
                    in_channels,
                    out_channels,
                    sites,
                } => {
                    if in_channels * sites != width {
                        return Err(NetError::shape(
                            format!("layer {i} (pointwise)"),
                            width,
                            in_channels * sites,
                        ));
                    }
                    width = out_channels * sites;
                    Layer::Pointwise {
                        conv: Pointwise::new(store, &name, in_channels, out_channels, rng),
                        sites,
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Sigmoid => Layer::Sigmoid,
                LayerSpec::Softmax => Layer::Softmax,
                LayerSpec::Flatten => Layer::Flatten,
            };
            layers.push(layer);
        }
        Ok(Self {
            layers,
            input_len,
            output_len: width,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    /// Evaluates the network, recording activations on `tape`.
    pub fn forward(&self, params: &ParamStore, input: &[f64], tape: &mut Tape) -> Result<Vec<f64>> {
        if input.len() != self.input_len {
            return Err(NetError::shape(
                "network input",
                self.input_len,
                input.len(),
            ));
        }
        tape.activations.clear();
        tape.activations.push(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = tape.activations.last().expect("tape holds the input");
            let y = layer
                .forward(params, x)
                .map_err(|e| relabel(e, i, layer.kind()))?;
            tape.activations.push(y);
        }
        Ok(tape.activations.last().cloned().unwrap_or_default())
    }

    /// Forward pass without keeping a tape.
    pub fn eval(&self, params: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        self.forward(params, input, &mut tape)
    }

    /// Adds parameter gradients for `grad_out` into `params` and returns the
    /// gradient with respect to the network input.
    pub fn backward(
        &self,
        params: &mut ParamStore,
        tape: &Tape,
        grad_out: &[f64],
    ) -> Result<Vec<f64>> {
        if tape.activations.len() != self.layers.len() + 1 {
            return Err(NetError::State(
                "backward called without a matching forward pass".into(),
            ));
        }
        if grad_out.len() != self.output_len {
            return Err(NetError::shape(
                "network output gradient",
                self.output_len,
                grad_out.len(),
            ));
        }
        let mut g = grad_out.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.activations[i];
            let y = &tape.activations[i + 1];
            g = layer
                .backward(params, x, y, &g)
                .map_err(|e| relabel(e, i, layer.kind()))?;
        }
        Ok(g)
    }
}

fn relabel(err: NetError, index: usize, kind: &str) -> NetError {
    match err {
        NetError::Shape { expected, got, .. } => NetError::Shape {
            layer: format!("layer {index} ({kind})"),
            expected,
            got,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(store: &mut ParamStore) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Network::build(
            &[
                LayerSpec::Pointwise {
                    in_channels: 2,
                    out_channels: 3,
                    sites: 4,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    input: 12,
                    output: 5,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    input: 5,
                    output: 3,
                },
                LayerSpec::Softmax,
            ],
            8,
            store,
            "net",
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn build_rejects_inconsistent_widths() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = Network::build(
            &[
                LayerSpec::Dense {
                    input: 4,
                    output: 2,
                },
                LayerSpec::Dense {
                    input: 3,
                    output: 1,
                },
            ],
            4,
            &mut store,
            "bad",
            &mut rng,
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let mut store = ParamStore::new();
        let net = small_net(&mut store);
        let err = net
            .backward(&mut store, &Tape::new(), &[1.0, 0.0, 0.0])
            .unwrap_err();
        assert!(matches!(err, NetError::State(_)));
    }

    #[test]
    fn forward_names_the_input_mismatch() {
        let mut store = ParamStore::new();
        let net = small_net(&mut store);
        let err = net.eval(&store, &[0.0; 7]).unwrap_err();
        assert!(matches!(err, NetError::Shape { .. }));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let mut store = ParamStore::new();
        let net = small_net(&mut store);
        let mut tape = Tape::new();
        net.forward(
            &store,
            &[0.3, -0.1, 0.7, 0.2, -0.5, 0.9, 0.4, 0.0],
            &mut tape,
        )
        .unwrap();
        net.backward(&mut store, &tape, &[0.0; 3]).unwrap();
        assert!(store.flat_grads().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn repeated_backward_accumulates_exactly() {
        let mut store = ParamStore::new();
        let net = small_net(&mut store);
        let mut tape = Tape::new();
        let x = [0.3, -0.1, 0.7, 0.2, -0.5, 0.9, 0.4, 0.0];
        net.forward(&store, &x, &mut tape).unwrap();
        net.backward(&mut store, &tape, &[1.0, -2.0, 0.5]).unwrap();
        let once = store.flat_grads();
        net.backward(&mut store, &tape, &[1.0, -2.0, 0.5]).unwrap();
        let twice = store.flat_grads();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }
}
