//! Declarative layer sequences. A block is a list of [`LayerSpec`]s
//! evaluated in order; `Add`/`ConcatChannels` reference the output of an
//! earlier position, which is how encoder-decoder skip connections are
//! written.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Sigmoid,
    MaxPool2x2,
    AvgPool2x2,
    Upsample2x,
    Flatten,
    /// Skip connection: adds the output of an earlier position in the
    /// block (0 is the block input, i+1 the output of layer i).
    Add {
        from: usize,
    },
    ConcatChannels {
        from: usize,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::MaxPool2x2 => "maxpool2x2",
            LayerSpec::AvgPool2x2 => "avgpool2x2",
            LayerSpec::Upsample2x => "upsample2x-nearest",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Add { .. } => "add",
            LayerSpec::ConcatChannels { .. } => "concat-channels",
        }
    }

    /// Weight and bias shapes, for layers that carry parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((vec![*out_features, *in_features], vec![*out_features])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![*out_channels, *in_channels, *kernel, *kernel],
                vec![*out_channels],
            )),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            LayerSpec::Dense { in_features, .. } => *in_features,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        if let LayerSpec::Conv2d {
            kernel,
            stride,
            in_channels,
            out_channels,
            ..
        } = self
        {
            if *kernel % 2 == 0 || *kernel == 0 {
                return Err(Error::Layer {
                    index,
                    kind: self.kind_name().into(),
                    message: format!("kernel size {kernel} must be odd"),
                });
            }
            if !(*stride == 1 || *stride == 2) {
                return Err(Error::Layer {
                    index,
                    kind: self.kind_name().into(),
                    message: format!("stride {stride} must be 1 or 2"),
                });
            }
            if *in_channels == 0 || *out_channels == 0 {
                return Err(Error::Layer {
                    index,
                    kind: self.kind_name().into(),
                    message: "zero channel count".into(),
                });
            }
        }
        Ok(())
    }
}

/// He-style uniform init: weights from U(-sqrt(6/fan_in), sqrt(6/fan_in)),
/// biases zero. Draw order is fixed by the layer order, so a given seed
/// reproduces parameters bit for bit.
pub fn init_layer_params<R: Rng>(spec: &LayerSpec, rng: &mut R) -> Option<(Tensor, Tensor)> {
    let (w_shape, b_shape) = spec.param_shapes()?;
    let limit = (6.0 / spec.fan_in() as f64).sqrt();
    let n: usize = w_shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    let w = Tensor::from_vec(&w_shape, data).expect("init shape");
    let b = Tensor::zeros(&b_shape);
    Some((w, b))
}

/// Runs a block of layers on `input`. `params` resolves the (weight,
/// bias) leaves for the layer at a given position; it is only called for
/// parameterized layers. Shape errors are tagged with the offending
/// layer index.
pub fn run_layers<P>(
    graph: &mut Graph,
    layers: &[LayerSpec],
    mut params: P,
    input: NodeId,
) -> Result<NodeId>
where
    P: FnMut(&mut Graph, usize) -> Result<(NodeId, NodeId)>,
{
    let mut outputs = Vec::with_capacity(layers.len() + 1);
    outputs.push(input);
    for (i, layer) in layers.iter().enumerate() {
        layer.validate(i)?;
        let at_layer = |e: Error| match e {
            Error::ShapeMismatch { .. } | Error::InvalidSpec(_) => Error::Layer {
                index: i,
                kind: layer.kind_name().into(),
                message: e.to_string(),
            },
            other => other,
        };
        let cur = *outputs.last().expect("nonempty");
        let out = match layer {
            LayerSpec::Dense { .. } => {
                let (w, b) = params(graph, i)?;
                graph.dense(cur, w, b).map_err(at_layer)?
            }
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let (w, b) = params(graph, i)?;
                graph.conv2d(cur, w, b, *stride, *padding).map_err(at_layer)?
            }
            LayerSpec::Relu => graph.relu(cur),
            LayerSpec::Sigmoid => graph.sigmoid(cur),
            LayerSpec::MaxPool2x2 => graph.maxpool2x2(cur).map_err(at_layer)?,
            LayerSpec::AvgPool2x2 => graph.avgpool2x2(cur).map_err(at_layer)?,
            LayerSpec::Upsample2x => graph.upsample2x(cur).map_err(at_layer)?,
            LayerSpec::Flatten => graph.flatten(cur),
            LayerSpec::Add { from } => {
                let other = *outputs.get(*from).ok_or(Error::Layer {
                    index: i,
                    kind: "add".into(),
                    message: format!("skip source {from} not yet produced"),
                })?;
                graph.add(cur, other).map_err(at_layer)?
            }
            LayerSpec::ConcatChannels { from } => {
                let other = *outputs.get(*from).ok_or(Error::Layer {
                    index: i,
                    kind: "concat-channels".into(),
                    message: format!("skip source {from} not yet produced"),
                })?;
                graph.concat_channels(cur, other).map_err(at_layer)?
            }
        };
        outputs.push(out);
    }
    Ok(*outputs.last().expect("nonempty"))
}
