//! Toy pose-model zoo. Three families share one trunk design (conv stem
//! plus an encoder-decoder "hourglass" with a skip connection) and
//! differ in the head: direct coordinate regression, stacked heatmap
//! regression with optional intermediate supervision, and chained
//! per-joint heatmap prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::diffnet::{init_layer_params, run_layers, Graph, LayerSpec, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::synthpose::{render_heatmaps, PoseSample};

/// Label bump width (heatmap cells) used for training and for targeted
/// attack objectives.
pub const LABEL_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    DirectRegression,
    HeatmapStacked,
    HeatmapChained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSurface {
    /// Final-stack output only.
    Last,
    /// Unweighted sum of per-stack losses.
    All,
}

impl std::str::FromStr for LossSurface {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(LossSurface::Last),
            "all" => Ok(LossSurface::All),
            other => Err(Error::InvalidConfig(format!("loss surface {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_joints: usize,
    /// (height, width) of the expected input image.
    pub input_size: (usize, usize),
    /// (height, width) of heatmap outputs; must be input_size / 2.
    pub heatmap_size: (usize, usize),
    /// Trunk width in channels.
    pub channels: usize,
    /// Hourglass stack count (heatmap-stacked only).
    pub stacks: usize,
}

impl ModelConfig {
    pub fn direct(num_joints: usize, channels: usize) -> Self {
        ModelConfig {
            kind: ModelKind::DirectRegression,
            num_joints,
            input_size: (32, 32),
            heatmap_size: (16, 16),
            channels,
            stacks: 1,
        }
    }

    pub fn heatmap(num_joints: usize, channels: usize, stacks: usize) -> Self {
        ModelConfig {
            kind: ModelKind::HeatmapStacked,
            num_joints,
            input_size: (32, 32),
            heatmap_size: (16, 16),
            channels,
            stacks,
        }
    }

    pub fn chained(num_joints: usize, channels: usize) -> Self {
        ModelConfig {
            kind: ModelKind::HeatmapChained,
            num_joints,
            input_size: (32, 32),
            heatmap_size: (16, 16),
            channels,
            stacks: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let (hh, hw) = self.heatmap_size;
        if self.num_joints == 0 || self.channels == 0 || self.stacks == 0 {
            return Err(Error::InvalidSpec("zero-sized model dimension".into()));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
            return Err(Error::InvalidSpec(format!(
                "input size {h}x{w} must be a multiple of 4 and at least 8"
            )));
        }
        // One pooling step in the stem, pool+upsample inside each
        // hourglass: the heatmap grid is always input/2.
        if hh != h / 2 || hw != w / 2 {
            return Err(Error::InvalidSpec(format!(
                "heatmap size {hh}x{hw} not derivable from input {h}x{w} (expected {}x{})",
                h / 2,
                w / 2
            )));
        }
        if self.kind != ModelKind::HeatmapStacked && self.stacks != 1 {
            return Err(Error::InvalidSpec(
                "stack count only applies to heatmap-stacked models".into(),
            ));
        }
        Ok(())
    }

    fn stem_block(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: self.channels,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
        ]
    }

    fn hourglass_block(&self) -> Vec<LayerSpec> {
        let conv = |c_in, c_out| LayerSpec::Conv2d {
            in_channels: c_in,
            out_channels: c_out,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        vec![
            conv(self.channels, self.channels),
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            conv(self.channels, self.channels),
            LayerSpec::Relu,
            LayerSpec::Upsample2x,
            // Skip from the pre-pool encoder activation (output of layer 1).
            LayerSpec::Add { from: 2 },
            conv(self.channels, self.channels),
            LayerSpec::Relu,
        ]
    }

    fn head_block(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::Conv2d {
            in_channels: self.channels,
            out_channels: self.num_joints,
            kernel: 1,
            stride: 1,
            padding: 0,
        }]
    }

    fn remap_block(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::Conv2d {
            in_channels: self.num_joints,
            out_channels: self.channels,
            kernel: 1,
            stride: 1,
            padding: 0,
        }]
    }

    fn regression_head_block(&self) -> Vec<LayerSpec> {
        let (hh, hw) = self.heatmap_size;
        let flat = self.channels * (hh / 2) * (hw / 2);
        vec![
            LayerSpec::AvgPool2x2,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: flat,
                out_features: 64,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                in_features: 64,
                out_features: 2 * self.num_joints,
            },
        ]
    }

    fn chain_step_block(&self, step: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv2d {
                in_channels: self.channels + step,
                out_channels: self.channels,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                in_channels: self.channels,
                out_channels: 1,
                kernel: 1,
                stride: 1,
                padding: 0,
            },
        ]
    }

    /// Ordered (name, layers) blocks. The stem and first hourglass come
    /// first so that models sharing a trunk draw identical initial trunk
    /// parameters from the same seed.
    fn blocks(&self) -> Vec<(String, Vec<LayerSpec>)> {
        let mut blocks = vec![
            ("stem".to_string(), self.stem_block()),
            ("hg0".to_string(), self.hourglass_block()),
        ];
        match self.kind {
            ModelKind::DirectRegression => {
                blocks.push(("reghead".into(), self.regression_head_block()));
            }
            ModelKind::HeatmapStacked => {
                blocks.push(("head0".into(), self.head_block()));
                for s in 1..self.stacks {
                    blocks.push((format!("remap{}", s - 1), self.remap_block()));
                    blocks.push((format!("hg{s}"), self.hourglass_block()));
                    blocks.push((format!("head{s}"), self.head_block()));
                }
            }
            ModelKind::HeatmapChained => {
                for j in 0..self.num_joints {
                    blocks.push((format!("chain{j}"), self.chain_step_block(j)));
                }
            }
        }
        blocks
    }
}

/// Named parameter store with a stable order (the init/draw order, also
/// the serialization order).
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    fn init(blocks: &[(String, Vec<LayerSpec>)], seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: HashMap::new(),
        };
        for (block, layers) in blocks {
            for (i, layer) in layers.iter().enumerate() {
                if let Some((w, b)) = init_layer_params(layer, &mut rng) {
                    set.push(format!("{block}.{i}.w"), w);
                    set.push(format!("{block}.{i}.b"), b);
                }
            }
        }
        set
    }

    fn push(&mut self, name: String, tensor: Tensor) {
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).map(|&i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// One forward pass recorded in a graph, with handles back into it.
pub struct ForwardPass {
    pub input: NodeId,
    /// Heatmap output per stack (chained models expose one stacked
    /// [K, h, w] output).
    pub stack_outputs: Vec<NodeId>,
    /// Raw regression output [2K], normalized coordinates.
    pub coords: Option<NodeId>,
    /// Leaf node per parameter, aligned with the ParamSet order.
    pub param_nodes: Vec<NodeId>,
}

/// Decoded model output.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub stack_heatmaps: Vec<Tensor>,
    pub coords: Option<Vec<f64>>,
    /// Final joint estimates in input-pixel units.
    pub joints: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct PoseModel {
    config: ModelConfig,
    params: ParamSet,
}

/// Builds a model with deterministic He-style uniform init.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<PoseModel> {
    config.validate()?;
    let params = ParamSet::init(&config.blocks(), seed);
    Ok(PoseModel {
        config: config.clone(),
        params,
    })
}

impl PoseModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Records a forward pass into `graph`. `input_grad` marks the image
    /// leaf for gradient accumulation (attacks); `trainable` marks the
    /// parameter leaves (training).
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        image: &Tensor,
        input_grad: bool,
        trainable: bool,
    ) -> Result<ForwardPass> {
        let (h, w) = self.config.input_size;
        if image.shape() != [h, w] {
            return Err(Error::ShapeMismatch {
                context: "model input",
                expected: vec![h, w],
                actual: image.shape().to_vec(),
            });
        }
        let mut as_channel = Tensor::from_vec(&[1, h, w], image.data().to_vec())?;
        as_channel.set_requires_grad(input_grad);
        let input = graph.leaf(as_channel);

        let param_nodes: Vec<NodeId> = self
            .params
            .tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.zero_grad();
                t.set_requires_grad(trainable);
                graph.leaf(t)
            })
            .collect();

        // Pixels in, normalized activations behind the first conv.
        let normed = graph.affine(input, 1.0 / 127.5, -1.0);
        let stem = self.run_block(graph, &param_nodes, "stem", &self.config.stem_block(), normed)?;
        let trunk =
            self.run_block(graph, &param_nodes, "hg0", &self.config.hourglass_block(), stem)?;

        let mut stack_outputs = Vec::new();
        let mut coords = None;
        match self.config.kind {
            ModelKind::DirectRegression => {
                coords = Some(self.run_block(
                    graph,
                    &param_nodes,
                    "reghead",
                    &self.config.regression_head_block(),
                    trunk,
                )?);
            }
            ModelKind::HeatmapStacked => {
                let mut features = trunk;
                for s in 0..self.config.stacks {
                    if s > 0 {
                        features = self.run_block(
                            graph,
                            &param_nodes,
                            &format!("hg{s}"),
                            &self.config.hourglass_block(),
                            features,
                        )?;
                    }
                    let head = self.run_block(
                        graph,
                        &param_nodes,
                        &format!("head{s}"),
                        &self.config.head_block(),
                        features,
                    )?;
                    stack_outputs.push(head);
                    if s + 1 < self.config.stacks {
                        let remap = self.run_block(
                            graph,
                            &param_nodes,
                            &format!("remap{s}"),
                            &self.config.remap_block(),
                            head,
                        )?;
                        features = graph.add(features, remap)?;
                    }
                }
            }
            ModelKind::HeatmapChained => {
                let mut emitted: Option<NodeId> = None;
                for j in 0..self.config.num_joints {
                    let step_in = match emitted {
                        None => trunk,
                        Some(prev) => graph.concat_channels(trunk, prev)?,
                    };
                    let hm = self.run_block(
                        graph,
                        &param_nodes,
                        &format!("chain{j}"),
                        &self.config.chain_step_block(j),
                        step_in,
                    )?;
                    emitted = Some(match emitted {
                        None => hm,
                        Some(prev) => graph.concat_channels(prev, hm)?,
                    });
                }
                stack_outputs.push(emitted.expect("at least one joint"));
            }
        }
        Ok(ForwardPass {
            input,
            stack_outputs,
            coords,
            param_nodes,
        })
    }

    fn run_block(
        &self,
        graph: &mut Graph,
        param_nodes: &[NodeId],
        block_name: &str,
        layers: &[LayerSpec],
        input: NodeId,
    ) -> Result<NodeId> {
        run_layers(
            graph,
            layers,
            |_, i| {
                let wn = format!("{block_name}.{i}.w");
                let bn = format!("{block_name}.{i}.b");
                let wi = self
                    .params
                    .index_of(&wn)
                    .ok_or_else(|| Error::InvalidSpec(format!("missing param {wn}")))?;
                let bi = self
                    .params
                    .index_of(&bn)
                    .ok_or_else(|| Error::InvalidSpec(format!("missing param {bn}")))?;
                Ok((param_nodes[wi], param_nodes[bi]))
            },
            input,
        )
    }

    /// Forward pass plus joint decoding; pixel inputs in [0, 255].
    pub fn predict(&self, image: &Tensor) -> Result<ModelOutput> {
        let mut graph = Graph::new();
        let pass = self.forward_graph(&mut graph, image, false, false)?;
        let stack_heatmaps: Vec<Tensor> = pass
            .stack_outputs
            .iter()
            .map(|&id| graph.value(id).clone())
            .collect();
        let coords = pass.coords.map(|id| graph.value(id).data().to_vec());
        let joints = match (&coords, stack_heatmaps.last()) {
            (Some(c), _) => decode_regression(c, self.config.input_size),
            (None, Some(hm)) => decode_joints(hm, self.config.input_size),
            (None, None) => unreachable!("model produced no output"),
        };
        Ok(ModelOutput {
            stack_heatmaps,
            coords,
            joints,
        })
    }
}

/// Argmax decode: each joint lands at the center of its strongest cell,
/// mapped back to input pixels. Ties break toward the lowest row, then
/// the lowest column.
pub fn decode_joints(heatmaps: &Tensor, input_size: (usize, usize)) -> Vec<(f64, f64)> {
    let shape = heatmaps.shape();
    let (k, hm_h, hm_w) = (shape[0], shape[1], shape[2]);
    let (img_h, img_w) = input_size;
    let (sy, sx) = (
        img_h as f64 / hm_h as f64,
        img_w as f64 / hm_w as f64,
    );
    (0..k)
        .map(|j| {
            let map = &heatmaps.data()[j * hm_h * hm_w..(j + 1) * hm_h * hm_w];
            let mut best = 0usize;
            for (i, v) in map.iter().enumerate() {
                if *v > map[best] {
                    best = i;
                }
            }
            let (r, c) = (best / hm_w, best % hm_w);
            (
                (c as f64 + 0.5) * sx - 0.5,
                (r as f64 + 0.5) * sy - 0.5,
            )
        })
        .collect()
}

/// Regression decode: clamp the normalized outputs to [0, 1] and scale
/// by (W-1, H-1).
pub fn decode_regression(coords: &[f64], input_size: (usize, usize)) -> Vec<(f64, f64)> {
    let (img_h, img_w) = input_size;
    coords
        .chunks_exact(2)
        .map(|c| {
            (
                c[0].clamp(0.0, 1.0) * (img_w - 1) as f64,
                c[1].clamp(0.0, 1.0) * (img_h - 1) as f64,
            )
        })
        .collect()
}

/// Training/attack labels in the model's output representation.
#[derive(Debug, Clone)]
pub enum Labels {
    Heatmaps { target: Tensor, mask: Tensor },
    Coords { target: Tensor, mask: Tensor },
}

/// Renders labels for arbitrary joints (ground truth or target poses).
/// Invisible joints are masked out of the loss entirely.
pub fn labels_for_joints(
    config: &ModelConfig,
    joints: &[(f64, f64)],
    visibility: &[bool],
    sigma: f64,
) -> Labels {
    match config.kind {
        ModelKind::DirectRegression => {
            let (img_h, img_w) = config.input_size;
            let mut target = Vec::with_capacity(2 * joints.len());
            let mut mask = Vec::with_capacity(2 * joints.len());
            for (j, &(x, y)) in joints.iter().enumerate() {
                target.push((x / (img_w - 1) as f64).clamp(0.0, 1.0));
                target.push((y / (img_h - 1) as f64).clamp(0.0, 1.0));
                let m = if visibility[j] { 1.0 } else { 0.0 };
                mask.push(m);
                mask.push(m);
            }
            Labels::Coords {
                target: Tensor::from_vec(&[2 * joints.len()], target).expect("coords"),
                mask: Tensor::from_vec(&[2 * joints.len()], mask).expect("mask"),
            }
        }
        ModelKind::HeatmapStacked | ModelKind::HeatmapChained => {
            let sample = PoseSample {
                image: Tensor::zeros(&[config.input_size.0, config.input_size.1]),
                joints: joints.to_vec(),
                visibility: visibility.to_vec(),
                head_size: 1.0,
                scale: 1.0,
                id: 0,
            };
            let target = render_heatmaps(&sample, config.heatmap_size, sigma);
            let (hh, hw) = config.heatmap_size;
            let mut mask = vec![0.0; joints.len() * hh * hw];
            for (j, &vis) in visibility.iter().enumerate() {
                if vis {
                    mask[j * hh * hw..(j + 1) * hh * hw].fill(1.0);
                }
            }
            Labels::Heatmaps {
                target,
                mask: Tensor::from_vec(&[joints.len(), hh, hw], mask).expect("mask"),
            }
        }
    }
}

pub fn labels_for_sample(config: &ModelConfig, sample: &PoseSample, sigma: f64) -> Labels {
    labels_for_joints(config, &sample.joints, &sample.visibility, sigma)
}

/// Masked MSE between a recorded forward pass and labels. `Last` reads
/// only the final stack; `All` sums the per-stack losses.
pub fn training_loss(
    graph: &mut Graph,
    pass: &ForwardPass,
    labels: &Labels,
    surface: LossSurface,
) -> Result<NodeId> {
    match labels {
        Labels::Coords { target, mask } => {
            let out = pass
                .coords
                .ok_or_else(|| Error::InvalidSpec("regression labels on heatmap model".into()))?;
            let t = graph.constant(target.clone());
            let m = graph.constant(mask.clone());
            graph.masked_mse(out, t, m)
        }
        Labels::Heatmaps { target, mask } => {
            if pass.stack_outputs.is_empty() {
                return Err(Error::InvalidSpec("heatmap labels on regression model".into()));
            }
            let t = graph.constant(target.clone());
            let m = graph.constant(mask.clone());
            let stacks: &[NodeId] = match surface {
                LossSurface::Last => &pass.stack_outputs[pass.stack_outputs.len() - 1..],
                LossSurface::All => &pass.stack_outputs,
            };
            let mut total: Option<NodeId> = None;
            for &s in stacks {
                let l = graph.masked_mse(s, t, m)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => graph.add(acc, l)?,
                });
            }
            Ok(total.expect("at least one stack"))
        }
    }
}

// ---------------------------------------------------------------------
// PBM1 file format
// ---------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ParamHeaderEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    params: Vec<ParamHeaderEntry>,
}

impl PoseModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ModelHeader {
            config: self.config.clone(),
            params: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(name, t)| ParamHeaderEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        crate::synthpose::write_magic_and_header(&mut out, b"PBM1", &header_json);
        for t in &self.params.tensors {
            crate::synthpose::write_f64s(&mut out, t.data());
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PoseModel> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (header_json, mut at) = crate::synthpose::read_magic_and_header(&bytes, b"PBM1")?;
        let header: ModelHeader = serde_json::from_slice(header_json)?;
        header.config.validate()?;
        let mut fresh = build_model(&header.config, 0)?;
        if fresh.params.names.len() != header.params.len() {
            return Err(Error::Format(format!(
                "model file has {} params, config implies {}",
                header.params.len(),
                fresh.params.names.len()
            )));
        }
        for (entry, (name, tensor)) in header
            .params
            .iter()
            .zip(fresh.params.names.iter().zip(fresh.params.tensors.iter_mut()))
        {
            if &entry.name != name || entry.shape != tensor.shape() {
                return Err(Error::Format(format!(
                    "param mismatch: file has {} {:?}, config implies {} {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    tensor.shape()
                )));
            }
            let data = crate::synthpose::read_f64s(&bytes, &mut at, tensor.len())?;
            tensor.data_mut().copy_from_slice(&data);
        }
        Ok(fresh)
    }
}
