use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use super::NnError;

pub type NodeId = usize;

/// Layer vocabulary. Shapes are per sample; the batch dimension is implicit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Flattens its input, then applies `y = W x + b`.
    Dense { inputs: usize, outputs: usize },
    Relu,
    MaxPool2,
    UpsampleNearest2,
    ConcatChannels,
}

impl LayerSpec {
    /// Number of trainable scalars (weights plus biases).
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => out_ch * in_ch * kernel * kernel + out_ch,
            LayerSpec::Dense { inputs, outputs } => outputs * inputs + outputs,
            _ => 0,
        }
    }

    fn manifest_entry(&self) -> String {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => format!("conv2d {in_ch} {out_ch} {kernel} {stride} {pad}"),
            LayerSpec::Dense { inputs, outputs } => format!("dense {inputs} {outputs}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::MaxPool2 => "maxpool2".into(),
            LayerSpec::UpsampleNearest2 => "upsample2".into(),
            LayerSpec::ConcatChannels => "concat".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NodeOp {
    Input { slot: usize },
    Layer(LayerSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    pub inputs: Vec<NodeId>,
    /// Output shape per sample.
    pub shape: Vec<usize>,
    /// Index of the weight tensor in `Graph::params`; the bias follows it.
    pub param: Option<usize>,
}

/// Declares a layer DAG and checks shapes as nodes are added.
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    param_shapes: Vec<Vec<usize>>,
}

fn chw(shape: &[usize], layer: &str) -> Result<(usize, usize, usize), NnError> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(NnError::InvalidLayer {
            layer: layer.into(),
            reason: format!("expects a [C, H, W] input, got {shape:?}"),
        }),
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn check_id(&self, id: NodeId, layer: &str) -> Result<(), NnError> {
        if id >= self.nodes.len() {
            return Err(NnError::InvalidLayer {
                layer: layer.into(),
                reason: format!("unknown input node {id}"),
            });
        }
        Ok(())
    }

    fn push(&mut self, name: &str, op: NodeOp, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let param = match &op {
            NodeOp::Layer(LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            }) => {
                self.param_shapes.push(vec![*out_ch, *in_ch, *kernel, *kernel]);
                self.param_shapes.push(vec![*out_ch]);
                Some(self.param_shapes.len() - 2)
            }
            NodeOp::Layer(LayerSpec::Dense { inputs, outputs }) => {
                self.param_shapes.push(vec![*outputs, *inputs]);
                self.param_shapes.push(vec![*outputs]);
                Some(self.param_shapes.len() - 2)
            }
            _ => None,
        };
        self.nodes.push(Node {
            name: name.into(),
            op,
            inputs,
            shape,
            param,
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let slot = self.inputs.len();
        let id = self.push(name, NodeOp::Input { slot }, vec![], shape.to_vec());
        self.inputs.push(id);
        id
    }

    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, NnError> {
        self.check_id(x, name)?;
        let (c, h, w) = chw(&self.nodes[x].shape, name)?;
        if kernel % 2 == 0 || stride == 0 || out_ch == 0 {
            return Err(NnError::InvalidLayer {
                layer: name.into(),
                reason: format!("kernel {kernel} must be odd, stride {stride} and out_ch {out_ch} positive"),
            });
        }
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(NnError::InvalidLayer {
                layer: name.into(),
                reason: format!("kernel {kernel} larger than padded input {h}x{w}"),
            });
        }
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let spec = LayerSpec::Conv2d {
            in_ch: c,
            out_ch,
            kernel,
            stride,
            pad,
        };
        Ok(self.push(name, NodeOp::Layer(spec), vec![x], vec![out_ch, ho, wo]))
    }

    pub fn dense(&mut self, name: &str, x: NodeId, outputs: usize) -> Result<NodeId, NnError> {
        self.check_id(x, name)?;
        let inputs: usize = self.nodes[x].shape.iter().product();
        if outputs == 0 || inputs == 0 {
            return Err(NnError::InvalidLayer {
                layer: name.into(),
                reason: "dense layer needs non-empty input and output".into(),
            });
        }
        let spec = LayerSpec::Dense { inputs, outputs };
        Ok(self.push(name, NodeOp::Layer(spec), vec![x], vec![outputs]))
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId, NnError> {
        self.check_id(x, name)?;
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(name, NodeOp::Layer(LayerSpec::Relu), vec![x], shape))
    }

    pub fn maxpool(&mut self, name: &str, x: NodeId) -> Result<NodeId, NnError> {
        self.check_id(x, name)?;
        let (c, h, w) = chw(&self.nodes[x].shape, name)?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(NnError::InvalidLayer {
                layer: name.into(),
                reason: format!("2x2 pooling needs even spatial size, got {h}x{w}"),
            });
        }
        Ok(self.push(name, NodeOp::Layer(LayerSpec::MaxPool2), vec![x], vec![c, h / 2, w / 2]))
    }

    pub fn upsample(&mut self, name: &str, x: NodeId) -> Result<NodeId, NnError> {
        self.check_id(x, name)?;
        let (c, h, w) = chw(&self.nodes[x].shape, name)?;
        Ok(self.push(
            name,
            NodeOp::Layer(LayerSpec::UpsampleNearest2),
            vec![x],
            vec![c, h * 2, w * 2],
        ))
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> Result<NodeId, NnError> {
        if xs.is_empty() {
            return Err(NnError::InvalidLayer {
                layer: name.into(),
                reason: "concat needs at least one input".into(),
            });
        }
        let mut channels = 0;
        let mut spatial = None;
        for &x in xs {
            self.check_id(x, name)?;
            let (c, h, w) = chw(&self.nodes[x].shape, name)?;
            match spatial {
                None => spatial = Some((h, w)),
                Some(s) if s != (h, w) => {
                    return Err(NnError::ShapeMismatch {
                        layer: name.into(),
                        expected: vec![s.0, s.1],
                        found: vec![h, w],
                    })
                }
                _ => {}
            }
            channels += c;
        }
        let (h, w) = spatial.unwrap();
        Ok(self.push(
            name,
            NodeOp::Layer(LayerSpec::ConcatChannels),
            xs.to_vec(),
            vec![channels, h, w],
        ))
    }

    pub fn output(&mut self, x: NodeId) {
        self.outputs.push(x);
    }

    /// Finalizes the graph with Kaiming-uniform weights and zero biases.
    pub fn build<T: Real, R: Rng + ?Sized>(self, rng: &mut R) -> Result<Graph<T>, NnError> {
        if self.outputs.is_empty() {
            return Err(NnError::InvalidLayer {
                layer: "graph".into(),
                reason: "no outputs declared".into(),
            });
        }
        let mut params = Vec::with_capacity(self.param_shapes.len());
        for (i, shape) in self.param_shapes.iter().enumerate() {
            let mut t = Tensor::zeros(shape);
            if i % 2 == 0 {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                for v in &mut t.data {
                    *v = T::from_f64(rng.gen_range(-bound..bound));
                }
            }
            params.push(t);
        }
        Ok(Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: self.outputs,
            params,
        })
    }
}

/// A built layer DAG with its parameters. Nodes are stored in topological order.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph<T> {
    pub nodes: Vec<Node>,
    pub inputs: Vec<NodeId>,
    pub outputs: Vec<NodeId>,
    pub params: Vec<Tensor<T>>,
}

/// Activations retained by `forward` for `backward`.
#[derive(Clone, Debug)]
pub struct Cache<T> {
    pub batch: usize,
    pub acts: Vec<Tensor<T>>,
    pool_argmax: Vec<Vec<u8>>,
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    /// Aligned with `Graph::params`.
    pub params: Vec<Tensor<T>>,
    /// Aligned with `Graph::inputs`.
    pub inputs: Vec<Tensor<T>>,
}

fn batched(batch: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len() + 1);
    s.push(batch);
    s.extend_from_slice(shape);
    s
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let n = self.cols();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oh * self.wo..(oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            line.fill(T::ZERO);
                            continue;
                        }
                        let src = &x[(c * self.h + ih as usize) * self.w..][..self.w];
                        for (ow, v) in line.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *v = if iw < 0 || iw >= self.w as isize {
                                T::ZERO
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let n = self.cols();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + ih as usize) * self.w..][..self.w];
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += src[oh * self.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn input_shape(&self, slot: usize) -> &[usize] {
        &self.nodes[self.inputs[slot]].shape
    }

    pub fn output_shape(&self, slot: usize) -> &[usize] {
        &self.nodes[self.outputs[slot]].shape
    }

    /// One line per node; used to reject parameter files for a different architecture.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            let op = match &node.op {
                NodeOp::Input { slot } => format!("input {slot}"),
                NodeOp::Layer(spec) => spec.manifest_entry(),
            };
            let inputs: Vec<String> = node.inputs.iter().map(|i| i.to_string()).collect();
            let shape: Vec<String> = node.shape.iter().map(|i| i.to_string()).collect();
            out.push_str(&format!(
                "{} {} <- [{}] -> [{}]\n",
                node.name,
                op,
                inputs.join(","),
                shape.join("x")
            ));
        }
        let outs: Vec<String> = self.outputs.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!("outputs [{}]\n", outs.join(",")));
        out
    }

    pub fn cast<U: Real>(&self) -> Graph<U> {
        Graph {
            nodes: self.nodes.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    pub fn zero_param_grads(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| Tensor::zeros(&p.shape)).collect()
    }

    /// Runs the graph and returns its outputs without keeping activations.
    pub fn infer(&self, inputs: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>, NnError> {
        self.forward(inputs).map(|(out, _)| out)
    }

    pub fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Vec<Tensor<T>>, Cache<T>), NnError> {
        if inputs.len() != self.inputs.len() {
            return Err(NnError::ShapeMismatch {
                layer: "graph inputs".into(),
                expected: vec![self.inputs.len()],
                found: vec![inputs.len()],
            });
        }
        let batch = inputs.first().map(|t| t.batch()).unwrap_or(0);
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut pool_argmax = vec![Vec::new(); self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            let out = match &node.op {
                NodeOp::Input { slot } => {
                    let t = inputs[*slot];
                    let expected = batched(batch, &node.shape);
                    if t.shape != expected || t.data.len() != t.shape.iter().product::<usize>() {
                        return Err(NnError::ShapeMismatch {
                            layer: node.name.clone(),
                            expected,
                            found: t.shape.clone(),
                        });
                    }
                    t.clone()
                }
                NodeOp::Layer(spec) => {
                    let x = &acts[node.inputs[0]];
                    match spec {
                        LayerSpec::Conv2d { .. } => self.conv_forward(node, x),
                        LayerSpec::Dense { inputs, outputs } => {
                            self.dense_forward(node, x, *inputs, *outputs)
                        }
                        LayerSpec::Relu => Tensor {
                            shape: x.shape.clone(),
                            data: x
                                .data
                                .iter()
                                .map(|&v| if v > T::ZERO { v } else { T::ZERO })
                                .collect(),
                        },
                        LayerSpec::MaxPool2 => {
                            let (t, idx) = maxpool_forward(node, x);
                            pool_argmax[id] = idx;
                            t
                        }
                        LayerSpec::UpsampleNearest2 => upsample_forward(node, x),
                        LayerSpec::ConcatChannels => {
                            let parts: Vec<&Tensor<T>> =
                                node.inputs.iter().map(|&i| &acts[i]).collect();
                            concat_forward(node, &parts, batch)
                        }
                    }
                }
            };
            acts.push(out);
        }
        let outputs = self.outputs.iter().map(|&o| acts[o].clone()).collect();
        Ok((
            outputs,
            Cache {
                batch,
                acts,
                pool_argmax,
            },
        ))
    }

    fn geom(&self, node: &Node) -> ConvGeom {
        let (c, h, w) = chw_unchecked(&self.nodes[node.inputs[0]].shape);
        match node.op {
            NodeOp::Layer(LayerSpec::Conv2d {
                out_ch,
                kernel,
                stride,
                pad,
                ..
            }) => ConvGeom {
                c,
                h,
                w,
                o: out_ch,
                k: kernel,
                stride,
                pad,
                ho: node.shape[1],
                wo: node.shape[2],
            },
            _ => unreachable!("geom on a non-conv node"),
        }
    }

    fn conv_forward(&self, node: &Node, x: &Tensor<T>) -> Tensor<T> {
        let g = self.geom(node);
        let p = node.param.unwrap();
        let (wt, bias) = (&self.params[p], &self.params[p + 1]);
        let batch = x.batch();
        let mut y = Tensor::zeros(&batched(batch, &node.shape));
        let mut cols = vec![T::ZERO; g.rows() * g.cols()];
        let n = g.cols();
        for b in 0..batch {
            g.im2col(x.sample(b), &mut cols);
            let yb = y.sample_mut(b);
            for (o, chunk) in yb.chunks_mut(n).enumerate() {
                chunk.fill(bias.data[o]);
            }
            T::gemm(
                g.o,
                g.rows(),
                n,
                T::ONE,
                &wt.data,
                g.rows() as isize,
                1,
                &cols,
                n as isize,
                1,
                T::ONE,
                yb,
                n as isize,
                1,
            );
        }
        y
    }

    fn dense_forward(&self, node: &Node, x: &Tensor<T>, fin: usize, fout: usize) -> Tensor<T> {
        let p = node.param.unwrap();
        let (wt, bias) = (&self.params[p], &self.params[p + 1]);
        let batch = x.batch();
        let mut y = Tensor::zeros(&[batch, fout]);
        for b in 0..batch {
            y.sample_mut(b).copy_from_slice(&bias.data);
        }
        T::gemm(
            batch,
            fin,
            fout,
            T::ONE,
            &x.data,
            fin as isize,
            1,
            &wt.data,
            1,
            fin as isize,
            T::ONE,
            &mut y.data,
            fout as isize,
            1,
        );
        y
    }

    /// Reverse pass. `output_grads[i]` is dL/d(output i); `None` means zero.
    pub fn backward(
        &self,
        cache: &Cache<T>,
        output_grads: &[Option<&Tensor<T>>],
    ) -> Result<Gradients<T>, NnError> {
        if cache.acts.len() != self.nodes.len() {
            return Err(NnError::StaleCache(format!(
                "cache holds {} activations, graph has {} nodes",
                cache.acts.len(),
                self.nodes.len()
            )));
        }
        for (node, act) in self.nodes.iter().zip(&cache.acts) {
            if act.shape != batched(cache.batch, &node.shape) {
                return Err(NnError::StaleCache(format!(
                    "activation of '{}' has shape {:?}",
                    node.name, act.shape
                )));
            }
        }
        if output_grads.len() != self.outputs.len() {
            return Err(NnError::ShapeMismatch {
                layer: "output grads".into(),
                expected: vec![self.outputs.len()],
                found: vec![output_grads.len()],
            });
        }
        let batch = cache.batch;
        let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (slot, g) in output_grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let id = self.outputs[slot];
            let expected = batched(batch, &self.nodes[id].shape);
            if g.shape != expected {
                return Err(NnError::ShapeMismatch {
                    layer: self.nodes[id].name.clone(),
                    expected,
                    found: g.shape.clone(),
                });
            }
            accumulate(&mut node_grads[id], g);
        }
        let mut param_grads = self.zero_param_grads();
        let mut input_grads: Vec<Tensor<T>> = self
            .inputs
            .iter()
            .map(|&i| Tensor::zeros(&batched(batch, &self.nodes[i].shape)))
            .collect();

        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = node_grads[id].take() else { continue };
            let node = &self.nodes[id];
            let spec = match &node.op {
                NodeOp::Input { slot } => {
                    input_grads[*slot].add_assign(&dy);
                    continue;
                }
                NodeOp::Layer(spec) => spec,
            };
            match spec {
                LayerSpec::Conv2d { .. } => {
                    let x = &cache.acts[node.inputs[0]];
                    let p = node.param.unwrap();
                    let (gw, rest) = param_grads[p..].split_at_mut(1);
                    let dx = self.conv_backward(node, x, &dy, &mut gw[0], &mut rest[0]);
                    accumulate_owned(&mut node_grads[node.inputs[0]], dx);
                }
                LayerSpec::Dense { inputs, outputs } => {
                    let x = &cache.acts[node.inputs[0]];
                    let p = node.param.unwrap();
                    let (gw, rest) = param_grads[p..].split_at_mut(1);
                    let dx = self.dense_backward(node, x, &dy, *inputs, *outputs, &mut gw[0], &mut rest[0]);
                    accumulate_owned(&mut node_grads[node.inputs[0]], dx);
                }
                LayerSpec::Relu => {
                    let x = &cache.acts[node.inputs[0]];
                    let data = dy
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(&g, &v)| if v > T::ZERO { g } else { T::ZERO })
                        .collect();
                    accumulate_owned(
                        &mut node_grads[node.inputs[0]],
                        Tensor {
                            shape: x.shape.clone(),
                            data,
                        },
                    );
                }
                LayerSpec::MaxPool2 => {
                    let src = &self.nodes[node.inputs[0]];
                    let dx = maxpool_backward(src, node, &dy, &cache.pool_argmax[id]);
                    accumulate_owned(&mut node_grads[node.inputs[0]], dx);
                }
                LayerSpec::UpsampleNearest2 => {
                    let src = &self.nodes[node.inputs[0]];
                    let dx = upsample_backward(src, &dy);
                    accumulate_owned(&mut node_grads[node.inputs[0]], dx);
                }
                LayerSpec::ConcatChannels => {
                    let (_, h, w) = chw_unchecked(&node.shape);
                    let hw = h * w;
                    let mut offset = 0;
                    for &src_id in &node.inputs {
                        let c = self.nodes[src_id].shape[0];
                        let mut part = Tensor::zeros(&batched(batch, &self.nodes[src_id].shape));
                        for b in 0..batch {
                            let from = &dy.sample(b)[offset * hw..(offset + c) * hw];
                            part.sample_mut(b).copy_from_slice(from);
                        }
                        offset += c;
                        accumulate_owned(&mut node_grads[src_id], part);
                    }
                }
            }
        }
        Ok(Gradients {
            params: param_grads,
            inputs: input_grads,
        })
    }

    fn conv_backward(
        &self,
        node: &Node,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        gw: &mut Tensor<T>,
        gb: &mut Tensor<T>,
    ) -> Tensor<T> {
        let g = self.geom(node);
        let wt = &self.params[node.param.unwrap()];
        let batch = x.batch();
        let n = g.cols();
        let rows = g.rows();
        let mut cols = vec![T::ZERO; rows * n];
        let mut dcols = vec![T::ZERO; rows * n];
        let mut dx = Tensor::zeros(&x.shape);
        for b in 0..batch {
            let dyb = dy.sample(b);
            for (o, chunk) in dyb.chunks(n).enumerate() {
                gb.data[o] += chunk.iter().copied().sum::<T>();
            }
            g.im2col(x.sample(b), &mut cols);
            T::gemm(
                g.o,
                n,
                rows,
                T::ONE,
                dyb,
                n as isize,
                1,
                &cols,
                1,
                n as isize,
                T::ONE,
                &mut gw.data,
                rows as isize,
                1,
            );
            T::gemm(
                rows,
                g.o,
                n,
                T::ONE,
                &wt.data,
                1,
                rows as isize,
                dyb,
                n as isize,
                1,
                T::ZERO,
                &mut dcols,
                n as isize,
                1,
            );
            g.col2im(&dcols, dx.sample_mut(b));
        }
        dx
    }

    #[allow(clippy::too_many_arguments)]
    fn dense_backward(
        &self,
        node: &Node,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        fin: usize,
        fout: usize,
        gw: &mut Tensor<T>,
        gb: &mut Tensor<T>,
    ) -> Tensor<T> {
        let wt = &self.params[node.param.unwrap()];
        let batch = x.batch();
        for b in 0..batch {
            for (acc, &v) in gb.data.iter_mut().zip(dy.sample(b)) {
                *acc += v;
            }
        }
        T::gemm(
            fout,
            batch,
            fin,
            T::ONE,
            &dy.data,
            1,
            fout as isize,
            &x.data,
            fin as isize,
            1,
            T::ONE,
            &mut gw.data,
            fin as isize,
            1,
        );
        let mut dx = Tensor::zeros(&x.shape);
        T::gemm(
            batch,
            fout,
            fin,
            T::ONE,
            &dy.data,
            fout as isize,
            1,
            &wt.data,
            fin as isize,
            1,
            T::ZERO,
            &mut dx.data,
            fin as isize,
            1,
        );
        dx
    }
}

fn chw_unchecked(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: &Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}

fn accumulate_owned<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn maxpool_forward<T: Real>(node: &Node, x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (c, ho, wo) = chw_unchecked(&node.shape);
    let (h, w) = (ho * 2, wo * 2);
    let batch = x.batch();
    let mut y = Tensor::zeros(&batched(batch, &node.shape));
    let mut idx = vec![0u8; y.len()];
    for b in 0..batch {
        let xs = x.sample(b);
        let base = b * c * ho * wo;
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = 0u8;
                    let mut val = xs[(ch * h + 2 * i) * w + 2 * j];
                    for q in 1..4u8 {
                        let v = xs[(ch * h + 2 * i + (q / 2) as usize) * w + 2 * j + (q % 2) as usize];
                        if v > val {
                            val = v;
                            best = q;
                        }
                    }
                    let o = base + (ch * ho + i) * wo + j;
                    y.data[o] = val;
                    idx[o] = best;
                }
            }
        }
    }
    (y, idx)
}

fn maxpool_backward<T: Real>(src: &Node, node: &Node, dy: &Tensor<T>, idx: &[u8]) -> Tensor<T> {
    let (c, ho, wo) = chw_unchecked(&node.shape);
    let w = wo * 2;
    let h = ho * 2;
    let batch = dy.batch();
    let mut dx = Tensor::zeros(&batched(batch, &src.shape));
    for b in 0..batch {
        let base = b * c * ho * wo;
        let dxs = dx.sample_mut(b);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let o = base + (ch * ho + i) * wo + j;
                    let q = idx[o] as usize;
                    dxs[(ch * h + 2 * i + q / 2) * w + 2 * j + q % 2] += dy.data[o];
                }
            }
        }
    }
    dx
}

fn upsample_forward<T: Real>(node: &Node, x: &Tensor<T>) -> Tensor<T> {
    let (c, h2, w2) = chw_unchecked(&node.shape);
    let (h, w) = (h2 / 2, w2 / 2);
    let batch = x.batch();
    let mut y = Tensor::zeros(&batched(batch, &node.shape));
    for b in 0..batch {
        let xs = x.sample(b);
        let ys = y.sample_mut(b);
        for ch in 0..c {
            for i in 0..h2 {
                let src = &xs[(ch * h + i / 2) * w..][..w];
                let dst = &mut ys[(ch * h2 + i) * w2..][..w2];
                for (j, v) in dst.iter_mut().enumerate() {
                    *v = src[j / 2];
                }
            }
        }
    }
    y
}

fn upsample_backward<T: Real>(src: &Node, dy: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = chw_unchecked(&src.shape);
    let (h2, w2) = (h * 2, w * 2);
    let batch = dy.batch();
    let mut dx = Tensor::zeros(&batched(batch, &src.shape));
    for b in 0..batch {
        let dys = dy.sample(b);
        let dxs = dx.sample_mut(b);
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    dxs[(ch * h + i / 2) * w + j / 2] += dys[(ch * h2 + i) * w2 + j];
                }
            }
        }
    }
    dx
}

fn concat_forward<T: Real>(node: &Node, parts: &[&Tensor<T>], batch: usize) -> Tensor<T> {
    let mut y = Tensor::zeros(&batched(batch, &node.shape));
    for b in 0..batch {
        let ys = y.sample_mut(b);
        let mut offset = 0;
        for p in parts {
            let s = p.sample(b);
            ys[offset..offset + s.len()].copy_from_slice(s);
            offset += s.len();
        }
    }
    y
}
