//! Layered block graphs and the trainable networks built from them.
//!
//! A graph is a sequence of positions. Position 0 holds input blocks that read
//! (a channel subset of) the raw sample; each later block reads the
//! concatenation of a list of blocks from the position directly before it.
//! The last position holds exactly one block, the output block.

use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    build, count_params, AuditEntry, FormulaInputs, LayerCache, LayerSpec, LayerState, Mode, Param,
    ParamAudit,
};
use crate::scalar::Scalar;
use crate::tensor::{concat, concat_backward, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSource {
    /// Reads the raw sample, optionally restricted to some channels.
    Input { channels: Option<Vec<usize>> },
    /// Reads the concatenated outputs of these blocks at the previous position.
    Blocks(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub source: BlockSource,
    pub frozen: bool,
    pub cycle_added: usize,
}

impl BlockSpec {
    pub fn new(name: &str, layers: Vec<LayerSpec>, source: BlockSource) -> Self {
        Self {
            name: name.to_string(),
            layers,
            source,
            frozen: false,
            cycle_added: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainDefaults {
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub name: String,
    /// Per-sample input shape `[steps, channels]`.
    pub input_shape: Vec<usize>,
    pub positions: Vec<Vec<BlockSpec>>,
    pub output_len: usize,
    pub train: TrainDefaults,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub block: String,
    pub layer: String,
    pub shape: Vec<usize>,
}

/// Input and per-layer output shapes of every block.
#[derive(Debug, Clone)]
pub struct BlockShapes {
    pub input: Vec<usize>,
    pub layers: Vec<Vec<usize>>,
}

impl BlockShapes {
    pub fn output(&self) -> &[usize] {
        self.layers.last().unwrap_or(&self.input)
    }
}

impl ModelGraph {
    pub fn output_block(&self) -> &BlockSpec {
        &self.positions.last().expect("graph has positions")[0]
    }

    /// Symbolic shape propagation; fails on inconsistent wiring.
    pub fn block_shapes(&self) -> Result<Vec<Vec<BlockShapes>>> {
        let wiring = |msg: String| Error::config(format!("graph `{}`: {msg}", self.name));
        if self.input_shape.len() != 2 {
            return Err(wiring(format!("input shape {:?} is not [steps, channels]", self.input_shape)));
        }
        match self.positions.last() {
            Some(last) if last.len() == 1 => {}
            _ => return Err(wiring("the final position must hold exactly one output block".into())),
        }
        let mut all: Vec<Vec<BlockShapes>> = Vec::with_capacity(self.positions.len());
        for (p, blocks) in self.positions.iter().enumerate() {
            if blocks.is_empty() {
                return Err(wiring(format!("position {p} is empty")));
            }
            let mut shapes = Vec::with_capacity(blocks.len());
            for block in blocks {
                let input = match (&block.source, p) {
                    (BlockSource::Input { channels }, 0) => match channels {
                        None => self.input_shape.clone(),
                        Some(ch) => {
                            if ch.is_empty() || ch.iter().any(|&c| c >= self.input_shape[1]) {
                                return Err(wiring(format!(
                                    "block `{}` selects channels {ch:?} of {:?}",
                                    block.name, self.input_shape
                                )));
                            }
                            vec![self.input_shape[0], ch.len()]
                        }
                    },
                    (BlockSource::Blocks(src), p) if p > 0 => {
                        let prev = &all[p - 1];
                        if src.is_empty() || src.iter().any(|&s| s >= prev.len()) {
                            return Err(wiring(format!(
                                "block `{}` reads missing sources {src:?}",
                                block.name
                            )));
                        }
                        let outs: Vec<&[usize]> = src.iter().map(|&s| prev[s].output()).collect();
                        let lead = &outs[0][..outs[0].len() - 1];
                        if outs.iter().any(|o| &o[..o.len() - 1] != lead) {
                            return Err(wiring(format!(
                                "block `{}` concatenates incompatible shapes {outs:?}",
                                block.name
                            )));
                        }
                        let mut s = lead.to_vec();
                        s.push(outs.iter().map(|o| o[o.len() - 1]).sum());
                        s
                    }
                    _ => {
                        return Err(wiring(format!(
                            "block `{}` at position {p} has the wrong kind of source",
                            block.name
                        )))
                    }
                };
                let mut layers = Vec::with_capacity(block.layers.len());
                let mut cur = input.clone();
                for spec in &block.layers {
                    cur = spec.output_shape(&cur)?;
                    layers.push(cur.clone());
                }
                shapes.push(BlockShapes { input, layers });
            }
            all.push(shapes);
        }
        let out = all.last().unwrap()[0].output();
        if out.iter().product::<usize>() != self.output_len {
            return Err(wiring(format!(
                "output shape {out:?} does not hold {} values",
                self.output_len
            )));
        }
        Ok(all)
    }

    /// Every intermediate shape, starting with the raw input.
    pub fn shape_trace(&self) -> Result<Vec<TraceEntry>> {
        let shapes = self.block_shapes()?;
        let mut trace = vec![TraceEntry {
            block: "input".into(),
            layer: "input".into(),
            shape: self.input_shape.clone(),
        }];
        let mut names = LayerNamer::default();
        for (blocks, block_shapes) in self.positions.iter().zip(&shapes) {
            for (block, bs) in blocks.iter().zip(block_shapes) {
                for (spec, shape) in block.layers.iter().zip(&bs.layers) {
                    trace.push(TraceEntry {
                        block: block.name.clone(),
                        layer: names.next(spec),
                        shape: shape.clone(),
                    });
                }
            }
        }
        Ok(trace)
    }

    pub fn audit(&self) -> Result<ParamAudit> {
        let shapes = self.block_shapes()?;
        let mut names = LayerNamer::default();
        let mut entries = Vec::new();
        for (blocks, block_shapes) in self.positions.iter().zip(&shapes) {
            for (block, bs) in blocks.iter().zip(block_shapes) {
                let mut input = bs.input.clone();
                for (spec, out) in block.layers.iter().zip(&bs.layers) {
                    let d = *input.last().expect("non-empty shape");
                    entries.push(AuditEntry {
                        block: block.name.clone(),
                        layer: names.next(spec),
                        output_shape: out.clone(),
                        inputs: FormulaInputs::for_spec(spec, d),
                        params: count_params(spec, d),
                    });
                    input = out.clone();
                }
            }
        }
        Ok(ParamAudit::from_entries(entries))
    }
}

/// Keras-style per-kind layer names: `dense`, `dense_1`, `dense_2`, ...
#[derive(Default)]
struct LayerNamer {
    counts: std::collections::HashMap<&'static str, usize>,
}

impl LayerNamer {
    fn next(&mut self, spec: &LayerSpec) -> String {
        let kind = spec.kind_name();
        let n = self.counts.entry(kind).or_insert(0);
        let name = if *n == 0 {
            kind.to_string()
        } else {
            format!("{kind}_{n}")
        };
        *n += 1;
        name
    }
}

// ---------------------------------------------------------------------------
// network

#[derive(Debug, Clone, PartialEq)]
pub struct BlockState<T> {
    pub spec: BlockSpec,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerState<T>>,
}

impl<T: Scalar> BlockState<T> {
    pub fn build(spec: &BlockSpec, input_shape: &[usize], rng: &mut dyn RngCore) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut cur = input_shape.to_vec();
        for ls in &spec.layers {
            let mut layer = build::<T>(ls, &cur, rng)?;
            layer.frozen = spec.frozen;
            cur = layer.output_shape.clone();
            layers.push(layer);
        }
        Ok(Self {
            spec: spec.clone(),
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map_or(&self.input_shape, |l| &l.output_shape)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.spec.frozen = frozen;
        for l in &mut self.layers {
            l.frozen = frozen;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(|l| l.num_scalars()).sum()
    }
}

/// Location of one parameter tensor in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId {
    pub position: usize,
    pub block: usize,
    pub layer: usize,
    pub param: usize,
}

/// Trainable instance of a [`ModelGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub output_len: usize,
    pub train: TrainDefaults,
    pub positions: Vec<Vec<BlockState<T>>>,
}

/// Per-block layer caches from one forward pass.
pub struct NetCache<T> {
    layers: Vec<Vec<Vec<LayerCache<T>>>>,
}

impl<T: Scalar> Network<T> {
    pub fn build(graph: &ModelGraph, rng: &mut dyn RngCore) -> Result<Self> {
        let shapes = graph.block_shapes()?;
        let mut positions = Vec::with_capacity(graph.positions.len());
        for (blocks, bs) in graph.positions.iter().zip(&shapes) {
            let built = blocks
                .iter()
                .zip(bs)
                .map(|(b, s)| BlockState::build(b, &s.input, rng))
                .collect::<Result<Vec<_>>>()?;
            positions.push(built);
        }
        Ok(Self {
            name: graph.name.clone(),
            input_shape: graph.input_shape.clone(),
            output_len: graph.output_len,
            train: graph.train,
            positions,
        })
    }

    pub fn graph(&self) -> ModelGraph {
        ModelGraph {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            positions: self
                .positions
                .iter()
                .map(|bs| bs.iter().map(|b| b.spec.clone()).collect())
                .collect(),
            output_len: self.output_len,
            train: self.train,
        }
    }

    pub fn output_position(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn num_scalars(&self) -> usize {
        self.positions.iter().flatten().map(|b| b.num_scalars()).sum()
    }

    fn block_input(
        &self,
        p: usize,
        block: &BlockState<T>,
        x: &Tensor<T>,
        outputs: &[Vec<Tensor<T>>],
    ) -> Result<Tensor<T>> {
        match &block.spec.source {
            BlockSource::Input { channels: None } => Ok(x.clone()),
            BlockSource::Input {
                channels: Some(ch),
            } => {
                let (steps, c) = (x.shape()[0], x.shape()[1]);
                let mut data = Vec::with_capacity(steps * ch.len());
                for t in 0..steps {
                    for &k in ch {
                        data.push(x.data()[t * c + k]);
                    }
                }
                Tensor::new(vec![steps, ch.len()], data)
            }
            BlockSource::Blocks(src) => {
                let parts: Vec<&Tensor<T>> = src.iter().map(|&s| &outputs[p - 1][s]).collect();
                concat(&parts)
            }
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<T>, NetCache<T>)> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: self.input_shape.clone(),
                rhs: x.shape().to_vec(),
            });
        }
        let mut outputs: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.positions.len());
        let mut caches = Vec::with_capacity(self.positions.len());
        for (p, blocks) in self.positions.iter().enumerate() {
            let mut outs = Vec::with_capacity(blocks.len());
            let mut block_caches = Vec::with_capacity(blocks.len());
            for block in blocks {
                let mut cur = self.block_input(p, block, x, &outputs)?;
                let mut lc = Vec::with_capacity(block.layers.len());
                for layer in &block.layers {
                    let (y, c) = layer.forward(&cur, mode, rng)?;
                    cur = y;
                    lc.push(c);
                }
                outs.push(cur);
                block_caches.push(lc);
            }
            outputs.push(outs);
            caches.push(block_caches);
        }
        let out = outputs.pop().unwrap().pop().unwrap();
        let len = out.len();
        Ok((out.reshape(&[len])?, NetCache { layers: caches }))
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut noop = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(x, Mode::Infer, &mut noop)?.0)
    }

    /// Concrete per-layer shapes from a real forward pass.
    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<Vec<Vec<usize>>> {
        let mut noop = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut shapes = vec![x.shape().to_vec()];
        let mut outputs: Vec<Vec<Tensor<T>>> = Vec::new();
        for (p, blocks) in self.positions.iter().enumerate() {
            let mut outs = Vec::new();
            for block in blocks {
                let mut cur = self.block_input(p, block, x, &outputs)?;
                for layer in &block.layers {
                    cur = layer.forward(&cur, Mode::Infer, &mut noop)?.0;
                    shapes.push(cur.shape().to_vec());
                }
                outs.push(cur);
            }
            outputs.push(outs);
        }
        Ok(shapes)
    }

    /// Parameter gradients in canonical order for a gradient on the flat
    /// network output.
    pub fn backward(&self, cache: &NetCache<T>, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if grad_out.len() != self.output_len {
            return Err(Error::ShapeMismatch {
                op: "network backward",
                lhs: vec![self.output_len],
                rhs: grad_out.shape().to_vec(),
            });
        }
        let n_pos = self.positions.len();
        let mut out_grads: Vec<Vec<Option<Tensor<T>>>> = self
            .positions
            .iter()
            .map(|bs| vec![None; bs.len()])
            .collect();
        let out_shape = self.positions[n_pos - 1][0].output_shape().to_vec();
        out_grads[n_pos - 1][0] = Some(grad_out.clone().reshape(&out_shape)?);
        let mut param_grads: Vec<Vec<Vec<Vec<Tensor<T>>>>> = self
            .positions
            .iter()
            .map(|bs| bs.iter().map(|b| vec![Vec::new(); b.layers.len()]).collect())
            .collect();

        for p in (0..n_pos).rev() {
            for (b, block) in self.positions[p].iter().enumerate() {
                let mut g = match out_grads[p][b].take() {
                    Some(g) => g,
                    // nothing downstream reads this block
                    None => Tensor::zeros(block.output_shape()),
                };
                for (l, layer) in block.layers.iter().enumerate().rev() {
                    let (gi, gp) = layer.backward(&cache.layers[p][b][l], &g)?;
                    param_grads[p][b][l] = gp;
                    g = gi;
                }
                if let BlockSource::Blocks(src) = &block.spec.source {
                    let widths: Vec<usize> = src
                        .iter()
                        .map(|&s| *self.positions[p - 1][s].output_shape().last().unwrap())
                        .collect();
                    for (&s, part) in src.iter().zip(concat_backward(&widths, &g)?) {
                        match &mut out_grads[p - 1][s] {
                            Some(acc) => acc.add_assign(&part)?,
                            slot @ None => *slot = Some(part),
                        }
                    }
                }
            }
        }
        Ok(param_grads.into_iter().flatten().flatten().flatten().collect())
    }

    /// Every parameter in canonical order with its block's frozen flag.
    pub fn params(&self) -> Vec<(ParamId, &Param<T>, bool)> {
        let mut out = Vec::new();
        for (p, blocks) in self.positions.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                for (l, layer) in block.layers.iter().enumerate() {
                    for (i, param) in layer.params.iter().enumerate() {
                        let id = ParamId {
                            position: p,
                            block: b,
                            layer: l,
                            param: i,
                        };
                        out.push((id, param, layer.frozen));
                    }
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&mut Param<T>, bool)> {
        let mut out = Vec::new();
        for block in self.positions.iter_mut().flatten() {
            for layer in &mut block.layers {
                let frozen = layer.frozen;
                for param in &mut layer.params {
                    out.push((param, frozen));
                }
            }
        }
        out
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.positions[id.position][id.block].layers[id.layer].params[id.param]
    }

    pub fn masked_count(&self) -> usize {
        self.params().iter().map(|(_, p, _)| p.masked_count()).sum()
    }

    /// Copy with every mask dropped; masked weights keep their stored zeros.
    pub fn without_masks(&self) -> Self {
        let mut copy = self.clone();
        for (p, _) in copy.params_mut() {
            p.mask = None;
        }
        copy
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(units: usize, activation: Activation) -> LayerSpec {
        LayerSpec::Dense { units, activation }
    }

    fn two_branch() -> ModelGraph {
        ModelGraph {
            name: "two_branch".into(),
            input_shape: vec![1, 3],
            positions: vec![
                vec![
                    BlockSpec::new(
                        "a",
                        vec![LayerSpec::Flatten, dense(4, Activation::Tanh)],
                        BlockSource::Input { channels: None },
                    ),
                    BlockSpec::new(
                        "b",
                        vec![LayerSpec::Flatten, dense(2, Activation::Sigmoid)],
                        BlockSource::Input {
                            channels: Some(vec![0, 2]),
                        },
                    ),
                ],
                vec![
                    BlockSpec::new("m1", vec![dense(3, Activation::Tanh)], BlockSource::Blocks(vec![0, 1])),
                    BlockSpec::new("m2", vec![dense(2, Activation::Tanh)], BlockSource::Blocks(vec![1])),
                ],
                vec![BlockSpec::new(
                    "out",
                    vec![dense(2, Activation::Linear)],
                    BlockSource::Blocks(vec![0, 1]),
                )],
            ],
            output_len: 2,
            train: TrainDefaults {
                epochs: 1,
                batch_size: 1,
            },
        }
    }

    #[test]
    fn wiring_widths_are_sums_of_sources() {
        let shapes = two_branch().block_shapes().unwrap();
        assert_eq!(shapes[1][0].input, vec![6]);
        assert_eq!(shapes[1][1].input, vec![2]);
        assert_eq!(shapes[2][0].input, vec![5]);
    }

    #[test]
    fn bad_wiring_is_rejected() {
        let mut g = two_branch();
        g.positions[1][0].source = BlockSource::Blocks(vec![5]);
        assert!(g.block_shapes().is_err());
        let mut g = two_branch();
        g.output_len = 3;
        assert!(g.block_shapes().is_err());
    }

    #[test]
    fn multi_branch_gradients_match_finite_differences() {
        let g = two_branch();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net: Network<f64> = Network::build(&g, &mut rng).unwrap();
        let x = Tensor::from_f64(&[1, 3], &[0.3, -0.7, 0.5]).unwrap();
        let w = Tensor::from_f64(&[2], &[0.9, -1.3]).unwrap();
        let loss = |n: &Network<f64>| n.predict(&x).unwrap().mul(&w).unwrap().sum();
        let (_, cache) = net.forward(&x, Mode::Train, &mut rng).unwrap();
        let grads = net.backward(&cache, &w).unwrap();
        let ids: Vec<ParamId> = net.params().iter().map(|(id, _, _)| *id).collect();
        assert_eq!(ids.len(), grads.len());
        for (id, g) in ids.iter().zip(&grads) {
            for j in 0..g.len() {
                let mut a = net.clone();
                a.param_mut(*id).value.data_mut()[j] += 1e-5;
                let mut b = net.clone();
                b.param_mut(*id).value.data_mut()[j] -= 1e-5;
                let fd = (loss(&a) - loss(&b)) / 2e-5;
                let an = g.data()[j];
                assert!((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6) <= 1e-4, "{id:?}[{j}] {an} vs {fd}");
            }
        }
        let _ = rng.random::<u8>();
    }

    #[test]
    fn forward_trace_agrees_with_symbolic_trace() {
        let g = two_branch();
        let net: Network<f64> = Network::build(&g, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let concrete = net.forward_trace(&Tensor::zeros(&[1, 3])).unwrap();
        let symbolic: Vec<Vec<usize>> = g.shape_trace().unwrap().into_iter().map(|e| e.shape).collect();
        assert_eq!(concrete, symbolic);
    }
}
