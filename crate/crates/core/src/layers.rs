//! Layer specifications, trainable layer state, and closed-form parameter
//! accounting.
//!
//! Every layer consumes one per-sample tensor: rank 2 `[steps, channels]` for
//! sequence layers, rank 1 `[width]` for dense layers. Batching happens one
//! level up by accumulating per-sample gradients.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    activate, activation_backward, conv1d, conv1d_backward, matmul, matmul_backward, maxpool1d,
    maxpool1d_backward, pad_rows, pad_rows_backward, sigmoid, Activation, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        filters: usize,
        kernel: usize,
        activation: Activation,
    },
    /// Window 2, stride 2. A length-1 input passes through unchanged.
    MaxPool1d,
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
    },
    Dropout {
        rate: f64,
    },
    Lstm {
        units: usize,
        return_sequences: bool,
    },
    RepeatVector {
        times: usize,
    },
    TimeDistributedDense {
        units: usize,
        activation: Activation,
    },
    /// Convolutional LSTM over `subsequences` equal slices of the input
    /// sequence; each slice is a 1-D signal the gates convolve.
    ConvLstm1d {
        filters: usize,
        kernel: usize,
        subsequences: usize,
    },
    /// Marks a block that merges several sources; identity on its
    /// already-concatenated input.
    Concatenate,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::MaxPool1d => "max_pooling1d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Lstm { .. } => "lstm",
            LayerSpec::RepeatVector { .. } => "repeat_vector",
            LayerSpec::TimeDistributedDense { .. } => "time_distributed",
            LayerSpec::ConvLstm1d { .. } => "conv_lstm1d",
            LayerSpec::Concatenate => "concatenate",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("{} {name} must be ≥ 1", self.kind_name())))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv1d {
                filters, kernel, ..
            } => {
                positive("filters", filters)?;
                positive("kernel", kernel)
            }
            LayerSpec::Dense { units, .. } | LayerSpec::TimeDistributedDense { units, .. } => {
                positive("units", units)
            }
            LayerSpec::Lstm { units, .. } => positive("units", units),
            LayerSpec::RepeatVector { times } => positive("times", times),
            LayerSpec::ConvLstm1d {
                filters,
                kernel,
                subsequences,
            } => {
                positive("filters", filters)?;
                positive("kernel", kernel)?;
                positive("subsequences", subsequences)
            }
            LayerSpec::Dropout { rate } => {
                if (0.0..1.0).contains(&rate) {
                    Ok(())
                } else {
                    Err(Error::config(format!("dropout rate {rate} outside [0, 1)")))
                }
            }
            LayerSpec::MaxPool1d | LayerSpec::Flatten | LayerSpec::Concatenate => Ok(()),
        }
    }

    /// Per-sample output shape for a given per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let bad = |reason: String| Error::InvalidShape {
            shape: input.to_vec(),
            reason,
        };
        let rank2 = |op: &str| -> Result<(usize, usize)> {
            match *input {
                [a, b] => Ok((a, b)),
                _ => Err(bad(format!("{op} expects [steps, channels]"))),
            }
        };
        let rank1 = |op: &str| -> Result<usize> {
            match *input {
                [a] => Ok(a),
                _ => Err(bad(format!("{op} expects a flat vector"))),
            }
        };
        match *self {
            LayerSpec::Conv1d {
                filters, kernel, ..
            } => {
                let (len, _) = rank2("conv1d")?;
                if len < kernel {
                    return Err(Error::Degenerate {
                        op: "conv1d",
                        reason: format!("input length {len} is shorter than kernel size {kernel}"),
                    });
                }
                Ok(vec![len - kernel + 1, filters])
            }
            LayerSpec::MaxPool1d => {
                let (len, c) = rank2("max_pooling1d")?;
                Ok(vec![(len / 2).max(1), c])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { units, .. } => {
                rank1("dense")?;
                Ok(vec![units])
            }
            LayerSpec::Dropout { .. } | LayerSpec::Concatenate => Ok(input.to_vec()),
            LayerSpec::Lstm {
                units,
                return_sequences,
            } => {
                let (steps, _) = rank2("lstm")?;
                Ok(if return_sequences {
                    vec![steps, units]
                } else {
                    vec![units]
                })
            }
            LayerSpec::RepeatVector { times } => Ok(vec![times, rank1("repeat_vector")?]),
            LayerSpec::TimeDistributedDense { units, .. } => {
                let (steps, _) = rank2("time_distributed")?;
                Ok(vec![steps, units])
            }
            LayerSpec::ConvLstm1d {
                filters,
                kernel,
                subsequences,
            } => {
                let (steps, _) = rank2("conv_lstm1d")?;
                if steps % subsequences != 0 {
                    return Err(bad(format!(
                        "{steps} steps do not split into {subsequences} subsequences"
                    )));
                }
                let len = steps / subsequences;
                if len < kernel {
                    return Err(Error::Degenerate {
                        op: "conv_lstm1d",
                        reason: format!("subsequence length {len} is shorter than kernel {kernel}"),
                    });
                }
                Ok(vec![len - kernel + 1, filters])
            }
        }
    }

    /// Copy of this spec with every width halved, rounding up.
    pub fn halved(&self) -> LayerSpec {
        let half = |n: usize| n.div_ceil(2);
        match self.clone() {
            LayerSpec::Conv1d {
                filters,
                kernel,
                activation,
            } => LayerSpec::Conv1d {
                filters: half(filters),
                kernel,
                activation,
            },
            LayerSpec::Dense { units, activation } => LayerSpec::Dense {
                units: half(units),
                activation,
            },
            LayerSpec::TimeDistributedDense { units, activation } => {
                LayerSpec::TimeDistributedDense {
                    units: half(units),
                    activation,
                }
            }
            LayerSpec::Lstm {
                units,
                return_sequences,
            } => LayerSpec::Lstm {
                units: half(units),
                return_sequences,
            },
            LayerSpec::ConvLstm1d {
                filters,
                kernel,
                subsequences,
            } => LayerSpec::ConvLstm1d {
                filters: half(filters),
                kernel,
                subsequences,
            },
            other => other,
        }
    }
}

/// Trainable-parameter count from the closed-form formulas.
///
/// `d` is the size of the input's final axis: channels for sequence layers,
/// the vector width for dense layers.
pub fn count_params(spec: &LayerSpec, d: usize) -> usize {
    match *spec {
        // (k·d + 1)·f
        LayerSpec::Conv1d {
            filters, kernel, ..
        } => (kernel * d + 1) * filters,
        // p_prev·p_curr + p_curr
        LayerSpec::Dense { units, .. } | LayerSpec::TimeDistributedDense { units, .. } => {
            d * units + units
        }
        // 4·((x + y)·x + x)
        LayerSpec::Lstm { units, .. } => 4 * ((units + d) * units + units),
        // 4·x·(k·(Cin + x) + 1)
        LayerSpec::ConvLstm1d {
            filters, kernel, ..
        } => 4 * filters * (kernel * (d + filters) + 1),
        LayerSpec::MaxPool1d
        | LayerSpec::Flatten
        | LayerSpec::Dropout { .. }
        | LayerSpec::RepeatVector { .. }
        | LayerSpec::Concatenate => 0,
    }
}

/// Symbols that went into a layer's parameter count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "formula", rename_all = "snake_case")]
pub enum FormulaInputs {
    Conv { k: usize, d: usize, f: usize },
    Dense { p_prev: usize, p_curr: usize },
    Lstm { x: usize, y: usize },
    ConvLstm { k: usize, d: usize, x: usize },
    None,
}

impl FormulaInputs {
    pub fn for_spec(spec: &LayerSpec, d: usize) -> Self {
        match *spec {
            LayerSpec::Conv1d {
                filters, kernel, ..
            } => FormulaInputs::Conv {
                k: kernel,
                d,
                f: filters,
            },
            LayerSpec::Dense { units, .. } | LayerSpec::TimeDistributedDense { units, .. } => {
                FormulaInputs::Dense {
                    p_prev: d,
                    p_curr: units,
                }
            }
            LayerSpec::Lstm { units, .. } => FormulaInputs::Lstm { x: units, y: d },
            LayerSpec::ConvLstm1d {
                filters, kernel, ..
            } => FormulaInputs::ConvLstm {
                k: kernel,
                d,
                x: filters,
            },
            _ => FormulaInputs::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub block: String,
    pub layer: String,
    pub output_shape: Vec<usize>,
    pub inputs: FormulaInputs,
    pub params: usize,
}

/// Per-layer parameter counts laid out like a model's parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamAudit {
    pub entries: Vec<AuditEntry>,
    pub total: usize,
}

impl ParamAudit {
    pub fn from_entries(entries: Vec<AuditEntry>) -> Self {
        let total = entries.iter().map(|e| e.params).sum();
        Self { entries, total }
    }
}

// ---------------------------------------------------------------------------
// state

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// `true` marks a pruned position. Pruned positions hold exactly zero.
    pub mask: Option<Vec<bool>>,
    /// Weights and kernels rank for magnitude pruning; biases do not.
    pub prunable: bool,
}

impl<T: Scalar> Param<T> {
    fn new(name: &str, value: Tensor<T>, prunable: bool) -> Self {
        Self {
            name: name.to_string(),
            value,
            mask: None,
            prunable,
        }
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m[i])
    }

    pub fn masked_count(&self) -> usize {
        self.mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&b| b).count())
    }

    /// Marks position `i` pruned and zeroes it.
    pub fn mask_position(&mut self, i: usize) {
        let len = self.value.len();
        self.mask.get_or_insert_with(|| vec![false; len])[i] = true;
        self.value.data_mut()[i] = T::zero();
    }

    /// Re-zeroes every masked position.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (v, &m) in self.value.data_mut().iter_mut().zip(mask) {
                if m {
                    *v = T::zero();
                }
            }
        }
    }

    pub fn zero_masked(&self, grad: &mut Tensor<T>) {
        if let Some(mask) = &self.mask {
            for (g, &m) in grad.data_mut().iter_mut().zip(mask) {
                if m {
                    *g = T::zero();
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    pub spec: LayerSpec,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub params: Vec<Param<T>>,
    pub frozen: bool,
}

fn glorot<T: Scalar>(
    rng: &mut dyn RngCore,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape")
}

const GATES: [&str; 4] = ["forget", "input", "cell", "output"];

/// Builds a layer with Glorot-uniform weights and zero biases (forget-gate
/// biases start at 1).
pub fn build<T: Scalar>(
    spec: &LayerSpec,
    input_shape: &[usize],
    rng: &mut dyn RngCore,
) -> Result<LayerState<T>> {
    let output_shape = spec.output_shape(input_shape)?;
    let d = *input_shape.last().expect("validated shape");
    let mut params = Vec::new();
    match *spec {
        LayerSpec::Conv1d {
            filters, kernel, ..
        } => {
            params.push(Param::new(
                "kernel",
                glorot(rng, &[filters, kernel, d], kernel * d, kernel * filters),
                true,
            ));
            params.push(Param::new("bias", Tensor::zeros(&[filters]), false));
        }
        LayerSpec::Dense { units, .. } | LayerSpec::TimeDistributedDense { units, .. } => {
            params.push(Param::new("weight", glorot(rng, &[d, units], d, units), true));
            params.push(Param::new("bias", Tensor::zeros(&[units]), false));
        }
        LayerSpec::Lstm { units, .. } => {
            for gate in GATES {
                let w = glorot(rng, &[d + units, units], d + units, units);
                params.push(Param::new(&format!("w_{gate}"), w, true));
                let b = if gate == "forget" {
                    Tensor::filled(&[units], T::one())
                } else {
                    Tensor::zeros(&[units])
                };
                params.push(Param::new(&format!("b_{gate}"), b, false));
            }
        }
        LayerSpec::ConvLstm1d {
            filters, kernel, ..
        } => {
            for gate in GATES {
                let wx = glorot(rng, &[filters, kernel, d], kernel * d, kernel * filters);
                let wh = glorot(
                    rng,
                    &[filters, kernel, filters],
                    kernel * filters,
                    kernel * filters,
                );
                params.push(Param::new(&format!("wx_{gate}"), wx, true));
                params.push(Param::new(&format!("wh_{gate}"), wh, true));
                let b = if gate == "forget" {
                    Tensor::filled(&[filters], T::one())
                } else {
                    Tensor::zeros(&[filters])
                };
                params.push(Param::new(&format!("b_{gate}"), b, false));
            }
        }
        _ => {}
    }
    Ok(LayerState {
        spec: spec.clone(),
        input_shape: input_shape.to_vec(),
        output_shape,
        params,
        frozen: false,
    })
}

// ---------------------------------------------------------------------------
// caches

#[derive(Debug, Clone)]
struct GateActs<T> {
    f: Vec<T>,
    i: Vec<T>,
    g: Vec<T>,
    o: Vec<T>,
    c_prev: Vec<T>,
    tanh_c: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LstmStep<T> {
    z: Tensor<T>,
    acts: GateActs<T>,
}

#[derive(Debug, Clone)]
pub struct ConvLstmStep<T> {
    x: Tensor<T>,
    h_padded: Tensor<T>,
    acts: GateActs<T>,
}

/// Activations a layer's backward pass needs, tagged by the producing kind.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Conv {
        input: Tensor<T>,
        pre: Tensor<T>,
        out: Tensor<T>,
    },
    Pool {
        argmax: Option<Vec<usize>>,
    },
    Flatten,
    Dense {
        input: Tensor<T>,
        pre: Tensor<T>,
        out: Tensor<T>,
    },
    Dropout {
        scale: Option<Vec<T>>,
    },
    Lstm {
        steps: Vec<LstmStep<T>>,
    },
    Repeat,
    TimeDistributed {
        input: Tensor<T>,
        pre: Tensor<T>,
        out: Tensor<T>,
    },
    ConvLstm {
        steps: Vec<ConvLstmStep<T>>,
    },
    Concat,
}

impl<T> LayerCache<T> {
    fn kind_name(&self) -> &'static str {
        match self {
            LayerCache::Conv { .. } => "conv1d",
            LayerCache::Pool { .. } => "max_pooling1d",
            LayerCache::Flatten => "flatten",
            LayerCache::Dense { .. } => "dense",
            LayerCache::Dropout { .. } => "dropout",
            LayerCache::Lstm { .. } => "lstm",
            LayerCache::Repeat => "repeat_vector",
            LayerCache::TimeDistributed { .. } => "time_distributed",
            LayerCache::ConvLstm { .. } => "conv_lstm1d",
            LayerCache::Concat => "concatenate",
        }
    }
}

// ---------------------------------------------------------------------------
// forward / backward

fn cell_forward<T: Scalar>(
    a_f: &[T],
    a_i: &[T],
    a_g: &[T],
    a_o: &[T],
    c_prev: &[T],
) -> (GateActs<T>, Vec<T>, Vec<T>) {
    let f: Vec<T> = a_f.iter().map(|&v| sigmoid(v)).collect();
    let i: Vec<T> = a_i.iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<T> = a_g.iter().map(|&v| v.tanh()).collect();
    let o: Vec<T> = a_o.iter().map(|&v| sigmoid(v)).collect();
    let c: Vec<T> = (0..f.len()).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
    let tanh_c: Vec<T> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<T> = o.iter().zip(&tanh_c).map(|(&o, &t)| o * t).collect();
    let acts = GateActs {
        f,
        i,
        g,
        o,
        c_prev: c_prev.to_vec(),
        tanh_c,
    };
    (acts, c, h)
}

/// Returns pre-activation gradients `[f, i, g, o]` and the gradient on
/// the previous cell state.
fn cell_backward<T: Scalar>(acts: &GateActs<T>, dh: &[T], dc_next: &[T]) -> ([Vec<T>; 4], Vec<T>) {
    let one = T::one();
    let n = dh.len();
    let mut da = [vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]];
    let mut dc_prev = vec![T::zero(); n];
    for j in 0..n {
        let (f, i, g, o, t) = (acts.f[j], acts.i[j], acts.g[j], acts.o[j], acts.tanh_c[j]);
        let dc = dh[j] * o * (one - t * t) + dc_next[j];
        da[0][j] = dc * acts.c_prev[j] * f * (one - f);
        da[1][j] = dc * g * i * (one - i);
        da[2][j] = dc * i * (one - g * g);
        da[3][j] = dh[j] * t * o * (one - o);
        dc_prev[j] = dc * f;
    }
    (da, dc_prev)
}

impl<T: Scalar> LayerState<T> {
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: self.spec.kind_name(),
                lhs: self.input_shape.clone(),
                rhs: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(
        &self,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor<T>, LayerCache<T>)> {
        self.check_input(input)?;
        let p = |i: usize| &self.params[i].value;
        match self.spec {
            LayerSpec::Conv1d { activation, .. } => {
                let pre = conv1d(input, p(0), p(1))?;
                let out = activate(activation, &pre);
                Ok((
                    out.clone(),
                    LayerCache::Conv {
                        input: input.clone(),
                        pre,
                        out,
                    },
                ))
            }
            LayerSpec::MaxPool1d => {
                if input.shape()[0] == 1 {
                    return Ok((input.clone(), LayerCache::Pool { argmax: None }));
                }
                let pooled = maxpool1d(input)?;
                Ok((
                    pooled.output,
                    LayerCache::Pool {
                        argmax: Some(pooled.argmax),
                    },
                ))
            }
            LayerSpec::Flatten => Ok((
                input.clone().reshape(&self.output_shape)?,
                LayerCache::Flatten,
            )),
            LayerSpec::Dense { activation, .. } => {
                let row = input.clone().reshape(&[1, input.len()])?;
                let pre = add_row_bias(matmul(&row, p(0))?, p(1))?;
                let out = activate(activation, &pre);
                Ok((
                    out.clone().reshape(&self.output_shape)?,
                    LayerCache::Dense {
                        input: row,
                        pre,
                        out,
                    },
                ))
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Infer || rate == 0.0 {
                    return Ok((input.clone(), LayerCache::Dropout { scale: None }));
                }
                let keep = T::of(1.0 / (1.0 - rate));
                let scale: Vec<T> = (0..input.len())
                    .map(|_| {
                        if rng.random::<f64>() < rate {
                            T::zero()
                        } else {
                            keep
                        }
                    })
                    .collect();
                let out = Tensor::new(input.shape().to_vec(), scale.clone())?.mul(input)?;
                Ok((out, LayerCache::Dropout { scale: Some(scale) }))
            }
            LayerSpec::Lstm {
                units,
                return_sequences,
            } => self.lstm_forward(input, units, return_sequences),
            LayerSpec::RepeatVector { .. } => {
                let n = input.len();
                let times = self.output_shape[0];
                let data = input.data().repeat(times);
                Ok((Tensor::new(vec![times, n], data)?, LayerCache::Repeat))
            }
            LayerSpec::TimeDistributedDense { activation, .. } => {
                let pre = add_row_bias(matmul(input, p(0))?, p(1))?;
                let out = activate(activation, &pre);
                Ok((
                    out.clone(),
                    LayerCache::TimeDistributed {
                        input: input.clone(),
                        pre,
                        out,
                    },
                ))
            }
            LayerSpec::ConvLstm1d {
                filters,
                kernel,
                subsequences,
            } => self.conv_lstm_forward(input, filters, kernel, subsequences),
            LayerSpec::Concatenate => Ok((input.clone(), LayerCache::Concat)),
        }
    }

    /// Returns `(grad_input, grad_params)` with `grad_params` aligned to
    /// `self.params`. Masked positions get zero gradient; a frozen layer
    /// reports all-zero parameter gradients.
    pub fn backward(
        &self,
        cache: &LayerCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if cache.kind_name() != self.spec.kind_name() {
            return Err(Error::StaleCache {
                layer: self.spec.kind_name().into(),
                cache: cache.kind_name().into(),
            });
        }
        if grad_out.shape() != self.output_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "layer backward",
                lhs: self.output_shape.clone(),
                rhs: grad_out.shape().to_vec(),
            });
        }
        let p = |i: usize| &self.params[i].value;
        let (grad_in, mut grads) = match (&self.spec, cache) {
            (LayerSpec::Conv1d { activation, .. }, LayerCache::Conv { input, pre, out }) => {
                let g = activation_backward(*activation, pre, out, grad_out)?;
                let (gi, gk, gb) = conv1d_backward(input, p(0), &g)?;
                (gi, vec![gk, gb])
            }
            (LayerSpec::MaxPool1d, LayerCache::Pool { argmax }) => match argmax {
                None => (grad_out.clone(), vec![]),
                Some(idx) => (maxpool1d_backward(&self.input_shape, idx, grad_out)?, vec![]),
            },
            (LayerSpec::Flatten, LayerCache::Flatten) => {
                (grad_out.clone().reshape(&self.input_shape)?, vec![])
            }
            (LayerSpec::Dense { activation, .. }, LayerCache::Dense { input, pre, out }) => {
                let g = grad_out.clone().reshape(out.shape())?;
                let g = activation_backward(*activation, pre, out, &g)?;
                let (gi, gw) = matmul_backward(input, p(0), &g)?;
                let gb = Tensor::vector(g.data().to_vec());
                (gi.reshape(&self.input_shape)?, vec![gw, gb])
            }
            (LayerSpec::Dropout { .. }, LayerCache::Dropout { scale }) => match scale {
                None => (grad_out.clone(), vec![]),
                Some(s) => (
                    Tensor::new(grad_out.shape().to_vec(), s.clone())?.mul(grad_out)?,
                    vec![],
                ),
            },
            (LayerSpec::Lstm { return_sequences, .. }, LayerCache::Lstm { steps }) => {
                self.lstm_backward(steps, grad_out, *return_sequences)?
            }
            (LayerSpec::RepeatVector { .. }, LayerCache::Repeat) => {
                let n = self.input_shape[0];
                let mut g = vec![T::zero(); n];
                for r in 0..grad_out.rows() {
                    for (a, &b) in g.iter_mut().zip(grad_out.row(r)) {
                        *a = *a + b;
                    }
                }
                (Tensor::vector(g), vec![])
            }
            (
                LayerSpec::TimeDistributedDense { activation, .. },
                LayerCache::TimeDistributed { input, pre, out },
            ) => {
                let g = activation_backward(*activation, pre, out, grad_out)?;
                let (gi, gw) = matmul_backward(input, p(0), &g)?;
                let units = g.last_dim();
                let mut gb = vec![T::zero(); units];
                for r in 0..g.rows() {
                    for (a, &b) in gb.iter_mut().zip(g.row(r)) {
                        *a = *a + b;
                    }
                }
                (gi, vec![gw, Tensor::vector(gb)])
            }
            (LayerSpec::ConvLstm1d { kernel, .. }, LayerCache::ConvLstm { steps }) => {
                self.conv_lstm_backward(steps, grad_out, *kernel)?
            }
            (LayerSpec::Concatenate, LayerCache::Concat) => (grad_out.clone(), vec![]),
            _ => unreachable!("cache kind checked above"),
        };
        for (param, grad) in self.params.iter().zip(grads.iter_mut()) {
            if self.frozen {
                *grad = Tensor::zeros(grad.shape());
            } else {
                param.zero_masked(grad);
            }
        }
        Ok((grad_in, grads))
    }

    fn lstm_forward(
        &self,
        input: &Tensor<T>,
        units: usize,
        return_sequences: bool,
    ) -> Result<(Tensor<T>, LayerCache<T>)> {
        let steps_n = input.shape()[0];
        let mut h = vec![T::zero(); units];
        let mut c = vec![T::zero(); units];
        let mut steps = Vec::with_capacity(steps_n);
        let mut seq = Vec::with_capacity(steps_n * units);
        for t in 0..steps_n {
            let mut zv = input.row(t).to_vec();
            zv.extend_from_slice(&h);
            let z = Tensor::new(vec![1, zv.len()], zv)?;
            let mut pre = Vec::with_capacity(4);
            for gate in 0..4 {
                let a = add_row_bias(
                    matmul(&z, &self.params[2 * gate].value)?,
                    &self.params[2 * gate + 1].value,
                )?;
                pre.push(a.into_data());
            }
            let (acts, c_new, h_new) = cell_forward(&pre[0], &pre[1], &pre[2], &pre[3], &c);
            c = c_new;
            h = h_new;
            seq.extend_from_slice(&h);
            steps.push(LstmStep { z, acts });
        }
        let out = if return_sequences {
            Tensor::new(vec![steps_n, units], seq)?
        } else {
            Tensor::vector(h)
        };
        Ok((out, LayerCache::Lstm { steps }))
    }

    fn lstm_backward(
        &self,
        steps: &[LstmStep<T>],
        grad_out: &Tensor<T>,
        return_sequences: bool,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (steps_n, y) = (self.input_shape[0], self.input_shape[1]);
        if steps.len() != steps_n {
            return Err(Error::StaleCache {
                layer: format!("lstm over {steps_n} steps"),
                cache: format!("lstm over {} steps", steps.len()),
            });
        }
        let units = self.params[1].value.len();
        let mut grads: Vec<Tensor<T>> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        let mut gx = vec![T::zero(); steps_n * y];
        let mut dh_next = vec![T::zero(); units];
        let mut dc_next = vec![T::zero(); units];
        for t in (0..steps_n).rev() {
            let step = &steps[t];
            let mut dh = dh_next.clone();
            if return_sequences {
                for (a, &b) in dh.iter_mut().zip(grad_out.row(t)) {
                    *a = *a + b;
                }
            } else if t == steps_n - 1 {
                for (a, &b) in dh.iter_mut().zip(grad_out.data()) {
                    *a = *a + b;
                }
            }
            let (da, dc_prev) = cell_backward(&step.acts, &dh, &dc_next);
            let mut dz = vec![T::zero(); y + units];
            for (gate, da_g) in da.into_iter().enumerate() {
                let da_g = Tensor::new(vec![1, units], da_g)?;
                let (gz, gw) = matmul_backward(&step.z, &self.params[2 * gate].value, &da_g)?;
                grads[2 * gate].add_assign(&gw)?;
                grads[2 * gate + 1].add_assign(&da_g.clone().reshape(&[units])?)?;
                for (a, &b) in dz.iter_mut().zip(gz.data()) {
                    *a = *a + b;
                }
            }
            gx[t * y..(t + 1) * y].copy_from_slice(&dz[..y]);
            dh_next = dz[y..].to_vec();
            dc_next = dc_prev;
        }
        Ok((Tensor::new(self.input_shape.clone(), gx)?, grads))
    }

    fn conv_lstm_forward(
        &self,
        input: &Tensor<T>,
        filters: usize,
        kernel: usize,
        subsequences: usize,
    ) -> Result<(Tensor<T>, LayerCache<T>)> {
        let (steps_n, cin) = (input.shape()[0], input.shape()[1]);
        let len = steps_n / subsequences;
        let out_len = self.output_shape[0];
        let (pad_l, pad_r) = same_padding(kernel);
        let zero_bias = Tensor::zeros(&[filters]);
        let mut h = Tensor::zeros(&[out_len, filters]);
        let mut c = vec![T::zero(); out_len * filters];
        let mut steps = Vec::with_capacity(subsequences);
        for s in 0..subsequences {
            let x = Tensor::new(
                vec![len, cin],
                input.data()[s * len * cin..(s + 1) * len * cin].to_vec(),
            )?;
            let h_padded = pad_rows(&h, pad_l, pad_r)?;
            let mut pre = Vec::with_capacity(4);
            for gate in 0..4 {
                let from_x = conv1d(&x, &self.params[3 * gate].value, &self.params[3 * gate + 2].value)?;
                let from_h = conv1d(&h_padded, &self.params[3 * gate + 1].value, &zero_bias)?;
                pre.push(from_x.add(&from_h)?.into_data());
            }
            let (acts, c_new, h_new) = cell_forward(&pre[0], &pre[1], &pre[2], &pre[3], &c);
            c = c_new;
            h = Tensor::new(vec![out_len, filters], h_new)?;
            steps.push(ConvLstmStep { x, h_padded, acts });
        }
        Ok((h, LayerCache::ConvLstm { steps }))
    }

    fn conv_lstm_backward(
        &self,
        steps: &[ConvLstmStep<T>],
        grad_out: &Tensor<T>,
        kernel: usize,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (steps_n, cin) = (self.input_shape[0], self.input_shape[1]);
        let len = steps_n / steps.len().max(1);
        let (out_len, filters) = (self.output_shape[0], self.output_shape[1]);
        let (pad_l, pad_r) = same_padding(kernel);
        let mut grads: Vec<Tensor<T>> = self
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        let mut gx = vec![T::zero(); steps_n * cin];
        let mut dh_next = grad_out.data().to_vec();
        let mut dc_next = vec![T::zero(); out_len * filters];
        for (s, step) in steps.iter().enumerate().rev() {
            let (da, dc_prev) = cell_backward(&step.acts, &dh_next, &dc_next);
            let mut dh_padded = Tensor::zeros(step.h_padded.shape());
            let gx_s = &mut gx[s * len * cin..(s + 1) * len * cin];
            for (gate, da_g) in da.into_iter().enumerate() {
                let da_g = Tensor::new(vec![out_len, filters], da_g)?;
                let (gxi, gwx, gb) = conv1d_backward(&step.x, &self.params[3 * gate].value, &da_g)?;
                let (ghp, gwh, _) =
                    conv1d_backward(&step.h_padded, &self.params[3 * gate + 1].value, &da_g)?;
                grads[3 * gate].add_assign(&gwx)?;
                grads[3 * gate + 1].add_assign(&gwh)?;
                grads[3 * gate + 2].add_assign(&gb)?;
                dh_padded.add_assign(&ghp)?;
                for (a, &b) in gx_s.iter_mut().zip(gxi.data()) {
                    *a = *a + b;
                }
            }
            dh_next = pad_rows_backward(&dh_padded, pad_l, pad_r)?.into_data();
            dc_next = dc_prev;
        }
        Ok((Tensor::new(self.input_shape.clone(), gx)?, grads))
    }

    /// Weight positions that read the given input features, as
    /// `(param index, flat positions)` pairs.
    ///
    /// Features index the input's final axis: channels for sequence input,
    /// vector positions for flat input.
    pub fn weights_reading(&self, features: &[usize]) -> Result<Vec<(usize, Vec<usize>)>> {
        let d = *self.input_shape.last().expect("validated shape");
        if let Some(&bad) = features.iter().find(|&&f| f >= d) {
            return Err(Error::EmptySelection(format!(
                "feature {bad} is outside the layer's {d} input features"
            )));
        }
        let kernel_positions = |shape: &[usize]| -> Vec<usize> {
            let (f, k, c) = (shape[0], shape[1], shape[2]);
            let mut idx = Vec::new();
            for fi in 0..f {
                for ki in 0..k {
                    for &ch in features {
                        idx.push((fi * k + ki) * c + ch);
                    }
                }
            }
            idx
        };
        let row_positions = |shape: &[usize]| -> Vec<usize> {
            let cols = shape[1];
            features
                .iter()
                .flat_map(|&r| (0..cols).map(move |j| r * cols + j))
                .collect()
        };
        let out = match self.spec {
            LayerSpec::Conv1d { .. } => vec![(0, kernel_positions(self.params[0].value.shape()))],
            LayerSpec::Dense { .. } | LayerSpec::TimeDistributedDense { .. } => {
                vec![(0, row_positions(self.params[0].value.shape()))]
            }
            // input rows precede recurrent rows in every gate matrix
            LayerSpec::Lstm { .. } => (0..4)
                .map(|g| (2 * g, row_positions(self.params[2 * g].value.shape())))
                .collect(),
            LayerSpec::ConvLstm1d { .. } => (0..4)
                .map(|g| (3 * g, kernel_positions(self.params[3 * g].value.shape())))
                .collect(),
            _ => {
                return Err(Error::EmptySelection(format!(
                    "{} has no weights reading its input",
                    self.spec.kind_name()
                )))
            }
        };
        Ok(out)
    }
}

fn same_padding(kernel: usize) -> (usize, usize) {
    let left = (kernel - 1) / 2;
    (left, kernel - 1 - left)
}

fn add_row_bias<T: Scalar>(mut x: Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let w = bias.len();
    if x.last_dim() != w {
        return Err(Error::ShapeMismatch {
            op: "bias",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    for row in x.data_mut().chunks_mut(w) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Ok(x)
}
