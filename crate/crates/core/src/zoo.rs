//! The ten weekly forecasting architectures, plus a small MLP builder for
//! classification streams.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::error::Result;
use crate::graph::{BlockSource, BlockSpec, ModelGraph, TrainDefaults};
use crate::layers::{AuditEntry, LayerSpec};
use crate::tensor::Activation;

/// Forecast horizon: one five-step week.
pub const HORIZON: usize = 5;

#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelId {
    CNN_UNIV_5,
    CNN_UNIV_10,
    CNN_MULTV_10,
    CNN_MULTH_10,
    LSTM_UNIV_5,
    LSTM_UNIV_10,
    LSTM_UNIV_ED_10,
    LSTM_MULTV_ED_10,
    LSTM_UNIV_CNN_10,
    LSTM_UNIV_CONV_10,
}

impl ModelId {
    pub const ALL: [ModelId; 10] = [
        ModelId::CNN_UNIV_5,
        ModelId::CNN_UNIV_10,
        ModelId::CNN_MULTV_10,
        ModelId::CNN_MULTH_10,
        ModelId::LSTM_UNIV_5,
        ModelId::LSTM_UNIV_10,
        ModelId::LSTM_UNIV_ED_10,
        ModelId::LSTM_MULTV_ED_10,
        ModelId::LSTM_UNIV_CNN_10,
        ModelId::LSTM_UNIV_CONV_10,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelId::CNN_UNIV_5 => "CNN_UNIV_5",
            ModelId::CNN_UNIV_10 => "CNN_UNIV_10",
            ModelId::CNN_MULTV_10 => "CNN_MULTV_10",
            ModelId::CNN_MULTH_10 => "CNN_MULTH_10",
            ModelId::LSTM_UNIV_5 => "LSTM_UNIV_5",
            ModelId::LSTM_UNIV_10 => "LSTM_UNIV_10",
            ModelId::LSTM_UNIV_ED_10 => "LSTM_UNIV_ED_10",
            ModelId::LSTM_MULTV_ED_10 => "LSTM_MULTV_ED_10",
            ModelId::LSTM_UNIV_CNN_10 => "LSTM_UNIV_CNN_10",
            ModelId::LSTM_UNIV_CONV_10 => "LSTM_UNIV_CONV_10",
        }
    }

    /// Weeks of history in one input sample.
    pub fn lookback_weeks(self) -> usize {
        match self {
            ModelId::CNN_UNIV_5 | ModelId::LSTM_UNIV_5 => 1,
            _ => 2,
        }
    }

    pub fn multivariate(self) -> bool {
        matches!(
            self,
            ModelId::CNN_MULTV_10 | ModelId::CNN_MULTH_10 | ModelId::LSTM_MULTV_ED_10
        )
    }

    pub fn input_shape(self) -> [usize; 2] {
        [
            self.lookback_weeks() * HORIZON,
            if self.multivariate() { 5 } else { 1 },
        ]
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelId::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown model `{s}`; expected one of {}",
                    ModelId::ALL.map(|m| m.name()).join(", ")
                ))
            })
    }
}

fn conv(filters: usize) -> LayerSpec {
    LayerSpec::Conv1d {
        filters,
        kernel: 3,
        activation: Activation::Relu,
    }
}

fn dense(units: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Dense { units, activation }
}

fn td(units: usize, activation: Activation) -> LayerSpec {
    LayerSpec::TimeDistributedDense { units, activation }
}

fn lstm(units: usize, return_sequences: bool) -> LayerSpec {
    LayerSpec::Lstm {
        units,
        return_sequences,
    }
}

fn input() -> BlockSource {
    BlockSource::Input { channels: None }
}

fn prev(n: usize) -> BlockSource {
    BlockSource::Blocks((0..n).collect())
}

/// Stacks blocks so that each reads every block of the position before it.
fn chain(id: ModelId, first: Vec<BlockSpec>, rest: Vec<BlockSpec>, train: TrainDefaults) -> ModelGraph {
    let mut positions = vec![first];
    for mut b in rest {
        b.source = prev(positions.last().unwrap().len());
        positions.push(vec![b]);
    }
    ModelGraph {
        name: id.name().to_string(),
        input_shape: id.input_shape().to_vec(),
        positions,
        output_len: HORIZON,
        train,
    }
}

fn block(name: &str, layers: Vec<LayerSpec>) -> BlockSpec {
    BlockSpec::new(name, layers, input())
}

fn decoder(units: usize) -> BlockSpec {
    block(
        "decoder",
        vec![LayerSpec::RepeatVector { times: HORIZON }, lstm(units, true)],
    )
}

/// Builds the architecture for `id`.
///
/// Hidden layers use ReLU and the output layer sigmoid. The output layer is
/// always a block of its own.
pub fn build_model(id: ModelId) -> ModelGraph {
    use Activation::{Relu, Sigmoid};
    let t = |epochs, batch_size| TrainDefaults { epochs, batch_size };
    match id {
        ModelId::CNN_UNIV_5 | ModelId::CNN_UNIV_10 => chain(
            id,
            vec![block("features", vec![conv(16), LayerSpec::MaxPool1d, LayerSpec::Flatten])],
            vec![
                block("dense", vec![dense(10, Relu)]),
                block("output", vec![dense(HORIZON, Sigmoid)]),
            ],
            if id == ModelId::CNN_UNIV_5 { t(20, 4) } else { t(70, 16) },
        ),
        ModelId::CNN_MULTV_10 => chain(
            id,
            vec![block(
                "features",
                vec![
                    conv(32),
                    conv(32),
                    LayerSpec::MaxPool1d,
                    conv(16),
                    // length 1 here: passes through unchanged
                    LayerSpec::MaxPool1d,
                    LayerSpec::Flatten,
                ],
            )],
            vec![
                block("dense", vec![dense(100, Relu)]),
                block("output", vec![dense(HORIZON, Sigmoid)]),
            ],
            t(70, 16),
        ),
        ModelId::CNN_MULTH_10 => {
            let heads = ["open", "high", "low", "close", "volume"]
                .iter()
                .enumerate()
                .map(|(i, feature)| {
                    BlockSpec::new(
                        &format!("head_{feature}"),
                        vec![conv(32), conv(32), LayerSpec::MaxPool1d, LayerSpec::Flatten],
                        BlockSource::Input {
                            channels: Some(vec![i]),
                        },
                    )
                })
                .collect();
            chain(
                id,
                heads,
                vec![
                    block("merge", vec![LayerSpec::Concatenate, dense(200, Relu)]),
                    block("dense", vec![dense(100, Relu)]),
                    block("output", vec![dense(HORIZON, Sigmoid)]),
                ],
                t(70, 16),
            )
        }
        ModelId::LSTM_UNIV_5 | ModelId::LSTM_UNIV_10 => chain(
            id,
            vec![block("encoder", vec![lstm(200, false)])],
            vec![
                block("dense", vec![dense(100, Relu)]),
                block("dense_out", vec![dense(HORIZON, Relu)]),
                block("output", vec![dense(HORIZON, Sigmoid)]),
            ],
            t(20, 16),
        ),
        ModelId::LSTM_UNIV_ED_10 | ModelId::LSTM_MULTV_ED_10 => chain(
            id,
            vec![block("encoder", vec![lstm(200, false)])],
            vec![
                decoder(200),
                block("dense", vec![td(100, Relu)]),
                block("output", vec![td(1, Sigmoid)]),
            ],
            if id == ModelId::LSTM_UNIV_ED_10 { t(70, 16) } else { t(20, 16) },
        ),
        ModelId::LSTM_UNIV_CNN_10 => chain(
            id,
            vec![block(
                "encoder",
                vec![conv(64), conv(64), LayerSpec::MaxPool1d, LayerSpec::Flatten],
            )],
            vec![
                decoder(200),
                block("dense", vec![td(100, Relu)]),
                block("output", vec![td(1, Sigmoid)]),
            ],
            t(20, 16),
        ),
        ModelId::LSTM_UNIV_CONV_10 => chain(
            id,
            vec![block(
                "encoder",
                vec![
                    LayerSpec::ConvLstm1d {
                        filters: 64,
                        kernel: 3,
                        subsequences: 2,
                    },
                    LayerSpec::Flatten,
                ],
            )],
            vec![
                decoder(200),
                block("dense", vec![td(100, Relu)]),
                block("output", vec![td(1, Sigmoid)]),
            ],
            t(20, 16),
        ),
    }
}

/// Serializable summary of one architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCard {
    pub id: String,
    pub input_shape: Vec<usize>,
    pub blocks: Vec<String>,
    pub layers: Vec<AuditEntry>,
    pub total: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl ModelCard {
    pub fn new(g: &ModelGraph) -> Result<Self> {
        let audit = g.audit()?;
        Ok(ModelCard {
            id: g.name.clone(),
            input_shape: g.input_shape.clone(),
            blocks: g.positions.iter().flatten().map(|b| b.name.clone()).collect(),
            layers: audit.entries,
            total: audit.total,
            epochs: g.train.epochs,
            batch_size: g.train.batch_size,
        })
    }
}

/// Fully connected classifier or regressor over flat `inputs`-wide samples.
///
/// Each hidden layer is its own block; the output layer is linear unless
/// `output_activation` says otherwise.
pub fn mlp(
    name: &str,
    inputs: usize,
    hidden: &[usize],
    outputs: usize,
    output_activation: Activation,
    train: TrainDefaults,
) -> ModelGraph {
    let mut positions = Vec::new();
    for (i, &units) in hidden.iter().enumerate() {
        let mut layers = Vec::new();
        if i == 0 {
            layers.push(LayerSpec::Flatten);
        }
        layers.push(dense(units, Activation::Relu));
        let source = if i == 0 { input() } else { prev(1) };
        positions.push(vec![BlockSpec::new(&format!("hidden_{i}"), layers, source)]);
    }
    let out_layers = if hidden.is_empty() {
        vec![LayerSpec::Flatten, dense(outputs, output_activation)]
    } else {
        vec![dense(outputs, output_activation)]
    };
    let source = if hidden.is_empty() { input() } else { prev(1) };
    positions.push(vec![BlockSpec::new("output", out_layers, source)]);
    ModelGraph {
        name: name.to_string(),
        input_shape: vec![1, inputs],
        positions,
        output_len: outputs,
        train,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shapes(id: ModelId) -> Vec<Vec<usize>> {
        build_model(id)
            .shape_trace()
            .unwrap()
            .into_iter()
            .map(|e| e.shape)
            .collect()
    }

    #[test]
    fn audit_totals() {
        let want = [289, 769, 7373, 132965, 182235, 182235, 502601, 505801, 347209, 384777];
        for (id, total) in ModelId::ALL.into_iter().zip(want) {
            assert_eq!(build_model(id).audit().unwrap().total, total, "{id}");
        }
    }

    #[test]
    fn cnn_multv_10_trace() {
        assert_eq!(
            shapes(ModelId::CNN_MULTV_10),
            vec![
                vec![10, 5],
                vec![8, 32],
                vec![6, 32],
                vec![3, 32],
                vec![1, 16],
                vec![1, 16],
                vec![16],
                vec![100],
                vec![5]
            ]
        );
    }

    #[test]
    fn lstm_univ_cnn_10_trace() {
        assert_eq!(
            shapes(ModelId::LSTM_UNIV_CNN_10),
            vec![
                vec![10, 1],
                vec![8, 64],
                vec![6, 64],
                vec![3, 64],
                vec![192],
                vec![5, 192],
                vec![5, 200],
                vec![5, 100],
                vec![5, 1]
            ]
        );
    }

    #[test]
    fn model_card_json() {
        let card = ModelCard::new(&build_model(ModelId::CNN_UNIV_5)).unwrap();
        let v = serde_json::to_value(&card).unwrap();
        assert_eq!(v["total"], 289);
        assert_eq!(v["batch_size"], 4);
        assert_eq!(v["layers"].as_array().unwrap().len(), 5);
    }

    #[test]
    fn train_configs() {
        assert_eq!(build_model(ModelId::CNN_UNIV_5).train, TrainDefaults { epochs: 20, batch_size: 4 });
        assert_eq!(build_model(ModelId::CNN_UNIV_10).train, TrainDefaults { epochs: 70, batch_size: 16 });
        assert_eq!(build_model(ModelId::LSTM_MULTV_ED_10).input_shape, vec![10, 5]);
        assert_eq!(build_model(ModelId::LSTM_MULTV_ED_10).train, TrainDefaults { epochs: 20, batch_size: 16 });
    }

    #[test]
    fn cnn_univ_5_trace() {
        assert_eq!(
            shapes(ModelId::CNN_UNIV_5),
            vec![vec![5, 1], vec![3, 16], vec![1, 16], vec![16], vec![10], vec![5]]
        );
    }

    #[test]
    fn model_names_roundtrip() {
        for id in ModelId::ALL {
            assert_eq!(id.name().parse::<ModelId>().unwrap(), id);
        }
        assert!("NOPE".parse::<ModelId>().is_err());
    }

    #[test]
    fn mlp_shapes() {
        let g = mlp("m", 2, &[8, 4], 3, Activation::Linear, TrainDefaults { epochs: 1, batch_size: 1 });
        assert_eq!(g.audit().unwrap().total, (2 * 8 + 8) + (8 * 4 + 4) + (4 * 3 + 3));
    }
}
