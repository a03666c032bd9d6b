use serde::{Deserialize, Serialize};

use super::ops::{Mode, RunningStats};
use super::{NnError, NodeId, Scalar, Tape};

/// One layer of a network, with its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, filters: usize, kernel: usize, stride: usize, padding: usize },
    Batchnorm { channels: usize },
    Relu,
    Sigmoid,
    Maxpool2d { kernel: usize, stride: usize },
    /// Flattens trailing axes of its input.
    Linear { inputs: usize, units: usize },
    Softmax,
    /// Joins the two paths of a merge model along the feature axis.
    Concat,
    /// Label-conditioned modulation `f * (1 + gamma) + beta` where gamma and
    /// beta are linear maps of a learned label embedding.
    Incorporator { classes: usize, embed_dim: usize, features: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Conv2d { .. } => "conv2d",
            Self::Batchnorm { .. } => "batchnorm",
            Self::Relu => "relu",
            Self::Sigmoid => "sigmoid",
            Self::Maxpool2d { .. } => "maxpool2d",
            Self::Linear { .. } => "linear",
            Self::Softmax => "softmax",
            Self::Concat => "concat",
            Self::Incorporator { .. } => "incorporator",
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidLayer(format!("{}: {m}", self.kind())));
        match *self {
            Self::Conv2d { in_channels, filters, kernel, stride, .. } => {
                if in_channels == 0 || filters == 0 {
                    return bad("channel counts must be >= 1");
                }
                if kernel == 0 {
                    return bad("kernel size must be >= 1");
                }
                if stride == 0 {
                    return bad("stride must be >= 1");
                }
            }
            Self::Batchnorm { channels } if channels == 0 => return bad("channels must be >= 1"),
            Self::Maxpool2d { kernel, stride } if kernel == 0 || stride == 0 => {
                return bad("kernel and stride must be >= 1")
            }
            Self::Linear { inputs, units } if inputs == 0 || units == 0 => {
                return bad("inputs and units must be >= 1")
            }
            Self::Incorporator { classes, embed_dim, features } if classes == 0 || embed_dim == 0 || features == 0 => {
                return bad("classes, embed_dim and features must be >= 1")
            }
            _ => {}
        }
        Ok(())
    }

    /// Names and shapes of the trainable tensors this layer owns, in
    /// declaration order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Self::Conv2d { in_channels, filters, kernel, .. } => vec![
                ("weight", vec![filters, in_channels, kernel, kernel]),
                ("bias", vec![filters]),
            ],
            Self::Batchnorm { channels } => vec![("gamma", vec![channels]), ("beta", vec![channels])],
            Self::Linear { inputs, units } => vec![("weight", vec![inputs, units]), ("bias", vec![units])],
            Self::Incorporator { classes, embed_dim, features } => vec![
                ("embedding", vec![classes, embed_dim]),
                ("gamma_weight", vec![embed_dim, features]),
                ("gamma_bias", vec![features]),
                ("beta_weight", vec![embed_dim, features]),
                ("beta_bias", vec![features]),
            ],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn is_trainable(&self) -> bool {
        !self.param_shapes().is_empty()
    }

    pub fn input_count(&self) -> usize {
        match self {
            Self::Concat | Self::Incorporator { .. } => 2,
            _ => 1,
        }
    }

    /// Records this layer on `tape`.
    ///
    /// `inputs` holds one node, or two for `concat` (left, right) and
    /// `incorporator` (feature, one-hot label). `params` follows
    /// [`LayerSpec::param_shapes`] order. Batch-norm layers need `running`.
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        inputs: &[NodeId],
        params: &[NodeId],
        running: Option<&mut RunningStats<T>>,
        mode: Mode,
    ) -> Result<NodeId, NnError> {
        if inputs.len() != self.input_count() {
            return Err(NnError::InvalidLayer(format!(
                "{} takes {} input(s), got {}",
                self.kind(),
                self.input_count(),
                inputs.len()
            )));
        }
        if params.len() != self.param_shapes().len() {
            return Err(NnError::InvalidLayer(format!(
                "{} owns {} parameter tensors, got {}",
                self.kind(),
                self.param_shapes().len(),
                params.len()
            )));
        }
        let x = inputs[0];
        match *self {
            Self::Conv2d { stride, padding, .. } => tape.conv2d(x, params[0], params[1], stride, padding),
            Self::Batchnorm { .. } => {
                let running = running.ok_or_else(|| {
                    NnError::InvalidLayer("batchnorm needs running statistics".into())
                })?;
                tape.batchnorm(x, params[0], params[1], running, mode)
            }
            Self::Relu => tape.relu(x),
            Self::Sigmoid => tape.sigmoid(x),
            Self::Softmax => tape.softmax(x),
            Self::Maxpool2d { kernel, stride } => tape.maxpool2d(x, kernel, stride),
            Self::Linear { .. } => tape.linear(x, params[0], Some(params[1])),
            Self::Concat => tape.concat(x, inputs[1]),
            Self::Incorporator { .. } => {
                let embedded = tape.linear(inputs[1], params[0], None)?;
                let gamma = tape.linear(embedded, params[1], Some(params[2]))?;
                let beta = tape.linear(embedded, params[3], Some(params[4]))?;
                tape.modulate(x, gamma, beta)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(LayerSpec::Conv2d { in_channels: 1, filters: 4, kernel: 0, stride: 1, padding: 0 }
            .validate()
            .is_err());
        assert!(LayerSpec::Conv2d { in_channels: 1, filters: 4, kernel: 3, stride: 0, padding: 0 }
            .validate()
            .is_err());
        assert!(LayerSpec::Maxpool2d { kernel: 2, stride: 2 }.validate().is_ok());
    }

    #[test]
    fn serde_tag() {
        let s = serde_json::to_string(&LayerSpec::Relu).unwrap();
        assert_eq!(s, r#"{"kind":"relu"}"#);
        let l: LayerSpec = serde_json::from_str(r#"{"kind":"linear","inputs":3,"units":2}"#).unwrap();
        assert_eq!(l.param_count(), 8);
    }
}
