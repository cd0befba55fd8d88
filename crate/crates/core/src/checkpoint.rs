//! JSON model bundles.
//!
//! A bundle stores either a Taylor model or a direct baseline network,
//! together with free-form metadata (training configuration, history
//! summary). Floats are written in shortest round-trip form, so a saved and
//! reloaded model predicts bit-for-bit like the original.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraints::MonoSpec;
use crate::error::{Error, Result};
use crate::evaluation::Predictor;
use crate::net::{Activation, DenseNet, Layer, Scaling};
use crate::taylor::{GateMode, MtnnModel, TaylorOrder};

pub const FORMAT: &str = "mtnn-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetRecord {
    pub layers: Vec<LayerRecord>,
    pub scaling: Scaling,
}

impl From<&DenseNet> for NetRecord {
    fn from(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    activation: l.activation(),
                    weights: l.weights().to_vec(),
                    biases: l.biases().to_vec(),
                })
                .collect(),
            scaling: net.scaling().clone(),
        }
    }
}

impl NetRecord {
    pub fn to_net(&self) -> Result<DenseNet> {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer::new(l.in_dim, l.out_dim, l.activation, l.weights.clone(), l.biases.clone()))
            .collect::<Result<Vec<_>>>()?;
        let net = DenseNet::from_layers(layers)?.with_scaling(self.scaling.clone())?;
        if net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter in bundle".into()));
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelRecord {
    Taylor {
        nx: usize,
        order: TaylorOrder,
        gate_mode: GateMode,
        mono_spec: MonoSpec,
        symmetrize_hessian: bool,
        nets: Vec<NetRecord>,
    },
    Direct {
        net: NetRecord,
    },
}

/// Loaded model of either kind.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Taylor(MtnnModel),
    Direct(DenseNet),
}

impl LoadedModel {
    pub fn as_predictor(&self) -> &dyn Predictor {
        match self {
            LoadedModel::Taylor(m) => m,
            LoadedModel::Direct(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub format: String,
    pub variant: String,
    pub model: ModelRecord,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl Bundle {
    pub fn taylor(variant: &str, model: &MtnnModel) -> Self {
        Self {
            format: FORMAT.into(),
            variant: variant.into(),
            model: ModelRecord::Taylor {
                nx: model.nx(),
                order: model.order(),
                gate_mode: model.gate_mode(),
                mono_spec: model.mono_spec().clone(),
                symmetrize_hessian: model.symmetrize_hessian(),
                nets: model.nets().iter().map(NetRecord::from).collect(),
            },
            metadata: serde_json::Value::Null,
        }
    }

    pub fn direct(variant: &str, net: &DenseNet) -> Self {
        Self {
            format: FORMAT.into(),
            variant: variant.into(),
            model: ModelRecord::Direct { net: net.into() },
            metadata: serde_json::Value::Null,
        }
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn load_model(&self) -> Result<LoadedModel> {
        match &self.model {
            ModelRecord::Taylor {
                nx,
                order,
                gate_mode,
                mono_spec,
                symmetrize_hessian,
                nets,
            } => {
                let nets = nets.iter().map(NetRecord::to_net).collect::<Result<Vec<_>>>()?;
                let m = MtnnModel::new(nets, *nx, mono_spec.clone(), *order, *gate_mode)?
                    .with_symmetrized_hessian(*symmetrize_hessian);
                Ok(LoadedModel::Taylor(m))
            }
            ModelRecord::Direct { net } => Ok(LoadedModel::Direct(net.to_net()?)),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let b: Bundle = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if b.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported bundle format `{}` (expected `{FORMAT}`)",
                b.format
            )));
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taylor::{ModelLayout, NetShape};

    #[test]
    fn taylor_round_trip_is_bitwise() {
        let layout = ModelLayout {
            nx: 2,
            nu: 2,
            shape: NetShape {
                hidden: vec![5],
                activation: Activation::Sigmoid,
            },
            mono_spec: "+++.\n++.+".parse().unwrap(),
            order: TaylorOrder::Second,
            gate_mode: GateMode::Architecture,
        };
        let scaling = Scaling::identity(4, 4).standardize_inputs(&[1.0, 2.0, 3.0, 4.0], &[0.3, 0.7, 2.0, 9.0]);
        let m = MtnnModel::random(&layout, Some(&scaling), 11).unwrap();
        let b = Bundle::taylor("mono2", &m).with_metadata(serde_json::json!({"seed": 11}));
        let back = Bundle::from_json(&b.to_json().unwrap()).unwrap();
        assert_eq!(back, b);
        let LoadedModel::Taylor(m2) = back.load_model().unwrap() else {
            panic!("expected a Taylor model")
        };
        assert_eq!(m2, m);
        let (zc, zp) = ([1.1, 2.3, 3.7, 4.1], [0.9, 2.0, 3.1, 4.4]);
        assert_eq!(m.predict(&zc, &zp).unwrap(), m2.predict(&zc, &zp).unwrap());
    }

    #[test]
    fn rejects_unknown_format() {
        let net =
            DenseNet::from_layers(vec![Layer::new(1, 1, Activation::Linear, vec![2.0], vec![0.5]).unwrap()]).unwrap();
        let mut b = Bundle::direct("baseline", &net);
        b.format = "mtnn-v0".into();
        let text = b.to_json().unwrap();
        assert!(matches!(Bundle::from_json(&text), Err(Error::Checkpoint(_))));
        assert!(matches!(Bundle::from_json("{"), Err(Error::Checkpoint(_))));
    }
}
