use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, Network, NnError};

/// Format tag written into every model checkpoint.
pub const CHECKPOINT_FORMAT: &str = "moda-nn/1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    layers: Vec<Layer>,
}

pub fn save_network(net: &Network, path: &Path) -> Result<(), NnError> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        layers: net.layers().to_vec(),
    };
    let text = serde_json::to_string(&ck).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    fs::write(path, text).map_err(|e| NnError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Loads a checkpoint, validating the format tag and every parameter block.
pub fn load_network(path: &Path) -> Result<Network, NnError> {
    let text = fs::read_to_string(path).map_err(|e| NnError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(NnError::Checkpoint(format!(
            "format tag {:?}, expected {CHECKPOINT_FORMAT:?}",
            ck.format
        )));
    }
    for (i, layer) in ck.layers.iter().enumerate() {
        let ok = match layer {
            Layer::Dense(d) => d.weights.len() == d.inputs * d.outputs && d.bias.len() == d.outputs,
            Layer::Conv2d(c) => {
                c.kernel % 2 == 1
                    && c.weights.len() == c.out_channels * c.in_channels * c.kernel * c.kernel
                    && c.bias.len() == c.out_channels
            }
            _ => true,
        };
        if !ok {
            return Err(NnError::Shape {
                layer: Some(i),
                msg: "checkpoint parameter block does not match declared shape".into(),
            });
        }
    }
    Ok(Network::new(ck.layers))
}

/// Loads a checkpoint and requires it to match `template`'s architecture.
pub fn load_network_like(path: &Path, template: &Network) -> Result<Network, NnError> {
    let net = load_network(path)?;
    if !net.same_architecture(template) {
        return Err(NnError::Shape {
            layer: None,
            msg: format!("checkpoint {} has a different architecture", path.display()),
        });
    }
    Ok(net)
}
