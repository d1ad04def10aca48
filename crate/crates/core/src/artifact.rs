//! Versioned model file.
//!
//! JSON document carrying a format tag and version, the layer shapes and
//! weights (row-major, `inputs × outputs`), the feature standardization and
//! the training configuration (including λ). Floats round-trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::evidential::{ArchSpec, EvidentialModel, TrainConfig};
use crate::nncore::{Layer, Mlp};

pub const FORMAT_TAG: &str = "evgust-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    feature_names: Vec<String>,
    standardizer: Standardizer,
    arch: ArchSpec,
    train_config: TrainConfig,
    layers: Vec<LayerRecord>,
}

pub fn write_model<W: Write>(writer: W, model: &EvidentialModel) -> Result<()> {
    let file = ModelFile {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        feature_names: model.feature_names.clone(),
        standardizer: model.standardizer.clone(),
        arch: model.arch.clone(),
        train_config: model.config.clone(),
        layers: model
            .net
            .layers()
            .iter()
            .map(|l| LayerRecord {
                inputs: l.inputs(),
                outputs: l.outputs(),
                weights: l.weights.iter().copied().collect(),
                bias: l.bias.to_vec(),
            })
            .collect(),
    };
    serde_json::to_writer_pretty(writer, &file)?;
    Ok(())
}

pub fn read_model<R: Read>(reader: R) -> Result<EvidentialModel> {
    let file: ModelFile = serde_json::from_reader(reader)?;
    if file.format != FORMAT_TAG {
        return Err(Error::usage(format!(
            "not a model file: format tag '{}'",
            file.format
        )));
    }
    if file.version != FORMAT_VERSION {
        return Err(Error::usage(format!(
            "unsupported model file version {} (expected {FORMAT_VERSION})",
            file.version
        )));
    }
    let layers = file
        .layers
        .into_iter()
        .map(|l| {
            let w = Array2::from_shape_vec((l.inputs, l.outputs), l.weights)
                .map_err(|_| Error::usage("layer weight count does not match its shape"))?;
            Layer::new(w, Array1::from(l.bias))
        })
        .collect::<Result<Vec<_>>>()?;
    let net = Mlp::from_layers(layers, file.arch.dropout, file.arch.l1, file.arch.l2)?;
    if file.feature_names.len() != net.input_width() || file.standardizer.mean.len() != net.input_width() {
        return Err(Error::usage("feature list, standardization and input layer disagree in width"));
    }
    Ok(EvidentialModel {
        net,
        standardizer: file.standardizer,
        feature_names: file.feature_names,
        arch: file.arch,
        config: file.train_config,
    })
}

pub fn save_model(path: impl AsRef<Path>, model: &EvidentialModel) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EvidentialModel> {
    read_model(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> EvidentialModel {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(3, &[7, 2], 0.1, 1e-9, 3e-7, &mut rng).unwrap();
        EvidentialModel {
            net,
            standardizer: Standardizer {
                mean: (0..3).map(|_| rng.random::<f64>()).collect(),
                scale: vec![1.0 / 3.0, 2.5, 1e-17],
            },
            feature_names: vec!["a".into(), "b".into(), "c".into()],
            arch: ArchSpec {
                hidden: vec![7, 2],
                dropout: 0.1,
                l1: 1e-9,
                l2: 3e-7,
            },
            config: TrainConfig::default(),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        for (a, b) in m.net.layers().iter().zip(back.net.layers()) {
            assert!(a.weights.iter().zip(b.weights.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.bias.iter().zip(b.bias.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back, m);
        let mut again = Vec::new();
        write_model(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_wrong_version_and_tag() {
        let mut buf = Vec::new();
        write_model(&mut buf, &model()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let v2 = text.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(read_model(v2.as_bytes()).unwrap_err().to_string().contains("version"));
        let bad = text.replacen(FORMAT_TAG, "other", 1);
        assert!(read_model(bad.as_bytes()).is_err());
    }
}
