//! Checkpoints: parameters as 64-bit float safetensors, with the model and
//! selector configs, the gate and the candidate set in the header metadata.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use brainsep_core::geometry::CandidateSet;
use brainsep_core::model::ModelConfig;
use brainsep_core::params::ParamStore;
use brainsep_core::selection::SelectorConfig;
use brainsep_core::tensor::Tensor;
use brainsep_core::training::{Extractor, Gate};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "brainsep-checkpoint/1";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub extractor: Extractor,
    /// Candidate set the EEG rows were taken from.
    pub candidate: CandidateSet,
}

fn gate_string(gate: &Gate) -> String {
    match gate {
        Gate::Open => "open".into(),
        Gate::Soft => "soft".into(),
        Gate::Hard(mask) => {
            let bits: Vec<&str> = mask.iter().map(|&m| if m != 0.0 { "1" } else { "0" }).collect();
            format!("hard:{}", bits.join(""))
        }
    }
}

fn parse_gate(s: &str) -> Option<Gate> {
    match s {
        "open" => Some(Gate::Open),
        "soft" => Some(Gate::Soft),
        _ => {
            let bits = s.strip_prefix("hard:")?;
            bits.chars()
                .map(|c| match c {
                    '0' => Some(0.0),
                    '1' => Some(1.0),
                    _ => None,
                })
                .collect::<Option<Vec<f64>>>()
                .map(Gate::Hard)
        }
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let ex = &ck.extractor;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT_TAG.to_string());
    meta.insert("model_config".to_string(), toml::to_string(ex.config()).map_err(|e| Error::Data(e.to_string()))?);
    if let Some(sel) = ex.selector() {
        meta.insert("selector_config".to_string(), toml::to_string(sel.config()).map_err(|e| Error::Data(e.to_string()))?);
    }
    meta.insert("gate".to_string(), gate_string(ex.gate()));
    meta.insert("candidate".to_string(), toml::to_string(&ck.candidate).map_err(|e| Error::Data(e.to_string()))?);

    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = ex
        .store
        .iter()
        .map(|(_, name, t)| (name.to_string(), vec![t.rows(), t.cols()], t.data().iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let views = bytes
        .iter()
        .map(|(n, shape, b)| Ok((n.clone(), TensorView::new(Dtype::F64, shape.clone(), b).map_err(|e| Error::Data(e.to_string()))?)))
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Data(e.to_string()))
}

pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let bad = |m: String| Error::Data(format!("{}: {m}", origin.display()));
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let get = |k: &str| meta.get(k).ok_or_else(|| bad(format!("missing {k} metadata")));
    if get("format")? != FORMAT_TAG {
        return Err(bad(format!("unsupported format {:?}", get("format")?)));
    }
    let model: ModelConfig = toml::from_str(get("model_config")?).map_err(|e| bad(e.to_string()))?;
    let selector: Option<SelectorConfig> =
        meta.get("selector_config").map(|s| toml::from_str(s)).transpose().map_err(|e| bad(e.to_string()))?;
    let gate = parse_gate(get("gate")?).ok_or_else(|| bad("invalid gate".into()))?;
    let candidate: CandidateSet = toml::from_str(get("candidate")?).map_err(|e| bad(e.to_string()))?;
    let candidate = CandidateSet::new(candidate.indices().to_vec(), candidate.layout_id(), usize::MAX)?;

    let tensors = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
    let mut store = ParamStore::new();
    for (name, view) in tensors.tensors() {
        let (rows, cols) = match (view.dtype(), view.shape()) {
            (Dtype::F64, [r, c]) => (*r, *c),
            (d, s) => return Err(bad(format!("tensor {name} has dtype {d:?} and shape {s:?}"))),
        };
        let data = view.data().chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))).collect();
        store.add(name, Tensor::from_vec(rows, cols, data));
    }
    let mut extractor = Extractor::new(&model, selector.as_ref(), 0)?;
    extractor.store.load_from(&store).map_err(bad)?;
    if !extractor.store.is_finite() {
        return Err(Error::Numerical(format!("{}: non-finite parameters", origin.display())));
    }
    extractor.set_gate(gate)?;
    if candidate.len() != model.eeg_in_channels {
        return Err(bad(format!("candidate set has {} channels, model expects {}", candidate.len(), model.eeg_in_channels)));
    }
    Ok(Checkpoint { extractor, candidate })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
