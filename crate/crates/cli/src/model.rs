//! Model directories: `spec.json` (the network) next to `weights.bin` (a
//! tensor blob keyed by layer name).

use std::path::Path;

use skynet_core::arch::{validate, NetSpec, WeightSet};
use skynet_core::quant::{choose_format, quantize};

use crate::blob::{self, Entry};
use crate::{read_bytes, read_text, write_file, CliError, Result};

pub const SPEC_FILE: &str = "spec.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// Bit widths of a fixed-point weight export.
pub const EXPORT_CONV_BITS: u8 = 11;
pub const EXPORT_BN_BITS: u8 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum WeightFormat {
    F32,
    /// Per-tensor signed fixed point, format chosen from the value range.
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub spec: NetSpec,
    pub weights: WeightSet<f64>,
}

impl ModelBundle {
    pub fn weight_entries(&self, format: WeightFormat) -> Result<Vec<Entry>> {
        self.weights
            .named_tensors()
            .into_iter()
            .map(|(name, t)| match format {
                WeightFormat::F32 => Ok(Entry::f32(name, &t)),
                WeightFormat::Fixed => {
                    let bits = if name.contains(".bn.") {
                        EXPORT_BN_BITS
                    } else {
                        EXPORT_CONV_BITS
                    };
                    let f = choose_format(t.min_value(), t.max_value(), bits, true)
                        .map_err(|e| CliError::Usage(format!("{}: {}", name, e)))?;
                    Ok(Entry::fixed(name, &quantize(&t, f.format)))
                }
            })
            .collect()
    }

    pub fn save(&self, dir: &Path, format: WeightFormat) -> Result<()> {
        let bytes = blob::encode(&self.weight_entries(format)?)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        write_file(&dir.join(SPEC_FILE), self.spec.to_json() + "\n")?;
        write_file(&dir.join(WEIGHTS_FILE), bytes)
    }

    /// Loads and checks a model directory. Unreadable files are I/O errors,
    /// malformed documents are validation errors and weights that do not
    /// fit the network are mismatches.
    pub fn load(dir: &Path) -> Result<Self> {
        let spec = load_spec(&dir.join(SPEC_FILE))?;
        let bytes = read_bytes(&dir.join(WEIGHTS_FILE))?;
        let entries = blob::decode(&bytes).map_err(|e| CliError::Usage(e.to_string()))?;
        let tensors = entries
            .iter()
            .map(|e| {
                Ok((
                    e.name.clone(),
                    e.to_tensor().map_err(|e| CliError::Usage(e.to_string()))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let weights =
            WeightSet::from_named(&spec, tensors).map_err(|e| CliError::Mismatch(e.to_string()))?;
        Ok(ModelBundle { spec, weights })
    }
}

/// Reads and validates a network document.
pub fn load_spec(path: &Path) -> Result<NetSpec> {
    let text = read_text(path)?;
    let spec = NetSpec::from_json(&text)
        .map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e)))?;
    validate(&spec).map_err(|v| {
        let msgs: Vec<String> = v.iter().map(|v| v.to_string()).collect();
        CliError::Usage(format!("{}: {}", path.display(), msgs.join("; ")))
    })?;
    Ok(spec)
}
