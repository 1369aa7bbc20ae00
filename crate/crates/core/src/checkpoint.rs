//! JSON checkpoints and JSON-lines datasets.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::{StreamFusionParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::recognizer::Recognizer;
use crate::sim::{FusionSample, TaskSpec};
use crate::simplex::Variant;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Trained fusion layer together with the frozen recognizer it decodes through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema: u32,
    /// Resolved run configuration that produced the checkpoint.
    pub config: Value,
    pub variant: Variant,
    pub d_model: usize,
    pub vocab: usize,
    pub n_heads: usize,
    pub train_channels: usize,
    pub task: TaskSpec,
    pub params: BTreeMap<String, TensorRecord>,
    pub recognizer: Recognizer,
}

impl Checkpoint {
    pub fn new(
        params: &StreamFusionParams,
        n_heads: usize,
        train_channels: usize,
        task: TaskSpec,
        recognizer: Recognizer,
        config: Value,
    ) -> Self {
        let tensors = params
            .tensors()
            .into_iter()
            .map(|(name, (r, c), v)| {
                (
                    name.to_string(),
                    TensorRecord {
                        shape: vec![r, c],
                        values: v.to_vec(),
                    },
                )
            })
            .collect();
        Self {
            schema: SCHEMA_VERSION,
            config,
            variant: params.variant,
            d_model: params.d_model(),
            vocab: params.vocab(),
            n_heads,
            train_channels,
            task,
            params: tensors,
            recognizer,
        }
    }

    /// Rebuilds the parameters, checking names, shapes and finiteness.
    pub fn fusion_params(&self) -> Result<StreamFusionParams> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Schema(format!("unsupported checkpoint schema {}", self.schema)));
        }
        for name in self.params.keys() {
            if !PARAM_NAMES.contains(&name.as_str()) {
                return Err(Error::Schema(format!("unknown parameter tensor {name:?}")));
            }
        }
        let mut params = StreamFusionParams::zeros(self.d_model, self.vocab, self.variant);
        let expected: Vec<(&str, (usize, usize))> = params.tensors().iter().map(|(n, s, _)| (*n, *s)).collect();
        let mut flat = Vec::with_capacity(params.num_params());
        for (name, (r, c)) in expected {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::Schema(format!("missing parameter tensor {name:?}")))?;
            if t.shape != [r, c] || t.values.len() != r * c {
                return Err(Error::Schema(format!(
                    "{name}: expected shape [{r}, {c}], found {:?} with {} values",
                    t.shape,
                    t.values.len()
                )));
            }
            flat.extend_from_slice(&t.values);
        }
        params.assign_flat(&flat)?;
        params.validate()?;
        if self.recognizer.d_model() != self.d_model || self.recognizer.vocab() != self.vocab {
            return Err(Error::Schema("recognizer dimensions differ from the fusion layer".into()));
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        ck.fusion_params()?;
        Ok(ck)
    }
}

#[derive(Serialize)]
struct DatasetLineRef<'a> {
    schema: u32,
    config: &'a Value,
    sample: &'a FusionSample,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetLine {
    schema: u32,
    config: Value,
    sample: FusionSample,
}

/// One JSON object per line: `{"schema", "config", "sample"}`.
pub fn write_dataset<W: Write>(mut out: W, config: &Value, samples: &[FusionSample]) -> Result<()> {
    for sample in samples {
        let line = DatasetLineRef {
            schema: SCHEMA_VERSION,
            config,
            sample,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, config: &Value, samples: &[FusionSample]) -> Result<()> {
    let file = fs::File::create(path)?;
    write_dataset(std::io::BufWriter::new(file), config, samples)
}

/// Returns the samples and the config of the first line.
pub fn read_dataset<R: BufRead>(input: R) -> Result<(Vec<FusionSample>, Option<Value>)> {
    let mut samples = Vec::new();
    let mut config = None;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DatasetLine = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("dataset line {}: {e}", i + 1)))?;
        if parsed.schema != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "dataset line {}: unsupported schema {}",
                i + 1,
                parsed.schema
            )));
        }
        config.get_or_insert(parsed.config);
        samples.push(parsed.sample);
    }
    Ok((samples, config))
}

pub fn load_dataset(path: &Path) -> Result<(Vec<FusionSample>, Option<Value>)> {
    read_dataset(BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::sim::{make_dataset, QualityProfile, Task};

    fn recognizer() -> Recognizer {
        Recognizer::init(&TaskSpec::default(), &mut Rng::new(1))
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let spec = TaskSpec::default();
        let params = StreamFusionParams::init(spec.d_model, spec.vocab, Variant::Sparsemax, &mut Rng::new(2));
        let ck = Checkpoint::new(&params, 2, 16, spec, recognizer(), serde_json::json!({"seed": 2}));
        let text = ck.to_json().unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.fusion_params().unwrap(), params);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn checkpoint_rejects_bad_tensors() {
        let spec = TaskSpec::default();
        let params = StreamFusionParams::init(spec.d_model, spec.vocab, Variant::Softmax, &mut Rng::new(2));
        let ck = Checkpoint::new(&params, 2, 16, spec, recognizer(), Value::Null);

        let mut missing = ck.clone();
        missing.params.remove("w_g");
        assert!(matches!(missing.fusion_params(), Err(Error::Schema(_))));

        let mut extra = ck.clone();
        extra.params.insert("w_extra".into(), ck.params["w_g"].clone());
        assert!(matches!(extra.fusion_params(), Err(Error::Schema(_))));

        let mut shape = ck.clone();
        shape.params.get_mut("w_c").unwrap().shape = vec![16, 64];
        assert!(matches!(shape.fusion_params(), Err(Error::Schema(_))));

        let mut schema = ck;
        schema.schema = 2;
        assert!(schema.fusion_params().is_err());
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let task = Task::new(TaskSpec::default()).unwrap();
        let data = make_dataset(3, 4, &QualityProfile::HalfNoise, &task, &Rng::new(9)).unwrap();
        let cfg = serde_json::json!({"seed": 9});
        let mut a = Vec::new();
        write_dataset(&mut a, &cfg, &data).unwrap();
        let again = make_dataset(3, 4, &QualityProfile::HalfNoise, &task, &Rng::new(9)).unwrap();
        let mut b = Vec::new();
        write_dataset(&mut b, &cfg, &again).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 3);
        let (back, config) = read_dataset(&a[..]).unwrap();
        assert_eq!(back, data);
        assert_eq!(config, Some(cfg));
    }

    #[test]
    fn dataset_rejects_unknown_fields() {
        let line = br#"{"schema":1,"config":null,"sample":null,"extra":1}"#;
        assert!(read_dataset(&line[..]).is_err());
    }
}
