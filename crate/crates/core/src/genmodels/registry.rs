//! Backend registry and prediction files.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    BiEncoder, EchoGenerator, Generator, HashedBiEncoder, HashedBiEncoderConfig, NgramSeq2Seq, NgramSeq2SeqConfig,
    ScriptedGenerator, StubBiEncoder,
};
use crate::embedding::{CharNgramProvider, EmbeddingProvider};
use crate::evalsuite::{RankedPrediction, ScoredText};
use crate::text::sha256_hex;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    /// One of `echo`, `scripted`, `ngram-seq2seq`, `hashed-biencoder`, `stub-biencoder`.
    pub backend: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub options: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    #[serde(default)]
    pub models: Vec<RegistryEntry>,
}

impl ModelRegistry {
    pub fn get(&self, name: &str) -> Option<&RegistryEntry> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.models.iter().map(|m| m.name.as_str()).collect()
    }
}

#[derive(Clone)]
pub enum LoadedModel {
    Generator(Arc<dyn Generator>),
    BiEncoder(Arc<dyn BiEncoder>),
}

impl LoadedModel {
    pub fn id(&self) -> &str {
        match self {
            LoadedModel::Generator(g) => g.id(),
            LoadedModel::BiEncoder(b) => b.id(),
        }
    }
}

fn options<T: for<'de> Deserialize<'de> + Default>(v: &serde_json::Value) -> Result<T> {
    if v.is_null() {
        Ok(T::default())
    } else {
        Ok(serde_json::from_value(v.clone())?)
    }
}

#[derive(Default, Deserialize)]
struct ScriptedOptions {
    #[serde(default)]
    outputs: Vec<ScoredText>,
}

/// Instantiates a registry entry. Trainable backends without a checkpoint
/// come back untrained.
pub fn load_model(entry: &RegistryEntry, provider: Option<Arc<dyn EmbeddingProvider>>) -> Result<LoadedModel> {
    let ckpt = entry.checkpoint.as_ref().filter(|p| p.exists());
    Ok(match entry.backend.as_str() {
        "echo" => LoadedModel::Generator(Arc::new(EchoGenerator::default())),
        "scripted" => {
            let o: ScriptedOptions = options(&entry.options)?;
            LoadedModel::Generator(Arc::new(ScriptedGenerator::new(entry.name.clone(), o.outputs)))
        }
        "ngram-seq2seq" => {
            let m = match ckpt {
                Some(p) => NgramSeq2Seq::load(p)?,
                None => NgramSeq2Seq::new(entry.name.clone(), options::<NgramSeq2SeqConfig>(&entry.options)?),
            };
            LoadedModel::Generator(Arc::new(m))
        }
        "hashed-biencoder" => {
            let m = match ckpt {
                Some(p) => HashedBiEncoder::load(p)?,
                None => HashedBiEncoder::new(entry.name.clone(), options::<HashedBiEncoderConfig>(&entry.options)?),
            };
            LoadedModel::BiEncoder(Arc::new(m))
        }
        "stub-biencoder" => match provider {
            Some(p) => LoadedModel::BiEncoder(Arc::new(StubBiEncoder::new(p))),
            None => LoadedModel::BiEncoder(Arc::new(StubBiEncoder::new(CharNgramProvider::default()))),
        },
        other => return Err(Error::Config(format!("unknown backend `{other}` for model `{}`", entry.name))),
    })
}

/// SHA-256 of the JSON serialization.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub model_id: String,
    pub config_digest: String,
    pub outputs: Vec<ScoredText>,
}

impl PredictionRecord {
    pub fn ranked(&self) -> RankedPrediction {
        RankedPrediction { instance_id: self.instance_id.clone(), model_id: self.model_id.clone(), outputs: self.outputs.clone() }
    }
}

pub fn write_predictions<W: Write>(mut w: W, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_loads_known_backends() {
        let reg: ModelRegistry = serde_json::from_str(
            r#"{"models":[{"name":"e","backend":"echo"},{"name":"s","backend":"scripted","options":{"outputs":[{"text":"a","score":1.0}]}},{"name":"b","backend":"hashed-biencoder","options":{"dimension":8,"buckets":32,"seed":1}}]}"#,
        )
        .unwrap();
        assert_eq!(reg.names(), vec!["e", "s", "b"]);
        for m in &reg.models {
            load_model(m, None).unwrap();
        }
        let bad = RegistryEntry { name: "x".into(), backend: "gpt".into(), checkpoint: None, options: serde_json::Value::Null };
        assert!(matches!(load_model(&bad, None), Err(Error::Config(_))));
    }

    #[test]
    fn prediction_round_trip() {
        let recs = vec![PredictionRecord {
            instance_id: "i".into(),
            model_id: "m".into(),
            config_digest: config_digest(&super::super::DecodingConfig::node()).unwrap(),
            outputs: vec![ScoredText::new("a", 0.5)],
        }];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &recs).unwrap();
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), recs);
        assert_eq!(recs[0].config_digest.len(), 64);
        assert!(matches!(read_predictions("{oops\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }
}
