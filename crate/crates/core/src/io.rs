//! On-disk formats: NDJSON corpora and metrics, JSON checkpoints.
//!
//! A corpus file starts with one header line followed by one record per
//! sample:
//!
//! ```text
//! {"format":"alim-corpus-v1","num_classes":4,"dim":2,"n":2,"spec":{...}}
//! {"features":[0.1,-0.3],"candidates":[1,0,1,0],"truth":2,"is_noisy":false}
//! {"features":[0.9,0.2],"candidates":[0,1,0,0]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pseudo_label::CandidateMask;
use crate::datagen::{CorruptionSpec, PartialSample};
use crate::error::{AlimError, Result};
use crate::model::{Architecture, Dense, ModelParams};
use crate::scalar::Real;
use crate::trainer::EpochMetrics;

pub const CORPUS_FORMAT: &str = "alim-corpus-v1";
pub const CHECKPOINT_FORMAT: &str = "alim-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub num_classes: usize,
    pub dim: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<CorruptionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleRecord {
    features: Vec<f64>,
    candidates: CandidateMask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    is_noisy: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus<T> {
    pub header: CorpusHeader,
    pub samples: Vec<PartialSample<T>>,
}

impl<T: Real> Corpus<T> {
    /// Wraps samples, inferring the shape from the first one.
    pub fn new(samples: Vec<PartialSample<T>>, spec: Option<CorruptionSpec>) -> Result<Self> {
        let first = samples.first().ok_or(AlimError::EmptyInput)?;
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            num_classes: first.candidates.len(),
            dim: first.features.len(),
            n: samples.len(),
            spec,
        };
        for s in &samples {
            check_shape(&header, s.features.len(), s.candidates.len())?;
            s.check_consistency()?;
        }
        Ok(Self { header, samples })
    }
}

fn check_shape(header: &CorpusHeader, dim: usize, classes: usize) -> Result<()> {
    if dim != header.dim {
        return Err(AlimError::ShapeMismatch {
            expected: header.dim,
            actual: dim,
        });
    }
    if classes != header.num_classes {
        return Err(AlimError::ShapeMismatch {
            expected: header.num_classes,
            actual: classes,
        });
    }
    Ok(())
}

fn parse_error(line: usize, err: impl std::fmt::Display) -> AlimError {
    AlimError::Parse {
        line,
        message: err.to_string(),
    }
}

pub fn write_corpus<T: Real, W: Write>(corpus: &Corpus<T>, writer: W) -> Result<()> {
    let mut out = BufWriter::new(writer);
    serde_json::to_writer(&mut out, &corpus.header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for s in &corpus.samples {
        let record = SampleRecord {
            features: s.features.iter().map(|x| x.as_f64()).collect(),
            candidates: s.candidates.clone(),
            truth: s.truth,
            is_noisy: s.is_noisy,
        };
        serde_json::to_writer(&mut out, &record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a corpus; line numbers in errors are 1-based. Blank lines are skipped.
pub fn read_corpus<T: Real, R: Read>(reader: R) -> Result<Corpus<T>> {
    let mut lines = BufReader::new(reader)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));

    let (line_no, first) = lines.next().ok_or(AlimError::EmptyInput)?;
    let header: CorpusHeader = serde_json::from_str(&first?).map_err(|e| parse_error(line_no, e))?;
    if header.format != CORPUS_FORMAT {
        return Err(parse_error(line_no, format!("unknown format {:?}", header.format)));
    }

    let mut samples = Vec::with_capacity(header.n);
    for (line_no, line) in lines {
        let record: SampleRecord = serde_json::from_str(&line?).map_err(|e| parse_error(line_no, e))?;
        check_shape(&header, record.features.len(), record.candidates.len()).map_err(|e| parse_error(line_no, e))?;
        let sample = PartialSample {
            features: record.features.into_iter().map(T::lit).collect(),
            candidates: record.candidates,
            truth: record.truth,
            is_noisy: record.is_noisy,
        };
        sample.check_consistency().map_err(|e| parse_error(line_no, e))?;
        samples.push(sample);
    }
    if samples.len() != header.n {
        return Err(AlimError::ShapeMismatch {
            expected: header.n,
            actual: samples.len(),
        });
    }
    Ok(Corpus { header, samples })
}

pub fn save_corpus<T: Real>(corpus: &Corpus<T>, path: impl AsRef<Path>) -> Result<()> {
    write_corpus(corpus, File::create(path)?)
}

pub fn load_corpus<T: Real>(path: impl AsRef<Path>) -> Result<Corpus<T>> {
    read_corpus(File::open(path)?)
}

/// Streams epoch records, one JSON object per line, flushing after each.
pub struct MetricsWriter<W: Write> {
    out: BufWriter<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(writer: W) -> Self {
        Self {
            out: BufWriter::new(writer),
        }
    }

    pub fn write(&mut self, record: &EpochMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(std::io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

impl MetricsWriter<File> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(File::create(path)?))
    }
}

pub fn read_metrics<R: Read>(reader: R) -> Result<Vec<EpochMetrics>> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| parse_error(i + 1, e))?);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &ModelParams<T>) -> Self {
        let to_f64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect();
        let tensors = model
            .layers()
            .iter()
            .enumerate()
            .flat_map(|(i, layer)| {
                [
                    Tensor {
                        name: format!("layer{i}.weight"),
                        shape: vec![layer.outputs, layer.inputs],
                        data: to_f64(&layer.weights),
                    },
                    Tensor {
                        name: format!("layer{i}.bias"),
                        shape: vec![layer.outputs],
                        data: to_f64(&layer.bias),
                    },
                ]
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            architecture: model.architecture(),
            input_dim: model.input_dim(),
            num_classes: model.num_classes(),
            tensors,
        }
    }

    /// Rebuilds the model, checking every tensor against the manifest.
    pub fn into_model<T: Real>(self) -> Result<ModelParams<T>> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(AlimError::invalid(format!("unknown checkpoint format {:?}", self.format)));
        }
        let template = ModelParams::<T>::zeros(self.architecture, self.input_dim, self.num_classes)?;
        let expected = 2 * template.layers().len();
        if self.tensors.len() != expected {
            return Err(AlimError::ShapeMismatch {
                expected,
                actual: self.tensors.len(),
            });
        }
        let mut tensors = self.tensors.into_iter();
        let mut layers = Vec::with_capacity(template.layers().len());
        for (i, shape) in template.layers().iter().enumerate() {
            let weight = take_tensor(&mut tensors, &format!("layer{i}.weight"), &[shape.outputs, shape.inputs])?;
            let bias = take_tensor(&mut tensors, &format!("layer{i}.bias"), &[shape.outputs])?;
            layers.push(Dense {
                inputs: shape.inputs,
                outputs: shape.outputs,
                weights: weight.into_iter().map(T::lit).collect(),
                bias: bias.into_iter().map(T::lit).collect(),
            });
        }
        ModelParams::from_layers(self.architecture, layers)
    }
}

fn take_tensor(tensors: &mut impl Iterator<Item = Tensor>, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    let t = tensors.next().ok_or(AlimError::EmptyInput)?;
    if t.name != name {
        return Err(AlimError::invalid(format!("expected tensor {name}, found {}", t.name)));
    }
    if t.shape != shape {
        return Err(AlimError::invalid(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
    }
    let len: usize = shape.iter().product();
    if t.data.len() != len {
        return Err(AlimError::ShapeMismatch {
            expected: len,
            actual: t.data.len(),
        });
    }
    Ok(t.data)
}

pub fn save_checkpoint<T: Real>(model: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &Checkpoint::from_model(model)).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let checkpoint: Checkpoint =
        serde_json::from_reader(BufReader::new(File::open(path)?)).map_err(|e| parse_error(1, e))?;
    checkpoint.into_model()
}
