//! Corpus files.
//!
//! Line 1 is a JSON header with the task spec, split and master seed. Each
//! further line is `id \t targets \t features`, where targets are
//! space-separated label ids and features are base64 of `T′` and `F` as
//! u32 LE followed by the row-major f64 LE matrix.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use alignrefine_core::align::LabelSequence;
use alignrefine_core::numcore::Tensor;
use alignrefine_core::synth::{utterance_seed, Split, TaskSpec, Utterance};
use anyhow::{anyhow, bail, Context};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

const FORMAT: &str = "alignrefine-corpus";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub split: Split,
    pub master_seed: u64,
    pub count: usize,
    pub task: TaskSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: Header,
    pub utterances: Vec<Utterance>,
}

pub fn encode_features(f: &Tensor) -> String {
    let (rows, cols) = (f.rows(), f.cols());
    let mut bytes = Vec::with_capacity(8 + 8 * f.numel());
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for &x in f.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_features(text: &str) -> anyhow::Result<Tensor> {
    let bytes = STANDARD.decode(text.trim())?;
    if bytes.len() < 8 {
        bail!("feature record shorter than its header");
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into()?) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into()?) as usize;
    let body = &bytes[8..];
    if body.len() != 8 * rows * cols {
        bail!("feature record has {} bytes for a {rows}x{cols} matrix", body.len());
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Tensor::new(&[rows, cols], data)?)
}

pub fn write_corpus<W: Write>(out: W, task: &TaskSpec, split: Split, master_seed: u64, utts: &[Utterance]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(out);
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        split,
        master_seed,
        count: utts.len(),
        task: task.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for u in utts {
        let targets: Vec<String> = u.target.0.iter().map(ToString::to_string).collect();
        writeln!(w, "{}\t{}\t{}", u.id, targets.join(" "), encode_features(&u.features))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus<R: std::io::Read>(input: R) -> anyhow::Result<Corpus> {
    let mut lines = BufReader::new(input).lines();
    let first = lines.next().ok_or_else(|| anyhow!("empty corpus file"))??;
    let header: Header = serde_json::from_str(&first).context("corpus header")?;
    if header.format != FORMAT || header.version != 1 {
        bail!("unsupported corpus format {} v{}", header.format, header.version);
    }
    let vocab = header.task.vocab();
    let mut utterances = Vec::with_capacity(header.count);
    for (index, line) in lines.enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, targets, feats] = fields[..] else {
            bail!("record {index}: expected 3 tab-separated fields, found {}", fields.len());
        };
        let target: Vec<usize> = targets.split_whitespace().map(str::parse).collect::<Result<_, _>>().with_context(|| format!("targets of {id}"))?;
        if let Some(bad) = target.iter().find(|&&t| !vocab.is_label(t)) {
            bail!("{id}: label {bad} outside 1..={}", vocab.num_labels);
        }
        let features = decode_features(feats).with_context(|| format!("features of {id}"))?;
        if features.cols() != header.task.feature_dim {
            bail!("{id}: {} feature columns, task has {}", features.cols(), header.task.feature_dim);
        }
        utterances.push(Utterance {
            id: id.to_string(),
            features,
            target: LabelSequence(target),
            seed: utterance_seed(header.master_seed, header.split, index),
        });
    }
    if utterances.len() != header.count {
        bail!("header announces {} records, file has {}", header.count, utterances.len());
    }
    Ok(Corpus { header, utterances })
}

pub fn corpus_path(dir: &Path, split: Split) -> std::path::PathBuf {
    dir.join(format!("{}.corpus", split.name()))
}

pub fn save(path: &Path, task: &TaskSpec, split: Split, master_seed: u64, utts: &[Utterance]) -> anyhow::Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_corpus(f, task, split, master_seed, utts)
}

pub fn load(path: &Path) -> anyhow::Result<Corpus> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_corpus(f).with_context(|| format!("reading {}", path.display()))
}
