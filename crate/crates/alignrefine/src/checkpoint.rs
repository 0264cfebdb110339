//! Checkpoints: a text manifest plus a raw little-endian float64 blob.
//!
//! `<prefix>.manifest` holds a version line, the training step and RNG state, one
//! `param <name> <shape> <offset>` line per parameter in name order, and the
//! resolved config after a `config` line. `<prefix>.bin` holds the values at
//! those element offsets.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use alignrefine_core::numcore::{Params, RngState, Tensor};
use anyhow::{anyhow, bail, Context};

const MAGIC: &str = "alignrefine-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    /// Training step the parameters come from.
    pub step: usize,
    /// Resolved experiment config, as TOML.
    pub config: String,
    pub rng: RngState,
}

pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn unhex(s: &str) -> anyhow::Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        bail!("odd-length hex");
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(Into::into)).collect()
}

/// Manifest text and blob bytes for a checkpoint.
pub fn encode(ck: &Checkpoint) -> (String, Vec<u8>) {
    let mut manifest = format!("{MAGIC}\n");
    let _ = writeln!(manifest, "step {}", ck.step);
    let r = &ck.rng;
    let _ = writeln!(manifest, "rng {} {} {}", hex(&r.seed), r.stream, r.word_pos);
    let mut blob = Vec::with_capacity(8 * ck.params.num_values());
    let mut offset = 0;
    for id in ck.params.ids_by_name() {
        let p = ck.params.get(id);
        let shape: Vec<String> = p.value.shape().iter().map(ToString::to_string).collect();
        let _ = writeln!(manifest, "param {} {} {}", p.name, shape.join("x"), offset);
        for &x in p.value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        offset += p.value.numel();
    }
    manifest.push_str("config\n");
    manifest.push_str(&ck.config);
    (manifest, blob)
}

pub fn decode(manifest: &str, blob: &[u8]) -> anyhow::Result<Checkpoint> {
    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        bail!("not a checkpoint manifest");
    }
    let step = match lines.next().and_then(|l| l.strip_prefix("step ")) {
        Some(n) => n.parse()?,
        None => bail!("missing step line"),
    };
    let rng_line = lines.next().ok_or_else(|| anyhow!("missing rng line"))?;
    let rng = match rng_line.split(' ').collect::<Vec<_>>()[..] {
        ["rng", seed, stream, pos] => RngState {
            seed: unhex(seed)?.try_into().map_err(|_| anyhow!("rng seed must be 32 bytes"))?,
            stream: stream.parse()?,
            word_pos: pos.parse()?,
        },
        _ => bail!("malformed rng line `{rng_line}`"),
    };
    if blob.len() % 8 != 0 {
        bail!("blob length {} is not a multiple of 8", blob.len());
    }
    let values: Vec<f64> = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut params = Params::new();
    let mut expected = 0;
    let mut config = String::new();
    let mut in_config = false;
    for line in lines {
        if in_config {
            config.push_str(line);
            config.push('\n');
            continue;
        }
        if line == "config" {
            in_config = true;
            continue;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        let ["param", name, shape, offset] = parts[..] else {
            bail!("malformed manifest line `{line}`");
        };
        let shape: Vec<usize> = if shape.is_empty() {
            Vec::new()
        } else {
            shape.split('x').map(str::parse).collect::<Result<_, _>>().with_context(|| format!("shape of {name}"))?
        };
        let offset: usize = offset.parse()?;
        if offset != expected {
            bail!("parameter {name} starts at {offset}, expected {expected}");
        }
        let n: usize = shape.iter().product();
        let data = values.get(offset..offset + n).ok_or_else(|| anyhow!("blob too short for {name}"))?;
        params.add(name, Tensor::new(&shape, data.to_vec())?)?;
        expected += n;
    }
    if expected != values.len() {
        bail!("blob holds {} values, manifest lists {expected}", values.len());
    }
    Ok(Checkpoint { params, step, config, rng })
}

pub fn save(prefix: &Path, ck: &Checkpoint) -> anyhow::Result<()> {
    let (manifest, blob) = encode(ck);
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(with_suffix(prefix, ".manifest"), manifest)?;
    std::fs::write(with_suffix(prefix, ".bin"), blob)?;
    Ok(())
}

pub fn load(prefix: &Path) -> anyhow::Result<Checkpoint> {
    let m = with_suffix(prefix, ".manifest");
    let manifest = std::fs::read_to_string(&m).with_context(|| format!("reading {}", m.display()))?;
    let b = with_suffix(prefix, ".bin");
    let blob = std::fs::read(&b).with_context(|| format!("reading {}", b.display()))?;
    decode(&manifest, &blob).with_context(|| format!("checkpoint {}", prefix.display()))
}

/// Copies checkpoint values into a freshly built model's store, requiring
/// the same parameter names and shapes.
pub fn restore(into: &mut Params, from: &Params) -> anyhow::Result<()> {
    if into.len() != from.len() {
        bail!("checkpoint has {} parameters, model has {}", from.len(), into.len());
    }
    into.load_values_from(from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alignrefine_core::numcore::Rng;

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(4);
        let mut params = Params::new();
        params.add_normal("b.weight", &[3, 2], 1.0, &mut rng).unwrap();
        params.add("a.scalar", Tensor::new(&[], vec![-0.0]).unwrap()).unwrap();
        params.add("c.odd", Tensor::new(&[2], vec![f64::MIN_POSITIVE / 4.0, 1e300]).unwrap()).unwrap();
        rng.next_u64();
        Checkpoint { params, step: 40, config: "seed = 7\n[refiner]\nlayers = 2\n".into(), rng: rng.state() }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("sub/fp.ckpt");
        save(&prefix, &ck).unwrap();
        let back = load(&prefix).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.rng, ck.rng);
        assert_eq!(back.step, 40);
        for id in ck.params.ids_by_name() {
            let p = ck.params.get(id);
            let q = back.params.get(back.params.id(&p.name).unwrap());
            assert_eq!(p.value.shape(), q.value.shape());
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.value), bits(&q.value));
        }
        save(&prefix, &back).unwrap();
        assert_eq!(encode(&back), encode(&ck));
        assert_eq!(std::fs::read(with_suffix(&prefix, ".bin")).unwrap(), encode(&ck).1);
    }

    #[test]
    fn manifest_lists_names_shapes_offsets() {
        let (m, blob) = encode(&sample());
        let params: Vec<&str> = m.lines().filter(|l| l.starts_with("param ")).collect();
        assert_eq!(params, ["param a.scalar  0", "param b.weight 3x2 1", "param c.odd 2 7"]);
        assert_eq!(blob.len(), 9 * 8);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (m, blob) = encode(&sample());
        assert!(decode(&m, &blob[..blob.len() - 8]).is_err());
        assert!(decode(&m, &blob[..blob.len() - 3]).is_err());
        assert!(decode(&m.replacen("checkpoint 1", "checkpoint 9", 1), &blob).is_err());
        assert!(decode(&m.replace(" 7\n", " 6\n"), &blob).is_err());
    }

    #[test]
    fn restore_requires_matching_names() {
        let ck = sample();
        let mut same = ck.params.clone();
        for id in same.ids_by_name().collect::<Vec<_>>() {
            same.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        restore(&mut same, &ck.params).unwrap();
        assert_eq!(same, ck.params);
        let mut other = Params::new();
        other.add("z", Tensor::zeros(&[1])).unwrap();
        assert!(restore(&mut other, &ck.params).is_err());
    }
}
