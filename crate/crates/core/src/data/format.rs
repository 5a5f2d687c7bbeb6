//! Dataset container: a versioned text manifest followed by a dense
//! little-endian `f64` payload.
//!
//! ```text
//! kdmtl-dataset 1
//! generator <name>
//! seed <u64>
//! param <key> <value>                  (zero or more, sorted by key)
//! regime multi_label|disjoint_label
//! input <channels> <height> <width>
//! task <id> <loss> <output_dim>        (one per task, in order)
//! samples <count>
//! payload_sha256 <hex>
//! end
//! <payload>
//! ```
//!
//! Each sample in the payload is its input (`channels * height * width`
//! values) followed, for every task in manifest order, by a presence flag
//! (`0.0` or `1.0`) and `target_len` target values (zeros when absent).
//! Class targets are stored as their integer index.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Manifest, MultiTaskDataset, Sample, TaskInfo};
use crate::error::{Error, Result};

const MAGIC: &str = "kdmtl-dataset";
const VERSION: u32 = 1;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn payload(ds: &MultiTaskDataset) -> Vec<u8> {
    let m = ds.manifest();
    let spatial = m.spatial();
    let mut out = Vec::new();
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    for s in ds.samples() {
        s.x.iter().for_each(|&v| put(v));
        for t in &m.tasks {
            match s.labels.get(&t.id) {
                Some(y) => {
                    put(1.0);
                    y.iter().for_each(|&v| put(v));
                }
                None => {
                    put(0.0);
                    (0..t.target_len(spatial)).for_each(|_| put(0.0));
                }
            }
        }
    }
    out
}

pub fn encode_dataset(ds: &MultiTaskDataset) -> Vec<u8> {
    let m = ds.manifest();
    let body = payload(ds);
    let mut header = format!("{MAGIC} {VERSION}\n");
    header += &format!("generator {}\n", m.generator);
    header += &format!("seed {}\n", m.seed);
    for (k, v) in &m.params {
        header += &format!("param {k} {v}\n");
    }
    header += &format!("regime {}\n", m.regime);
    let [c, h, w] = m.input_shape;
    header += &format!("input {c} {h} {w}\n");
    for t in &m.tasks {
        header += &format!("task {} {} {}\n", t.id, t.loss, t.output_dim);
    }
    header += &format!("samples {}\n", ds.len());
    header += &format!("payload_sha256 {}\n", hex(&Sha256::digest(&body)));
    header += "end\n";
    let mut out = header.into_bytes();
    out.extend_from_slice(&body);
    out
}

pub fn save_dataset(ds: &MultiTaskDataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_dataset(ds))?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("dataset: {}", msg.into()))
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| bad(format!("bad {what} `{s}`")))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<MultiTaskDataset> {
    const END: &[u8] = b"\nend\n";
    let split = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("missing header terminator"))?;
    let header = std::str::from_utf8(&bytes[..split + 1]).map_err(|_| bad("header is not UTF-8"))?;
    let body = &bytes[split + END.len()..];

    let mut lines = header.lines();
    match lines.next().map(|l| l.split_whitespace().collect::<Vec<_>>()) {
        Some(f) if f.len() == 2 && f[0] == MAGIC => {
            if f[1] != VERSION.to_string() {
                return Err(bad(format!("unsupported version {}", f[1])));
            }
        }
        _ => return Err(bad("not a dataset file")),
    }

    let mut generator = None;
    let mut seed = None;
    let mut params = BTreeMap::new();
    let mut regime = None;
    let mut input = None;
    let mut tasks = Vec::new();
    let mut count = None;
    let mut checksum = None;
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["generator", g] => generator = Some(g.to_string()),
            ["seed", s] => seed = Some(num::<u64>(s, "seed")?),
            ["param", k, v] => {
                params.insert(k.to_string(), v.to_string());
            }
            ["regime", r] => regime = Some(r.parse()?),
            ["input", c, h, w] => input = Some([num(c, "input")?, num(h, "input")?, num(w, "input")?]),
            ["task", id, loss, dim] => tasks.push(TaskInfo {
                id: id.to_string(),
                loss: loss.parse()?,
                output_dim: num(dim, "output_dim")?,
            }),
            ["samples", n] => count = Some(num::<usize>(n, "sample count")?),
            ["payload_sha256", h] => checksum = Some(h.to_string()),
            _ => return Err(bad(format!("unrecognized header line `{line}`"))),
        }
    }
    let manifest = Manifest {
        generator: generator.ok_or_else(|| bad("missing generator"))?,
        seed: seed.ok_or_else(|| bad("missing seed"))?,
        params,
        input_shape: input.ok_or_else(|| bad("missing input shape"))?,
        regime: regime.ok_or_else(|| bad("missing regime"))?,
        tasks,
    };
    let count = count.ok_or_else(|| bad("missing sample count"))?;
    if checksum.as_deref() != Some(hex(&Sha256::digest(body)).as_str()) {
        return Err(bad("payload checksum mismatch"));
    }

    let spatial = manifest.spatial();
    let stride = manifest.input_len()
        + manifest
            .tasks
            .iter()
            .map(|t| 1 + t.target_len(spatial))
            .sum::<usize>();
    if body.len() != count * stride * 8 {
        return Err(bad(format!(
            "payload holds {} bytes, manifest describes {}",
            body.len(),
            count * stride * 8
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut samples = Vec::with_capacity(count);
    for row in values.chunks_exact(stride) {
        let (x, mut rest) = row.split_at(manifest.input_len());
        let mut labels = BTreeMap::new();
        for t in &manifest.tasks {
            let len = t.target_len(spatial);
            let flag = rest[0];
            let y = &rest[1..1 + len];
            rest = &rest[1 + len..];
            match flag {
                f if f == 1.0 => {
                    labels.insert(t.id.clone(), y.to_vec());
                }
                f if f == 0.0 => {}
                _ => return Err(bad("bad presence flag")),
            }
        }
        samples.push(Sample { x: x.to_vec(), labels });
    }
    MultiTaskDataset::new(manifest, samples)
}

pub fn load_dataset(path: &Path) -> Result<MultiTaskDataset> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_disjoint_pair, gen_scale_clash, regenerate, DisjointPairParams, ScaleClashParams};

    #[test]
    fn round_trip_both_regimes() {
        let a = gen_scale_clash(&ScaleClashParams::new(40, 3, 1)).unwrap();
        let b = gen_disjoint_pair(&DisjointPairParams::new(20, 30, 4, 4, 6, 1)).unwrap();
        for ds in [a, b] {
            let back = decode_dataset(&encode_dataset(&ds)).unwrap();
            assert_eq!(back, ds);
        }
    }

    #[test]
    fn file_round_trip_and_regeneration() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/ds.kdds");
        let ds = gen_scale_clash(&ScaleClashParams::new(25, 4, 77)).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.manifest().seed, 77);
        assert_eq!(regenerate(back.manifest()).unwrap(), ds);
    }

    #[test]
    fn corruption_rejected() {
        let ds = gen_scale_clash(&ScaleClashParams::new(20, 3, 1)).unwrap();
        let bytes = encode_dataset(&ds);
        let mut hdr = bytes.clone();
        hdr[3] = b'#';
        assert!(decode_dataset(&hdr).is_err());
        let mut body = bytes.clone();
        let last = body.len() - 1;
        body[last] ^= 0x40;
        assert!(matches!(decode_dataset(&body), Err(Error::Format(_))));
        assert!(decode_dataset(&bytes[..bytes.len() - 8]).is_err());
        let v2 = String::from_utf8_lossy(&bytes[..40]).replace("kdmtl-dataset 1", "kdmtl-dataset 2");
        assert!(decode_dataset(v2.as_bytes()).is_err());
    }
}
