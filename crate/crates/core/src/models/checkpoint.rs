//! Checkpoint container.
//!
//! A UTF-8 header of whitespace-separated lines, terminated by `end`, then
//! the raw little-endian `f64` payload of every tensor in header order:
//!
//! ```text
//! kdmtl-checkpoint 1
//! frozen 0|1
//! adaptor linear|nonlinear|none
//! input <channels> <height> <width>
//! widths <w0> <w1> ...
//! taps <j0> <j1> ...
//! task <id> <loss> <output_dim> <w> <lambda>      (one per task)
//! tensor <name> <d0> <d1> ...                     (one per parameter, sorted by name)
//! end
//! <payload>
//! ```
//!
//! Floats in the header use Rust's shortest round-trip formatting, so
//! save/load is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{AdaptorKind, EncoderConfig, ModelBundle, TaskSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "kdmtl-checkpoint";
const VERSION: u32 = 1;

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

pub fn encode_checkpoint(bundle: &ModelBundle) -> Vec<u8> {
    let cfg = bundle.encoder_config();
    let mut header = format!("{MAGIC} {VERSION}\n");
    header += &format!("frozen {}\n", u8::from(bundle.is_frozen()));
    header += &format!("adaptor {}\n", bundle.adaptor_kind().as_str());
    header += &format!("input {} {} {}\n", cfg.input_channels, cfg.height, cfg.width);
    header += &format!("widths {}\n", join(&cfg.widths));
    header += &format!("taps {}\n", join(&cfg.tap_points));
    for t in bundle.tasks() {
        header += &format!("task {} {} {} {:?} {:?}\n", t.id, t.loss, t.output_dim, t.w, t.lambda);
    }
    for (name, t) in bundle.params() {
        header += &format!("tensor {name} {}\n", join(t.shape()));
    }
    header += "end\n";
    let mut out = header.into_bytes();
    for t in bundle.params().values() {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(bundle))?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", msg.into()))
}

fn nums<T: std::str::FromStr>(fields: &[&str]) -> Result<Vec<T>> {
    fields
        .iter()
        .map(|f| f.parse().map_err(|_| bad(format!("bad number `{f}`"))))
        .collect()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelBundle> {
    const END: &[u8] = b"\nend\n";
    let split = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("missing header terminator"))?;
    let header = std::str::from_utf8(&bytes[..split + 1]).map_err(|_| bad("header is not UTF-8"))?;
    let payload = &bytes[split + END.len()..];

    let mut lines = header.lines();
    let first: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    if first.len() != 2 || first[0] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    if first[1] != VERSION.to_string() {
        return Err(bad(format!("unsupported version {}", first[1])));
    }

    let mut frozen = None;
    let mut adaptor = None;
    let mut input = None;
    let mut widths = None;
    let mut taps = None;
    let mut tasks = Vec::new();
    let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["frozen", v] => frozen = Some(*v == "1"),
            ["adaptor", k] => adaptor = Some(k.parse::<AdaptorKind>()?),
            ["input", rest @ ..] => input = Some(nums::<usize>(rest)?),
            ["widths", rest @ ..] => widths = Some(nums::<usize>(rest)?),
            ["taps", rest @ ..] => taps = Some(nums::<usize>(rest)?),
            ["task", id, loss, dim, w, lambda] => tasks.push(TaskSpec {
                id: id.to_string(),
                loss: loss.parse()?,
                output_dim: dim.parse().map_err(|_| bad("bad output_dim"))?,
                w: w.parse().map_err(|_| bad("bad w"))?,
                lambda: lambda.parse().map_err(|_| bad("bad lambda"))?,
            }),
            ["tensor", name, dims @ ..] => tensors.push((name.to_string(), nums(dims)?)),
            _ => return Err(bad(format!("unrecognized header line `{line}`"))),
        }
    }
    let input = input.ok_or_else(|| bad("missing input line"))?;
    if input.len() != 3 {
        return Err(bad("input line needs 3 dimensions"));
    }
    let encoder = EncoderConfig {
        input_channels: input[0],
        height: input[1],
        width: input[2],
        widths: widths.ok_or_else(|| bad("missing widths"))?,
        tap_points: taps.ok_or_else(|| bad("missing taps"))?,
    };

    let expected: usize = tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != expected * 8 {
        return Err(bad(format!(
            "payload holds {} bytes, header describes {}",
            payload.len(),
            expected * 8
        )));
    }
    let mut params = BTreeMap::new();
    let mut at = 0;
    for (name, shape) in tensors {
        let n: usize = shape.iter().product();
        let values = payload[at..at + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at += n * 8;
        params.insert(name, Tensor::new(shape, values, true)?);
    }
    ModelBundle::from_parts(
        encoder,
        tasks,
        adaptor.ok_or_else(|| bad("missing adaptor line"))?,
        params,
        frozen.ok_or_else(|| bad("missing frozen line"))?,
    )
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    decode_checkpoint(&fs::read(path)?)
}
