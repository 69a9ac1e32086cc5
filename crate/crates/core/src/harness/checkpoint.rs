//! Text checkpoints.
//!
//! ```text
//! semline-checkpoint 1
//! topology input_channels=3 stage_channels=8,16,32,32 ... fc1_width=32
//! siamese hidden=64
//! tensor dnet.backbone.0.weight 8 3 3 3
//! <values separated by spaces>
//! ...
//! ```
//!
//! Each tensor is a header line with its name and shape followed by one
//! line of values in shortest round-trip exponent form, so a save/load
//! cycle reproduces every parameter bit for bit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{DNetParams, DNetTopology, SiameseHeadParams};

const MAGIC: &str = "semline-checkpoint 1";

/// D-Net plus the R-Net and M-Net heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dnet: DNetParams,
    pub rnet: SiameseHeadParams,
    pub mnet: SiameseHeadParams,
}

/// FNV-1a over the bit patterns of `values`.
pub fn param_checksum(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn topology_line(t: &DNetTopology) -> String {
    format!(
        "topology input_channels={} stage_channels={} downsample_after={} attended_stages={} kernel={} attention_kernel={} attention={} sigma={:e} pool_threshold={:e} fc1_width={}",
        t.input_channels,
        join(&t.stage_channels),
        join(&t.downsample_after.iter().map(|&d| d as u8).collect::<Vec<_>>()),
        join(&t.attended_stages),
        t.kernel,
        t.attention_kernel,
        t.attention.as_str(),
        t.sigma,
        t.pool_threshold,
        t.fc1_width
    )
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{MAGIC}").expect("string write");
        writeln!(out, "{}", topology_line(&self.dnet.topology)).expect("string write");
        writeln!(out, "siamese hidden={}", self.rnet.hidden.out_dim).expect("string write");
        let mut emit = |prefix: &str, tensors: Vec<(String, Vec<usize>, &Vec<f64>)>| {
            for (name, shape, values) in tensors {
                writeln!(out, "tensor {prefix}.{name} {}", join(&shape).replace(',', " ")).expect("string write");
                let vals: Vec<String> = values.iter().map(|v| format!("{v:e}")).collect();
                writeln!(out, "{}", vals.join(" ")).expect("string write");
            }
        };
        emit("dnet", self.dnet.tensors());
        emit("rnet", self.rnet.tensors());
        emit("mnet", self.mnet.tensors());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses checkpoint text; `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let perr = |line: usize, message: String| Error::Parse {
            path: PathBuf::from(path),
            line,
            message,
        };
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| perr(0, format!("unexpected end of file, expected {what}")))
        };
        let (n, magic) = next("header")?;
        if magic.trim() != MAGIC {
            return Err(perr(n, format!("expected {MAGIC:?}")));
        }
        let (n, topo_line) = next("topology")?;
        let topology = parse_topology(topo_line).map_err(|m| perr(n, m))?;
        topology.validate().map_err(|e| perr(n, e.to_string()))?;
        let (n, sia) = next("siamese header")?;
        let hidden: usize = sia
            .strip_prefix("siamese hidden=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| perr(n, "expected siamese hidden=<width>".into()))?;
        let mut ckpt = Checkpoint {
            dnet: DNetParams::zeros(topology.clone())?,
            rnet: SiameseHeadParams::zeros(topology.fc1_width, hidden),
            mnet: SiameseHeadParams::zeros(topology.fc1_width, hidden),
        };
        let mut read_block = |prefix: &str, expected: Vec<(String, Vec<usize>)>| -> Result<Vec<Vec<f64>>> {
            let mut out = Vec::new();
            for (name, shape) in expected {
                let (n, header) = next("tensor header")?;
                let want = format!("tensor {prefix}.{name} {}", join(&shape).replace(',', " "));
                if header.trim() != want {
                    return Err(perr(n, format!("expected {want:?}, found {:?}", header.trim())));
                }
                let (n, body) = next("tensor values")?;
                let vals = body
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| perr(n, format!("bad number {t:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                let count: usize = shape.iter().product();
                if vals.len() != count {
                    return Err(perr(n, format!("{} values for shape {shape:?}", vals.len())));
                }
                if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
                    return Err(perr(n, format!("non-finite parameter {v}")));
                }
                out.push(vals);
            }
            Ok(out)
        };
        let shapes = |t: Vec<(String, Vec<usize>, &Vec<f64>)>| -> Vec<(String, Vec<usize>)> {
            t.into_iter().map(|(n, s, _)| (n, s)).collect()
        };
        let d = read_block("dnet", shapes(ckpt.dnet.tensors()))?;
        let r = read_block("rnet", shapes(ckpt.rnet.tensors()))?;
        let m = read_block("mnet", shapes(ckpt.mnet.tensors()))?;
        for (dst, src) in ckpt.dnet.tensors_mut().into_iter().zip(d) {
            *dst = src;
        }
        for (dst, src) in ckpt.rnet.tensors_mut().into_iter().zip(r) {
            *dst = src;
        }
        for (dst, src) in ckpt.mnet.tensors_mut().into_iter().zip(m) {
            *dst = src;
        }
        Ok(ckpt)
    }
}

fn parse_topology(line: &str) -> std::result::Result<DNetTopology, String> {
    let rest = line
        .strip_prefix("topology ")
        .ok_or_else(|| "expected topology line".to_string())?;
    let mut t = DNetTopology::default();
    let list = |v: &str| -> std::result::Result<Vec<usize>, String> {
        v.split(',')
            .map(|x| x.parse().map_err(|_| format!("bad list {v:?}")))
            .collect()
    };
    for kv in rest.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("bad field {kv:?}"))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| format!("bad number {v:?}"));
        let int = |v: &str| v.parse::<usize>().map_err(|_| format!("bad integer {v:?}"));
        match k {
            "input_channels" => t.input_channels = int(v)?,
            "stage_channels" => t.stage_channels = list(v)?,
            "downsample_after" => t.downsample_after = list(v)?.into_iter().map(|d| d != 0).collect(),
            "attended_stages" => {
                let a = list(v)?;
                if a.len() != 2 {
                    return Err("two attended stages expected".into());
                }
                t.attended_stages = [a[0], a[1]];
            }
            "kernel" => t.kernel = int(v)?,
            "attention_kernel" => t.attention_kernel = int(v)?,
            "attention" => t.attention = v.parse().map_err(|e: Error| e.to_string())?,
            "sigma" => t.sigma = num(v)?,
            "pool_threshold" => t.pool_threshold = num(v)?,
            "fc1_width" => t.fc1_width = int(v)?,
            other => return Err(format!("unknown topology field {other:?}")),
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(mode: AttentionMode) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let topo = DNetTopology {
            attention: mode,
            fc1_width: 16,
            stage_channels: vec![4, 4, 8, 8],
            ..DNetTopology::default()
        };
        let mut dnet = DNetParams::random(topo, &mut rng).unwrap();
        // awkward magnitudes exercise exact round trips
        dnet.fc1.weights[0] = 1e-300;
        dnet.fc1.weights[1] = -0.1 - 0.2;
        dnet.fc1.weights[2] = rng.gen::<f64>() * 1e200;
        Checkpoint {
            dnet,
            rnet: SiameseHeadParams::random(&mut rng, 16, 5),
            mnet: SiameseHeadParams::random(&mut rng, 16, 5),
        }
    }

    #[test]
    fn lossless_roundtrip() {
        for mode in [AttentionMode::Mirror, AttentionMode::NoFlip, AttentionMode::Off] {
            let c = sample(mode);
            let back = Checkpoint::parse(&c.to_text(), Path::new("x")).unwrap();
            assert_eq!(back, c);
            assert_eq!(param_checksum(&back.dnet.to_flat()), param_checksum(&c.dnet.to_flat()));
        }
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        let c = sample(AttentionMode::Mirror);
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn corrupt_files_name_the_line() {
        let text = sample(AttentionMode::Mirror).to_text();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[4] = "1.0 oops";
        let err = Checkpoint::parse(&lines.join("\n"), Path::new("m")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }), "{err}");
        let err = Checkpoint::parse("not a checkpoint", Path::new("m")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let truncated: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(matches!(Checkpoint::parse(&truncated, Path::new("m")), Err(Error::Parse { .. })));
    }
}
