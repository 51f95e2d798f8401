//! Single-file checkpoint format.
//!
//! Layout: a text manifest (one `name shape dtype byte-offset` line per
//! tensor, terminated by a blank line) followed by the concatenated
//! little-endian f64 payloads. Round trips are bit-exact.

use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &str = "latentlm-ckpt v1";

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    let mut offset = 0u64;
    for p in params.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "{} {} f64 {}\n",
            p.name,
            dims.join(","),
            offset
        ));
        offset += (p.value.len() * 8) as u64;
    }
    manifest.push('\n');

    let mut file = std::fs::File::create(path)?;
    file.write_all(manifest.as_bytes())?;
    for p in params.iter() {
        for v in p.value.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;

    // Manifest ends at the first blank line.
    let mut split = None;
    for i in 1..bytes.len() {
        if bytes[i] == b'\n' && bytes[i - 1] == b'\n' {
            split = Some(i + 1);
            break;
        }
    }
    let split = split.ok_or_else(|| Error::Checkpoint("missing manifest terminator".into()))?;
    let manifest = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let payload = &bytes[split..];

    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("bad magic".into()));
    }

    let mut params = ParamSet::new();
    for line in lines {
        if line.is_empty() {
            break;
        }
        let mut fields = line.split(' ');
        let (name, shape_s, dtype, offset_s) = match (
            fields.next(),
            fields.next(),
            fields.next(),
            fields.next(),
        ) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return Err(Error::Checkpoint(format!("bad manifest line: {line}"))),
        };
        if dtype != "f64" {
            return Err(Error::Checkpoint(format!("unsupported dtype {dtype}")));
        }
        let shape: Vec<usize> = if shape_s.is_empty() {
            Vec::new()
        } else {
            shape_s
                .split(',')
                .map(|d| {
                    d.parse()
                        .map_err(|_| Error::Checkpoint(format!("bad extent {d}")))
                })
                .collect::<Result<_>>()?
        };
        let offset: usize = offset_s
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad offset {offset_s}")))?;
        let n: usize = shape.iter().product();
        let end = offset + n * 8;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "{name}: payload range {offset}..{end} exceeds file"
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in payload[offset..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        params.add(name, Tensor::new(&shape, data)?);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = rng_from_seed(11);
        let mut params = ParamSet::new();
        params.add("enc.w", Tensor::randn(&[3, 5], &mut rng));
        params.add("enc.b", Tensor::randn(&[5], &mut rng));
        // Values that stress the byte encoding.
        params.add(
            "edge",
            Tensor::from_vec(vec![0.0, -0.0, f64::MIN_POSITIVE, 1.0 + f64::EPSILON, -1e300]),
        );

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&params, &path).unwrap();
        let loaded = load(&path).unwrap();

        assert_eq!(loaded.len(), params.len());
        for (a, b) in params.iter().zip(loaded.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", a.name);
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut rng = rng_from_seed(4);
        let mut params = ParamSet::new();
        params.add("w", Tensor::randn(&[4, 4], &mut rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load(&path).is_err());
    }
}
