//! Checkpoint serialization: a text manifest of named parameter shapes
//! followed by a flat array of little-endian f64 values. Round trips are
//! bit-exact.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

const MAGIC: &str = "nfpf-ckpt v1";

/// Named parameters plus free-form metadata, in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    /// Stores an f64 as raw bits so the round trip is exact.
    pub fn set_meta_f64(&mut self, key: &str, value: f64) {
        self.meta.push((key.to_string(), format!("{:016x}", value.to_bits())));
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Data(format!("checkpoint missing meta key '{key}'")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Data(format!("meta key '{key}' is not an integer")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        let raw = self.meta(key)?;
        let bits = u64::from_str_radix(raw, 16)
            .map_err(|_| Error::Data(format!("meta key '{key}' is not a hex f64")))?;
        Ok(f64::from_bits(bits))
    }

    pub fn push(&mut self, name: &str, t: &Tensor) {
        self.params.push((name.to_string(), t.clone()));
    }

    pub fn take(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Data(format!("checkpoint missing parameter '{name}'")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{MAGIC}")?;
        for (k, v) in &self.meta {
            writeln!(f, "meta {k} {v}")?;
        }
        for (name, t) in &self.params {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            writeln!(f, "param {name} {}", dims.join("x"))?;
        }
        writeln!(f, "---")?;
        for (_, t) in &self.params {
            for v in &t.data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::Data(format!("not a checkpoint file: {}", path.display())));
        }
        let mut ckpt = Checkpoint::new();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Data("checkpoint truncated before '---'".into()));
            }
            let l = line.trim_end();
            if l == "---" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::Data(format!("malformed meta line '{l}'")))?;
                ckpt.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = l.strip_prefix("param ") {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| Error::Data(format!("malformed param line '{l}'")))?;
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| d.parse().map_err(|_| Error::Data(format!("bad shape '{dims}'"))))
                    .collect::<Result<_>>()?;
                shapes.push((name.to_string(), shape));
            } else {
                return Err(Error::Data(format!("unexpected manifest line '{l}'")));
            }
        }
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            reader.read_exact(&mut buf).map_err(|_| {
                Error::Data(format!("checkpoint payload too short for parameter '{name}'"))
            })?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?.with_grad();
            ckpt.params.push((name, t));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("obs_dim", 16usize);
        ckpt.set_meta_f64("sigma", 0.1 + 0.2);
        ckpt.push("a.w", &Tensor::kaiming_uniform(vec![3, 5], 5, &mut rng));
        ckpt.push("a.b", &Tensor::kaiming_uniform(vec![3], 5, &mut rng));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();

        assert_eq!(back.meta_usize("obs_dim").unwrap(), 16);
        assert_eq!(back.meta_f64("sigma").unwrap().to_bits(), (0.1f64 + 0.2).to_bits());
        for ((n1, t1), (n2, t2)) in ckpt.params.iter().zip(&back.params) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            let bits1: Vec<u64> = t1.data.iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = t2.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, "hello world\n").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Data(_))));
    }
}
