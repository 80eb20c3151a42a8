//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! BLISS-CKPT v1\n
//! <key>=<value>\n          (zero or more metadata lines)
//! params <count>\n
//! then <count> times:
//!   <name> <d0>x<d1>...\n
//!   <u64 LE payload length in bytes><payload: little-endian f64 values>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use bliss_tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &str = "BLISS-CKPT v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') || k.starts_with("params") {
                return Err(bad(format!("unencodable metadata key {k:?}")));
            }
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w, "params {}", self.tensors.len())?;
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(bad(format!("unencodable tensor name {name:?}")));
            }
            let dims = t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            writeln!(w, "{name} {dims}")?;
            w.write_all(&((t.len() * 8) as u64).to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let mut line = Vec::new();
        let mut next_line = |r: &mut dyn BufRead| -> Result<String> {
            line.clear();
            let n = r.read_until(b'\n', &mut line)?;
            if n == 0 || line.last() != Some(&b'\n') {
                return Err(bad("unexpected end of file"));
            }
            line.pop();
            String::from_utf8(line.clone()).map_err(|_| bad("header line is not UTF-8"))
        };
        if next_line(r)? != MAGIC {
            return Err(bad("missing BLISS-CKPT v1 header"));
        }
        let mut meta = Vec::new();
        let count = loop {
            let l = next_line(r)?;
            if let Some(n) = l.strip_prefix("params ") {
                break n.parse::<usize>().map_err(|_| bad(format!("bad tensor count {n:?}")))?;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| bad(format!("bad metadata line {l:?}")))?;
            meta.push((k.to_string(), v.to_string()));
        };
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let l = next_line(r)?;
            let (name, dims) = l.split_once(' ').ok_or_else(|| bad(format!("bad tensor line {l:?}")))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape {dims:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let mut len_bytes = [0u8; 8];
            r.read_exact(&mut len_bytes)?;
            let bytes = u64::from_le_bytes(len_bytes) as usize;
            let expected = shape.iter().product::<usize>() * 8;
            if bytes != expected {
                return Err(bad(format!("{name}: payload of {bytes} bytes does not match shape {shape:?}")));
            }
            let mut payload = vec![0u8; bytes];
            r.read_exact(&mut payload)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name.to_string(), Tensor::new(shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: vec![("model.d_model".into(), "4".into()), ("note".into(), "a=b".into())],
            tensors: vec![
                ("w".into(), Tensor::new(vec![2, 2], vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("b".into(), Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
            ],
        }
    }

    #[test]
    fn bit_exact_round_trip() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"BLISS-CKPT v1\nmodel.d_model=4\nnote=a=b\nparams 2\nw 2x2\n"));
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.meta, ck.meta);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(&mut extra.as_slice()).is_err());
        assert!(Checkpoint::read_from(&mut &b"BLISS-CKPT v2\nparams 0\n"[..]).is_err());
    }
}
