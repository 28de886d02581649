//! Checkpoint container.
//!
//! ```text
//! MMEMBED-CHECKPOINT
//! format_version = 1
//! [config]
//! d_model = 64
//! ...
//! [tensors]
//! backbone.tok_embed = 96 64
//! ...
//! end_header
//! <f32 little-endian, row-major, tensors in header order>
//! ```
//!
//! Any section other than `[tensors]` is free-form key-value metadata and is
//! preserved verbatim, so load followed by save reproduces the input bytes.

use std::path::Path;

use ndarray::Array2;

use super::config::BackboneConfig;
use crate::autograd::{ParamStore, Real};
use crate::error::{Error, Result};

const MAGIC: &str = "MMEMBED-CHECKPOINT";
const END: &str = "end_header";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Metadata sections in file order, each a list of key-value pairs.
    pub sections: Vec<(String, Vec<(String, String)>)>,
    pub tensors: Vec<(String, Array2<f32>)>,
}

impl Checkpoint {
    pub fn from_store<F: Real>(config: &BackboneConfig, store: &ParamStore<F>) -> Self {
        let tensors = store
            .iter()
            .map(|(_, name, v)| (name.to_string(), v.mapv(|x| x.as_f64() as f32)))
            .collect();
        Self {
            sections: vec![("config".to_string(), config.to_pairs())],
            tensors,
        }
    }

    pub fn with_section(mut self, name: &str, pairs: Vec<(String, String)>) -> Self {
        self.sections.push((name.to_string(), pairs));
        self
    }

    pub fn section(&self, name: &str) -> Option<&[(String, String)]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
    }

    pub fn config(&self) -> Result<BackboneConfig> {
        let pairs = self
            .section("config")
            .ok_or_else(|| Error::Checkpoint("missing [config] section".into()))?;
        BackboneConfig::from_pairs(pairs)
    }

    pub fn to_store<F: Real>(&self) -> ParamStore<F> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            store.add(name.clone(), t.mapv(|x| F::of(x as f64)));
        }
        store
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(MAGIC);
        header.push('\n');
        header.push_str(&format!("format_version = {FORMAT_VERSION}\n"));
        for (name, pairs) in &self.sections {
            header.push_str(&format!("[{name}]\n"));
            for (k, v) in pairs {
                header.push_str(&format!("{k} = {v}\n"));
            }
        }
        header.push_str("[tensors]\n");
        for (name, t) in &self.tensors {
            header.push_str(&format!("{name} = {} {}\n", t.nrows(), t.ncols()));
        }
        header.push_str(END);
        header.push('\n');
        let mut out = header.into_bytes();
        for (_, t) in &self.tensors {
            for x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut offset = 0;
        let mut lines = Vec::new();
        loop {
            let nl = bytes[offset..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&bytes[offset..offset + nl]).map_err(|_| bad("header is not UTF-8"))?;
            offset += nl + 1;
            if line == END {
                break;
            }
            lines.push(line.to_string());
        }
        let mut it = lines.into_iter();
        if it.next().as_deref() != Some(MAGIC) {
            return Err(bad("not a checkpoint file"));
        }
        match it.next() {
            Some(l) if l == format!("format_version = {FORMAT_VERSION}") => {}
            Some(l) => return Err(Error::Checkpoint(format!("unsupported version line {l:?}"))),
            None => return Err(bad("missing version")),
        }
        let mut sections: Vec<(String, Vec<(String, String)>)> = Vec::new();
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        let mut in_tensors = false;
        for line in it {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                in_tensors = name == "tensors";
                if !in_tensors {
                    sections.push((name.to_string(), Vec::new()));
                }
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
            if in_tensors {
                let dims: Vec<usize> = v
                    .split(' ')
                    .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape for {k}"))))
                    .collect::<Result<_>>()?;
                if dims.len() != 2 {
                    return Err(Error::Checkpoint(format!("tensor {k} must be 2-D")));
                }
                shapes.push((k.to_string(), dims[0], dims[1]));
            } else {
                let sec = sections
                    .last_mut()
                    .ok_or_else(|| bad("key outside of any section"))?;
                sec.1.push((k.to_string(), v.to_string()));
            }
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, r, c) in shapes {
            let n = r * c;
            let end = offset + 4 * n;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("truncated data for tensor {name}")));
            }
            let data: Vec<f32> = bytes[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            offset = end;
            tensors.push((name, Array2::from_shape_vec((r, c), data).expect("shape matches length")));
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { sections, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use crate::rng::rng_from_seed;

    #[test]
    fn load_save_is_bit_identical() {
        let cfg = BackboneConfig {
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            vocab_size: 10,
            patch_dim: 4,
            max_len: 8,
            ..Default::default()
        };
        let mut store = ParamStore::<f64>::new();
        Backbone::init(&cfg, &mut store, &mut rng_from_seed(1)).unwrap();
        let ck = Checkpoint::from_store(&cfg, &store).with_section("cpt", vec![("tied_head".into(), "false".into())]);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config().unwrap(), cfg);
        let store32: ParamStore<f32> = back.to_store();
        Backbone::bind(&cfg, &store32).unwrap();
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(Checkpoint::from_bytes(b"hello\nend_header\n").is_err());
        let cfg = BackboneConfig {
            d_model: 4,
            n_heads: 2,
            d_ff: 4,
            vocab_size: 6,
            patch_dim: 2,
            max_len: 4,
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new();
        Backbone::init(&cfg, &mut store, &mut rng_from_seed(1)).unwrap();
        let mut bytes = Checkpoint::from_store(&cfg, &store).to_bytes();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
