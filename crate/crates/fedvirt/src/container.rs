//! The on-disk named-tensor container used for model checkpoints, virtual
//! datasets and dataset snapshots.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FVTC" | version: u32 = 1 | tag_len: u32 | tag: utf-8 bytes
//! entry_count: u32
//! per entry: name_len: u32 | name | ndim: u32 | dims: u32 x ndim
//! payloads: f64 little-endian, row-major, in entry order
//! ```
//!
//! Reading back a written file reproduces every bit of every tensor.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::LabeledDataset;
use crate::distill::VirtualDataset;
use crate::error::{Error, Result};
use crate::models::{self, Arch, ModelParams};
use crate::tensor::{NamedTensors, Tensor};

const MAGIC: &[u8; 4] = b"FVTC";
const VERSION: u32 = 1;

/// A tagged, ordered set of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub tag: String,
    pub entries: NamedTensors,
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let p = path.display().to_string();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(c.tag.len() as u32).to_le_bytes());
    buf.extend_from_slice(c.tag.as_bytes());
    buf.extend_from_slice(&(c.entries.len() as u32).to_le_bytes());
    for (name, t) in c.entries.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in c.entries.iter() {
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(&p, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_string(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.err(format!("truncated ({n} bytes wanted)")))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }
}

pub fn read_container(path: &Path) -> Result<Container> {
    let p = path.display().to_string();
    let buf = fs::read(path).map_err(|e| Error::io(&p, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: &p,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse {
            path: p.clone(),
            offset: 0,
            detail: "bad magic".to_string(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let tag = r.string()?;
    let count = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        shapes.push((name, shape));
    }
    let mut entries = NamedTensors::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push(name, Tensor::from_vec(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(Container { tag, entries })
}

// ---------------------------------------------------------------------------
// Model checkpoints

pub fn save_model(path: &Path, params: &ModelParams) -> Result<()> {
    write_container(
        path,
        &Container {
            tag: params.arch.tag().to_string(),
            entries: params.all(),
        },
    )
}

/// Rebuilds a model from a checkpoint; the architecture's dimensions are
/// recovered from the stored shapes.
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let c = read_container(path)?;
    let missing = |what: &str| Error::contract(format!("checkpoint lacks `{what}`"));
    let arch = match c.tag.as_str() {
        "convnet" => {
            let conv1 = c.entries.get("conv1.weight").ok_or_else(|| missing("conv1.weight"))?;
            let fc = c.entries.get("fc.weight").ok_or_else(|| missing("fc.weight"))?;
            let width = conv1.shape()[0];
            let in_channels = conv1.shape()[1];
            let num_classes = fc.shape()[0];
            let feat = fc.shape()[1];
            if width == 0 || feat % width != 0 {
                return Err(Error::contract("inconsistent convnet shapes".to_string()));
            }
            let spatial = feat / width;
            let side = (spatial as f64).sqrt().round() as usize;
            if side * side != spatial {
                return Err(Error::contract("inconsistent convnet feature dim".to_string()));
            }
            Arch::ConvNet {
                in_channels,
                num_classes,
                width,
                image_side: side * 8,
                groups: models::group_count(width),
            }
        }
        "mlp" => {
            let fc1 = c.entries.get("fc1.weight").ok_or_else(|| missing("fc1.weight"))?;
            let fc2 = c.entries.get("fc2.weight").ok_or_else(|| missing("fc2.weight"))?;
            Arch::Mlp {
                in_dim: fc1.shape()[1],
                num_classes: fc2.shape()[0],
                hidden: fc1.shape()[0],
            }
        }
        other => {
            return Err(Error::contract(format!(
                "unknown architecture tag `{other}`"
            )))
        }
    };
    ModelParams::from_all(arch, c.entries)
}

// ---------------------------------------------------------------------------
// Virtual datasets

pub fn save_virtual(path: &Path, v: &VirtualDataset) -> Result<()> {
    let mut entries = NamedTensors::new();
    entries.push("images", v.images.clone());
    entries.push(
        "labels",
        Tensor::from_vec(vec![v.labels.len()], v.labels.iter().map(|&l| l as f64).collect())?,
    );
    entries.push("ipc", Tensor::scalar(v.ipc as f64));
    let c = v.pixel_range.len();
    entries.push(
        "pixel_min",
        Tensor::from_vec(vec![c], v.pixel_range.iter().map(|r| r.0).collect())?,
    );
    entries.push(
        "pixel_max",
        Tensor::from_vec(vec![c], v.pixel_range.iter().map(|r| r.1).collect())?,
    );
    write_container(
        path,
        &Container {
            tag: "virtual".to_string(),
            entries,
        },
    )
}

pub fn load_virtual(path: &Path) -> Result<VirtualDataset> {
    let c = read_container(path)?;
    if c.tag != "virtual" {
        return Err(Error::contract(format!("`{}` is not a virtual dataset", c.tag)));
    }
    let get = |name: &str| {
        c.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::contract(format!("virtual dataset lacks `{name}`")))
    };
    let images = get("images")?;
    let labels: Vec<usize> = get("labels")?.data().iter().map(|&v| v as usize).collect();
    let ipc = get("ipc")?.item() as usize;
    let mins = get("pixel_min")?;
    let maxs = get("pixel_max")?;
    let pixel_range: Vec<(f64, f64)> = mins.data().iter().zip(maxs.data()).map(|(&a, &b)| (a, b)).collect();
    let v = VirtualDataset {
        images,
        labels,
        ipc,
        pixel_range,
    };
    v.check_invariants()?;
    Ok(v)
}

// ---------------------------------------------------------------------------
// Labeled datasets

pub fn save_dataset(path: &Path, d: &LabeledDataset) -> Result<()> {
    let mut entries = NamedTensors::new();
    entries.push("images", d.images.clone());
    entries.push(
        "labels",
        Tensor::from_vec(vec![d.labels.len()], d.labels.iter().map(|&l| l as f64).collect())?,
    );
    entries.push("class_count", Tensor::scalar(d.class_count as f64));
    let c = d.pixel_range.len();
    entries.push(
        "pixel_min",
        Tensor::from_vec(vec![c], d.pixel_range.iter().map(|r| r.0).collect())?,
    );
    entries.push(
        "pixel_max",
        Tensor::from_vec(vec![c], d.pixel_range.iter().map(|r| r.1).collect())?,
    );
    write_container(
        path,
        &Container {
            tag: format!("dataset:{}", d.provenance),
            entries,
        },
    )
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let c = read_container(path)?;
    let provenance = c
        .tag
        .strip_prefix("dataset:")
        .ok_or_else(|| Error::contract(format!("`{}` is not a dataset container", c.tag)))?
        .to_string();
    let get = |name: &str| {
        c.entries
            .get(name)
            .cloned()
            .ok_or_else(|| Error::contract(format!("dataset lacks `{name}`")))
    };
    let images = get("images")?;
    let labels: Vec<usize> = get("labels")?.data().iter().map(|&v| v as usize).collect();
    let class_count = get("class_count")?.item() as usize;
    let mins = get("pixel_min")?;
    let maxs = get("pixel_max")?;
    let pixel_range: Vec<(f64, f64)> = mins.data().iter().zip(maxs.data()).map(|(&a, &b)| (a, b)).collect();
    LabeledDataset::new(images, labels, class_count, pixel_range, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::distill;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fvt");
        let mut entries = NamedTensors::new();
        entries.push("a", Tensor::from_vec(vec![2, 3], vec![1.5, -0.25, 1e-300, f64::MAX, 0.0, -0.0]).unwrap());
        entries.push("b", Tensor::scalar(42.0));
        let c = Container {
            tag: "test".to_string(),
            entries,
        };
        write_container(&path, &c).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back.tag, c.tag);
        for ((_, x), (_, y)) in c.entries.0.iter().zip(&back.entries.0) {
            for (a, b) in x.data().iter().zip(y.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for p in [
            models::convnet_init(3, 4, 16, 16, 5).unwrap(),
            models::mlp_init(10, 3, 7, 6).unwrap(),
        ] {
            let path = dir.path().join(format!("{}.fvt", p.arch.tag()));
            save_model(&path, &p).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn virtual_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let real = data::blob_digits(24, 1);
        let stats = distill::class_stats(&real);
        let v = distill::init_virtual(&stats, 3, &real.observed_range(), 2).unwrap();
        let path = dir.path().join("v.fvt");
        save_virtual(&path, &v).unwrap();
        assert_eq!(load_virtual(&path).unwrap(), v);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = data::blob_digits(12, 3);
        let path = dir.path().join("d.fvt");
        save_dataset(&path, &d).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.fvt");
        std::fs::write(&path, b"not a container").unwrap();
        assert!(read_container(&path).is_err());
    }
}
