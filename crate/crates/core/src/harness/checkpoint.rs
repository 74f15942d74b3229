//! Binary container:
//!
//! ```text
//! roadclip-checkpoint <version>
//! dtype f32
//! epoch <n>
//! adam_step <n>
//! config_bytes <n>
//! tensors <n>
//! <kind> <name> <d0>x<d1>...      one line per tensor
//! end
//! <config TOML><tensor data, little-endian, table order>
//! ```

use std::path::Path;

use super::{RunConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::RoadClip;
use crate::tensor::{AdamState, Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "roadclip-checkpoint";

struct Entry<'a> {
    kind: &'static str,
    name: &'a str,
    tensor: &'a Tensor<f32>,
}

fn entries(state: &TrainState) -> Vec<Entry<'_>> {
    let store = &state.model.store;
    let mut out: Vec<Entry> = store
        .iter()
        .map(|(_, name, tensor)| Entry {
            kind: "param",
            name,
            tensor,
        })
        .collect();
    for (kind, moments) in [("adam_m", &state.adam.m), ("adam_v", &state.adam.v)] {
        out.extend(store.iter().zip(moments).map(|((_, name, _), tensor)| Entry {
            kind,
            name,
            tensor,
        }));
    }
    out.push(Entry {
        kind: "anchors",
        name: "concept.anchors",
        tensor: &state.model.prototypes.anchors,
    });
    out
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let config = state.config.to_toml();
    let table = entries(state);
    let mut head = format!(
        "{MAGIC} {FORMAT_VERSION}\ndtype {}\nepoch {}\nadam_step {}\nconfig_bytes {}\ntensors {}\n",
        f32::NAME,
        state.epoch,
        state.adam.step,
        config.len(),
        table.len()
    );
    for e in &table {
        head.push_str(&format!("{} {} {}\n", e.kind, e.name, dims(e.tensor.shape())));
    }
    head.push_str("end\n");
    let mut out = head.into_bytes();
    out.extend_from_slice(config.as_bytes());
    for e in &table {
        for &v in e.tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path, reason)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.data[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.bad("truncated header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| self.bad("header is not UTF-8"))
    }

    fn field<V: std::str::FromStr>(&mut self, key: &str) -> Result<V> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| self.bad(format!("expected `{key} <value>`, found `{line}`")))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.bad("truncated data section"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn from_bytes(data: &[u8], path: &Path) -> Result<TrainState> {
    let mut r = Reader { data, pos: 0, path };
    let magic = r.line()?;
    let version = magic
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| r.bad("not a checkpoint"))?;
    if version != FORMAT_VERSION {
        return Err(r.bad(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let dtype: String = r.field("dtype")?;
    if dtype != f32::NAME {
        return Err(r.bad(format!("dtype {dtype} unsupported")));
    }
    let epoch: usize = r.field("epoch")?;
    let adam_step: u64 = r.field("adam_step")?;
    let config_len: usize = r.field("config_bytes")?;
    let count: usize = r.field("tensors")?;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let line = r.line()?;
        let mut parts = line.split(' ');
        let (Some(kind), Some(name), Some(shape), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(r.bad(format!("bad table line `{line}`")));
        };
        let shape = shape
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| r.bad(format!("bad shape in `{line}`")))?;
        table.push((kind.to_string(), name.to_string(), shape));
    }
    if r.line()? != "end" {
        return Err(r.bad("missing header terminator"));
    }
    let config_text =
        std::str::from_utf8(r.take(config_len)?).map_err(|_| r.bad("config is not UTF-8"))?;
    let config = RunConfig::from_toml(config_text, &[])?;
    let mut model: RoadClip<f32> = RoadClip::new(config.model_config(), config.seed)?;
    let mut adam = AdamState::new(&model.store);
    adam.step = adam_step;
    let mut seen = vec![[false; 3]; model.store.len()];
    let mut anchors = false;
    for (kind, name, shape) in table {
        let n: usize = shape.iter().product();
        let raw = r.take(n * f32::BYTES)?;
        let values: Vec<f32> = raw.chunks_exact(f32::BYTES).map(f32::read_le).collect();
        let t = Tensor::new(shape, values)?;
        let slot = match kind.as_str() {
            "anchors" if name == "concept.anchors" => {
                if t.shape() != model.prototypes.anchors.shape() {
                    return Err(r.bad("anchor shape differs from the configured model"));
                }
                model.prototypes.anchors = t;
                anchors = true;
                continue;
            }
            "param" => 0,
            "adam_m" => 1,
            "adam_v" => 2,
            _ => return Err(r.bad(format!("unknown entry `{kind} {name}`"))),
        };
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| r.bad(format!("parameter `{name}` not in the configured model")))?;
        let target = match slot {
            0 => model.store.get_mut(id),
            1 => &mut adam.m[id.index()],
            _ => &mut adam.v[id.index()],
        };
        if target.shape() != t.shape() {
            return Err(r.bad(format!("shape of `{name}` differs from the configured model")));
        }
        *target = t;
        seen[id.index()][slot] = true;
    }
    if r.pos != data.len() {
        return Err(r.bad("trailing bytes after data section"));
    }
    if let Some(i) = seen.iter().position(|s| !s.iter().all(|&b| b)) {
        return Err(r.bad(format!("missing entries for `{}`", model.store.name(crate::tensor::ParamId(i)))));
    }
    if !anchors {
        return Err(r.bad("missing prototype anchors"));
    }
    Ok(TrainState {
        config,
        model,
        adam,
        epoch,
    })
}
