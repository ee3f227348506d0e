//! Binary checkpoints: magic, header length, JSON header, little-endian f32.
//!
//! ```text
//! b"OURGANCK" | u64 LE header length | JSON header | f32 LE tensor data
//! ```

use crate::error::{Error, Result};
use crate::global_generator::{CascadeState, GlobalConfig};
use crate::nn::{load_state_dict, Module};
use crate::pyramid::PyramidSchedule;
use crate::srnet::{SrArch, SrModel};
use crate::tensor::{Shape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

pub const MAGIC: &[u8; 8] = b"OURGANCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 4],
    /// Element offset into the data section.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Writes via a temporary file and rename, so readers never see a
/// partial checkpoint.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    let mut offset = 0;
    for (name, t) in &ckpt.tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().dims(),
            offset,
        });
        offset += t.numel();
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        kind: ckpt.kind.clone(),
        meta: ckpt.meta.clone(),
        tensors: entries,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in ckpt.tensors.values() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format(format!("checkpoint {}: {m}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {}", header.format_version)));
    }
    let data = &bytes[data_start..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let [n, c, h, w] = e.shape;
        let len = n * c * h * w;
        let (lo, hi) = (4 * e.offset, 4 * (e.offset + len));
        if hi > data.len() {
            return Err(bad(&format!("tensor {} runs past the end", e.name)));
        }
        let vals = data[lo..hi]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(e.name, Tensor::from_vec(Shape::new(n, c, h, w), vals));
    }
    Ok(Checkpoint {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

fn collect(prefix: &str, m: &dyn Module, out: &mut BTreeMap<String, Tensor>) {
    m.visit(prefix, &mut |name, t: &Arc<Tensor>| {
        out.insert(name, (**t).clone());
    });
}

fn sub_state(all: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let p = format!("{prefix}.");
    all.iter()
        .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CascadeMeta {
    schedule: PyramidSchedule,
    config: GlobalConfig,
    noise_amplitudes: Vec<f32>,
    trained_scales: usize,
}

pub const CASCADE_KIND: &str = "cascade";
pub const SR_KIND: &str = "sr";

pub fn cascade_checkpoint(state: &CascadeState) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    for (name, net) in state.networks() {
        collect(&name, net, &mut tensors);
    }
    Checkpoint {
        kind: CASCADE_KIND.into(),
        meta: serde_json::to_value(CascadeMeta {
            schedule: state.schedule.clone(),
            config: state.config.clone(),
            noise_amplitudes: state.noise_amplitudes.clone(),
            trained_scales: state.trained_scales,
        })
        .expect("meta serialises"),
        tensors,
    }
}

pub fn cascade_from_checkpoint(ckpt: &Checkpoint) -> Result<CascadeState> {
    if ckpt.kind != CASCADE_KIND {
        return Err(Error::Format(format!("expected a cascade checkpoint, got {:?}", ckpt.kind)));
    }
    let meta: CascadeMeta = serde_json::from_value(ckpt.meta.clone())?;
    let mut state = CascadeState::new(meta.schedule, meta.config, 0);
    if meta.noise_amplitudes.len() != state.schedule.num_generators() {
        return Err(Error::Format("noise amplitudes do not match the schedule".into()));
    }
    state.noise_amplitudes = meta.noise_amplitudes;
    state.trained_scales = meta.trained_scales;
    for (name, net) in state.networks_mut() {
        load_state_dict(net, &sub_state(&ckpt.tensors, &name)).map_err(|e| Error::Format(format!("{name}: {e}")))?;
    }
    Ok(state)
}

pub fn sr_checkpoint(model: &SrModel) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    collect("", model, &mut tensors);
    Checkpoint {
        kind: SR_KIND.into(),
        meta: serde_json::to_value(&model.arch).expect("arch serialises"),
        tensors,
    }
}

pub fn sr_from_checkpoint(ckpt: &Checkpoint) -> Result<SrModel> {
    if ckpt.kind != SR_KIND {
        return Err(Error::Format(format!("expected an sr checkpoint, got {:?}", ckpt.kind)));
    }
    let arch: SrArch = serde_json::from_value(ckpt.meta.clone())?;
    let mut model = SrModel::new(arch, 0)?;
    load_state_dict(&mut model, &ckpt.tensors).map_err(|e| Error::Format(format!("sr: {e}")))?;
    Ok(model)
}

pub fn save_cascade(path: &Path, state: &CascadeState) -> Result<()> {
    write_checkpoint(path, &cascade_checkpoint(state))
}

pub fn load_cascade(path: &Path) -> Result<CascadeState> {
    cascade_from_checkpoint(&read_checkpoint(path)?)
}

pub fn save_sr(path: &Path, model: &SrModel) -> Result<()> {
    write_checkpoint(path, &sr_checkpoint(model))
}

pub fn load_sr(path: &Path) -> Result<SrModel> {
    sr_from_checkpoint(&read_checkpoint(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param_bits;
    use crate::pyramid::build_schedule;

    #[test]
    fn sr_round_trip_is_bitwise() {
        let arch = SrArch {
            num_blocks: 1,
            channels: 8,
            growth_channels: 4,
            ratio: 2,
            zero_init_last: false,
        };
        let m = SrModel::new(arch, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sr.ckpt");
        save_sr(&p, &m).unwrap();
        let back = load_sr(&p).unwrap();
        assert_eq!(param_bits(&back), param_bits(&m));
        assert_eq!(back.arch, m.arch);
    }

    #[test]
    fn cascade_round_trip_is_bitwise() {
        let s = build_schedule((16, 16), 0.75, 0, 1).unwrap();
        let cfg = GlobalConfig {
            channels: 4,
            intermediate_layers: 1,
            ..GlobalConfig::default()
        };
        let mut st = CascadeState::new(s, cfg, 5);
        st.noise_amplitudes[1] = 0.25;
        st.trained_scales = 2;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_cascade(&p, &st).unwrap();
        let back = load_cascade(&p).unwrap();
        assert_eq!(back.noise_amplitudes, st.noise_amplitudes);
        assert_eq!(back.trained_scales, 2);
        for ((na, a), (nb, b)) in st.networks().into_iter().zip(back.networks()) {
            assert_eq!(na, nb);
            assert_eq!(param_bits(a), param_bits(b));
        }
        assert_eq!(back.sample(9).unwrap(), st.sample(9).unwrap());
    }

    #[test]
    fn corrupt_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(read_checkpoint(&p).is_err());
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&1000u64.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_checkpoint(&p).is_err());
        assert!(read_checkpoint(&dir.path().join("missing")).is_err());
    }
}
