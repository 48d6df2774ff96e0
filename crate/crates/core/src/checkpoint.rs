//! Model checkpoints: a safetensors archive of the weights with the
//! architecture in its metadata, plus a `key=value` sidecar for inspection.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use cdc_tensor::{ParamStore, Scalar, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::transforms::{ArchConfig, Model};
use crate::{Error, Result};

const FORMAT_TAG: &str = "cdc-model-1";

fn ck(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

fn dtype_of<T: Scalar>() -> Dtype {
    if T::NAME == "f64" {
        Dtype::F64
    } else {
        Dtype::F32
    }
}

fn to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * std::mem::size_of::<T>());
    for &v in t.data() {
        match dtype_of::<T>() {
            Dtype::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            _ => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        }
    }
    out
}

fn from_view<T: Scalar>(name: &str, v: &TensorView<'_>) -> Result<Tensor<T>> {
    let d = v.data();
    let data: Vec<T> = match v.dtype() {
        Dtype::F32 => d.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
        Dtype::F64 => d.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
        other => return Err(Error::Checkpoint(format!("tensor {name} has unsupported dtype {other:?}"))),
    };
    Ok(Tensor::from_vec(v.shape(), data))
}

/// Write named tensors with string metadata.
pub fn write_tensors<T: Scalar>(path: &Path, tensors: &[(String, &Tensor<T>)], meta: HashMap<String, String>) -> Result<()> {
    let bytes: Vec<Vec<u8>> = tensors.iter().map(|(_, t)| to_bytes(t)).collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|((n, t), b)| Ok((n.clone(), TensorView::new(dtype_of::<T>(), t.shape().to_vec(), b).map_err(ck)?)))
        .collect::<Result<Vec<_>>>()?;
    let out = safetensors::serialize(views, &Some(meta)).map_err(ck)?;
    // Write then rename so a crash never leaves a truncated checkpoint.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read every tensor (sorted by name) and the metadata map.
pub fn read_tensors<T: Scalar>(path: &Path) -> Result<(Vec<(String, Tensor<T>)>, HashMap<String, String>)> {
    let buf = fs::read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&buf).map_err(ck)?;
    let meta = meta.metadata().clone().unwrap_or_default();
    let st = SafeTensors::deserialize(&buf).map_err(ck)?;
    let mut out = Vec::new();
    for (name, view) in st.tensors() {
        let t = from_view(&name, &view)?;
        out.push((name, t));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((out, meta))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Path of the plain-text sidecar next to a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Save weights, architecture and schedule.
pub fn save_model<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    let arch_json = serde_json::to_string(&model.arch).map_err(ck)?;
    let id = hex(&model.model_id());
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT_TAG.to_string());
    meta.insert("arch".to_string(), arch_json);
    meta.insert("model_id".to_string(), id.clone());
    let tensors: Vec<(String, &Tensor<T>)> = model.params.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    write_tensors(path, &tensors, meta)?;

    let a = &model.arch;
    let s = a.schedule;
    let mut side = BTreeMap::new();
    side.insert("format", FORMAT_TAG.to_string());
    side.insert("preset", a.preset.clone());
    side.insert("parameterization", serde_json::to_value(a.parameterization).map_err(ck)?.as_str().unwrap_or_default().to_string());
    side.insert("c_z", a.c_z.to_string());
    side.insert("schedule_kind", format!("{:?}", s.kind).to_lowercase());
    side.insert("n_train", s.n_train.to_string());
    side.insert("schedule_a", s.a.to_string());
    side.insert("schedule_b", s.b.to_string());
    side.insert("model_id", id);
    side.insert("dtype", T::NAME.to_string());
    side.insert("tensors", model.params.len().to_string());
    side.insert("weights", model.params.numel().to_string());
    let text: String = side.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(sidecar_path(path), text)?;
    Ok(())
}

/// Load a checkpoint written by [`save_model`], converting to `T`.
pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let (tensors, meta) = read_tensors::<T>(path).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", path.display())),
        other => other,
    })?;
    if meta.get("format").map(String::as_str) != Some(FORMAT_TAG) {
        return Err(Error::Checkpoint(format!("{} is not a model checkpoint", path.display())));
    }
    let arch: ArchConfig = serde_json::from_str(meta.get("arch").ok_or_else(|| ck("missing arch metadata"))?).map_err(ck)?;
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        store.add(name, t);
    }
    Model::from_params(arch, store)
}

/// Parse a sidecar into its key/value pairs.
pub fn read_sidecar(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(sidecar_path(path))?;
    Ok(text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.trim().to_string(), v.trim().to_string())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_keeps_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::new(ArchConfig::small(), 11).unwrap();
        save_model(&path, &m).unwrap();
        let back: Model<f32> = load_model(&path).unwrap();
        assert_eq!(back.model_id(), m.model_id());
        assert_eq!(back.arch, m.arch);
        for (id, name, t) in m.params.iter() {
            assert_eq!(back.params.get(back.params.id(name).unwrap()), t, "{name} {id:?}");
        }
        let side = read_sidecar(&path).unwrap();
        assert_eq!(side["parameterization"], "x_pred");
        assert_eq!(side["model_id"], hex(&m.model_id()));
        assert_eq!(side["schedule_kind"], "cosine");
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let t = Tensor::<f32>::zeros(&[2]);
        write_tensors(&path, &[("a".into(), &t)], HashMap::new()).unwrap();
        assert!(matches!(load_model::<f32>(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(load_model::<f32>(&dir.path().join("none")), Err(Error::Checkpoint(_))));
    }
}
