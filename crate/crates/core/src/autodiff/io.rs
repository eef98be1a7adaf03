//! Model files: a JSON manifest (graph structure, tensor names, shapes and
//! byte offsets) next to a little-endian `f64` blob with the same stem and a
//! `.bin` extension.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::tensor::Tensor;
use super::AutodiffError;

/// Named graphs plus free-form metadata, saved and loaded together.
#[derive(Debug, Clone, Default)]
pub struct ModelBundle {
    pub graphs: BTreeMap<String, Graph>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    blob: String,
    graphs: BTreeMap<String, Graph>,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

const FORMAT: &str = "phylink-model-1";

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<(), AutodiffError> {
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor, trainable: bool, blob: &mut Vec<u8>| {
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset: blob.len(), trainable });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (gname, g) in &bundle.graphs {
        for (pname, t) in g.param_names().into_iter().zip(g.params()) {
            push(format!("{gname}/{pname}"), t, true, &mut blob);
        }
        for (sname, t) in g.state_entries() {
            push(format!("{gname}/{sname}"), t, false, &mut blob);
        }
    }
    let bin = blob_path(path);
    let manifest = Manifest {
        format: FORMAT.into(),
        blob: bin.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        graphs: bundle.graphs.clone(),
        tensors,
        meta: bundle.meta.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| AutodiffError::Manifest(e.to_string()))?;
    fs::write(path, text)?;
    fs::write(bin, blob)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, AutodiffError> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| AutodiffError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(AutodiffError::Manifest(format!("unknown format {:?}", manifest.format)));
    }
    let blob = fs::read(path.with_file_name(&manifest.blob))?;
    let by_name: BTreeMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let read = |name: &str, expect: &[usize]| -> Result<Tensor, AutodiffError> {
        let e = by_name.get(name).ok_or_else(|| AutodiffError::Manifest(format!("missing tensor {name}")))?;
        if e.shape != expect {
            return Err(AutodiffError::Manifest(format!("{name}: shape {:?}, graph expects {expect:?}", e.shape)));
        }
        let n: usize = e.shape.iter().product();
        let bytes = blob
            .get(e.offset..e.offset + 8 * n)
            .ok_or_else(|| AutodiffError::Manifest(format!("{name}: blob too short")))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        Tensor::new(e.shape.clone(), data)
    };
    let mut graphs = manifest.graphs;
    for (gname, g) in graphs.iter_mut() {
        g.allocate();
        let names = g.param_names();
        let loaded: Vec<Tensor> = names
            .iter()
            .zip(g.params())
            .map(|(n, t)| read(&format!("{gname}/{n}"), t.shape()))
            .collect::<Result<_, _>>()?;
        for (dst, src) in g.params_mut().into_iter().zip(loaded) {
            *dst = src;
        }
        let snames: Vec<(String, Vec<usize>)> =
            g.state_entries().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let loaded: Vec<Tensor> =
            snames.iter().map(|(n, s)| read(&format!("{gname}/{n}"), s)).collect::<Result<_, _>>()?;
        for (dst, src) in g.state_mut().into_iter().zip(loaded) {
            *dst = src;
        }
    }
    Ok(ModelBundle { graphs, meta: manifest.meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::PowerScope;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut g = Graph::new(vec![3]);
        let d = g.dense("d", 0, 4);
        let b = g.batch_norm("bn", d);
        g.unit_power("p", b, PowerScope::Batch);
        g.init_weights(11);
        let mut bundle = ModelBundle::default();
        bundle.graphs.insert("m".into(), g);
        bundle.meta = serde_json::json!({"kind": "test"});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_bundle(&bundle, &path).unwrap();
        let back = load_bundle(&path).unwrap();
        let (a, b) = (&bundle.graphs["m"], &back.graphs["m"]);
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        assert_eq!(back.meta["kind"], "test");
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 2.0, 1.0, 0.0, -3.0]).unwrap();
        assert_eq!(a.infer(&x).unwrap(), b.infer(&x).unwrap());
    }
}
