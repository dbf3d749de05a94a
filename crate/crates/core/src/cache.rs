//! On-disk cache of a scene setup: encoded feature grids and source depth
//! buffers, keyed by the checkpoint digest.
//!
//! `<scene>/.svs_cache/bundle.bin`:
//!
//! ```text
//! "SVSCACHE" u32 version
//! u32 meta length, meta JSON
//! u64 store length, feature grids as a parameter store ("feat.%04d")
//! per source: u64 count, count × f64 depth
//! ```

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::io::{read_manifest, Scene};
use crate::pipeline::{setup_scene, Model, SceneBundle};
use crate::tensor::{ParameterStore, Tensor};

pub const CACHE_DIR: &str = ".svs_cache";
pub const CACHE_FILE: &str = "bundle.bin";
pub const CACHE_MAGIC: &[u8; 8] = b"SVSCACHE";
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheMeta {
    /// Digest of the checkpoint the features were encoded with.
    pub checkpoint: String,
    pub sources: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheContents {
    pub meta: CacheMeta,
    pub features: Vec<Tensor<f32>>,
    pub depths: Vec<Vec<f64>>,
}

pub fn cache_path(scene_dir: &Path) -> PathBuf {
    scene_dir.join(CACHE_DIR).join(CACHE_FILE)
}

fn feature_name(k: usize) -> String {
    format!("feat.{k:04}")
}

pub fn encode_cache(contents: &CacheContents) -> Vec<u8> {
    let meta = serde_json::to_vec(&contents.meta).expect("meta serializes");
    let mut store = ParameterStore::new();
    for (k, f) in contents.features.iter().enumerate() {
        store.set(feature_name(k), f.clone());
    }
    let store = store.encode();
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    out.extend_from_slice(&store);
    for d in &contents.depths {
        out.extend_from_slice(&(d.len() as u64).to_le_bytes());
        for v in d {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, Error> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflows"))
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Invalid(format!("feature cache: {}", msg.into()))
}

pub fn decode_cache(bytes: &[u8]) -> Result<CacheContents, Error> {
    let mut r = Cursor { bytes, pos: 0 };
    if r.take(8)? != CACHE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let meta: CacheMeta = serde_json::from_slice(r.take(n)?).map_err(|e| corrupt(e.to_string()))?;
    let n = r.len()?;
    let store = ParameterStore::decode(r.take(n)?)?;
    if store.len() != meta.sources {
        return Err(corrupt(format!("{} feature grids for {} sources", store.len(), meta.sources)));
    }
    let features = (0..meta.sources)
        .map(|k| store.get(&feature_name(k)).cloned().ok_or_else(|| corrupt(format!("missing {}", feature_name(k)))))
        .collect::<Result<Vec<_>, _>>()?;
    let mut depths = Vec::with_capacity(meta.sources);
    for _ in 0..meta.sources {
        let n = r.len()?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("length overflows"))?)?;
        depths.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(CacheContents { meta, features, depths })
}

/// Files a setup depends on: manifest, mesh, cameras and source images.
pub fn scene_inputs(scene_dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let m = read_manifest(scene_dir)?;
    let mut files = vec![scene_dir.join("manifest.txt"), scene_dir.join(&m.mesh), scene_dir.join(&m.cameras)];
    let img_dir = scene_dir.join(&m.images);
    let entries = std::fs::read_dir(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for e in entries {
        files.push(e.map_err(|e| Error::io(&img_dir, e))?.path());
    }
    files.sort();
    Ok(files)
}

fn mtime(path: &Path) -> Result<SystemTime, Error> {
    std::fs::metadata(path).and_then(|m| m.modified()).map_err(|e| Error::io(path, e))
}

/// True when the cache exists, was written with `digest`, and is not older
/// than any scene input.
pub fn cache_is_fresh(scene_dir: &Path, digest: &str) -> bool {
    let path = cache_path(scene_dir);
    let Ok(written) = mtime(&path) else { return false };
    let Ok(inputs) = scene_inputs(scene_dir) else { return false };
    if inputs.iter().any(|p| mtime(p).map_or(true, |t| t > written)) {
        return false;
    }
    read_cache(scene_dir).is_ok_and(|c| c.meta.checkpoint == digest)
}

pub fn read_cache(scene_dir: &Path) -> Result<CacheContents, Error> {
    let path = cache_path(scene_dir);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_cache(&bytes).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

pub fn write_cache(scene_dir: &Path, bundle: &SceneBundle, digest: &str) -> Result<PathBuf, Error> {
    let path = cache_path(scene_dir);
    let dir = path.parent().unwrap();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let contents = CacheContents {
        meta: CacheMeta {
            checkpoint: digest.to_string(),
            sources: bundle.len(),
        },
        features: bundle.features.clone(),
        depths: bundle.depths.iter().map(|d| d.values().to_vec()).collect(),
    };
    std::fs::write(&path, encode_cache(&contents)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Builds a bundle from a cache written for `digest`.
pub fn load_cached_bundle(scene_dir: &Path, scene: &Scene, digest: &str) -> Result<SceneBundle, Error> {
    let c = read_cache(scene_dir)?;
    if c.meta.checkpoint != digest {
        return Err(Error::Invalid(format!(
            "{}: written for checkpoint {}, not {digest}",
            cache_path(scene_dir).display(),
            c.meta.checkpoint
        )));
    }
    SceneBundle::from_cached(scene.mesh.clone(), scene.cameras(), scene.images(), c.features, c.depths)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetupOutcome {
    Reused,
    Built,
}

/// Reuses a fresh cache or runs scene setup and writes one.
pub fn setup_with_cache(
    scene_dir: &Path,
    scene: &Scene,
    model: &Model,
    params: &ParameterStore,
    digest: &str,
) -> Result<(SceneBundle, SetupOutcome), Error> {
    if cache_is_fresh(scene_dir, digest) {
        match load_cached_bundle(scene_dir, scene, digest) {
            Ok(b) => return Ok((b, SetupOutcome::Reused)),
            Err(e) => log::warn!("rebuilding feature cache: {e}"),
        }
    }
    let bundle = setup_scene(scene.images(), scene.cameras(), scene.mesh.clone(), model, params)?;
    write_cache(scene_dir, &bundle, digest)?;
    Ok((bundle, SetupOutcome::Built))
}
