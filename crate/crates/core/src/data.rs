//! Volume files, dataset manifests and the multi-contrast phantom generator.
//!
//! A volume is stored as two files: `name.vol` holds the raw little-endian
//! payload in C order (`f32`, interleaved `f32` re/im pairs, or `u8`), and
//! `name.vol.json` holds the sidecar:
//!
//! ```json
//! {"version": 1, "shape": [1, 64, 64, 64], "channels": 1, "dtype": "f32",
//!  "spacing": [1.0, 1.0, 1.0], "value_range": [0.0, 1.0]}
//! ```
//!
//! Sampling masks use dtype `u8`, a two-element shape, and the extra fields
//! `R`, `sigma` and `seed`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use num_complex::Complex32;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kspace::SamplingMask;
use crate::volume::Sample;
use crate::{seed, Error, Result, Volume};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    shape: Vec<usize>,
    #[serde(default)]
    channels: Option<usize>,
    dtype: String,
    #[serde(default)]
    spacing: Option<[f32; 3]>,
    #[serde(default)]
    value_range: Option<(f32, f32)>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    r: Option<f64>,
    /// Absent for an infinite width (fully sampled mask).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// Path of the JSON sidecar belonging to a payload path.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Voxel types with an on-disk encoding.
pub trait Codec: Sample {
    const TAG: &'static str;
    const BYTES: usize;
    fn encode(self, out: &mut Vec<u8>);
    fn decode(b: &[u8]) -> Self;
}

impl Codec for f32 {
    const TAG: &'static str = "f32";
    const BYTES: usize = 4;
    fn encode(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn decode(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl Codec for Complex32 {
    const TAG: &'static str = "c64";
    const BYTES: usize = 8;
    fn encode(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.re.to_le_bytes());
        out.extend_from_slice(&self.im.to_le_bytes());
    }
    fn decode(b: &[u8]) -> Self {
        Complex32::new(f32::decode(&b[..4]), f32::decode(&b[4..8]))
    }
}

fn write_pair(path: &Path, sidecar: &Sidecar, payload: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_vec_pretty(sidecar)?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let value: serde_json::Value =
        serde_json::from_slice(&text).map_err(|e| Error::format(&side, "<json>", e.to_string()))?;
    // Deserialize field by field so errors name the offending key.
    let obj = value
        .as_object()
        .ok_or_else(|| Error::format(&side, "<root>", "expected a JSON object"))?;
    for key in ["version", "shape", "dtype"] {
        if !obj.contains_key(key) {
            return Err(Error::format(&side, key, "missing"));
        }
    }
    let version: u64 = obj["version"]
        .as_u64()
        .ok_or_else(|| Error::format(&side, "version", "expected an unsigned integer"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            path: side,
            found: version,
            expected: FORMAT_VERSION as u64,
        });
    }
    for key in ["shape", "channels", "dtype", "spacing", "value_range", "R", "sigma", "seed"] {
        if let Some(v) = obj.get(key) {
            let probe = serde_json::json!({ "version": 1, "shape": [1], "dtype": "f32", key: v });
            if let Err(e) = serde_json::from_value::<Sidecar>(probe) {
                return Err(Error::format(&side, key, e.to_string()));
            }
        }
    }
    serde_json::from_value(value).map_err(|e| Error::format(&side, "<root>", e.to_string()))
}

fn read_payload(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes)
}

pub fn save_volume<T: Codec>(vol: &Volume<T>, path: &Path) -> Result<()> {
    let sidecar = Sidecar {
        version: FORMAT_VERSION,
        shape: vol.data.shape().to_vec(),
        channels: Some(vol.channels()),
        dtype: T::TAG.into(),
        spacing: Some(vol.spacing),
        value_range: Some(vol.value_range),
        r: None,
        sigma: None,
        seed: None,
    };
    let mut payload = Vec::with_capacity(vol.data.len() * T::BYTES);
    for &v in vol.data.iter() {
        v.encode(&mut payload);
    }
    write_pair(path, &sidecar, &payload)
}

/// Reads the dtype tag without loading the payload.
pub fn volume_dtype(path: &Path) -> Result<String> {
    Ok(read_sidecar(path)?.dtype)
}

pub fn load_volume<T: Codec>(path: &Path) -> Result<Volume<T>> {
    let side = read_sidecar(path)?;
    let sp = sidecar_path(path);
    if side.dtype != T::TAG {
        return Err(Error::format(&sp, "dtype", format!("expected `{}`, found `{}`", T::TAG, side.dtype)));
    }
    let shape: [usize; 4] = side
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::format(&sp, "shape", format!("expected 4 dims, found {}", side.shape.len())))?;
    if shape.contains(&0) {
        return Err(Error::format(&sp, "shape", "zero-sized dimension"));
    }
    if side.channels.is_some_and(|c| c != shape[0]) {
        return Err(Error::format(&sp, "channels", "disagrees with shape[0]"));
    }
    let n: usize = shape.iter().product();
    let bytes = read_payload(path, n * T::BYTES)?;
    let data: Vec<T> = bytes.chunks_exact(T::BYTES).map(T::decode).collect();
    let data = Array4::from_shape_vec(shape, data).expect("payload length checked");
    let mut vol = Volume::new(data)?;
    if let Some(s) = side.spacing {
        vol.spacing = s;
    }
    if let Some(r) = side.value_range {
        vol.value_range = r;
    }
    Ok(vol)
}

pub fn save_mask(mask: &SamplingMask, path: &Path) -> Result<()> {
    let (n1, n2) = mask.shape();
    let sidecar = Sidecar {
        version: FORMAT_VERSION,
        shape: vec![n1, n2],
        channels: None,
        dtype: "u8".into(),
        spacing: None,
        value_range: Some((0.0, 1.0)),
        r: Some(mask.r),
        sigma: mask.sigma.is_finite().then_some(mask.sigma),
        seed: Some(mask.seed),
    };
    let payload: Vec<u8> = mask.grid.iter().copied().collect();
    write_pair(path, &sidecar, &payload)
}

pub fn load_mask(path: &Path) -> Result<SamplingMask> {
    let side = read_sidecar(path)?;
    let sp = sidecar_path(path);
    if side.dtype != "u8" {
        return Err(Error::format(&sp, "dtype", format!("expected `u8`, found `{}`", side.dtype)));
    }
    let [n1, n2]: [usize; 2] = side
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::format(&sp, "shape", "a mask needs exactly 2 dims"))?;
    let bytes = read_payload(path, n1 * n2)?;
    if bytes.iter().any(|&b| b > 1) {
        return Err(Error::format(path, "<payload>", "mask values must be 0 or 1"));
    }
    Ok(SamplingMask {
        grid: Array2::from_shape_vec((n1, n2), bytes).expect("payload length checked"),
        r: side.r.ok_or_else(|| Error::format(&sp, "R", "missing"))?,
        sigma: side.sigma.unwrap_or(f64::INFINITY),
        seed: side.seed.ok_or_else(|| Error::format(&sp, "seed", "missing"))?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    /// Contrast name → payload path relative to the manifest directory.
    pub volumes: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        SplitCounts { train, val, test }
    }

    /// Roughly 70/10/20, with at least one validation subject when there are
    /// three or more subjects.
    pub fn default_for(n: usize) -> Self {
        let train = ((0.7 * n as f64).round() as usize).clamp(n.min(1), n);
        let val = if n >= 3 {
            ((0.1 * n as f64).round() as usize).max(1).min(n - train)
        } else {
            (n - train).min(1)
        };
        SplitCounts::new(train, val, n - train - val)
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub subjects: Vec<SubjectEntry>,
    pub splits: Splits,
    /// Free-form provenance, e.g. the phantom spec or resolved CLI config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
    /// Directory that relative volume paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn new(subjects: Vec<SubjectEntry>, root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            version: FORMAT_VERSION,
            subjects,
            splits: Splits::default(),
            meta: None,
            root: root.into(),
        }
    }

    /// Accepts either the manifest file or the directory containing it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: DatasetManifest =
            serde_json::from_slice(&text).map_err(|e| Error::format(&file, "<manifest>", e.to_string()))?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Version {
                path: file,
                found: m.version as u64,
                expected: FORMAT_VERSION as u64,
            });
        }
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    /// Writes `manifest.json` into `root`.
    pub fn save(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let file = self.root.join(MANIFEST_FILE);
        fs::write(&file, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&file, e))?;
        Ok(file)
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    pub fn subject(&self, id: &str) -> Result<&SubjectEntry> {
        self.subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Config(format!("unknown subject `{id}`")))
    }

    pub fn volume_path(&self, id: &str, contrast: &str) -> Result<PathBuf> {
        let rel = self
            .subject(id)?
            .volumes
            .get(contrast)
            .ok_or_else(|| Error::Config(format!("subject `{id}` has no contrast `{contrast}`")))?;
        Ok(self.root.join(rel))
    }

    pub fn load_contrast(&self, id: &str, contrast: &str) -> Result<Volume<f32>> {
        load_volume(&self.volume_path(id, contrast)?)
    }

    /// Contrasts present for every subject.
    pub fn contrasts(&self) -> Vec<String> {
        let mut it = self.subjects.iter();
        let Some(first) = it.next() else { return vec![] };
        let mut set: BTreeSet<&String> = first.volumes.keys().collect();
        for s in it {
            set.retain(|k| s.volumes.contains_key(*k));
        }
        set.into_iter().cloned().collect()
    }

    /// Splits are disjoint, reference known subjects, and every referenced
    /// volume parses.
    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<&str> = self.subjects.iter().map(|s| s.id.as_str()).collect();
        if ids.len() != self.subjects.len() {
            return Err(Error::Config("duplicate subject ids".into()));
        }
        let mut seen = BTreeSet::new();
        for id in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if !ids.contains(id.as_str()) {
                return Err(Error::Config(format!("split references unknown subject `{id}`")));
            }
            if !seen.insert(id) {
                return Err(Error::Config(format!("subject `{id}` appears in more than one split")));
            }
        }
        for s in &self.subjects {
            for rel in s.volumes.values() {
                read_sidecar(&self.root.join(rel))?;
            }
        }
        Ok(())
    }

    /// Keeps only the first `n` training subjects.
    pub fn cap_train(mut self, n: usize) -> Result<Self> {
        if n == 0 || n > self.splits.train.len() {
            return Err(Error::Config(format!(
                "training cap {n} outside 1..={}",
                self.splits.train.len()
            )));
        }
        self.splits.train.truncate(n);
        Ok(self)
    }
}

/// Seeded disjoint assignment of subjects to train/val/test.
pub fn split_manifest(manifest: &DatasetManifest, counts: SplitCounts, seed: u64) -> Result<DatasetManifest> {
    let n = manifest.subjects.len();
    if counts.total() > n {
        return Err(Error::Config(format!(
            "split counts {}+{}+{} exceed {n} subjects",
            counts.train, counts.val, counts.test
        )));
    }
    let mut ids = manifest.ids();
    ids.shuffle(&mut seed::rng(seed::derive(seed, &[seed::keys::SPLIT])));
    let mut it = ids.into_iter();
    let mut take = |k: usize| {
        let mut v: Vec<String> = it.by_ref().take(k).collect();
        v.sort();
        v
    };
    let mut out = manifest.clone();
    out.splits = Splits {
        train: take(counts.train),
        val: take(counts.val),
        test: take(counts.test),
    };
    Ok(out)
}

/// Contrast names produced by the phantom generator.
pub const CONTRASTS: [&str; 3] = ["t1", "t2", "pd"];

/// Longitudinal tissue constant as a function of density and transverse constant.
pub fn tau1_of(rho: f64, tau2: f64) -> f64 {
    0.4 + 2.0 * (1.0 - rho) + 0.5 * tau2
}

/// Contrast value of one tissue.
pub fn contrast_value(contrast: &str, rho: f64, tau2: f64) -> Result<f64> {
    Ok(match contrast {
        "t1" => rho * (1.0 - (-tau1_of(rho, tau2)).exp()),
        "t2" => rho * (-tau2).exp(),
        "pd" => rho,
        other => return Err(Error::Config(format!("unknown contrast `{other}` (expected t1, t2 or pd)"))),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n_subjects: usize,
    pub shape: [usize; 3],
    /// Random interior ellipsoids per subject.
    pub n_ellipsoids: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitCounts>,
}

impl PhantomSpec {
    pub fn cube(n_subjects: usize, d: usize, seed: u64) -> Self {
        PhantomSpec {
            n_subjects,
            shape: [d; 3],
            n_ellipsoids: 10,
            seed,
            split: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::Config("n_subjects must be >= 1".into()));
        }
        if self.shape.iter().any(|&d| d == 0 || d % 4 != 0) {
            return Err(Error::Config(format!(
                "phantom dims must be positive multiples of 4, got {:?}",
                self.shape
            )));
        }
        if self.n_ellipsoids == 0 {
            return Err(Error::Config("n_ellipsoids must be >= 1".into()));
        }
        if let Some(c) = self.split {
            if c.total() > self.n_subjects {
                return Err(Error::Config("split counts exceed n_subjects".into()));
            }
        }
        Ok(())
    }
}

/// Per-voxel tissue parameters; background voxels have `rho = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMaps {
    pub rho: Array3<f32>,
    pub tau2: Array3<f32>,
}

impl TissueMaps {
    pub fn contrast(&self, name: &str) -> Result<Volume<f32>> {
        contrast_value(name, 0.5, 1.0)?;
        let mut out = Array3::<f32>::zeros(self.rho.dim());
        ndarray::Zip::from(&mut out)
            .and(&self.rho)
            .and(&self.tau2)
            .for_each(|o, &r, &t| *o = contrast_value(name, r as f64, t as f64).expect("name checked") as f32);
        Ok(Volume::from_grid(out)?.with_value_range((0.0, 1.0)))
    }
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
    /// Rows are the body-frame axes.
    rot: [[f64; 3]; 3],
    rho: f64,
    tau2: f64,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut s = 0.0;
        for i in 0..3 {
            let u = self.rot[i][0] * d[0] + self.rot[i][1] * d[1] + self.rot[i][2] * d[2];
            s += (u / self.axes[i]).powi(2);
        }
        s <= 1.0
    }
}

fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    // Rz(a)·Ry(b)·Rx(c)
    [
        [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
        [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
        [-sb, cb * sc, cb * cc],
    ]
}

/// Tissue maps of subject `index`. Coordinates span `[-1, 1]` on every axis.
pub fn phantom_tissue(spec: &PhantomSpec, index: usize) -> Result<TissueMaps> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(spec.seed, &[seed::keys::PHANTOM, index as u64]));
    let mut j = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let identity = rotation(0.0, 0.0, 0.0);
    let head_axes = [j(0.82, 0.92), j(0.72, 0.85), j(0.78, 0.9)];
    let shift = [j(-0.04, 0.04), j(-0.04, 0.04), j(-0.04, 0.04)];
    let mut shapes = vec![
        Ellipsoid {
            center: shift,
            axes: head_axes,
            rot: identity,
            rho: 0.85,
            tau2: 0.35,
        },
        Ellipsoid {
            center: shift,
            axes: head_axes.map(|a| a * 0.88),
            rot: identity,
            rho: j(0.6, 0.75),
            tau2: j(0.7, 1.0),
        },
    ];
    for _ in 0..spec.n_ellipsoids {
        let center = [j(-0.5, 0.5), j(-0.5, 0.5), j(-0.5, 0.5)];
        let axes = [j(0.08, 0.3), j(0.08, 0.3), j(0.08, 0.3)];
        let rot = rotation(
            j(0.0, std::f64::consts::TAU),
            j(0.0, std::f64::consts::PI),
            j(0.0, std::f64::consts::TAU),
        );
        shapes.push(Ellipsoid {
            center,
            axes,
            rot,
            rho: j(0.3, 1.0),
            tau2: j(0.2, 2.0),
        });
    }
    let [d0, d1, d2] = spec.shape;
    let coord = |i: usize, n: usize| (2.0 * i as f64 + 1.0) / n as f64 - 1.0;
    let mut rho = Array3::<f32>::zeros((d0, d1, d2));
    let mut tau2 = Array3::<f32>::zeros((d0, d1, d2));
    for ((a, b, c), r) in rho.indexed_iter_mut() {
        let p = [coord(a, d0), coord(b, d1), coord(c, d2)];
        if let Some(e) = shapes.iter().rev().find(|e| e.contains(p)) {
            *r = e.rho as f32;
            tau2[[a, b, c]] = e.tau2 as f32;
        }
    }
    Ok(TissueMaps { rho, tau2 })
}

/// All contrasts of subject `index`, in memory.
pub fn phantom_subject(spec: &PhantomSpec, index: usize) -> Result<BTreeMap<String, Volume<f32>>> {
    let maps = phantom_tissue(spec, index)?;
    CONTRASTS
        .iter()
        .map(|&c| Ok((c.to_string(), maps.contrast(c)?)))
        .collect()
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{index:03}")
}

/// Writes `out/<id>/<contrast>.vol` for every subject plus `out/manifest.json`.
pub fn generate_phantoms(spec: &PhantomSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        let id = subject_id(i);
        let mut volumes = BTreeMap::new();
        for (name, vol) in phantom_subject(spec, i)? {
            let rel = PathBuf::from(&id).join(format!("{name}.vol"));
            save_volume(&vol, &out.join(&rel))?;
            volumes.insert(name, rel);
        }
        log::debug!("wrote phantom {id}");
        subjects.push(SubjectEntry { id, volumes });
    }
    let mut manifest = DatasetManifest::new(subjects, out);
    manifest.meta = Some(serde_json::json!({ "phantom": spec }));
    let counts = spec.split.unwrap_or_else(|| SplitCounts::default_for(spec.n_subjects));
    let mut manifest = split_manifest(&manifest, counts, spec.seed)?;
    manifest.root = out.to_path_buf();
    manifest.save()?;
    Ok(manifest)
}

/// Inverse contrast map: the t1 value implied by co-registered t2 and pd
/// values of the same voxel.
pub fn analytic_t1(t2: f64, pd: f64) -> f64 {
    if pd <= 0.0 {
        return 0.0;
    }
    let tau2 = -(t2 / pd).ln();
    pd * (1.0 - (-tau1_of(pd, tau2)).exp())
}
