//! On-disk pair directories and seeded dataset generation.
//!
//! Each pair directory holds `meta.json`, the four descriptor grids
//! `descA_c.bin`, `descB_c.bin`, `descA_f.bin`, `descB_f.bin`, the depth maps
//! `depthA.bin`, `depthB.bin` for posed pairs, and `labels.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{invalid, Error, Result};
use crate::features::{FeatureGrid, COARSE_STRIDE, FINE_STRIDE};
use crate::geometry::{rotation_from_axis_angle, CameraFrame, Homography};
use crate::labels::{generate_labels, GroundTruthLabels};
use crate::numerics::Tensor;
use crate::synthscene::{
    make_3d_pair, make_planar_pair, DepthProfile, PairGeometry, PairMeta, PlanarParams, PosedParams, ScaleBucket,
    SceneConfig, ScenePair,
};

pub const META_FILE: &str = "meta.json";
pub const LABELS_FILE: &str = "labels.json";
const DESC_FILES: [&str; 4] = ["descA_c.bin", "descB_c.bin", "descA_f.bin", "descB_f.bin"];
const DEPTH_FILES: [&str; 2] = ["depthA.bin", "depthB.bin"];

/// Ground-truth geometry as row-major arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeometryRecord {
    Planar { h: [f64; 9], width: usize, height: usize },
    Posed { k_a: [f64; 9], r_a: [f64; 9], t_a: [f64; 3], k_b: [f64; 9], r_b: [f64; 9], t_b: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFile {
    pub meta: PairMeta,
    pub geometry: GeometryRecord,
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

fn geometry_record(g: &PairGeometry) -> GeometryRecord {
    match g {
        PairGeometry::Planar { h, width, height } => {
            GeometryRecord::Planar { h: h.to_row_major(), width: *width, height: *height }
        }
        PairGeometry::Posed { a, b } => GeometryRecord::Posed {
            k_a: row_major(a.k()),
            r_a: row_major(a.rotation()),
            t_a: (*a.translation()).into(),
            k_b: row_major(b.k()),
            r_b: row_major(b.rotation()),
            t_b: (*b.translation()).into(),
        },
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

fn grid_entry(grid: &FeatureGrid) -> Vec<(String, Tensor)> {
    vec![("desc".into(), grid.tensor().clone())]
}

pub fn write_pair(dir: &Path, pair: &ScenePair, labels: &GroundTruthLabels) -> Result<()> {
    fs::create_dir_all(dir)?;
    let file = PairFile { meta: pair.meta.clone(), geometry: geometry_record(&pair.geometry) };
    write_atomic(&dir.join(META_FILE), &json_bytes(&file)?)?;
    for (name, grid) in DESC_FILES.iter().zip([&pair.coarse_a, &pair.coarse_b, &pair.fine_a, &pair.fine_b]) {
        write_atomic(&dir.join(name), &container::to_bytes(&grid_entry(grid)))?;
    }
    if let PairGeometry::Posed { a, b } = &pair.geometry {
        for (name, frame) in DEPTH_FILES.iter().zip([a, b]) {
            write_atomic(&dir.join(name), &container::to_bytes(&[("depth".into(), frame.depth().clone())]))?;
        }
    }
    write_atomic(&dir.join(LABELS_FILE), &json_bytes(labels)?)
}

/// A pair read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedPair {
    pub name: String,
    pub meta: PairMeta,
    pub geometry: PairGeometry,
    pub coarse_a: FeatureGrid,
    pub coarse_b: FeatureGrid,
    pub fine_a: FeatureGrid,
    pub fine_b: FeatureGrid,
    pub labels: Option<GroundTruthLabels>,
}

fn read_single(path: &Path, name: &str, rank: usize) -> Result<Tensor> {
    let entries = container::load(path)?;
    let t = container::find(&entries, name)?;
    if t.rank() != rank {
        return Err(Error::Format(format!("{}: expected rank {rank}, got {:?}", path.display(), t.shape())));
    }
    Ok(t.clone())
}

fn read_grid(path: &Path, stride: usize) -> Result<FeatureGrid> {
    FeatureGrid::new(read_single(path, "desc", 3)?, stride)
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Reads only the geometry and metadata.
pub fn read_meta(dir: &Path) -> Result<(PairMeta, PairGeometry)> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path)?;
    let file: PairFile = serde_json::from_str(&text).map_err(|e| format_err(&path, e))?;
    let geometry = match file.geometry {
        GeometryRecord::Planar { h, width, height } => {
            PairGeometry::Planar { h: Homography::from_row_major(&h).map_err(|e| format_err(&path, e))?, width, height }
        }
        GeometryRecord::Posed { k_a, r_a, t_a, k_b, r_b, t_b } => {
            let depth_a = read_single(&dir.join(DEPTH_FILES[0]), "depth", 2)?;
            let depth_b = read_single(&dir.join(DEPTH_FILES[1]), "depth", 2)?;
            let frame = |k: [f64; 9], r: [f64; 9], t: [f64; 3], d: Tensor| {
                CameraFrame::new(Matrix3::from_row_slice(&k), Matrix3::from_row_slice(&r), Vector3::from(t), d)
                    .map_err(|e| format_err(&path, e))
            };
            PairGeometry::Posed { a: frame(k_a, r_a, t_a, depth_a)?, b: frame(k_b, r_b, t_b, depth_b)? }
        }
    };
    Ok((file.meta, geometry))
}

pub fn read_labels(dir: &Path) -> Result<Option<GroundTruthLabels>> {
    let path = dir.join(LABELS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    Ok(Some(serde_json::from_str(&text).map_err(|e| format_err(&path, e))?))
}

pub fn read_pair(dir: &Path) -> Result<LoadedPair> {
    let (meta, geometry) = read_meta(dir)?;
    let coarse_a = read_grid(&dir.join(DESC_FILES[0]), COARSE_STRIDE)?;
    let coarse_b = read_grid(&dir.join(DESC_FILES[1]), COARSE_STRIDE)?;
    let fine_a = read_grid(&dir.join(DESC_FILES[2]), FINE_STRIDE)?;
    let fine_b = read_grid(&dir.join(DESC_FILES[3]), FINE_STRIDE)?;
    let (w, h) = (geometry.width(), geometry.height());
    for (g, stride) in [(&coarse_a, 8), (&coarse_b, 8), (&fine_a, 2), (&fine_b, 2)] {
        if g.width() * stride != w || g.height() * stride != h {
            return Err(Error::Format(format!(
                "{}: {}×{} grid at stride {stride} does not cover a {w}×{h} image",
                dir.display(),
                g.width(),
                g.height()
            )));
        }
    }
    Ok(LoadedPair {
        name: pair_name(dir),
        meta,
        geometry,
        coarse_a,
        coarse_b,
        fine_a,
        fine_b,
        labels: read_labels(dir)?,
    })
}

pub fn pair_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Subdirectories of `root`, sorted by name. Every subdirectory counts as a
/// pair; a broken one surfaces when it is read.
pub fn list_pairs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    #[default]
    Planar,
    Posed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub pairs_per_bucket: usize,
    pub buckets: Vec<ScaleBucket>,
    pub kind: SceneKind,
    pub noise_sigma: f64,
    /// Uniform in-plane rotation range `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    /// Uniform offset range `±max_translation` pixels (planar pairs).
    pub max_translation: f64,
    pub scene: SceneConfig,
    pub patch_size: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pairs_per_bucket: 4,
            buckets: ScaleBucket::ALL.to_vec(),
            kind: SceneKind::Planar,
            noise_sigma: 0.05,
            max_rotation_deg: 10.0,
            max_translation: 2.0,
            scene: SceneConfig::default(),
            patch_size: COARSE_STRIDE,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.buckets.is_empty() {
            return Err(invalid("at least one scale bucket is required"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.max_rotation_deg >= 0.0) || !(self.max_translation >= 0.0) {
            return Err(invalid("noise, rotation and translation ranges must be non-negative"));
        }
        if self.patch_size == 0 {
            return Err(invalid("patch size must be positive"));
        }
        Ok(())
    }
}

const POSED_ATTEMPTS: usize = 32;

/// Pair `index` of a dataset; pairs are independent of each other.
pub fn generate_pair(cfg: &GenConfig, bucket: ScaleBucket, index: u64) -> Result<ScenePair> {
    let pair_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(index);
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
    rng.set_stream(3);
    let (lo, hi) = bucket.sampling_range();
    let sym = |rng: &mut ChaCha8Rng, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    match cfg.kind {
        SceneKind::Planar => {
            let params = PlanarParams {
                scale_ratio: rng.gen_range(lo..hi),
                rotation_deg: sym(&mut rng, cfg.max_rotation_deg),
                translation: [sym(&mut rng, cfg.max_translation), sym(&mut rng, cfg.max_translation)],
                noise_sigma: cfg.noise_sigma,
            };
            make_planar_pair(pair_seed, &params, &cfg.scene)
        }
        SceneKind::Posed => {
            let (near, far) = (8.0, 12.0);
            let base = 0.5 * (near + far);
            let focal = PosedParams::default().focal;
            // The near plane covers the point B's optical axis hits, where the ratio is
            // measured; moving B forward by base·(1 − 1/zoom) scales it by
            // near / (near − base·(1 − 1/zoom)). The far plane starts inside B's view
            // so the visible scene is never a single plane.
            for _ in 0..POSED_ATTEMPTS {
                let ratio: f64 = rng.gen_range(lo + 0.05 * (hi - lo)..hi - 0.05 * (hi - lo));
                let zoom = 1.0 / (1.0 - near * (1.0 - 1.0 / ratio) / base);
                let rotation_deg = [sym(&mut rng, 2.0), sym(&mut rng, 2.0), sym(&mut rng, cfg.max_rotation_deg)];
                let lateral = [sym(&mut rng, 1.0), sym(&mut rng, 1.0)];
                let axis = Vector3::from(rotation_deg);
                let r_b = rotation_from_axis_angle(&axis, axis.norm().to_radians());
                let centre = Vector3::new(lateral[0], lateral[1], base * (1.0 - 1.0 / zoom));
                let dir = r_b.transpose() * Vector3::z();
                let hit = centre + dir * ((near - centre.z) / dir.z);
                let u = focal * hit.x / hit.z + cfg.scene.width as f64 / 2.0;
                let half_view = cfg.scene.width as f64 / 2.0 / ratio;
                let params = PosedParams {
                    focal,
                    depth: DepthProfile::Step { near, far, split_x: u + (0.4 * half_view).max(1.5) },
                    zoom,
                    rotation_deg,
                    lateral,
                    noise_sigma: cfg.noise_sigma,
                };
                let pair = make_3d_pair(pair_seed, &params, &cfg.scene)?;
                if pair.meta.bucket == bucket {
                    return Ok(pair);
                }
            }
            Err(Error::Degenerate(format!("could not draw a posed pair in bucket {}", bucket.label())))
        }
    }
}

/// Writes `pairs_per_bucket` pairs per bucket under `root` as `pair_NNNN`.
pub fn generate_dataset(root: &Path, cfg: &GenConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(root)?;
    let mut dirs = Vec::new();
    let mut index = 0u64;
    for &bucket in &cfg.buckets {
        for _ in 0..cfg.pairs_per_bucket {
            let pair = generate_pair(cfg, bucket, index)?;
            let labels = generate_labels(&pair.geometry, cfg.patch_size)?;
            let dir = root.join(format!("pair_{index:04}"));
            write_pair(&dir, &pair, &labels)?;
            dirs.push(dir);
            index += 1;
        }
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: SceneKind) -> GenConfig {
        GenConfig { pairs_per_bucket: 1, kind, ..Default::default() }
    }

    #[test]
    fn planar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let dirs = generate_dataset(dir.path(), &small(SceneKind::Planar)).unwrap();
        assert_eq!(dirs.len(), 4);
        assert_eq!(list_pairs(dir.path()).unwrap(), dirs);
        let cfg = small(SceneKind::Planar);
        let pair = generate_pair(&cfg, ScaleBucket::FourPlus, 3).unwrap();
        let loaded = read_pair(&dirs[3]).unwrap();
        assert_eq!(loaded.meta, pair.meta);
        assert_eq!(loaded.meta.bucket, ScaleBucket::FourPlus);
        assert_eq!(loaded.geometry, pair.geometry);
        assert_eq!(loaded.coarse_b, pair.coarse_b);
        assert_eq!(loaded.fine_a, pair.fine_a);
        assert_eq!(loaded.labels.unwrap(), generate_labels(&pair.geometry, 8).unwrap());
    }

    #[test]
    fn posed_roundtrip_and_buckets() {
        let dir = tempfile::tempdir().unwrap();
        let dirs = generate_dataset(dir.path(), &small(SceneKind::Posed)).unwrap();
        for (d, bucket) in dirs.iter().zip(ScaleBucket::ALL) {
            let loaded = read_pair(d).unwrap();
            assert_eq!(loaded.meta.bucket, bucket);
            assert!(!loaded.geometry.is_planar());
            assert!(d.join("depthA.bin").exists());
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small(SceneKind::Planar);
        generate_dataset(a.path(), &cfg).unwrap();
        generate_dataset(b.path(), &cfg).unwrap();
        for name in ["meta.json", "descB_f.bin", "labels.json"] {
            let x = fs::read(a.path().join("pair_0002").join(name)).unwrap();
            let y = fs::read(b.path().join("pair_0002").join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
    }

    #[test]
    fn malformed_pairs_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let dirs = generate_dataset(dir.path(), &GenConfig { buckets: vec![ScaleBucket::OneToTwo], ..small(SceneKind::Planar) }).unwrap();
        fs::write(dirs[0].join("descA_c.bin"), b"junk").unwrap();
        assert!(matches!(read_pair(&dirs[0]), Err(Error::Format(_))));
        fs::write(dirs[0].join("meta.json"), b"{}").unwrap();
        assert!(matches!(read_pair(&dirs[0]), Err(Error::Format(_))));
        fs::remove_file(dirs[0].join("meta.json")).unwrap();
        assert!(matches!(read_pair(&dirs[0]), Err(Error::Io(_))));
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
