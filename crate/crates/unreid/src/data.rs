//! Synthetic identity blobs and the two on-disk interchange formats: the
//! `EMB1` binary embedding file and the JSONL row manifest.
//!
//! A dataset directory holds one embedding file plus one manifest whose line
//! order matches the embedding rows:
//!
//! ```text
//! <dir>/embeddings.emb    EMB1 binary, N x D single-precision rows
//! <dir>/manifest.jsonl    {"row":0,"cam":0,"truth_id":3} per line
//! ```
//!
//! Embedding files store IEEE-754 f32; all in-memory math runs in f64. Values
//! that survive a round trip are exactly the f32 readings, so save/load is
//! bit-stable even though it narrows precision.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Magic bytes opening every embedding file.
pub const EMB_MAGIC: [u8; 4] = *b"EMB1";

/// Embedding file name inside a dataset directory.
pub const EMBEDDINGS_FILE: &str = "embeddings.emb";

/// Manifest file name inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Parameters for the synthetic blob generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Number of identities (cluster centers).
    pub num_identities: usize,
    /// Samples drawn per identity.
    pub samples_per_identity: usize,
    /// Dimensionality of the raw input vectors.
    pub input_dim: usize,
    /// Standard deviation of per-sample noise around the identity center.
    pub identity_sigma: f64,
    /// Number of simulated cameras.
    pub num_cameras: usize,
    /// Scale of the per-camera additive offset vector.
    pub camera_offset_scale: f64,
    /// Seed for the generator stream.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_identities: 20,
            samples_per_identity: 15,
            input_dim: 32,
            identity_sigma: 0.4,
            num_cameras: 2,
            camera_offset_scale: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.num_identities == 0 {
            return Err(Error::ConfigError("num_identities must be >= 1".into()));
        }
        if self.samples_per_identity == 0 {
            return Err(Error::ConfigError("samples_per_identity must be >= 1".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::ConfigError("input_dim must be >= 1".into()));
        }
        if self.num_cameras == 0 {
            return Err(Error::ConfigError("num_cameras must be >= 1".into()));
        }
        if !(self.identity_sigma >= 0.0 && self.identity_sigma.is_finite()) {
            return Err(Error::ConfigError("identity_sigma must be finite and >= 0".into()));
        }
        if !(self.camera_offset_scale >= 0.0 && self.camera_offset_scale.is_finite()) {
            return Err(Error::ConfigError("camera_offset_scale must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// A loaded dataset: raw inputs plus per-row camera and optional ground truth.
///
/// Row `i` always has sample id `i`; manifests are rejected if their `row`
/// fields are not exactly `0..N-1` in order.
#[derive(Debug, Clone)]
pub struct Dataset {
    raw_inputs: Matrix,
    sample_ids: Vec<usize>,
    camera_ids: Vec<u32>,
    truth_ids: Option<Vec<i64>>,
}

impl Dataset {
    /// Validates and assembles a dataset. Inputs must be non-empty and
    /// finite; per-row vectors must match the input row count. `truth_ids`
    /// may contain -1 for junk/distractor rows.
    pub fn new(
        raw_inputs: Matrix,
        camera_ids: Vec<u32>,
        truth_ids: Option<Vec<i64>>,
    ) -> Result<Self> {
        let n = raw_inputs.rows();
        if n == 0 || raw_inputs.cols() == 0 {
            return Err(Error::DataError("dataset must contain at least one row and one column".into()));
        }
        if !raw_inputs.is_finite() {
            return Err(Error::DataError("non-finite value in raw inputs".into()));
        }
        if camera_ids.len() != n {
            return Err(Error::DataError(format!(
                "{} camera ids for {} rows",
                camera_ids.len(),
                n
            )));
        }
        if let Some(t) = &truth_ids {
            if t.len() != n {
                return Err(Error::DataError(format!("{} truth ids for {} rows", t.len(), n)));
            }
            if let Some(bad) = t.iter().find(|&&v| v < -1) {
                return Err(Error::DataError(format!(
                    "truth id {bad} is invalid; use -1 for junk rows"
                )));
            }
        }
        Ok(Dataset {
            sample_ids: (0..n).collect(),
            raw_inputs,
            camera_ids,
            truth_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.raw_inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input dimensionality D.
    pub fn dim(&self) -> usize {
        self.raw_inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.raw_inputs
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.raw_inputs.row(i)
    }

    /// Sample ids, always exactly `0..N-1`.
    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    pub fn camera_ids(&self) -> &[u32] {
        &self.camera_ids
    }

    pub fn cam(&self, i: usize) -> u32 {
        self.camera_ids[i]
    }

    /// Ground-truth identities when known; -1 marks junk rows.
    pub fn truth_ids(&self) -> Option<&[i64]> {
        self.truth_ids.as_deref()
    }

    /// Writes `embeddings.emb` and `manifest.jsonl` into `dir`, creating it
    /// if needed. Values are narrowed to f32 in the file.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_embeddings(&dir.join(EMBEDDINGS_FILE), &self.raw_inputs)?;
        write_manifest(&dir.join(MANIFEST_FILE), self)
    }

    /// Loads a dataset directory written by [`Dataset::save_dir`] or any
    /// producer of the same two files.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let inputs = read_embeddings(&dir.join(EMBEDDINGS_FILE))?;
        let (cams, truths) = read_manifest(&dir.join(MANIFEST_FILE))?;
        if cams.len() != inputs.rows() {
            return Err(Error::FormatError(format!(
                "manifest lists {} rows but embedding file holds {}",
                cams.len(),
                inputs.rows()
            )));
        }
        Dataset::new(inputs, cams, truths)
    }
}

/// Draws identity blobs with additive camera offsets.
///
/// Row layout is identity-major: identity 0's samples first, then identity 1,
/// and so on. Within an identity, cameras alternate as `sample % num_cameras`.
/// Each row is `center[id] + sigma * noise + offset[cam]` with all draws taken
/// from one ChaCha stream in a fixed order (centers, then offsets, then row
/// noise), so equal configs produce bit-identical datasets.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.input_dim;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let mut centers = Vec::with_capacity(cfg.num_identities);
    for _ in 0..cfg.num_identities {
        centers.push((0..d).map(|_| normal(&mut rng)).collect::<Vec<f64>>());
    }
    let mut offsets = Vec::with_capacity(cfg.num_cameras);
    for _ in 0..cfg.num_cameras {
        offsets.push(
            (0..d)
                .map(|_| cfg.camera_offset_scale * normal(&mut rng))
                .collect::<Vec<f64>>(),
        );
    }

    let n = cfg.num_identities * cfg.samples_per_identity;
    let mut inputs = Matrix::zeros(n, d);
    let mut cams = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    let mut row = 0;
    for id in 0..cfg.num_identities {
        for s in 0..cfg.samples_per_identity {
            let cam = s % cfg.num_cameras;
            let out = inputs.row_mut(row);
            for (j, v) in out.iter_mut().enumerate() {
                *v = centers[id][j] + cfg.identity_sigma * normal(&mut rng) + offsets[cam][j];
            }
            cams.push(cam as u32);
            truths.push(id as i64);
            row += 1;
        }
    }
    Dataset::new(inputs, cams, Some(truths))
}

/// Writes a matrix as an `EMB1` file: magic, little-endian u32 row and column
/// counts, then row-major IEEE-754 f32 values.
///
/// The matrix must be non-empty, finite, and within f32 range.
pub fn write_embeddings(path: &Path, m: &Matrix) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::DataError("refusing to write an empty embedding matrix".into()));
    }
    if m.rows() > u32::MAX as usize || m.cols() > u32::MAX as usize {
        return Err(Error::DataError("matrix dimensions exceed the u32 header range".into()));
    }
    let mut bytes = Vec::with_capacity(12 + m.rows() * m.cols() * 4);
    bytes.extend_from_slice(&EMB_MAGIC);
    bytes.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(Error::DataError(format!(
                "value {v:e} does not fit a finite f32"
            )));
        }
        bytes.extend_from_slice(&narrowed.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an `EMB1` file back into an f64 matrix. Rejects bad magic, zero
/// dimensions, byte counts that disagree with the header, and non-finite
/// values.
pub fn read_embeddings(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::FormatError(format!(
            "{}: {} bytes is too short for an EMB1 header",
            path.display(),
            bytes.len()
        )));
    }
    if bytes[0..4] != EMB_MAGIC {
        return Err(Error::FormatError(format!(
            "{}: bad magic {:?}, expected \"EMB1\"",
            path.display(),
            &bytes[0..4]
        )));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if n == 0 || d == 0 {
        return Err(Error::FormatError(format!(
            "{}: header declares an empty {n}x{d} matrix",
            path.display()
        )));
    }
    let body = &bytes[12..];
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::FormatError(format!("{}: header size overflows", path.display())))?;
    if body.len() != expected {
        return Err(Error::FormatError(format!(
            "{}: header claims {n} rows of {d} values ({expected} bytes) but body holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for chunk in body.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::DataError(format!(
                "{}: non-finite value in embedding body",
                path.display()
            )));
        }
        data.push(v as f64);
    }
    Matrix::from_vec(n, d, data)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    row: usize,
    cam: u32,
    truth_id: Option<i64>,
}

/// Writes the JSONL manifest for a dataset: one
/// `{"row":i,"cam":c,"truth_id":t}` object per line, in row order. Unknown
/// ground truth serializes as `null` on every line.
pub fn write_manifest(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = String::new();
    for i in 0..dataset.len() {
        let row = ManifestRow {
            row: i,
            cam: dataset.cam(i),
            truth_id: dataset.truth_ids().map(|t| t[i]),
        };
        // In-memory struct serialization cannot fail.
        out.push_str(&serde_json::to_string(&row).unwrap());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a manifest back as `(camera_ids, truth_ids)`.
///
/// `row` fields must be exactly `0..N-1` in order, and `truth_id` must be
/// either present on every line or `null` on every line.
pub fn read_manifest(path: &Path) -> Result<(Vec<u32>, Option<Vec<i64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cams = Vec::new();
    let mut truths: Vec<Option<i64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line).map_err(|e| {
            Error::FormatError(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if row.row != cams.len() {
            return Err(Error::FormatError(format!(
                "{}:{}: row field is {}, expected {}",
                path.display(),
                lineno + 1,
                row.row,
                cams.len()
            )));
        }
        cams.push(row.cam);
        truths.push(row.truth_id);
    }
    if cams.is_empty() {
        return Err(Error::FormatError(format!("{}: empty manifest", path.display())));
    }
    let known = truths.iter().filter(|t| t.is_some()).count();
    let truth_ids = if known == 0 {
        None
    } else if known == truths.len() {
        Some(truths.into_iter().map(Option::unwrap).collect())
    } else {
        return Err(Error::FormatError(format!(
            "{}: truth_id must be null on every line or set on every line",
            path.display()
        )));
    };
    Ok((cams, truth_ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::euclidean;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_identities: 3,
            samples_per_identity: 4,
            input_dim: 8,
            identity_sigma: 0.1,
            num_cameras: 2,
            camera_offset_scale: 0.05,
            seed: 7,
        }
    }

    #[test]
    fn generator_layout_matches_counts() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.dim(), 8);
        assert_eq!(ds.camera_ids(), &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        assert_eq!(
            ds.truth_ids().unwrap(),
            &[0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]
        );
        assert_eq!(ds.sample_ids(), &(0..12).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn zero_sigma_collapses_within_identity_and_camera() {
        let mut cfg = small_cfg();
        cfg.identity_sigma = 0.0;
        let ds = generate_synthetic(&cfg).unwrap();
        // Rows 0 and 2 share identity 0 and camera 0.
        assert_eq!(ds.input(0), ds.input(2));
        // Camera offset separates rows 0 and 1 despite the shared identity.
        assert!(euclidean(ds.input(0), ds.input(1)) > 0.0);
        // Different identities stay apart.
        assert!(euclidean(ds.input(0), ds.input(4)) > 0.5);
    }

    #[test]
    fn generator_is_deterministic_per_seed() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a.inputs(), b.inputs());
        let mut other = small_cfg();
        other.seed = 8;
        let c = generate_synthetic(&other).unwrap();
        assert_ne!(a.inputs(), c.inputs());
    }

    #[test]
    fn generator_rejects_bad_config() {
        let mut cfg = small_cfg();
        cfg.num_identities = 0;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::ConfigError(_))));
        let mut cfg = small_cfg();
        cfg.identity_sigma = f64::NAN;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::ConfigError(_))));
    }

    #[test]
    fn embeddings_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        let m = Matrix::from_rows(&[vec![1.0, -2.5, 0.25], vec![0.0009765625, 4.0, -0.125]]).unwrap();
        write_embeddings(&path, &m).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(m, back);
        // Header is exactly magic + two u32 + body.
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"EMB1");
        assert_eq!(bytes.len(), 12 + 2 * 3 * 4);
    }

    #[test]
    fn embeddings_reject_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        let m = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        write_embeddings(&path, &m).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::FormatError(_))));

        // Header claims one 2-value row; give it one value.
        let mut short = Vec::new();
        short.extend_from_slice(b"EMB1");
        short.extend_from_slice(&1u32.to_le_bytes());
        short.extend_from_slice(&2u32.to_le_bytes());
        short.extend_from_slice(&1.0f32.to_le_bytes());
        fs::write(&path, &short).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::FormatError(_))));

        // Trailing garbage is also a format error.
        let mut long = fs::read(&path).unwrap();
        long.extend_from_slice(&1.0f32.to_le_bytes());
        long.extend_from_slice(&[0]);
        fs::write(&path, &long).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::FormatError(_))));
    }

    #[test]
    fn embeddings_reject_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.emb");
        let m = Matrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(write_embeddings(&path, &m), Err(Error::DataError(_))));
        // f64 values beyond f32 range would narrow to infinity.
        let m = Matrix::from_rows(&[vec![1e300, 0.0]]).unwrap();
        assert!(matches!(write_embeddings(&path, &m), Err(Error::DataError(_))));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EMB1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::DataError(_))));
    }

    #[test]
    fn manifest_round_trip_with_junk_rows() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let ds = Dataset::new(m, vec![0, 1, 0], Some(vec![5, -1, 5])).unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, &ds).unwrap();
        let (cams, truths) = read_manifest(&path).unwrap();
        assert_eq!(cams, vec![0, 1, 0]);
        assert_eq!(truths, Some(vec![5, -1, 5]));
    }

    #[test]
    fn manifest_rejects_mixed_truth_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(
            &path,
            "{\"row\":0,\"cam\":0,\"truth_id\":1}\n{\"row\":1,\"cam\":0,\"truth_id\":null}\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::FormatError(_))));

        fs::write(
            &path,
            "{\"row\":0,\"cam\":0,\"truth_id\":1}\n{\"row\":5,\"cam\":0,\"truth_id\":1}\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::FormatError(_))));
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&small_cfg()).unwrap();
        ds.save_dir(dir.path()).unwrap();
        let back = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.camera_ids(), ds.camera_ids());
        assert_eq!(back.truth_ids(), ds.truth_ids());
        // Values pass through f32, so compare at f32 precision.
        for i in 0..ds.len() {
            for (a, b) in ds.input(i).iter().zip(back.input(i)) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn dataset_rejects_mismatched_metadata() {
        let m = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(
            Dataset::new(m.clone(), vec![0], None),
            Err(Error::DataError(_))
        ));
        assert!(matches!(
            Dataset::new(m.clone(), vec![0, 0], Some(vec![1])),
            Err(Error::DataError(_))
        ));
        assert!(matches!(
            Dataset::new(m, vec![0, 0], Some(vec![1, -4])),
            Err(Error::DataError(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn emb1_round_trip_is_bit_exact(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in 0u64..1000
        ) {
            // Values that already fit f32 must survive the file unchanged.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| (rng.gen::<f32>() * 100.0 - 50.0) as f64)
                .collect();
            let m = Matrix::from_vec(rows, cols, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.emb");
            write_embeddings(&path, &m).unwrap();
            let back = read_embeddings(&path).unwrap();
            prop_assert_eq!(m, back);
        }
    }
}
