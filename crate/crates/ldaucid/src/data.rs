//! Task-stream construction: synthetic drifting domains (rotating moons,
//! shifted blobs) and IDX digit-file ingestion. A stream is one labeled
//! source followed by ordered unlabeled targets; every target keeps a
//! labeled test split for evaluation only.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};


use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::util::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One dataset of one domain. Labels are present only on the source train
/// split and on evaluation (test) splits.
#[derive(Debug, Clone)]
pub struct Domain {
    pub name: String,
    pub inputs: Matrix,
    pub labels: Option<Vec<usize>>,
    pub split: Split,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }
}

/// Train and test splits of one domain.
#[derive(Debug, Clone)]
pub struct DomainPair {
    pub name: String,
    pub train: Domain,
    pub test: Domain,
}

/// Ordered stream: labeled source, then unlabeled targets.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub source: DomainPair,
    pub targets: Vec<DomainPair>,
    pub k: usize,
    pub d: usize,
}

impl TaskStream {
    /// Domains in arrival order: source first.
    pub fn num_domains(&self) -> usize {
        1 + self.targets.len()
    }

    pub fn domain_name(&self, id: usize) -> &str {
        if id == 0 {
            &self.source.name
        } else {
            &self.targets[id - 1].name
        }
    }

    pub fn test_split(&self, id: usize) -> &Domain {
        if id == 0 {
            &self.source.test
        } else {
            &self.targets[id - 1].test
        }
    }
}

/// Two interleaved half-circles, rotated about the origin and jittered with
/// Gaussian noise; balanced classes, deterministic per seed.
pub fn gen_two_moons(n: usize, noise_sigma: f64, rotation_deg: f64, seed: u64) -> Result<Domain> {
    if n < 2 {
        return Err(Error::Invalid("two moons needs n >= 2".into()));
    }
    if noise_sigma < 0.0 {
        return Err(Error::Invalid("noise_sigma must be >= 0".into()));
    }
    let mut rng = seeded_rng(seed, "two-moons", 0);
    let n0 = n.div_ceil(2);
    let n1 = n - n0;
    let mut inputs = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    // Full turns are the identity; normalizing first makes that exact.
    let theta = rotation_deg.rem_euclid(360.0).to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut row = 0usize;
    for (class, count) in [(0usize, n0), (1usize, n1)] {
        for i in 0..count {
            let t = std::f64::consts::PI * i as f64 / count as f64;
            let (mut x, mut y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let ex: f64 = StandardNormal.sample(&mut rng);
            let ey: f64 = StandardNormal.sample(&mut rng);
            x += noise_sigma * ex;
            y += noise_sigma * ey;
            let out = inputs.row_mut(row);
            out[0] = cos * x - sin * y;
            out[1] = sin * x + cos * y;
            labels.push(class);
            row += 1;
        }
    }
    Ok(Domain {
        name: format!("moons{rotation_deg}"),
        inputs,
        labels: Some(labels),
        split: Split::Train,
    })
}

/// Per-class isotropic Gaussians around `means + shift_vector`.
pub fn gen_gaussian_blobs(
    k: usize,
    n: usize,
    means: &Matrix,
    cov_scale: f64,
    shift_vector: &[f64],
    seed: u64,
) -> Result<Domain> {
    if means.rows() != k {
        return Err(Error::Shape(format!(
            "means has {} rows for k={k}",
            means.rows()
        )));
    }
    if shift_vector.len() != means.cols() {
        return Err(Error::Shape("shift width does not match means width".into()));
    }
    if k == 0 || n == 0 {
        return Err(Error::Invalid("blobs need k >= 1 and n >= 1".into()));
    }
    let d = means.cols();
    let mut rng = seeded_rng(seed, "blobs", 0);
    let mut inputs = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let mu = means.row(class);
        let row = inputs.row_mut(i);
        for c in 0..d {
            let eps: f64 = StandardNormal.sample(&mut rng);
            row[c] = mu[c] + shift_vector[c] + cov_scale * eps;
        }
        labels.push(class);
    }
    Ok(Domain {
        name: "blobs".into(),
        inputs,
        labels: Some(labels),
        split: Split::Train,
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader {
    path: PathBuf,
    bytes: Vec<u8>,
    offset: u64,
}

impl IdxReader {
    fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Ok(IdxReader {
            path: path.to_path_buf(),
            bytes,
            offset: 0,
        })
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            offset: self.offset,
            message: message.into(),
        }
    }

    fn read_u32_be(&mut self) -> Result<u32> {
        let start = self.offset as usize;
        let slice = self
            .bytes
            .get(start..start + 4)
            .ok_or_else(|| self.fail("truncated file: expected 4 more bytes"))?;
        let v = u32::from_be_bytes(slice.try_into().expect("4-byte slice"));
        self.offset += 4;
        Ok(v)
    }

    fn read_payload(&mut self, len: usize) -> Result<&[u8]> {
        let start = self.offset as usize;
        let slice = self
            .bytes
            .get(start..start + len)
            .ok_or_else(|| self.fail(format!("truncated file: expected {len} more bytes")))?;
        self.offset += len as u64;
        Ok(slice)
    }

    fn expect_end(&self) -> Result<()> {
        if self.offset as usize != self.bytes.len() {
            Err(self.fail(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.offset as usize
            )))
        } else {
            Ok(())
        }
    }
}

/// Parses a big-endian IDX image/label file pair into a labeled domain;
/// pixel bytes are scaled to `[0, 1]` and flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Domain> {
    let mut images = IdxReader::open(images_path)?;
    let magic = images.read_u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            path: images_path.to_path_buf(),
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = images.read_u32_be()? as usize;
    let rows = images.read_u32_be()? as usize;
    let cols = images.read_u32_be()? as usize;
    let pixels = images.read_payload(count * rows * cols)?.to_vec();
    images.expect_end()?;

    let mut labels_file = IdxReader::open(labels_path)?;
    let magic = labels_file.read_u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = labels_file.read_u32_be()? as usize;
    if label_count != count {
        return Err(Error::Parse {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!("label count {label_count} does not match image count {count}"),
        });
    }
    let raw_labels = labels_file.read_payload(count)?.to_vec();
    labels_file.expect_end()?;

    let data: Vec<f64> = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let inputs = Matrix::from_flat(count, rows * cols, data)?;
    let labels = raw_labels.into_iter().map(usize::from).collect();
    Ok(Domain {
        name: images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "idx".into()),
        inputs,
        labels: Some(labels),
        split: Split::Train,
    })
}

/// Stream recipe: which domains to build, in arrival order.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamConfig {
    Moons {
        rotations_deg: Vec<f64>,
        n_per_domain: usize,
        n_test: usize,
        noise_sigma: f64,
        imbalanced: bool,
    },
    Blobs {
        k: usize,
        means: Vec<Vec<f64>>,
        shifts: Vec<Vec<f64>>,
        cov_scale: f64,
        n_per_domain: usize,
        n_test: usize,
        imbalanced: bool,
    },
    Idx {
        domains: Vec<IdxDomainPaths>,
        imbalanced: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxDomainPaths {
    pub name: String,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

/// Keeps, for class `i`, the first `floor(count_i * (i+1) / k)` points; the
/// class-imbalance protocol applied identically to every domain.
fn apply_imbalance(domain: &mut Domain, k: usize) {
    let labels = domain.labels.as_ref().expect("imbalance needs labels");
    let mut counts = vec![0usize; k];
    for &y in labels {
        counts[y] += 1;
    }
    let keep_targets: Vec<usize> = (0..k).map(|i| counts[i] * (i + 1) / k).collect();
    let mut kept_so_far = vec![0usize; k];
    let mut keep_rows = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        if kept_so_far[y] < keep_targets[y] {
            kept_so_far[y] += 1;
            keep_rows.push(i);
        }
    }
    domain.inputs = domain.inputs.select_rows(&keep_rows);
    let labels = domain.labels.as_ref().unwrap();
    domain.labels = Some(keep_rows.iter().map(|&i| labels[i]).collect());
}

/// Exact keep counts of the imbalance protocol for given class counts.
pub fn imbalance_keep_counts(class_counts: &[usize]) -> Vec<usize> {
    let k = class_counts.len();
    (0..k).map(|i| class_counts[i] * (i + 1) / k).collect()
}

/// Per-column mean and standard deviation.
fn column_stats(inputs: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = inputs.rows().max(1) as f64;
    let d = inputs.cols();
    let mut mean = vec![0.0; d];
    for row in inputs.iter_rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for row in inputs.iter_rows() {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn standardize(inputs: &mut Matrix, mean: &[f64], std: &[f64]) {
    for i in 0..inputs.rows() {
        for (c, v) in inputs.row_mut(i).iter_mut().enumerate() {
            *v = (*v - mean[c]) / std[c];
        }
    }
}

/// Builds the stream in declared order: generates every domain's train and
/// test split, optionally applies the imbalance protocol, standardizes all
/// inputs with the source train statistics, and strips labels from target
/// train splits.
pub fn make_task_stream(config: &StreamConfig, seed: u64) -> Result<TaskStream> {
    let imbalanced = match config {
        StreamConfig::Moons { imbalanced, .. }
        | StreamConfig::Blobs { imbalanced, .. }
        | StreamConfig::Idx { imbalanced, .. } => *imbalanced,
    };

    // (name, train, test) in declared order.
    let mut pairs: Vec<(String, Domain, Domain)> = Vec::new();
    let k = match config {
        StreamConfig::Moons {
            rotations_deg,
            n_per_domain,
            n_test,
            noise_sigma,
            ..
        } => {
            if rotations_deg.is_empty() {
                return Err(Error::Invalid("moons stream declares no domains".into()));
            }
            for (i, &rot) in rotations_deg.iter().enumerate() {
                let train = gen_two_moons(
                    *n_per_domain,
                    *noise_sigma,
                    rot,
                    crate::util::derive_seed(seed, "stream-train", i as u64),
                )?;
                let test = gen_two_moons(
                    *n_test,
                    *noise_sigma,
                    rot,
                    crate::util::derive_seed(seed, "stream-test", i as u64),
                )?;
                pairs.push((format!("moons_{rot}deg"), train, test));
            }
            2
        }
        StreamConfig::Blobs {
            k,
            means,
            shifts,
            cov_scale,
            n_per_domain,
            n_test,
            ..
        } => {
            if shifts.is_empty() {
                return Err(Error::Invalid("blobs stream declares no domains".into()));
            }
            let means = Matrix::from_rows(means)?;
            for (i, shift) in shifts.iter().enumerate() {
                let train = gen_gaussian_blobs(
                    *k,
                    *n_per_domain,
                    &means,
                    *cov_scale,
                    shift,
                    crate::util::derive_seed(seed, "stream-train", i as u64),
                )?;
                let test = gen_gaussian_blobs(
                    *k,
                    *n_test,
                    &means,
                    *cov_scale,
                    shift,
                    crate::util::derive_seed(seed, "stream-test", i as u64),
                )?;
                pairs.push((format!("blobs_{i}"), train, test));
            }
            *k
        }
        StreamConfig::Idx { domains, .. } => {
            if domains.is_empty() {
                return Err(Error::Invalid("idx stream declares no domains".into()));
            }
            let mut max_label = 0usize;
            for spec in domains {
                let train = load_idx(&spec.train_images, &spec.train_labels)?;
                let test = load_idx(&spec.test_images, &spec.test_labels)?;
                train.inputs.require_finite("idx train inputs")?;
                test.inputs.require_finite("idx test inputs")?;
                for d in [&train, &test] {
                    if let Some(labels) = &d.labels {
                        max_label = max_label.max(labels.iter().copied().max().unwrap_or(0));
                    }
                }
                pairs.push((spec.name.clone(), train, test));
            }
            max_label + 1
        }
    };

    let d = pairs[0].1.dim();
    for (name, train, test) in &pairs {
        if train.dim() != d || test.dim() != d {
            return Err(Error::Invalid(format!(
                "domain {name} has input width {} but the stream uses {d}",
                train.dim()
            )));
        }
        for dom in [train, test] {
            if let Some(labels) = &dom.labels {
                if labels.iter().any(|&y| y >= k) {
                    return Err(Error::Invalid(format!(
                        "domain {name} carries labels outside [0, {k})"
                    )));
                }
            }
        }
    }

    if imbalanced {
        for (_, train, test) in &mut pairs {
            apply_imbalance(train, k);
            apply_imbalance(test, k);
        }
    }

    // Source-train statistics applied unchanged to every split.
    let (mean, std) = column_stats(&pairs[0].1.inputs);
    for (_, train, test) in &mut pairs {
        standardize(&mut train.inputs, &mean, &std);
        standardize(&mut test.inputs, &mean, &std);
    }

    let mut iter = pairs.into_iter();
    let (name, mut source_train, mut source_test) = iter.next().expect("nonempty");
    // Source must exhibit every class; the mixture needs all k modes.
    let source_labels = source_train.labels.as_ref().expect("source labeled");
    let mut present = vec![false; k];
    for &y in source_labels {
        present[y] = true;
    }
    if let Some(missing) = present.iter().position(|&p| !p) {
        return Err(Error::Invalid(format!(
            "source domain is missing class {missing}"
        )));
    }
    source_train.split = Split::Train;
    source_test.split = Split::Test;
    let source = DomainPair {
        name: name.clone(),
        train: Domain {
            name: name.clone(),
            ..source_train
        },
        test: Domain { name, ..source_test },
    };

    let mut targets = Vec::new();
    for (name, mut train, mut test) in iter {
        train.labels = None; // targets arrive unlabeled
        train.split = Split::Train;
        test.split = Split::Test;
        targets.push(DomainPair {
            name: name.clone(),
            train: Domain {
                name: name.clone(),
                ..train
            },
            test: Domain { name, ..test },
        });
    }

    Ok(TaskStream {
        source,
        targets,
        k,
        d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn moons_full_turn_matches_zero_rotation() {
        let a = gen_two_moons(40, 0.1, 0.0, 7).unwrap();
        let b = gen_two_moons(40, 0.1, 360.0, 7).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn moons_without_noise_lie_on_the_arcs() {
        let d = gen_two_moons(50, 0.0, 0.0, 3).unwrap();
        let labels = d.labels.as_ref().unwrap();
        for (row, &y) in d.inputs.iter_rows().zip(labels) {
            let (cx, cy) = if y == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((row[0] - cx).powi(2) + (row[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12, "point off its arc by {}", r - 1.0);
        }
    }

    #[test]
    fn moons_rotation_equals_matrix_rotation_of_base() {
        let base = gen_two_moons(30, 0.15, 0.0, 11).unwrap();
        let rotated = gen_two_moons(30, 0.15, 90.0, 11).unwrap();
        let theta = 90.0_f64.rem_euclid(360.0).to_radians();
        let (sin, cos) = theta.sin_cos();
        for (b, r) in base.inputs.iter_rows().zip(rotated.inputs.iter_rows()) {
            assert_eq!(cos * b[0] - sin * b[1], r[0]);
            assert_eq!(sin * b[0] + cos * b[1], r[1]);
        }
    }

    #[test]
    fn moons_classes_are_balanced() {
        let d = gen_two_moons(101, 0.1, 0.0, 0).unwrap();
        let ones = d.labels.unwrap().iter().filter(|&&y| y == 1).count();
        assert_eq!(ones, 50);
    }

    #[test]
    fn blobs_zero_scale_collapses_to_shifted_means() {
        let means = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 2.0]]).unwrap();
        let d = gen_gaussian_blobs(2, 10, &means, 0.0, &[0.5, 0.5], 1).unwrap();
        let labels = d.labels.as_ref().unwrap();
        for (row, &y) in d.inputs.iter_rows().zip(labels) {
            assert_eq!(row[0], means.at(y, 0) + 0.5);
            assert_eq!(row[1], means.at(y, 1) + 0.5);
        }
    }

    #[test]
    fn blobs_class_means_concentrate() {
        let means = Matrix::from_rows(&[vec![2.0, -1.0], vec![-2.0, 1.0]]).unwrap();
        let n = 4000;
        let sigma = 0.7;
        let d = gen_gaussian_blobs(2, n, &means, sigma, &[0.0, 0.0], 5).unwrap();
        let labels = d.labels.as_ref().unwrap();
        let per_class = (n / 2) as f64;
        let tol = 5.0 * sigma / per_class.sqrt();
        for class in 0..2 {
            for c in 0..2 {
                let sum: f64 = d
                    .inputs
                    .iter_rows()
                    .zip(labels)
                    .filter(|(_, &y)| y == class)
                    .map(|(r, _)| r[c])
                    .sum();
                let m = sum / per_class;
                assert!((m - means.at(class, c)).abs() < tol);
            }
        }
    }

    #[test]
    fn blob_domains_differ_by_their_shift() {
        let means = Matrix::from_rows(&[vec![0.0, 0.0], vec![4.0, 4.0]]).unwrap();
        let a = gen_gaussian_blobs(2, 3000, &means, 0.5, &[0.0, 0.0], 9).unwrap();
        let b = gen_gaussian_blobs(2, 3000, &means, 0.5, &[1.5, -0.5], 10).unwrap();
        for class in 0..2usize {
            for c in 0..2usize {
                let mean_of = |d: &Domain| {
                    let labels = d.labels.as_ref().unwrap();
                    let vals: Vec<f64> = d
                        .inputs
                        .iter_rows()
                        .zip(labels)
                        .filter(|(_, &y)| y == class)
                        .map(|(r, _)| r[c])
                        .collect();
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
                let diff = mean_of(&b) - mean_of(&a);
                let expected = if c == 0 { 1.5 } else { -0.5 };
                assert!((diff - expected).abs() < 0.1, "class {class} col {c}: {diff}");
            }
        }
    }

    fn write_idx_images(path: &Path, count: u32, rows: u32, cols: u32, bytes: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        f.write_all(bytes).unwrap();
    }

    fn write_idx_labels(path: &Path, count: u32, bytes: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(bytes).unwrap();
    }

    #[test]
    fn idx_hand_encoded_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_idx_images(&img, 1, 2, 2, &[0, 128, 255, 64]);
        write_idx_labels(&lab, 1, &[3]);
        let d = load_idx(&img, &lab).unwrap();
        assert_eq!(d.inputs.rows(), 1);
        let row = d.inputs.row(0);
        assert_eq!(row[0], 0.0);
        assert_eq!(row[1], 128.0 / 255.0);
        assert_eq!(row[2], 1.0);
        assert_eq!(row[3], 64.0 / 255.0);
        assert_eq!(d.labels.unwrap(), vec![3]);
    }

    #[test]
    fn idx_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_idx_images(&img, 1, 2, 2, &[0, 1, 2, 3]);
        write_idx_labels(&lab, 2, &[1, 2]);
        match load_idx(&img, &lab) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn idx_empty_file_fails_at_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        File::create(&img).unwrap();
        let lab = dir.path().join("lab");
        write_idx_labels(&lab, 0, &[]);
        match load_idx(&img, &lab) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn idx_wrong_magic_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        write_idx_labels(&img, 1, &[0]); // label magic where image magic belongs
        write_idx_labels(&lab, 1, &[0]);
        assert!(matches!(load_idx(&img, &lab), Err(Error::Parse { .. })));
    }

    fn moons_config(rotations: Vec<f64>) -> StreamConfig {
        StreamConfig::Moons {
            rotations_deg: rotations,
            n_per_domain: 60,
            n_test: 40,
            noise_sigma: 0.1,
            imbalanced: false,
        }
    }

    #[test]
    fn stream_strips_target_train_labels() {
        let stream = make_task_stream(&moons_config(vec![0.0, 30.0, 60.0]), 5).unwrap();
        assert_eq!(stream.num_domains(), 3);
        assert!(stream.source.train.labels.is_some());
        for t in &stream.targets {
            assert!(t.train.labels.is_none());
            assert!(t.test.labels.is_some());
        }
    }

    #[test]
    fn single_domain_stream_is_valid_degenerate() {
        let stream = make_task_stream(&moons_config(vec![0.0]), 5).unwrap();
        assert!(stream.targets.is_empty());
    }

    #[test]
    fn declared_order_is_preserved() {
        let stream = make_task_stream(&moons_config(vec![60.0, 0.0, 30.0]), 5).unwrap();
        assert_eq!(stream.source.name, "moons_60deg");
        assert_eq!(stream.targets[0].name, "moons_0deg");
        assert_eq!(stream.targets[1].name, "moons_30deg");
    }

    #[test]
    fn streams_are_deterministic_per_seed() {
        let a = make_task_stream(&moons_config(vec![0.0, 45.0]), 12).unwrap();
        let b = make_task_stream(&moons_config(vec![0.0, 45.0]), 12).unwrap();
        assert_eq!(a.source.train.inputs.data(), b.source.train.inputs.data());
        assert_eq!(
            a.targets[0].train.inputs.data(),
            b.targets[0].train.inputs.data()
        );
    }

    #[test]
    fn source_statistics_standardize_the_source() {
        let stream = make_task_stream(&moons_config(vec![0.0, 30.0]), 9).unwrap();
        let inputs = &stream.source.train.inputs;
        for c in 0..2 {
            let n = inputs.rows() as f64;
            let mean: f64 = (0..inputs.rows()).map(|i| inputs.at(i, c)).sum::<f64>() / n;
            let var: f64 =
                (0..inputs.rows()).map(|i| (inputs.at(i, c) - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn imbalance_counts_match_formula_exactly() {
        let config = StreamConfig::Moons {
            rotations_deg: vec![0.0, 30.0],
            n_per_domain: 100,
            n_test: 50,
            noise_sigma: 0.1,
            imbalanced: true,
        };
        let stream = make_task_stream(&config, 3).unwrap();
        // balanced 100-point moons: 50 per class; keep (i+1)/2 fraction
        let expected = imbalance_keep_counts(&[50, 50]);
        assert_eq!(expected, vec![25, 50]);
        let labels = stream.source.train.labels.as_ref().unwrap();
        let mut counts = [0usize; 2];
        for &y in labels {
            counts[y] += 1;
        }
        assert_eq!(counts.to_vec(), expected);
        // test split: 25 per class before imbalance
        let labels = stream.source.test.labels.as_ref().unwrap();
        let mut counts = [0usize; 2];
        for &y in labels {
            counts[y] += 1;
        }
        assert_eq!(counts.to_vec(), imbalance_keep_counts(&[25, 25]));
    }

    #[test]
    fn idx_stream_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let mut domains = Vec::new();
        for (name, seed) in [("a", 1u8), ("b", 2u8)] {
            let train_images = dir.path().join(format!("{name}-train-img"));
            let train_labels = dir.path().join(format!("{name}-train-lab"));
            let test_images = dir.path().join(format!("{name}-test-img"));
            let test_labels = dir.path().join(format!("{name}-test-lab"));
            // 6 train / 4 test 2x2 images, labels cycling over {0, 1}
            let px = |n: u32| (0..n * 4).map(|i| (i as u8).wrapping_mul(seed)).collect::<Vec<_>>();
            write_idx_images(&train_images, 6, 2, 2, &px(6));
            write_idx_labels(&train_labels, 6, &[0, 1, 0, 1, 0, 1]);
            write_idx_images(&test_images, 4, 2, 2, &px(4));
            write_idx_labels(&test_labels, 4, &[1, 0, 1, 0]);
            domains.push(IdxDomainPaths {
                name: name.into(),
                train_images,
                train_labels,
                test_images,
                test_labels,
            });
        }
        let stream = make_task_stream(
            &StreamConfig::Idx {
                domains,
                imbalanced: false,
            },
            0,
        )
        .unwrap();
        assert_eq!(stream.k, 2);
        assert_eq!(stream.d, 4);
        assert_eq!(stream.num_domains(), 2);
        assert!(stream.source.train.labels.is_some());
        assert!(stream.targets[0].train.labels.is_none());
        assert_eq!(stream.targets[0].test.labels.as_ref().unwrap().len(), 4);
    }

    #[test]
    fn mismatched_widths_across_domains_fail() {
        // Blobs with 3-wide means after a declared 2-wide shift list cannot
        // be built; mismatch is caught at shift/means validation.
        let config = StreamConfig::Blobs {
            k: 2,
            means: vec![vec![0.0, 0.0], vec![1.0, 1.0]],
            shifts: vec![vec![0.0, 0.0], vec![1.0]],
            cov_scale: 0.3,
            n_per_domain: 20,
            n_test: 20,
            imbalanced: false,
        };
        assert!(make_task_stream(&config, 0).is_err());
    }
}
