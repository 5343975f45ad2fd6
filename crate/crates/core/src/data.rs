//! Galleries: labelled face images partitioned into identity-disjoint
//! world/dev/eval splits, built synthetically or loaded from a manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ManifestError, Result};
use crate::pgm;
use crate::types::FaceImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    World,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::World, Split::Dev, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::World => "world",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "world" => Ok(Split::World),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub identity: String,
    pub split: Split,
    pub image: FaceImage,
}

/// Labelled images with identity-disjoint splits and uniform dimensions.
///
/// Entry order is significant: the first image listed for an identity is its
/// enrollment image, the rest are probes.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    entries: Vec<GalleryEntry>,
    width: usize,
    height: usize,
}

impl Gallery {
    pub fn new(entries: Vec<GalleryEntry>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::structural("gallery has no entries"))?;
        let (width, height) = first.image.dims();
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &entries {
            if e.image.dims() != (width, height) {
                return Err(Error::structural(format!(
                    "image of `{}` is {}x{}, expected {width}x{height}",
                    e.identity,
                    e.image.width(),
                    e.image.height()
                )));
            }
            match owner.get(e.identity.as_str()) {
                Some(&s) if s != e.split => {
                    return Err(Error::SplitOverlap {
                        identity: e.identity.clone(),
                        first: s.to_string(),
                        second: e.split.to_string(),
                    })
                }
                Some(_) => {}
                None => {
                    owner.insert(&e.identity, e.split);
                }
            }
        }
        Ok(Gallery {
            entries,
            width,
            height,
        })
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Entries of one split in gallery order.
    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &GalleryEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn images(&self, split: Split) -> Vec<&FaceImage> {
        self.split_entries(split).map(|e| &e.image).collect()
    }

    /// Distinct identities of a split, ascending.
    pub fn identities(&self, split: Split) -> Vec<&str> {
        self.split_entries(split)
            .map(|e| e.identity.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// One enrollment image (the first listed) per identity, ordered by
    /// identity label.
    pub fn enrolled_templates(&self, split: Split) -> Result<Vec<(String, FaceImage)>> {
        let mut firsts: BTreeMap<&str, &FaceImage> = BTreeMap::new();
        for e in self.split_entries(split) {
            firsts.entry(&e.identity).or_insert(&e.image);
        }
        if firsts.is_empty() {
            return Err(Error::structural(format!("split `{split}` is empty")));
        }
        Ok(firsts
            .into_iter()
            .map(|(id, img)| (id.to_string(), img.clone()))
            .collect())
    }
}

/// Parameters of the synthetic face model.
///
/// Every face is a mean face plus a combination of the `basis_size`
/// lowest-frequency 2-D cosine images (each scaled to unit RMS, the sum
/// divided by √basis_size). An identity's coefficients are its population
/// group's centroid plus `identity_scale`·N(0, 1); each image adds
/// `intra_noise`·N(0, 1). Pixels are clamped to [0, 1] and quantized to 8 bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub identities: usize,
    pub images_per_identity: usize,
    pub width: usize,
    pub height: usize,
    pub identity_scale: f64,
    pub intra_noise: f64,
    pub seed: u64,
    #[serde(default = "default_basis_size")]
    pub basis_size: usize,
    /// Relative sizes of population groups; identities are assigned in
    /// proportion. A single group means no population structure.
    #[serde(default = "default_group_weights")]
    pub group_weights: Vec<f64>,
    /// Std of group-centroid coefficients.
    #[serde(default)]
    pub group_scale: f64,
}

fn default_basis_size() -> usize {
    32
}

fn default_group_weights() -> Vec<f64> {
    vec![1.0]
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.images_per_identity == 0 {
            return Err(Error::structural(
                "identity and image counts must be at least 1",
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::structural("image dimensions must be non-zero"));
        }
        if !(self.intra_noise > 0.0 && self.identity_scale > self.intra_noise) {
            return Err(Error::structural(format!(
                "need identity_scale > intra_noise > 0, got {} and {}",
                self.identity_scale, self.intra_noise
            )));
        }
        if !self.identity_scale.is_finite() {
            return Err(Error::structural("identity_scale must be finite"));
        }
        if self.basis_size == 0 || self.basis_size >= self.width * self.height {
            return Err(Error::structural(format!(
                "basis_size must be in 1..{}",
                self.width * self.height
            )));
        }
        if self.group_weights.is_empty()
            || self
                .group_weights
                .iter()
                .any(|w| !(w.is_finite() && *w > 0.0))
        {
            return Err(Error::structural("group weights must be positive"));
        }
        if !(self.group_scale.is_finite() && self.group_scale >= 0.0) {
            return Err(Error::structural("group_scale must be non-negative"));
        }
        Ok(())
    }
}

/// Low-frequency 2-D cosine images with unit RMS, ordered by total frequency.
fn cosine_basis(width: usize, height: usize, count: usize) -> Vec<Vec<f64>> {
    let mut freqs: Vec<(usize, usize)> = (0..height)
        .flat_map(|v| (0..width).map(move |u| (u, v)))
        .filter(|&(u, v)| u + v > 0)
        .collect();
    freqs.sort_by_key(|&(u, v)| (u + v, v));
    freqs
        .into_iter()
        .take(count)
        .map(|(u, v)| {
            let mut img: Vec<f64> = (0..height)
                .flat_map(|y| {
                    (0..width).map(move |x| {
                        let cx = (std::f64::consts::PI * u as f64 * (x as f64 + 0.5)
                            / width as f64)
                            .cos();
                        let cy = (std::f64::consts::PI * v as f64 * (y as f64 + 0.5)
                            / height as f64)
                            .cos();
                        cx * cy
                    })
                })
                .collect();
            let rms = (img.iter().map(|p| p * p).sum::<f64>() / img.len() as f64).sqrt();
            img.iter_mut().for_each(|p| *p /= rms);
            img
        })
        .collect()
}

/// A soft oval on a mid-grey background.
fn mean_face(width: usize, height: usize) -> Vec<f64> {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let (rx, ry) = (0.38 * width as f64, 0.48 * height as f64);
    (0..height)
        .flat_map(|y| {
            (0..width).map(move |x| {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                0.35 + 0.3 * (-(dx * dx + dy * dy).powi(2)).exp()
            })
        })
        .collect()
}

fn split_counts(n: usize) -> (usize, usize) {
    let world = (0.6 * n as f64).round() as usize;
    let dev = ((0.2 * n as f64).round() as usize).min(n - world);
    (world, dev)
}

/// Builds a deterministic synthetic gallery. Identity labels are `id0000`,
/// `id0001`, …; the identity-to-split assignment is a seeded 60/20/20 shuffle.
pub fn synth_gallery(spec: &SynthSpec) -> Result<Gallery> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis = cosine_basis(spec.width, spec.height, spec.basis_size);
    let base = mean_face(spec.width, spec.height);
    let dim = basis.len();
    let norm = 1.0 / (dim as f64).sqrt();

    let gaussian = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<f64> {
        (0..dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let centroids: Vec<Vec<f64>> = spec
        .group_weights
        .iter()
        .map(|_| gaussian(&mut rng, spec.group_scale))
        .collect();
    let group_of = assign_groups(&spec.group_weights, spec.identities);

    let prototypes: Vec<Vec<f64>> = group_of
        .iter()
        .map(|&g| {
            let own = gaussian(&mut rng, spec.identity_scale);
            own.iter().zip(&centroids[g]).map(|(a, c)| a + c).collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..spec.identities).collect();
    order.shuffle(&mut rng);
    let (n_world, n_dev) = split_counts(spec.identities);
    let mut split_of = vec![Split::Eval; spec.identities];
    for (rank, &id) in order.iter().enumerate() {
        split_of[id] = if rank < n_world {
            Split::World
        } else if rank < n_world + n_dev {
            Split::Dev
        } else {
            Split::Eval
        };
    }

    let mut entries = Vec::with_capacity(spec.identities * spec.images_per_identity);
    for (id, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.images_per_identity {
            let noise = gaussian(&mut rng, spec.intra_noise);
            let mut pixels = base.clone();
            for ((c, n), b) in proto.iter().zip(&noise).zip(&basis) {
                let coeff = (c + n) * norm;
                for (p, bp) in pixels.iter_mut().zip(b) {
                    *p += coeff * bp;
                }
            }
            for p in &mut pixels {
                *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
            entries.push(GalleryEntry {
                identity: format!("id{id:04}"),
                split: split_of[id],
                image: FaceImage::new(spec.width, spec.height, pixels)?,
            });
        }
    }
    Gallery::new(entries)
}

/// Largest-remainder apportionment of `n` identities to groups, listed in
/// group order.
fn assign_groups(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &g in rest.iter().take(n - assigned) {
        counts[g] += 1;
    }
    counts
        .iter()
        .enumerate()
        .flat_map(|(g, &c)| std::iter::repeat_n(g, c))
        .collect()
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    identity: String,
    split: String,
    path: String,
}

/// Reads a `identity,split,path` CSV manifest of binary PGM images. Relative
/// image paths are resolved against the manifest's directory; lines starting
/// with `#` are skipped.
pub fn load_manifest(path: &Path) -> Result<Gallery> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let fail = |line: u64, kind: ManifestError| Error::Manifest {
        path: path.to_path_buf(),
        line,
        kind,
    };

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| fail(1, ManifestError::Malformed(e.to_string())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["identity", "split", "path"] {
        return Err(fail(
            1,
            ManifestError::Malformed(format!(
                "header must be `identity,split,path`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )),
        ));
    }

    let mut entries: Vec<GalleryEntry> = Vec::new();
    let mut owner: BTreeMap<String, Split> = BTreeMap::new();
    let mut dims: Option<(usize, usize)> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            fail(line, ManifestError::Malformed(e.to_string()))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: ManifestRow = record
            .deserialize(Some(&headers))
            .map_err(|e| fail(line, ManifestError::Malformed(e.to_string())))?;
        let split: Split = row
            .split
            .parse()
            .map_err(|s| fail(line, ManifestError::UnknownSplit(s)))?;
        if row.identity.is_empty() {
            return Err(fail(
                line,
                ManifestError::Malformed("empty identity".into()),
            ));
        }
        if let Some(&prev) = owner.get(&row.identity) {
            if prev != split {
                return Err(Error::SplitOverlap {
                    identity: row.identity,
                    first: prev.to_string(),
                    second: split.to_string(),
                });
            }
        }
        let image_path = root.join(&row.path);
        if !image_path.is_file() {
            return Err(fail(line, ManifestError::MissingImage(image_path)));
        }
        let bytes = fs::read(&image_path).map_err(|e| Error::io(&image_path, e))?;
        let image = pgm::decode(&bytes).map_err(|reason| {
            fail(
                line,
                ManifestError::BadImage {
                    path: image_path.clone(),
                    reason,
                },
            )
        })?;
        let (want_w, want_h) = *dims.get_or_insert(image.dims());
        if image.dims() != (want_w, want_h) {
            return Err(fail(
                line,
                ManifestError::DimensionMismatch {
                    got_w: image.width(),
                    got_h: image.height(),
                    want_w,
                    want_h,
                },
            ));
        }
        owner.insert(row.identity.clone(), split);
        entries.push(GalleryEntry {
            identity: row.identity,
            split,
            image,
        });
    }
    if entries.is_empty() {
        return Err(fail(1, ManifestError::NoEntries));
    }
    Gallery::new(entries)
}

/// Writes every image as PGM under `dir/images/` and a manifest at
/// `dir/manifest.csv`, preserving entry order. `comment` goes into each image
/// header and as `#` lines atop the manifest. Returns the manifest path.
pub fn write_manifest(gallery: &Gallery, dir: &Path, comment: Option<&str>) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = dir.join("manifest.csv");
    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::structural(format!("csv: {e}"));
    writer
        .write_record(["identity", "split", "path"])
        .map_err(csv_err)?;
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for e in gallery.entries() {
        let n = seen.entry(&e.identity).or_insert(0);
        let rel = format!("images/{}_{:03}.pgm", e.identity, n);
        *n += 1;
        pgm::write(&dir.join(&rel), &e.image, comment)?;
        writer
            .write_record([e.identity.as_str(), e.split.as_str(), rel.as_str()])
            .map_err(csv_err)?;
    }
    let body = writer
        .into_inner()
        .map_err(|e| Error::structural(format!("csv: {e}")))?;
    let mut bytes = Vec::new();
    for line in comment.iter().flat_map(|c| c.lines()) {
        bytes.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    bytes.extend_from_slice(&body);
    fs::write(&manifest, bytes).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            identities: 10,
            images_per_identity: 3,
            width: 8,
            height: 8,
            identity_scale: 0.1,
            intra_noise: 0.02,
            seed: 5,
            basis_size: 12,
            group_weights: vec![1.0],
            group_scale: 0.0,
        }
    }

    #[test]
    fn synth_is_deterministic_and_disjoint() {
        let a = synth_gallery(&spec()).unwrap();
        let b = synth_gallery(&spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.entries().len(), 30);
        let counts: Vec<usize> = Split::ALL.iter().map(|&s| a.identities(s).len()).collect();
        assert_eq!(counts, vec![6, 2, 2]);
    }

    #[test]
    fn vanishing_noise_gives_identical_images() {
        let mut s = spec();
        s.intra_noise = 1e-300;
        let g = synth_gallery(&s).unwrap();
        for chunk in g.entries().chunks(3) {
            assert!(chunk.iter().all(|e| e.image == chunk[0].image));
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = spec();
        s.intra_noise = 0.2;
        assert!(synth_gallery(&s).is_err());
        s = spec();
        s.group_weights = vec![];
        assert!(s.validate().is_err());
    }

    #[test]
    fn groups_apportioned_by_largest_remainder() {
        assert_eq!(assign_groups(&[0.8, 0.2], 5), vec![0, 0, 0, 0, 1]);
        assert_eq!(assign_groups(&[1.0, 1.0, 1.0], 4), vec![0, 0, 1, 2]);
        assert_eq!(
            assign_groups(&[0.8, 0.2], 50)
                .iter()
                .filter(|&&g| g == 1)
                .count(),
            10
        );
    }

    #[test]
    fn basis_is_orthogonal() {
        let b = cosine_basis(8, 6, 10);
        for i in 0..b.len() {
            for j in 0..b.len() {
                let d: f64 = b[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum::<f64>() / 48.0;
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12, "{i} {j} {d}");
            }
        }
    }

    #[test]
    fn enrolled_templates_sorted_first_listed() {
        let img = |v: f64| FaceImage::filled(2, 2, v).unwrap();
        let entries = vec![
            GalleryEntry {
                identity: "b".into(),
                split: Split::Dev,
                image: img(0.1),
            },
            GalleryEntry {
                identity: "a".into(),
                split: Split::Dev,
                image: img(0.2),
            },
            GalleryEntry {
                identity: "b".into(),
                split: Split::Dev,
                image: img(0.3),
            },
        ];
        let g = Gallery::new(entries).unwrap();
        let t = g.enrolled_templates(Split::Dev).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].0.as_str(), t[0].1.pixels()[0]), ("a", 0.2));
        assert_eq!((t[1].0.as_str(), t[1].1.pixels()[0]), ("b", 0.1));
        assert!(g.enrolled_templates(Split::World).is_err());
    }

    #[test]
    fn overlap_rejected() {
        let img = FaceImage::filled(2, 2, 0.5).unwrap();
        let entries = vec![
            GalleryEntry {
                identity: "x".into(),
                split: Split::World,
                image: img.clone(),
            },
            GalleryEntry {
                identity: "x".into(),
                split: Split::Dev,
                image: img,
            },
        ];
        match Gallery::new(entries) {
            Err(Error::SplitOverlap { identity, .. }) => assert_eq!(identity, "x"),
            other => panic!("{other:?}"),
        }
    }
}
