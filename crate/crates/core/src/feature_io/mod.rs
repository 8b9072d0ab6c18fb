//! Feature bundles: one sample's frozen-encoder output plus its labels.
//!
//! On disk a bundle is
//!
//! ```text
//! "AMOE" | u16 version | u32 header_len | JSON header | f32-LE payload | u8 mask
//! ```
//!
//! The payload holds `patch_embeddings` (row-major `N×D`), the `cls`
//! embedding (`D`), then each extra encoder layer (`N×D`). The mask, when
//! present, is one byte per patch.

mod manifest;
pub mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use manifest::{ClassSplit, Dataset, DatasetManifest, ManifestEntry, Sample};
pub use synth::{gen_synthetic, AnomalyKind, AnomalyMix, SyntheticSpec};

pub const BUNDLE_MAGIC: [u8; 4] = *b"AMOE";
pub const BUNDLE_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub sample_id: String,
    pub class_id: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    /// Row-major `N×D` patch embeddings, `N = grid_h·grid_w`.
    pub patch_embeddings: Vec<f32>,
    pub cls_embedding: Vec<f32>,
    /// Additional `N×D` encoder layers.
    pub layer_stack: Vec<Vec<f32>>,
    pub label: Label,
    /// Patch-resolution ground truth, one byte (0 or 1) per patch.
    pub pixel_mask: Option<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleHeader {
    sample_id: String,
    class_id: String,
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    n_layers: usize,
    label: Label,
    has_mask: bool,
}

impl FeatureBundle {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 || self.dim == 0 {
            return Err(Error::DimMismatch(format!(
                "grid {}x{} dim {} must be positive",
                self.grid_h, self.grid_w, self.dim
            )));
        }
        let nd = self.num_patches() * self.dim;
        if self.patch_embeddings.len() != nd {
            return Err(Error::DimMismatch(format!(
                "patch_embeddings has {} values, expected {nd}",
                self.patch_embeddings.len()
            )));
        }
        if self.cls_embedding.len() != self.dim {
            return Err(Error::DimMismatch(format!(
                "cls_embedding has {} values, expected {}",
                self.cls_embedding.len(),
                self.dim
            )));
        }
        for (i, layer) in self.layer_stack.iter().enumerate() {
            if layer.len() != nd {
                return Err(Error::DimMismatch(format!(
                    "layer {i} has {} values, expected {nd}",
                    layer.len()
                )));
            }
        }
        let all = std::iter::once(&self.patch_embeddings)
            .chain(std::iter::once(&self.cls_embedding))
            .chain(self.layer_stack.iter());
        for values in all {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidBundle(format!(
                    "{}: non-finite embedding value",
                    self.sample_id
                )));
            }
        }
        if let Some(mask) = &self.pixel_mask {
            if mask.len() != self.num_patches() {
                return Err(Error::DimMismatch(format!(
                    "mask has {} cells, expected {}",
                    mask.len(),
                    self.num_patches()
                )));
            }
            if mask.iter().any(|&m| m > 1) {
                return Err(Error::InvalidBundle("mask is not binary".into()));
            }
            if self.label == Label::Normal && mask.iter().any(|&m| m == 1) {
                return Err(Error::InvalidBundle(format!(
                    "{}: normal sample carries a non-empty mask",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }

    pub fn patch_matrix(&self) -> Mat {
        to_mat(&self.patch_embeddings, self.num_patches(), self.dim)
    }

    pub fn cls_vector(&self) -> Vec<f64> {
        self.cls_embedding.iter().map(|&v| v as f64).collect()
    }

    /// Number of selectable layers: the patch embeddings plus the layer stack.
    pub fn num_layers(&self) -> usize {
        1 + self.layer_stack.len()
    }

    fn layer(&self, index: usize) -> &[f32] {
        if index == 0 {
            &self.patch_embeddings
        } else {
            &self.layer_stack[index - 1]
        }
    }

    /// Mask as booleans, or all-false when absent.
    pub fn mask_or_empty(&self) -> Vec<bool> {
        match &self.pixel_mask {
            Some(m) => m.iter().map(|&v| v == 1).collect(),
            None => vec![false; self.num_patches()],
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = BundleHeader {
            sample_id: self.sample_id.clone(),
            class_id: self.class_id.clone(),
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            dim: self.dim,
            n_layers: self.layer_stack.len(),
            label: self.label,
            has_mask: self.pixel_mask.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        let floats = self.patch_embeddings.len() * (1 + self.layer_stack.len()) + self.dim;
        let mut out = Vec::with_capacity(10 + json.len() + 4 * floats + self.num_patches());
        out.extend_from_slice(&BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let arrays = std::iter::once(&self.patch_embeddings)
            .chain(std::iter::once(&self.cls_embedding))
            .chain(self.layer_stack.iter());
        for values in arrays {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(mask) = &self.pixel_mask {
            out.extend_from_slice(mask);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != BUNDLE_MAGIC {
            return Err(Error::BadMagic {
                expected: BUNDLE_MAGIC,
                found: magic,
            });
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != BUNDLE_VERSION {
            return Err(Error::VersionMismatch {
                expected: BUNDLE_VERSION,
                found: version,
            });
        }
        let header_len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let header: BundleHeader = serde_json::from_slice(r.take(header_len)?)?;
        if header.grid_h == 0 || header.grid_w == 0 || header.dim == 0 {
            return Err(Error::DimMismatch(format!(
                "header declares grid {}x{} dim {}",
                header.grid_h, header.grid_w, header.dim
            )));
        }
        let n = header.grid_h * header.grid_w;
        let nd = n * header.dim;
        let needed =
            4 * (nd * (1 + header.n_layers) + header.dim) + if header.has_mask { n } else { 0 };
        if r.remaining() < needed {
            return Err(Error::Truncated {
                needed,
                found: r.remaining(),
            });
        }
        if r.remaining() > needed {
            return Err(Error::InvalidBundle(format!(
                "{} trailing bytes after payload",
                r.remaining() - needed
            )));
        }
        let patch_embeddings = r.f32s(nd)?;
        let cls_embedding = r.f32s(header.dim)?;
        let layer_stack = (0..header.n_layers)
            .map(|_| r.f32s(nd))
            .collect::<Result<Vec<_>>>()?;
        let pixel_mask = if header.has_mask {
            Some(r.take(n)?.to_vec())
        } else {
            None
        };
        let bundle = FeatureBundle {
            sample_id: header.sample_id,
            class_id: header.class_id,
            grid_h: header.grid_h,
            grid_w: header.grid_w,
            dim: header.dim,
            patch_embeddings,
            cls_embedding,
            layer_stack,
            label: header.label,
            pixel_mask,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                needed: n,
                found: self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn write_bundle(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    let bytes = bundle.encode()?;
    if let Some(parent) = path.as_ref().parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    FeatureBundle::decode(&fs::read(path)?)
}

pub fn to_mat(values: &[f32], rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |(i, j)| values[i * cols + j] as f64)
}

/// Which encoder layers feed the reconstruction target. Index 0 is the patch
/// embedding itself, `i ≥ 1` is `layer_stack[i - 1]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSelection {
    #[default]
    All,
    Indices(Vec<usize>),
}

/// Elementwise mean of the selected `N×D` layers.
pub fn fuse_target(bundle: &FeatureBundle, selection: &LayerSelection) -> Result<Mat> {
    let available = bundle.num_layers();
    let indices: BTreeSet<usize> = match selection {
        LayerSelection::All => (0..available).collect(),
        LayerSelection::Indices(v) => v.iter().copied().collect(),
    };
    if indices.is_empty() {
        return Err(Error::EmptySelection);
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= available) {
        return Err(Error::LayerIndex {
            index: bad,
            available,
        });
    }
    let (n, d) = (bundle.num_patches(), bundle.dim);
    let mut acc = Mat::zeros((n, d));
    for &i in &indices {
        let layer = bundle.layer(i);
        acc.iter_mut()
            .zip(layer)
            .for_each(|(a, &v)| *a += v as f64);
    }
    acc /= indices.len() as f64;
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn small_bundle(layers: usize, with_mask: bool) -> FeatureBundle {
        let (h, w, d) = (2, 3, 4);
        let nd = h * w * d;
        FeatureBundle {
            sample_id: "s0".into(),
            class_id: "widget".into(),
            grid_h: h,
            grid_w: w,
            dim: d,
            patch_embeddings: (0..nd).map(|i| i as f32 * 0.5 - 3.0).collect(),
            cls_embedding: vec![1.0, -2.0, 0.25, 8.0],
            layer_stack: (0..layers)
                .map(|l| (0..nd).map(|i| (i + l) as f32).collect())
                .collect(),
            label: if with_mask { Label::Anomalous } else { Label::Normal },
            pixel_mask: with_mask.then(|| vec![0, 1, 1, 0, 0, 0]),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for (layers, mask) in [(0, false), (2, true)] {
            let b = small_bundle(layers, mask);
            let bytes = b.encode().unwrap();
            assert_eq!(FeatureBundle::decode(&bytes).unwrap(), b);
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = small_bundle(0, false).encode().unwrap();
        bytes[0] = b'X';
        assert!(matches!(FeatureBundle::decode(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let mut bytes = small_bundle(0, false).encode().unwrap();
        bytes[4] = 2;
        assert!(matches!(
            FeatureBundle::decode(&bytes),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn short_payload_is_truncated() {
        let bytes = small_bundle(1, false).encode().unwrap();
        let cut = &bytes[..bytes.len() - 7];
        assert!(matches!(FeatureBundle::decode(cut), Err(Error::Truncated { .. })));
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        let mut b = small_bundle(0, false);
        b.cls_embedding.pop();
        assert!(matches!(b.encode(), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn normal_with_mask_is_invalid() {
        let mut b = small_bundle(0, true);
        b.label = Label::Normal;
        assert!(matches!(b.validate(), Err(Error::InvalidBundle(_))));
        b.pixel_mask = Some(vec![0; 6]);
        assert!(b.validate().is_ok());
    }

    #[test]
    fn fuse_single_layer_is_that_layer() {
        let b = small_bundle(2, false);
        let t = fuse_target(&b, &LayerSelection::Indices(vec![0])).unwrap();
        assert_eq!(t, b.patch_matrix());
        let t2 = fuse_target(&b, &LayerSelection::Indices(vec![2])).unwrap();
        assert_eq!(t2, to_mat(&b.layer_stack[1], 6, 4));
    }

    #[test]
    fn fuse_identical_layers_is_idempotent() {
        let mut b = small_bundle(1, false);
        b.layer_stack[0] = b.patch_embeddings.clone();
        let t = fuse_target(&b, &LayerSelection::All).unwrap();
        assert_eq!(t, b.patch_matrix());
    }

    #[test]
    fn fuse_ones_and_threes_gives_twos() {
        let mut b = small_bundle(1, false);
        b.patch_embeddings = vec![1.0; 24];
        b.layer_stack[0] = vec![3.0; 24];
        let t = fuse_target(&b, &LayerSelection::All).unwrap();
        assert!(t.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn fuse_errors() {
        let b = small_bundle(0, false);
        assert!(matches!(
            fuse_target(&b, &LayerSelection::Indices(vec![])),
            Err(Error::EmptySelection)
        ));
        assert!(matches!(
            fuse_target(&b, &LayerSelection::Indices(vec![1])),
            Err(Error::LayerIndex { index: 1, available: 1 })
        ));
    }

    fn arb_bundle() -> impl Strategy<Value = FeatureBundle> {
        (1usize..4, 1usize..4, 1usize..5, 0usize..3, any::<bool>(), any::<u64>()).prop_map(
            |(h, w, d, layers, masked, seed)| {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let nd = h * w * d;
                let mut vals = |n: usize| -> Vec<f32> {
                    (0..n).map(|_| rng.gen_range(-1e3f32..1e3)).collect()
                };
                let patch = vals(nd);
                let cls = vals(d);
                let stack = (0..layers).map(|_| vals(nd)).collect();
                FeatureBundle {
                    sample_id: format!("id-{seed}"),
                    class_id: "c".into(),
                    grid_h: h,
                    grid_w: w,
                    dim: d,
                    patch_embeddings: patch,
                    cls_embedding: cls,
                    layer_stack: stack,
                    label: if masked { Label::Anomalous } else { Label::Normal },
                    pixel_mask: masked.then(|| (0..h * w).map(|i| (i % 2) as u8).collect()),
                }
            },
        )
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(b in arb_bundle()) {
            let bytes = b.encode().unwrap();
            let back = FeatureBundle::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode().unwrap(), bytes);
            prop_assert_eq!(back, b);
        }

        #[test]
        fn fuse_is_order_free(b in arb_bundle(), rot in 0usize..3) {
            let mut idx: Vec<usize> = (0..b.num_layers()).collect();
            let forward = fuse_target(&b, &LayerSelection::Indices(idx.clone())).unwrap();
            let k = rot % idx.len();
            idx.rotate_left(k);
            idx.reverse();
            let shuffled = fuse_target(&b, &LayerSelection::Indices(idx)).unwrap();
            prop_assert_eq!(forward, shuffled);
        }
    }
}
