//! Episode bundles of precomputed embeddings and their flattening into the
//! support patch corpus.
//!
//! Feature payloads are stored at `f32` precision, which is what the CCFB
//! format carries on disk, and held in memory as `f64`. Ingestion normalizes
//! any row whose norm is off by more than [`UNIT_TOL`]; rows that are already
//! unit length keep their exact values so that a load/save cycle never
//! perturbs the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, FeatureMatrix, NORM_EPS};

pub const BUNDLE_MAGIC: [u8; 4] = *b"CCFB";
pub const BUNDLE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 7 * 4;

/// Rows within this distance of unit norm are accepted unchanged.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SupportSample {
    pub label: usize,
    pub global: Vec<f64>,
    /// `(A+1)·M` rows, view-major; view 0 is the original image.
    pub views: FeatureMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub label: usize,
    pub global: Vec<f64>,
    /// `M` rows of original-view patch features.
    pub patches: FeatureMatrix,
}

/// Planted signal-patch positions (view-0 patch indices) per sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planted {
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

/// JSON metadata block. Unknown keys are preserved.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<Planted>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// A K-way N-shot episode of precomputed embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBundle {
    num_classes: usize,
    dim: usize,
    patches: usize,
    augmentations: usize,
    text: FeatureMatrix,
    support: Vec<SupportSample>,
    query: Vec<QuerySample>,
    metadata: Metadata,
}

impl EpisodeBundle {
    /// Validates and normalizes the parts of an episode.
    ///
    /// `patches` is M and `augmentations` is A; the class count and the
    /// embedding dimension are taken from `text`.
    pub fn new(
        text: FeatureMatrix,
        patches: usize,
        augmentations: usize,
        support: Vec<SupportSample>,
        query: Vec<QuerySample>,
        metadata: Metadata,
    ) -> Result<Self> {
        let num_classes = text.rows();
        let dim = text.cols();
        if num_classes == 0 || dim == 0 || patches == 0 {
            return Err(Error::InvalidBundle(
                "class count, dimension and patch count must be positive".into(),
            ));
        }
        if support.is_empty() {
            return Err(Error::InvalidBundle("support set is empty".into()));
        }
        let mut b = Self {
            num_classes,
            dim,
            patches,
            augmentations,
            text,
            support,
            query,
            metadata,
        };
        ingest_rows(&mut b.text, "text")?;
        let view_rows = (augmentations + 1) * patches;
        for (i, s) in b.support.iter_mut().enumerate() {
            check_label(s.label, num_classes, "support", i)?;
            ingest_vec(&mut s.global, dim, &format!("support {i} global"))?;
            check_shape(&s.views, view_rows, dim, &format!("support {i} views"))?;
            ingest_rows(&mut s.views, &format!("support {i} views"))?;
        }
        for (i, q) in b.query.iter_mut().enumerate() {
            check_label(q.label, num_classes, "query", i)?;
            ingest_vec(&mut q.global, dim, &format!("query {i} global"))?;
            check_shape(&q.patches, patches, dim, &format!("query {i} patches"))?;
            ingest_rows(&mut q.patches, &format!("query {i} patches"))?;
        }
        Ok(b)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Patches per view (M).
    pub fn patches(&self) -> usize {
        self.patches
    }

    /// Augmented views per image (A), not counting the original.
    pub fn augmentations(&self) -> usize {
        self.augmentations
    }

    pub fn text(&self) -> &FeatureMatrix {
        &self.text
    }

    pub fn support(&self) -> &[SupportSample] {
        &self.support
    }

    pub fn query(&self) -> &[QuerySample] {
        &self.query
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }

    pub fn set_metadata(&mut self, metadata: Metadata) {
        self.metadata = metadata;
    }

    /// Total corpus rows H = |S|·(A+1)·M.
    pub fn corpus_len(&self) -> usize {
        self.support.len() * (self.augmentations + 1) * self.patches
    }

    /// Reorders the support set: sample `i` of the result is `order[i]` of self.
    pub fn permute_support(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.support.len()];
        if order.len() != self.support.len()
            || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true))
        {
            return Err(Error::InvalidBundle("not a permutation of the support set".into()));
        }
        let mut out = self.clone();
        out.support = order.iter().map(|&i| self.support[i].clone()).collect();
        if let Some(p) = out.metadata.planted.as_mut() {
            if p.support.len() == order.len() {
                p.support = order.iter().map(|&i| p.support[i].clone()).collect();
            }
        }
        Ok(out)
    }

    /// Unit-norm `f64` text matrix.
    pub fn unit_text(&self) -> FeatureMatrix {
        renormalized(&self.text)
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|q| q.label).collect()
    }

    /// Unit-norm support globals, one row per sample.
    pub fn support_globals(&self) -> FeatureMatrix {
        let rows: Vec<&[f64]> = self.support.iter().map(|s| s.global.as_slice()).collect();
        renormalized(&FeatureMatrix::from_rows(&rows).expect("validated shapes"))
    }

    pub fn query_globals(&self) -> FeatureMatrix {
        if self.query.is_empty() {
            return FeatureMatrix::zeros(0, self.dim);
        }
        let rows: Vec<&[f64]> = self.query.iter().map(|q| q.global.as_slice()).collect();
        renormalized(&FeatureMatrix::from_rows(&rows).expect("validated shapes"))
    }

    /// Serializes to CCFB bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload_floats() * 4 + 4 + meta.len());
        out.extend_from_slice(&BUNDLE_MAGIC);
        for v in [
            BUNDLE_VERSION as usize,
            self.num_classes,
            self.dim,
            self.patches,
            self.augmentations,
            self.support.len(),
            self.query.len(),
        ] {
            out.extend_from_slice(&to_u32(v)?.to_le_bytes());
        }
        put_floats(&mut out, self.text.data())?;
        for s in &self.support {
            out.extend_from_slice(&to_u32(s.label)?.to_le_bytes());
            put_floats(&mut out, &s.global)?;
            put_floats(&mut out, s.views.data())?;
        }
        for q in &self.query {
            out.extend_from_slice(&to_u32(q.label)?.to_le_bytes());
            put_floats(&mut out, &q.global)?;
            put_floats(&mut out, q.patches.data())?;
        }
        out.extend_from_slice(&to_u32(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != BUNDLE_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(magic);
            return Err(Error::BadMagic {
                expected: BUNDLE_MAGIC,
                found,
            });
        }
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut header = [0usize; 6];
        for h in &mut header {
            *h = r.u32()? as usize;
        }
        let [c, d, m, a, n_support, n_query] = header;
        // Refuse before allocating anything proportional to the header.
        let payload = expected_payload_len(c, d, m, a, n_support, n_query).ok_or_else(|| {
            Error::DimensionMismatch("header dimensions overflow".into())
        })?;
        if bytes.len() < HEADER_LEN + payload + 4 {
            return Err(Error::DimensionMismatch(format!(
                "payload truncated: header requires at least {} bytes, file has {}",
                HEADER_LEN + payload + 4,
                bytes.len()
            )));
        }
        let text = FeatureMatrix::from_vec(c, d, r.floats(c * d)?)?;
        let view_rows = (a + 1) * m;
        let mut support = Vec::with_capacity(n_support);
        for _ in 0..n_support {
            let label = r.u32()? as usize;
            let global = r.floats(d)?;
            let views = FeatureMatrix::from_vec(view_rows, d, r.floats(view_rows * d)?)?;
            support.push(SupportSample {
                label,
                global,
                views,
            });
        }
        let mut query = Vec::with_capacity(n_query);
        for _ in 0..n_query {
            let label = r.u32()? as usize;
            let global = r.floats(d)?;
            let patches = FeatureMatrix::from_vec(m, d, r.floats(m * d)?)?;
            query.push(QuerySample {
                label,
                global,
                patches,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta_bytes = r.take(meta_len)?;
        if r.pos != bytes.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} trailing bytes after metadata",
                bytes.len() - r.pos
            )));
        }
        let metadata = if meta_len == 0 {
            Metadata::default()
        } else {
            let text = std::str::from_utf8(meta_bytes)
                .map_err(|e| Error::InvalidBundle(format!("metadata is not UTF-8: {e}")))?;
            serde_json::from_str(text)?
        };
        Self::new(text, m, a, support, query, metadata)
    }

    fn payload_floats(&self) -> usize {
        expected_payload_len(
            self.num_classes,
            self.dim,
            self.patches,
            self.augmentations,
            self.support.len(),
            self.query.len(),
        )
        .unwrap_or(0)
            / 4
    }
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<EpisodeBundle> {
    EpisodeBundle::from_bytes(&fs::read(path)?)
}

pub fn save_bundle(bundle: &EpisodeBundle, path: impl AsRef<Path>) -> Result<()> {
    let bytes = bundle.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Bytes between the header and the metadata length field.
fn expected_payload_len(
    c: usize,
    d: usize,
    m: usize,
    a: usize,
    n_support: usize,
    n_query: usize,
) -> Option<usize> {
    let text = c.checked_mul(d)?.checked_mul(4)?;
    let views = a.checked_add(1)?.checked_mul(m)?.checked_mul(d)?;
    let per_support = 4 + d.checked_add(views)?.checked_mul(4)?;
    let per_query = 4 + d.checked_add(m.checked_mul(d)?)?.checked_mul(4)?;
    text.checked_add(per_support.checked_mul(n_support)?)?
        .checked_add(per_query.checked_mul(n_query)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::DimensionMismatch(format!(
                    "payload truncated at byte {} (needed {n} more)",
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidBundle(format!("{v} does not fit in u32")))
}

fn put_floats(out: &mut Vec<u8>, values: &[f64]) -> Result<()> {
    for &v in values {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFiniteValue("bundle payload".into()));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

fn check_label(label: usize, classes: usize, what: &str, i: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::InvalidBundle(format!(
            "{what} sample {i} has label {label} but there are {classes} classes"
        )));
    }
    Ok(())
}

fn check_shape(m: &FeatureMatrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::DimensionMismatch(format!(
            "{what}: expected {rows}x{cols}, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Rounds to storage precision and normalizes if the row is not unit length.
fn ingest_slice(row: &mut [f64], what: &str) -> Result<()> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(what.to_string()));
    }
    row.iter_mut().for_each(|v| *v = quantize(*v));
    let n = linalg::norm(row);
    if n < NORM_EPS {
        return Err(Error::NearZeroNorm { norm: n });
    }
    if (n - 1.0).abs() > UNIT_TOL {
        row.iter_mut().for_each(|v| *v = quantize(*v / n));
    }
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(what.to_string()));
    }
    Ok(())
}

fn ingest_vec(v: &mut [f64], dim: usize, what: &str) -> Result<()> {
    if v.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "{what}: expected length {dim}, got {}",
            v.len()
        )));
    }
    ingest_slice(v, what)
}

fn ingest_rows(m: &mut FeatureMatrix, what: &str) -> Result<()> {
    for i in 0..m.rows() {
        ingest_slice(m.row_mut(i), what)?;
    }
    Ok(())
}

/// Exact `f64` renormalization of rows that are unit length at `f32` precision.
fn renormalized(m: &FeatureMatrix) -> FeatureMatrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = linalg::norm(row);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Location of one corpus row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchLoc {
    pub sample: usize,
    pub view: usize,
    #[serde(rename = "idx")]
    pub patch: usize,
}

/// Bijection between flat corpus indices and `(sample, view, patch)`.
///
/// Ordering is sample-major, then view (original first), then patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchIndex {
    samples: usize,
    views: usize,
    patches: usize,
}

impl PatchIndex {
    pub fn new(samples: usize, views: usize, patches: usize) -> Self {
        Self {
            samples,
            views,
            patches,
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Views per sample, A+1.
    pub fn views(&self) -> usize {
        self.views
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn len(&self) -> usize {
        self.samples * self.views * self.patches
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of image-view blocks, |S|·(A+1).
    pub fn blocks(&self) -> usize {
        self.samples * self.views
    }

    pub fn flat(&self, loc: PatchLoc) -> usize {
        (loc.sample * self.views + loc.view) * self.patches + loc.patch
    }

    pub fn locate(&self, i: usize) -> PatchLoc {
        let patch = i % self.patches;
        let block = i / self.patches;
        PatchLoc {
            sample: block / self.views,
            view: block % self.views,
            patch,
        }
    }

    pub fn block_of(&self, i: usize) -> usize {
        i / self.patches
    }

    /// Flat indices of image-view block `b`.
    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        b * self.patches..(b + 1) * self.patches
    }

    /// Flat indices of all views of support sample `s`.
    pub fn sample_range(&self, s: usize) -> std::ops::Range<usize> {
        let w = self.views * self.patches;
        s * w..(s + 1) * w
    }
}

/// The flattened support patch matrix L′ with its index bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCorpus {
    pub raw: FeatureMatrix,
    pub index_map: PatchIndex,
}

/// Stacks every support view into the H×d corpus (unit-norm, `f64`).
pub fn flatten_support(b: &EpisodeBundle) -> PatchCorpus {
    let index_map = PatchIndex::new(b.support.len(), b.augmentations + 1, b.patches);
    let mut data = Vec::with_capacity(index_map.len() * b.dim);
    for s in &b.support {
        data.extend_from_slice(s.views.data());
    }
    let raw = FeatureMatrix::from_vec(index_map.len(), b.dim, data).expect("validated shapes");
    PatchCorpus {
        raw: renormalized(&raw),
        index_map,
    }
}

/// Unit-norm `f64` working copies of a bundle, prepared once per episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub text: FeatureMatrix,
    pub corpus: PatchCorpus,
    pub support_globals: FeatureMatrix,
    pub support_labels: Vec<usize>,
    pub query_globals: FeatureMatrix,
    pub query_labels: Vec<usize>,
    /// Original-view query patches, one matrix per query sample.
    pub query_patches: Vec<FeatureMatrix>,
}

impl Episode {
    pub fn new(b: &EpisodeBundle) -> Self {
        Self {
            text: b.unit_text(),
            corpus: flatten_support(b),
            support_globals: b.support_globals(),
            support_labels: b.support_labels(),
            query_globals: b.query_globals(),
            query_labels: b.query_labels(),
            query_patches: b.query.iter().map(|q| renormalized(&q.patches)).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.text.rows()
    }

    pub fn dim(&self) -> usize {
        self.text.cols()
    }
}
