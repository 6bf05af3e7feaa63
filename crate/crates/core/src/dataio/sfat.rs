//! "SFAT" feature binary: little-endian, one block per image.
//!
//! ```text
//! "SFAT" | u32 version=1 | u32 count
//! per record:
//!   u32 id_len | id (UTF-8) | u32 L | L*C f32 | u32 K | K*(u32 concept, f32 score) | s*f32
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SFAT";
pub const VERSION: u32 = 1;
const SCENE_SUM_TOL: f64 = 1e-3;

/// Feature dimensions echoed in the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    #[serde(rename = "C")]
    pub region: usize,
    #[serde(rename = "C_k")]
    pub concept: usize,
    pub s: usize,
    #[serde(rename = "K_max")]
    pub k_max: usize,
}

/// One image: regional features, detected concepts, scene posterior and
/// (after caption loading) its reference captions.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub region_dim: usize,
    /// `L x C`, one region per row.
    pub regions: Vec<f32>,
    pub concepts: Vec<(u32, f32)>,
    pub scene: Vec<f32>,
    /// Encoded `[BOS, ..., EOS]` sequences.
    pub captions: Vec<Vec<usize>>,
    /// Captions as stored in the captions file.
    pub raw_captions: Vec<String>,
    /// Tokenized references.
    pub references: Vec<Vec<String>>,
}

impl ImageRecord {
    pub fn num_regions(&self) -> usize {
        if self.region_dim == 0 {
            0
        } else {
            self.regions.len() / self.region_dim
        }
    }

    pub fn region(&self, i: usize) -> &[f32] {
        &self.regions[i * self.region_dim..(i + 1) * self.region_dim]
    }

    /// Index of the largest scene score; ties go to the lowest index.
    pub fn scene_id(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.scene.iter().enumerate() {
            if v > self.scene[best] {
                best = i;
            }
        }
        best
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Record {
            id: self.id.clone(),
            msg: msg.into(),
        }
    }

    /// Checks the record against the manifest dimensions.
    pub fn validate(&self, dims: &Dims) -> Result<()> {
        if self.region_dim != dims.region || self.regions.len() % dims.region.max(1) != 0 {
            return Err(self.err(format!(
                "region block of {} values does not match C={}",
                self.regions.len(),
                dims.region
            )));
        }
        if self.num_regions() == 0 {
            return Err(self.err("image has no regions"));
        }
        if self.regions.iter().any(|v| !v.is_finite()) {
            return Err(self.err("non-finite region feature"));
        }
        if self.concepts.len() > dims.k_max {
            return Err(self.err(format!(
                "{} concepts exceeds K_max={}",
                self.concepts.len(),
                dims.k_max
            )));
        }
        if let Some((c, s)) = self.concepts.iter().find(|(_, s)| !(0.0..=1.0).contains(s)) {
            return Err(self.err(format!("concept {c} score {s} outside [0,1]")));
        }
        if self.scene.len() != dims.s {
            return Err(self.err(format!(
                "scene vector has length {}, manifest s={}",
                self.scene.len(),
                dims.s
            )));
        }
        if self.scene.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(self.err("scene scores must be finite and nonnegative"));
        }
        let sum: f64 = self.scene.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > SCENE_SUM_TOL {
            return Err(self.err(format!(
                "scene block (s={}) sums to {sum:.6}, expected a distribution; dimensions do not match manifest",
                dims.s
            )));
        }
        Ok(())
    }
}

pub fn write_sfat(records: &[ImageRecord], dims: &Dims) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        r.validate(dims)?;
        let id = r.id.as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&(r.num_regions() as u32).to_le_bytes());
        for v in &r.regions {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(r.concepts.len() as u32).to_le_bytes());
        for (c, s) in &r.concepts {
            out.extend_from_slice(&c.to_le_bytes());
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in &r.scene {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(Error::Truncated("SFAT file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(Error::Truncated("SFAT file"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses and validates an SFAT buffer. Either every record is returned or
/// an error is; no partial datasets.
pub fn read_sfat(bytes: &[u8], dims: &Dims) -> Result<Vec<ImageRecord>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    cur.take(4)?;
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            format: "SFAT",
            version,
        });
    }
    let count = cur.u32()? as usize;
    let mut records: Vec<ImageRecord> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let misaligned = |e: Error| match (&e, records.last()) {
            (Error::Truncated(_), Some(prev)) => Error::Dimension(format!(
                "record after '{}' is truncated or misaligned (manifest C={}, s={})",
                prev.id, dims.region, dims.s
            )),
            _ => e,
        };
        let id_len = cur.u32().map_err(misaligned)? as usize;
        let id_bytes = cur.take(id_len).map_err(misaligned)?;
        let id = String::from_utf8(id_bytes.to_vec())
            .map_err(|_| Error::Invalid("record id is not UTF-8".into()))?;
        let rec_err = |msg: String| Error::Record {
            id: id.clone(),
            msg,
        };
        let l = cur.u32()? as usize;
        let regions = cur
            .f32s(l.checked_mul(dims.region).ok_or(Error::Truncated("SFAT file"))?)
            .map_err(|_| rec_err(format!("truncated region block (L={l}, C={})", dims.region)))?;
        let k = cur.u32()? as usize;
        if k > dims.k_max {
            return Err(rec_err(format!("{k} concepts exceeds K_max={}", dims.k_max)));
        }
        let mut concepts = Vec::with_capacity(k);
        for _ in 0..k {
            let c = cur.u32()?;
            let s = cur.f32s(1)?[0];
            concepts.push((c, s));
        }
        let scene = cur
            .f32s(dims.s)
            .map_err(|_| rec_err(format!("truncated scene block (s={})", dims.s)))?;
        let rec = ImageRecord {
            id,
            region_dim: dims.region,
            regions,
            concepts,
            scene,
            captions: Vec::new(),
            raw_captions: Vec::new(),
            references: Vec::new(),
        };
        rec.validate(dims)?;
        records.push(rec);
    }
    if cur.remaining() != 0 {
        let last = records.last().map_or("<none>", |r| r.id.as_str());
        return Err(Error::Dimension(format!(
            "{} trailing bytes after record '{last}'; manifest dims (C={}, s={}) do not match the file",
            cur.remaining(),
            dims.region,
            dims.s
        )));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DIMS: Dims = Dims {
        region: 3,
        concept: 2,
        s: 4,
        k_max: 3,
    };

    fn record(id: &str, l: usize, scene: Vec<f32>) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            region_dim: 3,
            regions: (0..l * 3).map(|i| i as f32 * 0.25 - 1.0).collect(),
            concepts: vec![(2, 0.75), (0, 1.0)],
            scene,
            captions: vec![],
            raw_captions: vec![],
            references: vec![],
        }
    }

    #[test]
    fn round_trip_exact() {
        let recs = vec![
            record("a", 2, vec![0.25; 4]),
            record("b", 5, vec![0.7, 0.1, 0.1, 0.1]),
        ];
        let bytes = write_sfat(&recs, &DIMS).unwrap();
        let back = read_sfat(&bytes, &DIMS).unwrap();
        assert_eq!(back, recs);
        assert_eq!(write_sfat(&back, &DIMS).unwrap(), bytes);
    }

    #[test]
    fn bad_magic() {
        let err = read_sfat(b"NOPE\x01\x00\x00\x00", &DIMS).unwrap_err();
        assert_eq!(err.to_string(), "not a SFAT file");
    }

    #[test]
    fn truncated_is_clean_error() {
        let bytes = write_sfat(&[record("a", 2, vec![0.25; 4])], &DIMS).unwrap();
        for cut in [9, 14, 20, bytes.len() - 1] {
            assert!(read_sfat(&bytes[..cut], &DIMS).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn scene_dimension_mismatch_names_record() {
        let dims5 = Dims { s: 5, ..DIMS };
        let rec = record("img-7", 2, vec![0.6, 0.1, 0.1, 0.1, 0.1]);
        let bytes = write_sfat(&[rec.clone()], &dims5).unwrap();
        let err = read_sfat(&bytes, &DIMS).unwrap_err().to_string();
        assert!(err.contains("img-7"), "{err}");

        let two = write_sfat(&[rec, record("img-8", 1, vec![0.2; 5])], &dims5).unwrap();
        let err = read_sfat(&two, &DIMS).unwrap_err().to_string();
        assert!(err.contains("img-7"), "{err}");
    }

    #[test]
    fn too_many_concepts_rejected() {
        let mut rec = record("x", 1, vec![0.25; 4]);
        rec.concepts = vec![(0, 0.5); 4];
        assert!(write_sfat(&[rec], &DIMS).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_records_round_trip_bitwise(
            l in 1usize..5,
            vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 15),
            score in 0.0f32..=1.0,
            raw_scene in proptest::collection::vec(0.01f32..1.0, 4),
        ) {
            let total: f32 = raw_scene.iter().sum();
            let scene: Vec<f32> = raw_scene.iter().map(|v| v / total).collect();
            let rec = ImageRecord {
                id: "p".into(),
                region_dim: 3,
                regions: vals[..l * 3].to_vec(),
                concepts: vec![(9, score)],
                scene,
                captions: vec![],
                raw_captions: vec![],
                references: vec![],
            };
            let bytes = write_sfat(std::slice::from_ref(&rec), &DIMS).unwrap();
            let back = read_sfat(&bytes, &DIMS).unwrap();
            prop_assert_eq!(back[0].regions.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            rec.regions.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(&back[0], &rec);
        }
    }
}
