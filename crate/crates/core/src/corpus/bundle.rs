//! Reader and writer for feature bundles (`MVFB`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! "MVFB" | version: u32 = 1 | modality_count: u8
//! repeated modality_count times:
//!     code: u8 (0 visual, 1 acoustic, 2 text) | rows: u32 | cols: u32 | rows*cols f32, row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::modality::Modality;

pub const BUNDLE_MAGIC: &[u8; 4] = b"MVFB";
pub const BUNDLE_VERSION: u32 = 1;

/// The three per-post unit matrices. A modality missing from the file is stored as a
/// matrix with zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub matrices: [Array2<f32>; 3],
}

impl FeatureBundle {
    pub fn new(visual: Array2<f32>, acoustic: Array2<f32>, text: Array2<f32>) -> Self {
        Self {
            matrices: [visual, acoustic, text],
        }
    }

    pub fn get(&self, modality: Modality) -> &Array2<f32> {
        &self.matrices[modality.index()]
    }

    /// True when every modality has at least one unit row with at least one column.
    pub fn is_complete(&self) -> bool {
        self.matrices.iter().all(|m| m.nrows() > 0 && m.ncols() > 0)
    }

    /// Shared feature width, if all present modalities agree.
    pub fn feature_dim(&self) -> Option<usize> {
        let mut dims = self
            .matrices
            .iter()
            .filter(|m| m.nrows() > 0)
            .map(|m| m.ncols());
        let first = dims.next()?;
        dims.all(|d| d == first).then_some(first)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let present: Vec<Modality> = Modality::ALL
            .into_iter()
            .filter(|m| self.get(*m).nrows() > 0)
            .collect();
        let mut out = Vec::new();
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.push(present.len() as u8);
        for modality in present {
            let m = self.get(modality);
            out.push(modality.code());
            out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut cur, &mut magic)?;
        if &magic != BUNDLE_MAGIC {
            return Err(Error::format("bundle", "wrong magic bytes"));
        }
        let version = read_u32(&mut cur)?;
        if version != BUNDLE_VERSION {
            return Err(Error::format(
                "bundle",
                format!("unsupported version {version}"),
            ));
        }
        let mut count = [0u8; 1];
        read_exact(&mut cur, &mut count)?;
        let mut matrices: [Option<Array2<f32>>; 3] = [None, None, None];
        for _ in 0..count[0] {
            let mut code = [0u8; 1];
            read_exact(&mut cur, &mut code)?;
            let modality = Modality::from_code(code[0]).ok_or_else(|| {
                Error::format("bundle", format!("unknown modality code {}", code[0]))
            })?;
            let rows = read_u32(&mut cur)? as usize;
            let cols = read_u32(&mut cur)? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= cur.len()))
                .ok_or_else(|| Error::format("bundle", "truncated matrix payload"))?;
            let mut values = Vec::with_capacity(len);
            for chunk in cur[..len * 4].chunks_exact(4) {
                values.push(f32::from_le_bytes(chunk.try_into().expect("chunk of 4")));
            }
            cur = &cur[len * 4..];
            let slot = &mut matrices[modality.index()];
            if slot.is_some() {
                return Err(Error::format(
                    "bundle",
                    format!("duplicate {modality} block"),
                ));
            }
            *slot = Some(
                Array2::from_shape_vec((rows, cols), values)
                    .map_err(|e| Error::format("bundle", e.to_string()))?,
            );
        }
        if !cur.is_empty() {
            return Err(Error::format("bundle", "trailing bytes after last block"));
        }
        let [v, a, t] = matrices.map(|m| m.unwrap_or_else(|| Array2::zeros((0, 0))));
        Ok(Self::new(v, a, t))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
            .map_err(|e| Error::format("bundle", format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if cur.len() < buf.len() {
        return Err(Error::format("bundle", "unexpected end of file"));
    }
    buf.copy_from_slice(&cur[..buf.len()]);
    *cur = &cur[buf.len()..];
    Ok(())
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn sample() -> FeatureBundle {
        FeatureBundle::new(
            array![[1.0, 2.0], [3.0, 4.0]],
            array![[0.5, -0.5]],
            array![[9.0, 8.0], [7.0, 6.0], [5.0, 4.0]],
        )
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"MVFB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 3);
        assert_eq!(bytes[9], 0);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[18..22].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_wrong_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            FeatureBundle::from_bytes(&bytes),
            Err(Error::Format { .. })
        ));
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        let err = FeatureBundle::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = sample().to_bytes();
        assert!(FeatureBundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(FeatureBundle::from_bytes(&longer).is_err());
    }

    #[test]
    fn missing_modality_reads_as_empty() {
        let b = FeatureBundle::new(
            array![[1.0f32]],
            Array2::zeros((0, 0)),
            array![[2.0f32]],
        );
        let back = FeatureBundle::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back.get(Modality::Acoustic).nrows(), 0);
        assert!(!back.is_complete());
    }

    proptest! {
        #[test]
        fn round_trip(rows in proptest::collection::vec(1usize..5, 3), cols in 1usize..6, seed in any::<u32>()) {
            let mk = |r: usize, salt: u32| Array2::from_shape_fn((r, cols), |(i, j)| {
                ((i * 31 + j * 7) as f32 + salt as f32 * 0.001).sin()
            });
            let b = FeatureBundle::new(mk(rows[0], seed), mk(rows[1], seed ^ 1), mk(rows[2], seed ^ 2));
            let back = FeatureBundle::from_bytes(&b.to_bytes()).unwrap();
            prop_assert_eq!(back, b);
        }
    }
}
