use std::path::Path;

use super::{DataError, Dataset, Split};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Magic number and dimension sizes of an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<usize>,
}

impl IdxHeader {
    pub fn header_len(&self) -> usize {
        4 + 4 * self.dims.len()
    }

    pub fn payload_len(&self) -> usize {
        self.dims.iter().product()
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            what,
            expected: offset + 4,
            found: bytes.len(),
        })
}

/// Reads and checks the header of an unsigned-byte IDX file.
pub fn read_idx_header(bytes: &[u8], expected_magic: u32, what: &'static str) -> Result<IdxHeader, DataError> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != expected_magic {
        return Err(DataError::BadMagic {
            what,
            expected: expected_magic,
            found: magic,
        });
    }
    // low byte of the magic is the number of dimensions
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|d| be_u32(bytes, 4 + 4 * d, what).map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(IdxHeader { magic, dims })
}

fn payload<'a>(bytes: &'a [u8], header: &IdxHeader, what: &'static str) -> Result<&'a [u8], DataError> {
    let start = header.header_len();
    let expected = start + header.payload_len();
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            what,
            expected,
            found: bytes.len(),
        });
    }
    Ok(&bytes[start..expected])
}

/// Parses an image file (`n × rows × cols` bytes) and a label file (`n`
/// bytes). Pixels become `byte / 255`; items have shape `[1, rows, cols]`.
pub fn parse_idx(images: &[u8], labels: &[u8], domain_name: &str) -> Result<Dataset, DataError> {
    let ih = read_idx_header(images, IDX_IMAGE_MAGIC, "image file")?;
    let lh = read_idx_header(labels, IDX_LABEL_MAGIC, "label file")?;
    if ih.dims[0] != lh.dims[0] {
        return Err(DataError::CountMismatch {
            images: ih.dims[0],
            labels: lh.dims[0],
        });
    }
    let pixels = payload(images, &ih, "image file")?;
    let ids: Vec<usize> = payload(labels, &lh, "label file")?.iter().map(|&b| b as usize).collect();
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Dataset::with_class_ids(domain_name, Split::Whole, vec![1, ih.dims[1], ih.dims[2]], data, &ids)
}

/// Reads both files and parses them with [`parse_idx`]; the domain is named
/// after the image file stem.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let images_path = images_path.as_ref();
    let name = images_path
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels, &name)
}

#[cfg(test)]
pub(crate) fn encode_idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}
