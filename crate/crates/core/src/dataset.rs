//! EESD labelled image sets.
//!
//! Little-endian layout:
//!
//! ```text
//! "EESD" | version u32 = 1 | image_count u32 | K u32 | H u32 | W u32
//! image* := RGB u8 × 3·H·W (channel-major) | labels u8 × H·W
//! ```
//!
//! Label 255 conventionally marks ignored pixels.

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const IGNORE_LABEL: u8 = 255;

const MAGIC: &[u8; 4] = b"EESD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Channel-major RGB, `3 × H × W`.
    pub rgb: Vec<u8>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

/// A model-ready image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Every label is a class id or `ignore_label`.
    pub fn validate_labels(&self, ignore_label: Option<u8>) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(bad) = s
                .labels
                .iter()
                .find(|l| Some(**l) != ignore_label && **l as usize >= self.num_classes)
            {
                return Err(Error::data(format!(
                    "image {i}: label {bad} out of range for {} classes",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Pixel counts per class over the whole set (ignored pixels excluded).
    pub fn class_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.num_classes];
        for s in &self.samples {
            for &l in &s.labels {
                if let Some(h) = hist.get_mut(l as usize) {
                    *h += 1;
                }
            }
        }
        hist
    }

    /// RGB scaled to `[0, 1]`.
    pub fn image_tensor(&self, index: usize) -> Tensor {
        let data = self.samples[index]
            .rgb
            .iter()
            .map(|v| *v as f32 / 255.0)
            .collect();
        Tensor::new(3, self.height, self.width, data).expect("sample size checked on construction")
    }

    pub fn labeled_images(&self) -> Vec<LabeledImage> {
        (0..self.len())
            .map(|i| LabeledImage {
                image: self.image_tensor(i),
                labels: self.samples[i].labels.iter().map(|l| *l as usize).collect(),
            })
            .collect()
    }

    pub fn to_eesd(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.len() as u32,
            self.num_classes as u32,
            self.height as u32,
            self.width as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.samples {
            buf.extend_from_slice(&s.rgb);
            buf.extend_from_slice(&s.labels);
        }
        buf
    }

    pub fn from_eesd(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated {
                what: "magic".into(),
            }
            .into());
        }
        if &bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic {
                expected: "EESD".into(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            }
            .into());
        }
        if bytes.len() < 24 {
            return Err(FormatError::Truncated {
                what: "header".into(),
            }
            .into());
        }
        let field =
            |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let version = field(0) as u32;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion {
                format: "EESD",
                version,
            }
            .into());
        }
        let (count, num_classes, height, width) = (field(1), field(2), field(3), field(4));
        if height == 0 || width == 0 || num_classes == 0 {
            return Err(FormatError::Range(format!(
                "empty dimensions K={num_classes} H={height} W={width}"
            ))
            .into());
        }
        let plane = height * width;
        let per_image = 4 * plane;
        let body = &bytes[24..];
        if body.len() < count * per_image {
            return Err(FormatError::Truncated {
                what: format!("image {}", body.len() / per_image.max(1)),
            }
            .into());
        }
        if body.len() > count * per_image {
            return Err(FormatError::Other(format!(
                "{} trailing bytes",
                body.len() - count * per_image
            ))
            .into());
        }
        let samples = body
            .chunks_exact(per_image.max(1))
            .take(count)
            .map(|c| Sample {
                rgb: c[..3 * plane].to_vec(),
                labels: c[3 * plane..].to_vec(),
            })
            .collect();
        Ok(Self {
            num_classes,
            height,
            width,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset {
            num_classes: 2,
            height: 1,
            width: 2,
            samples: vec![Sample {
                rgb: vec![0, 255, 10, 20, 30, 40],
                labels: vec![1, IGNORE_LABEL],
            }],
        }
    }

    #[test]
    fn round_trip() {
        let d = tiny();
        assert_eq!(Dataset::from_eesd(&d.to_eesd()).unwrap(), d);
    }

    #[test]
    fn errors() {
        let mut bytes = tiny().to_eesd();
        assert!(Dataset::from_eesd(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(
            Dataset::from_eesd(&bytes),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
    }

    #[test]
    fn labels_and_tensors() {
        let d = tiny();
        assert!(d.validate_labels(Some(IGNORE_LABEL)).is_ok());
        assert!(d.validate_labels(None).is_err());
        assert_eq!(d.class_histogram(), vec![0, 1]);
        let t = d.image_tensor(0);
        assert_eq!(t.shape(), (3, 1, 2));
        assert_eq!(t.get(0, 0, 1), 1.0);
        assert_eq!(d.labeled_images()[0].labels, vec![1, 255]);
    }
}
