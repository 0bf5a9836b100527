//! Volumes, masks and everything that prepares them for the networks.
//!
//! Storage convention: arrays are indexed `[depth, height, width]` and the
//! acquisition plane stack always lives along axis 0. Every 2D slice handed
//! to the segmentation branch is a plane of constant depth index.

mod archive;
mod dataset;
mod manifest;
mod phantom;
mod resample;
mod slice;

pub use archive::{
    decode_upload, encode_upload, load_mask, load_volume, save_mask, save_volume, volume_from_parts,
    ArchiveHeader, RawDtype,
};
pub(crate) use archive::archive_paths;
pub use dataset::{generate_dataset, phantom_seed};
pub use manifest::{split_dataset, DatasetManifest, ManifestEntry, Split, SplitRatios};
pub use phantom::{generate_phantom, ObjectKind, ObjectSpec, PhantomConfig, PhantomOutput};
pub use resample::{downsample_to_lowres, resample_isotropic, LOWRES_SIZE};
pub use slice::{
    extract_mask_slice, extract_slice, normalize_for_encoder, resize_bilinear, resize_nearest,
    IMAGENET_MEAN, IMAGENET_STD,
};

use ndarray::Array3;

use crate::error::{Error, Result};

/// A 3D intensity grid with its physical voxel size.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Voxel size in millimetres along (depth, height, width).
    pub spacing: [f64; 3],
    pub sequence_tag: String,
    pub patient_id: String,
    pub location_tag: String,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        let v = Volume {
            data,
            spacing,
            sequence_tag: String::new(),
            patient_id: String::new(),
            location_tag: String::new(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn with_tags(mut self, sequence: &str, patient: &str, location: &str) -> Self {
        self.sequence_tag = sequence.to_string();
        self.patient_id = patient.to_string();
        self.location_tag = location.to_string();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.shape().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "volume dims must be >= 1, got {:?}",
                self.data.shape()
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite intensity at flat index {i}")));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn depth(&self) -> usize {
        self.data.shape()[0]
    }
}

/// Binary annotation aligned voxel-for-voxel with a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub data: Array3<u8>,
    /// Identifier of the paired volume.
    pub link: String,
}

impl MaskVolume {
    pub fn new(data: Array3<u8>, link: impl Into<String>) -> Result<Self> {
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Invalid(format!("mask value outside {{0,1}} at flat index {i}")));
        }
        Ok(MaskVolume {
            data,
            link: link.into(),
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn check_pair(&self, v: &Volume) -> Result<()> {
        if self.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "mask shape {:?} does not match volume shape {:?}",
                self.shape(),
                v.shape()
            )));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}
