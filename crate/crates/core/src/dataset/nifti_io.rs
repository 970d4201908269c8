//! Reading and writing single 3-D volumes as NIfTI-1.

use std::path::Path;

use ndarray::{Array3, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};

/// A scalar 3-D image with voxel spacing in millimetres.
///
/// `data` is row-major over `shape` with the last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Volume {
            shape,
            spacing,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let obj = ReaderOptions::new().read_file(path)?;
    let pixdim = obj.header().pixdim;
    let arr = obj.into_volume().into_ndarray::<f32>()?;
    let dims: Vec<usize> = arr.shape().to_vec();
    let shape = match dims.as_slice() {
        [a, b, c] => [*a, *b, *c],
        [a, b, c, rest @ ..] if rest.iter().all(|&r| r == 1) => [*a, *b, *c],
        _ => {
            return Err(Error::Data(format!(
                "{}: expected a 3-D volume, found dimensions {dims:?}",
                path.display()
            )))
        }
    };
    let arr = arr
        .into_shape(shape)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let data = arr.as_standard_layout().iter().copied().collect();
    let spacing = [1, 2, 3].map(|i| {
        let s = pixdim[i].abs() as f64;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    });
    Ok(Volume {
        shape,
        spacing,
        data,
    })
}

fn header_for(spacing: [f64; 3]) -> NiftiHeader {
    NiftiHeader {
        pixdim: [
            1.0,
            spacing[0] as f32,
            spacing[1] as f32,
            spacing[2] as f32,
            1.0,
            1.0,
            1.0,
            1.0,
        ],
        xyzt_units: 2,
        ..NiftiHeader::default()
    }
}

/// Writes an `f32` volume; a `.nii.gz` suffix selects gzip compression.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let arr = Array3::from_shape_vec(vol.shape.into_shape(), vol.data.clone())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let header = header_for(vol.spacing);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&arr)?;
    Ok(())
}

/// Writes an integer label map stored as unsigned bytes.
pub fn write_label(path: &Path, shape: [usize; 3], spacing: [f64; 3], labels: &[u8]) -> Result<()> {
    let arr = Array3::from_shape_vec(shape.into_shape(), labels.to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let header = header_for(spacing);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&arr)?;
    Ok(())
}
