//! Annotation refinement and augmentation.

pub mod augment;
pub mod geometry;
pub mod image;
pub mod io;
pub mod mask;
pub mod photometric;

pub use augment::{augment, augment_pipeline, to_tensors, AugmentConfig, AugmentPlan, Noise};
pub use geometry::{
    affine, elastic, grid_distort, letterbox, perspective, resize, resize_to_training, AffineParams, CornerJitter,
};
pub use image::{RgbImage, Sample, BACKGROUND};
pub use mask::{
    carve_openings, closing, dilate, erode, opening, refine_annotation, BinaryMask, REFINE_CLOSE_KERNEL,
    REFINE_DILATE_PX,
};
pub use photometric::{
    brightness_contrast, clahe, denormalize, gaussian_noise, iso_noise, normalize, normalize_with, IMAGENET_MEAN,
    IMAGENET_STD,
};
