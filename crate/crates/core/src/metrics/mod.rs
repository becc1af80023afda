//! Image AUROC, pixel AUROC and AUPRO.

pub mod oracle;
mod pro;
mod regions;
mod roc;

pub use pro::aupro;
pub use regions::{connected_components, Region, RegionSet};
pub use roc::{auroc, pixel_auroc, pooled_pixels};
