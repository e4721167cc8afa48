//! Layered radiance manifolds for dynamic volumetric capture: training on
//! multi-view video, baking to a layered mesh with an animated RGBA atlas,
//! and rendering the baked asset by per-pixel alpha compositing.

pub mod autodiff;
pub mod appearance;
pub mod datasets;
pub mod exporter;
pub mod geometry;
pub mod imaging;
pub mod manifold;
pub mod metrics;
pub mod rastercomp;
pub mod sweep;
pub mod trainer;
pub mod volren;
