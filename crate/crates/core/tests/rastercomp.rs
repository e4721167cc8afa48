use facefolds::appearance::{Appearance, AppearanceError, TextureQuery};
use facefolds::autodiff::Matrix;
use facefolds::datasets::{oracle_render, SyntheticScene};
use facefolds::exporter::{export_asset, ExportConfig, LayeredMeshAsset};
use facefolds::geometry::{Camera, Intrinsics, Vec3};
use facefolds::manifold::SphereField;
use facefolds::metrics::psnr;
use facefolds::rastercomp::{rasterize_layers, RasterError, RasterOptions};
use facefolds::volren::Layers;

fn scene_asset(scene: &SyntheticScene, s: &[f64], cfg: &ExportConfig) -> LayeredMeshAsset {
    let field = scene.field();
    let mapper = scene.mapper();
    let layers = Layers {
        field: &field,
        s_values: s,
        mapper: &mapper,
    };
    export_asset(&layers, scene, scene.frames, cfg, Some(scene.bounds)).unwrap()
}

fn camera(size: u32, azimuth_deg: f64, elevation_deg: f64) -> Camera {
    let target = Vec3::new(-0.1, 0.0, 0.0);
    let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let eye = target + Vec3::new(a.cos() * e.cos(), a.sin() * e.cos(), e.sin());
    Camera::look_at(
        Intrinsics::centered(1.375 * size as f64, size, size),
        eye,
        target,
        Vec3::new(0.0, 0.0, 1.0),
    )
    .unwrap()
}

#[test]
fn analytic_asset_matches_the_oracle() {
    let scene = SyntheticScene::nested_spheres(2);
    let cfg = ExportConfig {
        bake_resolution: 128,
        mesh_resolution: 128,
        texture_resolution: 256,
        ..ExportConfig::default()
    };
    let asset = scene_asset(&scene, &scene.s_values(), &cfg);
    for (az, el, frame) in [(0.0, 0.0, 1), (20.0, -8.0, 2), (-25.0, 10.0, 1)] {
        let cam = camera(256, az, el);
        let got = rasterize_layers(&asset, &cam, frame, &RasterOptions::default())
            .unwrap()
            .over(scene.background);
        let want = oracle_render(&scene, &cam, frame);
        let p = psnr(&got, &want).unwrap();
        assert!(p >= 35.0, "view ({az}, {el}) frame {frame}: {p:.2} dB");
    }
}

#[test]
fn removing_layers_never_helps_and_order_does_not_matter() {
    let scene = SyntheticScene::nested_spheres(1);
    let cfg = ExportConfig {
        bake_resolution: 64,
        mesh_resolution: 64,
        texture_resolution: 64,
        ..ExportConfig::default()
    };
    let s = scene.s_values();
    let asset = scene_asset(&scene, &s, &cfg);
    let cam = camera(96, 10.0, 5.0);
    let want = oracle_render(&scene, &cam, 1);
    let render = |a: &LayeredMeshAsset, opts: &RasterOptions| rasterize_layers(a, &cam, 1, opts).unwrap();
    let full = render(&asset, &RasterOptions::default());
    let full_psnr = psnr(&full.over(scene.background), &want).unwrap();
    for hidden in 0..2 {
        let mut mask = vec![true; 2];
        mask[hidden] = false;
        let opts = RasterOptions {
            visible: Some(mask),
            ..RasterOptions::default()
        };
        let p = psnr(&render(&asset, &opts).over(scene.background), &want).unwrap();
        assert!(p <= full_psnr, "hiding layer {hidden}: {p} > {full_psnr}");
    }

    let flipped = reversed_layers(&asset);
    let other = render(&flipped, &RasterOptions::default());
    let worst = full.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-12, "{worst}");
}

/// The same asset with its layers submitted in reverse order.
fn reversed_layers(asset: &LayeredMeshAsset) -> LayeredMeshAsset {
    let mut out = asset.clone();
    let n = asset.meshes.len();
    out.meshes.reverse();
    out.manifest.s_values.reverse();
    let l = asset.layout();
    for (a, src) in out.atlases.iter_mut().zip(&asset.atlases) {
        for layer in 0..n {
            let (ox, oy) = l.origin(layer);
            let (sx, sy) = l.origin(n - 1 - layer);
            for y in 0..l.tile {
                for x in 0..l.tile {
                    let px = src.pixel((sx + x) as u32, (sy + y) as u32).to_vec();
                    a.pixel_mut((ox + x) as u32, (oy + y) as u32).copy_from_slice(&px);
                }
            }
        }
    }
    out
}

struct Constant([f64; 4]);

impl Appearance for Constant {
    fn rgba(&self, q: &TextureQuery) -> Result<Matrix, AppearanceError> {
        Ok(Matrix::from_shape_fn((q.uv.nrows(), 4), |(_, c)| self.0[c]))
    }
}

#[test]
fn constant_layer_and_empty_pixels() {
    let c = [-0.25, 0.0, 0.0];
    let field = SphereField { center: c.into() };
    let mapper = facefolds::geometry::UvMapper { center: c };
    let layers = Layers {
        field: &field,
        s_values: &[0.3],
        mapper: &mapper,
    };
    let cfg = ExportConfig {
        bake_resolution: 32,
        mesh_resolution: 32,
        texture_resolution: 16,
        ..ExportConfig::default()
    };
    let colour = [0.3, 0.6, 0.9, 1.0];
    let asset = export_asset(&layers, &Constant(colour), 2, &cfg, None).unwrap();
    let cam = camera(64, 0.0, 0.0);
    let img = rasterize_layers(&asset, &cam, 2, &RasterOptions::default()).unwrap();
    for c in 0..4 {
        assert!((img.pixel(32, 32)[c] - colour[c]).abs() <= 1.0 / 255.0);
    }
    assert_eq!(img.pixel(0, 0), &[0.0; 4]);

    // Culling keeps the front of a convex cap seen from outside.
    let culled = rasterize_layers(
        &asset,
        &cam,
        2,
        &RasterOptions {
            cull_backfaces: true,
            ..RasterOptions::default()
        },
    )
    .unwrap();
    assert_eq!(culled.pixel(32, 32), img.pixel(32, 32));

    assert!(matches!(
        rasterize_layers(&asset, &cam, 3, &RasterOptions::default()),
        Err(RasterError::FrameOutOfRange { frame: 3, frames: 2 })
    ));
    assert!(matches!(
        rasterize_layers(
            &asset,
            &cam,
            1,
            &RasterOptions {
                visible: Some(vec![true, false]),
                ..RasterOptions::default()
            }
        ),
        Err(RasterError::Mask { .. })
    ));
}
