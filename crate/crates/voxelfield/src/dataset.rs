//! Posed-image datasets: the on-disk layout, loading with validation, and
//! a built-in analytic ray tracer that renders small synthetic scenes
//! (spheres and boxes under a directional light) with exact depth.
//!
//! Directory layout:
//!
//! ```text
//! <dir>/
//!   intrinsics.txt     focal cx cy width height
//!   bbox.txt           min_x min_y min_z max_x max_y max_z
//!   images/0000.png    8-bit RGB
//!   poses/0000.txt     4x4 row-major camera-to-world matrix
//!   depths/0000.raw    optional float raster of ray distances
//!   masks/0000.raw     optional float raster, 1 = foreground
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{intersect_aabb, pixel_ray, Aabb, Camera, Mat3, Ray, Vec3};
use crate::raster::{FloatRaster, Image};

/// One posed view.
#[derive(Debug, Clone)]
pub struct PosedImage {
    pub image: Image,
    pub camera: Camera,
    pub depth: Option<FloatRaster>,
    pub mask: Option<FloatRaster>,
}

/// A set of posed views sharing intrinsics, plus the scene bounding box.
#[derive(Debug, Clone)]
pub struct PosedImageSet {
    pub items: Vec<PosedImage>,
    pub bbox: Aabb,
    /// Depth stored for rays that hit nothing.
    pub background_depth: f64,
}

impl PosedImageSet {
    pub fn width(&self) -> u32 {
        self.items.first().map_or(0, |i| i.image.width)
    }

    pub fn height(&self) -> u32 {
        self.items.first().map_or(0, |i| i.image.height)
    }
}

/// Scene primitive with a diffuse albedo.
#[derive(Debug, Clone)]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f64,
        albedo: [f64; 3],
    },
    Box { aabb: Aabb, albedo: [f64; 3] },
}

impl Primitive {
    /// Nearest intersection distance and surface normal, if any.
    fn hit(&self, ray: &Ray) -> Option<(f64, Vec3, [f64; 3])> {
        match self {
            Primitive::Sphere {
                center,
                radius,
                albedo,
            } => {
                let oc = ray.origin - *center;
                let b = 2.0 * oc.dot(ray.direction);
                let c = oc.dot(oc) - radius * radius;
                let disc = b * b - 4.0 * c;
                if disc <= 0.0 {
                    return None;
                }
                let sqrt_disc = disc.sqrt();
                let t = (-b - sqrt_disc) / 2.0;
                let t = if t > 1e-9 { t } else { (-b + sqrt_disc) / 2.0 };
                if t <= 1e-9 {
                    return None;
                }
                let n = (ray.at(t) - *center).normalized();
                Some((t, n, *albedo))
            }
            Primitive::Box { aabb, albedo } => {
                let (t_in, _) = intersect_aabb(ray, aabb)?;
                if t_in <= 1e-9 {
                    return None; // origin inside: treat as miss
                }
                let p = ray.at(t_in);
                // Face with the smallest distance to the hit point.
                let mut best_axis = 0;
                let mut best_sign = -1.0;
                let mut best_d = f64::INFINITY;
                for axis in 0..3 {
                    for (bound, sign) in [(aabb.min.get(axis), -1.0), (aabb.max.get(axis), 1.0)] {
                        let d = (p.get(axis) - bound).abs();
                        if d < best_d {
                            best_d = d;
                            best_axis = axis;
                            best_sign = sign;
                        }
                    }
                }
                let mut n = Vec3::ZERO;
                match best_axis {
                    0 => n.x = best_sign,
                    1 => n.y = best_sign,
                    _ => n.z = best_sign,
                }
                Some((t_in, n, *albedo))
            }
        }
    }
}

/// Analytic scene used to generate synthetic datasets: a few diffuse
/// primitives, one directional light plus ambient, constant background.
#[derive(Debug, Clone)]
pub struct OracleScene {
    pub primitives: Vec<Primitive>,
    /// Unit direction pointing from the scene toward the light.
    pub light_dir: Vec3,
    pub ambient: f64,
    pub background: [f64; 3],
    pub bbox: Aabb,
    /// Camera distance from the bbox center.
    pub camera_distance: f64,
    /// Depth recorded for rays that miss everything.
    pub background_depth: f64,
}

impl OracleScene {
    /// The desk test scene: a diffuse sphere and a thin upright box plate
    /// inside [-1,1]^3. The plate is thinner than the initial voxel size,
    /// so resolving it cleanly needs the subdivided stage.
    pub fn sphere_box() -> OracleScene {
        let bbox = Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0));
        OracleScene {
            primitives: vec![
                Primitive::Sphere {
                    center: Vec3::new(-0.32, 0.15, 0.08),
                    radius: 0.42,
                    albedo: [0.85, 0.28, 0.22],
                },
                Primitive::Box {
                    aabb: Aabb::new(Vec3::new(0.15, -0.62, -0.55), Vec3::new(0.65, -0.5, 0.3)),
                    albedo: [0.22, 0.42, 0.85],
                },
            ],
            light_dir: Vec3::new(0.45, -0.55, 0.75).normalized(),
            ambient: 0.3,
            background: [0.70, 0.75, 0.82],
            bbox,
            camera_distance: 2.8,
            background_depth: 8.0,
        }
    }

    /// A single centered sphere.
    pub fn sphere() -> OracleScene {
        let mut scene = OracleScene::sphere_box();
        scene.primitives = vec![Primitive::Sphere {
            center: Vec3::new(0.0, 0.0, 0.0),
            radius: 0.5,
            albedo: [0.8, 0.35, 0.25],
        }];
        scene
    }

    /// No primitives at all: constant background, depth = background depth.
    pub fn empty() -> OracleScene {
        let mut scene = OracleScene::sphere_box();
        scene.primitives = Vec::new();
        scene
    }

    pub fn named(name: &str) -> Result<OracleScene> {
        match name {
            "sphere" => Ok(OracleScene::sphere()),
            "spherebox" | "sphere-box" => Ok(OracleScene::sphere_box()),
            "empty" => Ok(OracleScene::empty()),
            other => Err(Error::Config(format!(
                "unknown oracle scene '{other}' (expected sphere, spherebox, or empty)"
            ))),
        }
    }

    /// Traces one ray: shaded color, hit distance, and whether it hit.
    pub fn trace(&self, ray: &Ray) -> ([f64; 3], f64, bool) {
        let mut best: Option<(f64, Vec3, [f64; 3])> = None;
        for prim in &self.primitives {
            if let Some((t, n, albedo)) = prim.hit(ray) {
                if best.as_ref().is_none_or(|(bt, _, _)| t < *bt) {
                    best = Some((t, n, albedo));
                }
            }
        }
        match best {
            Some((t, n, albedo)) => {
                let diffuse = n.dot(self.light_dir).max(0.0);
                let shade = self.ambient + (1.0 - self.ambient) * diffuse;
                (
                    [albedo[0] * shade, albedo[1] * shade, albedo[2] * shade],
                    t,
                    true,
                )
            }
            None => (self.background, self.background_depth, false),
        }
    }

    /// Colors are antialiased with a 2x2 subpixel grid; depth and mask
    /// come from the pixel-center ray.
    fn render_view(&self, camera: &Camera) -> PosedImage {
        let (w, h) = (camera.width, camera.height);
        let mut image = Image::new(w, h);
        let mut depth = FloatRaster::new(w, h);
        let mut mask = FloatRaster::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut c = [0.0f64; 3];
                for sub in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    let ray = pixel_ray(camera, x as f64 + sub.0, y as f64 + sub.1)
                        .expect("in bounds");
                    let (ci, _, _) = self.trace(&ray);
                    for k in 0..3 {
                        c[k] += 0.25 * ci[k];
                    }
                }
                let ray = pixel_ray(camera, x as f64 + 0.5, y as f64 + 0.5).expect("in bounds");
                let (_, t, hit) = self.trace(&ray);
                image.set(x, y, c);
                depth.set(x, y, t as f32);
                mask.set(x, y, if hit { 1.0 } else { 0.0 });
            }
        }
        PosedImage {
            image,
            camera: *camera,
            depth: Some(depth),
            mask: Some(mask),
        }
    }
}

/// Cameras on the upper hemisphere looking at the bbox center.
fn hemisphere_camera(
    scene: &OracleScene,
    resolution: u32,
    rng: &mut impl Rng,
) -> Camera {
    let azimuth: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let elevation: f64 = rng.gen_range(0.09..1.3); // radians above the horizon
    let center = scene.bbox.center();
    let d = scene.camera_distance;
    let eye = center
        + Vec3::new(
            d * elevation.cos() * azimuth.cos(),
            d * elevation.cos() * azimuth.sin(),
            d * elevation.sin(),
        );
    Camera::look_at(
        resolution as f64,
        resolution,
        resolution,
        eye,
        center,
        Vec3::new(0.0, 0.0, 1.0),
    )
    .expect("hemisphere placement is nondegenerate")
}

/// Renders `n_train` + `n_test` hemisphere views with exact depth rasters.
pub fn generate_oracle_dataset(
    scene: &OracleScene,
    n_train: usize,
    n_test: usize,
    resolution: u32,
    rng: &mut impl Rng,
) -> Result<(PosedImageSet, PosedImageSet)> {
    if resolution < 16 {
        return Err(Error::Config(format!(
            "resolution {resolution} below the minimum of 16"
        )));
    }
    let cameras: Vec<Camera> = (0..n_train + n_test)
        .map(|_| hemisphere_camera(scene, resolution, rng))
        .collect();
    let mut items: Vec<PosedImage> = cameras
        .par_iter()
        .map(|cam| scene.render_view(cam))
        .collect();
    let test_items = items.split_off(n_train);
    let make = |items: Vec<PosedImage>| PosedImageSet {
        items,
        bbox: scene.bbox,
        background_depth: scene.background_depth,
    };
    Ok((make(items), make(test_items)))
}

fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes the documented directory layout.
pub fn save_dataset(set: &PosedImageSet, dir: &Path) -> Result<()> {
    if set.items.is_empty() {
        return Err(Error::Config("refusing to save an empty dataset".into()));
    }
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("poses"))?;
    let has_depth = set.items.iter().any(|i| i.depth.is_some());
    let has_mask = set.items.iter().any(|i| i.mask.is_some());
    if has_depth {
        fs::create_dir_all(dir.join("depths"))?;
    }
    if has_mask {
        fs::create_dir_all(dir.join("masks"))?;
    }

    let cam0 = &set.items[0].camera;
    fs::write(
        dir.join("intrinsics.txt"),
        format!(
            "{} {} {} {} {}\n",
            format_f64(cam0.focal),
            format_f64(cam0.principal.0),
            format_f64(cam0.principal.1),
            cam0.width,
            cam0.height
        ),
    )?;
    fs::write(
        dir.join("bbox.txt"),
        format!(
            "{} {} {} {} {} {}\n",
            format_f64(set.bbox.min.x),
            format_f64(set.bbox.min.y),
            format_f64(set.bbox.min.z),
            format_f64(set.bbox.max.x),
            format_f64(set.bbox.max.y),
            format_f64(set.bbox.max.z)
        ),
    )?;
    fs::write(
        dir.join("background_depth.txt"),
        format!("{}\n", format_f64(set.background_depth)),
    )?;

    for (i, item) in set.items.iter().enumerate() {
        item.image.save_png(&dir.join(format!("images/{i:04}.png")))?;
        let t = item.camera.translation;
        let mut pose = String::new();
        for (axis, r) in item.camera.rotation.rows.iter().enumerate() {
            pose.push_str(&format!(
                "{} {} {} {}\n",
                format_f64(r[0]),
                format_f64(r[1]),
                format_f64(r[2]),
                format_f64(t.get(axis))
            ));
        }
        pose.push_str("0 0 0 1\n");
        fs::write(dir.join(format!("poses/{i:04}.txt")), pose)?;
        if let Some(depth) = &item.depth {
            depth.save(&dir.join(format!("depths/{i:04}.raw")))?;
        }
        if let Some(mask) = &item.mask {
            mask.save(&dir.join(format!("masks/{i:04}.raw")))?;
        }
    }
    Ok(())
}

fn dataset_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn parse_floats(path: &Path, text: &str, want: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| dataset_err(path, format!("malformed number '{tok}'")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != want {
        return Err(dataset_err(
            path,
            format!("expected {want} numbers, found {}", vals.len()),
        ));
    }
    Ok(vals)
}

/// Loads the documented layout, validating intrinsics, pose files, and
/// consistent image dimensions.
pub fn load_dataset(dir: &Path) -> Result<PosedImageSet> {
    let intrinsics_path = dir.join("intrinsics.txt");
    let text = fs::read_to_string(&intrinsics_path)
        .map_err(|_| dataset_err(&intrinsics_path, "missing intrinsics file"))?;
    let vals = parse_floats(&intrinsics_path, &text, 5)?;
    let (focal, cx, cy) = (vals[0], vals[1], vals[2]);
    let (width, height) = (vals[3] as u32, vals[4] as u32);

    let bbox_path = dir.join("bbox.txt");
    let text = fs::read_to_string(&bbox_path)
        .map_err(|_| dataset_err(&bbox_path, "missing bbox file"))?;
    let b = parse_floats(&bbox_path, &text, 6)?;
    let bbox = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]));

    let bg_depth_path = dir.join("background_depth.txt");
    let background_depth = match fs::read_to_string(&bg_depth_path) {
        Ok(text) => parse_floats(&bg_depth_path, &text, 1)?[0],
        Err(_) => 2.0 * bbox.half_diagonal() + 4.0,
    };

    let images_dir = dir.join("images");
    let mut image_paths: Vec<PathBuf> = fs::read_dir(&images_dir)
        .map_err(|_| dataset_err(&images_dir, "missing images directory"))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    image_paths.sort();
    if image_paths.is_empty() {
        return Err(dataset_err(&images_dir, "no images found"));
    }

    let mut items = Vec::with_capacity(image_paths.len());
    for img_path in &image_paths {
        let stem = img_path.file_stem().unwrap().to_string_lossy().to_string();
        let image = Image::load_png(img_path)?;
        if image.width != width || image.height != height {
            return Err(dataset_err(
                img_path,
                format!(
                    "image is {}x{} but intrinsics declare {}x{}",
                    image.width, image.height, width, height
                ),
            ));
        }
        let pose_path = dir.join(format!("poses/{stem}.txt"));
        let text = fs::read_to_string(&pose_path)
            .map_err(|_| dataset_err(&pose_path, "missing pose for image"))?;
        let m = parse_floats(&pose_path, &text, 16)?;
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(dataset_err(&pose_path, "last row of pose must be 0 0 0 1"));
        }
        let rotation = Mat3::from_rows(
            [m[0], m[1], m[2]],
            [m[4], m[5], m[6]],
            [m[8], m[9], m[10]],
        );
        let translation = Vec3::new(m[3], m[7], m[11]);
        let camera = Camera::new(focal, (cx, cy), width, height, rotation, translation)
            .map_err(|e| dataset_err(&pose_path, e.to_string()))?;

        let depth_path = dir.join(format!("depths/{stem}.raw"));
        let depth = depth_path
            .exists()
            .then(|| FloatRaster::load(&depth_path))
            .transpose()?;
        let mask_path = dir.join(format!("masks/{stem}.raw"));
        let mask = mask_path
            .exists()
            .then(|| FloatRaster::load(&mask_path))
            .transpose()?;
        if let Some(d) = &depth {
            if d.width != width || d.height != height {
                return Err(dataset_err(&depth_path, "depth raster dimension mismatch"));
            }
        }
        items.push(PosedImage {
            image,
            camera,
            depth,
            mask,
        });
    }
    Ok(PosedImageSet {
        items,
        bbox,
        background_depth,
    })
}
