//! Scene directories:
//!
//! ```text
//! manifest.txt            key = value lines
//! cameras.txt             one camera per source image
//! mesh.ply                scaffold (an .obj path is accepted too)
//! images/0000.png ...     source images in camera order
//! heldout_cameras.txt     optional evaluation cameras
//! heldout/0000.png ...    optional evaluation images
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Error;
use crate::geometry::{Camera, TriangleMesh};
use crate::io::{cameras, image, obj, ply};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneManifest {
    pub name: String,
    pub mesh: PathBuf,
    pub cameras: PathBuf,
    pub images: PathBuf,
    pub heldout_cameras: Option<PathBuf>,
    pub heldout_images: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
}

impl SceneManifest {
    pub fn standard(name: &str, width: usize, height: usize, heldout: bool) -> Self {
        Self {
            name: name.to_string(),
            mesh: "mesh.ply".into(),
            cameras: "cameras.txt".into(),
            images: "images".into(),
            heldout_cameras: heldout.then(|| "heldout_cameras.txt".into()),
            heldout_images: heldout.then(|| "heldout".into()),
            width,
            height,
        }
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, Error> {
        let mut name = None;
        let mut mesh = None;
        let mut cams = None;
        let mut images = None;
        let mut heldout_cameras = None;
        let mut heldout_images = None;
        let mut width = None;
        let mut height = None;
        for (n, raw) in text.lines().enumerate() {
            let err = |m: String| Error::parse(path, n + 1, m);
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err("expected `key = value`".into()))?;
            if value.is_empty() {
                return Err(err(format!("empty value for `{key}`")));
            }
            let dim = || value.parse::<usize>().ok().filter(|v| *v > 0).ok_or_else(|| err(format!("bad {key} `{value}`")));
            match key {
                "name" => name = Some(value.to_string()),
                "mesh" => mesh = Some(value.into()),
                "cameras" => cams = Some(value.into()),
                "images" => images = Some(value.into()),
                "heldout_cameras" => heldout_cameras = Some(value.into()),
                "heldout_images" => heldout_images = Some(value.into()),
                "width" => width = Some(dim()?),
                "height" => height = Some(dim()?),
                _ => return Err(err(format!("unknown manifest key `{key}`"))),
            }
        }
        let missing = |k: &str| Error::parse(path, 1, format!("missing `{k}`"));
        if heldout_cameras.is_some() != heldout_images.is_some() {
            return Err(Error::parse(path, 1, "heldout_cameras and heldout_images go together"));
        }
        Ok(Self {
            name: name.ok_or_else(|| missing("name"))?,
            mesh: mesh.ok_or_else(|| missing("mesh"))?,
            cameras: cams.ok_or_else(|| missing("cameras"))?,
            images: images.ok_or_else(|| missing("images"))?,
            heldout_cameras,
            heldout_images,
            width: width.ok_or_else(|| missing("width"))?,
            height: height.ok_or_else(|| missing("height"))?,
        })
    }

    pub fn format(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "mesh = {}", self.mesh.display());
        let _ = writeln!(s, "cameras = {}", self.cameras.display());
        let _ = writeln!(s, "images = {}", self.images.display());
        if let (Some(c), Some(i)) = (&self.heldout_cameras, &self.heldout_images) {
            let _ = writeln!(s, "heldout_cameras = {}", c.display());
            let _ = writeln!(s, "heldout_images = {}", i.display());
        }
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        s
    }
}

/// A posed view: camera plus image.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub name: String,
    pub mesh: TriangleMesh,
    pub sources: Vec<View>,
    pub heldout: Vec<View>,
}

impl Scene {
    pub fn cameras(&self) -> Vec<Camera> {
        self.sources.iter().map(|v| v.camera.clone()).collect()
    }

    pub fn images(&self) -> Vec<Tensor<f32>> {
        self.sources.iter().map(|v| v.image.clone()).collect()
    }
}

pub fn image_name(i: usize) -> String {
    format!("{i:04}.png")
}

pub fn read_mesh(path: &Path) -> Result<TriangleMesh, Error> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("obj") => obj::read_obj(path),
        _ => ply::read_ply(path),
    }
}

fn load_views(dir: &Path, cams_path: &Path, images_dir: &Path, manifest: &SceneManifest) -> Result<Vec<View>, Error> {
    let cams = cameras::read_cameras(&dir.join(cams_path))?;
    let img_dir = dir.join(images_dir);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.len() != cams.len() {
        return Err(Error::Invalid(format!(
            "{}: {} cameras but {} images in {}",
            dir.display(),
            cams.len(),
            files.len(),
            img_dir.display()
        )));
    }
    cams.into_iter()
        .enumerate()
        .map(|(i, camera)| {
            let path = img_dir.join(image_name(i));
            let image = image::read_image(&path)?;
            let (h, w) = (image.shape()[0], image.shape()[1]);
            if (w, h) != (camera.width(), camera.height()) || (w, h) != (manifest.width, manifest.height) {
                return Err(Error::Image {
                    path,
                    msg: format!(
                        "image is {w}x{h}, camera {}x{}, manifest {}x{}",
                        camera.width(),
                        camera.height(),
                        manifest.width,
                        manifest.height
                    ),
                });
            }
            Ok(View { camera, image })
        })
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<SceneManifest, Error> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    SceneManifest::parse(&text, &path)
}

pub fn load_scene(dir: &Path) -> Result<Scene, Error> {
    let manifest = read_manifest(dir)?;
    let mesh = read_mesh(&dir.join(&manifest.mesh))?;
    let sources = load_views(dir, &manifest.cameras, &manifest.images, &manifest)?;
    let heldout = match (&manifest.heldout_cameras, &manifest.heldout_images) {
        (Some(c), Some(i)) => load_views(dir, c, i, &manifest)?,
        _ => Vec::new(),
    };
    Ok(Scene {
        name: manifest.name,
        mesh,
        sources,
        heldout,
    })
}

fn write_views(dir: &Path, cams: &str, images: &str, views: &[View]) -> Result<(), Error> {
    let cams_list: Vec<Camera> = views.iter().map(|v| v.camera.clone()).collect();
    cameras::write_cameras(&dir.join(cams), &cams_list)?;
    let img_dir = dir.join(images);
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (i, v) in views.iter().enumerate() {
        image::write_image(&img_dir.join(image_name(i)), &v.image)?;
    }
    Ok(())
}

pub fn save_scene(dir: &Path, scene: &Scene) -> Result<(), Error> {
    let first = scene
        .sources
        .first()
        .ok_or_else(|| Error::Invalid("scene has no source views".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = SceneManifest::standard(
        &scene.name,
        first.camera.width(),
        first.camera.height(),
        !scene.heldout.is_empty(),
    );
    let mpath = dir.join("manifest.txt");
    std::fs::write(&mpath, manifest.format()).map_err(|e| Error::io(&mpath, e))?;
    ply::write_ply(&dir.join("mesh.ply"), &scene.mesh)?;
    write_views(dir, "cameras.txt", "images", &scene.sources)?;
    if !scene.heldout.is_empty() {
        write_views(dir, "heldout_cameras.txt", "heldout", &scene.heldout)?;
    }
    Ok(())
}
