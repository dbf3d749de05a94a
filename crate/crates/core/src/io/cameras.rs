//! Camera text files: one camera per line,
//! `id W H fx fy cx cy r11 r12 r13 r21 r22 r23 r31 r32 r33 t1 t2 t3`.
//! Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::Error;
use crate::geometry::Camera;

/// Rotations are re-orthonormalized when they are off by less than this,
/// absorbing the rounding of text serialization.
const REPAIR_TOL: f64 = 1e-4;

fn nearest_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    u * vt
}

pub fn parse_camera_line(line: &str) -> Result<(u64, Camera), String> {
    let tok: Vec<&str> = line.split_whitespace().collect();
    if tok.len() != 19 {
        return Err(format!("expected 19 fields, found {}", tok.len()));
    }
    let id: u64 = tok[0].parse().map_err(|_| format!("bad camera id `{}`", tok[0]))?;
    let dim = |s: &str| s.parse::<usize>().map_err(|_| format!("bad image size `{s}`"));
    let (w, h) = (dim(tok[1])?, dim(tok[2])?);
    let nums = tok[3..]
        .iter()
        .map(|s| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
        .collect::<Result<Vec<_>, _>>()?;
    let mut r = Matrix3::from_row_slice(&nums[4..13]);
    let t = Vector3::new(nums[13], nums[14], nums[15]);
    if r.iter().all(|v| v.is_finite()) && (r * r.transpose() - Matrix3::identity()).abs().max() < REPAIR_TOL {
        let fixed = nearest_rotation(&r);
        if fixed.determinant() > 0.0 {
            r = fixed;
        }
    }
    let cam = Camera::from_intrinsics(nums[0], nums[1], nums[2], nums[3], r, t, w, h).map_err(|e| e.to_string())?;
    Ok((id, cam))
}

pub fn parse_cameras(text: &str, path: &Path) -> Result<Vec<(u64, Camera)>, Error> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push(parse_camera_line(trimmed).map_err(|m| Error::parse(path, n + 1, m))?);
    }
    Ok(out)
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_cameras(&text, path)?.into_iter().map(|(_, c)| c).collect())
}

pub fn format_camera_line(id: u64, cam: &Camera) -> String {
    let k = cam.intrinsics();
    let r = cam.rotation();
    let t = cam.translation();
    let mut s = format!("{id} {} {} {:?} {:?} {:?} {:?}", cam.width(), cam.height(), k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
    for i in 0..3 {
        for j in 0..3 {
            let _ = write!(s, " {:?}", r[(i, j)]);
        }
    }
    let _ = write!(s, " {:?} {:?} {:?}", t.x, t.y, t.z);
    s
}

pub fn format_cameras(cameras: &[Camera]) -> String {
    let mut s = String::from("# id W H fx fy cx cy r11 r12 r13 r21 r22 r23 r31 r32 r33 t1 t2 t3\n");
    for (i, c) in cameras.iter().enumerate() {
        s.push_str(&format_camera_line(i as u64, c));
        s.push('\n');
    }
    s
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<(), Error> {
    std::fs::write(path, format_cameras(cameras)).map_err(|e| Error::io(path, e))
}
