use super::{CameraIntrinsics, Color, DepthMap, Pose, RgbImage, Scene, Vec3};
use crate::error::{Error, Result};

const LAMBERT_FLOOR: f64 = 0.1;

/// Unit direction of the ray through the center of pixel `(row, col)`.
pub fn pixel_ray(pose: &Pose, intrinsics: &CameraIntrinsics, row: usize, col: usize) -> Vec3 {
    let tan_h = (intrinsics.horizontal_fov / 2.0).tan();
    let tan_v = tan_h * intrinsics.height as f64 / intrinsics.width as f64;
    let u = (2.0 * (col as f64 + 0.5) / intrinsics.width as f64 - 1.0) * tan_h;
    let v = (1.0 - 2.0 * (row as f64 + 0.5) / intrinsics.height as f64) * tan_v;
    let (s, c) = pose.yaw.sin_cos();
    // forward (c, s, 0), right (s, -c, 0), up (0, 0, 1)
    let d = [c + u * s, s - u * c, v];
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    [d[0] / n, d[1] / n, d[2] / n]
}

struct Hit {
    t: f64,
    normal: Vec3,
    color: Color,
}

fn axis_normal(axis: usize, sign: f64) -> Vec3 {
    let mut n = [0.0; 3];
    n[axis] = sign;
    n
}

fn cast(scene: &Scene, origin: Vec3, dir: Vec3) -> Hit {
    // Leaving the room: the first wall plane crossed.
    let room = scene.room();
    let mut best = Hit { t: f64::INFINITY, normal: [0.0; 3], color: [0.0; 3] };
    for axis in 0..3 {
        if dir[axis] == 0.0 {
            continue;
        }
        let positive = dir[axis] > 0.0;
        let plane = if positive { room.max[axis] } else { room.min[axis] };
        let t = (plane - origin[axis]) / dir[axis];
        if t < best.t {
            best = Hit {
                t,
                normal: axis_normal(axis, if positive { -1.0 } else { 1.0 }),
                color: scene.room_colors().face(axis, positive),
            };
        }
    }

    for obstacle in scene.obstacles() {
        let b = &obstacle.bounds;
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut near_axis = 0;
        let mut miss = false;
        for axis in 0..3 {
            if dir[axis] == 0.0 {
                if origin[axis] < b.min[axis] || origin[axis] > b.max[axis] {
                    miss = true;
                    break;
                }
                continue;
            }
            let t1 = (b.min[axis] - origin[axis]) / dir[axis];
            let t2 = (b.max[axis] - origin[axis]) / dir[axis];
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > t_near {
                t_near = lo;
                near_axis = axis;
            }
            t_far = t_far.min(hi);
        }
        if miss || t_near > t_far || t_near <= 0.0 || t_near >= best.t {
            continue;
        }
        let sign = if dir[near_axis] > 0.0 { -1.0 } else { 1.0 };
        best = Hit { t: t_near, normal: axis_normal(near_axis, sign), color: obstacle.color };
    }
    best
}

/// Renders the RGB image and the Euclidean ray-distance depth map seen from `pose`.
pub fn render_frame(scene: &Scene, pose: &Pose, intrinsics: &CameraIntrinsics) -> Result<(RgbImage, DepthMap)> {
    intrinsics.validate()?;
    let p = pose.position;
    if !scene.is_free(p) {
        return Err(Error::PoseInsideObstacle { x: p[0], y: p[1], z: p[2] });
    }
    let light = scene.light_direction();
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut pixels = Vec::with_capacity(w * h * 3);
    let mut depths = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let dir = pixel_ray(pose, intrinsics, row, col);
            let hit = cast(scene, p, dir);
            let lambert = -(hit.normal[0] * light[0] + hit.normal[1] * light[1] + hit.normal[2] * light[2]);
            let shade = lambert.max(LAMBERT_FLOOR);
            pixels.extend(hit.color.iter().map(|c| (c * shade).clamp(0.0, 1.0)));
            depths.push(hit.t);
        }
    }
    Ok((RgbImage { width: w, height: h, pixels }, DepthMap { width: w, height: h, depths }))
}
