//! Synthetic paired RGB/depth capture.
//!
//! A scene is a closed axis-aligned room with flat-colored box obstacles.
//! Frames are produced by casting one ray per pixel from a level camera and
//! recording the Euclidean hit distance and a Lambert-shaded color.

mod generate;
pub mod io;
mod render;
mod trajectory;

pub use generate::{generate_dataset, GenerateOptions, FRAMES_DIR, MANIFEST_FILE};
pub use render::{pixel_ray, render_frame};
pub use trajectory::{generate_trajectory, trajectory_samples, TrajectoryParams, TrajectorySample};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Vec3 = [f64; 3];
pub type Color = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn diagonal(&self) -> f64 {
        (0..3).map(|a| (self.max[a] - self.min[a]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn contains_strictly(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }

    fn strictly_inside(&self, outer: &Aabb) -> bool {
        (0..3).all(|a| self.min[a] > outer.min[a] && self.max[a] < outer.max[a])
    }

    fn is_proper(&self) -> bool {
        (0..3).all(|a| self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub bounds: Aabb,
    pub color: Color,
}

/// Surface colors of the room's six faces.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomColors {
    pub west: Color,
    pub east: Color,
    pub south: Color,
    pub north: Color,
    pub floor: Color,
    pub ceiling: Color,
}

impl RoomColors {
    /// Color of the face hit when leaving the room along `axis` in direction `positive`.
    pub fn face(&self, axis: usize, positive: bool) -> Color {
        match (axis, positive) {
            (0, false) => self.west,
            (0, true) => self.east,
            (1, false) => self.south,
            (1, true) => self.north,
            (2, false) => self.floor,
            _ => self.ceiling,
        }
    }

    pub fn uniform(color: Color) -> Self {
        RoomColors { west: color, east: color, south: color, north: color, floor: color, ceiling: color }
    }

    fn all(&self) -> [Color; 6] {
        [self.west, self.east, self.south, self.north, self.floor, self.ceiling]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub room: Aabb,
    pub room_colors: RoomColors,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    pub light_direction: Vec3,
}

impl SceneConfig {
    /// An 8 × 5 × 3 m furnished room. The loop route runs off-center so the
    /// far walls differ from place to place along it.
    pub fn living_room() -> Self {
        let b = |min: Vec3, max: Vec3, color: Color| Obstacle { bounds: Aabb::new(min, max), color };
        SceneConfig {
            room: Aabb::new([0.0, 0.0, 0.0], [8.0, 5.0, 3.0]),
            room_colors: RoomColors {
                west: [0.85, 0.80, 0.65],
                east: [0.55, 0.70, 0.85],
                south: [0.80, 0.55, 0.50],
                north: [0.60, 0.80, 0.55],
                floor: [0.45, 0.35, 0.25],
                ceiling: [0.95, 0.95, 0.95],
            },
            obstacles: vec![
                // table in the loop's interior
                b([3.00, 2.20, 0.01], [4.00, 2.80, 0.75], [0.60, 0.40, 0.20]),
                // sofa along the west wall
                b([0.10, 1.50, 0.01], [0.75, 3.50, 0.90], [0.20, 0.30, 0.70]),
                // bookshelf on the east wall
                b([7.30, 0.50, 0.01], [7.90, 2.50, 2.20], [0.35, 0.20, 0.10]),
                // cabinet on the north wall
                b([2.50, 4.40, 0.01], [4.50, 4.90, 1.20], [0.90, 0.85, 0.30]),
                // plant stand in the south-west corner
                b([0.20, 0.20, 0.01], [0.60, 0.60, 1.60], [0.15, 0.65, 0.20]),
                // lamp pillar in the north-east corner
                b([7.40, 3.60, 0.01], [7.70, 3.90, 2.40], [0.95, 0.60, 0.85]),
            ],
            light_direction: [-0.4, -0.3, -0.85],
        }
    }

    /// Closed 4 × 2 m rectangular route matching [`SceneConfig::living_room`].
    pub fn living_room_route() -> Vec<[f64; 2]> {
        vec![[1.5, 1.5], [5.5, 1.5], [5.5, 3.5], [1.5, 3.5]]
    }
}

/// A validated scene.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scene {
    room: Aabb,
    room_colors: RoomColors,
    obstacles: Vec<Obstacle>,
    light_direction: Vec3,
}

impl Scene {
    pub fn room(&self) -> &Aabb {
        &self.room
    }

    pub fn room_colors(&self) -> &RoomColors {
        &self.room_colors
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    pub fn light_direction(&self) -> Vec3 {
        self.light_direction
    }

    pub fn diagonal(&self) -> f64 {
        self.room.diagonal()
    }

    /// Hex SHA-256 of the scene's canonical JSON form.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("scene serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_free(&self, p: Vec3) -> bool {
        self.room.contains_strictly(p) && !self.obstacles.iter().any(|o| o.bounds.contains(p))
    }
}

fn check_color(color: &Color, what: &str) -> Result<()> {
    if color.iter().all(|c| (0.0..=1.0).contains(c)) {
        Ok(())
    } else {
        Err(Error::InvalidScene(format!("{what} color {color:?} outside [0, 1]")))
    }
}

/// Validates a scene description. The light direction is normalized.
pub fn build_scene(config: SceneConfig) -> Result<Scene> {
    if !config.room.is_proper() {
        return Err(Error::InvalidScene(format!("room extent {:?} is empty", config.room)));
    }
    for (face, color) in config.room_colors.all().iter().enumerate() {
        check_color(color, &format!("room face {face}"))?;
    }
    for (i, obstacle) in config.obstacles.iter().enumerate() {
        if !obstacle.bounds.is_proper() {
            return Err(Error::InvalidScene(format!("obstacle {i} has an empty extent")));
        }
        if !obstacle.bounds.strictly_inside(&config.room) {
            return Err(Error::InvalidScene(format!("obstacle {i} is not strictly inside the room")));
        }
        check_color(&obstacle.color, &format!("obstacle {i}"))?;
    }
    let l = config.light_direction;
    let norm = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::InvalidScene("light direction must be a non-zero finite vector".into()));
    }
    Ok(Scene {
        room: config.room,
        room_colors: config.room_colors,
        obstacles: config.obstacles,
        light_direction: [l[0] / norm, l[1] / norm, l[2] / norm],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub horizontal_fov: f64,
}

impl CameraIntrinsics {
    pub fn new(width: usize, height: usize, horizontal_fov: f64) -> Result<Self> {
        let intrinsics = CameraIntrinsics { width, height, horizontal_fov };
        intrinsics.validate()?;
        Ok(intrinsics)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidIntrinsics(format!(
                "raster {}x{} smaller than 8x8",
                self.width, self.height
            )));
        }
        if !(self.horizontal_fov > 0.0 && self.horizontal_fov < std::f64::consts::PI) {
            return Err(Error::InvalidIntrinsics(format!(
                "horizontal fov {} outside (0, pi)",
                self.horizontal_fov
            )));
        }
        Ok(())
    }
}

/// Level camera pose; yaw is measured counter-clockwise from +x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub yaw: f64,
}

impl Pose {
    pub fn new(position: Vec3, yaw: f64) -> Self {
        Pose { position, yaw: wrap_angle(yaw) }
    }

    pub fn planar(&self) -> [f64; 2] {
        [self.position[0], self.position[1]]
    }
}

/// Maps an angle into [-pi, pi).
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, three interleaved channels per pixel.
    pub pixels: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(format!("{}", width * height * 3), pixels.len()));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange { value: *v, lo: 0.0, hi: 1.0 });
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn pixel(&self, row: usize, col: usize) -> Color {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Row-major depths in meters; NaN marks a hole.
    pub depths: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depths: Vec<f64>) -> Result<Self> {
        if depths.len() != width * height {
            return Err(Error::shape(format!("{}", width * height), depths.len()));
        }
        Ok(DepthMap { width, height, depths })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.depths[row * self.width + col]
    }

    pub fn hole_count(&self) -> usize {
        self.depths.iter().filter(|d| d.is_nan()).count()
    }
}

/// Marks each pixel as a hole independently with probability `rate`.
pub fn punch_holes(depth: &DepthMap, rate: f64, rng_seed: u64) -> Result<DepthMap> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::OutOfRange { value: rate, lo: 0.0, hi: 1.0 });
    }
    let mut out = depth.clone();
    if rate == 0.0 {
        return Ok(out);
    }
    let mut rng = rng::stream(rng_seed, rng::HOLE_PUNCH, 0);
    for d in out.depths.iter_mut() {
        if rng.gen::<f64>() < rate {
            *d = f64::NAN;
        }
    }
    Ok(out)
}
