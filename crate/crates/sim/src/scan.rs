//! Planar range scan of the base surroundings.

use shelfbot_core::basekin::ObstacleReading;
use shelfbot_core::worldmodel::Vec3;

use crate::scenario::CircleSpec;

/// Distance along the unit ray `(origin, dir)` to the circle boundary, if hit.
fn ray_circle(origin: [f64; 2], dir: [f64; 2], c: &CircleSpec) -> Option<f64> {
    let ox = origin[0] - c.center[0];
    let oy = origin[1] - c.center[1];
    let b = ox * dir[0] + oy * dir[1];
    let cc = ox * ox + oy * oy - c.radius * c.radius;
    if cc <= 0.0 {
        return Some(0.0);
    }
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

/// Cast `rays` evenly spaced rays from the base pose `[x, y, yaw]` and
/// report the hits within `max_range`. Directions are in the base frame.
pub fn scan(pose: [f64; 3], circles: &[CircleSpec], rays: usize, max_range: f64) -> Vec<ObstacleReading> {
    let mut out = Vec::new();
    for i in 0..rays {
        let a = std::f64::consts::TAU * i as f64 / rays as f64;
        let world = a + pose[2];
        let dir = [world.cos(), world.sin()];
        let hit = circles
            .iter()
            .filter_map(|c| ray_circle([pose[0], pose[1]], dir, c))
            .fold(f64::INFINITY, f64::min);
        if hit <= max_range {
            out.push(ObstacleReading {
                direction: Vec3::new(a.cos(), a.sin(), 0.0),
                range: hit,
            });
        }
    }
    out
}
