use crate::error::{Error, Result};

/// Bird's-eye-view rectangle: center, width across and length along `yaw`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bev {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

type Pt = [f64; 2];

impl Bev {
    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [Pt; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(u, v)| [self.x + u * c - v * s, self.y + u * s + v * c])
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    pub fn contains(&self, p: Pt) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        (dx * c + dy * s).abs() <= self.l / 2.0 && (-dx * s + dy * c).abs() <= self.w / 2.0
    }

    fn check(&self) -> Result<()> {
        let ok = [self.x, self.y, self.yaw].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.l > 0.0;
        if !ok || !self.area().is_normal() {
            return Err(Error::InvalidInput(format!("degenerate box {self:?}")));
        }
        Ok(())
    }
}

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(p: &[Pt]) -> f64 {
    let n = p.len();
    (0..n).map(|i| p[i][0] * p[(i + 1) % n][1] - p[(i + 1) % n][0] * p[i][1]).sum::<f64>() / 2.0
}

/// Sutherland–Hodgman: `subject` clipped by the convex CCW polygon `clip`.
fn clip_polygon(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        if input.is_empty() {
            break;
        }
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (cross(a, b, p), cross(a, b, q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Intersection over union of two rotated rectangles.
pub fn rotated_bev_iou(a: &Bev, b: &Bev) -> Result<f64> {
    a.check()?;
    b.check()?;
    let reach = (a.w.hypot(a.l) + b.w.hypot(b.l)) / 2.0;
    if (a.x - b.x).hypot(a.y - b.y) >= reach {
        return Ok(0.0);
    }
    let inter = polygon_area(&clip_polygon(&a.corners(), &b.corners())).max(0.0);
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}
