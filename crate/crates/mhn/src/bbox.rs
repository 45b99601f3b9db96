//! Axis-aligned boxes in image pixel coordinates.

/// A box as `(x1, y1, x2, y2)` corners with `x2 >= x1`, `y2 >= y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() as f64 * self.height() as f64
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// Clamp the box into `[0, w] x [0, h]`.
    pub fn clip(&self, w: f32, h: f32) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    /// Intersection-over-union overlap, in `[0, 1]`.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0) as f64;
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0) as f64;
        let inter = ix * iy;
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_is_one() {
        let b = BBox::new(3.0, 4.0, 13.0, 24.0);
        assert_eq!(b.iou(&b), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(20.0, 0.0, 30.0, 10.0);
        assert_eq!(a.iou(&b), 0.0);
    }

    #[test]
    fn iou_half_overlap() {
        // (0,0,10,10) vs (5,0,15,10): inter 50, union 150
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        let v = a.iou(&b);
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "iou = {v}");
    }

    #[test]
    fn clip_bounds() {
        let b = BBox::new(-5.0, -1.0, 120.0, 50.0).clip(100.0, 40.0);
        assert_eq!(b, BBox::new(0.0, 0.0, 100.0, 40.0));
    }
}
