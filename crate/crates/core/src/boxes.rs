//! Horizontal boxes in image pixels.

use std::cmp::Ordering;

/// `(x_min, y_min, x_max, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.coords().iter().all(|v| v.is_finite()) && self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
    pub difficult: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetBox {
    pub class_id: usize,
    /// In `[0, 1]`.
    pub score: f64,
    pub bbox: BBox,
}

impl DetBox {
    /// `class_id score x_min y_min x_max y_max` with four decimals.
    pub fn to_line(&self) -> String {
        let b = &self.bbox;
        format!(
            "{} {:.4} {:.4} {:.4} {:.4} {:.4}",
            self.class_id, self.score, b.x_min, b.y_min, b.x_max, b.y_max
        )
    }

    pub fn parse_line(line: &str) -> Option<DetBox> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return None;
        }
        let v: Vec<f64> = f[1..].iter().map(|s| s.parse().ok()).collect::<Option<_>>()?;
        Some(DetBox {
            class_id: f[0].parse().ok()?,
            score: v[0],
            bbox: BBox::new(v[1], v[2], v[3], v[4]),
        })
    }
}

/// Descending score, then lower class, then lexicographic coordinates.
pub fn detection_order(a: &DetBox, b: &DetBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| {
            a.bbox
                .coords()
                .iter()
                .zip(b.bbox.coords().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}
