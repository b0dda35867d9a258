use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Affine mapping between pixel (row, col) and world (x, y) coordinates.
///
/// ```text
/// x = origin_x + col * pixel_width + row * col_rotation
/// y = origin_y + row * pixel_height + col * row_rotation
/// ```
///
/// `(origin_x, origin_y)` is the outer corner of pixel (0, 0); pixel centers sit at
/// half-integer positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineGeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_width: f64,
    pub pixel_height: f64,
    #[serde(default)]
    pub row_rotation: f64,
    #[serde(default)]
    pub col_rotation: f64,
}

impl Default for AffineGeoTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineGeoTransform {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        pixel_width: f64,
        pixel_height: f64,
        row_rotation: f64,
        col_rotation: f64,
    ) -> Result<Self> {
        let t = Self { origin_x, origin_y, pixel_width, pixel_height, row_rotation, col_rotation };
        t.validate()?;
        Ok(t)
    }

    /// North-up transform without shear.
    pub fn north_up(origin_x: f64, origin_y: f64, pixel_width: f64, pixel_height: f64) -> Result<Self> {
        Self::new(origin_x, origin_y, pixel_width, pixel_height, 0.0, 0.0)
    }

    /// Origin (0, 0), unit pixels, y pointing down: world y = -row.
    pub fn identity() -> Self {
        Self {
            origin_x: 0.0,
            origin_y: 0.0,
            pixel_width: 1.0,
            pixel_height: -1.0,
            row_rotation: 0.0,
            col_rotation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.origin_x,
            self.origin_y,
            self.pixel_width,
            self.pixel_height,
            self.row_rotation,
            self.col_rotation,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite coefficient".into()));
        }
        if self.pixel_width == 0.0 || self.pixel_height == 0.0 {
            return Err(Error::InvalidTransform("pixel size must be non-zero".into()));
        }
        Ok(())
    }

    pub fn determinant(&self) -> f64 {
        self.pixel_width * self.pixel_height - self.col_rotation * self.row_rotation
    }

    /// World coordinates of the corner of integer pixel `(row, col)`.
    pub fn pixel_to_world(&self, row: i64, col: i64) -> (f64, f64) {
        self.apply(row as f64, col as f64)
    }

    /// World coordinates of a fractional pixel position.
    pub fn apply(&self, row: f64, col: f64) -> (f64, f64) {
        let x = self.origin_x + col * self.pixel_width + row * self.col_rotation;
        let y = self.origin_y + row * self.pixel_height + col * self.row_rotation;
        (x, y)
    }

    /// Fractional `(row, col)` for a world point.
    pub fn world_to_pixel(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let det = self.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::SingularTransform(det));
        }
        let dx = x - self.origin_x;
        let dy = y - self.origin_y;
        // [dx, dy] = [[pw, cr], [rr, ph]] . [col, row]
        let col = (self.pixel_height * dx - self.col_rotation * dy) / det;
        let row = (self.pixel_width * dy - self.row_rotation * dx) / det;
        Ok((row, col))
    }

    /// Transform of the sub-grid whose pixel (0, 0) is `(row_off, col_off)` here.
    pub fn offset(&self, row_off: usize, col_off: usize) -> Self {
        let (x, y) = self.pixel_to_world(row_off as i64, col_off as i64);
        Self { origin_x: x, origin_y: y, ..*self }
    }

    /// Equality up to an absolute tolerance on each coefficient.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        (self.origin_x - other.origin_x).abs() <= tol
            && (self.origin_y - other.origin_y).abs() <= tol
            && (self.pixel_width - other.pixel_width).abs() <= tol
            && (self.pixel_height - other.pixel_height).abs() <= tol
            && (self.row_rotation - other.row_rotation).abs() <= tol
            && (self.col_rotation - other.col_rotation).abs() <= tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_maps_origin() {
        let t = AffineGeoTransform::identity();
        assert_eq!(t.pixel_to_world(0, 0), (0.0, 0.0));
        assert_eq!(t.world_to_pixel(0.0, 0.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn offset_origin_example() {
        let t = AffineGeoTransform::north_up(100.0, 200.0, 2.0, -2.0).unwrap();
        assert_eq!(t.pixel_to_world(1, 3), (106.0, 198.0));
        let (r, c) = t.world_to_pixel(106.0, 198.0).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c, 3.0, epsilon = 1e-12);
    }

    /// Cramer's rule on the 2x2 system, written out independently.
    fn solve_2x2(a: [[f64; 2]; 2], b: [f64; 2]) -> [f64; 2] {
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        [
            (b[0] * a[1][1] - a[0][1] * b[1]) / det,
            (a[0][0] * b[1] - b[0] * a[1][0]) / det,
        ]
    }

    #[test]
    fn shear_inverse_matches_cramer() {
        let t = AffineGeoTransform::new(10.0, -5.0, 0.7, -1.3, 0.25, -0.4).unwrap();
        let (x, y) = (13.2, -9.9);
        // unknowns [col, row]
        let sol = solve_2x2(
            [[t.pixel_width, t.col_rotation], [t.row_rotation, t.pixel_height]],
            [x - t.origin_x, y - t.origin_y],
        );
        let (row, col) = t.world_to_pixel(x, y).unwrap();
        assert_abs_diff_eq!(col, sol[0], epsilon = 1e-12);
        assert_abs_diff_eq!(row, sol[1], epsilon = 1e-12);
    }

    #[test]
    fn singular_transform_is_rejected() {
        let t = AffineGeoTransform::new(0.0, 0.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        assert!(matches!(t.world_to_pixel(1.0, 1.0), Err(Error::SingularTransform(_))));
    }

    #[test]
    fn zero_pixel_size_rejected() {
        assert!(AffineGeoTransform::north_up(0.0, 0.0, 0.0, -1.0).is_err());
        assert!(AffineGeoTransform::north_up(0.0, 0.0, 1.0, 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn roundtrip(
            ox in -1e5f64..1e5, oy in -1e5f64..1e5,
            pw in 0.1f64..10.0, ph in -10.0f64..-0.1,
            rr in -0.5f64..0.5, cr in -0.5f64..0.5,
            row in -5000i64..5000, col in -5000i64..5000,
        ) {
            let t = AffineGeoTransform::new(ox, oy, pw, ph, rr, cr).unwrap();
            prop_assume!(t.determinant().abs() > 1e-3);
            let (x, y) = t.pixel_to_world(row, col);
            let (r, c) = t.world_to_pixel(x, y).unwrap();
            prop_assert!((r - row as f64).abs() < 1e-6);
            prop_assert!((c - col as f64).abs() < 1e-6);
        }
    }
}
