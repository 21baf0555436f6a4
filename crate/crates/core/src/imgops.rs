//! Rotation of grayscale planes about their centre.
//!
//! Inverse mapping with bilinear interpolation. Pixel centres sit at integer
//! coordinates, so a 28-pixel axis rotates about 13.5. Sources outside the
//! image read as 0.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

/// Signed angle in degrees; positive turns counter-clockwise as displayed.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AngleDeg(pub f64);

impl AngleDeg {
    pub fn degrees(self) -> f64 {
        self.0
    }

    pub fn radians(self) -> f64 {
        self.0.to_radians()
    }
}

impl std::fmt::Display for AngleDeg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:+}°", self.0)
    }
}

/// Rotate a `[1, H, W]` image by `angle`.
pub fn rotate(image: &Tensor, angle: AngleDeg) -> Result<Tensor> {
    let (h, w) = match *image.shape() {
        [1, h, w] => (h, w),
        ref s => {
            return Err(Error::dim(format!(
                "rotate expects a [1, H, W] image, got {s:?}"
            )))
        }
    };
    if !angle.0.is_finite() {
        return Err(Error::invalid(format!(
            "rotation angle {} is not finite",
            angle.0
        )));
    }
    if angle.0 == 0.0 {
        return Ok(image.clone());
    }
    let mut out = rotate_plane(image.data(), h, w, angle);
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, h, w], out)
}

/// Unclamped rotation of a row-major `h×w` plane.
pub fn rotate_plane(src: &[f64], h: usize, w: usize, angle: AngleDeg) -> Vec<f64> {
    let (sin, cos) = angle.radians().sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            src[y as usize * w + x as usize]
        }
    };

    let mut out = vec![0.0; h * w];
    for y in 0..h {
        // Work in y-up coordinates so positive angles turn counter-clockwise
        // on screen.
        let v = cy - y as f64;
        for x in 0..w {
            let u = x as f64 - cx;
            let su = u * cos + v * sin;
            let sv = -u * sin + v * cos;
            let sx = cx + su;
            let sy = cy - sv;

            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let (x0, y0) = (x0 as isize, y0 as isize);
            out[y * w + x] = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + at(x0 + 1, y0) * fx * (1.0 - fy)
                + at(x0, y0 + 1) * (1.0 - fx) * fy
                + at(x0 + 1, y0 + 1) * fx * fy;
        }
    }
    out
}
