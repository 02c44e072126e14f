//! Set-of-mark environment image: workspace outline, labeled world axes and
//! numbered camera locations drawn from a fixed overview camera.

use serde::Serialize;

use crate::draw::{Canvas, Rgb};
use crate::geometry::{CameraRig, Vec3};
use crate::render::VirtualCameraSpec;

pub const SOM_RESOLUTION: u32 = 384;
const OVERVIEW_ELEV: f64 = 35.0;
const OVERVIEW_AZIM: f64 = -150.0;
const AXIS_LENGTH: f64 = 0.35;
const BACKGROUND: Rgb = [245, 245, 240];
const OUTLINE: Rgb = [120, 120, 120];
const MARK_FILL: Rgb = [20, 20, 20];
const MARK_TEXT: Rgb = [255, 255, 255];
pub const AXIS_COLORS: [Rgb; 3] = [[210, 30, 30], [30, 160, 30], [30, 60, 210]];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mark {
    /// "1".."N" for cameras, "x" / "y" / "z" for axes.
    pub label: String,
    /// Camera name for numbered marks, empty for axes.
    pub camera: String,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SomImage {
    pub canvas: Canvas,
    pub marks: Vec<Mark>,
}

/// Overview projection framing the workspace and every camera in the rig.
pub fn overview_spec(rig: &CameraRig) -> VirtualCameraSpec {
    let b = &rig.workspace_bounds;
    let center = b.center();
    let mut reach = b.diagonal() / 2.0;
    for c in &rig.cameras {
        reach = reach.max((c.center() - center).norm());
    }
    VirtualCameraSpec::new(OVERVIEW_ELEV, OVERVIEW_AZIM, 4.0 * reach + 1.0, center, 1.15 * reach, SOM_RESOLUTION).expect("overview spec is valid")
}

pub fn build_som_image(rig: &CameraRig) -> SomImage {
    let spec = overview_spec(rig);
    let proj = spec.projector();
    let px = |p: Vec3| {
        let (u, v, _) = proj.project(&p);
        (u, v)
    };
    let ipx = |p: Vec3| {
        let (u, v) = px(p);
        (u.round() as i64, v.round() as i64)
    };
    let mut canvas = Canvas::new(SOM_RESOLUTION, SOM_RESOLUTION, BACKGROUND);
    let mut marks = Vec::new();

    let (lo, hi) = (rig.workspace_bounds.min, rig.workspace_bounds.max);
    let corner = |i: usize| Vec3::new([lo[0], hi[0]][i & 1], [lo[1], hi[1]][i >> 1 & 1], [lo[2], hi[2]][i >> 2 & 1]);
    for a in 0..8usize {
        for bit in [1, 2, 4] {
            let b = a | bit;
            if b != a {
                let ((x0, y0), (x1, y1)) = (ipx(corner(a)), ipx(corner(b)));
                canvas.line(x0, y0, x1, y1, OUTLINE, 1);
            }
        }
    }

    let origin = Vec3::new(0.0, 0.0, lo[2].max(0.0));
    for (axis, (name, color)) in ["x", "y", "z"].iter().zip(AXIS_COLORS).enumerate() {
        let mut tip = origin;
        tip[axis] += AXIS_LENGTH;
        let ((x0, y0), (x1, y1)) = (ipx(origin), ipx(tip));
        canvas.arrow(x0, y0, x1, y1, color, 2);
        let mut label_at = origin;
        label_at[axis] += AXIS_LENGTH * 1.18;
        let (u, v) = px(label_at);
        canvas.text(u.round() as i64 - 5, v.round() as i64 - 7, name, color, 2);
        marks.push(Mark { label: name.to_string(), camera: String::new(), u, v });
    }

    for (k, cam) in rig.cameras.iter().enumerate() {
        let label = (k + 1).to_string();
        let (u, v) = px(cam.center());
        let (x, y) = (u.round() as i64, v.round() as i64);
        let w = Canvas::text_width(&label, 2);
        canvas.disc(x, y, 11, MARK_FILL);
        canvas.text(x - w / 2 + 1, y - 7, &label, MARK_TEXT, 2);
        marks.push(Mark { label, camera: cam.name.clone(), u, v });
    }
    SomImage { canvas, marks }
}
