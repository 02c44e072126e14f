//! Python bindings: scene generation, fusion, rendering, the action codec,
//! keypointing, viewpoint parsing/selection and the toy policy.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use veye_core::codec::{self, ActionCodec, ActionVector, PolicyOutputs};
use veye_core::geometry::{self, Vec3};
use veye_core::keypoint;
use veye_core::policy::gradcheck::{gradcheck as run_gradcheck, DEFAULT_STEP, DEFAULT_TOLERANCE};
use veye_core::policy::{ModelConfig, Policy as CorePolicy};
use veye_core::render;
use veye_core::samples::observation_cloud;
use veye_core::viewpoint::{self, MockClient, ViewSettings};
use veye_core::world::{self, Task};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "VirtualCameraSpec", from_py_object)]
#[derive(Clone)]
struct Spec {
    inner: render::VirtualCameraSpec,
}

#[pymethods]
impl Spec {
    #[new]
    #[pyo3(signature = (elev, azim, distance, look_at, half_extent, resolution=224))]
    fn new(elev: f64, azim: f64, distance: f64, look_at: [f64; 3], half_extent: f64, resolution: u32) -> PyResult<Self> {
        let inner = render::VirtualCameraSpec::new(elev, azim, distance, look_at.into(), half_extent, resolution).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn elev(&self) -> f64 {
        self.inner.elev
    }

    #[getter]
    fn azim(&self) -> f64 {
        self.inner.azim
    }

    #[getter]
    fn distance(&self) -> f64 {
        self.inner.distance
    }

    #[getter]
    fn look_at(&self) -> [f64; 3] {
        self.inner.look_at
    }

    #[getter]
    fn half_extent(&self) -> f64 {
        self.inner.half_extent
    }

    #[getter]
    fn resolution(&self) -> u32 {
        self.inner.resolution
    }

    fn world_to_pixel(&self, p: [f64; 3]) -> (f64, f64, f64) {
        self.inner.world_to_pixel(&p.into())
    }

    fn pixel_to_world(&self, u: f64, v: f64, depth: f64) -> PyResult<[f64; 3]> {
        Ok(self.inner.pixel_to_world(u, v, depth).map_err(value_err)?.into())
    }

    fn zoom(&self, center: [f64; 3], factor: f64) -> PyResult<Spec> {
        Ok(Spec { inner: render::zoom_spec(&self.inner, &center.into(), factor).map_err(value_err)? })
    }

    fn to_json(&self) -> String {
        veye_core_json(&self.inner)
    }

    fn __repr__(&self) -> String {
        let s = &self.inner;
        format!(
            "VirtualCameraSpec(elev={}, azim={}, distance={}, look_at={:?}, half_extent={}, resolution={})",
            s.elev, s.azim, s.distance, s.look_at, s.half_extent, s.resolution
        )
    }
}

fn veye_core_json(spec: &render::VirtualCameraSpec) -> String {
    format!(
        "{{\"elev\": {}, \"azim\": {}, \"distance\": {}, \"look_at\": [{}, {}, {}], \"half_extent\": {}, \"resolution\": {}}}",
        spec.elev, spec.azim, spec.distance, spec.look_at[0], spec.look_at[1], spec.look_at[2], spec.half_extent, spec.resolution
    )
}

#[pyclass(name = "Action", from_py_object)]
#[derive(Clone)]
struct Action {
    inner: ActionVector,
}

#[pymethods]
impl Action {
    #[new]
    #[pyo3(signature = (position, euler_deg, gripper_open=true, collision_allowed=false))]
    fn new(position: [f64; 3], euler_deg: [f64; 3], gripper_open: bool, collision_allowed: bool) -> Self {
        Self { inner: ActionVector::new(position.into(), codec::quat_from_euler_xyz_deg(euler_deg), gripper_open, collision_allowed) }
    }

    #[getter]
    fn position(&self) -> [f64; 3] {
        self.inner.position.into()
    }

    #[getter]
    fn euler_deg(&self) -> [f64; 3] {
        self.inner.euler_deg()
    }

    /// `[w, x, y, z]`.
    #[getter]
    fn quaternion(&self) -> [f64; 4] {
        let f = self.inner.to_floats();
        [f[3], f[4], f[5], f[6]]
    }

    #[getter]
    fn gripper_open(&self) -> bool {
        self.inner.gripper_open
    }

    #[getter]
    fn collision_allowed(&self) -> bool {
        self.inner.collision_allowed
    }

    fn __repr__(&self) -> String {
        format!(
            "Action(position={:?}, euler_deg={:?}, gripper_open={}, collision_allowed={})",
            self.position(),
            self.euler_deg(),
            self.inner.gripper_open,
            self.inner.collision_allowed
        )
    }
}

/// Point cloud as parallel lists of xyz points and rgb colors.
#[pyclass(name = "PointCloud", from_py_object)]
#[derive(Clone)]
struct Cloud {
    inner: geometry::PointCloud,
}

#[pymethods]
impl Cloud {
    #[new]
    fn new(points: Vec<[f64; 3]>, colors: Vec<[u8; 3]>) -> PyResult<Self> {
        if points.len() != colors.len() {
            return Err(PyValueError::new_err("points and colors differ in length"));
        }
        Ok(Self { inner: geometry::PointCloud { points: points.into_iter().map(Vec3::from).collect(), colors } })
    }

    fn __len__(&self) -> usize {
        self.inner.points.len()
    }

    fn points(&self) -> Vec<[f64; 3]> {
        self.inner.points.iter().map(|p| (*p).into()).collect()
    }

    fn colors(&self) -> Vec<[u8; 3]> {
        self.inner.colors.clone()
    }
}

/// Rendered view: `rgb` as bytes (row-major RGB), `depth` in meters with
/// `inf` for background.
#[pyclass(name = "VirtualImage")]
struct Image {
    inner: render::VirtualImage,
}

#[pymethods]
impl Image {
    #[getter]
    fn resolution(&self) -> usize {
        self.inner.resolution()
    }

    #[getter]
    fn rgb<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.rgb)
    }

    #[getter]
    fn depth(&self) -> Vec<f32> {
        self.inner.depth.clone()
    }

    fn covered_pixels(&self) -> usize {
        self.inner.covered_pixels()
    }

    fn save(&self, dir: &str, stem: &str) -> PyResult<Vec<String>> {
        let paths = self.inner.save(dir, stem).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(paths.iter().map(|p| p.display().to_string()).collect())
    }
}

#[pyfunction]
fn render_view(cloud: &Cloud, spec: &Spec) -> Image {
    Image { inner: render::render(&cloud.inner, &spec.inner) }
}

/// Camera-to-world pose as `(quaternion wxyz, translation)`.
#[pyfunction]
fn pose_from_angles(elev: f64, azim: f64, distance: f64, look_at: [f64; 3]) -> PyResult<([f64; 4], [f64; 3])> {
    let t = geometry::pose_from_angles(elev, azim, distance, look_at.into()).map_err(value_err)?;
    Ok((t.wxyz(), t.translation.into()))
}

#[pyclass(name = "Demonstration")]
struct Demo {
    inner: world::Demonstration,
}

#[pymethods]
impl Demo {
    #[getter]
    fn instruction(&self) -> String {
        self.inner.trajectory.instruction.clone()
    }

    #[getter]
    fn task(&self) -> String {
        self.inner.task_name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __len__(&self) -> usize {
        self.inner.trajectory.len()
    }

    fn action(&self, step: usize) -> PyResult<Action> {
        let s = self.inner.trajectory.steps.get(step).ok_or_else(|| PyValueError::new_err("step out of range"))?;
        Ok(Action { inner: s.action })
    }

    fn velocities(&self) -> Vec<f64> {
        self.inner.trajectory.velocities()
    }

    fn gripper_states(&self) -> Vec<bool> {
        self.inner.trajectory.gripper_states()
    }

    #[pyo3(signature = (vel_eps=keypoint::DEFAULT_VEL_EPS, min_gap=keypoint::DEFAULT_MIN_GAP))]
    fn keypoints(&self, vel_eps: f64, min_gap: usize) -> PyResult<Vec<usize>> {
        keypoint::extract_keypoints(&self.inner.trajectory, vel_eps, min_gap).map_err(value_err)
    }

    /// Fused, workspace-cropped cloud of the four cameras at `step`.
    fn cloud(&self, step: usize) -> PyResult<Cloud> {
        if step >= self.inner.trajectory.len() {
            return Err(PyValueError::new_err("step out of range"));
        }
        Ok(Cloud { inner: observation_cloud(&self.inner, step) })
    }
}

#[pyfunction]
fn make_demo(task: &str, seed: u64) -> PyResult<Demo> {
    let task: Task = task.parse().map_err(value_err)?;
    Ok(Demo { inner: world::make_demo(task, seed).map_err(value_err)? })
}

#[pyfunction]
fn write_dataset(path: &str, demos: Vec<PyRef<'_, Demo>>) -> PyResult<()> {
    let list: Vec<world::Demonstration> = demos.iter().map(|d| d.inner.clone()).collect();
    veye_core::dataset::write_dataset(std::path::Path::new(path), &list).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyfunction]
fn read_dataset(path: &str) -> PyResult<Vec<Demo>> {
    let demos = veye_core::dataset::read_dataset(std::path::Path::new(path)).map_err(value_err)?;
    Ok(demos.into_iter().map(|inner| Demo { inner }).collect())
}

#[pyfunction]
#[pyo3(signature = (gripper_open, velocity, vel_eps=keypoint::DEFAULT_VEL_EPS, min_gap=keypoint::DEFAULT_MIN_GAP))]
fn extract_keypoints(gripper_open: Vec<bool>, velocity: Vec<f64>, vel_eps: f64, min_gap: usize) -> PyResult<Vec<usize>> {
    keypoint::keypoints_from_signals(&gripper_open, &velocity, vel_eps, min_gap).map_err(value_err)
}

#[pyclass(name = "ActionCodec")]
struct Codec {
    inner: ActionCodec,
}

#[pymethods]
impl Codec {
    #[new]
    #[pyo3(signature = (workspace_diagonal, reference_half_extent, sigma_px=codec::DEFAULT_HEATMAP_SIGMA))]
    fn new(workspace_diagonal: f64, reference_half_extent: f64, sigma_px: f64) -> PyResult<Self> {
        Ok(Self { inner: ActionCodec::new(sigma_px, workspace_diagonal, reference_half_extent).map_err(value_err)? })
    }

    /// `(pixel index of the heatmap peak, depth bin, rotation bins)`.
    fn encode(&self, action: &Action, spec: &Spec) -> PyResult<(usize, usize, [usize; 3])> {
        let t = self.inner.encode(&action.inner, &spec.inner, false).map_err(value_err)?;
        Ok((t.heatmap_argmax(), t.depth_bin, t.rot_bins))
    }

    /// Encode then decode the one-hot target.
    fn quantize(&self, action: &Action, spec: &Spec) -> PyResult<Action> {
        let t = self.inner.encode(&action.inner, &spec.inner, false).map_err(value_err)?;
        Ok(Action { inner: self.inner.decode(&PolicyOutputs::from_target(&t, 1.0), &spec.inner) })
    }

    fn quantization_bound(&self, spec: &Spec) -> f64 {
        self.inner.quantization_bound(&spec.inner)
    }
}

#[pyfunction]
fn label_refine(coarse: &Action, fine: &Action) -> bool {
    codec::label_refine(&coarse.inner, &fine.inner)
}

/// `(elev, azim, rationale)`.
#[pyfunction]
fn parse_response(text: &str) -> PyResult<(f64, f64, String)> {
    let r = viewpoint::parse_response(text).map_err(value_err)?;
    Ok((r.elev, r.azim, r.rationale))
}

/// `(passed, violation ids)`.
#[pyfunction]
#[pyo3(signature = (elev, azim, rationale=String::new()))]
fn validate_view(elev: f64, azim: f64, rationale: String) -> (bool, Vec<String>) {
    let r = viewpoint::validate(&viewpoint::ViewpointResponse { elev, azim, rationale });
    (r.passed, r.violations.iter().map(|v| v.id().to_string()).collect())
}

/// Runs view selection for `demo` against scripted responses; returns the
/// selected spec and the number of chat calls made.
#[pyfunction]
fn select_view_scripted(demo: &Demo, responses: Vec<String>) -> PyResult<(Spec, usize)> {
    let frames = &demo.inner.trajectory.steps[0].frames;
    let rig = geometry::CameraRig {
        cameras: frames.iter().map(|f| geometry::CameraModel { name: f.name.clone(), intrinsics: f.intrinsics, extrinsics: f.extrinsics }).collect(),
        workspace_bounds: world::workspace_bounds(),
    };
    let mut client = MockClient::new(responses);
    let settings = ViewSettings::for_bounds(&world::workspace_bounds());
    let (spec, _) = viewpoint::select_view(&mut client, &demo.inner.trajectory.instruction, &rig, frames, &settings)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((Spec { inner: spec }, client.calls))
}

#[pyclass(name = "Policy")]
struct Policy {
    inner: CorePolicy,
}

#[pymethods]
impl Policy {
    #[new]
    #[pyo3(signature = (embed_dim=64, heads=4, hidden_dim=128, layers=8, seed=0))]
    fn new(embed_dim: usize, heads: usize, hidden_dim: usize, layers: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig { embed_dim, heads, hidden_dim, layers, ..ModelConfig::default() };
        Ok(Self { inner: CorePolicy::new(&cfg, seed).map_err(value_err)? })
    }

    #[getter]
    fn input_tokens(&self) -> usize {
        self.inner.input_tokens()
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.layers()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params.len()
    }

    /// Runs the policy on a rendered view and decodes the action.
    fn predict(&self, image: &Image, instruction: &str, codec: &Codec) -> PyResult<Action> {
        let input = veye_core::policy::make_input(&image.inner, instruction, &codec.inner, self.inner.config()).map_err(value_err)?;
        Ok(Action { inner: codec.inner.decode(&self.inner.predict(&input), &image.inner.spec) })
    }
}

/// Largest relative gradient error on a small random configuration.
#[pyfunction]
#[pyo3(signature = (seed=0, per_tensor=4))]
fn gradcheck(seed: u64, per_tensor: usize) -> PyResult<(f64, bool)> {
    let cfg = ModelConfig { embed_dim: 16, layers: 2, heads: 2, hidden_dim: 32, ..ModelConfig::default() };
    let r = run_gradcheck(&cfg, seed, per_tensor, DEFAULT_STEP, DEFAULT_TOLERANCE).map_err(value_err)?;
    Ok((r.max_rel_error, r.passed))
}

#[pyfunction]
fn workspace_bounds() -> ([f64; 3], [f64; 3]) {
    let b = world::workspace_bounds();
    (b.min, b.max)
}

#[pymodule]
fn veye(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Spec>()?;
    m.add_class::<Action>()?;
    m.add_class::<Cloud>()?;
    m.add_class::<Image>()?;
    m.add_class::<Demo>()?;
    m.add_class::<Codec>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(render_view, m)?)?;
    m.add_function(wrap_pyfunction!(pose_from_angles, m)?)?;
    m.add_function(wrap_pyfunction!(make_demo, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(extract_keypoints, m)?)?;
    m.add_function(wrap_pyfunction!(label_refine, m)?)?;
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    m.add_function(wrap_pyfunction!(validate_view, m)?)?;
    m.add_function(wrap_pyfunction!(select_view_scripted, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(workspace_bounds, m)?)?;
    Ok(())
}
