//! Viewpoint selection by a multimodal chat model: prompt construction,
//! response parsing and validation, and the self-verification retry loop.

pub mod client;
pub mod som;

use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::wrap_deg;
use crate::draw::Canvas;
use crate::geometry::{CameraRig, RgbdFrame, WorkspaceBounds};
use crate::render::VirtualCameraSpec;
pub use client::{ChatClient, ChatMessage, ClientError, MockClient, Part};
pub use som::{build_som_image, Mark, SomImage};

/// Azimuths farther than this from every multiple of 90° get a warning.
pub const AXIS_BAND_DEG: f64 = 15.0;
pub const DEFAULT_MAX_RETRIES: usize = 2;
pub const DEFAULT_HALF_EXTENT: f64 = 0.5;
pub const DEFAULT_RESOLUTION: u32 = 224;
/// Virtual camera distance as a multiple of the workspace diagonal.
pub const DISTANCE_FACTOR: f64 = 1.2;

pub const SECTION_TITLES: [&str; 4] = ["Environment description", "Task description", "In-context examples", "Rules"];

pub const RULE_AXES: &str = "Rule 1: Prefer camera alignments along the world axes, with AZIM a multiple of 90 degrees, \
unless a rotation is necessary to reduce occlusion.";
pub const RULE_VISUAL: &str = "Rule 2: Choose the view by analyzing visual information in the images. \
Do not refer to camera names or mark labels as a shortcut.";
pub const RULE_ABOVE: &str = "Rule 3: The camera must look downwards from above the table, so ELEV must be greater than 0.";
pub const RULE_FORMAT: &str = "Rule 4: Answer with exactly one line in the format ELEV=<number>; AZIM=<number>, \
with ELEV in [-90, 90] and AZIM in degrees. One line of rationale may follow.";

#[derive(Debug, Error)]
pub enum ViewpointError {
    #[error("{0}")]
    Usage(String),
    #[error("PARSE_ERROR: {reason} in {text:?}")]
    Parse { reason: String, text: String },
    #[error("SELECTION_FAILED after {} attempts", .transcript.attempts.len())]
    SelectionFailed { transcript: Box<Transcript> },
    #[error("chat client: {source}")]
    Client {
        #[source]
        source: ClientError,
        transcript: Box<Transcript>,
    },
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptImage {
    pub label: String,
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<u8>,
}

impl PromptImage {
    pub fn png(&self) -> Result<Vec<u8>, image::ImageError> {
        Canvas { width: self.width, height: self.height, rgb: self.rgb.clone() }.to_png()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub sections: Vec<(String, String)>,
    pub images: Vec<PromptImage>,
}

impl PromptBundle {
    pub fn text(&self) -> String {
        let mut out = String::new();
        for (title, body) in &self.sections {
            let _ = write!(out, "## {title}\n{body}\n\n");
        }
        out.trim_end().to_string()
    }

    /// Stable text digest: full prompt text plus image labels, sizes and
    /// content hashes.
    pub fn digest(&self) -> String {
        let mut out = self.text();
        out.push_str("\n\n## Images\n");
        for img in &self.images {
            let hash = Sha256::digest(&img.rgb);
            let _ = writeln!(out, "{} {}x{} sha256={:x}", img.label, img.width, img.height, hash);
        }
        out
    }

    /// One user message: the prompt text followed by the five images.
    pub fn to_message(&self) -> Result<ChatMessage, image::ImageError> {
        let mut parts = vec![Part::Text(self.text())];
        for img in &self.images {
            parts.push(Part::Image(img.png()?));
        }
        Ok(ChatMessage { role: "user".into(), parts })
    }
}

fn environment_text(rig: &CameraRig, som: &SomImage) -> String {
    let b = &rig.workspace_bounds;
    let mut s = format!(
        "The first image outlines the robot workspace, an axis-aligned box from ({:.2}, {:.2}, {:.2}) to ({:.2}, {:.2}, {:.2}) meters, \
seen from an overview camera. The world axes start at the table origin: x is red, y is green, z is blue and points up. \
The table top is the plane z = 0.",
        b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]
    );
    let cams: Vec<&Mark> = som.marks.iter().filter(|m| !m.camera.is_empty()).collect();
    if cams.is_empty() {
        s.push_str(" No fixed cameras are marked.");
    } else {
        let _ = write!(
            s,
            " Numbered marks 1 to {} show where the fixed cameras stand. Images 2 to {} are the views from those cameras, in the same order.",
            cams.len(),
            cams.len() + 1
        );
    }
    s
}

fn task_text(task: &str) -> String {
    format!(
        "The robot must: {task}.\n\
Pick one virtual camera that makes this task easiest to see. The camera always looks at the center of the workspace from a fixed \
distance, so only two parameters are free: ELEV, the angle in degrees above the horizontal table plane (90 looks straight down), \
and AZIM, the angle in degrees of the camera's horizontal direction measured counterclockwise from +x towards +y. \
The chosen view should show the objects involved in the task with as little occlusion as possible."
    )
}

const EXAMPLES: &str = "Example 1: A camera in front of the table, level with it, looking back along -x towards the robot base. \
Answer: ELEV=0; AZIM=180\n\
Example 2: A camera directly above the table looking straight down. Answer: ELEV=90; AZIM=0\n\
Example 3: A camera on the right side of the table, level with it, looking along +y. Answer: ELEV=0; AZIM=-90";

fn rules_text() -> String {
    [RULE_AXES, RULE_VISUAL, RULE_ABOVE, RULE_FORMAT].join("\n")
}

/// Builds the four-section prompt with the set-of-mark image and the four raw
/// camera images.
pub fn build_prompt(task: &str, rig: &CameraRig, frames: &[RgbdFrame]) -> Result<PromptBundle, ViewpointError> {
    if task.trim().is_empty() {
        return Err(ViewpointError::Usage("task description is empty".into()));
    }
    if frames.len() != 4 {
        return Err(ViewpointError::Usage(format!("expected 4 camera frames, got {}", frames.len())));
    }
    let som = build_som_image(rig);
    let sections = vec![
        (SECTION_TITLES[0].to_string(), environment_text(rig, &som)),
        (SECTION_TITLES[1].to_string(), task_text(task.trim())),
        (SECTION_TITLES[2].to_string(), EXAMPLES.to_string()),
        (SECTION_TITLES[3].to_string(), rules_text()),
    ];
    let mut images = vec![PromptImage { label: "environment".into(), width: som.canvas.width, height: som.canvas.height, rgb: som.canvas.rgb }];
    for f in frames {
        images.push(PromptImage { label: f.name.clone(), width: f.intrinsics.width, height: f.intrinsics.height, rgb: f.rgb.clone() });
    }
    Ok(PromptBundle { sections, images })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointResponse {
    pub elev: f64,
    /// Normalized into [-180, 180).
    pub azim: f64,
    pub rationale: String,
}

static RESPONSE_RE: LazyLock<Regex> = LazyLock::new(|| {
    let num = r"([-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?)";
    Regex::new(&format!(r"(?i)\belev\s*=\s*{num}\s*[;,]?\s*azim\s*=\s*{num}")).unwrap()
});

pub fn format_response(elev: f64, azim: f64) -> String {
    format!("ELEV={elev}; AZIM={azim}")
}

pub fn parse_response(text: &str) -> Result<ViewpointResponse, ViewpointError> {
    let err = |reason: &str| ViewpointError::Parse { reason: reason.into(), text: text.into() };
    let caps = RESPONSE_RE.captures(text).ok_or_else(|| err("no ELEV=<number>; AZIM=<number> field"))?;
    let elev: f64 = caps[1].parse().map_err(|_| err("ELEV is not a number"))?;
    let azim: f64 = caps[2].parse().map_err(|_| err("AZIM is not a number"))?;
    if !elev.is_finite() || !azim.is_finite() {
        return Err(err("non-finite angle"));
    }
    if !(-90.0..=90.0).contains(&elev) {
        return Err(err("ELEV outside [-90, 90]"));
    }
    let whole = caps.get(0).unwrap();
    let rationale = format!("{} {}", &text[..whole.start()], &text[whole.end()..]).trim().to_string();
    Ok(ViewpointResponse { elev, azim: wrap_deg(azim), rationale })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Violation {
    NotAboveTable,
    NotAxisPreferred,
    BadFormat,
    LabelShortcut,
}

impl Violation {
    pub fn is_warning(&self) -> bool {
        matches!(self, Violation::NotAxisPreferred)
    }

    pub fn rule(&self) -> &'static str {
        match self {
            Violation::NotAboveTable => RULE_ABOVE,
            Violation::NotAxisPreferred => RULE_AXES,
            Violation::BadFormat => RULE_FORMAT,
            Violation::LabelShortcut => RULE_VISUAL,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Violation::NotAboveTable => "NOT_ABOVE_TABLE",
            Violation::NotAxisPreferred => "NOT_AXIS_PREFERRED",
            Violation::BadFormat => "BAD_FORMAT",
            Violation::LabelShortcut => "LABEL_SHORTCUT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        Self { passed: violations.iter().all(Violation::is_warning), violations }
    }
}

static LABEL_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(front|left[ _]shoulder|right[ _]shoulder|shoulder|wrist)[ _](camera|cam|view|image)\b|\b(camera|mark)\s*#?\s*[1-9]\b")
        .unwrap()
});

/// Angular distance from `azim` to the nearest multiple of 90°.
pub fn axis_offset_deg(azim: f64) -> f64 {
    let r = azim.rem_euclid(90.0);
    r.min(90.0 - r)
}

pub fn validate(resp: &ViewpointResponse) -> ValidationReport {
    let mut v = Vec::new();
    if resp.elev <= 0.0 {
        v.push(Violation::NotAboveTable);
    }
    if LABEL_RE.is_match(&resp.rationale) {
        v.push(Violation::LabelShortcut);
    }
    if axis_offset_deg(resp.azim) > AXIS_BAND_DEG {
        v.push(Violation::NotAxisPreferred);
    }
    ValidationReport::from_violations(v)
}

/// Feedback sent after a rejected answer; quotes each violated rule.
pub fn feedback_text(violations: &[Violation]) -> String {
    let mut s = String::from("Your answer was rejected. Violated rules:\n");
    for v in violations.iter().filter(|v| !v.is_warning()) {
        let _ = writeln!(s, "{}: {}", v.id(), v.rule());
    }
    s.push_str("Answer again following all rules.");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attempt {
    pub response: String,
    pub parsed: Option<ViewpointResponse>,
    pub report: ValidationReport,
    /// Feedback sent back after this attempt, if it was rejected.
    pub feedback: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub task: String,
    pub prompt: String,
    pub attempts: Vec<Attempt>,
    pub selected: Option<VirtualCameraSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSettings {
    pub distance: f64,
    pub half_extent: f64,
    pub resolution: u32,
    pub max_retries: usize,
    pub look_at: [f64; 3],
}

impl ViewSettings {
    pub fn for_bounds(bounds: &WorkspaceBounds) -> Self {
        Self {
            distance: DISTANCE_FACTOR * bounds.diagonal(),
            half_extent: DEFAULT_HALF_EXTENT,
            resolution: DEFAULT_RESOLUTION,
            max_retries: DEFAULT_MAX_RETRIES,
            look_at: bounds.center().into(),
        }
    }

    pub fn spec(&self, elev: f64, azim: f64) -> Result<VirtualCameraSpec, ViewpointError> {
        VirtualCameraSpec::new(elev, azim, self.distance, self.look_at.into(), self.half_extent, self.resolution)
            .map_err(|e| ViewpointError::Usage(e.to_string()))
    }
}

/// Queries `client` until it returns a valid viewpoint, feeding violated
/// rules back after each rejection. At most `max_retries + 1` calls are made.
pub fn select_view(
    client: &mut dyn ChatClient,
    task: &str,
    rig: &CameraRig,
    frames: &[RgbdFrame],
    settings: &ViewSettings,
) -> Result<(VirtualCameraSpec, Transcript), ViewpointError> {
    let bundle = build_prompt(task, rig, frames)?;
    let mut messages = vec![bundle.to_message()?];
    let mut transcript = Transcript { task: task.to_string(), prompt: bundle.text(), ..Default::default() };
    for _ in 0..=settings.max_retries {
        let text = match client.complete(&messages) {
            Ok(t) => t,
            Err(source) => return Err(ViewpointError::Client { source, transcript: Box::new(transcript) }),
        };
        let (parsed, report) = match parse_response(&text) {
            Ok(r) => {
                let report = validate(&r);
                (Some(r), report)
            }
            Err(_) => (None, ValidationReport::from_violations(vec![Violation::BadFormat])),
        };
        if report.passed {
            let r = parsed.as_ref().unwrap();
            let spec = settings.spec(r.elev, r.azim)?;
            transcript.attempts.push(Attempt { response: text, parsed, report, feedback: None });
            transcript.selected = Some(spec);
            return Ok((spec, transcript));
        }
        let feedback = feedback_text(&report.violations);
        messages.push(ChatMessage::text("assistant", text.clone()));
        messages.push(ChatMessage::text("user", feedback.clone()));
        transcript.attempts.push(Attempt { response: text, parsed, report, feedback: Some(feedback) });
    }
    Err(ViewpointError::SelectionFailed { transcript: Box::new(transcript) })
}
