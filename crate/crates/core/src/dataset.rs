//! Binary demonstration dataset.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VEDS" | u32 version (1) | u32 demo count | u64 offset × count
//! per demo:   str instruction | str task | str variation | u64 seed | u32 step count
//! per step:   u32 frame count (0 or 4) | frame × count
//!             f64 × 7 action (position xyz, quaternion wxyz) | u8 bits (1 = open, 2 = collision allowed)
//!             f64 joint velocity norm | u8 gripper open
//! per frame:  str name | f64 fx fy cx cy | u32 width height
//!             f64 × 7 extrinsics (quaternion wxyz, translation xyz)
//!             u32 png length | png rgb | f32 depth × width·height
//! str:        u32 byte length | UTF-8 bytes
//! ```
//!
//! Floats are stored as 64-bit where the in-memory type is 64-bit so that a
//! read returns exactly what was written.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageFormat};
use nalgebra::{Quaternion, UnitQuaternion};
use thiserror::Error;

use crate::codec::ActionVector;
use crate::geometry::{CameraIntrinsics, RgbdFrame, RigidTransform, Vec3};
use crate::keypoint::{Step, Trajectory};
use crate::world::Demonstration;

pub const DATASET_MAGIC: &[u8; 4] = b"VEDS";
pub const DATASET_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 12;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("dataset io: {0}")]
    Io(io::Error),
    #[error("demo {index} out of range (dataset has {count})")]
    OutOfRange { index: usize, count: usize },
}

impl From<io::Error> for DatasetError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            DatasetError::Corrupt("unexpected end of file".into())
        } else {
            DatasetError::Io(e)
        }
    }
}

fn corrupt(msg: impl Into<String>) -> DatasetError {
    DatasetError::Corrupt(msg.into())
}

fn put_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> io::Result<()> {
    vs.iter().try_for_each(|v| w.write_all(&v.to_le_bytes()))
}

fn put_str(w: &mut impl Write, s: &str) -> io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_u8(r: &mut impl Read) -> io::Result<u8> {
    Ok(get::<1>(r)?[0])
}

fn get_u32(r: &mut impl Read) -> io::Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_f64s<const N: usize>(r: &mut impl Read) -> io::Result<[f64; N]> {
    let mut out = [0.0; N];
    for v in &mut out {
        *v = f64::from_le_bytes(get(r)?);
    }
    Ok(out)
}

/// Reads a length-prefixed blob, refusing lengths beyond `limit`.
fn get_bytes(r: &mut impl Read, limit: usize) -> Result<Vec<u8>, DatasetError> {
    let n = get_u32(r)? as usize;
    if n > limit {
        return Err(corrupt(format!("length {n} exceeds limit {limit}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_str(r: &mut impl Read) -> Result<String, DatasetError> {
    String::from_utf8(get_bytes(r, 1 << 20)?).map_err(|_| corrupt("string is not UTF-8"))
}

fn encode_png(rgb: &[u8], w: u32, h: u32) -> Result<Vec<u8>, DatasetError> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(rgb, w, h, ExtendedColorType::Rgb8).map_err(|e| DatasetError::Io(io::Error::other(e)))?;
    Ok(out)
}

fn write_frame(w: &mut impl Write, f: &RgbdFrame) -> Result<(), DatasetError> {
    let k = &f.intrinsics;
    put_str(w, &f.name)?;
    put_f64s(w, &[k.fx, k.fy, k.cx, k.cy])?;
    put_u32(w, k.width)?;
    put_u32(w, k.height)?;
    put_f64s(w, &f.extrinsics.wxyz())?;
    put_f64s(w, f.extrinsics.translation.as_slice())?;
    let png = encode_png(&f.rgb, k.width, k.height)?;
    put_u32(w, png.len() as u32)?;
    w.write_all(&png)?;
    for d in &f.depth {
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn read_frame(r: &mut impl Read) -> Result<RgbdFrame, DatasetError> {
    let name = get_str(r)?;
    let [fx, fy, cx, cy] = get_f64s::<4>(r)?;
    let (width, height) = (get_u32(r)?, get_u32(r)?);
    let intrinsics = CameraIntrinsics::new(fx, fy, cx, cy, width, height).map_err(|e| corrupt(e.to_string()))?;
    let q = get_f64s::<4>(r)?;
    let t = get_f64s::<3>(r)?;
    // Stored quaternions are already unit; rebuild without renormalizing so
    // the round trip is bit-exact.
    let rotation = UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3]));
    let extrinsics = RigidTransform::new(rotation, Vec3::from(t));
    let png = get_bytes(r, 64 << 20)?;
    let rgb = image::load_from_memory_with_format(&png, ImageFormat::Png).map_err(|e| corrupt(format!("png: {e}")))?.to_rgb8();
    if rgb.dimensions() != (width, height) {
        return Err(corrupt("png size disagrees with intrinsics"));
    }
    let n = intrinsics.pixel_count();
    let mut raw = vec![0u8; 4 * n];
    r.read_exact(&mut raw)?;
    let depth = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    RgbdFrame::new(name, rgb.into_raw(), depth, intrinsics, extrinsics).map_err(|e| corrupt(e.to_string()))
}

fn write_demo(w: &mut impl Write, demo: &Demonstration) -> Result<(), DatasetError> {
    put_str(w, &demo.trajectory.instruction)?;
    put_str(w, &demo.task_name)?;
    put_str(w, &demo.variation)?;
    put_u64(w, demo.seed)?;
    put_u32(w, demo.trajectory.steps.len() as u32)?;
    for s in &demo.trajectory.steps {
        put_u32(w, s.frames.len() as u32)?;
        for f in &s.frames {
            write_frame(w, f)?;
        }
        put_f64s(w, &s.action.to_floats())?;
        w.write_all(&[s.action.gripper_open as u8 | (s.action.collision_allowed as u8) << 1])?;
        put_f64s(w, &[s.joint_velocity_norm])?;
        w.write_all(&[s.gripper_open as u8])?;
    }
    Ok(())
}

fn read_demo(r: &mut impl Read) -> Result<Demonstration, DatasetError> {
    let instruction = get_str(r)?;
    let task_name = get_str(r)?;
    let variation = get_str(r)?;
    let seed = get_u64(r)?;
    let n = get_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(corrupt(format!("implausible step count {n}")));
    }
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let nf = get_u32(r)? as usize;
        if nf != 0 && nf != 4 {
            return Err(corrupt(format!("step has {nf} frames")));
        }
        let frames = (0..nf).map(|_| read_frame(r)).collect::<Result<Vec<_>, _>>()?;
        let floats = get_f64s::<7>(r)?;
        let bits = get_u8(r)?;
        if bits > 3 {
            return Err(corrupt(format!("bad action bits {bits}")));
        }
        let [q0, q1, q2, q3] = [floats[3], floats[4], floats[5], floats[6]];
        let action = ActionVector {
            position: Vec3::new(floats[0], floats[1], floats[2]),
            rotation: UnitQuaternion::new_unchecked(Quaternion::new(q0, q1, q2, q3)),
            gripper_open: bits & 1 == 1,
            collision_allowed: bits & 2 == 2,
        };
        let [joint_velocity_norm] = get_f64s::<1>(r)?;
        let gripper_open = match get_u8(r)? {
            0 => false,
            1 => true,
            b => return Err(corrupt(format!("bad gripper byte {b}"))),
        };
        steps.push(Step { frames, action, joint_velocity_norm, gripper_open });
    }
    let trajectory = Trajectory::new(steps, instruction).map_err(|e| corrupt(e.to_string()))?;
    Ok(Demonstration { trajectory, task_name, variation, seed })
}

/// Streaming writer: demos are appended one at a time and the index table is
/// filled in by [`DatasetWriter::finish`].
pub struct DatasetWriter {
    out: BufWriter<File>,
    offsets: Vec<u64>,
    count: u32,
    pos: u64,
}

impl DatasetWriter {
    pub fn create(path: &Path, count: u32) -> Result<Self, DatasetError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(DATASET_MAGIC)?;
        put_u32(&mut out, DATASET_VERSION)?;
        put_u32(&mut out, count)?;
        for _ in 0..count {
            put_u64(&mut out, 0)?;
        }
        Ok(Self { out, offsets: vec![], count, pos: HEADER_LEN + 8 * count as u64 })
    }

    pub fn append(&mut self, demo: &Demonstration) -> Result<(), DatasetError> {
        if self.offsets.len() == self.count as usize {
            return Err(DatasetError::OutOfRange { index: self.offsets.len(), count: self.count as usize });
        }
        let mut block = Vec::new();
        write_demo(&mut block, demo)?;
        self.offsets.push(self.pos);
        self.out.write_all(&block)?;
        self.pos += block.len() as u64;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), DatasetError> {
        if self.offsets.len() != self.count as usize {
            return Err(corrupt(format!("declared {} demos but wrote {}", self.count, self.offsets.len())));
        }
        self.out.seek(SeekFrom::Start(HEADER_LEN))?;
        for o in &self.offsets {
            put_u64(&mut self.out, *o)?;
        }
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_dataset(path: &Path, demos: &[Demonstration]) -> Result<(), DatasetError> {
    let mut w = DatasetWriter::create(path, demos.len() as u32)?;
    for d in demos {
        w.append(d)?;
    }
    w.finish()
}

/// Random-access reader over a dataset file.
pub struct DatasetReader {
    file: BufReader<File>,
    offsets: Vec<u64>,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let file = File::open(path)?;
        let len = file.metadata()?.len();
        let mut file = BufReader::new(file);
        let magic: [u8; 4] = get(&mut file)?;
        if &magic != DATASET_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = get_u32(&mut file)?;
        if version != DATASET_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = get_u32(&mut file)? as u64;
        let body = HEADER_LEN + 8 * count;
        if body > len {
            return Err(corrupt("index table extends past end of file"));
        }
        let mut offsets = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let o = get_u64(&mut file)?;
            if o < body || o >= len || offsets.last().is_some_and(|&p| o <= p) {
                return Err(corrupt(format!("bad demo offset {o}")));
            }
            offsets.push(o);
        }
        Ok(Self { file, offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn read(&mut self, index: usize) -> Result<Demonstration, DatasetError> {
        let o = *self.offsets.get(index).ok_or(DatasetError::OutOfRange { index, count: self.len() })?;
        self.file.seek(SeekFrom::Start(o))?;
        read_demo(&mut self.file)
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<Demonstration>, DatasetError> {
    let mut r = DatasetReader::open(path)?;
    (0..r.len()).map(|i| r.read(i)).collect()
}
