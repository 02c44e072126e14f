use std::fs;
use std::io::{Cursor, Read};

use veye_core::dataset::{read_dataset, write_dataset, DatasetError, DatasetReader, HEADER_LEN};
use veye_core::world::{make_demo, Demonstration, Task};

fn demos(n: u64) -> Vec<Demonstration> {
    (0..n).map(|s| make_demo(Task::ALL[s as usize % 3], 100 + s).unwrap()).collect()
}

fn u32_at(c: &mut Cursor<&[u8]>) -> u64 {
    let mut b = [0u8; 4];
    c.read_exact(&mut b).unwrap();
    u32::from_le_bytes(b) as u64
}

fn skip(c: &mut Cursor<&[u8]>, n: u64) {
    c.set_position(c.position() + n);
}

/// Walks the byte layout using only length fields and fixed sizes and returns
/// where each demo block starts.
fn scan_offsets(bytes: &[u8], count: usize) -> Vec<u64> {
    let mut c = Cursor::new(bytes);
    skip(&mut c, HEADER_LEN + 8 * count as u64);
    let mut out = vec![];
    for _ in 0..count {
        out.push(c.position());
        for _ in 0..3 {
            let n = u32_at(&mut c);
            skip(&mut c, n);
        }
        skip(&mut c, 8);
        let steps = u32_at(&mut c);
        for _ in 0..steps {
            let frames = u32_at(&mut c);
            for _ in 0..frames {
                let n = u32_at(&mut c);
                skip(&mut c, n + 4 * 8);
                let (w, h) = (u32_at(&mut c), u32_at(&mut c));
                skip(&mut c, 7 * 8);
                let png = u32_at(&mut c);
                skip(&mut c, png + 4 * w * h);
            }
            skip(&mut c, 7 * 8 + 1 + 8 + 1);
        }
    }
    assert_eq!(c.position(), bytes.len() as u64);
    out
}

#[test]
fn round_trip_is_bit_exact_and_offsets_match_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demos.veds");
    let ds = demos(10);
    write_dataset(&path, &ds).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, ds);
    for (a, b) in back.iter().zip(&ds) {
        for (sa, sb) in a.trajectory.steps.iter().zip(&b.trajectory.steps) {
            assert_eq!(sa.action.to_floats().map(f64::to_bits), sb.action.to_floats().map(f64::to_bits));
            assert_eq!(sa.joint_velocity_norm.to_bits(), sb.joint_velocity_norm.to_bits());
        }
    }
    let bytes = fs::read(&path).unwrap();
    let reader = DatasetReader::open(&path).unwrap();
    assert_eq!(reader.offsets(), scan_offsets(&bytes, 10).as_slice());
}

#[test]
fn truncated_and_mangled_files_are_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("demos.veds");
    write_dataset(&path, &demos(2)).unwrap();
    let bytes = fs::read(&path).unwrap();

    for cut in [3, 10, 20, bytes.len() / 2, bytes.len() - 1] {
        let p = dir.path().join(format!("cut{cut}.veds"));
        fs::write(&p, &bytes[..cut]).unwrap();
        assert!(matches!(read_dataset(&p), Err(DatasetError::Corrupt(_))), "cut at {cut}");
    }

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let p = dir.path().join("magic.veds");
    fs::write(&p, &bad_magic).unwrap();
    assert!(matches!(read_dataset(&p), Err(DatasetError::Corrupt(_))));

    let mut bad_version = bytes.clone();
    bad_version[4] = 2;
    fs::write(&p, &bad_version).unwrap();
    assert!(matches!(read_dataset(&p), Err(DatasetError::Corrupt(_))));
}

#[test]
fn empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.veds");
    write_dataset(&path, &[]).unwrap();
    assert_eq!(fs::read(&path).unwrap().len() as u64, HEADER_LEN);
    assert!(read_dataset(&path).unwrap().is_empty());
}
