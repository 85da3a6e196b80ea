//! Motion files: one UTF-8 header line, then `N * F` little-endian `f32`.
//!
//! ```text
//! MOTN v1 J=<J> N=<N> action=<id|-> style=<id|-> prompt=<base64>\n
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;

use super::{FeatureLayout, LabeledClip, MotionSequence};
use crate::error::{Error, Result};

pub const MOTION_EXTENSION: &str = "motn";

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

pub fn encode_motion(clip: &LabeledClip) -> Vec<u8> {
    let m = &clip.motion;
    let header = format!(
        "MOTN v1 J={} N={} action={} style={} prompt={}\n",
        m.joints(),
        m.frames(),
        opt(clip.action_id),
        opt(clip.style_id),
        STANDARD.encode(clip.prompt.as_bytes())
    );
    let mut out = header.into_bytes();
    out.reserve(4 * m.data().len());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_motion(buf: &[u8], path: &Path) -> Result<LabeledClip> {
    let bad = |reason: &str| Error::format(path, reason);
    let nl = buf.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
    let header = std::str::from_utf8(&buf[..nl]).map_err(|_| bad("header is not UTF-8"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 7 || fields[0] != "MOTN" || fields[1] != "v1" {
        return Err(bad("expected `MOTN v1 J= N= action= style= prompt=` header"));
    }
    let value = |i: usize, key: &str| -> Result<&str> {
        fields[i]
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| bad(&format!("expected field `{key}=`")))
    };
    let int = |i: usize, key: &str| -> Result<usize> {
        value(i, key)?
            .parse()
            .map_err(|_| bad(&format!("`{key}` is not a non-negative integer")))
    };
    let opt_int = |i: usize, key: &str| -> Result<Option<usize>> {
        match value(i, key)? {
            "-" => Ok(None),
            _ => int(i, key).map(Some),
        }
    };
    let joints = int(2, "J")?;
    let frames = int(3, "N")?;
    let action_id = opt_int(4, "action")?;
    let style_id = opt_int(5, "style")?;
    let prompt_bytes = STANDARD
        .decode(value(6, "prompt")?)
        .map_err(|_| bad("prompt is not valid base64"))?;
    let prompt = String::from_utf8(prompt_bytes).map_err(|_| bad("prompt is not UTF-8"))?;

    let layout = FeatureLayout::new(joints)?;
    let payload = &buf[nl + 1..];
    if !payload.len().is_multiple_of(4) || payload.len() / 4 != frames * layout.dim() {
        return Err(Error::Layout(format!(
            "{}: payload of {} bytes does not hold {frames} frames of F = 12*{joints} - 1 = {}",
            path.display(),
            payload.len(),
            layout.dim()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("payload contains non-finite values"));
    }
    let motion = MotionSequence::new(layout, data).map_err(|e| bad(&e.to_string()))?;
    LabeledClip::new(motion, action_id, style_id, prompt).map_err(|e| bad(&e.to_string()))
}

pub fn write_motion(clip: &LabeledClip, path: &Path) -> Result<()> {
    fs::write(path, encode_motion(clip))?;
    Ok(())
}

pub fn read_motion(path: &Path) -> Result<LabeledClip> {
    decode_motion(&fs::read(path)?, path)
}

/// Writes `clips` as `clip_00000.motn`, `clip_00001.motn`, ... into `dir`.
pub fn write_motion_dir(dir: &Path, clips: &[LabeledClip]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let p = dir.join(format!("clip_{i:05}.{MOTION_EXTENSION}"));
            write_motion(c, &p).map(|_| p)
        })
        .collect()
}

/// Reads every motion file in `dir`, in file-name order.
pub fn read_motion_dir(dir: &Path) -> Result<Vec<LabeledClip>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(format!("motion directory {} not found", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == MOTION_EXTENSION))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_motion(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::toy::generate_cell;

    fn clip() -> LabeledClip {
        generate_cell(5, 16, 3, Some(2), 1, 1).unwrap().remove(0)
    }

    #[test]
    fn round_trip_is_exact() {
        let c = clip();
        let bytes = encode_motion(&c);
        assert!(bytes.starts_with(b"MOTN v1 J=5 N=16 action=3 style=2 prompt="));
        let back = decode_motion(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_motion(&back), bytes);
    }

    #[test]
    fn wrong_width_is_a_layout_error() {
        let mut bytes = encode_motion(&clip());
        // declare J=4 while the payload holds 59-wide frames
        let at = bytes.windows(3).position(|w| w == b"J=5").unwrap();
        bytes[at + 2] = b'4';
        assert!(matches!(decode_motion(&bytes, Path::new("mem")), Err(Error::Layout(_))));
    }

    #[test]
    fn nan_and_garbage_rejected() {
        let c = clip();
        let mut bytes = encode_motion(&c);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_motion(&bytes, Path::new("mem")).is_err());
        assert!(decode_motion(b"MOTN v2 J=5\n", Path::new("mem")).is_err());
        assert!(decode_motion(b"no newline", Path::new("mem")).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clips = generate_cell(5, 16, 0, None, 3, 2).unwrap();
        write_motion_dir(dir.path(), &clips).unwrap();
        assert_eq!(read_motion_dir(dir.path()).unwrap(), clips);
        assert!(matches!(read_motion_dir(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
    }
}
