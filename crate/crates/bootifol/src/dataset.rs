//! Trajectory dataset files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//!  0      8     magic "BIFODATA"
//!  8      4     version (1)
//! 12      4     environment code (0 point_reach, 1 point_push)
//! 16      4     N, trajectories
//! 20      4     T, steps per trajectory (T + 1 frames)
//! 24      4     H
//! 28      4     W
//! 32      8     seed
//! 40      4     policy label (0 expert, 1 random, 2 agent)
//! 44      4     flags: bit 0 action block, bit 1 return block
//! 48            N * (T + 1) frames of 3 * H * W bytes, planar RGB
//!               action block: N * T * 2 f32
//!               return block: N f64
//! ```

use std::path::Path;

use bootifol_core::config::EnvId;
use bootifol_core::env::{Dataset, Label, Trajectory};
use bootifol_core::vision::Frame;

use crate::checkpoint::Reader;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BIFODATA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 48;
const HAS_ACTIONS: u32 = 1;
const HAS_RETURNS: u32 = 2;

/// Size of the file [`to_bytes`] writes.
pub fn encoded_len(n: usize, t: usize, h: usize, w: usize, actions: bool, returns: bool) -> usize {
    HEADER_LEN + n * (t + 1) * 3 * h * w + if actions { n * t * 8 } else { 0 } + if returns { n * 8 } else { 0 }
}

pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let t = ds.episode_len;
    let size = ds.frame_size;
    let actions = ds.trajectories.iter().all(|tr| tr.actions.is_some());
    for tr in &ds.trajectories {
        if tr.frames.len() != t + 1 || tr.frames.iter().any(|f| f.height != size || f.width != size) {
            return Err(Error::Usage(format!(
                "every trajectory needs {} frames of {size}x{size}",
                t + 1
            )));
        }
        if actions && tr.actions.as_ref().is_some_and(|a| a.len() != t) {
            return Err(Error::Usage(format!("every trajectory needs {t} actions")));
        }
    }
    let n = ds.trajectories.len();
    let flags = HAS_RETURNS | if actions { HAS_ACTIONS } else { 0 };
    let mut out = Vec::with_capacity(encoded_len(n, t, size, size, actions, true));
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        ds.env.code(),
        n as u32,
        t as u32,
        size as u32,
        size as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&ds.seed.to_le_bytes());
    out.extend_from_slice(&ds.policy.code().to_le_bytes());
    out.extend_from_slice(&flags.to_le_bytes());
    for tr in &ds.trajectories {
        tr.frames.iter().for_each(|f| out.extend_from_slice(&f.rgb));
    }
    if actions {
        for tr in &ds.trajectories {
            for a in tr.actions.as_ref().expect("checked above") {
                out.extend_from_slice(&a[0].to_le_bytes());
                out.extend_from_slice(&a[1].to_le_bytes());
            }
        }
    }
    for tr in &ds.trajectories {
        out.extend_from_slice(&tr.true_return.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let bad = |why: String| Error::format(path, why);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("not a dataset file".into()));
    }
    let mut field = || r.u32().ok_or_else(|| bad("truncated header".into()));
    let version = field()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let env = EnvId::from_code(field()?)?;
    let n = field()? as usize;
    let t = field()? as usize;
    let h = field()? as usize;
    let w = field()? as usize;
    let seed = r.u64().ok_or_else(|| bad("truncated header".into()))?;
    let policy = Label::from_code(r.u32().ok_or_else(|| bad("truncated header".into()))?)?;
    let flags = r.u32().ok_or_else(|| bad("truncated header".into()))?;
    if h != w {
        return Err(bad(format!("frames must be square, got {h}x{w}")));
    }
    let (actions, returns) = (flags & HAS_ACTIONS != 0, flags & HAS_RETURNS != 0);
    let expected = encoded_len(n, t, h, w, actions, returns);
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let frame_len = 3 * h * w;
    let mut trajectories = Vec::with_capacity(n);
    for _ in 0..n {
        let frames = (0..=t)
            .map(|_| Frame::new(h, w, r.take(frame_len).expect("length checked").to_vec()))
            .collect::<bootifol_core::Result<Vec<_>>>()?;
        trajectories.push(Trajectory {
            frames,
            actions: None,
            true_return: 0.0,
            label: policy,
        });
    }
    if actions {
        for tr in &mut trajectories {
            let raw = r.take(8 * t).expect("length checked");
            let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            tr.actions = Some(raw.chunks_exact(8).map(|c| [f(&c[..4]), f(&c[4..])]).collect());
        }
    }
    if returns {
        for tr in &mut trajectories {
            let raw = r.take(8).expect("length checked");
            tr.true_return = f64::from_le_bytes(raw.try_into().expect("8 bytes"));
        }
    }
    Ok(Dataset {
        env,
        policy,
        episode_len: t,
        frame_size: h,
        seed,
        trajectories,
    })
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bootifol_core::env::generate_dataset;

    #[test]
    fn round_trip_and_size() {
        let ds = generate_dataset(EnvId::PointPush, Label::Random, 3, 4, 8, 9, 4.0, 2.0).unwrap();
        let bytes = to_bytes(&ds).unwrap();
        assert_eq!(bytes.len(), encoded_len(3, 4, 8, 8, true, true));
        assert_eq!(from_bytes(&bytes, Path::new("x")).unwrap(), ds);
    }

    #[test]
    fn header_fields_sit_at_documented_offsets() {
        let ds = generate_dataset(EnvId::PointReach, Label::Expert, 2, 3, 4, 7, 4.0, 2.0).unwrap();
        let b = to_bytes(&ds).unwrap();
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        assert_eq!(&b[..8], MAGIC);
        assert_eq!((u32_at(12), u32_at(16), u32_at(20), u32_at(24)), (0, 2, 3, 4));
        assert_eq!(u64::from_le_bytes(b[32..40].try_into().unwrap()), 7);
        assert_eq!(u32_at(40), 0);
        assert_eq!(&b[48..48 + 16], &ds.trajectories[0].frames[0].rgb[..16]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let ds = generate_dataset(EnvId::PointReach, Label::Expert, 1, 2, 4, 1, 4.0, 2.0).unwrap();
        let b = to_bytes(&ds).unwrap();
        assert!(from_bytes(&b[..b.len() - 3], Path::new("x")).is_err());
    }
}
