use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::scene_model::SE3Pose;

const QUAT_NORM_TOL: f64 = 1e-3;

/// One TUM line. The pose maps camera coordinates to world coordinates. The
/// quaternion is kept exactly as read so that rewriting a file reproduces it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    pub rotation: Quaternion<f64>,
}

impl TrajectoryEntry {
    pub fn from_camera_to_world(timestamp: f64, pose: &SE3Pose) -> Self {
        Self {
            timestamp,
            translation: pose.translation,
            rotation: pose.quaternion().into_inner(),
        }
    }

    pub fn from_world_to_camera(timestamp: f64, pose: &SE3Pose) -> Self {
        Self::from_camera_to_world(timestamp, &pose.inverse())
    }

    pub fn camera_to_world(&self) -> SE3Pose {
        SE3Pose::from_quaternion(&(self.rotation / self.rotation.norm()), self.translation)
    }

    pub fn world_to_camera(&self) -> SE3Pose {
        self.camera_to_world().inverse()
    }

    fn format(&self) -> String {
        let (t, q) = (&self.translation, &self.rotation);
        let mut s = String::with_capacity(8 * 24);
        for v in [self.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w] {
            if !s.is_empty() {
                s.push(' ');
            }
            write!(s, "{v:.16e}").unwrap();
        }
        s
    }
}

/// Timestamped poses with strictly increasing timestamps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<TrajectoryEntry>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<TrajectoryEntry>) -> Result<Self> {
        let mut t = Self::new();
        for e in entries {
            t.push(e)?;
        }
        Ok(t)
    }

    /// Builds a trajectory from world-to-camera poses.
    pub fn from_world_to_camera<'a>(poses: impl IntoIterator<Item = (f64, &'a SE3Pose)>) -> Result<Self> {
        Self::from_entries(
            poses
                .into_iter()
                .map(|(t, p)| TrajectoryEntry::from_world_to_camera(t, p))
                .collect(),
        )
    }

    pub fn push(&mut self, e: TrajectoryEntry) -> Result<()> {
        if !e.timestamp.is_finite() {
            return Err(Error::Format(format!("non-finite timestamp {}", e.timestamp)));
        }
        if let Some(last) = self.entries.last() {
            if e.timestamp <= last.timestamp {
                return Err(Error::Format(format!(
                    "timestamp {} does not follow {}",
                    e.timestamp, last.timestamp
                )));
            }
        }
        self.entries.push(e);
        Ok(())
    }

    pub fn entries(&self) -> &[TrajectoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keep the entries whose timestamp satisfies `keep`.
    pub fn filter(&self, mut keep: impl FnMut(f64) -> bool) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| keep(e.timestamp)).copied().collect(),
        }
    }

    /// Diagonal of the axis-aligned box holding every camera position.
    pub fn extent(&self) -> f64 {
        let Some(first) = self.entries.first() else {
            return 0.0;
        };
        let (lo, hi) = self.entries.iter().fold((first.translation, first.translation), |(lo, hi), e| {
            (lo.inf(&e.translation), hi.sup(&e.translation))
        });
        (hi - lo).norm()
    }

    /// Length of the camera path.
    pub fn path_length(&self) -> f64 {
        self.entries
            .windows(2)
            .map(|w| (w[1].translation - w[0].translation).norm())
            .sum()
    }
}

pub fn trajectory_to_string(t: &Trajectory) -> String {
    let mut s = String::new();
    for e in t.entries() {
        s.push_str(&e.format());
        s.push('\n');
    }
    s
}

pub fn parse_trajectory(text: &str) -> Result<Trajectory> {
    let mut traj = Trajectory::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: line_no, msg };
        let vals = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("{f:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != 8 {
            return Err(parse_err(format!("expected 8 fields, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite value".into()));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if (q.norm() - 1.0).abs() > QUAT_NORM_TOL {
            return Err(parse_err(format!("quaternion norm {} is not 1", q.norm())));
        }
        traj.push(TrajectoryEntry {
            timestamp: vals[0],
            translation: Vector3::new(vals[1], vals[2], vals[3]),
            rotation: q,
        })
        .map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("line {line_no}: {m}")),
            other => other,
        })?;
    }
    Ok(traj)
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    parse_trajectory(&std::fs::read_to_string(path)?)
}

pub fn write_trajectory(path: impl AsRef<Path>, t: &Trajectory) -> Result<()> {
    std::fs::write(path, trajectory_to_string(t))?;
    Ok(())
}

/// Appends one line per pose as frames are processed.
pub struct TrajectoryWriter {
    out: BufWriter<File>,
    last: Option<f64>,
}

impl TrajectoryWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(f),
            last: None,
        })
    }

    pub fn append(&mut self, e: &TrajectoryEntry) -> Result<()> {
        if self.last.is_some_and(|t| e.timestamp <= t) {
            return Err(Error::Format(format!("timestamp {} out of order", e.timestamp)));
        }
        self.last = Some(e.timestamp);
        writeln!(self.out, "{}", e.format())?;
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_line() {
        let t = parse_trajectory("0.0 0 0 0 0 0 0 1\n").unwrap();
        assert_eq!(t.len(), 1);
        let p = t.entries()[0].camera_to_world();
        assert!(p.max_abs_diff(&SE3Pose::identity()) < 1e-15);
        assert_eq!(t.entries()[0].timestamp, 0.0);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let t = parse_trajectory("# timestamp tx ty tz qx qy qz qw\n\n1 0 0 0 0 0 0 1\n").unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn rejects_bad_quaternion_with_line_number() {
        let e = parse_trajectory("# c\n0 0 0 0 0 0 0 0.5\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(parse_trajectory("0 0 0 0 0 0 0 1.0009\n").is_ok());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(parse_trajectory("0 0 0 0 0 0 1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_trajectory("0 0 0 x 0 0 0 1\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_trajectory("0 0 0 nan 0 0 0 1\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn rejects_non_monotonic_timestamps() {
        let e = parse_trajectory("1 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n").unwrap_err();
        assert!(matches!(e, Error::Format(_)));
        assert!(parse_trajectory("2 0 0 0 0 0 0 1\n1 0 0 0 0 0 0 1\n").is_err());
    }

    #[test]
    fn extent_is_the_box_diagonal() {
        let mut t = Trajectory::new();
        assert_eq!(t.extent(), 0.0);
        for (i, p) in [[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 4.0, 0.0], [1.0, 1.0, 0.0]].iter().enumerate() {
            t.push(TrajectoryEntry::from_camera_to_world(
                i as f64,
                &SE3Pose::from_translation(Vector3::new(p[0], p[1], p[2])),
            ))
            .unwrap();
        }
        assert!((t.extent() - 5.0).abs() < 1e-15);
        assert!((t.path_length() - (3.0 + 5.0 + 10f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn world_to_camera_conversion() {
        let p = SE3Pose::rot_z(0.3).compose(&SE3Pose::from_translation(Vector3::new(1.0, 2.0, 3.0)));
        let e = TrajectoryEntry::from_world_to_camera(0.0, &p);
        assert!(e.world_to_camera().max_abs_diff(&p) < 1e-12);
        assert!((e.translation - p.center()).norm() < 1e-12);
    }

    #[test]
    fn appending_writer_matches_batch_writer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        let mut w = TrajectoryWriter::create(&path).unwrap();
        let mut t = Trajectory::new();
        for i in 0..5 {
            let e = TrajectoryEntry::from_world_to_camera(i as f64 * 0.1, &SE3Pose::rot_z(i as f64));
            w.append(&e).unwrap();
            t.push(e).unwrap();
        }
        assert!(w.append(&t.entries()[0]).is_err());
        drop(w);
        assert_eq!(std::fs::read_to_string(&path).unwrap(), trajectory_to_string(&t));
    }

    proptest! {
        #[test]
        fn canonical_files_are_byte_stable(
            seeds in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0, -3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 100)
        ) {
            let mut t = Trajectory::new();
            for (i, (x, y, z, a, b, c)) in seeds.into_iter().enumerate() {
                let pose = SE3Pose::exp(&nalgebra::Vector6::new(x, y, z, a, b, c));
                t.push(TrajectoryEntry::from_camera_to_world(i as f64 / 30.0, &pose)).unwrap();
            }
            let first = trajectory_to_string(&t);
            let back = parse_trajectory(&first).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(trajectory_to_string(&back), first);
        }
    }
}
