use std::fs;
use std::path::{Path, PathBuf};

use super::flo::{read_flo, write_flo};
use super::images::{
    expect_dims, read_color_png, read_depth_png, read_mask_png, write_color_png, write_depth_png,
    write_mask_png,
};
use super::tum::{read_trajectory, write_trajectory, Trajectory};
use crate::dyn_sim::SimBundle;
use crate::error::{Error, Result};
use crate::scene_model::{CameraIntrinsics, Frame, MaskImage};

pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const TIMESTAMPS_FILE: &str = "timestamps.txt";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";
const DEFAULT_FPS: f64 = 30.0;

/// A sequence on disk:
///
/// ```text
/// intrinsics.json
/// rgb/000000.png ...      color frames
/// depth/000000.png ...    16-bit monocular depth, meters × 5000
/// flow/000000.flo ...     flow from frame i to i+1
/// mask/000000.png ...     optional motion segmentation, 0 / 255
/// gt_mask/000000.png ...  optional ground-truth dynamic mask
/// groundtruth.txt         optional TUM trajectory (camera to world)
/// timestamps.txt          optional, one timestamp per frame; else index / 30
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    /// Frames with color, depth and flow to the next frame.
    pub frames: Vec<Frame>,
    pub masks: Option<Vec<MaskImage>>,
    pub gt_masks: Option<Vec<MaskImage>>,
    pub groundtruth: Option<Trajectory>,
}

impl Dataset {
    /// The in-memory equivalent of exporting and reloading a simulated
    /// sequence, without depth quantization.
    pub fn from_bundle(bundle: &SimBundle) -> Result<Self> {
        let frames = bundle
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut frame = Frame::new(i, f.timestamp, f.color.clone());
                frame.est_depth = Some(bundle.est_depth[i].clone());
                frame.flow_to_next = bundle.est_flow.get(i).cloned();
                frame
            })
            .collect();
        Ok(Self {
            intrinsics: bundle.intrinsics,
            frames,
            masks: Some(bundle.est_flow_mask.clone()),
            gt_masks: Some(bundle.gt_dyn_mask.clone()),
            groundtruth: Some(bundle.gt_trajectory()?),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn numbered(dir: &Path, sub: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{i:06}.{ext}"))
}

/// Writes the emulated estimates and ground truth of a simulated sequence.
pub fn export_bundle(bundle: &SimBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["rgb", "depth", "flow", "mask", "gt_mask"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    fs::write(dir.join(INTRINSICS_FILE), serde_json::to_string_pretty(&bundle.intrinsics)?)?;
    let mut stamps = String::new();
    for (i, f) in bundle.frames.iter().enumerate() {
        write_color_png(numbered(dir, "rgb", i, "png"), &f.color)?;
        write_depth_png(numbered(dir, "depth", i, "png"), &bundle.est_depth[i])?;
        write_mask_png(numbered(dir, "mask", i, "png"), &bundle.est_flow_mask[i])?;
        write_mask_png(numbered(dir, "gt_mask", i, "png"), &bundle.gt_dyn_mask[i])?;
        if let Some(flow) = bundle.est_flow.get(i) {
            write_flo(numbered(dir, "flow", i, "flo"), flow)?;
        }
        stamps.push_str(&format!("{:.16e}\n", f.timestamp));
    }
    fs::write(dir.join(TIMESTAMPS_FILE), stamps)?;
    write_trajectory(dir.join(GROUNDTRUTH_FILE), &bundle.gt_trajectory()?)?;
    Ok(())
}

fn read_timestamps(path: &Path, n: usize) -> Result<Vec<f64>> {
    if !path.exists() {
        return Ok((0..n).map(|i| i as f64 / DEFAULT_FPS).collect());
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::with_capacity(n);
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let t: f64 = line.parse().map_err(|e| Error::Parse {
            line: i + 1,
            msg: format!("{line:?}: {e}"),
        })?;
        if out.last().is_some_and(|&p| t <= p) {
            return Err(Error::Format(format!("{}: timestamps not increasing at line {}", path.display(), i + 1)));
        }
        out.push(t);
    }
    if out.len() != n {
        return Err(Error::Format(format!("{} timestamps for {n} frames", out.len())));
    }
    Ok(out)
}

fn optional_masks(dir: &Path, sub: &str, n: usize, dims: (usize, usize)) -> Result<Option<Vec<MaskImage>>> {
    if !dir.join(sub).is_dir() {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let path = numbered(dir, sub, i, "png");
        if !path.exists() {
            return Err(Error::Format(format!("missing {}", path.display())));
        }
        let m = read_mask_png(&path)?;
        expect_dims(&path.display().to_string(), dims, &m)?;
        out.push(m);
    }
    Ok(Some(out))
}

/// Reads a dataset directory. Every frame needs color and depth, every frame
/// but the last needs flow; a partial optional directory is an error.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let k_path = dir.join(INTRINSICS_FILE);
    let intrinsics: CameraIntrinsics = serde_json::from_str(&fs::read_to_string(&k_path).map_err(|e| {
        Error::Format(format!("{}: {e}", k_path.display()))
    })?)?;
    intrinsics.validate()?;
    let dims = intrinsics.dims();
    let mut n = 0;
    while numbered(dir, "rgb", n, "png").exists() {
        n += 1;
    }
    if n < 2 {
        return Err(Error::Format(format!("{} holds {n} frames, need at least 2", dir.display())));
    }
    let stamps = read_timestamps(&dir.join(TIMESTAMPS_FILE), n)?;
    let mut frames = Vec::with_capacity(n);
    for (i, &t) in stamps.iter().enumerate() {
        let rgb = numbered(dir, "rgb", i, "png");
        let color = read_color_png(&rgb)?;
        expect_dims(&rgb.display().to_string(), dims, &color)?;
        let mut frame = Frame::new(i, t, color);
        let depth_path = numbered(dir, "depth", i, "png");
        let depth = read_depth_png(&depth_path)
            .map_err(|e| Error::Format(format!("{}: {e}", depth_path.display())))?;
        expect_dims(&depth_path.display().to_string(), dims, &depth)?;
        frame.est_depth = Some(depth);
        if i + 1 < n {
            let flow_path = numbered(dir, "flow", i, "flo");
            let flow = read_flo(&flow_path).map_err(|e| Error::Format(format!("{}: {e}", flow_path.display())))?;
            expect_dims(&flow_path.display().to_string(), dims, &flow)?;
            frame.flow_to_next = Some(flow);
        }
        frames.push(frame);
    }
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    let groundtruth = if gt_path.exists() { Some(read_trajectory(&gt_path)?) } else { None };
    Ok(Dataset {
        intrinsics,
        masks: optional_masks(dir, "mask", n, dims)?,
        gt_masks: optional_masks(dir, "gt_mask", n, dims)?,
        frames,
        groundtruth,
    })
}
