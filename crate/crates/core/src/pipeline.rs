//! Tracking and mapping as two threads joined by a bounded packet queue.
//!
//! The mapper publishes a map snapshot after every keyframe. The tracker at
//! frame `n` reads the snapshot that contains exactly the keyframes up to
//! `n - 11`, waiting for it if needed, so results do not depend on thread
//! timing.

use std::collections::BTreeMap;
use std::sync::mpsc::sync_channel;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::io_eval::Dataset;
use crate::mapper::{KeyframePacket, Mapper, MapperConfig};
use crate::scene_model::{FusedMask, GaussianMap, SE3Pose};
use crate::tracker::{TrackReference, Tracker, TrackerConfig, TrackingLossTerms, KEYFRAME_INTERVAL};

/// Frames between a keyframe and the first tracking step that may read it.
pub const SNAPSHOT_LAG: usize = KEYFRAME_INTERVAL + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub tracker: TrackerConfig,
    pub mapper: MapperConfig,
    pub queue_capacity: usize,
    /// Feed the dataset's motion segmentation to the tracker as the flow cue.
    pub use_ingested_masks: bool,
    /// Extra optimization steps over all keyframes once tracking is done.
    pub final_refine_iters: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tracker: TrackerConfig::default(),
            mapper: MapperConfig::default(),
            queue_capacity: 4,
            use_ingested_masks: true,
            final_refine_iters: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_config(cfg: &crate::io_eval::Config) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            tracker: cfg.tracker_config()?,
            mapper: cfg.mapper_config()?,
            queue_capacity: cfg.queue_capacity,
            use_ingested_masks: cfg.use_ingested_masks,
            final_refine_iters: cfg.final_refine_iters,
        })
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    /// `(index, timestamp, world-to-camera pose)` per frame after bundle
    /// adjustment.
    pub trajectory: Vec<(usize, f64, SE3Pose)>,
    /// Poses as first reported by the tracker.
    pub tracked: Vec<(usize, f64, SE3Pose)>,
    /// Fused dynamic mask per frame; the last frame has none.
    pub masks: Vec<Option<FusedMask>>,
    pub keyframes: Vec<usize>,
    pub map: GaussianMap,
    pub losses: Vec<TrackingLossTerms>,
    /// Monocular depth scale per frame; the first frame defines 1.
    pub scales: Vec<f64>,
    pub ba_runs: usize,
    /// Every bundle adjustment ended at or below its starting cost.
    pub ba_monotone: bool,
    pub scale_reused: usize,
    pub total_s: f64,
    pub tracking_s: f64,
    pub mapping_s: f64,
}

#[derive(Default)]
struct BoardState {
    snapshots: BTreeMap<usize, Arc<GaussianMap>>,
    failed: bool,
}

#[derive(Default)]
struct SnapshotBoard {
    state: Mutex<BoardState>,
    ready: Condvar,
}

impl SnapshotBoard {
    fn publish(&self, keyframe: usize, map: GaussianMap) {
        let mut s = self.state.lock().expect("board lock");
        s.snapshots.insert(keyframe, Arc::new(map));
        self.ready.notify_all();
    }

    fn fail(&self) {
        self.state.lock().expect("board lock").failed = true;
        self.ready.notify_all();
    }

    /// Blocks until the snapshot ending at `keyframe` exists and drops older
    /// ones. `None` if the mapper failed.
    fn wait_for(&self, keyframe: usize) -> Option<Arc<GaussianMap>> {
        let mut s = self.state.lock().expect("board lock");
        loop {
            if let Some(m) = s.snapshots.get(&keyframe).cloned() {
                s.snapshots = s.snapshots.split_off(&keyframe);
                return Some(m);
            }
            if s.failed {
                return None;
            }
            s = self.ready.wait(s).expect("board lock");
        }
    }
}

/// Newest keyframe the tracker may see when processing frame `n`.
pub fn visible_keyframe(n: usize) -> Option<usize> {
    let limit = n.checked_sub(SNAPSHOT_LAG)?;
    Some(limit - limit % KEYFRAME_INTERVAL)
}

/// Runs tracking and mapping over a dataset. `references` supplies per-pair
/// ground truth (index `n - 1` for the pair ending at frame `n`) for the
/// tracking losses; `on_pose` sees every pose as soon as it is tracked.
pub fn run_pipeline(
    ds: &Dataset,
    cfg: &PipelineConfig,
    references: Option<&[TrackReference]>,
    mut on_pose: impl FnMut(usize, f64, &SE3Pose) -> Result<()>,
) -> Result<PipelineOutput> {
    if ds.len() < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 frames, got {}", ds.len())));
    }
    if cfg.queue_capacity == 0 {
        return Err(Error::Config("queue capacity must be positive".into()));
    }
    let k = ds.intrinsics;
    let start = Instant::now();
    let mut tracker = Tracker::new(k, cfg.tracker.clone())?;
    let mapper = Mapper::new(k, cfg.mapper.clone())?;
    let board = SnapshotBoard::default();
    let (tx, rx) = sync_channel::<KeyframePacket>(cfg.queue_capacity);

    std::thread::scope(|scope| {
        let board = &board;
        let mapping = scope.spawn(move || -> Result<(Mapper, f64)> {
            let mut mapper = mapper;
            let mut busy = 0.0;
            for pkt in rx {
                let index = pkt.frame.index;
                let t0 = Instant::now();
                if let Err(e) = mapper.integrate(pkt) {
                    board.fail();
                    return Err(e);
                }
                busy += t0.elapsed().as_secs_f64();
                board.publish(index, mapper.map().clone());
            }
            Ok((mapper, busy))
        });

        let tracked = (|| -> Result<_> {
            let mut tracking_s = 0.0;
            let mut masks: Vec<Option<FusedMask>> = vec![None; ds.len()];
            let mut tracked = Vec::with_capacity(ds.len());
            let mut keyframes = Vec::new();
            let mut losses = Vec::new();
            let mut scales = Vec::with_capacity(ds.len());
            let (mut ba_runs, mut ba_monotone, mut scale_reused) = (0, true, 0);
            for (n, frame) in ds.frames.iter().enumerate() {
                let snapshot = match visible_keyframe(n) {
                    Some(kf) => Some(board.wait_for(kf).ok_or_else(|| {
                        Error::Precondition("mapper stopped before publishing a snapshot".into())
                    })?),
                    None => None,
                };
                let ingested = if cfg.use_ingested_masks {
                    ds.masks.as_ref().map(|m| m[n].clone())
                } else {
                    None
                };
                let reference = references.and_then(|r| n.checked_sub(1).and_then(|i| r.get(i)));
                let t0 = Instant::now();
                let step = tracker.process(frame.clone(), ingested, snapshot.as_deref(), reference)?;
                tracking_s += t0.elapsed().as_secs_f64();
                let pose = step.as_ref().map_or_else(SE3Pose::identity, |s| s.pose);
                on_pose(n, frame.timestamp, &pose)?;
                tracked.push((n, frame.timestamp, pose));
                scales.push(step.as_ref().map_or(1.0, |s| s.scale.value()));
                if let Some(step) = step {
                    masks[n - 1] = Some(step.prev_mask);
                    if let Some(ba) = &step.ba {
                        ba_runs += 1;
                        ba_monotone &= ba.cost_after <= ba.cost_before;
                    }
                    scale_reused += usize::from(step.scale_reused);
                    losses.extend(step.losses);
                    if let Some(pkt) = step.packet {
                        keyframes.push(pkt.frame.index);
                        if tx.send(pkt).is_err() {
                            break;
                        }
                    }
                }
            }
            if let Some(pkt) = tracker.finish() {
                keyframes.push(pkt.frame.index);
                let _ = tx.send(pkt);
            }
            Ok((tracking_s, masks, tracked, keyframes, losses, scales, ba_runs, ba_monotone, scale_reused))
        })();
        drop(tx);
        let mapped = mapping.join().expect("mapper thread panicked");
        let (mut mapper, mut mapping_s) = mapped?;
        let (tracking_s, masks, tracked, keyframes, losses, scales, ba_runs, ba_monotone, scale_reused) = tracked?;
        if cfg.final_refine_iters > 0 {
            let t0 = Instant::now();
            mapper.refine(cfg.final_refine_iters)?;
            mapping_s += t0.elapsed().as_secs_f64();
        }
        Ok(PipelineOutput {
            trajectory: tracker.trajectory().to_vec(),
            tracked,
            masks,
            keyframes,
            map: mapper.into_map(),
            losses,
            scales,
            ba_runs,
            ba_monotone,
            scale_reused,
            total_s: start.elapsed().as_secs_f64(),
            tracking_s,
            mapping_s,
        })
    })
}
