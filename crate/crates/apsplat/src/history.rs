//! Appearance-adaptable temporal history: cache static Gaussians' geometry
//! and view features across timesteps, then recompute their colors under the
//! current appearance embedding at recall. Recalled primitives are rigidly
//! transformed from their capture frame into the current frame; the cached
//! view feature and a freshly queried context feature feed the shared color
//! head together with the current embedding.

use std::collections::VecDeque;

use nalgebra::Vector3;
use thiserror::Error;

use crate::appearance::{
    factored_colors, AppearanceEmbedding, AppearanceError, AppearanceModel, ColorPair,
    GaussianFeatures,
};
use crate::geom::RigidTransform;
use crate::splat::GaussianPrimitive;

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("empty history buffer")]
    EmptyBuffer,
    #[error(transparent)]
    Appearance(#[from] AppearanceError),
}

/// One cached primitive: geometry in the capture frame plus the view feature
/// that was current when it was pushed.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub geometry: GaussianPrimitive,
    pub cached_view_feature: Vec<f64>,
    pub timestep: u64,
}

#[derive(Debug, Clone)]
struct HistoryFrame {
    timestep: u64,
    /// Capture frame -> global.
    pose: RigidTransform,
    entries: Vec<HistoryEntry>,
}

/// Bounded FIFO over timesteps; entries stay untransformed alongside their
/// capture pose.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    horizon: usize,
    frames: VecDeque<HistoryFrame>,
}

/// Supplies the fused 3D-context feature for a recalled position.
pub trait ContextProvider {
    fn context(&self, position_current_frame: &Vector3<f64>) -> Vec<f64>;
}

/// Default provider: the context slot is zero-filled.
pub struct ZeroContext(pub usize);

impl ContextProvider for ZeroContext {
    fn context(&self, _position: &Vector3<f64>) -> Vec<f64> {
        vec![0.0; self.0]
    }
}

impl HistoryBuffer {
    pub fn new(horizon: usize) -> Self {
        assert!(horizon >= 1, "horizon must be at least one timestep");
        Self { horizon, frames: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn oldest_timestep(&self) -> Option<u64> {
        self.frames.front().map(|f| f.timestep)
    }

    /// Stores one timestep's Gaussians with their view features; evicts the
    /// oldest frame once the horizon is exceeded.
    pub fn push(
        &mut self,
        gaussians: &[GaussianPrimitive],
        features: &[Vec<f64>],
        pose: RigidTransform,
        timestep: u64,
    ) {
        assert_eq!(gaussians.len(), features.len(), "one feature per gaussian");
        let entries = gaussians
            .iter()
            .zip(features)
            .map(|(g, f)| HistoryEntry {
                geometry: g.clone(),
                cached_view_feature: f.clone(),
                timestep,
            })
            .collect();
        self.frames.push_back(HistoryFrame { timestep, pose, entries });
        while self.frames.len() > self.horizon {
            self.frames.pop_front();
        }
    }

    /// Recalls every cached primitive into the current frame and recomputes
    /// its color pair under `a_now` via the shared point head. Never mutates
    /// the buffer.
    pub fn recall(
        &self,
        current_pose: &RigidTransform,
        context: &dyn ContextProvider,
        a_now: &AppearanceEmbedding,
        model: &AppearanceModel,
    ) -> Result<Vec<(GaussianPrimitive, ColorPair)>, HistoryError> {
        if self.frames.is_empty() {
            return Err(HistoryError::EmptyBuffer);
        }
        let into_current = current_pose.inverse();
        let mut geometry = Vec::new();
        let mut features = Vec::new();
        for frame in &self.frames {
            let rel = into_current.compose(&frame.pose);
            for entry in &frame.entries {
                let g = &entry.geometry;
                geometry.push(GaussianPrimitive {
                    mean: rel.apply(&g.mean),
                    log_scale: g.log_scale,
                    rotation: rel.rotation.mul(&g.rotation).normalized(),
                    opacity_logit: g.opacity_logit,
                    feature_id: g.feature_id,
                });
                features.push(GaussianFeatures {
                    view: entry.cached_view_feature.clone(),
                    context: context.context(&geometry.last().unwrap().mean),
                });
            }
        }
        let (pairs, _) = factored_colors(&features, a_now, &model.head_spec, &model.head)?;
        Ok(geometry.into_iter().zip(pairs).collect())
    }
}
