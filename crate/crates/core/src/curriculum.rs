//! Per-robot terrain levels with promotion and demotion at episode end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of one episode for the curriculum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelChange {
    Promoted,
    Demoted,
    Unchanged,
}

/// Promotion is checked first, so it wins when both rules fire.
pub fn level_change(traversed: f64, segment_length: f64, v_cmd: f64, episode_length: f64) -> LevelChange {
    if traversed > segment_length / 2.0 {
        LevelChange::Promoted
    } else if traversed < v_cmd * episode_length / 2.0 {
        LevelChange::Demoted
    } else {
        LevelChange::Unchanged
    }
}

pub fn update_level(
    level: usize,
    max_level: usize,
    traversed: f64,
    segment_length: f64,
    v_cmd: f64,
    episode_length: f64,
) -> usize {
    match level_change(traversed, segment_length, v_cmd, episode_length) {
        LevelChange::Promoted => (level + 1).min(max_level),
        LevelChange::Demoted => level.saturating_sub(1),
        LevelChange::Unchanged => level.min(max_level),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub levels: Vec<usize>,
    pub max_level: usize,
    pub promotions: u64,
    pub demotions: u64,
}

impl CurriculumState {
    /// Every robot starts on the easiest level.
    pub fn new(robots: usize, max_level: usize) -> Self {
        Self { levels: vec![0; robots], max_level, promotions: 0, demotions: 0 }
    }

    pub fn level(&self, robot: usize) -> usize {
        self.levels[robot]
    }

    /// Applies one episode result for `robot` and returns its new level.
    pub fn record_episode(
        &mut self,
        robot: usize,
        traversed: f64,
        segment_length: f64,
        v_cmd: f64,
        episode_length: f64,
    ) -> Result<usize> {
        if !(segment_length > 0.0) || !(episode_length > 0.0) {
            return Err(Error::contract("segment length and episode length must be positive"));
        }
        let old = *self
            .levels
            .get(robot)
            .ok_or_else(|| Error::contract(format!("robot {robot} out of range")))?;
        let new = update_level(old, self.max_level, traversed, segment_length, v_cmd, episode_length);
        if new > old {
            self.promotions += 1;
        } else if new < old {
            self.demotions += 1;
        }
        self.levels[robot] = new;
        Ok(new)
    }

    /// Level the robot spawns on at its next reset.
    pub fn assign_spawn(&self, robot: usize) -> usize {
        self.levels.get(robot).copied().unwrap_or(0)
    }

    pub fn mean_level(&self) -> f64 {
        if self.levels.is_empty() {
            return 0.0;
        }
        self.levels.iter().sum::<usize>() as f64 / self.levels.len() as f64
    }

    /// Robot counts per level, index 0 through `max_level`.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.max_level + 1];
        for &l in &self.levels {
            h[l] += 1;
        }
        h
    }
}
