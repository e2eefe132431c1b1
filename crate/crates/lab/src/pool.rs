// SPDX-License-Identifier: MIT OR Apache-2.0

//! Runs (task, seed) jobs as child processes of the `lab` binary, at most
//! `parallel` at a time.

use std::path::Path;
use std::process::{Child, Command, ExitStatus};
use std::thread::sleep;
use std::time::Duration;

use causal_gap::TaskKind;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct JobOutcome {
    pub task: TaskKind,
    pub seed: u64,
    pub success: bool,
}

/// Spawns `exe run-one --experiment <config> --task T --seed S` per job.
pub fn run_pool(exe: &Path, experiment: &Path, jobs: &[(TaskKind, u64)], parallel: usize) -> Result<Vec<JobOutcome>> {
    let mut queue = jobs.iter().copied();
    let mut running: Vec<((TaskKind, u64), Child)> = Vec::new();
    let mut outcomes = Vec::new();
    loop {
        while running.len() < parallel.max(1) {
            let Some((task, seed)) = queue.next() else { break };
            let child = Command::new(exe)
                .arg("run-one")
                .arg("--experiment")
                .arg(experiment)
                .arg("--task")
                .arg(task.to_string())
                .arg("--seed")
                .arg(seed.to_string())
                .spawn()
                .map_err(|e| LabError::io(exe, e))?;
            running.push(((task, seed), child));
        }
        if running.is_empty() {
            break;
        }
        let mut i = 0;
        let mut finished = false;
        while i < running.len() {
            let status: Option<ExitStatus> = running[i].1.try_wait().map_err(|e| LabError::io(exe, e))?;
            if let Some(status) = status {
                let ((task, seed), _) = running.swap_remove(i);
                if !status.success() {
                    eprintln!("[{task} {seed}] worker exited with {status}");
                }
                outcomes.push(JobOutcome {
                    task,
                    seed,
                    success: status.success(),
                });
                finished = true;
            } else {
                i += 1;
            }
        }
        if !finished {
            sleep(Duration::from_millis(200));
        }
    }
    outcomes.sort_by_key(|o| jobs.iter().position(|j| *j == (o.task, o.seed)));
    Ok(outcomes)
}
