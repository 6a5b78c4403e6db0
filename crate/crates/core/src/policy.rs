//! The scheduler interface and an episode driver.

use crate::simenv::{Action, Env};

pub trait Scheduler {
    fn act(&mut self, env: &Env) -> Action;
}

impl<F: FnMut(&Env) -> Action> Scheduler for F {
    fn act(&mut self, env: &Env) -> Action {
        self(env)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpisodeTotals {
    pub reward: f64,
    pub cost: f64,
    pub steps: usize,
}

/// Runs `env` to completion under `scheduler`.
pub fn run_episode(env: &mut Env, scheduler: &mut dyn Scheduler) -> EpisodeTotals {
    let mut totals = EpisodeTotals::default();
    while !env.is_done() {
        let action = scheduler.act(env);
        let out = env.step(action);
        totals.reward += out.reward;
        totals.cost += out.cost;
        totals.steps += 1;
    }
    totals
}
