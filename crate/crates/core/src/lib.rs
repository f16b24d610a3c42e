//! Deterministic simulator and task-level mission stack for a quadruped
//! carrying a 4-DOF arm: room navigation, visual-servo approach, operator
//! object selection, grasp-candidate filtering and pick-and-return.

pub mod arm;
pub mod geometry;
pub mod eval;
pub mod grasp;
pub mod metrics;
pub mod mission;
pub mod nav;
pub mod perception;
pub mod world;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    struct Overview;
    #[doc = include_str!("../../../book/src/scenarios.md")]
    struct Scenarios;
    #[doc = include_str!("../../../book/src/mission.md")]
    struct Mission;
    #[doc = include_str!("../../../book/src/grasping.md")]
    struct Grasping;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
