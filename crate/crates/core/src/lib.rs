pub mod actuator;
pub mod config;
pub mod driver;
pub mod graph;
pub mod kinematics;
pub mod scenarios;
pub mod sequences;
pub mod sim;
pub mod templates;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/architecture.md")]
    mod architecture {}
    #[doc = include_str!("../../../book/src/actuators.md")]
    mod actuators {}
    #[doc = include_str!("../../../book/src/kinematics.md")]
    mod kinematics {}
    #[doc = include_str!("../../../book/src/module-graph.md")]
    mod module_graph {}
    #[doc = include_str!("../../../book/src/sequences.md")]
    mod sequences {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
}
