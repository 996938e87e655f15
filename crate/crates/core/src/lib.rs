//! Grid path planning with learned guidance maps.

pub mod astar;
pub mod bench;
pub mod cli;
pub mod diff_astar;
pub mod gridmap;
pub mod numcore;
pub mod par;
pub mod pathpost;
pub mod trainer;
pub mod vit;
