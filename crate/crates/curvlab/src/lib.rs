pub mod autodiff;
pub mod calibration;
pub mod cli;
pub mod curvature;
pub mod error;
pub mod geometry;
pub mod infobounds;
pub mod models;
pub mod numkit;
pub mod trainer;
