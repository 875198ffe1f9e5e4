pub mod experiments;
pub mod workbench;
