//! Run directories, file formats, the worker pool and the pipeline stages behind the `nas`
//! command-line tool.

pub mod commands;
pub mod config;
pub mod dispatch;
pub mod formats;
