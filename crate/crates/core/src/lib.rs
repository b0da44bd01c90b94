//! Coarse-grained provenance extraction from database query-event logs.

pub mod catalog;
pub mod collector;
pub mod config;
pub mod event;
pub mod filters;
pub mod hooks;
pub mod pipeline;
pub mod graph;
pub mod provenance;
pub mod qqtree;
pub mod report;
pub mod runtime;
pub mod sql;
pub mod stitcher;
pub mod uploader;
pub mod workload;
