//! Streaming video agent runtime.
//!
//! Frames enter through [`stream`], are cut into chunks and reasoned over by a
//! [`session::Session`] that owns a pruned KV window ([`kv`]), a hierarchical
//! memory ([`memory`]), a reminder engine ([`proactive`]) and the tool/skill
//! runtime ([`tools`]). All model calls go through [`backend::Backend`].

pub mod backend;
pub mod config;
pub mod kv;
pub mod memory;
pub mod proactive;
pub mod scenario;
pub mod session;
pub mod tools;
pub mod stream;
pub mod vector;
