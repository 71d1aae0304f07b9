pub mod adapter;
pub mod artifact;
pub mod backbone;
pub mod config;
pub mod error;
pub mod faq;
pub mod fusion;
pub mod manifest;
pub mod platform;
pub mod reproduce;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
