#![allow(dead_code)]

pub mod mem_ref;
pub mod shadow;
pub mod schema;
