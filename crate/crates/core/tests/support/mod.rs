#![allow(dead_code)]

pub mod eval_oracle;
