pub mod cli;
pub mod corpus;
pub mod decode;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod prefgen;
pub mod report;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
